"""Model families, losses, optimiser and the training loop.

Three families share one backbone design:

* ``cla``: backbone -> Weibull -> GAP -> power-norm -> logistic head
* ``clh``: backbone fused with scattering features of the protein channel -> GAP -> head
* ``dsa``: the CLA descriptor feeds two heads; the image head sees the bag max
  over all cells of one image, the cell head sees each cell on its own.
"""

import hashlib
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from hcpl import autodiff as ad
from hcpl import layers
from hcpl import scattering as sc
from hcpl.autodiff import Tensor
from hcpl.data.augment import AugmentConfig, augment
from hcpl.data.tensorfile import read_tensor, write_tensor

N_CLASSES = layers.N_CLASSES
EPS = 1e-7
FAMILIES = ("cla", "clh", "dsa")


class TrainingError(ad.NonFiniteError):
    pass


# --- losses -------------------------------------------------------------------------

def _clamp_prob(p):
    # [eps, 1 - eps] built from relu so gradients stay defined
    lo = ad.add(ad.relu(ad.sub(p, EPS)), EPS)
    return ad.sub(1.0 - EPS, ad.relu(ad.sub(1.0 - EPS, lo)))


def _weighted_mean(per_class, w):
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (per_class.shape[-1],))
    rows = ad.div(ad.reduce_sum(ad.mul(per_class, w), axis=-1), float(w.sum()))
    return ad.reduce_mean(rows) if rows.ndim else rows


def weighted_bce(p, y, w=1.0):
    """Class-weighted binary cross-entropy; rows of a batch are averaged."""
    p = _clamp_prob(ad.as_tensor(p))
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    ll = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    return ad.mul(_weighted_mean(ll, w), -1.0)


def focal_loss(p, y, gamma_f=2.0, w=1.0):
    """BCE with each class term scaled by ``(1 - p_t)^gamma_f``.

    For soft targets the positive part is weighted by ``(1-p)^g`` and the
    negative part by ``p^g``.
    """
    if gamma_f < 0:
        raise ValueError("gamma_f must be >= 0")
    p = _clamp_prob(ad.as_tensor(p))
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    q = ad.sub(1.0, p)
    pos = ad.mul(ad.log(p), y)
    neg = ad.mul(ad.log(q), 1.0 - y)
    if gamma_f:
        pos = ad.mul(pos, ad.pow_const(q, gamma_f))
        neg = ad.mul(neg, ad.pow_const(p, gamma_f))
    return ad.mul(_weighted_mean(ad.add(pos, neg), w), -1.0)


def dsa_loss(image_probs, cell_probs, image_label, cell_labels, W1=1.0, W2=0.2, w=1.0,
             loss_fn=weighted_bce):
    """``W1 * L_image + W2 * L_cell`` with the cell term averaged over cells."""
    l1 = loss_fn(image_probs, image_label, w=w)
    l2 = loss_fn(cell_probs, cell_labels, w=w)
    return ad.add(ad.mul(l1, float(W1)), ad.mul(l2, float(W2)))


def class_weights_from_labels(labels):
    """Inverse class frequency, normalised to mean 1 over the present classes.

    Classes without positives get the smallest weight among present classes.
    """
    freq = np.asarray(labels, dtype=np.float64).sum(axis=0)
    present = freq > 0
    if not present.any():
        return np.ones(freq.shape[0])
    inv = np.zeros_like(freq)
    inv[present] = 1.0 / freq[present]
    inv[present] /= inv[present].mean()
    inv[~present] = inv[present].min()
    return inv


# --- models ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    family: str = "cla"
    channels_in: int = 4
    stage_widths: tuple = (16, 32, 64)
    resolution: int = 32
    scat_J: int = 2
    scat_L: int = 4
    protein_channel: int = 1
    # T = (R/lam)^(zeta-1) exp(-(R/gamma)^eta); zeta=2 and a wide gamma start the
    # layer close to the identity on typical responses
    weibull_lam: float = 1.0
    weibull_zeta: float = 2.0
    weibull_gamma: float = 10.0
    weibull_eta: float = 1.0

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        self.stage_widths = tuple(int(s) for s in self.stage_widths)

    def backbone(self):
        return layers.BackboneConfig(self.channels_in, self.stage_widths, self.resolution)


class _Base(layers.Module):
    n_classes = N_CLASSES

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        self.backbone = layers.ToyBackbone(cfg.backbone(), rng)

    def features(self, X):
        return self.backbone(X)

    def prepare(self, X):
        """Precomputed non-learned inputs for a batch of tiles (none by default)."""
        return None

    def predict_batch(self, X, extra=None):
        return self(X, extra)


class ClaModel(_Base):
    family = "cla"

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng)
        self.weibull = layers.WeibullParams(lam=cfg.weibull_lam, zeta=cfg.weibull_zeta,
                                            gamma=cfg.weibull_gamma, eta=cfg.weibull_eta)
        self.power_norm = layers.PowerNormParams()
        self.head = layers.Linear(cfg.backbone().feature_dim, N_CLASSES, zero=True)

    def descriptor_from_features(self, R):
        T = layers.weibull_activation(R, self.weibull)
        return layers.power_normalise(layers.global_average_pool(T), self.power_norm)

    def descriptors(self, X):
        return self.descriptor_from_features(self.features(X))

    def class_logits_from_features(self, R):
        return self.head(self.descriptor_from_features(R))

    def __call__(self, X, extra=None):
        return layers.classifier_head(self.descriptors(X), self.head)


class ClhModel(_Base):
    family = "clh"

    def __init__(self, cfg, rng):
        super().__init__(cfg, rng)
        self.bank = sc.build_filter_bank(cfg.scat_J, cfg.scat_L)
        d_scat = sc.n_scattering_channels(cfg.scat_J, cfg.scat_L)
        d = cfg.backbone().feature_dim
        self.fusion = sc.HybridFusion(d, d_scat)
        self.head = layers.Linear(d + d_scat, N_CLASSES, zero=True)

    def prepare(self, X):
        X = np.asarray(getattr(X, "data", X))
        return sc.scattering2d(X[..., self.cfg.protein_channel, :, :], self.bank).stack()

    def features(self, X, extra=None):
        if extra is None:
            extra = self.prepare(X)
        return sc.hybrid_fuse(self.backbone(X), extra, self.fusion)

    def class_logits_from_features(self, R):
        return self.head(layers.global_average_pool(R))

    def __call__(self, X, extra=None):
        R = self.features(X, extra)
        return layers.classifier_head(layers.global_average_pool(R), self.head)


class DsaModel(ClaModel):
    family = "dsa"

    def __init__(self, cfg, rng, W1=1.0, W2=0.2):
        super().__init__(cfg, rng)
        # head (inherited) is the cell stream FC2; fc_image is FC1
        self.fc_image = layers.Linear(cfg.backbone().feature_dim, N_CLASSES, zero=True)
        self.W1, self.W2 = W1, W2

    def forward_bags(self, X, bags):
        """``bags``: list of index arrays into the rows of X, one per source image.

        Returns (image_probs (B, C), cell_probs (N, C)).
        """
        if not bags or any(len(b) == 0 for b in bags):
            raise ad.ShapeError("dsa_forward: empty bag")
        V = self.descriptors(X)
        pooled = []
        for b in bags:
            whole = len(b) == V.shape[0] and np.array_equal(b, np.arange(len(b)))
            rows = V if whole else _take_rows(V, b)
            pooled.append(ad.reshape(layers.bag_max_pool(rows), (1, -1)))
        Vimg = pooled[0] if len(pooled) == 1 else ad.concat(pooled, axis=0)
        return (layers.classifier_head(Vimg, self.fc_image),
                layers.classifier_head(V, self.head))

    def predict_image(self, X):
        return self.forward_bags(X, [np.arange(X.shape[0])])


def dsa_forward(model, bag):
    """Single bag: (image_probs (C,), cell_probs (N, C))."""
    img, cells = model.forward_bags(bag, [np.arange(ad.as_tensor(bag).shape[0])])
    return ad.reshape(img, (-1,)), cells


def _take_rows(V, idx):
    # row gather as a selection-matrix product so it stays differentiable
    sel = np.zeros((len(idx), V.shape[0]))
    sel[np.arange(len(idx)), idx] = 1.0
    return ad.matmul(Tensor(sel), V)


def build_model(cfg, seed=0):
    rng = np.random.default_rng(seed)
    cls = {"cla": ClaModel, "clh": ClhModel, "dsa": DsaModel}[cfg.family]
    return cls(cfg, rng)


# --- optimisation ---------------------------------------------------------------------

def cosine_lr(t, T, lr0, lr_min):
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2``."""
    if T <= 0:
        return lr0
    return lr_min + (lr0 - lr_min) * (1.0 + np.cos(np.pi * min(t, T) / T)) / 2.0


class Adam:
    """Adam; ``scalar_lr_scale`` multiplies the step of single-element parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, scalar_lr_scale=1.0):
        self.params = list(params)
        self.scalar_lr_scale = scalar_lr_scale
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = lr * (self.scalar_lr_scale if p.data.size == 1 else 1.0)
            p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_min_ratio: float = 0.01
    scalar_lr_scale: float = 0.1  # Weibull / power-norm scalars move slower
    epochs: int = 10
    batch_size: int = 20
    loss: str = "bce"
    focal_gamma: float = 2.0
    class_weights: object = None  # None -> inverse frequency of the targets
    W1: float = 1.0
    W2: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss not in ("bce", "focal"):
            raise ValueError("loss must be 'bce' or 'focal'")
        if self.W1 < 0 or self.W2 < 0:
            raise ValueError("W1 and W2 must be non-negative")
        if self.class_weights is not None and np.any(np.asarray(self.class_weights) <= 0):
            raise ValueError("class weights must be positive")
        self.augment.validate()

    def loss_fn(self):
        if self.loss == "bce":
            return weighted_bce
        g = self.focal_gamma
        return lambda p, y, w=1.0: focal_loss(p, y, g, w)


@dataclass
class CellData:
    """Training or inference cells.

    ``tiles`` (N, C, H, W); ``masks`` (N, H, W) bool; ``targets`` (N, 19);
    ``groups`` (N,) source image index per cell; ``image_targets`` maps a group
    to its image-level label (defaults to the max over its cells).
    """

    tiles: np.ndarray
    masks: np.ndarray
    targets: np.ndarray = None
    groups: np.ndarray = None
    image_targets: dict = None

    def __post_init__(self):
        n = len(self.tiles)
        if self.groups is None:
            self.groups = np.arange(n)
        self.groups = np.asarray(self.groups)
        if self.targets is not None and self.image_targets is None:
            self.image_targets = {g: self.targets[self.groups == g].max(axis=0)
                                  for g in np.unique(self.groups)}

    def __len__(self):
        return len(self.tiles)


@dataclass
class ModelBundle:
    model: object
    model_config: ModelConfig
    train_config: TrainConfig = None
    seed: int = 0
    loss_trace: list = field(default_factory=list)
    class_weights: np.ndarray = None

    @property
    def family(self):
        return self.model_config.family

    def config_hash(self):
        text = repr(sorted(asdict(self.model_config).items()))
        if self.train_config is not None:
            tc = asdict(self.train_config)
            tc["class_weights"] = None if self.class_weights is None else list(
                self.class_weights)
            text += repr(sorted((k, repr(v)) for k, v in tc.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def save(self, root):
        os.makedirs(os.path.join(root, "params"), exist_ok=True)
        names = []
        for name, arr in self.model.state_dict().items():
            write_tensor(os.path.join(root, "params", name + ".hcpl"), arr)
            names.append(name)
        mc = self.model_config
        lines = [
            f"family = {mc.family}",
            f"config_hash = {self.config_hash()}",
            f"seed = {self.seed}",
            f"channels_in = {mc.channels_in}",
            "stage_widths = " + ",".join(str(s) for s in mc.stage_widths),
            f"resolution = {mc.resolution}",
            f"scat_J = {mc.scat_J}",
            f"scat_L = {mc.scat_L}",
            f"protein_channel = {mc.protein_channel}",
            "params = " + ",".join(names),
        ]
        if self.class_weights is not None:
            lines.append("class_weights = " + ",".join(repr(float(v)) for v in self.class_weights))
        with open(os.path.join(root, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(os.path.join(root, "loss_trace.txt"), "w") as fh:
            fh.writelines(f"{v!r}\n" for v in self.loss_trace)

    @classmethod
    def load(cls, root):
        path = os.path.join(root, "manifest.txt")
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path) as fh:
            kv = dict(line.rstrip("\n").split(" = ", 1) for line in fh if " = " in line)
        mc = ModelConfig(
            family=kv["family"], channels_in=int(kv["channels_in"]),
            stage_widths=tuple(int(s) for s in kv["stage_widths"].split(",")),
            resolution=int(kv["resolution"]), scat_J=int(kv["scat_J"]),
            scat_L=int(kv["scat_L"]), protein_channel=int(kv["protein_channel"]))
        model = build_model(mc)
        state = {n: read_tensor(os.path.join(root, "params", n + ".hcpl"))
                 for n in kv["params"].split(",")}
        model.load_state_dict(state)
        trace = []
        tpath = os.path.join(root, "loss_trace.txt")
        if os.path.exists(tpath):
            with open(tpath) as fh:
                trace = [float(v) for v in fh if v.strip()]
        cw = kv.get("class_weights")
        return cls(model, mc, None, int(kv["seed"]), trace,
                   None if cw is None else np.array([float(v) for v in cw.split(",")]))


def _augment_batch(data, idx, cfg, epoch):
    if cfg.augment is None:
        return data.tiles[idx]
    out = np.empty(data.tiles[idx].shape)
    for k, i in enumerate(idx):
        out[k], _ = augment(data.tiles[i], data.masks[i], cfg.augment,
                            (cfg.seed, epoch, int(i)))
    return out


def _batches(data, cfg, rng, family):
    """Index batches for one epoch. DSA batches are whole bags from single images."""
    if family != "dsa":
        perm = rng.permutation(len(data))
        return [[perm[i:i + cfg.batch_size]] for i in range(0, len(data), cfg.batch_size)]
    groups = np.unique(data.groups)
    order = rng.permutation(groups)
    out, cur, size = [], [], 0
    for g in order:
        members = np.flatnonzero(data.groups == g)
        if len(members) > cfg.batch_size:
            members = np.sort(rng.choice(members, cfg.batch_size, replace=False))
        if cur and size + len(members) > cfg.batch_size:
            out.append(cur)
            cur, size = [], 0
        cur.append(members)
        size += len(members)
    if cur:
        out.append(cur)
    return out


def train(model, data, cfg, model_config=None, log=None):
    """Fit ``model`` on ``data``; returns a :class:`ModelBundle` with the loss trace.

    Deterministic given ``cfg.seed``. Trained parameters are rounded to float32
    so a saved bundle reloads to exactly the same predictions.
    """
    cfg.validate()
    if len(data) == 0 or data.targets is None:
        raise ValueError("training data is empty or unlabelled")
    family = model.family
    w = (class_weights_from_labels(data.targets) if cfg.class_weights is None
         else np.asarray(cfg.class_weights, dtype=np.float64))
    loss_fn = cfg.loss_fn()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, scalar_lr_scale=cfg.scalar_lr_scale)
    plan = [_batches(data, cfg, rng, family) for _ in range(cfg.epochs)]
    T = sum(len(p) for p in plan)
    lr_min = cfg.lr0 * cfg.lr_min_ratio
    trace = []
    step = 0
    for epoch, batches in enumerate(plan):
        epoch_loss = []
        for bags in batches:
            idx = np.concatenate(bags)
            X = _augment_batch(data, idx, cfg, epoch)
            model.zero_grad()
            if family == "dsa":
                offsets = np.cumsum([0] + [len(b) for b in bags])
                local = [np.arange(offsets[k], offsets[k + 1]) for k in range(len(bags))]
                img_p, cell_p = model.forward_bags(Tensor(X), local)
                img_y = np.stack([data.image_targets[data.groups[b[0]]] for b in bags])
                loss = dsa_loss(img_p, cell_p, img_y, data.targets[idx], cfg.W1, cfg.W2, w,
                                loss_fn)
            else:
                p = model(Tensor(X), model.prepare(X))
                loss = loss_fn(p, data.targets[idx], w=w)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {step}")
            ad.backward(loss)
            for name, p_ in model.named_parameters().items():
                if p_.grad is not None and not np.all(np.isfinite(p_.grad)):
                    raise TrainingError(f"non-finite gradient in {name} at step {step}")
            opt.step(cosine_lr(step, T, cfg.lr0, lr_min))
            step += 1
            epoch_loss.append(value)
        trace.append(float(np.mean(epoch_loss)) if epoch_loss else float("nan"))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {trace[-1]:.5f}")
    for p_ in params:
        p_.data = p_.data.astype(np.float32).astype(np.float64)
    return ModelBundle(model, model_config or model.cfg, cfg, cfg.seed, trace, w)


@dataclass
class PredictionMatrix:
    cell_ids: list
    cell_probs: np.ndarray  # (N, 19)
    image_probs: np.ndarray = None  # (N, 19), DSA only: probs of each cell's source image


def predict(bundle, data, cell_ids=None, chunk=64):
    """Per-cell probabilities; DSA also yields per-image probabilities for each cell."""
    model = bundle.model if isinstance(bundle, ModelBundle) else bundle
    res = model.cfg.resolution
    if data.tiles.shape[-2:] != (res, res):
        raise ad.ShapeError(f"cells must be {res}x{res}, got {data.tiles.shape[-2:]}")
    n = len(data)
    cell_ids = list(cell_ids) if cell_ids is not None else [str(i) for i in range(n)]
    out = np.zeros((n, N_CLASSES))
    img = np.zeros((n, N_CLASSES)) if model.family == "dsa" else None
    with ad.no_grad():
        if model.family == "dsa":
            for g in np.unique(data.groups):
                idx = np.flatnonzero(data.groups == g)
                ip, cp = model.predict_image(Tensor(data.tiles[idx]))
                out[idx] = cp.data
                img[idx] = ip.data[0]
        else:
            for s in range(0, n, chunk):
                X = data.tiles[s:s + chunk]
                out[s:s + chunk] = model(Tensor(X), model.prepare(X)).data
    return PredictionMatrix(cell_ids, out, img)
