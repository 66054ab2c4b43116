"""Network layers: Weibull activation, pooling, power normalisation, heads, backbone, Grad-CAM.

Feature maps are channel-first: a single map is (D, H, W) and a batch is
(N, D, H, W). Learnable positive scalars are stored as their logarithms so
gradient steps can never push them out of range.
"""

from dataclasses import dataclass

import numpy as np

from hcpl import autodiff as ad
from hcpl.autodiff import Tensor

N_CLASSES = 19

# floors keep log() finite at rectified zeros; see weibull_activation
_POWER_FLOOR = 1e-6
_EXP_FLOOR = 1e-12


class Module:
    """Parameter container; parameters are discovered from instance attributes."""

    def named_parameters(self):
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.named_parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        for k, v in m.named_parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _log_param(value):
    if value <= 0:
        raise ValueError(f"parameter must be positive, got {value}")
    return Tensor(np.log(value), requires_grad=True)


def _clamp_min(x, floor):
    # max(x, floor) from primitives: relu(x - floor) + floor
    return ad.add(ad.relu(ad.sub(x, floor)), floor)


class WeibullParams(Module):
    """λ, ζ, γ, η of the Weibull activation, each kept positive via exp."""

    def __init__(self, lam=1.0, zeta=1.0, gamma=1.0, eta=1.0):
        self.log_lam = _log_param(lam)
        self.log_zeta = _log_param(zeta)
        self.log_gamma = _log_param(gamma)
        self.log_eta = _log_param(eta)

    def values(self):
        return {k: float(np.exp(getattr(self, "log_" + k).data))
                for k in ("lam", "zeta", "gamma", "eta")}


class PowerNormParams(Module):
    def __init__(self, alpha=1.0, beta=1.0):
        self.log_alpha = _log_param(alpha)
        self.log_beta = _log_param(beta)

    def values(self):
        return {"alpha": float(np.exp(self.log_alpha.data)),
                "beta": float(np.exp(self.log_beta.data))}


def weibull_activation(R, p):
    """``T = (R/λ)^(ζ-1) · exp(-(R/γ)^η)`` elementwise.

    R must be non-negative. Rectified zeros are floored at 1e-6 inside the
    power term and 1e-12 inside the exponential so both logarithms exist.
    """
    R = ad.as_tensor(R)
    if np.any(R.data < 0):
        raise ad.DomainError("weibull_activation: negative response")
    zeta = ad.exp(p.log_zeta)
    eta = ad.exp(p.log_eta)
    log_rp = ad.log(_clamp_min(R, _POWER_FLOOR))
    log_re = ad.log(_clamp_min(R, _EXP_FLOOR))
    power = ad.mul(ad.sub(zeta, 1.0), ad.sub(log_rp, p.log_lam))
    decay = ad.exp(ad.mul(eta, ad.sub(log_re, p.log_gamma)))
    return ad.exp(ad.sub(power, decay))


def global_average_pool(T):
    """Mean over the two spatial axes: (D,H,W) -> (D,), (N,D,H,W) -> (N,D)."""
    T = ad.as_tensor(T)
    if T.ndim not in (3, 4):
        raise ad.ShapeError(f"global_average_pool: expected rank 3 or 4, got {T.ndim}")
    return ad.reduce_mean(T, axis=(-2, -1))


def power_normalise(S, p):
    """``α · s^β`` elementwise on a non-negative descriptor."""
    S = ad.as_tensor(S)
    if np.any(S.data < 0):
        raise ad.DomainError("power_normalise: negative input")
    beta = ad.exp(p.log_beta)
    log_s = ad.log(_clamp_min(S, _EXP_FLOOR))
    return ad.exp(ad.add(p.log_alpha, ad.mul(beta, log_s)))


def bag_max_pool(descriptors):
    """Elementwise max over a bag of N descriptors (N, D) -> (D,)."""
    descriptors = ad.as_tensor(descriptors)
    if descriptors.ndim != 2 or descriptors.shape[0] == 0:
        raise ad.ShapeError("bag_max_pool: need a non-empty (N, D) bag")
    return ad.reduce_max(descriptors, axis=0)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, zero=False):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)


def classifier_head(S, head):
    """Affine map then independent logistic per class, so outputs lie in (0, 1)."""
    return ad.sigmoid(head(S))


@dataclass
class BackboneConfig:
    channels_in: int = 4
    stage_widths: tuple = (8, 16, 32)
    resolution: int = 32

    @property
    def feature_dim(self):
        return self.stage_widths[-1]

    @property
    def spatial_out(self):
        return self.resolution // 2 ** len(self.stage_widths)


class ToyBackbone(Module):
    """Stride-2 conv + ReLU stages; the last stage is rectified so R >= 0."""

    def __init__(self, cfg, rng=None):
        if cfg.resolution % 2 ** len(cfg.stage_widths):
            raise ValueError("resolution must be divisible by 2**stages")
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        c_in = cfg.channels_in
        for c_out in cfg.stage_widths:
            std = np.sqrt(2.0 / (c_in * 9))
            self.weights.append(Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out

    def named_parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        return out

    def __call__(self, X):
        X = ad.as_tensor(X)
        res = self.cfg.resolution
        if X.ndim not in (3, 4) or X.shape[-3:] != (self.cfg.channels_in, res, res):
            raise ad.ShapeError(
                f"backbone expects (N, {self.cfg.channels_in}, {res}, {res}), got {X.shape}")
        h = X
        for w, b in zip(self.weights, self.biases):
            h = ad.relu(ad.conv2d(h, w, b, stride=2, padding=1))
        return h


def toy_backbone(X, backbone):
    return backbone(X)


def grad_cam(model, X, class_idx):
    """Gradient-weighted class activation map over the final feature grid.

    ``model`` must provide ``features(X)`` giving R (D, H, W) for one cell and
    ``class_logits_from_features(R)`` giving per-class scores. Channel weights
    are spatially averaged gradients of the chosen score; the weighted sum is
    rectified and min-max scaled, all zeros when flat.
    """
    n_classes = getattr(model, "n_classes", N_CLASSES)
    if not 0 <= class_idx < n_classes:
        raise IndexError(f"class_idx {class_idx} out of range")
    with ad.no_grad():
        R = model.features(X)
    if R.ndim == 4 and R.shape[0] != 1:
        raise ad.ShapeError("grad_cam explains one cell at a time")
    R = Tensor(R.data, requires_grad=True)  # batched models keep their leading axis
    logits = model.class_logits_from_features(R)
    score = ad.reshape(logits, (-1,))
    onehot = np.zeros(score.shape[0])
    onehot[class_idx] = 1.0
    ad.backward(ad.reduce_sum(ad.mul(score, onehot)))
    grad = R.grad.reshape(R.shape[-3:])
    feats = R.data.reshape(R.shape[-3:])
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, feats, axes=(0, 0)), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)
