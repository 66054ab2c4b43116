"""Two-layer wavelet scattering with Morlet filters, plus the hybrid fusion block.

Convolutions are circular (computed in the Fourier domain), which makes the
transform exactly covariant to circular shifts before subsampling.
"""

from dataclasses import dataclass, field

import numpy as np

from hcpl import autodiff as ad
from hcpl.autodiff import Tensor
from hcpl.layers import Module


@dataclass
class FilterBank:
    J: int
    L: int
    kernel_size: int
    psi: np.ndarray  # (J, L, k, k) complex
    phi: np.ndarray  # (k, k) real, sums to 1
    _fft_cache: dict = field(default_factory=dict, repr=False)

    def spectra(self, shape):
        """Fourier transforms of the kernels embedded on a circular grid of ``shape``."""
        if shape not in self._fft_cache:
            self._fft_cache[shape] = (
                np.fft.fft2(_embed(self.psi, shape)),
                np.fft.fft2(_embed(self.phi, shape)).real,
            )
        return self._fft_cache[shape]


def _embed(kernel, shape):
    # place the kernel centre at index (0, 0), wrapping negative offsets
    H, W = shape
    k = kernel.shape[-1]
    r = k // 2
    out = np.zeros(kernel.shape[:-2] + (H, W), dtype=kernel.dtype)
    rows = (np.arange(k) - r) % H
    cols = (np.arange(k) - r) % W
    for a in range(k):
        for b in range(k):
            out[..., rows[a], cols[b]] += kernel[..., a, b]
    return out


def _gaussian(k, sigma, theta=0.0, slant=1.0):
    r = k // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    c, s = np.cos(theta), np.sin(theta)
    u = c * x + s * y
    v = -s * x + c * y
    return np.exp(-(u ** 2 + (v / slant) ** 2) / (2 * sigma ** 2)), u


def build_filter_bank(J=2, L=4, kernel_size=None):
    """Morlet band-pass filters at ``J`` dyadic scales and ``L`` orientations.

    Scale ``j`` uses envelope width 0.8·2^j and carrier frequency (3π/4)/2^j;
    the carrier offset is chosen so every band-pass kernel sums to zero. The
    low-pass is a Gaussian of width 0.8·2^J normalised to unit sum.
    """
    if J < 1 or L < 1:
        raise ValueError("J and L must be >= 1")
    if kernel_size is None:
        kernel_size = 4 * 2 ** J + 1
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    k = kernel_size
    psi = np.zeros((J, L, k, k), dtype=complex)
    slant = min(1.0, 4.0 / L)
    for j in range(J):
        sigma = 0.8 * 2 ** j
        xi = 0.75 * np.pi / 2 ** j
        for l in range(L):
            env, u = _gaussian(k, sigma, np.pi * l / L, slant)
            env = env / env.sum()
            wave = np.exp(1j * xi * u)
            kappa = (env * wave).sum() / env.sum()
            psi[j, l] = env * (wave - kappa)
    phi, _ = _gaussian(k, 0.8 * 2 ** J)
    phi = phi / phi.sum()
    return FilterBank(J, L, k, psi, phi)


@dataclass
class ScatteringCoeffs:
    order0: np.ndarray
    order1: np.ndarray
    order2: np.ndarray

    def stack(self):
        return np.concatenate([self.order0, self.order1, self.order2], axis=-3)

    @property
    def n_channels(self):
        return self.order0.shape[-3] + self.order1.shape[-3] + self.order2.shape[-3]


def n_scattering_channels(J, L, max_order=2):
    return 1 + J * L + (L * L * J * (J - 1) // 2 if max_order == 2 else 0)


def scattering2d(x, bank, max_order=2):
    """Scattering coefficients of an (H, W) image or an (N, H, W) stack.

    Each output channel is ``(U * φ)`` subsampled by 2^J, where ``U`` is the
    image (order 0), ``|x * ψ_λ1|`` (order 1), or ``||x * ψ_λ1| * ψ_λ2|`` with
    the second scale strictly coarser (order 2).
    """
    if max_order not in (1, 2):
        raise ValueError("max_order must be 1 or 2")
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    step = 2 ** bank.J
    if H % step or W % step:
        raise ValueError(f"image size {H}x{W} not divisible by 2^J={step}")
    psi_hat, phi_hat = bank.spectra((H, W))
    J, L = bank.J, bank.L

    def lowpass(u_hat):
        return np.fft.ifft2(u_hat * phi_hat).real[..., ::step, ::step]

    x_hat = np.fft.fft2(x)
    order0 = lowpass(x_hat)[..., None, :, :]
    # U1: (..., J, L, H, W)
    u1 = np.abs(np.fft.ifft2(x_hat[..., None, None, :, :] * psi_hat))
    u1_hat = np.fft.fft2(u1)
    order1 = lowpass(u1_hat).reshape(x.shape[:-2] + (J * L, H // step, W // step))
    blocks = []
    if max_order == 2:
        for j1 in range(J):
            for l1 in range(L):
                for j2 in range(j1 + 1, J):
                    u2 = np.abs(np.fft.ifft2(u1_hat[..., j1, l1, None, :, :] * psi_hat[j2]))
                    blocks.append(lowpass(np.fft.fft2(u2)))
    if blocks:
        order2 = np.concatenate(blocks, axis=-3)
    else:
        order2 = np.zeros(x.shape[:-2] + (0, H // step, W // step))
    return ScatteringCoeffs(order0, order1, order2)


def frame_bound(bank, shape):
    """Littlewood-Paley maximum ``max_ω |φ̂|² + Σ_λ |ψ̂_λ|²`` on the DFT grid.

    With ``A`` this value, the scattering norm satisfies
    ``‖S x‖ ≤ max(A, 1) · ‖x‖``.
    """
    psi_hat, phi_hat = bank.spectra(tuple(shape))
    lp = phi_hat ** 2 + (np.abs(psi_hat) ** 2).sum(axis=(0, 1))
    return float(lp.max())


def resample_nearest(a, size):
    """Nearest-neighbour resampling of the last two axes to ``size`` (h, w)."""
    h, w = size
    H, W = a.shape[-2:]
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return a[..., rows[:, None], cols[None, :]]


class HybridFusion(Module):
    """Concatenate deep and scattering channels, then a 1×1 mixing convolution.

    The mixing weight starts as the identity, so the block initially passes
    both branches through unchanged.
    """

    def __init__(self, d_deep, d_scat):
        d = d_deep + d_scat
        self.d_deep, self.d_scat = d_deep, d_scat
        self.mix_weight = Tensor(np.eye(d).reshape(d, d, 1, 1), requires_grad=True)
        self.mix_bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, deep, scat):
        return hybrid_fuse(deep, scat, self)


def hybrid_fuse(deep, scat, block):
    deep = ad.as_tensor(deep)
    scat_arr = scat.stack() if isinstance(scat, ScatteringCoeffs) else np.asarray(
        getattr(scat, "data", scat))
    if deep.ndim != scat_arr.ndim or deep.shape[:-3] != scat_arr.shape[:-3]:
        raise ad.ShapeError(f"hybrid_fuse: batch mismatch {deep.shape} vs {scat_arr.shape}")
    h, w = deep.shape[-2:]
    hs, ws = scat_arr.shape[-2:]
    if (hs % h and h % hs) or (ws % w and w % ws):
        raise ad.ShapeError(f"hybrid_fuse: cannot align {hs}x{ws} to {h}x{w}")
    if scat_arr.shape[-3] != block.d_scat or deep.shape[-3] != block.d_deep:
        raise ad.ShapeError("hybrid_fuse: channel counts do not match the block")
    scat_r = Tensor(resample_nearest(scat_arr, (h, w)))
    fused = ad.concat([deep, scat_r], axis=-3)
    return ad.conv2d(fused, block.mix_weight, block.mix_bias)
