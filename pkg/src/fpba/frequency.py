"""Orthonormal 2-D DCT, randomized spectrum transformation, and spectrum saliency.

Conventions: image batches are rank-4 tensors (B, C, H, W); the DCT acts on the
last two axes independently per channel; the DC coefficient sits at index
(0, 0) of each channel's spectrum. The type-II DCT with orthonormal scaling is
its own inverse up to transposition, so ``idct2(dct2(x)) == x`` to float
precision and both transforms preserve squared L2 energy.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import CapabilityError, InvalidInputError, InvalidParameterError

__all__ = [
    "dct_matrix",
    "dct2",
    "idct2",
    "SpectrumTransformParams",
    "spectrum_transform",
    "SaliencyMap",
    "spectrum_saliency",
]


@functools.lru_cache(maxsize=64)
def _dct_matrix_cached(n: int, dtype: torch.dtype, device: str) -> Tensor:
    # Build in float64 and cast so float32 callers get correctly rounded entries.
    i = torch.arange(n, dtype=torch.float64)
    k = i.unsqueeze(1)
    mat = torch.cos(math.pi * (2.0 * i + 1.0) * k / (2.0 * n))
    mat[0] *= math.sqrt(1.0 / n)
    mat[1:] *= math.sqrt(2.0 / n)
    return mat.to(dtype=dtype, device=torch.device(device))


def dct_matrix(n: int, dtype: torch.dtype = torch.float32, device: str | torch.device = "cpu") -> Tensor:
    """Return the orthonormal type-II DCT basis matrix of size ``n`` x ``n``.

    Row k holds sqrt((1 if k==0 else 2)/n) * cos(pi*(2i+1)*k/(2n)) over i, so
    the matrix is orthogonal: ``C @ C.T == I``.
    """
    if n < 1:
        raise InvalidParameterError(f"DCT size must be >= 1, got {n}")
    return _dct_matrix_cached(n, dtype, str(torch.device(device)))


def _check_batch(x: Tensor, name: str) -> None:
    if not isinstance(x, Tensor):
        raise InvalidInputError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise InvalidInputError(f"{name} must be rank-4 (B, C, H, W), got shape {tuple(x.shape)}")
    if not x.is_floating_point():
        raise InvalidInputError(f"{name} must be floating point, got {x.dtype}")
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite values")


def dct2(x: Tensor) -> Tensor:
    """Orthonormal 2-D DCT of each channel of a (B, C, H, W) batch."""
    _check_batch(x, "x")
    h, w = x.shape[-2], x.shape[-1]
    ch = dct_matrix(h, x.dtype, x.device)
    cw = dct_matrix(w, x.dtype, x.device)
    return torch.matmul(torch.matmul(ch, x), cw.transpose(0, 1))


def idct2(s: Tensor) -> Tensor:
    """Inverse of :func:`dct2`; exact up to float rounding."""
    _check_batch(s, "s")
    h, w = s.shape[-2], s.shape[-1]
    ch = dct_matrix(h, s.dtype, s.device)
    cw = dct_matrix(w, s.dtype, s.device)
    return torch.matmul(torch.matmul(ch.transpose(0, 1), s), cw)


@dataclass(frozen=True)
class SpectrumTransformParams:
    """Parameters of the randomized spectrum transformation.

    ``rho`` scales the multiplicative spectral mask, drawn elementwise from
    U(1 - rho, 1 + rho). ``sigma_noise`` is the stddev of Gaussian noise added
    in the pixel domain before the forward DCT. ``rng_seed`` seeds the draw
    stream when no generator is supplied at call time.
    """

    rho: float = 0.5
    sigma_noise: float = 8.0 / 255.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho < 1.0:
            raise InvalidParameterError(f"rho must be in [0, 1), got {self.rho}")
        if self.sigma_noise < 0.0:
            raise InvalidParameterError(f"sigma_noise must be >= 0, got {self.sigma_noise}")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "SpectrumTransformParams":
        """Parameters that make the transform an exact no-op."""
        return cls(rho=0.0, sigma_noise=0.0, rng_seed=rng_seed)

    def make_generator(self, device: str | torch.device = "cpu") -> torch.Generator:
        g = torch.Generator(device=str(torch.device(device).type))
        g.manual_seed(self.rng_seed)
        return g


def spectrum_transform(
    x: Tensor,
    params: SpectrumTransformParams,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Apply the randomized spectrum transformation Gamma to an image batch.

    Adds pixel-domain Gaussian noise, takes the DCT, multiplies elementwise by
    a random mask from U(1 - rho, 1 + rho), and inverts the DCT. Draw order is
    noise first, then mask, so a shared generator reproduces draws exactly.
    Gradients flow through to ``x``; the output is not clamped. With
    ``rho == 0`` and ``sigma_noise == 0`` the input tensor is returned as-is
    (bit-identical, no DCT roundtrip).
    """
    _check_batch(x, "x")
    if params.rho == 0.0 and params.sigma_noise == 0.0:
        return x
    if generator is None:
        generator = params.make_generator(x.device)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    noisy = x + params.sigma_noise * noise
    mask_u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    mask = 1.0 - params.rho + 2.0 * params.rho * mask_u
    return idct2(dct2(noisy) * mask)


@dataclass
class SaliencyMap:
    """Per-channel spectrum saliency, max-min normalized to [0, 1].

    ``values`` has shape (C, H, W) and indexes DCT coefficients, not pixels:
    entry (c, k, l) measures how strongly the model's loss responds to spectral
    coefficient (k, l) of channel c, averaged over the batch it was computed on.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise InvalidInputError(f"saliency values must be (C, H, W), got {self.values.shape}")

    def save_npz(self, path: str | Path) -> None:
        np.savez_compressed(path, values=self.values)

    @classmethod
    def load_npz(cls, path: str | Path) -> "SaliencyMap":
        with np.load(path) as f:
            return cls(values=f["values"])

    def save_png(self, path: str | Path, title: str | None = None) -> None:
        """Render the channel-mean map as a heatmap image."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
        im = ax.imshow(self.values.mean(axis=0), cmap="viridis", origin="upper")
        ax.set_xlabel("horizontal frequency index")
        ax.set_ylabel("vertical frequency index")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def spectrum_saliency(model: torch.nn.Module, x: Tensor, y: Tensor) -> SaliencyMap:
    """Map which spectral coefficients drive the model's classification loss.

    Reparameterizes the batch by its DCT coefficients, differentiates the
    summed binary cross-entropy at the true labels with respect to those
    coefficients, takes absolute values, averages over the batch, and max-min
    normalizes each channel independently.
    """
    _check_batch(x, "x")
    if y.shape[0] != x.shape[0]:
        raise InvalidInputError(f"labels ({y.shape[0]}) and images ({x.shape[0]}) disagree on batch size")
    coeffs = dct2(x).detach().requires_grad_(True)
    recon = idct2(coeffs)
    logits = model(recon)
    loss = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, y.to(dtype=logits.dtype), reduction="sum"
    )
    try:
        (grad,) = torch.autograd.grad(loss, coeffs)
    except RuntimeError as exc:
        raise CapabilityError(f"model does not expose a gradient path to its input: {exc}") from exc
    sal = grad.abs().mean(dim=0)  # (C, H, W)
    flat = sal.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    # A constant channel normalizes to all zeros rather than dividing by zero.
    norm = torch.where(span > 0, (sal - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(sal))
    return SaliencyMap(values=norm.detach().cpu().numpy())
