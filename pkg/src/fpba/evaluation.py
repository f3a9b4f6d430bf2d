"""Measurement harness for attack experiments.

Covers the four report surfaces: attack success rate on correctly classified
inputs, surrogate-to-victim transfer matrices with per-victim filtering,
gradient-magnitude diagnostics for detecting masked (vanishing) gradients,
and perceptual quality metrics (MSE on the 8-bit scale, PSNR, SSIM).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .attacks import AttackResult
from .detectors import input_gradient, predict_labels
from .errors import InvalidInputError, InvalidParameterError

__all__ = [
    "MatrixCell",
    "TransferMatrix",
    "GradientDiagnostic",
    "QualityReport",
    "attack_success_rate",
    "transfer_eval",
    "gradient_diagnostic",
    "image_quality",
    "ssim_score",
    "per_family_accuracy",
]


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.dim() != 4 or b.dim() != 4:
        raise InvalidInputError(f"expected rank-4 batches, got {a.dim()} and {b.dim()}")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    for t, name in ((a, "first"), (b, "second")):
        if not torch.isfinite(t).all():
            raise InvalidInputError(f"{name} batch contains non-finite values")
        if t.numel() and (t.min() < 0 or t.max() > 1):
            raise InvalidInputError(f"{name} batch must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Success rates and transfer matrices
# ---------------------------------------------------------------------------


def attack_success_rate(victim: torch.nn.Module, result: AttackResult, y: Tensor) -> float:
    """Percent of adversarial inputs whose predicted label differs from ``y``.

    The caller is responsible for having restricted the batch to inputs the
    victim classified correctly when clean; this routine only counts flips.
    """
    if result.adversarial.shape[0] == 0:
        raise InvalidInputError("cannot score an empty adversarial batch")
    if result.adversarial.shape[0] != y.shape[0]:
        raise InvalidInputError("label count does not match adversarial batch")
    preds = predict_labels(victim, result.adversarial)
    return 100.0 * (preds != y.to(preds.device)).float().mean().item()


@dataclass(frozen=True)
class MatrixCell:
    """One (surrogate, attack, victim) entry of a transfer matrix."""

    asr: float  # percent of counted examples that flipped the victim
    n: int  # examples counted (victim-correct on the clean originals)
    flagged: bool  # true when n fell below the configured minimum


@dataclass
class TransferMatrix:
    """ASR grid with rows (surrogate, attack) and one column per victim.

    The per-row average covers every victim except the surrogate itself, so
    it summarizes transfer rather than white-box strength.
    """

    surrogates: tuple
    attacks: tuple
    victims: tuple
    cells: dict = field(default_factory=dict)
    min_samples: int = 50

    def cell(self, surrogate: str, attack: str, victim: str) -> MatrixCell:
        try:
            return self.cells[(surrogate, attack, victim)]
        except KeyError:
            raise InvalidParameterError(
                f"no cell for surrogate={surrogate!r} attack={attack!r} victim={victim!r}"
            ) from None

    def row_average(self, surrogate: str, attack: str) -> float:
        """Mean ASR over victims other than the surrogate; NaN if none exist."""
        vals = [
            self.cell(surrogate, attack, v).asr for v in self.victims if v != surrogate
        ]
        if not vals:
            return math.nan
        return sum(vals) / len(vals)

    def to_rows(self) -> list:
        """Long-format rows, one per cell, with the row average repeated."""
        rows = []
        for s in self.surrogates:
            for a in self.attacks:
                avg = self.row_average(s, a)
                for v in self.victims:
                    c = self.cell(s, a, v)
                    rows.append(
                        {
                            "surrogate": s,
                            "attack": a,
                            "victim": v,
                            "asr_percent": c.asr,
                            "n_evaluated": c.n,
                            "white_box": v == s,
                            "flagged": c.flagged,
                            "row_average": avg,
                        }
                    )
        return rows

    def save_csv(self, path: str | Path) -> None:
        rows = self.to_rows()
        fields = [
            "surrogate",
            "attack",
            "victim",
            "asr_percent",
            "n_evaluated",
            "white_box",
            "flagged",
            "row_average",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                out = dict(row)
                out["asr_percent"] = repr(row["asr_percent"])
                out["row_average"] = repr(row["row_average"])
                writer.writerow(out)

    def as_dict(self) -> dict:
        return {
            "victims": list(self.victims),
            "min_samples": self.min_samples,
            "rows": [
                {
                    "surrogate": s,
                    "attack": a,
                    "average": self.row_average(s, a),
                    "cells": {
                        v: {
                            "asr": self.cell(s, a, v).asr,
                            "n": self.cell(s, a, v).n,
                            "flagged": self.cell(s, a, v).flagged,
                        }
                        for v in self.victims
                    },
                }
                for s in self.surrogates
                for a in self.attacks
            ],
        }


def transfer_eval(
    surrogates: Mapping[str, torch.nn.Module],
    victims: Mapping[str, torch.nn.Module],
    attacks: Mapping[str, Callable[[str, torch.nn.Module, Tensor, Tensor], AttackResult]],
    x: Tensor,
    y: Tensor,
    min_samples: int = 50,
) -> TransferMatrix:
    """Craft on each surrogate, score on every victim, assemble the matrix.

    Each attack callable receives ``(surrogate_name, surrogate_model, x, y)``
    already restricted to inputs the surrogate classifies correctly, and must
    return an :class:`AttackResult`. Scoring then re-filters per victim: a
    cell only counts examples whose clean original that victim got right.
    Cells with fewer than ``min_samples`` counted examples are flagged.
    """
    if not surrogates or not victims or not attacks:
        raise InvalidInputError("surrogates, victims, and attacks must all be non-empty")
    if x.dim() != 4:
        raise InvalidInputError(f"expected a rank-4 image batch, got rank {x.dim()}")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError("image and label counts differ")
    if min_samples < 1:
        raise InvalidParameterError(f"min_samples must be >= 1, got {min_samples}")

    matrix = TransferMatrix(
        surrogates=tuple(surrogates),
        attacks=tuple(attacks),
        victims=tuple(victims),
        min_samples=min_samples,
    )
    for s_name, s_model in surrogates.items():
        craft_mask = predict_labels(s_model, x) == y
        x_sub = x[craft_mask]
        y_sub = y[craft_mask]
        if x_sub.shape[0] == 0:
            for a_name in attacks:
                for v_name in victims:
                    matrix.cells[(s_name, a_name, v_name)] = MatrixCell(0.0, 0, True)
            continue
        victim_valid = {
            v_name: predict_labels(v_model, x_sub) == y_sub
            for v_name, v_model in victims.items()
        }
        for a_name, attack_fn in attacks.items():
            result = attack_fn(s_name, s_model, x_sub, y_sub)
            if result.adversarial.shape != x_sub.shape:
                raise InvalidInputError(
                    f"attack {a_name!r} returned a batch of shape "
                    f"{tuple(result.adversarial.shape)}, expected {tuple(x_sub.shape)}"
                )
            for v_name, v_model in victims.items():
                valid = victim_valid[v_name]
                n = int(valid.sum().item())
                if n == 0:
                    matrix.cells[(s_name, a_name, v_name)] = MatrixCell(0.0, 0, True)
                    continue
                preds = predict_labels(v_model, result.adversarial)
                flips = ((preds != y_sub) & valid).sum().item()
                matrix.cells[(s_name, a_name, v_name)] = MatrixCell(
                    asr=100.0 * flips / n, n=n, flagged=n < min_samples
                )
    return matrix


# ---------------------------------------------------------------------------
# Gradient-masking diagnostics
# ---------------------------------------------------------------------------


@dataclass
class GradientDiagnostic:
    """Sampled loss-gradient components at given input points.

    ``components`` holds signed values, one per sampled coordinate, flattened
    across images; a large fraction of near-zero entries is the signature of
    masked gradients.
    """

    components: Tensor
    threshold: float
    images: int
    coords_per_image: int

    @property
    def near_zero_fraction(self) -> float:
        if self.components.numel() == 0:
            return 0.0
        return (self.components.abs() < self.threshold).float().mean().item()

    def summary(self) -> dict:
        comps = self.components
        return {
            "images": self.images,
            "coords_per_image": self.coords_per_image,
            "n_components": int(comps.numel()),
            "threshold": self.threshold,
            "near_zero_fraction": self.near_zero_fraction,
            "median_abs": float(comps.abs().median().item()) if comps.numel() else 0.0,
            "max_abs": float(comps.abs().max().item()) if comps.numel() else 0.0,
        }

    def save_npz(self, path: str | Path) -> None:
        np.savez(
            path,
            components=self.components.numpy(),
            threshold=np.float64(self.threshold),
            images=np.int64(self.images),
            coords_per_image=np.int64(self.coords_per_image),
        )


def gradient_diagnostic(
    model: torch.nn.Module,
    x: Tensor,
    y: Tensor,
    coords_per_image: int = 150,
    threshold: float = 1e-6,
    seed: int = 0,
) -> GradientDiagnostic:
    """Sample loss-gradient components at ``x`` without replacement per image.

    Emits exactly ``len(x) * coords_per_image`` components. Evaluate at
    adversarial endpoints to compare how flat different attacks' loss
    surfaces have become.
    """
    if x.dim() != 4:
        raise InvalidInputError(f"expected a rank-4 image batch, got rank {x.dim()}")
    if x.shape[0] == 0:
        raise InvalidInputError("cannot diagnose an empty batch")
    if coords_per_image < 1:
        raise InvalidParameterError(f"coords_per_image must be >= 1, got {coords_per_image}")
    if threshold <= 0:
        raise InvalidParameterError(f"threshold must be > 0, got {threshold}")
    per_image = int(np.prod(x.shape[1:]))
    if coords_per_image > per_image:
        raise InvalidParameterError(
            f"coords_per_image {coords_per_image} exceeds {per_image} coordinates per image"
        )
    grads = input_gradient(model, x, y).flatten(1)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    cols = np.stack([rng.choice(per_image, size=coords_per_image, replace=False) for _ in range(n)])
    picked = grads[torch.arange(n).unsqueeze(1), torch.from_numpy(cols)]
    return GradientDiagnostic(
        components=picked.flatten().detach(),
        threshold=threshold,
        images=n,
        coords_per_image=coords_per_image,
    )


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    """Distortion summary for one adversarial batch against its originals."""

    mse: float  # mean squared error on the 0-255 scale
    psnr: float  # decibels, +inf when mse == 0
    ssim: float

    def as_dict(self) -> dict:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


def _gaussian_window(size: int, sigma: float) -> Tensor:
    half = (size - 1) / 2.0
    pos = torch.arange(size, dtype=torch.float64) - half
    w = torch.exp(-(pos**2) / (2.0 * sigma**2))
    return w / w.sum()


def ssim_score(
    x: Tensor,
    other: Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean structural similarity over batch and channels.

    Gaussian-windowed local statistics with valid padding; channels are
    treated independently and averaged, matching the common color usage.
    """
    _check_pair(x, other)
    if window_size < 2 or window_size % 2 == 0:
        raise InvalidParameterError(f"window_size must be odd and >= 3, got {window_size}")
    if x.shape[-2] < window_size or x.shape[-1] < window_size:
        raise InvalidInputError(
            f"images of shape {tuple(x.shape[-2:])} are smaller than the "
            f"{window_size}x{window_size} window"
        )
    a = x.to(torch.float64)
    b = other.to(torch.float64)
    channels = a.shape[1]
    w1d = _gaussian_window(window_size, sigma)
    kernel = torch.outer(w1d, w1d).expand(channels, 1, window_size, window_size).contiguous()

    def _filt(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel, groups=channels)

    mu_a = _filt(a)
    mu_b = _filt(b)
    var_a = _filt(a * a) - mu_a * mu_a
    var_b = _filt(b * b) - mu_b * mu_b
    cov = _filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return ssim_map.mean().item()


def image_quality(x: Tensor, x_adv: Tensor) -> QualityReport:
    """MSE (8-bit scale), PSNR derived from that MSE, and SSIM."""
    _check_pair(x, x_adv)
    if x.shape[0] == 0:
        raise InvalidInputError("cannot score an empty batch")
    diff = (x.to(torch.float64) - x_adv.to(torch.float64)) * 255.0
    mse = diff.square().mean().item()
    psnr = math.inf if mse == 0 else 10.0 * math.log10(255.0**2 / mse)
    return QualityReport(mse=mse, psnr=psnr, ssim=ssim_score(x, x_adv))


# ---------------------------------------------------------------------------
# Per-family breakdown
# ---------------------------------------------------------------------------


def per_family_accuracy(
    model: torch.nn.Module, x: Tensor, y: Tensor, family_tags: np.ndarray
) -> dict:
    """Accuracy split by artifact family, for cross-family comparisons."""
    if x.shape[0] != y.shape[0] or x.shape[0] != len(family_tags):
        raise InvalidInputError("images, labels, and family tags must align")
    if x.shape[0] == 0:
        raise InvalidInputError("cannot evaluate an empty batch")
    preds = predict_labels(model, x)
    correct = (preds == y).numpy()
    tags = np.asarray(family_tags, dtype=object)
    out = {}
    for fam in sorted(set(tags.tolist())):
        mask = tags == fam
        out[str(fam)] = {
            "accuracy": float(correct[mask].mean()),
            "n": int(mask.sum()),
        }
    return out
