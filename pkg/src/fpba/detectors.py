"""Toy AI-generated-image detectors and their training loop.

Two architectures: a small spatial CNN and an MLP over log-magnitude DCT
spectra. Both are binary classifiers emitting one logit per image, with the
convention label 0 = real, 1 = fake (generated). Inputs everywhere are raw
pixels in [0, 1]; each detector carries its own differentiable preprocessing
(resize + normalize) inside ``forward`` so attacks can optimize in pixel
space.

Training follows the augmentation recipe common for such detectors: random
Gaussian blur and random JPEG recompression, each applied per-image with a
configurable probability.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from .errors import (
    CapabilityError,
    CheckpointError,
    InvalidDatasetError,
    InvalidInputError,
    InvalidParameterError,
)
from .frequency import dct2

__all__ = [
    "LABEL_REAL",
    "LABEL_FAKE",
    "Detector",
    "SpatialCnnDetector",
    "FrequencyMlpDetector",
    "DETECTOR_ARCHS",
    "build_detector",
    "forward_logits",
    "predict_labels",
    "input_gradient",
    "evaluate_accuracy",
    "AugmentConfig",
    "gaussian_blur",
    "jpeg_roundtrip",
    "augment",
    "TrainConfig",
    "train_detector",
    "save_checkpoint",
    "load_checkpoint",
    "state_checksum",
]

LABEL_REAL = 0
LABEL_FAKE = 1


class Detector(nn.Module):
    """Binary real/fake image classifier with a backbone/classifier split.

    ``features`` maps preprocessed-on-the-fly pixel batches to feature
    vectors; ``classify`` maps features to logits. The split is what lets
    extra heads be grafted onto a frozen backbone later.
    """

    arch = "base"

    def __init__(self, input_size: int, feature_dim: int, mean: tuple, std: tuple):
        super().__init__()
        self.input_size = int(input_size)
        self.feature_dim = int(feature_dim)
        self.register_buffer("pre_mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("pre_std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))
        self.classifier = nn.Linear(feature_dim, 1)
        self.train_record: dict | None = None

    def preprocess(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise InvalidInputError(f"expected rank-4 input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.pre_mean.shape[1]:
            raise InvalidInputError(
                f"expected {self.pre_mean.shape[1]} channels, got {x.shape[1]}"
            )
        if not x.is_floating_point():
            raise InvalidInputError(f"expected floating point input, got {x.dtype}")
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        return (x - self.pre_mean) / self.pre_std

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def classify(self, feats: Tensor) -> Tensor:
        return self.classifier(feats).squeeze(-1)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.features(x))


class SpatialCnnDetector(Detector):
    """Four conv blocks with batch norm, global average pooling, linear head."""

    arch = "spatial-cnn"

    def __init__(self, input_size: int = 64):
        if input_size < 16:
            raise InvalidParameterError(f"spatial CNN needs input_size >= 16 (four 2x poolings), got {input_size}")
        super().__init__(input_size, feature_dim=128, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
        widths = (16, 32, 64, 128)
        layers: list[nn.Module] = []
        c_in = 3
        for c_out in widths:
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = c_out
        self.backbone = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def features(self, x: Tensor) -> Tensor:
        z = self.backbone(self.preprocess(x))
        return self.pool(z).flatten(1)


class FrequencyMlpDetector(Detector):
    """MLP over per-channel log-magnitude DCT spectra."""

    arch = "frequency-mlp"

    def __init__(self, input_size: int = 64, hidden: int = 128):
        super().__init__(input_size, feature_dim=64, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        in_dim = 3 * input_size * input_size
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, self.feature_dim),
            nn.ReLU(inplace=True),
        )

    def features(self, x: Tensor) -> Tensor:
        spectra = dct2(self.preprocess(x))
        return self.mlp(torch.log1p(spectra.abs()).flatten(1))


DETECTOR_ARCHS: dict[str, type[Detector]] = {
    SpatialCnnDetector.arch: SpatialCnnDetector,
    FrequencyMlpDetector.arch: FrequencyMlpDetector,
}


def build_detector(arch: str, input_size: int = 64, seed: int = 0) -> Detector:
    """Construct a freshly initialized detector with seeded weights."""
    if arch not in DETECTOR_ARCHS:
        raise InvalidParameterError(f"unknown architecture {arch!r}; known: {sorted(DETECTOR_ARCHS)}")
    torch.manual_seed(seed)
    return DETECTOR_ARCHS[arch](input_size=input_size)


class _eval_mode:
    """Temporarily put a module in eval mode, restoring the previous state."""

    def __init__(self, module: nn.Module):
        self.module = module

    def __enter__(self):
        self.was_training = self.module.training
        self.module.eval()
        return self.module

    def __exit__(self, *exc):
        if self.was_training:
            self.module.train()
        return False


def forward_logits(detector: Detector, x: Tensor, batch_size: int = 256) -> Tensor:
    """Logits for a pixel batch, computed without gradients in eval mode."""
    with _eval_mode(detector), torch.no_grad():
        chunks = [detector(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return torch.cat(chunks) if chunks else torch.empty(0)


def predict_labels(detector: Detector, x: Tensor, batch_size: int = 256) -> Tensor:
    """Hard 0/1 predictions; logit >= 0 means fake."""
    return (forward_logits(detector, x, batch_size) >= 0).long()


def input_gradient(detector: nn.Module, x: Tensor, y: Tensor) -> Tensor:
    """Gradient of the summed BCE loss at labels ``y`` with respect to pixels.

    Sum reduction keeps each image's gradient independent of batch size. The
    result is detached and has the shape of ``x``.
    """
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"batch size mismatch: {x.shape[0]} images, {y.shape[0]} labels")
    xg = x.detach().clone().requires_grad_(True)
    with _eval_mode(detector):
        logits = detector(xg)
        loss = F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype), reduction="sum")
        try:
            (grad,) = torch.autograd.grad(loss, xg)
        except RuntimeError as exc:
            raise CapabilityError(f"model does not expose a gradient path to its input: {exc}") from exc
    if not torch.isfinite(grad).all():
        raise CapabilityError("input gradient contains non-finite values")
    return grad.detach()


def evaluate_accuracy(detector: Detector, x: Tensor, y: Tensor, batch_size: int = 256) -> float:
    """Fraction of correct hard predictions."""
    if x.shape[0] == 0:
        raise InvalidInputError("cannot evaluate accuracy on an empty batch")
    preds = predict_labels(detector, x, batch_size)
    return (preds == y.long()).float().mean().item()


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Per-image random blur and JPEG recompression probabilities."""

    p_blur: float = 0.1
    blur_sigma: tuple[float, float] = (0.0, 3.0)
    p_jpeg: float = 0.1
    jpeg_quality: tuple[int, int] = (30, 100)

    def __post_init__(self) -> None:
        for name in ("p_blur", "p_jpeg"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidParameterError(f"{name} must be in [0, 1], got {p}")
        if self.blur_sigma[0] < 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise InvalidParameterError(f"bad blur_sigma range {self.blur_sigma}")
        if not 1 <= self.jpeg_quality[0] <= self.jpeg_quality[1] <= 100:
            raise InvalidParameterError(f"bad jpeg_quality range {self.jpeg_quality}")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(p_blur=0.0, p_jpeg=0.0)

    @classmethod
    def baseline(cls) -> "AugmentConfig":
        return cls(p_blur=0.1, p_jpeg=0.1)

    @classmethod
    def defense(cls) -> "AugmentConfig":
        """The robust-training preset: both corruptions at probability 0.5."""
        return cls(p_blur=0.5, p_jpeg=0.5)


def gaussian_blur(img: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with reflect padding; ``sigma <= 0`` is a no-op.

    Kernel radius is ceil(3*sigma). Accepts (C, H, W) or (B, C, H, W).
    """
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    k = k / k.sum()
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    c = x.shape[1]
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.conv2d(F.pad(x, (radius, radius, 0, 0), mode="reflect"), kh, groups=c)
    x = F.conv2d(F.pad(x, (0, 0, radius, radius), mode="reflect"), kv, groups=c)
    return x.squeeze(0) if squeeze else x


def jpeg_roundtrip(img: Tensor, quality: int) -> Tensor:
    """Encode a (C, H, W) image in [0, 1] as JPEG at ``quality`` and decode it back."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise InvalidInputError(f"expected a (3, H, W) image, got shape {tuple(img.shape)}")
    if not 1 <= int(quality) <= 100:
        raise InvalidParameterError(f"JPEG quality must be in [1, 100], got {quality}")
    arr = (img.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(out).permute(2, 0, 1).to(img.dtype)


def augment(img: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Randomly blur and/or JPEG-compress one (C, H, W) image.

    Draw order per image: blur coin, blur sigma (only if the coin hit), JPEG
    coin, JPEG quality (only if the coin hit). Replaying the same generator
    state therefore reproduces the exact augmentation.
    """
    out = img
    if cfg.p_blur > 0 and rng.random() < cfg.p_blur:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        out = gaussian_blur(out, sigma)
    if cfg.p_jpeg > 0 and rng.random() < cfg.p_jpeg:
        quality = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
        out = jpeg_roundtrip(out, quality)
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise InvalidParameterError(f"lr must be > 0, got {self.lr}")


def train_detector(arch: str, data, augment_cfg: AugmentConfig | None = None, cfg: TrainConfig | None = None) -> Detector:
    """Train a detector with Adam on BCE under random blur/JPEG augmentation.

    ``data`` must expose ``split(name) -> (images, labels)`` for "train" and
    "val". Fully deterministic for a fixed seed: weight init, shuffling, and
    augmentation draws all derive from ``cfg.seed``.
    """
    augment_cfg = augment_cfg if augment_cfg is not None else AugmentConfig.baseline()
    cfg = cfg if cfg is not None else TrainConfig()
    x_tr, y_tr = data.split("train")
    n = x_tr.shape[0]
    if n == 0:
        raise InvalidDatasetError("train split is empty")
    if len(torch.unique(y_tr)) < 2:
        raise InvalidDatasetError("train split must contain both classes")
    det = build_detector(arch, input_size=x_tr.shape[-1], seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(det.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    det.train()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = torch.stack([augment(x_tr[i], augment_cfg, rng) for i in idx])
            labels = y_tr[torch.from_numpy(idx)].float()
            opt.zero_grad()
            loss = F.binary_cross_entropy_with_logits(det(batch), labels)
            loss.backward()
            opt.step()
    det.eval()
    record = {
        "arch": arch,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "seed": cfg.seed,
        "p_blur": augment_cfg.p_blur,
        "p_jpeg": augment_cfg.p_jpeg,
        "train_acc": evaluate_accuracy(det, x_tr, y_tr),
    }
    x_val, y_val = data.split("val")
    record["val_acc"] = evaluate_accuracy(det, x_val, y_val) if x_val.shape[0] else None
    det.train_record = record
    return det


# ---------------------------------------------------------------------------
# Checkpoints


_CKPT_FORMAT = "fpba-detector"


def save_checkpoint(detector: Detector, path: str | Path) -> None:
    """Write a detector checkpoint (architecture manifest + weights)."""
    payload = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "arch": detector.arch,
        "input_size": detector.input_size,
        "train_record": detector.train_record,
        "state_dict": {k: v.cpu() for k, v in detector.state_dict().items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Detector:
    """Rebuild a detector from :func:`save_checkpoint` output, in eval mode."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a detector checkpoint")
    arch = payload.get("arch")
    if arch not in DETECTOR_ARCHS:
        raise CheckpointError(f"{path} names unknown architecture {arch!r}")
    det = DETECTOR_ARCHS[arch](input_size=payload["input_size"])
    try:
        det.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"weights in {path} do not fit architecture {arch!r}: {exc}") from exc
    det.train_record = payload.get("train_record")
    det.eval()
    return det


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; changes iff any value changes."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
