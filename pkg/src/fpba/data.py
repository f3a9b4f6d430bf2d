"""Synthetic real/fake image corpora with controllable spectral artifacts.

The "real" class is smooth 1/f-spectrum color texture. Each "fake" family
starts from the same texture process and stamps a distinct DCT-domain
fingerprint on it, mimicking the spectral tells of generative pipelines:

- ``grid``: excess energy at a fixed set of harmonic bins (upsampling grids)
- ``lowpass``: sharp attenuation of all high-frequency content
- ``ringing``: an amplified mid-frequency annulus

Labels follow the package convention: 0 = real, 1 = fake. All generation is
deterministic in the dataset seed; every image draws from its own seed
sequence so corpora are reproducible element by element.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor

from .detectors import LABEL_FAKE, LABEL_REAL
from .errors import InvalidDatasetError, InvalidInputError, InvalidParameterError
from .frequency import dct2, idct2

__all__ = [
    "ArtifactFamily",
    "FAMILY_PRESETS",
    "grid_harmonic_bins",
    "LabeledDataset",
    "synth_dataset",
    "load_image_folder",
]

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ArtifactFamily:
    """One fake-image family: a named spectral artifact at a given strength."""

    name: str
    kind: str
    strength: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("grid", "lowpass", "ringing"):
            raise InvalidParameterError(f"unknown artifact kind {self.kind!r}")
        if self.strength <= 0:
            raise InvalidParameterError(f"strength must be > 0, got {self.strength}")


FAMILY_PRESETS: dict[str, ArtifactFamily] = {
    "grid": ArtifactFamily("grid", "grid"),
    "lowpass": ArtifactFamily("lowpass", "lowpass"),
    "ringing": ArtifactFamily("ringing", "ringing"),
}


def _resolve_family(f) -> ArtifactFamily:
    if isinstance(f, ArtifactFamily):
        return f
    if isinstance(f, str):
        try:
            return FAMILY_PRESETS[f]
        except KeyError:
            raise InvalidParameterError(f"unknown family {f!r}; presets: {sorted(FAMILY_PRESETS)}") from None
    raise InvalidParameterError(f"family must be a name or ArtifactFamily, got {type(f).__name__}")


def grid_harmonic_bins(h: int, w: int) -> list[tuple[int, int]]:
    """DCT bins carrying the grid-artifact fingerprint at resolution (h, w)."""
    return [
        (h // 2, w // 2),
        (3 * h // 4, 3 * w // 4),
        (h // 2, 0),
        (0, w // 2),
        (h - 1, w - 1),
    ]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One smooth 1/f-spectrum color texture, float64 (3, size, size) in [0, 1]."""
    power = rng.uniform(1.1, 1.7)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    amp = 1.0 / (np.hypot(fy, fx) + 1.0 / size) ** power

    def field_() -> np.ndarray:
        spec = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) * amp
        f = np.fft.ifft2(spec).real
        return (f - f.mean()) / (f.std() + 1e-12)

    lum = field_()
    contrast = rng.uniform(0.08, 0.16)
    brightness = rng.uniform(0.35, 0.65)
    chans = [brightness + contrast * lum + 0.03 * field_() for _ in range(3)]
    return np.clip(np.stack(chans), 0.0, 1.0)


def _radial_grid(h: int, w: int) -> np.ndarray:
    k = np.arange(h)[:, None] / h
    l = np.arange(w)[None, :] / w
    return np.hypot(k, l)


def _apply_artifact(img: np.ndarray, family: ArtifactFamily, rng: np.random.Generator) -> np.ndarray:
    """Stamp one family's spectral fingerprint onto a (3, H, W) image."""
    h, w = img.shape[-2:]
    x = torch.from_numpy(img[None, ...])
    s = dct2(x).numpy()[0]
    if family.kind == "grid":
        base_amp = family.strength * 1.0 * np.sqrt(h * w) / 64.0
        for k, l in grid_harmonic_bins(h, w):
            sign = 1.0 if rng.random() < 0.5 else -1.0
            for c in range(3):
                s[c, k, l] += sign * base_amp * rng.uniform(0.75, 1.25)
    elif family.kind == "lowpass":
        r = _radial_grid(h, w)
        att = 1.0 - family.strength * (1.0 - rng.uniform(0.30, 0.55))
        s[:, r > 0.35] *= att
    elif family.kind == "ringing":
        r = _radial_grid(h, w)
        boost = 1.0 + family.strength * (rng.uniform(1.9, 3.0) - 1.0)
        band = (r >= 0.22) & (r < 0.34)
        s[:, band] *= boost
    out = idct2(torch.from_numpy(s[None, ...])).numpy()[0]
    return np.clip(out, 0.0, 1.0)


def _largest_remainder(n: int, fracs: tuple[float, ...]) -> list[int]:
    """Integer counts summing exactly to n, proportional to fracs."""
    raw = [n * f for f in fracs]
    counts = [int(r) for r in raw]
    rem = n - sum(counts)
    order = sorted(range(len(fracs)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(rem):
        counts[order[i]] += 1
    return counts


@dataclass
class LabeledDataset:
    """In-memory image corpus with labels, split tags, and family tags."""

    images: Tensor
    labels: Tensor
    split_tags: np.ndarray
    family_tags: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.images.shape[0]
        if self.labels.shape[0] != n or len(self.split_tags) != n or len(self.family_tags) != n:
            raise InvalidInputError("images, labels, split tags, and family tags must align")
        self.split_tags = np.asarray(self.split_tags, dtype=object)
        self.family_tags = np.asarray(self.family_tags, dtype=object)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLIT_NAMES:
            raise InvalidParameterError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        return np.nonzero(self.split_tags == split)[0]

    def split(self, name: str) -> tuple[Tensor, Tensor]:
        idx = torch.from_numpy(self.indices(name))
        return self.images[idx], self.labels[idx]

    def counts(self) -> dict:
        out: dict = {}
        for s in SPLIT_NAMES:
            idx = self.indices(s)
            out[s] = {
                "total": int(len(idx)),
                "real": int((self.labels.numpy()[idx] == LABEL_REAL).sum()),
                "fake": int((self.labels.numpy()[idx] == LABEL_FAKE).sum()),
            }
        return out

    def content_hashes(self) -> list[str]:
        return [hashlib.sha256(img.numpy().tobytes()).hexdigest() for img in self.images]

    def validate(self, balance_tol: float = 0.05) -> None:
        """Raise unless ranges, labels, per-split class balance, and uniqueness hold."""
        if len(self) == 0:
            return
        if not torch.isfinite(self.images).all():
            raise InvalidDatasetError("images contain non-finite values")
        if self.images.min() < 0 or self.images.max() > 1:
            raise InvalidDatasetError("images must lie in [0, 1]")
        bad = set(self.labels.unique().tolist()) - {LABEL_REAL, LABEL_FAKE}
        if bad:
            raise InvalidDatasetError(f"labels must be 0/1, found {sorted(bad)}")
        for s in SPLIT_NAMES:
            idx = self.indices(s)
            if len(idx) == 0:
                continue
            frac_fake = float((self.labels.numpy()[idx] == LABEL_FAKE).mean())
            if abs(frac_fake - 0.5) > balance_tol:
                raise InvalidDatasetError(
                    f"split {s!r} class balance off: fake fraction {frac_fake:.3f} "
                    f"outside 0.5 +/- {balance_tol}"
                )
        hashes = self.content_hashes()
        if len(set(hashes)) != len(hashes):
            dup = len(hashes) - len(set(hashes))
            raise InvalidDatasetError(f"{dup} duplicate image(s) detected")

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            directory / "images.npz",
            images=self.images.numpy(),
            labels=self.labels.numpy(),
            split_tags=np.asarray(self.split_tags, dtype=str),
            family_tags=np.asarray(self.family_tags, dtype=str),
        )
        (directory / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "LabeledDataset":
        directory = Path(directory)
        npz_path = directory / "images.npz"
        if not npz_path.exists():
            raise InvalidDatasetError(f"no dataset at {directory}")
        with np.load(npz_path, allow_pickle=False) as f:
            images = torch.from_numpy(f["images"])
            labels = torch.from_numpy(f["labels"])
            split_tags = f["split_tags"].astype(object)
            family_tags = f["family_tags"].astype(object)
        manifest_path = directory / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        return cls(images, labels, split_tags, family_tags, manifest)

    def merge(self, other: "LabeledDataset") -> "LabeledDataset":
        """Concatenate two corpora of the same resolution."""
        if len(self) and len(other) and self.images.shape[1:] != other.images.shape[1:]:
            raise InvalidInputError(
                f"cannot merge image shapes {tuple(self.images.shape[1:])} and {tuple(other.images.shape[1:])}"
            )
        return LabeledDataset(
            images=torch.cat([self.images, other.images]),
            labels=torch.cat([self.labels, other.labels]),
            split_tags=np.concatenate([self.split_tags, other.split_tags]),
            family_tags=np.concatenate([self.family_tags, other.family_tags]),
            manifest={"merged": [self.manifest, other.manifest]},
        )


def _assign_splits(n: int, fracs: tuple[float, float, float]) -> list[str]:
    counts = _largest_remainder(n, fracs)
    tags: list[str] = []
    for name, c in zip(SPLIT_NAMES, counts):
        tags.extend([name] * c)
    return tags


def synth_dataset(
    n_per_class: int = 2000,
    families=("grid", "lowpass", "ringing"),
    image_size: int = 64,
    seed: int = 0,
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> LabeledDataset:
    """Generate a balanced synthetic real/fake corpus.

    Real images are raw textures; fake images cycle round-robin through the
    requested artifact families. Splits are assigned stratified per
    (class, family) group with largest-remainder rounding, so every split is
    balanced to within rounding. ``n_per_class = 0`` yields a valid empty
    corpus.
    """
    if n_per_class < 0:
        raise InvalidParameterError(f"n_per_class must be >= 0, got {n_per_class}")
    if image_size < 32:
        raise InvalidParameterError(f"image_size must be >= 32, got {image_size}")
    if abs(sum(split_fracs) - 1.0) > 1e-9 or any(f < 0 for f in split_fracs):
        raise InvalidParameterError(f"split_fracs must be nonnegative and sum to 1, got {split_fracs}")
    fams = [_resolve_family(f) for f in families]
    if n_per_class > 0 and not fams:
        raise InvalidParameterError("at least one fake family is required")
    names = [f.name for f in fams]
    if len(set(names)) != len(names):
        raise InvalidParameterError(f"duplicate family names: {names}")

    images: list[np.ndarray] = []
    labels: list[int] = []
    family_tags: list[str] = []
    for i in range(n_per_class):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, i]))
        images.append(_texture(rng, image_size))
        labels.append(LABEL_REAL)
        family_tags.append("real")
    for i in range(n_per_class):
        fam = fams[i % len(fams)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        images.append(_apply_artifact(_texture(rng, image_size), fam, rng))
        labels.append(LABEL_FAKE)
        family_tags.append(fam.name)

    # Stratified splits: assign within each (class, family) group in order.
    split_tags = [""] * len(images)
    groups: dict[str, list[int]] = {}
    for idx, tag in enumerate(family_tags):
        groups.setdefault(tag, []).append(idx)
    for members in groups.values():
        for idx, s in zip(members, _assign_splits(len(members), split_fracs)):
            split_tags[idx] = s

    stack = np.stack(images).astype(np.float32) if images else np.empty((0, 3, image_size, image_size), np.float32)
    ds = LabeledDataset(
        images=torch.from_numpy(stack),
        labels=torch.tensor(labels, dtype=torch.int64),
        split_tags=np.asarray(split_tags, dtype=object),
        family_tags=np.asarray(family_tags, dtype=object),
        manifest={
            "kind": "synthetic",
            "seed": seed,
            "n_per_class": n_per_class,
            "image_size": image_size,
            "families": [{"name": f.name, "kind": f.kind, "strength": f.strength} for f in fams],
            "split_fracs": list(split_fracs),
        },
    )
    return ds


def load_image_folder(
    directory: str | Path,
    label: int,
    image_size: int = 64,
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> LabeledDataset:
    """Ingest a folder of images as one class.

    Files that fail to decode are skipped with a logged warning (the manifest
    records the count). Duplicate contents are dropped after the first
    occurrence. Split assignment orders images by content hash, so it is
    deterministic regardless of filesystem order, and uses exact
    largest-remainder counts.
    """
    if label not in (LABEL_REAL, LABEL_FAKE):
        raise InvalidParameterError(f"label must be 0 or 1, got {label}")
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidDatasetError(f"not a directory: {directory}")
    decoded: dict[str, np.ndarray] = {}
    skipped = 0
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        try:
            with Image.open(path) as im:
                arr = np.asarray(
                    im.convert("RGB").resize((image_size, image_size), Image.BILINEAR),
                    dtype=np.float32,
                ) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping undecodable file %s: %s", path.name, exc)
            skipped += 1
            continue
        img = arr.transpose(2, 0, 1)
        h = hashlib.sha256(img.tobytes()).hexdigest()
        if h not in decoded:
            decoded[h] = img
    if not decoded:
        raise InvalidDatasetError(f"no decodable images in {directory}")
    hashes = sorted(decoded)
    images = np.stack([decoded[h] for h in hashes])
    split_tags = _assign_splits(len(hashes), split_fracs)
    return LabeledDataset(
        images=torch.from_numpy(images),
        labels=torch.full((len(hashes),), label, dtype=torch.int64),
        split_tags=np.asarray(split_tags, dtype=object),
        family_tags=np.asarray(["external"] * len(hashes), dtype=object),
        manifest={
            "kind": "folder",
            "source": str(directory),
            "label": int(label),
            "image_size": image_size,
            "decoded": len(hashes),
            "skipped": skipped,
            "split_fracs": list(split_fracs),
        },
    )
