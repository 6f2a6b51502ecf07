"""Identity-labeled image datasets: disk loading, synthesis, augmentation.

On disk a dataset is ``root/{train,query,gallery}/`` holding PNG or JPEG
files named ``{identity:04d}_c{camera}_{seq}.{ext}``, plus an optional
``manifest.json`` sidecar. In memory everything is float64 pixels in [0, 1].

The synthetic generator produces "banded" identities: each identity is a
distinct ordered tuple of palette colors painted as horizontal bands. Within
a cohort the identities are permutations of the same color multiset, so the
noise-free global mean color of any two cohort members is identical; only the
vertical ordering tells them apart.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SynthConfig
from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Fixed color palette for synthetic identities. Values stay inside
# [0.1, 0.95] so +-0.05 pixel noise never clips.
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.10],
        [0.15, 0.25, 0.90],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.55, 0.10, 0.85],
    ]
)


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1], pre-normalization
    identity: int
    camera: int
    split: str
    path: str = ""  # relative to the dataset root
    label: int | None = None  # contiguous class index, train split only
    shift: int | None = None  # vertical offset baked in by the synthesizer
    evaluable: bool = True  # queries only: has a cross-camera gallery match


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    num_identities: int
    name: str = "dataset"

    def split(self, name: str) -> list[ImageSample]:
        return [s for s in self.samples if s.split == name]

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        train = self.split("train")
        pixels = np.stack([s.pixels for s in train])
        labels = np.array([s.label for s in train], dtype=np.int64)
        return pixels, labels


@dataclass(frozen=True)
class FilenameConvention:
    """{identity:04d}_c{camera}_{seq:04d}.png with a possibly negative identity.

    Junk images use identity -1; they keep their four-character width
    (-001_c0_0000.png)."""

    pattern = r"^(?P<identity>-?\d+)_c(?P<camera>\d+)_(?P<seq>\d+)$"

    @classmethod
    def parse(cls, name: str) -> tuple[int, int, int]:
        stem = name
        if "." in name:
            stem, ext = name.rsplit(".", 1)
            if ext.lower() != "png":
                raise ParseError(f"{name!r}: expected a .png filename")
        m = re.match(cls.pattern, stem)
        if m is None:
            raise ParseError(f"filename {name!r} does not match {cls.pattern!r}")
        return int(m.group("identity")), int(m.group("camera")), int(m.group("seq"))

    @classmethod
    def format(cls, identity: int, camera: int, seq: int) -> str:
        return f"{identity:04d}_c{camera}_{seq:04d}.png"


# ---------------------------------------------------------------------------
# loading and saving
# ---------------------------------------------------------------------------

def _read_pixels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _assign_train_labels(samples: list[ImageSample]) -> int:
    """Remap train identities onto a contiguous 0..K-1 range (sorted order)."""
    train_ids = sorted({s.identity for s in samples if s.split == "train"})
    mapping = {pid: i for i, pid in enumerate(train_ids)}
    for s in samples:
        s.label = mapping[s.identity] if s.split == "train" else None
    return len(train_ids)


def _flag_evaluable(samples: list[ImageSample]) -> None:
    gallery_cams: dict[int, set[int]] = {}
    for s in samples:
        if s.split == "gallery":
            gallery_cams.setdefault(s.identity, set()).add(s.camera)
    for s in samples:
        if s.split != "query":
            continue
        cams = gallery_cams.get(s.identity, set())
        s.evaluable = bool(cams - {s.camera})
        if not s.evaluable:
            log.warning("query %s has no cross-camera gallery match", s.path or s.identity)


def load_directory(root: str | Path, convention: type[FilenameConvention] = FilenameConvention) -> DatasetManifest:
    """Load a dataset tree into memory.

    Raises DataError when a split directory is missing or empty and
    ParseError when a filename does not follow the convention.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    shift_by_path = _read_shift_sidecar(root)
    samples: list[ImageSample] = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"missing split directory {split_dir}")
        files = sorted(p for p in split_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"split {split!r} in {root} contains no images")
        for f in files:
            identity, camera, _seq = convention.parse(f.name)
            rel = f"{split}/{f.name}"
            samples.append(
                ImageSample(
                    pixels=_read_pixels(f),
                    identity=identity,
                    camera=camera,
                    split=split,
                    path=rel,
                    shift=shift_by_path.get(rel),
                )
            )
    num_ids = _assign_train_labels(samples)
    _flag_evaluable(samples)
    return DatasetManifest(samples=samples, num_identities=num_ids, name=root.name)


def _read_shift_sidecar(root: Path) -> dict[str, int]:
    sidecar = root / "manifest.json"
    if not sidecar.is_file():
        return {}
    try:
        doc = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {sidecar} is not valid JSON: {e}")
    out = {}
    for entry in doc.get("samples", []):
        if entry.get("shift") is not None:
            out[entry["relative_path"]] = int(entry["shift"])
    return out


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest record (not the pixels) as one JSON document."""
    entries = []
    for s in manifest.samples:
        entry = {
            "relative_path": s.path,
            "identity": s.identity,
            "camera": s.camera,
            "split": s.split,
        }
        if s.shift is not None:
            entry["shift"] = s.shift
        entries.append(entry)
    doc = {
        "name": manifest.name,
        "num_identities": manifest.num_identities,
        "samples": entries,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_dataset(manifest: DatasetManifest, root: str | Path, force: bool = False) -> None:
    """Write every sample as a PNG under root plus a manifest.json sidecar."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"output directory {root} exists and is not empty; pass force")
    for s in manifest.samples:
        target = root / s.path
        target.parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(s.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(target)
    write_manifest(manifest, root / "manifest.json")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def max_synthetic_identities(bands: int) -> int:
    if bands > len(PALETTE):
        return 0
    return math.perm(len(PALETTE), bands)


def identity_colors(num_ids: int, bands: int) -> list[tuple[int, ...]]:
    """Palette index tuple for each identity, grouped into cohorts.

    Cohorts enumerate color combinations; within a cohort the identities are
    the permutations of that combination, so cohort members share a color
    multiset by construction.
    """
    cap = max_synthetic_identities(bands)
    if num_ids > cap:
        raise ConfigError(
            f"num_ids={num_ids} exceeds the {cap} distinct band orderings "
            f"available for bands={bands}"
        )
    out: list[tuple[int, ...]] = []
    for combo in itertools.combinations(range(len(PALETTE)), bands):
        for perm in itertools.permutations(combo):
            out.append(perm)
            if len(out) == num_ids:
                return out
    return out


def canonical_layout(colors: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Noise-free banded image for one identity: (H, W, 3)."""
    h, w = image_size
    bands = len(colors)
    band_h = h // bands
    rows = np.repeat(np.asarray(colors, dtype=np.float64), band_h, axis=0)
    return np.broadcast_to(rows[:, None, :], (h, w, 3)).copy()


def shifted_layout(colors: np.ndarray, image_size: tuple[int, int], shift: int) -> np.ndarray:
    """Canonical layout moved down by `shift` rows, edge rows replicated."""
    canon = canonical_layout(colors, image_size)
    h = image_size[0]
    src = np.clip(np.arange(h) - shift, 0, h - 1)
    return canon[src]


def generate_synthetic(
    num_ids: int = 64,
    imgs_per_id: int = 20,
    bands: int = 4,
    shift_rows: int = 0,
    seed: int = 0,
    image_size: tuple[int, int] = (48, 16),
    noise: float = 0.05,
    query_fraction: float = 0.25,
    name: str | None = None,
) -> DatasetManifest:
    """Deterministic banded-identity dataset.

    Identities alternate between the train and test pools; test images are
    divided into query and gallery. Every image gets uniform pixel noise, a
    vertical shift drawn from [-shift_rows, +shift_rows], and a random camera
    label in {0, 1}. Pixels are quantized to the 8-bit grid so a save/load
    round trip through PNG is exact.
    """
    cfg = SynthConfig(
        num_ids=num_ids,
        imgs_per_id=imgs_per_id,
        bands=bands,
        shift_rows=shift_rows,
        image_size=tuple(image_size),
        noise=noise,
        query_fraction=query_fraction,
    )
    cfg.validate()
    colors = identity_colors(num_ids, bands)
    h, w = cfg.image_size
    n_query = min(max(1, round(query_fraction * imgs_per_id)), imgs_per_id - 1)
    rng = np.random.default_rng(seed)
    samples: list[ImageSample] = []
    for raw_id in range(num_ids):
        layout_colors = PALETTE[list(colors[raw_id])]
        is_train = raw_id % 2 == 0
        for j in range(imgs_per_id):
            shift = int(rng.integers(-shift_rows, shift_rows + 1)) if shift_rows else 0
            camera = int(rng.integers(0, 2))
            img = shifted_layout(layout_colors, cfg.image_size, shift)
            if noise:
                img = img + rng.uniform(-noise, noise, size=img.shape)
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            if is_train:
                split = "train"
            else:
                split = "query" if j < n_query else "gallery"
            fname = FilenameConvention.format(raw_id, camera, j)
            samples.append(
                ImageSample(
                    pixels=img,
                    identity=raw_id,
                    camera=camera,
                    split=split,
                    path=f"{split}/{fname}",
                    shift=shift,
                )
            )
    num_train = _assign_train_labels(samples)
    _flag_evaluable(samples)
    label = name or f"synth-{num_ids}x{imgs_per_id}-b{bands}-s{shift_rows}-seed{seed}"
    return DatasetManifest(samples=samples, num_identities=num_train, name=label)


# ---------------------------------------------------------------------------
# augmentation and statistics
# ---------------------------------------------------------------------------

def augment(
    pixels: np.ndarray,
    flip_prob: float,
    mean: np.ndarray | float,
    std: np.ndarray | float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Random horizontal flip followed by channel normalization, (H, W, 3) in
    and out.

    Always consumes exactly one random draw, so streams stay aligned across
    flip probabilities. Raises ConfigError when std has a zero entry.
    """
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0.0):
        raise ConfigError("normalization std contains a zero entry")
    if rng.random() < flip_prob:
        pixels = pixels[:, ::-1, :]
    return (pixels - np.asarray(mean, dtype=np.float64)) / std


def augment_batch(
    pixels: np.ndarray,
    flip_prob: float,
    mean: np.ndarray | float,
    std: np.ndarray | float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized flip+normalize for a (B, H, W, 3) stack; one draw per image."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0.0):
        raise ConfigError("normalization std contains a zero entry")
    out = pixels.copy()
    flips = rng.random(len(pixels)) < flip_prob
    out[flips] = out[flips, :, ::-1, :]
    return (out - np.asarray(mean, dtype=np.float64)) / std


def compute_normalization(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the train split, floored away from zero."""
    pixels, _ = manifest.train_arrays()
    mean = pixels.mean(axis=(0, 1, 2))
    std = np.maximum(pixels.std(axis=(0, 1, 2)), 1e-6)
    return mean, std
