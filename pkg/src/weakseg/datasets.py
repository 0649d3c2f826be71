"""Dataset ingestion, deterministic stratified splitting, and a synthetic
blob-foreground generator for desk-scale verification.

The synthetic positives carry warm-colored soft-edged blobs whose exact
support doubles as the ground-truth mask; negatives get the same textured
background, optionally with cool-colored distractor blobs, so a classifier
has to learn color rather than mere blob presence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .datamodel import DatasetError, ImageSample
from .saliency import _bilinear_resize, read_mask_png

SPLIT_NAMES = ("train", "val", "test")
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

# Synthetic generator knobs (fractions of the image side / area). The warm
# band is narrow so blob appearance, and with it the saliency peak height,
# stays consistent across images; radii are sized so single blobs land well
# inside the coverage bounds at 64px.
_RADIUS_FRAC = (0.13, 0.26)
_COVERAGE = (0.02, 0.40)
_EDGE_EXPONENT = 0.5
_PAINT_STRENGTH = 0.9
_WARM_RGB = ((0.92, 1.0), (0.45, 0.65), (0.0, 0.12))
_COOL_RGB = ((0.0, 0.2), (0.35, 0.7), (0.75, 1.0))


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label: int
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Entries plus (optionally) a split assignment and in-memory pixel data."""

    entries: tuple[ManifestEntry, ...]
    split_assignment: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    origin: dict[str, str] = field(default_factory=dict)
    samples: Optional[dict[str, ImageSample]] = None
    gt_masks: Optional[dict[str, np.ndarray]] = None

    def split_ids(self, split: str) -> list[str]:
        if not self.split_assignment:
            raise DatasetError("manifest has no split assignment; call split() first")
        return [e.sample_id for e in self.entries if self.split_assignment.get(e.sample_id) == split]


# ---------------------------------------------------------------------------
# Directory ingestion
# ---------------------------------------------------------------------------

def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DatasetError(f"directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES)


def _check_readable(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except Exception as exc:
        raise DatasetError(f"unreadable image: {path}") from exc


def ingest_directory(pos_dir, neg_dir, mask_dir=None) -> DatasetManifest:
    """Build a manifest from pos/ and neg/ image directories.

    Masks (if a directory is given) pair with positives by filename stem and
    are flagged eval-only: their contents are never decoded at ingest time.
    """
    pos_dir, neg_dir = Path(pos_dir), Path(neg_dir)
    pos_files = _list_images(pos_dir)
    neg_files = _list_images(neg_dir)

    masks_by_stem: dict[str, Path] = {}
    if mask_dir is not None:
        mask_dir = Path(mask_dir)
        pos_stems = {p.stem for p in pos_files}
        for m in _list_images(mask_dir):
            if m.stem not in pos_stems:
                raise DatasetError(f"mask file {m.name!r} has no matching positive image")
            masks_by_stem[m.stem] = m

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for files, label in ((pos_files, 1), (neg_files, 0)):
        for p in files:
            _check_readable(p)
            if p.stem in seen:
                raise DatasetError(f"duplicate sample id {p.stem!r} across directories")
            seen.add(p.stem)
            entries.append(
                ManifestEntry(p.stem, label, image_path=p, mask_path=masks_by_stem.get(p.stem))
            )
    origin = {"kind": "directories", "pos_dir": str(pos_dir), "neg_dir": str(neg_dir)}
    if mask_dir is not None:
        origin["mask_dir"] = str(mask_dir)
    return DatasetManifest(entries=tuple(entries), origin=origin)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(size=(max(size // 8, 2), max(size // 8, 2), 3))
    lows = (0.12, 0.18, 0.18)
    spans = (0.22, 0.28, 0.30)
    px = np.empty((size, size, 3))
    for c in range(3):
        px[:, :, c] = lows[c] + spans[c] * _bilinear_resize(coarse[:, :, c], (size, size))
    return px


def _blob(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One soft-edged elliptical blob: (alpha, support). alpha > 0 iff support."""
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    ry, rx = rng.uniform(_RADIUS_FRAC[0] * size, _RADIUS_FRAC[1] * size, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    support = d2 < 1.0
    alpha = np.where(support, _PAINT_STRENGTH * np.clip(1.0 - d2, 0.0, None) ** _EDGE_EXPONENT, 0.0)
    return alpha, support


def _pick_color(rng: np.random.Generator, bands) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in bands])


def _paint(px: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> np.ndarray:
    a = alpha[:, :, None]
    return (1.0 - a) * px + a * color[None, None, :]


def _render_positive(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixels, gt support mask, untouched background) for one positive."""
    bg = _background(rng, size)
    for _ in range(200):
        count = int(rng.integers(1, 4))
        blobs = [_blob(rng, size) for _ in range(count)]
        mask = np.zeros((size, size), dtype=bool)
        for _, support in blobs:
            mask |= support
        if _COVERAGE[0] <= mask.mean() <= _COVERAGE[1]:
            break
    else:
        raise RuntimeError("blob coverage never landed in range; generator bounds are off")
    px = bg.copy()
    for alpha, _ in blobs:
        px = _paint(px, alpha, _pick_color(rng, _WARM_RGB))
    return np.clip(px, 0.0, 1.0), mask, bg


def _render_negative(rng: np.random.Generator, size: int) -> np.ndarray:
    px = _background(rng, size)
    for _ in range(int(rng.integers(0, 3))):
        alpha, _ = _blob(rng, size)
        px = _paint(px, alpha, _pick_color(rng, _COOL_RGB))
    return np.clip(px, 0.0, 1.0)


def synth_dataset(n: int, image_size: int, seed: int) -> DatasetManifest:
    """In-memory dataset: n/2 blob positives with exact masks, n/2 negatives."""
    if n < 2 or n % 2 != 0:
        raise ValueError(f"n must be even and >= 2, got {n}")
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    samples: dict[str, ImageSample] = {}
    gt_masks: dict[str, np.ndarray] = {}
    for i in range(n):
        label = 1 if i < n // 2 else 0
        sid = f"synth{i:04d}"
        if label == 1:
            px, mask, _ = _render_positive(rng, image_size)
            gt_masks[sid] = mask
        else:
            px = _render_negative(rng, image_size)
        entries.append(ManifestEntry(sid, label))
        samples[sid] = ImageSample(sid, px, label)
    origin = {
        "kind": "synthetic",
        "n": str(n),
        "image_size": str(image_size),
        "seed": str(seed),
        "radius_frac": f"{_RADIUS_FRAC[0]},{_RADIUS_FRAC[1]}",
        "edge_exponent": str(_EDGE_EXPONENT),
        "paint_strength": str(_PAINT_STRENGTH),
        "warm_rgb": ";".join(f"{lo},{hi}" for lo, hi in _WARM_RGB),
    }
    return DatasetManifest(
        entries=tuple(entries),
        seed=seed,
        origin=origin,
        samples=samples,
        gt_masks=gt_masks,
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    exact = [f * n for f in fractions]
    base = [int(math.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def split(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> DatasetManifest:
    """Assign train/val/test stratified by label; a pure function of the id
    set, fractions, and seed (input order never matters)."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DatasetError(f"split fractions must be 3 positive values, got {tuple(fractions)}")
    if abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions sum to {math.fsum(fractions):g}")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in (1, 0):
        ids = sorted(e.sample_id for e in manifest.entries if e.label == label)
        if not ids:
            continue
        ids = [ids[i] for i in rng.permutation(len(ids))]
        counts = _largest_remainder(len(ids), fractions)
        pos = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for sid in ids[pos : pos + count]:
                assignment[sid] = name
            pos += count
    for name in SPLIT_NAMES:
        if not any(v == name for v in assignment.values()):
            raise DatasetError(f"split '{name}' would be empty")
    return replace(manifest, split_assignment=assignment, seed=seed)


# ---------------------------------------------------------------------------
# Sample loading
# ---------------------------------------------------------------------------

def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_samples(
    manifest: DatasetManifest, split_name: str | None = None, with_masks: bool = False
) -> list[ImageSample]:
    """Materialize samples, optionally attaching eval-only gt masks.

    Stage-1/2 training must be fed with_masks=False so that no mask contents
    are reachable from the training path at all; the audit hook additionally
    guards any accidental read when masks are attached.
    """
    if split_name is None:
        chosen = list(manifest.entries)
    else:
        if split_name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {split_name!r}")
        wanted = set(manifest.split_ids(split_name))
        chosen = [e for e in manifest.entries if e.sample_id in wanted]
    out: list[ImageSample] = []
    for entry in chosen:
        if manifest.samples is not None:
            base = manifest.samples[entry.sample_id]
            pixels = base.pixels
        elif entry.image_path is not None:
            pixels = _load_image(entry.image_path)
        else:
            raise DatasetError(f"entry {entry.sample_id!r} has neither pixels nor a path")
        gt = None
        if with_masks:
            if manifest.gt_masks is not None:
                gt = manifest.gt_masks.get(entry.sample_id)
            elif entry.mask_path is not None:
                gt = read_mask_png(entry.mask_path)
        out.append(ImageSample(entry.sample_id, pixels, entry.label, gt_mask=gt))
    return out


# ---------------------------------------------------------------------------
# Manifest files
# ---------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> None:
    """Serialize entries, labels, mask paths, and split per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# weakseg manifest v1"]
    for key in sorted(manifest.origin):
        lines.append(f"# origin {key} {manifest.origin[key]}")
    lines.append(f"# seed {manifest.seed}")
    for e in manifest.entries:
        img = str(e.image_path) if e.image_path else "-"
        msk = str(e.mask_path) if e.mask_path else "-"
        spl = manifest.split_assignment.get(e.sample_id, "-")
        lines.append(f"{e.sample_id}\t{e.label}\t{img}\t{msk}\t{spl}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    """Read a manifest file; synthetic manifests are regenerated from their
    recorded generator parameters so pixel data round-trips exactly."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    origin: dict[str, str] = {}
    seed = 0
    entries: list[ManifestEntry] = []
    assignment: dict[str, str] = {}
    for line in path.read_text().splitlines():
        if line.startswith("# origin "):
            _, _, key, value = line.split(" ", 3)
            origin[key] = value
            continue
        if line.startswith("# seed "):
            seed = int(line.split(" ", 2)[2])
            continue
        if line.startswith("#") or not line.strip():
            continue
        sid, label, img, msk, spl = line.split("\t")
        entries.append(
            ManifestEntry(
                sid,
                int(label),
                image_path=None if img == "-" else Path(img),
                mask_path=None if msk == "-" else Path(msk),
            )
        )
        if spl != "-":
            assignment[sid] = spl
    if origin.get("kind") == "synthetic":
        regenerated = synth_dataset(int(origin["n"]), int(origin["image_size"]), int(origin["seed"]))
        if [e.sample_id for e in regenerated.entries] != [e.sample_id for e in entries]:
            raise DatasetError(f"synthetic manifest ids do not match regeneration: {path}")
        return replace(regenerated, split_assignment=assignment, seed=seed)
    return DatasetManifest(
        entries=tuple(entries), split_assignment=assignment, seed=seed, origin=origin
    )
