"""Keypoint label files, netpbm rasters, texture-substitution augmentation, pruning.

Label files hold one instance per line::

    class cx cy w h x1 y1 v1 x2 y2 v2 x3 y3 v3 x4 y4 v4

with box and keypoint coordinates normalized to [0, 1] and written with six
decimals. Beans use the first keypoint slot; unused slots are ``0 0 0``.

A sample ``<stem>`` is stored as ``<stem>.ppm`` (image), ``<stem>.object.pgm``
and ``<stem>.marker.pgm`` (0/255 masks) and ``<stem>.txt`` (labels).
"""
from __future__ import annotations

import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, LabelParseError

N_LABEL_KEYPOINTS = 4
PRUNE_PRESETS = (0.02, 0.04, 0.06, 0.08, 0.10, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

SOURCE_ORIGINAL, SOURCE_MARKER, SOURCE_BACKGROUND = 0, 1, 2


# Labels ------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRecord:
    cls: int
    bbox: tuple[float, float, float, float]  # cx, cy, w, h
    keypoints: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        kps = tuple((float(x), float(y), int(v)) for x, y, v in self.keypoints)
        if len(kps) < N_LABEL_KEYPOINTS:
            kps += ((0.0, 0.0, 0),) * (N_LABEL_KEYPOINTS - len(kps))
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        problem = _validate(self)
        if problem:
            raise ValueError(problem)


def _validate(rec: LabelRecord) -> str | None:
    if isinstance(rec.cls, bool) or not isinstance(rec.cls, (int, np.integer)) or rec.cls < 0:
        return f"class id must be a non-negative integer, got {rec.cls!r}"
    if len(rec.bbox) != 4:
        return f"bbox needs 4 values, got {len(rec.bbox)}"
    if len(rec.keypoints) != N_LABEL_KEYPOINTS:
        return f"expected {N_LABEL_KEYPOINTS} keypoints, got {len(rec.keypoints)}"
    values = list(rec.bbox) + [c for x, y, _ in rec.keypoints for c in (x, y)]
    for v in values:
        if not (0.0 <= v <= 1.0):
            return f"normalized value {v} outside [0, 1]"
    for _, _, vis in rec.keypoints:
        if vis not in (0, 1, 2):
            return f"visibility must be 0, 1 or 2, got {vis}"
    return None


def format_label(rec: LabelRecord) -> str:
    fields = [str(int(rec.cls))] + [f"{v:.6f}" for v in rec.bbox]
    for x, y, v in rec.keypoints:
        fields += [f"{x:.6f}", f"{y:.6f}", str(v)]
    return " ".join(fields)


def parse_label(line: str, path="<string>", lineno: int = 1) -> LabelRecord:
    parts = line.split()
    expected = 5 + 3 * N_LABEL_KEYPOINTS
    if len(parts) != expected:
        raise LabelParseError(path, lineno, f"expected {expected} fields, got {len(parts)}")
    try:
        cls = int(parts[0])
        bbox = tuple(float(v) for v in parts[1:5])
        kps = []
        for i in range(N_LABEL_KEYPOINTS):
            x, y, v = parts[5 + 3 * i : 8 + 3 * i]
            vf = float(v)
            if vf != int(vf):
                raise ValueError(f"visibility must be an integer, got {v}")
            kps.append((float(x), float(y), int(vf)))
    except ValueError as exc:
        raise LabelParseError(path, lineno, str(exc)) from None
    try:
        return LabelRecord(cls, bbox, tuple(kps))
    except ValueError as exc:
        raise LabelParseError(path, lineno, str(exc)) from None


def read_labels(path) -> list[LabelRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            records.append(parse_label(line, path, lineno))
    return records


def write_labels(records: Iterable[LabelRecord], path) -> None:
    text = "".join(format_label(r) + "\n" for r in records)
    Path(path).write_text(text)


# Rasters -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Raster:
    """8-bit RGB image, ``pixels`` shaped ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"raster needs uint8 (H, W, 3) pixels, got {px.dtype} {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def buffer(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other) -> bool:
        return isinstance(other, Raster) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class MaskPair:
    object_mask: np.ndarray
    marker_mask: np.ndarray

    def __post_init__(self):
        obj = np.asarray(self.object_mask, dtype=bool)
        mk = np.asarray(self.marker_mask, dtype=bool)
        if obj.ndim != 2 or obj.shape != mk.shape:
            raise ValueError(f"mask shapes differ or are not 2D: {obj.shape} vs {mk.shape}")
        if np.any(mk & ~obj):
            raise ValueError("marker mask must lie inside the object mask")
        object.__setattr__(self, "object_mask", obj)
        object.__setattr__(self, "marker_mask", mk)

    @property
    def shape(self) -> tuple[int, int]:
        return self.object_mask.shape


def read_ppm(path) -> Raster:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "RGB":
                raise ValueError(f"expected a binary RGB PPM, got {im.format} {im.mode}")
            return Raster(np.array(im, dtype=np.uint8))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_ppm(raster: Raster, path) -> None:
    Image.fromarray(raster.pixels, mode="RGB").save(Path(path), format="PPM")


def read_mask(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise ValueError(f"expected a binary grayscale PGM, got {im.format} {im.mode}")
            data = np.array(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if np.any((data != 0) & (data != 255)):
        raise ConfigError(f"{path}: mask values must be 0 or 255")
    return data == 255


def write_mask(mask: np.ndarray, path) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PPM")


# Augmentation ------------------------------------------------------------


def _tile_coords(ys, xs, shape, offset):
    h, w = shape
    return (ys + offset[0]) % h, (xs + offset[1]) % w


def _marker_coords(ys, xs, shape, offset):
    """Texture coordinates that run the texture's x axis along the mask's long axis."""
    h, w = shape
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    if len(pts) >= 2:
        centered = pts - pts.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered / len(pts))
        if evals[-1] > 1e-12:
            major = evecs[:, -1]
            if major[np.argmax(np.abs(major))] < 0:
                major = -major
            minor = np.array([-major[1], major[0]])
            along = centered @ major
            across = centered @ minor
            tx = np.floor(along - along.min()).astype(np.intp)
            ty = np.floor(across - across.min()).astype(np.intp)
            return (ty + offset[0]) % h, (tx + offset[1]) % w
    return _tile_coords(ys, xs, shape, offset)


def augment_sample(
    img: Raster,
    masks: MaskPair,
    background: Raster,
    marker_texture: Raster,
    seed: int,
    return_sources: bool = False,
):
    """Substitute the background and marker regions with texture samples.

    Object pixels outside the marker keep their value; marker pixels come
    from ``marker_texture`` sampled along the marker's principal axis (or
    tiled when the marker is too small to define one); pixels outside the
    object come from ``background`` tiled from a seed-determined origin.

    With ``return_sources`` also returns ``(source, coords)``: per-pixel
    source ids and the ``(row, col)`` each pixel was copied from.
    """
    if masks.shape != (img.height, img.width):
        raise ValueError(f"mask size {masks.shape[::-1]} does not match image {img.width}x{img.height}")
    rng = np.random.default_rng(seed)
    bg_off = rng.integers(0, [background.height, background.width])
    mk_off = rng.integers(0, [marker_texture.height, marker_texture.width])

    h, w = img.height, img.width
    out = img.pixels.copy()
    source = np.full((h, w), SOURCE_ORIGINAL, dtype=np.int8)
    coords = np.stack(np.indices((h, w)), axis=-1)

    bg = ~masks.object_mask
    ys, xs = np.nonzero(bg)
    by, bx = _tile_coords(ys, xs, (background.height, background.width), bg_off)
    out[ys, xs] = background.pixels[by, bx]
    source[ys, xs] = SOURCE_BACKGROUND
    coords[ys, xs] = np.stack([by, bx], axis=1)

    ys, xs = np.nonzero(masks.marker_mask)
    my, mx = _marker_coords(ys, xs, (marker_texture.height, marker_texture.width), mk_off)
    out[ys, xs] = marker_texture.pixels[my, mx]
    source[ys, xs] = SOURCE_MARKER
    coords[ys, xs] = np.stack([my, mx], axis=1)

    result = Raster(out)
    return (result, (source, coords)) if return_sources else result


# Pruning -----------------------------------------------------------------


def prune_count(n: int, fraction: float) -> int:
    # round away float noise first: 0.07 * 100 must give 7, not 8
    return max(1, math.ceil(round(fraction * n, 9)))


def prune_dataset(index: Sequence, fraction: float, seed: int) -> list:
    """Uniform random subset of ``ceil(fraction * n)`` items, in input order."""
    items = list(index)
    if not items:
        raise ValueError("cannot prune an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    k = prune_count(len(items), fraction)
    chosen = np.sort(np.random.default_rng(seed).choice(len(items), size=k, replace=False))
    return [items[i] for i in chosen]


# Corpus ------------------------------------------------------------------


def sample_stems(images_dir) -> list[str]:
    return sorted(p.stem for p in Path(images_dir).glob("*.ppm"))


def load_masks(masks_dir, stem: str) -> MaskPair:
    masks_dir = Path(masks_dir)
    obj_path = masks_dir / f"{stem}.object.pgm"
    mk_path = masks_dir / f"{stem}.marker.pgm"
    try:
        return MaskPair(read_mask(obj_path), read_mask(mk_path))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{obj_path}: {exc}") from None


def count_instances(labels_dir) -> dict[int, int]:
    """Number of labeled instances per class id across every ``*.txt`` file."""
    counts: dict[int, int] = {}
    for path in sorted(Path(labels_dir).glob("*.txt")):
        for rec in read_labels(path):
            counts[rec.cls] = counts.get(rec.cls, 0) + 1
    return counts


def augment_corpus(images_dir, masks_dir, textures_dir, seed: int, out_dir) -> list[str]:
    """Augment every sample; textures are ``bg_*.ppm`` and ``marker_*.ppm``.

    Each sample draws its background and marker texture from a generator
    seeded by ``(seed, sample number)``. Labels and masks are copied
    alongside the new image. Returns the written stems.
    """
    images_dir, masks_dir, textures_dir = Path(images_dir), Path(masks_dir), Path(textures_dir)
    out_dir = Path(out_dir)
    bgs = sorted(textures_dir.glob("bg_*.ppm"))
    markers = sorted(textures_dir.glob("marker_*.ppm"))
    if not bgs or not markers:
        raise ConfigError(f"{textures_dir}: need at least one bg_*.ppm and one marker_*.ppm")
    bg_tex = [read_ppm(p) for p in bgs]
    mk_tex = [read_ppm(p) for p in markers]
    stems = sample_stems(images_dir)
    if not stems:
        raise ConfigError(f"{images_dir}: no *.ppm images")
    out_dir.mkdir(parents=True, exist_ok=True)
    for n, stem in enumerate(stems):
        rng = np.random.default_rng([seed, n])
        bg = bg_tex[int(rng.integers(len(bg_tex)))]
        mk = mk_tex[int(rng.integers(len(mk_tex)))]
        sample_seed = int(rng.integers(2**63))
        img_path = images_dir / f"{stem}.ppm"
        img = read_ppm(img_path)
        masks = load_masks(masks_dir, stem)
        try:
            aug = augment_sample(img, masks, bg, mk, sample_seed)
        except ValueError as exc:
            raise ConfigError(f"{img_path}: {exc}") from None
        write_ppm(aug, out_dir / f"{stem}.ppm")
        for src in (masks_dir / f"{stem}.object.pgm", masks_dir / f"{stem}.marker.pgm"):
            shutil.copyfile(src, out_dir / src.name)
        for labels in (images_dir / f"{stem}.txt", masks_dir / f"{stem}.txt"):
            if labels.exists():
                shutil.copyfile(labels, out_dir / labels.name)
                break
    return stems
