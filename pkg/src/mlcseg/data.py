"""Sample I/O, tiling, augmentation, fold assignment, synthetic datasets.

All images are CHW float32 in [0, 1]; masks are 1xHxW float32 in {0, 1}.
On disk both are 8-bit PNG, masks stored as 0/255. Each op is deterministic
given its seed, so any stage of a run can be replayed in isolation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor


@dataclass
class Sample:
    """One image/mask pair under a stable identifier."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample '{self.id}': image must be 3xHxW, got {self.image.shape}")
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"sample '{self.id}': mask must be 1xHxW, got {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(
                f"sample '{self.id}': image extents {self.image.shape[1:]} != mask {self.mask.shape[1:]}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"sample '{self.id}': image values outside [0, 1]")
        m = self.mask
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError(f"sample '{self.id}': mask values must be 0 or 1")


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (UnidentifiedImageError, OSError) as e:
        raise ValueError(f"cannot decode image file {path}: {e}") from e


def load_sample(image_path, mask_path, sample_id: str | None = None) -> Sample:
    """Read an 8-bit image/mask PNG pair; mask binarized at 0.5."""
    im = _open(image_path).convert("RGB")
    mk = _open(mask_path).convert("L")
    if im.size != mk.size:
        raise ValueError(
            f"image {image_path} is {im.size[0]}x{im.size[1]} "
            f"but mask {mask_path} is {mk.size[0]}x{mk.size[1]}")
    image = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    mask = (np.asarray(mk, dtype=np.float32)[None] / 255.0 >= 0.5).astype(np.float32)
    return Sample(id=sample_id or Path(image_path).stem, image=image, mask=mask)


def load_image(path) -> np.ndarray:
    """Read an RGB image as 3xHxW float32 in [0, 1]."""
    im = _open(path).convert("RGB")
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_gray(path) -> np.ndarray:
    """Read a grayscale map as 1xHxW float32 in [0, 1], without binarizing."""
    im = _open(path).convert("L")
    return np.asarray(im, dtype=np.float32)[None] / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must be 3xHxW, got {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def save_mask(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"mask must be 1xHxW, got {arr.shape}")
        arr = arr[0]
    u8 = ((arr >= 0.5) * np.uint8(255)).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG")


def tile(sample: Sample, tile_size: int) -> list:
    """Row-major non-overlapping square tiles; ids gain an _r{r}c{c} suffix."""
    _, h, w = sample.image.shape
    if tile_size < 1 or h % tile_size or w % tile_size:
        raise ValueError(f"extents {h}x{w} not divisible by tile size {tile_size}")
    out = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            ys = slice(r * tile_size, (r + 1) * tile_size)
            xs = slice(c * tile_size, (c + 1) * tile_size)
            out.append(Sample(id=f"{sample.id}_r{r}c{c}",
                              image=sample.image[:, ys, xs].copy(),
                              mask=sample.mask[:, ys, xs].copy()))
    return out


_TILE_ID = re.compile(r"^(?P<base>.*)_r(?P<r>\d+)c(?P<c>\d+)$")


def stitch_tiles(tiles) -> Sample:
    """Reassemble tiles produced by :func:`tile` into the original sample."""
    if not tiles:
        raise ValueError("no tiles to stitch")
    grid = {}
    base = None
    for t in tiles:
        m = _TILE_ID.match(t.id)
        if m is None:
            raise ValueError(f"tile id '{t.id}' has no _r{{r}}c{{c}} suffix")
        if base is None:
            base = m.group("base")
        elif m.group("base") != base:
            raise ValueError(f"tiles mix ids '{base}' and '{m.group('base')}'")
        grid[(int(m.group("r")), int(m.group("c")))] = t
    rows = max(r for r, _ in grid) + 1
    cols = max(c for _, c in grid) + 1
    if len(grid) != rows * cols:
        raise ValueError(f"incomplete {rows}x{cols} tile grid: {len(grid)} tiles")
    image = np.concatenate(
        [np.concatenate([grid[(r, c)].image for c in range(cols)], axis=2) for r in range(rows)],
        axis=1)
    mask = np.concatenate(
        [np.concatenate([grid[(r, c)].mask for c in range(cols)], axis=2) for r in range(rows)],
        axis=1)
    return Sample(id=base, image=image, mask=mask)


def _rescale(image: np.ndarray, mask: np.ndarray, factor: float):
    _, h, w = image.shape
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    img = tensor.bilinear_resize(image[None].astype(np.float32), nh, nw)[0]
    msk = tensor.nearest_resize(mask[None], nh, nw)[0]
    if nh >= h:
        top, left = (nh - h) // 2, (nw - w) // 2
        return img[:, top : top + h, left : left + w], msk[:, top : top + h, left : left + w]
    pt, pl = (h - nh) // 2, (w - nw) // 2
    pad = ((0, 0), (pt, h - nh - pt), (pl, w - nw - pl))
    return np.pad(img, pad), np.pad(msk, pad)


SCALE_CHOICES = (0.75, 1.0, 1.25)


def augment(sample: Sample, seed: int) -> Sample:
    """Seeded 50/50 horizontal and vertical flips plus a bounded rescale.

    The same spatial transform hits image and mask; rescaling restores the
    original extents by center crop or zero pad, and the mask is re-binarized.
    """
    rng = np.random.default_rng(seed)
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    factor = float(rng.choice(SCALE_CHOICES))
    image, mask = sample.image, sample.mask
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, :, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[:, ::-1, :]
    if factor != 1.0:
        image, mask = _rescale(np.ascontiguousarray(image), np.ascontiguousarray(mask), factor)
    mask = (np.asarray(mask) >= 0.5).astype(np.float32)
    return Sample(id=sample.id, image=np.ascontiguousarray(image, dtype=np.float32), mask=mask)


@dataclass
class FoldPlan:
    """Balanced assignment of sample ids to k cross-validation folds."""

    k: int
    assignment: dict
    seed: int | None = None

    def test_ids(self, fold: int) -> list:
        self._check(fold)
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        self._check(fold)
        return [i for i, f in self.assignment.items() if f != fold]

    def _check(self, fold: int):
        if not 0 <= fold < self.k:
            raise ValueError(f"fold index {fold} outside [0, {self.k})")


def kfold_split(ids, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle then round-robin: fold sizes differ by at most one."""
    ids = list(ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k = {k} exceeds the {len(ids)} available ids")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = {ids[j]: pos % k for pos, j in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment, seed=seed)


def save_fold_plan(plan: FoldPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, fold in plan.assignment.items():
            fh.write(f"{sid}\t{fold}\n")


def load_fold_plan(path) -> FoldPlan:
    assignment = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected 'id<TAB>fold', got {line!r}")
            assignment[parts[0]] = int(parts[1])
    if not assignment:
        raise ValueError(f"{path}: empty fold plan")
    return FoldPlan(k=max(assignment.values()) + 1, assignment=assignment)


def _draw_blobs(rng, size: int) -> np.ndarray:
    # Coarse region-scale ellipses: the network predicts at 1/16 resolution,
    # so structures must span many output cells to be learnable at all.
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        ry, rx = rng.uniform(0.15, 0.35, 2) * size
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def _draw_rings(rng, size: int) -> np.ndarray:
    # One thick-walled elliptical annulus with a small lumen, tubule-like.
    # The wall spans most of the frame so the shape stays resolvable at the
    # network's 1/16 output resolution even for the smallest legal images.
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.45, 0.55, 2) * size
    ry, rx = rng.uniform(0.34, 0.44, 2) * size
    lumen = rng.uniform(0.10, 0.15)
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return (d <= 1.0) & (d > lumen * lumen)


SYNTH_STYLES = ("blobs", "rings")
FG_FRACTION_RANGE = (0.05, 0.6)


def synth_dataset(n: int, image_size: int, seed: int, style: str = "blobs") -> list:
    """Procedural samples: textured background plus bright foreground shapes.

    Masks are re-drawn until the foreground fraction lands in
    FG_FRACTION_RANGE, so the task is neither empty nor saturated.
    """
    if style not in SYNTH_STYLES:
        raise ValueError(f"style must be one of {SYNTH_STYLES}, got '{style}'")
    if image_size < 32 or image_size % 32:
        raise ValueError(f"image_size must be a positive multiple of 32, got {image_size}")
    draw = _draw_blobs if style == "blobs" else _draw_rings
    rng = np.random.default_rng(seed)
    lo, hi = FG_FRACTION_RANGE
    out = []
    for i in range(n):
        for _ in range(1000):
            mask2d = draw(rng, image_size)
            frac = mask2d.mean()
            if lo <= frac <= hi:
                break
        else:
            raise RuntimeError(f"could not draw a mask with foreground in [{lo}, {hi}]")
        coarse = rng.random((1, 3, image_size // 8, image_size // 8)).astype(np.float32)
        bg = tensor.bilinear_resize(coarse, image_size, image_size)[0]
        image = 0.15 + 0.4 * bg + 0.35 * mask2d[None].astype(np.float32)
        image += rng.normal(0.0, 0.03, image.shape).astype(np.float32)
        image = np.clip(image, 0.0, 1.0)
        out.append(Sample(id=f"{style}{i:04d}", image=image,
                          mask=mask2d[None].astype(np.float32)))
    return out


def save_manifest(records, path) -> None:
    """Write `id<TAB>image_path<TAB>mask_path` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, image_path, mask_path in records:
            fh.write(f"{sid}\t{image_path}\t{mask_path}\n")


def load_manifest(path) -> list:
    """Read manifest records; relative paths resolve against the manifest dir."""
    root = Path(path).parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'id<TAB>image<TAB>mask', got {line!r}")
            sid, image_path, mask_path = parts
            records.append((sid, str(root / image_path), str(root / mask_path)))
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


def save_dataset(samples, out_dir) -> str:
    """Write images/, masks/, and manifest.tsv under out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        save_image(out / "images" / f"{s.id}.png", s.image)
        save_mask(out / "masks" / f"{s.id}.png", s.mask)
        records.append((s.id, f"images/{s.id}.png", f"masks/{s.id}.png"))
    manifest = out / "manifest.tsv"
    save_manifest(records, manifest)
    return str(manifest)


def load_dataset(manifest_path) -> list:
    return [load_sample(image, mask, sid) for sid, image, mask in load_manifest(manifest_path)]
