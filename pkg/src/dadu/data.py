"""Sample loading, synthetic cardiac phantoms and fold assignment.

Masks use the label convention 0 = background, 1 = RV, 2 = LMyo, 3 = LV.
Dataset directories look like::

    <root>/images/<case_id>.png
    <root>/masks/<case_id>.png
    <root>/manifest.txt        (optional, one case id per line)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

NUM_CLASSES = 4
BASE_INTENSITY = {0: 0.1, 1: 0.5, 2: 0.35, 3: 0.7}
MIN_MYO = 1.5


class DataError(Exception):
    pass


class UnreadableImageError(DataError):
    pass


class ExtentMismatchError(DataError):
    pass


class MaskValueError(DataError):
    pass


@dataclass
class Sample:
    image: Tensor  # [1, 1, H, W], values in [0, 1]
    mask: np.ndarray  # [H, W] integer labels
    case_id: str = ""

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape:
            raise ExtentMismatchError(
                f"{self.case_id}: image extent {self.image.shape[2:]} != mask extent {self.mask.shape}")


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return ((img - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def _open(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, ValueError) as exc:
        raise UnreadableImageError(f"cannot read {path}: {exc}") from exc


def load_sample(image_path, mask_path, size: Optional[int] = None,
                remap: Optional[Mapping[int, int]] = None, case_id: Optional[str] = None) -> Sample:
    """Read an 8-bit grayscale image and its label mask.

    The image is scaled by 1/255, resized bilinearly to ``size`` (if given) and
    min-max normalized. The mask is resized with nearest neighbour and
    optionally remapped through ``remap`` before its labels are validated.
    """
    im = _open(image_path)
    mk = _open(mask_path)
    if im.mode != "L":
        im = im.convert("L")
    img = np.asarray(im, dtype=np.float32) / 255.0
    if mk.mode == "P":
        mask = np.asarray(mk, dtype=np.int64)  # palette indices are the labels
    else:
        mask = np.asarray(mk.convert("L"), dtype=np.int64)

    if size is not None:
        if img.shape != (size, size):
            img = np.asarray(Image.fromarray(img, mode="F").resize((size, size), Image.BILINEAR),
                             dtype=np.float32)
        if mask.shape != (size, size):
            mask = np.asarray(Image.fromarray(mask.astype(np.uint8), mode="L")
                              .resize((size, size), Image.NEAREST), dtype=np.int64)
    if img.shape != mask.shape:
        raise ExtentMismatchError(f"{image_path}: image {img.shape} and mask {mask.shape} extents differ")

    if remap:
        lut = np.arange(256, dtype=np.int64)
        for src, dst in remap.items():
            lut[int(src)] = int(dst)
        mask = lut[mask]
    bad = np.unique(mask[(mask < 0) | (mask >= NUM_CLASSES)])
    if bad.size:
        raise MaskValueError(f"{mask_path}: mask values {bad.tolist()} outside 0..{NUM_CLASSES - 1}")

    img = normalize_image(img)
    cid = case_id if case_id is not None else Path(image_path).stem
    return Sample(Tensor(img[None, None]), mask, cid)


def save_sample(sample: Sample, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image.data[0, 0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(root / "images" / f"{sample.case_id}.png")
    Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{sample.case_id}.png")


def list_cases(root) -> list[str]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if manifest.exists():
        return [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    return sorted(p.stem for p in (root / "images").glob("*.png"))


def load_dataset(root, size: Optional[int] = None,
                 remap: Optional[Mapping[int, int]] = None) -> list[Sample]:
    root = Path(root)
    if not (root / "images").is_dir():
        raise FileNotFoundError(f"dataset directory {root} has no images/ subdirectory")
    return [load_sample(root / "images" / f"{cid}.png", root / "masks" / f"{cid}.png",
                        size=size, remap=remap, case_id=cid)
            for cid in list_cases(root)]


def write_dataset(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    for s in samples:
        save_sample(s, root)
    (root / "manifest.txt").write_text("".join(f"{s.case_id}\n" for s in samples))


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomParams:
    """Geometry ranges are in pixels at ``size`` 64 and scale linearly with ``size``.

    Myocardium thickness never drops below ``MIN_MYO`` pixels after scaling, so
    the annulus always separates LV from RV.

    The RV is the part of a disk of radius ``rv_scale * (lv + myo)``, centred
    ``rv_offset * (lv + myo)`` away from the LV centre, lying outside the
    myocardium.
    """

    seed: int = 0
    size: int = 64
    lv_radius: tuple[float, float] = (5.0, 8.0)
    myo_thickness: tuple[float, float] = (2.0, 3.5)
    rv_offset: tuple[float, float] = (0.6, 0.9)
    rv_scale: tuple[float, float] = (1.0, 1.3)
    center_jitter: float = 3.0
    noise_sigma: float = 0.05

    def validate(self) -> None:
        k = self.size / 64.0
        outer = self.lv_radius[1] * k + max(self.myo_thickness[1] * k, MIN_MYO)
        if not outer < self.size / 2:
            raise ValueError(f"lv_radius + myo_thickness ({outer:.1f}) must be < size/2 ({self.size / 2})")
        for name in ("lv_radius", "myo_thickness", "rv_offset", "rv_scale"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name}: invalid range ({lo}, {hi})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def synth_phantom(params: PhantomParams, case_id: str = "") -> Sample:
    """Deterministic LV disk / myocardial annulus / RV crescent phantom."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    k = params.size / 64.0
    r = rng.uniform(*params.lv_radius) * k
    t = max(rng.uniform(*params.myo_thickness) * k, MIN_MYO)
    outer = r + t
    cy, cx = (params.size - 1) / 2 + rng.uniform(-1, 1, size=2) * params.center_jitter * k
    angle = math.pi + rng.uniform(-0.5, 0.5)
    d = rng.uniform(*params.rv_offset) * outer
    rv_r = rng.uniform(*params.rv_scale) * outer
    ry, rx = cy + d * math.sin(angle), cx + d * math.cos(angle)

    yy, xx = np.mgrid[0:params.size, 0:params.size].astype(np.float64)
    dist_lv = np.hypot(yy - cy, xx - cx)
    dist_rv = np.hypot(yy - ry, xx - rx)
    mask = np.zeros((params.size, params.size), dtype=np.int64)
    mask[(dist_rv < rv_r) & (dist_lv >= outer)] = 1
    mask[(dist_lv >= r) & (dist_lv < outer)] = 2
    mask[dist_lv < r] = 3

    lut = np.array([BASE_INTENSITY[i] for i in range(NUM_CLASSES)])
    img = lut[mask]
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(Tensor(img[None, None]), mask, case_id or f"phantom{params.seed}")


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0] >> 1)


def phantom_dataset(count: int, size: int = 64, seed: int = 0, noise_sigma: float = 0.05,
                    start: int = 0) -> list[Sample]:
    """``count`` phantoms, normalized exactly as :func:`load_sample` would."""
    out = []
    for i in range(start, start + count):
        p = PhantomParams(seed=derive_seed(seed, i), size=size, noise_sigma=noise_sigma)
        s = synth_phantom(p, case_id=f"case{i:04d}")
        s.image = Tensor(normalize_image(s.image.data[0, 0])[None, None])
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# Targets and batching
# ---------------------------------------------------------------------------


def one_hot(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> Tensor:
    """``[1, K, H, W]`` float32 indicator maps."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise MaskValueError(f"labels outside 0..{num_classes - 1}")
    return Tensor((np.arange(num_classes)[:, None, None] == mask[None]).astype(np.float32)[None])


def stack_batch(samples: Sequence[Sample], num_classes: int = NUM_CLASSES) -> tuple[Tensor, Tensor]:
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.stack([s.mask for s in samples])
    targets = (np.arange(num_classes)[None, :, None, None] == masks[:, None]).astype(np.float32)
    return Tensor(images), Tensor(targets)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    fold_count: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold(self, index: int) -> list[str]:
        return sorted(cid for cid, f in self.assignments.items() if f == index)

    def train_ids(self, index: int) -> list[str]:
        return sorted(cid for cid, f in self.assignments.items() if f != index)

    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.fold_count)]


def kfold_split(case_ids: Sequence[str], seed: int = 0, folds: int = 5) -> FoldSplit:
    """Shuffle the sorted ids with ``seed`` and deal them round-robin into ``folds``."""
    ids = sorted(set(case_ids))
    if len(ids) != len(case_ids):
        raise ValueError("duplicate case ids")
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} cases cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(folds, {ids[j]: pos % folds for pos, j in enumerate(order)})
