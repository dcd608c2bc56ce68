"""Domain types, CT preprocessing, dataset partitioning and a synthetic corpus.

Masks are plain ``uint8`` numpy arrays holding 0 (background) and 1 (tumor);
:func:`as_mask` is the single gate that validates and normalizes them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ConsistencyError, ValidationError

HU_WINDOW = (-82.0, 198.0)
MIN_TUMOR_PIXELS = 100
# 8-connectivity for lesion components
CONNECTIVITY_8 = np.ones((3, 3), dtype=bool)


class Origin(str, enum.Enum):
    ORIGINAL = "original"
    PSEUDO = "pseudo"


class Stage(str, enum.Enum):
    SS = "SS"
    MS = "MS"
    AN = "AN"


def as_mask(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Validate a binary mask and return it as a ``uint8`` array.

    Boolean arrays are accepted as-is; numeric arrays must contain only 0 and 1.
    """
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValidationError(f"mask must be 2D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"mask shape {arr.shape} != expected {tuple(shape)}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("mask values must be exactly 0 or 1")
    return arr.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class Slice:
    """One preprocessed 2D image with intensities in [0, 1]."""

    id: str
    image: np.ndarray = field(repr=False, compare=False)
    has_tumor: bool = False

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2:
            raise ValidationError(f"slice {self.id}: image must be 2D, got {img.shape}")
        if img.size and (np.nanmin(img) < 0.0 or np.nanmax(img) > 1.0 or not np.isfinite(img).all()):
            raise ValidationError(f"slice {self.id}: intensities must be finite and in [0, 1]")
        object.__setattr__(self, "image", img)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass(frozen=True)
class PseudoLabel:
    """A model-produced mask with its provenance."""

    slice_id: str
    mask: np.ndarray = field(repr=False, compare=False)
    stage: Stage
    iteration: int
    agreement_dsc: float | None = None


@dataclass(frozen=True)
class LabeledSample:
    slice: Slice
    mask: np.ndarray = field(repr=False, compare=False)
    origin: Origin = Origin.ORIGINAL
    pseudo: PseudoLabel | None = None

    def __post_init__(self):
        object.__setattr__(self, "mask", as_mask(self.mask, self.slice.shape))

    @property
    def id(self) -> str:
        return self.slice.id


@dataclass(frozen=True)
class SyntheticSample:
    """Adaptation-network training pair: (image, corrupted mask) stack and clean target."""

    input: np.ndarray = field(repr=False)
    target: np.ndarray = field(repr=False)


@dataclass
class DatasetState:
    """The labeled/unlabeled/validation/test partition at one pipeline iteration."""

    labeled: list[LabeledSample]
    unlabeled: list[Slice]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    iteration: int = 0

    def ids(self, partition: str) -> list[str]:
        return [s.id for s in getattr(self, partition)]

    def check(self) -> None:
        """Raise :class:`ConsistencyError` if partitions overlap."""
        seen: dict[str, str] = {}
        for name in ("labeled", "unlabeled", "validation", "test"):
            for sid in self.ids(name):
                if sid in seen:
                    raise ConsistencyError(f"slice {sid} is in both {seen[sid]} and {name}")
                seen[sid] = name

    def counts(self) -> dict[str, int]:
        return {name: len(getattr(self, name)) for name in ("labeled", "unlabeled", "validation", "test")}


# ---------------------------------------------------------------------------
# preprocessing


def clip_and_normalize(volume, window_lo: float = HU_WINDOW[0], window_hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Clamp HU values to ``[window_lo, window_hi]`` and rescale the window to [0, 1]."""
    if not window_lo < window_hi:
        raise ConfigError(f"window_lo ({window_lo}) must be below window_hi ({window_hi})")
    vol = np.asarray(volume, dtype=np.float64)
    bad = ~np.isfinite(vol)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"non-finite voxel at index {idx}: {vol[idx]}")
    return (np.clip(vol, window_lo, window_hi) - window_lo) / (window_hi - window_lo)


def volume_to_slices(volume, masks=None, volume_id: str = "volume") -> list[tuple[Slice, np.ndarray | None]]:
    """Split a ``(Z, H, W)`` volume into axial slices.

    Slice ids are ``<volume_id>_z<index>``. When ``masks`` is given each slice is
    paired with its plane of the mask volume, otherwise with ``None``.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValidationError(f"volume must be 3D, got shape {vol.shape}")
    if masks is not None:
        masks = np.asarray(masks)
        if masks.shape != vol.shape:
            raise ValidationError(f"mask volume shape {masks.shape} != image volume shape {vol.shape}")
    out = []
    for z in range(vol.shape[0]):
        mask = as_mask(masks[z]) if masks is not None else None
        has_tumor = bool(mask.any()) if mask is not None else False
        out.append((Slice(f"{volume_id}_z{z}", vol[z], has_tumor), mask))
    return out


def filter_small_tumors(mask, min_pixels: int = MIN_TUMOR_PIXELS) -> np.ndarray:
    """Drop 8-connected foreground components smaller than ``min_pixels``."""
    if min_pixels < 0:
        raise ConfigError("min_pixels must be non-negative")
    m = as_mask(mask)
    labels, n = ndimage.label(m, structure=CONNECTIVITY_8)
    if n == 0:
        return m.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_pixels
    keep[0] = False
    return keep[labels].astype(np.uint8)


# ---------------------------------------------------------------------------
# partitioning


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_sizes(n: int, test_fraction: float, val_fraction_of_train: float,
                    labeled_fraction_of_train: float) -> dict[str, int]:
    """Partition sizes: floor for test/validation/labeled, the rest unlabeled."""
    for name, f in (("test_fraction", test_fraction), ("val_fraction_of_train", val_fraction_of_train),
                    ("labeled_fraction_of_train", labeled_fraction_of_train)):
        if not 0.0 < f < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {f}")
    n_test = int(math.floor(test_fraction * n))
    n_train = n - n_test
    n_val = int(math.floor(val_fraction_of_train * n_train))
    n_lab = int(math.floor(labeled_fraction_of_train * n_train))
    sizes = {"test": n_test, "validation": n_val, "labeled": n_lab, "unlabeled": n_train - n_val - n_lab}
    if min(sizes.values()) < 1:
        raise ConfigError(f"{n} slices cannot populate every partition: {sizes}")
    return sizes


def split_ids(ids: Sequence[str], tumor: Sequence[bool], test_fraction: float = 0.2,
              val_fraction_of_train: float = 0.1, labeled_fraction_of_train: float = 0.1,
              seed: int = 0) -> dict[str, list[str]]:
    """Stratified split of ids into test/validation/labeled/unlabeled.

    Tumor counts per partition come from rounding the cumulative target counts,
    which keeps every partition within one slice of the global tumor ratio.
    """
    if len(set(ids)) != len(ids):
        raise ValidationError("slice ids must be unique")
    n = len(ids)
    sizes = partition_sizes(n, test_fraction, val_fraction_of_train, labeled_fraction_of_train)
    rng = np.random.default_rng(seed)
    pos = [i for i, t in zip(ids, tumor) if t]
    neg = [i for i, t in zip(ids, tumor) if not t]
    pos = [pos[k] for k in rng.permutation(len(pos))]
    neg = [neg[k] for k in rng.permutation(len(neg))]
    ratio = len(pos) / n

    out: dict[str, list[str]] = {}
    cum_size = cum_pos = 0
    for name in ("test", "validation", "labeled", "unlabeled"):
        size = sizes[name]
        cum_size += size
        target = _round_half_up(cum_size * ratio) - cum_pos
        # stay feasible when one stratum runs dry
        remaining_neg = len(neg) - (cum_size - size - cum_pos)
        k_pos = min(max(target, size - remaining_neg), len(pos) - cum_pos, size)
        taken_neg = cum_size - size - cum_pos
        out[name] = sorted(pos[cum_pos:cum_pos + k_pos] + neg[taken_neg:taken_neg + size - k_pos])
        cum_pos += k_pos
    return out


def make_partition(samples: Sequence[tuple[Slice, np.ndarray]], test_fraction: float = 0.2,
                   val_fraction_of_train: float = 0.1, labeled_fraction_of_train: float = 0.1,
                   seed: int = 0) -> DatasetState:
    """Build the initial :class:`DatasetState` from labeled ``(Slice, mask)`` pairs.

    Unlabeled slices keep no mask; callers that need the hidden ground truth
    for analysis hold on to ``samples`` themselves.
    """
    by_id = {s.id: (s, m) for s, m in samples}
    split = split_ids([s.id for s, _ in samples], [s.has_tumor for s, _ in samples],
                      test_fraction, val_fraction_of_train, labeled_fraction_of_train, seed)

    def labeled(name):
        return [LabeledSample(by_id[i][0], by_id[i][1]) for i in split[name]]

    state = DatasetState(
        labeled=labeled("labeled"),
        unlabeled=[by_id[i][0] for i in split["unlabeled"]],
        validation=labeled("validation"),
        test=labeled("test"),
    )
    state.check()
    return state


# ---------------------------------------------------------------------------
# synthetic corpus


def _blob(h: int, w: int, rng: np.random.Generator, size_range: tuple[float, float]) -> np.ndarray:
    """Normalized radial distance field of a randomly rotated, wobbly ellipse (1.0 on the rim)."""
    s = min(h, w)
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    a = rng.uniform(*size_range) * s
    b = a * rng.uniform(0.6, 1.0)
    theta = rng.uniform(0, np.pi)
    k = int(rng.integers(2, 5))
    phase = rng.uniform(0, 2 * np.pi)
    wobble = rng.uniform(0.0, 0.15)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    ang = np.arctan2(v, u)
    return r / (1.0 + wobble * np.sin(k * ang + phase))


def synthesize_slice(h: int, w: int, n_tumors: int, rng: np.random.Generator,
                     contrast_range: tuple[float, float] = (0.15, 0.4), noise: float = 0.04,
                     size_range: tuple[float, float] = (0.07, 0.17)) -> tuple[np.ndarray, np.ndarray]:
    """Render one image/mask pair.

    Background is smooth low-frequency texture plus bounded uniform noise. Each
    tumor adds ``contrast * clip((1.2 - r) / 0.4, 0, 1)`` where ``r`` is the
    blob's normalized radius; the mask is ``r <= 1``, so every foreground pixel
    is at least ``contrast / 2`` above the local texture.
    """
    tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6, mode="wrap")
    tex = tex / (np.abs(tex).max() + 1e-12)
    image = 0.35 + 0.08 * tex + rng.uniform(-noise, noise, size=(h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(n_tumors):
        r = _blob(h, w, rng, size_range)
        image += rng.uniform(*contrast_range) * np.clip((1.2 - r) / 0.4, 0.0, 1.0)
        mask |= (r <= 1.0).astype(np.uint8)
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic_corpus(n_slices: int, height: int = 64, width: int = 64, seed: int = 0,
                              tumor_free_fraction: float = 0.2, max_tumors: int = 3,
                              prefix: str = "synth") -> list[tuple[Slice, np.ndarray]]:
    """Deterministic stand-in for a CT slice corpus.

    Exactly ``round(tumor_free_fraction * n_slices)`` slices are tumor free; the
    rest carry between 1 and ``max_tumors`` bright blobs.
    """
    if n_slices < 1:
        raise ConfigError("n_slices must be >= 1")
    rng = np.random.default_rng(seed)
    n_free = _round_half_up(tumor_free_fraction * n_slices)
    free = set(rng.permutation(n_slices)[:n_free].tolist())
    children = np.random.SeedSequence(seed).spawn(n_slices)
    out = []
    for i in range(n_slices):
        r = np.random.default_rng(children[i])
        n_t = 0 if i in free else int(r.integers(1, max_tumors + 1))
        image, mask = synthesize_slice(height, width, n_t, r)
        out.append((Slice(f"{prefix}_{i:05d}", image.astype(np.float32), bool(mask.any())), mask))
    return out


def with_mask(sample: LabeledSample, mask: np.ndarray) -> LabeledSample:
    return replace(sample, mask=mask)


def stack_images(slices: Iterable[Slice]) -> np.ndarray:
    return np.stack([s.image for s in slices]).astype(np.float32)
