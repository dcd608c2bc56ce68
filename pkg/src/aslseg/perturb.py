"""Synthetic corruption of ground-truth masks for adaptation-network training.

Five mask operations mimic typical segmenter mistakes: spurious blobs
(over-segmentation), occluded foreground (under-segmentation), elastic warps
(boundary shift), dilation (edge expansion) and erosion (edge shrinkage).
:func:`perturb` applies each independently with its own probability, after an
optional all-black draw that simulates an empty prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import LabeledSample, SyntheticSample, as_mask
from .errors import ConfigError, ValidationError

OPERATIONS = ("noise", "occlude", "elastic", "dilate", "erode")


@dataclass(frozen=True)
class PerturbConfig:
    p_noise: float = 0.4
    p_occlude: float = 0.4
    p_elastic: float = 0.4
    p_dilate: float = 0.4
    p_erode: float = 0.4
    all_black: float = 0.05
    noise_blobs: tuple[int, int] = (1, 5)
    noise_radius: tuple[float, float] = (2.0, 8.0)
    occlude_fraction: tuple[float, float] = (0.1, 0.5)
    elastic_amplitude: float = 3.0
    elastic_sigma: float = 6.0
    morph_radius: tuple[int, int] = (1, 4)
    order: tuple[str, ...] = field(default=OPERATIONS)

    def __post_init__(self):
        for name in ("p_noise", "p_occlude", "p_elastic", "p_dilate", "p_erode", "all_black"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v}")
        for name in ("noise_blobs", "noise_radius", "occlude_fraction", "morph_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a non-negative (lo, hi) range, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if not 0.0 <= self.occlude_fraction[1] <= 1.0:
            raise ConfigError("occlude_fraction must lie in [0, 1]")
        if self.elastic_amplitude < 0 or self.elastic_sigma <= 0:
            raise ConfigError("elastic_amplitude must be >= 0 and elastic_sigma > 0")
        if sorted(self.order) != sorted(OPERATIONS):
            raise ConfigError(f"order must be a permutation of {OPERATIONS}, got {self.order}")
        object.__setattr__(self, "order", tuple(self.order))

    def probability(self, op: str) -> float:
        return getattr(self, f"p_{op}")


def disc(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2) <= radius ** 2


def add_background_noise(mask, cfg: PerturbConfig, seed: int) -> np.ndarray:
    """Paint 1..k random discs centred on background pixels."""
    m = as_mask(mask)
    rng = np.random.default_rng(seed)
    h, w = m.shape
    bg = np.flatnonzero(m == 0)
    out = m.copy()
    if bg.size == 0:
        return out
    yy, xx = np.mgrid[0:h, 0:w]
    k = int(rng.integers(cfg.noise_blobs[0], cfg.noise_blobs[1] + 1))
    for _ in range(k):
        cy, cx = divmod(int(bg[rng.integers(bg.size)]), w)
        r = rng.uniform(*cfg.noise_radius)
        out[(yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2] = 1
    return out


def occlude_foreground(mask, cfg: PerturbConfig, seed: int) -> np.ndarray:
    """Erase the ``round(f * N)`` foreground pixels nearest a random foreground pixel.

    ``f`` is drawn from ``cfg.occlude_fraction`` and ``N`` is the foreground size,
    so the erased patch is a disc-like region clipped to the foreground.
    """
    m = as_mask(mask)
    fg = np.flatnonzero(m)
    if fg.size == 0:
        return m.copy()
    rng = np.random.default_rng(seed)
    frac = rng.uniform(*cfg.occlude_fraction)
    n_cover = int(np.floor(frac * fg.size + 0.5))
    cy, cx = divmod(int(fg[rng.integers(fg.size)]), m.shape[1])
    ry, rx = np.divmod(fg, m.shape[1])
    d2 = (ry - cy) ** 2 + (rx - cx) ** 2
    covered = fg[np.argsort(d2, kind="stable")[:n_cover]]
    out = m.copy().ravel()
    out[covered] = 0
    return out.reshape(m.shape)


def elastic_deform(mask, cfg: PerturbConfig, seed: int) -> np.ndarray:
    """Warp by a smooth random field whose largest displacement is ``cfg.elastic_amplitude`` px."""
    m = as_mask(mask)
    if cfg.elastic_amplitude == 0:
        return m.copy()
    rng = np.random.default_rng(seed)
    h, w = m.shape
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), cfg.elastic_sigma, mode="reflect")
        fields.append(f / (np.abs(f).max() + 1e-12) * cfg.elastic_amplitude)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = ndimage.map_coordinates(m.astype(np.float64), [yy + fields[0], xx + fields[1]],
                                     order=1, mode="constant", cval=0.0)
    return (warped >= 0.5).astype(np.uint8)


def dilate(mask, radius: int) -> np.ndarray:
    m = as_mask(mask)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=disc(radius)).astype(np.uint8)


def erode(mask, radius: int) -> np.ndarray:
    m = as_mask(mask)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_erosion(m, structure=disc(radius), border_value=0).astype(np.uint8)


def perturb_with_log(mask, cfg: PerturbConfig, seed: int) -> tuple[np.ndarray, list[str]]:
    """Like :func:`perturb` but also returns the names of the operations that fired."""
    m = as_mask(mask)
    rng = np.random.default_rng(seed)
    if rng.random() < cfg.all_black:
        return np.zeros_like(m), ["all_black"]
    fired = []
    for op in cfg.order:
        # draw both numbers unconditionally so one op's outcome never shifts another's stream
        u = rng.random()
        sub = int(rng.integers(2 ** 31))
        if u >= cfg.probability(op):
            continue
        fired.append(op)
        if op == "noise":
            m = add_background_noise(m, cfg, sub)
        elif op == "occlude":
            m = occlude_foreground(m, cfg, sub)
        elif op == "elastic":
            m = elastic_deform(m, cfg, sub)
        else:
            r = int(np.random.default_rng(sub).integers(cfg.morph_radius[0], cfg.morph_radius[1] + 1))
            m = dilate(m, r) if op == "dilate" else erode(m, r)
    return m, fired


def perturb(mask, cfg: PerturbConfig = PerturbConfig(), seed: int = 0) -> np.ndarray:
    return perturb_with_log(mask, cfg, seed)[0]


def build_adaptation_training_set(labeled: Sequence, replication: int = 1, cfg: PerturbConfig = PerturbConfig(),
                                  seed: int = 0) -> list[SyntheticSample]:
    """``replication`` corrupted copies of every labeled pair, stacked with the image."""
    if replication < 1:
        raise ConfigError("replication must be >= 1")
    if not labeled:
        raise ValidationError("cannot build a synthetic set from an empty labeled list")
    seeds = np.random.SeedSequence(seed).generate_state(replication * len(labeled))
    out = []
    k = 0
    for _ in range(replication):
        for item in labeled:
            sl, gt = (item.slice, item.mask) if isinstance(item, LabeledSample) else item
            gt = as_mask(gt, sl.shape)
            pseudo = perturb(gt, cfg, int(seeds[k]))
            k += 1
            x = np.stack([np.asarray(sl.image, dtype=np.float32), pseudo.astype(np.float32)])
            out.append(SyntheticSample(x, gt))
    return out


def error_mode(pseudo, gt) -> str:
    """Classify a corrupted mask relative to its ground truth."""
    p, g = as_mask(pseudo).astype(bool), as_mask(gt).astype(bool)
    if not p.any() and g.any():
        return "all_black"
    fp = bool((p & ~g).any())
    fn = bool((~p & g).any())
    if fp and fn:
        return "boundary_shift"
    if fp:
        return "over_segmentation"
    if fn:
        return "under_segmentation"
    return "unchanged"


def dump_triptychs(samples: Sequence[SyntheticSample], out_dir, limit: int | None = None) -> list[Path]:
    """Write image | perturbed | target panels as PNGs for visual audit."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples[:limit] if limit else samples):
        panel = np.concatenate([s.input[0], s.input[1], s.target.astype(np.float32)], axis=1)
        p = out_dir / f"triptych_{i:05d}.png"
        Image.fromarray((np.clip(panel, 0, 1) * 255).astype(np.uint8)).save(p)
        paths.append(p)
    return paths
