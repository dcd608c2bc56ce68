"""The three learnable components and their training routines.

* ``UNet``: dropout-bearing encoder/decoder used as the semi-supervised segmenter.
* ``PromptableSegmenter``: the same backbone fed an extra channel holding a
  Gaussian heatmap of the click prompt(s).
* ``Adapter``: the backbone on a 2-channel (image, pseudo-label) stack.

Every network maps ``H x W`` inputs to ``H x W`` foreground probabilities.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledSample, Slice, SyntheticSample, as_mask
from .errors import ConfigError, EmptyMaskError, ValidationError
from .losses import LossWeights, adaptation_loss

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
PROMPT_SIGMA = 4.0
THRESHOLD = 0.5


@dataclass(frozen=True)
class SegmenterConfig:
    depth: int = 4
    base_channels: int = 16
    dropout: float = 0.1
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError(f"invalid network config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


DESK_PRESET = SegmenterConfig(depth=4, base_channels=16, dropout=0.1)
CORPUS_PRESET = SegmenterConfig(depth=5, base_channels=32, dropout=0.1)


def _block(cin: int, cout: int) -> nn.Sequential:
    groups = math.gcd(cout, 8)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Plain U-Net with dropout on the bottleneck and every decoder block.

    Inputs are padded to a multiple of ``2 ** (depth - 1)`` and cropped back.
    ``forward`` returns sigmoid probabilities of shape ``(B, H, W)``.
    """

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for c in chans:
            self.down.append(_block(cin, c))
            cin = c
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(2 * c, c, 2, stride=2))
            self.dec.append(_block(2 * c, c))
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Conv2d(chans[0], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        m = 2 ** (self.cfg.depth - 1)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        x = self.drop(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = self.drop(dec(torch.cat([up(x), skip], dim=1)))
        return self.head(x)[:, 0, :h, :w]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def build_unet(cfg: SegmenterConfig, seed: int = 0) -> UNet:
    """Construct a U-Net with torch's fan-in uniform init drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def forward_twice(model: nn.Module, x: torch.Tensor, seeds: tuple[int, int] | None = None):
    """Two stochastic forward passes over the same batch (dropout active).

    With ``seeds`` each pass draws its dropout masks from its own seeded stream.
    """
    model.train()
    if seeds is None:
        return model(x), model(x)
    outs = []
    for s in seeds:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(s)
            outs.append(model(x))
    return outs[0], outs[1]


@torch.no_grad()
def predict_probs(model: nn.Module, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities for ``(N, H, W)`` or ``(N, C, H, W)`` inputs."""
    was_training = model.training
    model.eval()
    x = np.asarray(inputs, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    out = [model(torch.from_numpy(x[i:i + batch_size])).numpy() for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, *x.shape[-2:]), dtype=np.float32)


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _flip_batch(arrs: Sequence[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Apply one random flip/transpose draw to every array's last two axes."""
    k = int(rng.integers(8))
    out = []
    for a in arrs:
        if k & 1:
            a = a[..., ::-1, :]
        if k & 2:
            a = a[..., :, ::-1]
        if k & 4 and a.shape[-1] == a.shape[-2]:
            a = np.swapaxes(a, -1, -2)
        out.append(np.ascontiguousarray(a))
    return out


# ---------------------------------------------------------------------------
# prompts


class PointPrompt(NamedTuple):
    row: int
    col: int
    polarity: str = "positive"


def _pick_foreground(mask: np.ndarray, rng: np.random.Generator) -> PointPrompt:
    fg = np.flatnonzero(mask)
    if fg.size == 0:
        raise EmptyMaskError("mask has no foreground pixel to click")
    r, c = divmod(int(fg[rng.integers(fg.size)]), mask.shape[1])
    return PointPrompt(r, c)


def sample_random_click(mask, seed: int) -> PointPrompt:
    """Uniformly random foreground pixel of ``mask``."""
    return _pick_foreground(as_mask(mask), np.random.default_rng(seed))


def render_prompts(shape: tuple[int, int], prompts: Sequence[PointPrompt], sigma: float = PROMPT_SIGMA) -> np.ndarray:
    """Max-combined Gaussian heatmaps centred on each click."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    heat = np.zeros((h, w), dtype=np.float32)
    for p in prompts:
        if not (0 <= p.row < h and 0 <= p.col < w):
            raise ValidationError(f"prompt {p} outside image of shape {shape}")
        g = np.exp(-((yy - p.row) ** 2 + (xx - p.col) ** 2) / (2.0 * sigma ** 2))
        np.maximum(heat, g, out=heat)
    return heat


class PromptableSegmenter(nn.Module):
    """Point-promptable segmenter: backbone over (image, click heatmap)."""

    def __init__(self, cfg: SegmenterConfig, sigma: float = PROMPT_SIGMA):
        super().__init__()
        self.cfg = replace(cfg, in_channels=2)
        self.sigma = sigma
        self.net = UNet(self.cfg)

    def forward(self, images: torch.Tensor, heatmaps: torch.Tensor) -> torch.Tensor:
        return self.net(torch.stack([images, heatmaps], dim=1))

    @torch.no_grad()
    def predict(self, image, prompt: PointPrompt | Sequence[PointPrompt]) -> np.ndarray:
        img = image.image if isinstance(image, Slice) else np.asarray(image)
        prompts = [prompt] if isinstance(prompt, PointPrompt) else list(prompt)
        heat = render_prompts(img.shape, prompts, self.sigma)
        was_training = self.training
        self.eval()
        out = self(torch.from_numpy(img.astype(np.float32))[None], torch.from_numpy(heat)[None])
        self.train(was_training)
        return out[0].numpy()

    def fine_tune(self, samples, click_policy="mixed", **kwargs) -> "PromptableSegmenter":
        return fine_tune_promptable(self, samples, click_policy=click_policy, **kwargs)


def build_promptable(cfg: SegmenterConfig, seed: int = 0, sigma: float = PROMPT_SIGMA) -> PromptableSegmenter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PromptableSegmenter(cfg, sigma)


def iterative_click_sampling(model: PromptableSegmenter, image, gt, n_rounds: int, seed: int) -> list[PointPrompt]:
    """Clicks placed where the model still misses tumor.

    The first click is uniform over ``gt`` foreground. Each later click is
    uniform over the false-negative region of the prediction made from the
    clicks so far, or over ``gt`` foreground when nothing is missed.
    """
    if n_rounds < 1:
        raise ConfigError("n_rounds must be >= 1")
    gt = as_mask(gt)
    rng = np.random.default_rng(seed)
    clicks = [_pick_foreground(gt, rng)]
    for _ in range(n_rounds - 1):
        pred = binarize(model.predict(image, clicks))
        missed = gt & (1 - pred)
        clicks.append(_pick_foreground(missed if missed.any() else gt, rng))
    return clicks


class RandomClicks:
    """One uniform foreground click."""

    def __call__(self, model, image, gt, seed: int) -> list[PointPrompt]:
        return [sample_random_click(gt, seed)]


class IterativeClicks:
    def __init__(self, n_rounds: int = 3):
        self.n_rounds = n_rounds

    def __call__(self, model, image, gt, seed: int) -> list[PointPrompt]:
        return iterative_click_sampling(model, image, gt, self.n_rounds, seed)


class MixedClicks:
    """Random single click with probability ``p_random``, else 2..max_rounds iterative clicks."""

    def __init__(self, max_rounds: int = 3, p_random: float = 0.5):
        self.max_rounds = max_rounds
        self.p_random = p_random

    def __call__(self, model, image, gt, seed: int) -> list[PointPrompt]:
        rng = np.random.default_rng(seed)
        sub = int(rng.integers(2 ** 31))
        if self.max_rounds < 2 or rng.random() < self.p_random:
            return [sample_random_click(gt, sub)]
        return iterative_click_sampling(model, image, gt, int(rng.integers(2, self.max_rounds + 1)), sub)


def get_click_policy(name: str, rounds: int = 3):
    policies = {"random": RandomClicks, "iterative": lambda: IterativeClicks(rounds),
                "mixed": lambda: MixedClicks(rounds)}
    if name not in policies:
        raise ConfigError(f"unknown click policy {name!r}; choose from {sorted(policies)}")
    return policies[name]()


def _pairs(samples) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for s in samples:
        sl, m = (s.slice, s.mask) if isinstance(s, LabeledSample) else s
        out.append((np.asarray(sl.image, dtype=np.float32), as_mask(m, sl.shape)))
    return out


def fine_tune_promptable(model: PromptableSegmenter, train_set, iterations: int = 200, batch_size: int = 8,
                         click_policy="mixed", lr: float = 1e-3, seed: int = 0,
                         weights: LossWeights = LossWeights(), augment: bool = True) -> PromptableSegmenter:
    """Fine-tune on tumor-bearing labeled slices with dice + CE against the full mask."""
    pairs = _pairs(train_set)
    if not pairs:
        raise ValidationError("promptable fine-tuning needs at least one labeled slice")
    if any(not m.any() for _, m in pairs):
        raise ValidationError("promptable fine-tuning requires tumor-bearing slices only")
    policy = get_click_policy(click_policy) if isinstance(click_policy, str) else click_policy
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(iterations):
        idx = rng.integers(len(pairs), size=batch_size)
        imgs, heats, tgts = [], [], []
        for i in idx:
            img, gt = pairs[i]
            if augment:
                img, gt = _flip_batch([img, gt], rng)
            clicks = policy(model, img, gt, int(rng.integers(2 ** 31)))
            imgs.append(img)
            heats.append(render_prompts(img.shape, clicks, model.sigma))
            tgts.append(gt)
        pred = model(torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(heats)))
        loss = adaptation_loss(pred, torch.from_numpy(np.stack(tgts).astype(np.float32)), weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# adaptation network


class Adapter(nn.Module):
    """Refinement network over a (image, pseudo-label) channel stack."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = replace(cfg, in_channels=2)
        self.net = UNet(self.cfg)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        return self.net(stack)


def build_adapter(cfg: SegmenterConfig, seed: int = 0) -> Adapter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Adapter(cfg)


def adapter_input(image: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    pseudo = as_mask(pseudo)
    if image.shape != pseudo.shape:
        raise ValidationError(f"image shape {image.shape} != pseudo-label shape {pseudo.shape}")
    return np.stack([image, pseudo.astype(np.float32)])


def refine(adapter: Adapter, image, pseudo) -> np.ndarray:
    """Adapter probabilities for one slice and its pseudo-label."""
    img = image.image if isinstance(image, Slice) else image
    return predict_probs(adapter, adapter_input(img, pseudo)[None])[0]


def train_adapter(adapter: Adapter, samples: Sequence[SyntheticSample], iterations: int = 200,
                  batch_size: int = 8, lr: float = 1e-3, seed: int = 0,
                  weights: LossWeights = LossWeights(), augment: bool = True) -> Adapter:
    if not samples:
        raise ValidationError("adapter training set is empty")
    inputs = np.stack([s.input for s in samples]).astype(np.float32)
    targets = np.stack([s.target for s in samples]).astype(np.float32)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    adapter.train()
    for _ in range(iterations):
        idx = rng.integers(len(samples), size=batch_size)
        x, y = inputs[idx], targets[idx]
        if augment:
            x, y = _flip_batch([x, y], rng)
        loss = adaptation_loss(adapter(torch.from_numpy(x)), torch.from_numpy(y), weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
    adapter.eval()
    return adapter


# ---------------------------------------------------------------------------
# checkpoints

_BUILDERS = {
    "segmenter": lambda cfg, extra: UNet(cfg),
    "promptable": lambda cfg, extra: PromptableSegmenter(cfg, extra.get("sigma", PROMPT_SIGMA)),
    "adapter": lambda cfg, extra: Adapter(cfg),
}

_ROLE_CHANNELS = {"segmenter": 1, "promptable": 2, "adapter": 2}


def role_of(model: nn.Module) -> str:
    if isinstance(model, PromptableSegmenter):
        return "promptable"
    if isinstance(model, Adapter):
        return "adapter"
    if isinstance(model, UNet):
        return "segmenter"
    raise TypeError(f"unsupported model type {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, seed: int | None = None, preset: str | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})
    if isinstance(model, PromptableSegmenter):
        extra.setdefault("sigma", model.sigma)
    torch.save({
        "schema_version": CHECKPOINT_SCHEMA,
        "role": role_of(model),
        "config": asdict(model.cfg),
        "preset": preset,
        "seed": seed,
        "extra": extra,
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path, expected_in_channels: int | None = None, role: str | None = None):
    """Load a checkpoint, returning ``(model, metadata)`` with the model in eval mode."""
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValidationError(f"{path}: unsupported checkpoint schema {ckpt.get('schema_version')}")
    if role is not None and ckpt["role"] != role:
        raise ValidationError(f"{path}: expected a {role} checkpoint, found {ckpt['role']}")
    cfg = SegmenterConfig(**ckpt["config"])
    if cfg.in_channels != _ROLE_CHANNELS[ckpt["role"]]:
        raise ValidationError(f"{path}: {ckpt['role']} with {cfg.in_channels} input channels")
    if expected_in_channels is not None and cfg.in_channels != expected_in_channels:
        raise ValidationError(
            f"{path}: checkpoint expects {cfg.in_channels} input channels, corpus provides {expected_in_channels}")
    model = _BUILDERS[ckpt["role"]](cfg, ckpt.get("extra", {}))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    meta = {k: v for k, v in ckpt.items() if k != "state_dict"}
    return model, meta


def warn_if_degenerate(cfg: SegmenterConfig, alpha: float) -> None:
    if alpha > 0 and cfg.dropout == 0:
        warnings.warn("dropout is 0: the R-Drop KL term is identically zero", RuntimeWarning, stacklevel=2)
