"""The three-stage pseudo-labelling loop.

One outer iteration:

1. train the segmenter on labeled + unlabeled data (R-Drop consistency),
2. predict every unlabeled slice (stage-1 proposal),
3. prompt the promptable segmenter with one random click inside the proposal,
4. refine that prediction with the adaptation network,
5. accept slices whose stage-1 and refined masks agree (DSC >= beta) and move
   them, labelled with the refined mask, into the labeled set.
"""

from __future__ import annotations

import copy
import json
import logging
import shutil
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .data import DatasetState, LabeledSample, Origin, PseudoLabel, Slice, Stage, stack_images
from .errors import ConfigError, ConsistencyError
from .losses import LossWeights, poly_lr, ramp_weight, rdrop_supervised_loss, symmetric_kl, total_ssl_loss
from .metrics import MetricReport, confusion_metrics, format_table
from .models import (
    PointPrompt,
    PromptableSegmenter,
    SegmenterConfig,
    UNet,
    _flip_batch,
    binarize,
    build_adapter,
    build_promptable,
    build_unet,
    fine_tune_promptable,
    forward_twice,
    load_checkpoint,
    predict_probs,
    refine,
    sample_random_click,
    save_checkpoint,
    train_adapter,
    warn_if_degenerate,
)
from .perturb import PerturbConfig, build_adaptation_training_set

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    beta: float = 0.9
    max_iterations: int = 4
    patience: int = 1
    ssl_iterations: int = 600
    ssl_batch_size: int = 16
    lr: float = 0.01
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.1
    eval_interval: int = 100
    augment: bool = True
    ms_iterations: int = 200
    ms_batch_size: int = 8
    ms_lr: float = 1e-3
    ms_train_fraction: float = 0.8
    click_policy: str = "mixed"
    click_rounds: int = 3
    prompt_sigma: float = 4.0
    an_iterations: int = 200
    an_batch_size: int = 8
    an_lr: float = 1e-3
    an_replication: int = 4
    # adapter also sees tumor-free labeled slices, so an empty input can stay empty
    an_include_tumor_free: bool = True
    accept_empty_agreement: bool = True
    refresh_models: bool = False
    infer_batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        # beta above 1 is allowed: it disables acceptance entirely
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        for name in ("max_iterations", "ssl_iterations", "ssl_batch_size", "eval_interval", "ms_iterations",
                     "ms_batch_size", "an_iterations", "an_batch_size", "an_replication", "click_rounds",
                     "infer_batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.ms_train_fraction <= 1:
            raise ConfigError("ms_train_fraction must be in (0, 1]")
        if self.lr <= 0 or self.ms_lr <= 0 or self.an_lr <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass(frozen=True)
class Settings:
    """Everything a run needs besides data."""

    model: SegmenterConfig = SegmenterConfig()
    loss: LossWeights = LossWeights()
    perturb: PerturbConfig = PerturbConfig()
    pipeline: PipelineConfig = PipelineConfig()


class TrainResult(NamedTuple):
    model: UNet
    val_dsc: float
    steps: int
    best_step: int


class PromptResult(NamedTuple):
    mask: np.ndarray
    prompt: PointPrompt | None
    skipped: bool


@dataclass
class SelectionRecord:
    slice_id: str
    iteration: int
    ss_mask: np.ndarray = field(repr=False)
    ms_mask: np.ndarray = field(repr=False)
    an_mask: np.ndarray = field(repr=False)
    agreement_dsc: float
    accepted: bool = False
    prompt: PointPrompt | None = None
    ms_skipped: bool = False

    def to_json(self, mask_ref: str) -> dict:
        return {
            "slice_id": self.slice_id,
            "iteration": self.iteration,
            "agreement_dsc": self.agreement_dsc,
            "accepted": self.accepted,
            "prompt": None if self.prompt is None else [self.prompt.row, self.prompt.col],
            "ms_skipped": self.ms_skipped,
            "masks": mask_ref,
        }


@dataclass
class IterationSummary:
    iteration: int
    val_dsc: float
    test: MetricReport
    n_labeled: int
    n_unlabeled: int
    n_accepted: int = 0
    n_rejected: int = 0
    stop_reason: str | None = None

    def row(self) -> dict:
        return {"iteration": self.iteration, "val_dsc": self.val_dsc, "test_dsc": self.test.mean("DSC"),
                "n_labeled": self.n_labeled, "n_unlabeled": self.n_unlabeled, "n_accepted": self.n_accepted,
                "n_rejected": self.n_rejected, "stop_reason": self.stop_reason}


@dataclass
class RunResult:
    segmenter: UNet
    history: list[IterationSummary]
    records: list[SelectionRecord]
    best_iteration: int
    state: DatasetState

    @property
    def reports(self) -> list[MetricReport]:
        return [h.test for h in self.history]


def iteration_seed(base: int, iteration: int, stage: int) -> int:
    return base * 1_000_003 + iteration * 1000 + stage


# ---------------------------------------------------------------------------
# stage 1


def evaluate_segmenter(model: UNet, samples: Sequence[LabeledSample], batch_size: int = 32) -> MetricReport:
    probs = predict_probs(model, stack_images(s.slice for s in samples), batch_size)
    return MetricReport.from_masks([s.id for s in samples], binarize(probs), [s.mask for s in samples])


def stage1_train(state: DatasetState, settings: Settings, seed: int = 0) -> TrainResult:
    """R-Drop semi-supervised training with a polynomial learning-rate decay.

    Half of each batch is labeled (two-pass CE + alpha * KL), half unlabeled
    (two-pass KL weighted by a linearly warmed-up lambda). The weights with the
    best validation DSC, checked every ``eval_interval`` steps, are returned.
    """
    cfg, w = settings.pipeline, settings.loss
    if not state.labeled:
        raise ConfigError("stage-1 training needs a non-empty labeled set")
    warn_if_degenerate(settings.model, w.alpha)
    x_lab = stack_images(s.slice for s in state.labeled)
    y_lab = np.stack([s.mask for s in state.labeled]).astype(np.float32)
    x_unl = stack_images(state.unlabeled) if state.unlabeled else None
    n_lab_batch = max(1, cfg.ssl_batch_size // 2) if x_unl is not None else cfg.ssl_batch_size
    n_unl_batch = cfg.ssl_batch_size - n_lab_batch if x_unl is not None else 0

    model = build_unet(settings.model, seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    val = state.validation or state.labeled
    best_dsc, best_state, best_step = -1.0, None, 0
    total = cfg.ssl_iterations
    for step in range(total):
        for group in opt.param_groups:
            group["lr"] = poly_lr(cfg.lr, step, total, cfg.lr_power)
        idx = rng.integers(len(x_lab), size=n_lab_batch)
        x, y = x_lab[idx], y_lab[idx]
        if n_unl_batch:
            x = np.concatenate([x, x_unl[rng.integers(len(x_unl), size=n_unl_batch)]])
        if cfg.augment:
            x, y = _flip_batch([x, y], rng)
        p1, p2 = forward_twice(model, torch.from_numpy(x)[:, None])
        target = torch.from_numpy(y)
        sup = rdrop_supervised_loss(p1[:n_lab_batch], p2[:n_lab_batch], target, w)
        unsup = symmetric_kl(p1[n_lab_batch:], p2[n_lab_batch:]) if n_unl_batch else torch.zeros(())
        ramped = replace(w, lambda_u=w.lambda_u * ramp_weight(step, total, cfg.warmup_fraction))
        loss = total_ssl_loss(sup, unsup, ramped)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == total:
            dsc = evaluate_segmenter(model, val, cfg.infer_batch_size).mean("DSC")
            log.debug("stage1 step %d loss %.4f val DSC %.4f", step + 1, loss.item(), dsc)
            if dsc > best_dsc:
                best_dsc, best_state, best_step = dsc, copy.deepcopy(model.state_dict()), step + 1
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_dsc, total, best_step)


def stage1_infer(model: UNet, unlabeled: Sequence[Slice], batch_size: int = 32) -> list[tuple[str, np.ndarray]]:
    if not unlabeled:
        return []
    probs = predict_probs(model, stack_images(unlabeled), batch_size)
    return [(s.id, m) for s, m in zip(unlabeled, binarize(probs))]


# ---------------------------------------------------------------------------
# stages 2 and 3


def train_refiners(state: DatasetState, settings: Settings, seed: int) -> tuple[PromptableSegmenter, object]:
    """Fine-tune the promptable segmenter and train the adapter.

    Both use a ``ms_train_fraction`` subset of the tumor-bearing labeled slices;
    the adapter additionally gets the tumor-free labeled slices when
    ``an_include_tumor_free`` is set.
    """
    cfg = settings.pipeline
    tumor = [s for s in state.labeled if s.mask.any()]
    if not tumor:
        raise ConfigError("no tumor-bearing labeled slices to train the promptable segmenter on")
    rng = np.random.default_rng(seed)
    n_train = max(1, int(np.floor(cfg.ms_train_fraction * len(tumor))))
    d_sam = [tumor[i] for i in sorted(rng.permutation(len(tumor))[:n_train])]

    ms = build_promptable(settings.model, seed + 1, cfg.prompt_sigma)
    fine_tune_promptable(ms, d_sam, cfg.ms_iterations, cfg.ms_batch_size, cfg.click_policy, cfg.ms_lr, seed + 2,
                         settings.loss, cfg.augment)
    an_set = d_sam + ([s for s in state.labeled if not s.mask.any()] if cfg.an_include_tumor_free else [])
    syn = build_adaptation_training_set(an_set, cfg.an_replication, settings.perturb, seed + 3)
    an = build_adapter(settings.model, seed + 4)
    train_adapter(an, syn, cfg.an_iterations, cfg.an_batch_size, cfg.an_lr, seed + 5, settings.loss, cfg.augment)
    return ms, an


def stage2_prompt_predict(ms: PromptableSegmenter, slice_: Slice, ss_mask: np.ndarray, seed: int) -> PromptResult:
    """Prompt with one random click inside ``ss_mask``; skip (empty output) when it is empty."""
    if not np.any(ss_mask):
        return PromptResult(np.zeros(slice_.shape, dtype=np.uint8), None, True)
    prompt = sample_random_click(ss_mask, seed)
    return PromptResult(binarize(ms.predict(slice_, prompt)), prompt, False)


def stage3_refine(an, slice_: Slice, ms_mask: np.ndarray, iteration: int = 0) -> PseudoLabel:
    return PseudoLabel(slice_.id, binarize(refine(an, slice_, ms_mask)), Stage.AN, iteration)


def build_records(ss_model: UNet, ms, an, slices: Sequence[Slice], iteration: int, seed: int,
                  use_ms: bool = True, use_an: bool = True, batch_size: int = 32) -> list[SelectionRecord]:
    """Run stages 1-3 on ``slices`` and score SS-vs-refined agreement.

    With ``use_ms``/``use_an`` disabled the corresponding stage passes its input
    mask through unchanged.
    """
    records = []
    seeds = np.random.SeedSequence(seed).generate_state(max(1, len(slices)))
    for k, (s, (sid, ss)) in enumerate(zip(slices, stage1_infer(ss_model, slices, batch_size))):
        pr = stage2_prompt_predict(ms, s, ss, int(seeds[k])) if use_ms else PromptResult(ss, None, True)
        an_mask = stage3_refine(an, s, pr.mask, iteration).mask if use_an else pr.mask
        dsc = confusion_metrics(ss, an_mask).dsc
        records.append(SelectionRecord(sid, iteration, ss, pr.mask, an_mask, dsc, False, pr.prompt, pr.skipped))
    return records


def select_reliable(records: Sequence[SelectionRecord], beta: float, accept_empty_agreement: bool = True):
    """Split records by SS/AN agreement; sets ``record.accepted`` in place."""
    accepted, rejected = [], []
    for r in records:
        both_empty = not r.ss_mask.any() and not r.an_mask.any()
        ok = r.agreement_dsc >= beta and (accept_empty_agreement or not both_empty)
        r.accepted = bool(ok)
        (accepted if ok else rejected).append(r)
    return accepted, rejected


def expand_labeled_set(state: DatasetState, accepted: Sequence[SelectionRecord]) -> DatasetState:
    """Move accepted slices from unlabeled to labeled with their refined masks."""
    unl = {s.id: s for s in state.unlabeled}
    moved = []
    for r in accepted:
        if r.slice_id not in unl:
            raise ConsistencyError(f"slice {r.slice_id} is not in the unlabeled set")
        pl = PseudoLabel(r.slice_id, r.an_mask, Stage.AN, r.iteration, r.agreement_dsc)
        moved.append(LabeledSample(unl.pop(r.slice_id), r.an_mask, Origin.PSEUDO, pl))
    new = DatasetState(
        labeled=[*state.labeled, *moved],
        unlabeled=[s for s in state.unlabeled if s.id in unl],
        validation=state.validation,
        test=state.test,
        iteration=state.iteration,
    )
    new.check()
    return new


# ---------------------------------------------------------------------------
# persistence


def _write_records(it_dir: Path, records: Sequence[SelectionRecord]) -> None:
    pl = it_dir / "pseudolabels"
    pl.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        ref = f"pseudolabels/{r.slice_id}.npz"
        np.savez_compressed(it_dir / ref, ss=r.ss_mask, ms=r.ms_mask, an=r.an_mask)
        lines.append(json.dumps(r.to_json(ref), sort_keys=True))
    (it_dir / "selection_records.jsonl").write_text("".join(line + "\n" for line in lines))


def read_records(it_dir) -> list[SelectionRecord]:
    it_dir = Path(it_dir)
    path = it_dir / "selection_records.jsonl"
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        z = np.load(it_dir / d["masks"])
        prompt = PointPrompt(*d["prompt"]) if d["prompt"] is not None else None
        out.append(SelectionRecord(d["slice_id"], d["iteration"], z["ss"], z["ms"], z["an"], d["agreement_dsc"],
                                   d["accepted"], prompt, d["ms_skipped"]))
    return out


def _write_state(it_dir: Path, state: DatasetState, run_dir: Path) -> None:
    labeled = []
    for s in state.labeled:
        entry = {"id": s.id, "origin": s.origin.value}
        if s.origin is Origin.PSEUDO:
            entry["mask"] = f"iter_{s.pseudo.iteration}/pseudolabels/{s.id}.npz"
            entry["agreement_dsc"] = s.pseudo.agreement_dsc
            entry["iteration"] = s.pseudo.iteration
        labeled.append(entry)
    doc = {"iteration": state.iteration, "labeled": labeled, "unlabeled": state.ids("unlabeled"),
           "validation": state.ids("validation"), "test": state.ids("test")}
    (it_dir / "state.json").write_text(json.dumps(doc, indent=1))


def _restore_state(initial: DatasetState, doc: dict, run_dir: Path) -> DatasetState:
    unl = {s.id: s for s in initial.unlabeled}
    orig = {s.id: s for s in initial.labeled}
    labeled = []
    for e in doc["labeled"]:
        if e["origin"] == Origin.ORIGINAL.value:
            labeled.append(orig[e["id"]])
            continue
        mask = np.load(run_dir / e["mask"])["an"]
        pl = PseudoLabel(e["id"], mask, Stage.AN, e["iteration"], e["agreement_dsc"])
        labeled.append(LabeledSample(unl[e["id"]], mask, Origin.PSEUDO, pl))
    state = DatasetState(labeled, [unl[i] for i in doc["unlabeled"]], initial.validation, initial.test,
                         doc["iteration"])
    state.check()
    return state


def _write_table(run_dir: Path, history: Sequence[IterationSummary], best: int) -> str:
    rows = [(f"iter {h.iteration}" + (" (best)" if h.iteration == best else ""), h.test) for h in history]
    table = format_table(rows)
    (run_dir / "table.txt").write_text(table)
    return table


# ---------------------------------------------------------------------------
# outer loop


def run(state: DatasetState, settings: Settings, run_dir=None, resume: bool = False,
        on_iteration: Callable[[IterationSummary], None] | None = None) -> RunResult:
    """Iterate train -> pseudo-label -> select -> expand.

    Stops after ``max_iterations`` rounds, after a round that accepts nothing,
    or when validation DSC fails to improve for ``patience`` rounds. The last
    round only trains and evaluates. Returns the segmenter with the best
    validation DSC. With ``run_dir`` every completed round is persisted and
    ``resume=True`` continues after the last completed one.
    """
    cfg = settings.pipeline
    run_dir = Path(run_dir) if run_dir is not None else None
    initial = state
    history: list[IterationSummary] = []
    records: list[SelectionRecord] = []
    best_it, best_val, best_model = -1, -np.inf, None
    ms = an = None
    start = 0
    stale = 0

    if run_dir is not None and resume:
        done = sorted(int(p.parent.name.split("_")[1]) for p in run_dir.glob("iter_*/COMPLETE"))
        for k in done:
            it_dir = run_dir / f"iter_{k}"
            m = json.loads((it_dir / "metrics.json").read_text())
            h = IterationSummary(k, m["val_dsc"], MetricReport.from_dict(m["test"]), m["n_labeled"],
                                 m["n_unlabeled"], m["n_accepted"], m["n_rejected"], m["stop_reason"])
            history.append(h)
            records.extend(read_records(it_dir))
            if h.val_dsc > best_val:
                best_it, best_val, stale = k, h.val_dsc, 0
            else:
                stale += 1
            if (it_dir / "checkpoints" / "ms.pt").exists():
                ms = load_checkpoint(it_dir / "checkpoints" / "ms.pt", role="promptable")[0]
                an = load_checkpoint(it_dir / "checkpoints" / "an.pt", role="adapter")[0]
        if done:
            state = _restore_state(initial, json.loads((run_dir / f"iter_{done[-1]}" / "state.json").read_text()),
                                   run_dir)
            best_model = load_checkpoint(run_dir / f"iter_{best_it}" / "checkpoints" / "segmenter.pt",
                                         role="segmenter")[0]
            start = done[-1] + 1
            if history[-1].stop_reason is not None:
                start = cfg.max_iterations
            log.info("resuming after iteration %d", done[-1])

    for k in range(start, cfg.max_iterations):
        it_dir = run_dir / f"iter_{k}" if run_dir is not None else None
        if it_dir is not None and it_dir.exists():
            shutil.rmtree(it_dir)
        try:
            trained = stage1_train(state, settings, iteration_seed(cfg.seed, k, 1))
            test = evaluate_segmenter(trained.model, state.test, cfg.infer_batch_size)
            summary = IterationSummary(k, trained.val_dsc, test, len(state.labeled), len(state.unlabeled))
            if trained.val_dsc > best_val:
                best_it, best_val, best_model, stale = k, trained.val_dsc, trained.model, 0
            else:
                stale += 1
            log.info("iteration %d: val DSC %.4f test DSC %.4f", k, trained.val_dsc, test.mean("DSC"))

            new_records: list[SelectionRecord] = []
            fresh_refiners = False
            if stale >= cfg.patience:
                summary.stop_reason = "no_improvement"
            elif k == cfg.max_iterations - 1:
                summary.stop_reason = "max_iterations"
            elif not state.unlabeled:
                summary.stop_reason = "unlabeled_exhausted"
            else:
                if ms is None or cfg.refresh_models:
                    ms, an = train_refiners(state, settings, iteration_seed(cfg.seed, k, 2))
                    fresh_refiners = True
                new_records = build_records(trained.model, ms, an, state.unlabeled, k,
                                            iteration_seed(cfg.seed, k, 3), batch_size=cfg.infer_batch_size)
                accepted, rejected = select_reliable(new_records, cfg.beta, cfg.accept_empty_agreement)
                summary.n_accepted, summary.n_rejected = len(accepted), len(rejected)
                state = expand_labeled_set(state, accepted)
                state.iteration = k + 1
                if not accepted:
                    summary.stop_reason = "no_acceptance"
            records.extend(new_records)
            history.append(summary)

            if it_dir is not None:
                ckpt = it_dir / "checkpoints"
                save_checkpoint(ckpt / "segmenter.pt", trained.model, iteration_seed(cfg.seed, k, 1))
                if fresh_refiners:
                    save_checkpoint(ckpt / "ms.pt", ms, iteration_seed(cfg.seed, k, 2))
                    save_checkpoint(ckpt / "an.pt", an, iteration_seed(cfg.seed, k, 2))
                _write_records(it_dir, new_records)
                metrics = {"iteration": k, "val_dsc": trained.val_dsc, "best_step": trained.best_step,
                           "steps": trained.steps, "n_labeled": summary.n_labeled,
                           "n_unlabeled": summary.n_unlabeled, "n_accepted": summary.n_accepted,
                           "n_rejected": summary.n_rejected, "stop_reason": summary.stop_reason,
                           "test": test.to_dict()}
                (it_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
                _write_state(it_dir, state, run_dir)
                (it_dir / "COMPLETE").write_text("")
        except Exception:
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "error.json").write_text(json.dumps(
                    {"iteration": k, "traceback": traceback.format_exc()}, indent=1))
            raise
        if on_iteration is not None:
            on_iteration(summary)
        if summary.stop_reason is not None:
            break

    if best_model is None:
        raise ConsistencyError("run finished without training a segmenter")
    if run_dir is not None:
        save_checkpoint(run_dir / "best.pt", best_model, extra={"iteration": best_it})
        _write_table(run_dir, history, best_it)
    return RunResult(best_model, history, records, best_it, state)
