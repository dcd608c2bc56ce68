"""Command-line entry point: ``aslseg {preprocess,synth,run,evaluate,report}``.

Every command exits 0 on success. Failures print one JSON object
(``{"error": ..., "message": ...}``) on stderr and exit 2 for invalid input or
configuration, 1 for anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .config import Config, load_config
from .corpus import find_nifti_pairs, load_nifti, read_corpus, state_from_corpus, write_corpus
from .data import Slice, clip_and_normalize, filter_small_tumors, generate_synthetic_corpus, split_ids, \
    volume_to_slices
from .errors import ASLSegError, ConfigError, ValidationError
from .metrics import MetricReport, format_table
from .models import load_checkpoint
from .pipeline import IterationSummary, build_records, run

log = logging.getLogger("aslseg")

SPLITS = ("labeled", "unlabeled", "validation", "test")


def _prepare_output(out_dir: Path, force: bool) -> None:
    if (out_dir / "manifest.json").exists():
        if not force:
            raise ValidationError(f"{out_dir} already holds a corpus; pass --force to overwrite")
        for sub in ("images", "masks"):
            shutil.rmtree(out_dir / sub, ignore_errors=True)
        (out_dir / "manifest.json").unlink()
    out_dir.mkdir(parents=True, exist_ok=True)


def _partition(samples, cfg: Config, seed: int | None) -> dict[str, str]:
    d = cfg.data
    split = split_ids([s.id for s, _ in samples], [s.has_tumor for s, _ in samples], d.test_fraction,
                      d.val_fraction, d.labeled_fraction, d.partition_seed if seed is None else seed)
    return {sid: name for name, ids in split.items() for sid in ids}


def cmd_preprocess(input_dir, output_dir, cfg: Config, force: bool = False, seed: int | None = None) -> dict:
    """Window, normalize, slice, lesion-filter and partition a NIfTI corpus."""
    out_dir = Path(output_dir)
    pairs = find_nifti_pairs(input_dir)
    _prepare_output(out_dir, force)
    d = cfg.data
    samples, failures = [], []
    for stem, img_path, lab_path in pairs:
        try:
            vol = clip_and_normalize(load_nifti(img_path), d.window_lo, d.window_hi)
            labels = load_nifti(lab_path)
            tumor = (np.asarray(labels) >= d.tumor_label).astype(np.uint8)
            for sl, m in volume_to_slices(vol.astype(np.float32), tumor, stem):
                m = filter_small_tumors(m, d.min_tumor_pixels)
                samples.append((Slice(sl.id, sl.image, bool(m.any())), m))
        except Exception as exc:  # noqa: BLE001 - reported per file
            failures.append({"file": str(img_path), "error": type(exc).__name__, "message": str(exc)})
    if failures:
        (out_dir / "errors.json").write_text(json.dumps(failures, indent=1))
        raise ValidationError(f"{len(failures)} volume(s) failed preprocessing; see {out_dir / 'errors.json'}")
    partition = _partition(samples, cfg, seed)
    meta = {"source": str(input_dir), "volumes": len(pairs), "config": cfg.to_dict()["data"]}
    return write_corpus(out_dir, samples, partition, meta)


def cmd_synth(n: int, size: int, seed: int, output_dir, cfg: Config, force: bool = False) -> dict:
    out_dir = Path(output_dir)
    _prepare_output(out_dir, force)
    samples = generate_synthetic_corpus(n, size, size, seed, cfg.data.tumor_free_fraction)
    partition = _partition(samples, cfg, seed)
    meta = {"source": "synthetic", "n": n, "size": size, "seed": seed}
    return write_corpus(out_dir, samples, partition, meta)


def corpus_checksum(corpus_dir) -> str:
    h = hashlib.sha256()
    root = Path(corpus_dir)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def cmd_run(corpus_dir, cfg: Config, run_name: str, runs_root="runs", resume: bool = False,
            force: bool = False, echo=print) -> Path:
    samples, manifest = read_corpus(corpus_dir)
    state = state_from_corpus(samples, manifest)
    run_dir = Path(runs_root) / run_name
    if run_dir.exists() and any(run_dir.glob("iter_*")) and not (resume or force):
        raise ValidationError(f"{run_dir} already exists; pass --resume or --force")
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        lock = FileLock(str(run_dir / ".lock"), timeout=0)
        lock.acquire()
    except Timeout:
        raise ValidationError(f"{run_dir} is locked by another process") from None
    try:
        if force and not resume:
            for p in run_dir.glob("iter_*"):
                shutil.rmtree(p)
        (run_dir / "config.yaml").write_text(cfg.to_yaml())
        started = datetime.now(timezone.utc).isoformat()
        rows = []

        def on_iteration(h: IterationSummary):
            rows.append(h.row())
            echo(f"iteration {h.iteration}: labeled={h.n_labeled} unlabeled={h.n_unlabeled} "
                 f"accepted={h.n_accepted} val DSC={h.val_dsc:.4f}")
            echo(format_table([(f"iter {h.iteration}", h.test)]))

        result = run(state, cfg.settings, run_dir, resume=resume, on_iteration=on_iteration)
        manifest_doc = {
            "run_name": run_name,
            "code_version": __version__,
            "corpus": str(corpus_dir),
            "corpus_manifest_counts": manifest.get("counts"),
            "seeds": {"pipeline": cfg.pipeline.seed, "partition": cfg.data.partition_seed},
            "config": cfg.to_dict(),
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "best_iteration": result.best_iteration,
            "iterations": [h.row() for h in result.history],
        }
        (run_dir / "run.json").write_text(json.dumps(manifest_doc, indent=1))
        echo((run_dir / "table.txt").read_text())
    finally:
        lock.release()
    return run_dir


def _latest_refiners(run_dir: Path):
    found = sorted(run_dir.glob("iter_*/checkpoints/ms.pt"), key=lambda p: int(p.parts[-3].split("_")[1]))
    if not found:
        return None, None
    ck = found[-1].parent
    return load_checkpoint(ck / "ms.pt", role="promptable")[0], load_checkpoint(ck / "an.pt", role="adapter")[0]


def cmd_evaluate(checkpoint, corpus_dir, split: str = "test", use_ms: bool = True, use_an: bool = True,
                 seed: int = 0, ms_checkpoint=None, an_checkpoint=None, dump_dir=None) -> MetricReport:
    """Evaluate SS, SS+MS, SS+AN or SS+MS+AN predictions against a split's ground truth.

    ``checkpoint`` is either a run directory (its ``best.pt`` plus the latest
    refiner checkpoints) or a segmenter ``.pt`` file.
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}; choose from {SPLITS}")
    samples, manifest = read_corpus(corpus_dir)
    part = {e["id"]: e["partition"] for e in manifest["slices"]}
    chosen = [(s, m) for s, m in samples if part.get(s.id) == split]
    if not chosen:
        raise ValidationError(f"split {split!r} is empty")
    ckpt = Path(checkpoint)
    ms = an = None
    if ckpt.is_dir():
        ss = load_checkpoint(ckpt / "best.pt", expected_in_channels=1, role="segmenter")[0]
        ms, an = _latest_refiners(ckpt)
    else:
        ss = load_checkpoint(ckpt, expected_in_channels=1, role="segmenter")[0]
    if ms_checkpoint:
        ms = load_checkpoint(ms_checkpoint, role="promptable")[0]
    if an_checkpoint:
        an = load_checkpoint(an_checkpoint, role="adapter")[0]
    if (use_ms and ms is None) or (use_an and an is None):
        raise ValidationError("refiner checkpoints not found; pass --no-ms/--no-an or explicit checkpoints")
    slices = [s for s, _ in chosen]
    records = build_records(ss, ms, an, slices, 0, seed, use_ms=use_ms, use_an=use_an)
    preds = [r.an_mask for r in records]
    if dump_dir is not None:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        for r, (s, g) in zip(records, chosen):
            np.savez_compressed(dump / f"{s.id}.npz", pred=r.an_mask, gt=g)
    return MetricReport.from_masks([s.id for s in slices], preds, [m for _, m in chosen])


def cmd_report(run_dir, out_dir=None) -> str:
    """Per-iteration table plus DSC and labeled-set growth plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = [json.loads(p.read_text()) for p in
               sorted(run_dir.glob("iter_*/metrics.json"), key=lambda p: int(p.parent.name.split("_")[1]))]
    if not metrics:
        raise ValidationError(f"no completed iterations in {run_dir}")
    table = format_table([(f"iter {m['iteration']}", MetricReport.from_dict(m["test"])) for m in metrics])
    (out_dir / "table.txt").write_text(table)
    its = [m["iteration"] for m in metrics]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, [m["val_dsc"] for m in metrics], "o-", label="validation")
    ax.plot(its, [m["test"]["summary"]["DSC"]["mean"] for m in metrics], "s-", label="test")
    ax.set_xlabel("iteration")
    ax.set_ylabel("DSC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "dsc_curve.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, [m["n_labeled"] for m in metrics], "o-", label="labeled")
    ax.plot(its, [m["n_unlabeled"] for m in metrics], "s-", label="unlabeled")
    ax.set_xlabel("iteration")
    ax.set_ylabel("slices")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "labeled_growth.png", dpi=120)
    plt.close(fig)
    return table


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aslseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML config file or preset name (desk, corpus)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("preprocess", help="NIfTI volumes -> slice corpus")
    sp.add_argument("input_dir")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    common(sp)

    sp = sub.add_parser("synth", help="generate a synthetic slice corpus")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    common(sp)

    sp = sub.add_parser("run", help="run the pseudo-labelling pipeline")
    sp.add_argument("corpus_dir")
    sp.add_argument("--name", default="default")
    sp.add_argument("--out", default="runs", help="root directory for runs")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--force", action="store_true")
    common(sp)

    sp = sub.add_parser("evaluate", help="metrics of a checkpoint on a corpus split")
    sp.add_argument("checkpoint", help="run directory or segmenter checkpoint")
    sp.add_argument("corpus_dir")
    sp.add_argument("--split", default="test")
    sp.add_argument("--no-ms", action="store_true")
    sp.add_argument("--no-an", action="store_true")
    sp.add_argument("--ms-checkpoint")
    sp.add_argument("--an-checkpoint")
    sp.add_argument("--dump-masks")
    sp.add_argument("--out", help="write the JSON report here")
    common(sp, config=False)

    sp = sub.add_parser("report", help="tables and plots for a finished run")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    return p


def _error(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(getattr(args, "config", None))
        if args.command == "preprocess":
            m = cmd_preprocess(args.input_dir, args.out, cfg, args.force, args.seed)
            print(json.dumps(m["counts"]))
        elif args.command == "synth":
            n = args.n if args.n is not None else cfg.data.synth_count
            size = args.size if args.size is not None else cfg.data.synth_size
            seed = args.seed if args.seed is not None else cfg.data.partition_seed
            m = cmd_synth(n, size, seed, args.out, cfg, args.force)
            print(json.dumps(m["counts"]))
        elif args.command == "run":
            if args.seed is not None:
                cfg = replace(cfg, pipeline=replace(cfg.pipeline, seed=args.seed))
            run_dir = cmd_run(args.corpus_dir, cfg, args.name, args.out, args.resume, args.force)
            print(str(run_dir))
        elif args.command == "evaluate":
            rep = cmd_evaluate(args.checkpoint, args.corpus_dir, args.split, not args.no_ms, not args.no_an,
                               args.seed or 0, args.ms_checkpoint, args.an_checkpoint, args.dump_masks)
            label = "SS" + ("" if args.no_ms else "+MS") + ("" if args.no_an else "+AN")
            if args.out:
                Path(args.out).write_text(rep.to_json())
            print(format_table([(label, rep)]))
        elif args.command == "report":
            print(cmd_report(args.run_dir, args.out))
    except (ValidationError, ConfigError) as exc:
        return _error(exc, 2)
    except (ASLSegError, OSError, RuntimeError) as exc:
        return _error(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
