import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from aslseg.data import Origin, Slice, Stage, generate_synthetic_corpus, make_partition
from aslseg.errors import ConfigError, ConsistencyError
from aslseg.losses import LossWeights, poly_lr
from aslseg.metrics import dice
from aslseg.models import SegmenterConfig, build_adapter, build_promptable, build_unet
from aslseg.perturb import PerturbConfig
from aslseg.pipeline import (
    PipelineConfig,
    SelectionRecord,
    Settings,
    build_records,
    evaluate_segmenter,
    expand_labeled_set,
    read_records,
    run,
    select_reliable,
    stage1_infer,
    stage1_train,
    stage2_prompt_predict,
    stage3_refine,
)
from oracles import confusion_oracle

MODEL = SegmenterConfig(depth=3, base_channels=8, dropout=0.1)
FAST = PipelineConfig(max_iterations=2, ssl_iterations=60, ssl_batch_size=8, lr=0.05, eval_interval=30,
                      ms_iterations=20, an_iterations=20, an_replication=1, beta=0.5)
PERTURB = PerturbConfig(noise_radius=(1.0, 3.0), morph_radius=(1, 2), elastic_amplitude=2.0, elastic_sigma=4.0)


def settings(**kw) -> Settings:
    return Settings(MODEL, LossWeights(), PERTURB, replace(FAST, **kw))


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(120, 32, 32, seed=2)


@pytest.fixture(scope="module")
def state(corpus):
    return make_partition(corpus, seed=0)


@pytest.fixture(scope="module")
def trained(state):
    return stage1_train(state, settings(ssl_iterations=300, eval_interval=50), seed=0)


def random_masks(rng, n, shape=(12, 12)):
    return [(rng.random(shape) < rng.uniform(0, 0.5)).astype(np.uint8) for _ in range(n)]


class TestStage1:
    def test_beats_untrained_model(self, state, trained):
        untrained = evaluate_segmenter(build_unet(MODEL, 0), state.validation).mean("DSC")
        assert trained.val_dsc > untrained

    def test_step_count_and_schedule(self, state, monkeypatch):
        lrs = []
        original = torch.optim.SGD.step

        def counting_step(self, *a, **k):
            lrs.append(self.param_groups[0]["lr"])
            return original(self, *a, **k)

        monkeypatch.setattr(torch.optim.SGD, "step", counting_step)
        res = stage1_train(state, settings(ssl_iterations=20, eval_interval=20, lr=0.01), seed=0)
        assert len(lrs) == 20 == res.steps
        assert lrs[0] == 0.01
        assert lrs[10] == pytest.approx(0.01 * 0.5 ** 0.9)
        assert lrs[10] == pytest.approx(poly_lr(0.01, 10, 20))

    def test_empty_labeled_set(self, state):
        with pytest.raises(ConfigError):
            stage1_train(replace(state, labeled=[]), settings(), seed=0)

    def test_infer_count_order_and_determinism(self, state, trained):
        a = stage1_infer(trained.model, state.unlabeled)
        b = stage1_infer(trained.model, state.unlabeled)
        assert [sid for sid, _ in a] == [s.id for s in state.unlabeled]
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_infer_quality_against_hidden_truth(self, corpus, state, trained):
        truth = {s.id: m for s, m in corpus}
        dscs = [dice(m, truth[sid]) for sid, m in stage1_infer(trained.model, state.unlabeled)]
        assert np.mean(dscs) > 0.3


class TestStages2And3:
    def test_empty_ss_mask_skips(self):
        ms = build_promptable(MODEL, 0)
        sl = Slice("a", np.zeros((16, 16)), False)
        out = stage2_prompt_predict(ms, sl, np.zeros((16, 16), dtype=np.uint8), 0)
        assert out.skipped and out.prompt is None and not out.mask.any()

    def test_prompt_inside_ss_mask(self):
        ms = build_promptable(MODEL, 0)
        rng = np.random.default_rng(0)
        for i, m in enumerate(random_masks(rng, 30, (16, 16))):
            m[8, 8] = 1
            out = stage2_prompt_predict(ms, Slice("a", rng.random((16, 16)), True), m, i)
            assert m[out.prompt.row, out.prompt.col] == 1
            assert out.mask.shape == (16, 16) and set(np.unique(out.mask)) <= {0, 1}

    def test_refine_provenance_and_determinism(self):
        an = build_adapter(MODEL, 0)
        sl = Slice("x", np.random.default_rng(0).random((16, 16)), True)
        m = np.zeros((16, 16), dtype=np.uint8)
        m[4:9, 4:9] = 1
        a, b = stage3_refine(an, sl, m, 2), stage3_refine(an, sl, m, 2)
        assert a.stage is Stage.AN and a.iteration == 2 and a.slice_id == "x"
        assert set(np.unique(a.mask)) <= {0, 1}
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_ablation_flags_pass_masks_through(self, state, trained):
        ms, an = build_promptable(MODEL, 0), build_adapter(MODEL, 0)
        recs = build_records(trained.model, ms, an, state.unlabeled[:5], 0, 0, use_ms=False, use_an=False)
        for r in recs:
            np.testing.assert_array_equal(r.ss_mask, r.an_mask)
            assert r.agreement_dsc == 1.0 and r.ms_skipped


def record(dsc, ss=None, an=None, sid="s"):
    ss = np.ones((2, 2), dtype=np.uint8) if ss is None else ss
    an = ss if an is None else an
    return SelectionRecord(sid, 0, ss, ss, an, dsc)


class TestSelection:
    def test_threshold_examples(self):
        acc, rej = select_reliable([record(0.95, sid="a"), record(0.85, sid="b")], beta=0.9)
        assert [r.slice_id for r in acc] == ["a"] and [r.slice_id for r in rej] == ["b"]
        assert acc[0].accepted and not rej[0].accepted

    def test_identical_masks_always_accepted(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1, 1] = 1
        r = record(dice(m, m), m, m)
        assert select_reliable([r], beta=1.0)[0] == [r]

    def test_matches_oracle_dsc(self):
        rng = np.random.default_rng(3)
        ss_list, an_list = random_masks(rng, 300), random_masks(rng, 300)
        for beta in (0.0, 0.3, 0.6, 0.9):
            recs = [record(dice(s, a), s, a) for s, a in zip(ss_list, an_list)]
            select_reliable(recs, beta)
            for r in recs:
                assert r.accepted == (confusion_oracle(r.ss_mask, r.an_mask)[0] >= beta)

    def test_empty_empty_flag(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert select_reliable([record(1.0, z, z)], 0.9, accept_empty_agreement=True)[0]
        assert not select_reliable([record(1.0, z, z)], 0.9, accept_empty_agreement=False)[0]


class TestExpand:
    def test_counts_disjoint_irreversible(self, state):
        accepted = [record(1.0, np.ones(s.shape, dtype=np.uint8), sid=s.id) for s in state.unlabeled[:3]]
        new = expand_labeled_set(state, accepted)
        assert len(new.labeled) == len(state.labeled) + 3
        assert len(new.unlabeled) == len(state.unlabeled) - 3
        new.check()
        moved = [s for s in new.labeled if s.origin is Origin.PSEUDO]
        assert [s.id for s in moved] == [r.slice_id for r in accepted]
        assert all(s.mask.all() and s.pseudo.stage is Stage.AN for s in moved)
        with pytest.raises(ConsistencyError):
            expand_labeled_set(new, accepted)


def audit(run_dir, history, beta, accept_empty):
    seen = {}
    for h in history:
        for r in read_records(run_dir / f"iter_{h.iteration}"):
            if r.accepted:
                assert r.agreement_dsc >= beta or (accept_empty and not r.ss_mask.any() and not r.an_mask.any())
                assert r.slice_id not in seen
                seen[r.slice_id] = r
    return seen


def test_unreachable_beta_stops_after_first_iteration(state, tmp_path):
    res = run(state, settings(beta=1.0 + 1e-9, max_iterations=3), tmp_path / "r")
    assert len(res.history) == 1
    assert res.history[0].stop_reason == "no_acceptance" and res.history[0].n_accepted == 0
    assert len(res.state.labeled) == len(state.labeled)
    assert res.best_iteration == 0


def test_run_layout_invariants_and_resume(state, tmp_path):
    # beta 0 accepts every record, so the second round is guaranteed to see pseudo-labels
    s = settings(max_iterations=2, patience=5, beta=0.0)
    full = run(state, s, tmp_path / "full")
    assert len(full.history) == 2 and len(full.reports) == 2
    assert full.history[0].n_accepted == len(state.unlabeled)
    root = tmp_path / "full"
    for k in range(2):
        d = root / f"iter_{k}"
        for name in ("checkpoints/segmenter.pt", "metrics.json", "selection_records.jsonl", "state.json",
                     "COMPLETE"):
            assert (d / name).exists(), name
    assert (root / "iter_0/checkpoints/ms.pt").exists() and not (root / "iter_1/checkpoints/ms.pt").exists()
    assert (root / "best.pt").exists() and (root / "table.txt").exists()

    sizes = [(h.n_labeled, h.n_unlabeled) for h in full.history]
    assert all(a[0] <= b[0] for a, b in zip(sizes, sizes[1:]))
    assert len({a + b for a, b in sizes}) == 1
    moved = audit(root, full.history, s.pipeline.beta, True)
    pseudo = {x.id for x in full.state.labeled if x.origin is Origin.PSEUDO}
    assert pseudo == set(moved)
    line = json.loads((root / "iter_0/selection_records.jsonl").read_text().splitlines()[0])
    assert line["masks"].startswith("pseudolabels/")

    class Crash(RuntimeError):
        pass

    def crash_after_first(summary):
        if summary.iteration == 0:
            raise Crash

    with pytest.raises(Crash):
        run(state, s, tmp_path / "resumed", on_iteration=crash_after_first)
    resumed = run(state, s, tmp_path / "resumed", resume=True)
    assert [h.row() for h in resumed.history] == [h.row() for h in full.history]
    assert (tmp_path / "resumed/table.txt").read_text() == (root / "table.txt").read_text()
    for k in range(2):
        a = (root / f"iter_{k}/selection_records.jsonl").read_bytes()
        assert a == (tmp_path / f"resumed/iter_{k}/selection_records.jsonl").read_bytes()


def test_stage_failure_persists_error(state, tmp_path):
    bad = replace(state, labeled=[x for x in state.labeled if not x.mask.any()] or state.labeled[:0])
    with pytest.raises(ConfigError):
        run(bad, settings(), tmp_path / "err")
    assert json.loads((tmp_path / "err/error.json").read_text())["iteration"] == 0
