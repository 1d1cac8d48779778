"""Release acceptance suite: one test per shipping criterion.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail line per
criterion. The end-to-end criteria train the real model on the full synthetic
benchmark (2000 train / 500 val images), which dominates the suite's runtime.
"""
import itertools
import json
import time

import numpy as np
import pytest

from scamnet.config import RunConfig
from scamnet.data import CATEGORIES, DatasetSpec, generate_dataset
from scamnet.geometry import Box, decode_box_delta, encode_box_delta, expand_patch, iou
from scamnet.metrics import (PredictionRecord, average_precision, build_report,
                             mean_average_precision, precision_recall_f1)
from scamnet.model import AnchorIndex, load_model
from scamnet.train import evaluate_records, train
from scamnet.verify import (END_TO_END_TOLERANCE, OPERATOR_TOLERANCE,
                            micro_model_grad_check, operator_grad_checks)
from scamnet import losses as L
import scamnet.tensor as T

DOT = CATEGORIES.index("dot")


# ---------------------------------------------------------------------------
# the full benchmark run, shared by the end-to-end criteria


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    data = str(root / "data")
    generate_dataset(DatasetSpec(num_train=2000, num_val=500, seed=42), data)

    snapshots = {}

    def callback(phase, epoch, params):
        snapshots.setdefault(phase, []).append(
            {n: params[n].data.copy() for n in params.names()
             if n.startswith("stage")})

    t0 = time.monotonic()
    summary = train(RunConfig(), data, str(root / "model.ckpt"),
                    str(root / "train.jsonl"), epoch_callback=callback,
                    quiet=True)
    wall = time.monotonic() - t0

    params, cfg = load_model(str(root / "model.ckpt"))
    index = AnchorIndex(cfg)
    from scamnet.data import load_split
    val = load_split(data + "/val")
    branch_reports = {}
    branch_records = {}
    for branch in ("object", "context", "fused"):
        recs = evaluate_records(val, params, cfg, index, branch=branch)
        branch_records[branch] = recs
        branch_reports[branch] = build_report(recs, class_names=list(CATEGORIES))
    return {"summary": summary, "wall": wall, "snapshots": snapshots,
            "reports": branch_reports, "records": branch_records,
            "root": root}


# ---------------------------------------------------------------------------
# criterion 1: loss oracle suite


def test_loss_oracles_match_hand_computed_values():
    tol = 1e-9
    cfg = L.LossConfig()
    assert abs(L.smooth_l1(T.constant(0.5)).item() - 0.125) <= tol
    assert abs(L.smooth_l1(T.constant(2.0)).item() - 1.5) <= tol
    assert abs(L.smooth_l1(T.constant(-1.0)).item() - 0.5) <= tol
    t_hat = T.constant(np.array([[0.5, 0.0, 0.0, 0.0]]))
    assert abs(L.location_loss(t_hat, np.zeros((1, 4))).item() - 0.125) <= tol
    t_hat2 = T.constant(np.array([[2.0, 2.0, 2.0, 2.0]]))
    assert abs(L.location_loss(t_hat2, np.zeros((1, 4))).item() - 6.0) <= tol
    probs = T.constant(np.array([0.5, 0.9]))
    assert abs(L.patch_loss(probs, np.array([1.0, 1.0])).item()
               - 0.5 * (np.log(2) + np.log(1 / 0.9))) <= tol
    agg = T.constant(np.array([0.5, 0.5]))
    assert abs(L.bce_from_probs(agg, np.array([1.0, 0.0])).item()
               - 2 * np.log(2)) <= tol
    total = L.combine_losses(T.constant(1.0), T.constant(2.0), T.constant(3.0),
                             T.constant(4.0), cfg)
    assert abs(total.item() - 10.0) <= tol


# ---------------------------------------------------------------------------
# criterion 2: gradient verification suite


def test_gradient_suite_within_tolerances():
    assert OPERATOR_TOLERANCE <= 1e-4
    assert END_TO_END_TOLERANCE <= 1e-3
    errs = operator_grad_checks(seed=1)
    worst = max(errs.values())
    assert worst <= OPERATOR_TOLERANCE, f"worst operator rel err {worst:.3e}"
    e2e = micro_model_grad_check(seed=1)
    assert e2e <= END_TO_END_TOLERANCE, f"micro-model rel err {e2e:.3e}"


# ---------------------------------------------------------------------------
# criterion 3: metrics oracle


def _brute_force_ap(category, records):
    """Independent AP: average precision at each positive, confidences sorted
    descending, ties broken by sample id for determinism."""
    ranked = sorted(records, key=lambda r: (-r.confidences[category], r.sample_id))
    tp = 0
    precisions = []
    for i, r in enumerate(ranked, start=1):
        if r.labels[category]:
            tp += 1
            precisions.append(tp / i)
    return sum(precisions) / len(precisions) if precisions else None


def test_metrics_oracle_exact_and_brute_force():
    # exhaustive 3-sample, 2-category enumeration against closed-form oracles
    for bits in itertools.product([0, 1], repeat=6):
        labels = np.array(bits).reshape(3, 2)
        conf = np.array([[0.9, 0.2], [0.6, 0.7], [0.3, 0.5]])
        recs = [PredictionRecord(f"s{i}", conf[i], labels[i]) for i in range(3)]
        want = [_brute_force_ap(c, recs) for c in range(2)]
        defined = [w for w in want if w is not None]
        if not defined:
            with pytest.raises(ValueError):
                mean_average_precision(recs)
            continue
        m, aps, _ = mean_average_precision(recs)
        for got, w in zip(aps, want):
            if w is None:
                assert got is None
            else:
                assert abs(got - w) <= 1e-12
        assert abs(m - float(np.mean(defined))) <= 1e-12
    # 1000 seeded random prediction sets against the brute-force oracle
    for trial in range(1000):
        rng = np.random.default_rng([77, trial])
        n, c = rng.integers(1, 7), rng.integers(1, 5)
        conf = np.round(rng.random((n, c)), 1)  # rounding forces ties
        labels = rng.integers(0, 2, size=(n, c))
        recs = [PredictionRecord(f"s{i}", conf[i], labels[i]) for i in range(n)]
        if labels.sum() == 0:
            with pytest.raises(ValueError):
                mean_average_precision(recs)
            continue
        _, aps, _ = mean_average_precision(recs)
        for cat in range(c):
            want = _brute_force_ap(cat, recs)
            if want is None:
                assert aps[cat] is None
            else:
                assert abs(aps[cat] - want) <= 1e-12


# ---------------------------------------------------------------------------
# criterion 4: geometry property suite


def test_geometry_properties_hold_over_seeded_cases():
    def rand_box(rng):
        return Box(cx=rng.uniform(5, 59), cy=rng.uniform(5, 59),
                   w=rng.uniform(1, 30), h=rng.uniform(1, 30))

    for i in range(10_000):
        rng = np.random.default_rng([88, i])
        a, b = rand_box(rng), rand_box(rng)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert abs(v - iou(b, a)) <= 1e-12
        assert abs(iou(a, a) - 1.0) <= 1e-12
        # delta encoding round-trips
        d = encode_box_delta(a, b)
        r = decode_box_delta(a, d)
        for got, want in zip(r.extent(), b.extent()):
            assert abs(got - want) <= 1e-9
        # expansion contains the in-image part of the original (the expanded
        # patch is clipped to the image bounds)
        e2 = expand_patch(a, 2.0, 64, 64)
        x0, y0, x1, y1 = a.extent()
        cx0, cy0, cx1, cy1 = e2.extent()
        assert cx0 <= max(x0, 0.0) + 1e-9 and cy0 <= max(y0, 0.0) + 1e-9
        assert cx1 >= min(x1, 64.0) - 1e-9 and cy1 >= min(y1, 64.0) - 1e-9
        assert cx0 >= -1e-9 and cy0 >= -1e-9 and cx1 <= 64 + 1e-9 and cy1 <= 64 + 1e-9


# ---------------------------------------------------------------------------
# criteria 5-6: end-to-end benchmark run and the context-benefit ablation


def test_end_to_end_benchmark_reaches_targets(benchmark_run):
    report = benchmark_run["reports"]["fused"]
    epochs = benchmark_run["summary"]["epochs"]
    assert epochs <= 30, f"used {epochs} epochs"
    assert report.mAP >= 0.90, f"val mAP {report.mAP:.4f}"
    assert report.F1_O >= 0.85, f"F1-O {report.F1_O:.4f}"


def test_end_to_end_runtime_within_budget(benchmark_run):
    minutes = benchmark_run["wall"] / 60
    assert minutes <= 30, f"training took {minutes:.1f} min"


def test_context_branch_benefit_ablation(benchmark_run):
    reports = benchmark_run["reports"]
    dot_recall = {b: reports[b].per_class[DOT]["R"] for b in ("object", "fused")}
    assert dot_recall["fused"] - dot_recall["object"] >= 0.05, (
        f"dot recall fused {dot_recall['fused']:.3f} vs object {dot_recall['object']:.3f}")
    assert reports["fused"].mAP >= reports["object"].mAP - 1e-12


# ---------------------------------------------------------------------------
# criterion 7: determinism


def test_reruns_are_bit_identical(tmp_path):
    spec = DatasetSpec(num_train=16, num_val=8, seed=42)
    run = RunConfig().with_overrides(epochs_phase0=1, epochs_phase1=2,
                                    epochs_phase2=1)
    outputs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        generate_dataset(spec, str(d / "data"))
        train(run, str(d / "data"), str(d / "model.ckpt"), str(d / "log.jsonl"))
        params, cfg = load_model(str(d / "model.ckpt"))
        index = AnchorIndex(cfg)
        from scamnet.data import load_split
        recs = evaluate_records(load_split(str(d / "data" / "val")), params, cfg, index)
        report = build_report(recs, class_names=list(CATEGORIES)).to_json()
        outputs.append(((d / "model.ckpt").read_bytes(),
                        (d / "log.jsonl").read_bytes(), report))
    assert outputs[0][0] == outputs[1][0], "checkpoints differ"
    assert outputs[0][1] == outputs[1][1], "training logs differ"
    assert outputs[0][2] == outputs[1][2], "evaluation reports differ"


# ---------------------------------------------------------------------------
# criterion 8: staged-training contract


def test_staged_training_contract(benchmark_run):
    snaps = benchmark_run["snapshots"]
    phase1 = snaps[1]
    first = phase1[0]
    assert first, "no backbone parameters captured"
    for snap in phase1[1:]:
        for name, arr in first.items():
            assert np.array_equal(arr, snap[name]), (
                f"backbone {name} changed during phase 1")
    changed = any(
        not np.array_equal(snaps[2][-1][name], first[name]) for name in first)
    assert changed, "backbone never updated in phase 2"
