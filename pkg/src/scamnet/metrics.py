"""Image-level multi-label evaluation: AP/mAP plus macro (-C) and micro (-O)
precision, recall and F1.

AP uses raw (non-interpolated) precision at each positive's rank, with
confidence ties broken by sample id. Macro averaging scores a category with
no ground-truth and no predicted positives as P=R=F1=1 (vacuous truth); such
categories are still excluded from mAP and listed in the report.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PredictionRecord:
    sample_id: str
    confidences: np.ndarray  # (C,)
    labels: np.ndarray  # (C,) 0/1

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.confidences.shape != self.labels.shape:
            raise ValueError(
                f"{self.sample_id}: {self.confidences.shape} confidences vs {self.labels.shape} labels")


@dataclass
class MetricsReport:
    mAP: float
    P_C: float
    R_C: float
    F1_C: float
    P_O: float
    R_O: float
    F1_O: float
    per_class: list[dict]
    excluded_classes: list[int]
    binarization: str
    ap_convention: str = "raw precision at positive ranks"

    def to_json(self) -> str:
        payload = {
            "mAP": self.mAP, "F1_C": self.F1_C, "P_C": self.P_C, "R_C": self.R_C,
            "F1_O": self.F1_O, "P_O": self.P_O, "R_O": self.R_O,
            "per_class": self.per_class, "excluded_classes": self.excluded_classes,
            "binarization": self.binarization, "ap_convention": self.ap_convention,
        }
        return json.dumps(payload, indent=2)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def average_precision(category: int, records: list[PredictionRecord]) -> float:
    """Mean of precision@k over the ranks k of positive samples."""
    order = sorted(records, key=lambda r: (-r.confidences[category], r.sample_id))
    relevant = [r.labels[category] for r in order]
    n_pos = int(sum(relevant))
    if n_pos == 0:
        raise ValueError(f"category {category} has no positive ground truth")
    hits, precisions = 0, []
    for k, rel in enumerate(relevant, start=1):
        if rel:
            hits += 1
            precisions.append(hits / k)
    return float(np.mean(precisions))


def mean_average_precision(records: list[PredictionRecord]) -> tuple[float, list[float | None], list[int]]:
    """Unweighted mean AP over categories that have positives.

    Returns (mAP, per-category AP or None, excluded category indices).
    """
    n_cat = records[0].confidences.size
    aps: list[float | None] = []
    excluded = []
    for c in range(n_cat):
        if not any(r.labels[c] for r in records):
            aps.append(None)
            excluded.append(c)
        else:
            aps.append(average_precision(c, records))
    included = [a for a in aps if a is not None]
    if not included:
        raise ValueError("no category has positive ground truth")
    return float(np.mean(included)), aps, excluded


def binarize(records: list[PredictionRecord], binarization: str) -> np.ndarray:
    """Turn confidences into a (N,C) 0/1 matrix.

    ``binarization`` is "threshold:<t>" or "top_k:<k>".
    """
    kind, _, arg = binarization.partition(":")
    conf = np.stack([r.confidences for r in records])
    if kind == "threshold":
        return (conf > float(arg)).astype(np.int64)
    if kind == "top_k":
        k = int(arg)
        if k > conf.shape[1]:
            raise ValueError(f"top_k {k} exceeds category count {conf.shape[1]}")
        out = np.zeros_like(conf, dtype=np.int64)
        for i, row in enumerate(conf):
            out[i, np.argsort(-row, kind="stable")[:k]] = 1
        return out
    raise ValueError(f"unknown binarization {binarization!r}")


def precision_recall_f1(records: list[PredictionRecord], binarization: str,
                        averaging: str) -> tuple[float, float, float]:
    pred = binarize(records, binarization)
    gt = np.stack([r.labels for r in records])
    tp = (pred & gt).sum(axis=0)
    fp = (pred & (1 - gt)).sum(axis=0)
    fn = ((1 - pred) & gt).sum(axis=0)
    if averaging == "micro":
        tps, fps, fns = tp.sum(), fp.sum(), fn.sum()
        p = tps / (tps + fps) if tps + fps else 0.0
        r = tps / (tps + fns) if tps + fns else 0.0
        return float(p), float(r), _f1(p, r)
    if averaging == "macro":
        ps, rs = [], []
        for c in range(gt.shape[1]):
            if tp[c] + fp[c] + fn[c] == 0:  # vacuous category
                ps.append(1.0), rs.append(1.0)
                continue
            ps.append(tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0)
            rs.append(tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0)
        p, r = float(np.mean(ps)), float(np.mean(rs))
        return p, r, _f1(p, r)
    raise ValueError(f"unknown averaging {averaging!r}")


def per_class_prf(records: list[PredictionRecord], binarization: str) -> list[tuple[float, float, float]]:
    pred = binarize(records, binarization)
    gt = np.stack([r.labels for r in records])
    out = []
    for c in range(gt.shape[1]):
        tp = int((pred[:, c] & gt[:, c]).sum())
        fp = int((pred[:, c] & (1 - gt[:, c])).sum())
        fn = int(((1 - pred[:, c]) & gt[:, c]).sum())
        if tp + fp + fn == 0:
            out.append((1.0, 1.0, 1.0))
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out.append((p, r, _f1(p, r)))
    return out


def build_report(records: list[PredictionRecord], binarization: str = "threshold:0.5",
                 class_names: list[str] | None = None) -> MetricsReport:
    if not records:
        raise ValueError("cannot build a report from zero records")
    map_value, aps, excluded = mean_average_precision(records)
    p_c, r_c, f1_c = precision_recall_f1(records, binarization, "macro")
    p_o, r_o, f1_o = precision_recall_f1(records, binarization, "micro")
    prf = per_class_prf(records, binarization)
    n_cat = records[0].confidences.size
    names = class_names or [str(c) for c in range(n_cat)]
    per_class = [
        {"class": names[c], "AP": aps[c], "P": prf[c][0], "R": prf[c][1], "F1": prf[c][2]}
        for c in range(n_cat)
    ]
    return MetricsReport(mAP=map_value, P_C=p_c, R_C=r_c, F1_C=f1_c,
                         P_O=p_o, R_O=r_o, F1_O=f1_o, per_class=per_class,
                         excluded_classes=excluded, binarization=binarization)


def render_table(report: MetricsReport, label: str = "scamnet") -> str:
    """Plain-text one-row table in mAP | F1-C | P-C | R-C | F1-O | P-O | R-O order."""
    header = f"{'Method':<16}|{'mAP':>8} |{'F1-C':>8} |{'P-C':>8} |{'R-C':>8} |{'F1-O':>8} |{'P-O':>8} |{'R-O':>8}"
    vals = [report.mAP, report.F1_C, report.P_C, report.R_C, report.F1_O, report.P_O, report.R_O]
    row = f"{label:<16}|" + " |".join(f"{100 * v:>8.1f}" for v in vals)
    rule = "-" * len(header)
    return "\n".join([header, rule, row])
