"""ROC construction, AUC, F1-based threshold selection, and reports.

The classification rule everywhere is: predict positive iff score >=
threshold. F1 for a class is computed in the canonical integer-count form
2*TP / (2*TP + FP + FN) so any tool recomputing it from the confusion
counts gets the identical float; it is defined as 0 when the denominator
vanishes. Macro-F1 is the plain mean of the positive-class and
negative-class F1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointMeta
from .data import Cohort
from .errors import DataError
from .network import Network, forward
from .tensor import no_grad
from .training import prepare_inputs, replicate_channels

# AUCs of the original full-scale CheXpert training runs (GPU-scale, the
# real dataset). Desk-scale synthetic runs are not expected to reproduce
# them; they surface in reports as reference metadata only.
REFERENCE_AUC = {
    "lung lesion": 0.73,
    "nodule": 0.73,
    "cardiomegaly": 0.92,
}


class UndefinedRocError(DataError):
    """ROC and threshold selection need both classes present."""


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray  # positive-class score per example, in [0,1]
    labels: np.ndarray  # 1 positive, 0 negative

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if scores.ndim != 1 or scores.shape != labels.shape or scores.size == 0:
            raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal-length, nonempty 1-D")
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise DataError("scores must lie in [0, 1]")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_neg(self) -> int:
        return int((self.labels == 0).sum())


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float

    def __post_init__(self):
        if not (0.0 <= self.fpr <= 1.0 and 0.0 <= self.tpr <= 1.0):
            raise DataError(f"rates out of [0,1]: fpr={self.fpr}, tpr={self.tpr}")


def confusion(scored: ScoredSet, threshold: float) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) under predict-positive-iff-score >= threshold."""
    pred = scored.scores >= threshold
    pos = scored.labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    return tp, fp, tn, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_scores(scored: ScoredSet, threshold: float) -> tuple[float, float, float]:
    """(f1_pos, f1_neg, macro) at a threshold; the negative-class F1 swaps
    the roles of the two classes."""
    tp, fp, tn, fn = confusion(scored, threshold)
    f1_pos = f1_from_counts(tp, fp, fn)
    f1_neg = f1_from_counts(tn, fn, fp)
    return f1_pos, f1_neg, (f1_pos + f1_neg) / 2.0


def roc_curve(scored: ScoredSet) -> list[RocPoint]:
    """Threshold sweep over all distinct scores, descending, with sentinels
    above the maximum and below the minimum. Consecutive duplicate
    (fpr, tpr) points are collapsed (the higher threshold is kept), so the
    curve runs exactly from (0,0) to (1,1) with both rates nondecreasing."""
    n_pos, n_neg = scored.n_pos, scored.n_neg
    if n_pos == 0 or n_neg == 0:
        raise UndefinedRocError(f"ROC needs both classes, got {n_pos} positive / {n_neg} negative")
    uniq = np.unique(scored.scores)
    thresholds = np.concatenate(([uniq[-1] + 1.0], uniq[::-1], [uniq[0] - 1.0]))
    pos = scored.labels == 1
    points: list[RocPoint] = []
    for t in thresholds:
        pred = scored.scores >= t
        tpr = int((pred & pos).sum()) / n_pos
        fpr = int((pred & ~pos).sum()) / n_neg
        if points and points[-1].fpr == fpr and points[-1].tpr == tpr:
            continue
        points.append(RocPoint(float(t), fpr, tpr))
    return points


def auc(curve: Sequence[RocPoint]) -> float:
    """Trapezoidal area over FPR; equals the probability a random positive
    outscores a random negative, ties counted half."""
    if len(curve) < 2:
        raise DataError("AUC needs a curve with at least two points")
    total = 0.0
    for a, b in zip(curve, curve[1:]):
        if b.fpr < a.fpr or b.tpr < a.tpr:
            raise DataError("curve rates must be nondecreasing")
        total += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return total


def threshold_candidates(scores: np.ndarray) -> list[float]:
    """Midpoints between consecutive distinct scores, plus a low sentinel
    halfway to 0 (predict everything positive) and a high sentinel halfway
    to 1 (predict everything negative when scores stay below 1)."""
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    cands = [uniq[0] / 2.0]
    cands += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    cands.append((uniq[-1] + 1.0) / 2.0)
    return [float(c) for c in cands]


def select_threshold(scored: ScoredSet, objective: str = "macro_f1") -> float:
    """Candidate maximizing validation F1; ties take the smallest
    threshold. objective "macro_f1" averages both classes, "f1_pos" scores
    the positive class alone."""
    if objective not in ("macro_f1", "f1_pos"):
        raise DataError(f"unknown objective {objective!r}")
    if scored.n_pos == 0 or scored.n_neg == 0:
        raise UndefinedRocError(
            f"threshold selection needs both classes, got {scored.n_pos} positive / {scored.n_neg} negative"
        )
    best_t, best_f1 = None, -1.0
    for t in threshold_candidates(scored.scores):
        f1_pos, _, macro = f1_scores(scored, t)
        value = macro if objective == "macro_f1" else f1_pos
        if value > best_f1:
            best_t, best_f1 = t, value
    return best_t


@dataclass(frozen=True)
class EvalReport:
    auc: float
    threshold: float
    f1_pos: float
    f1_neg: float
    f1_macro: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_pos: int
    n_neg: int
    curve: tuple[RocPoint, ...]


def norm_from_meta(meta: CheckpointMeta | None) -> tuple[str, tuple[float, float] | None]:
    """Normalization mode and dataset statistics recorded at train time."""
    if meta is None:
        return "per_image", None
    mode = meta.extra.get("norm_mode", "per_image")
    if mode == "dataset":
        try:
            return mode, (float(meta.extra["norm_mean"]), float(meta.extra["norm_std"]))
        except KeyError as exc:
            raise DataError(f"checkpoint uses dataset normalization but lacks {exc}") from exc
    return mode, None


def score_split(
    network: Network,
    cohort: Cohort,
    split_name: str,
    norm_mode: str = "per_image",
    norm_stats: tuple[float, float] | None = None,
    batch_size: int = 64,
) -> ScoredSet:
    """Eval-mode positive-class scores for one split, in record order."""
    records = [r for r in cohort.records if r.split == split_name]
    if not records:
        raise DataError(f"cohort has no {split_name!r} records")
    cfg = network.config
    images, labels, _ = prepare_inputs(cohort, records, cfg.input_size, norm_mode, norm_stats)
    scores = np.empty(len(records), dtype=np.float64)
    with no_grad():
        for start in range(0, len(records), batch_size):
            batch = replicate_channels(images[start : start + batch_size], cfg.input_channels)
            res = forward(network, batch, mode="eval")
            scores[start : start + len(batch)] = res.probs.data[:, 0]
    return ScoredSet(np.clip(scores, 0.0, 1.0), labels)


def evaluate(checkpoint, cohort: Cohort, threshold: float, batch_size: int = 64) -> EvalReport:
    """Score the test split, sweep the ROC, and binarize at the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold must lie in [0,1], got {threshold}")
    if isinstance(checkpoint, Checkpoint):
        network, meta = checkpoint.network, checkpoint.meta
    else:
        network, meta = checkpoint, None
    mode, stats = norm_from_meta(meta)
    scored = score_split(network, cohort, "test", mode, stats, batch_size)
    curve = roc_curve(scored)
    area = auc(curve)
    tp, fp, tn, fn = confusion(scored, threshold)
    f1_pos = f1_from_counts(tp, fp, fn)
    f1_neg = f1_from_counts(tn, fn, fp)
    return EvalReport(
        auc=area,
        threshold=float(threshold),
        f1_pos=f1_pos,
        f1_neg=f1_neg,
        f1_macro=(f1_pos + f1_neg) / 2.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n_pos=scored.n_pos,
        n_neg=scored.n_neg,
        curve=tuple(curve),
    )


def report_json(report: EvalReport, pathology: str, seed: int, config: dict) -> str:
    """Report payload with the embedded config and seed; contains no file
    paths, so identical runs serialize identically anywhere."""
    payload = {
        "auc": report.auc,
        "threshold": report.threshold,
        "f1_pos": report.f1_pos,
        "f1_neg": report.f1_neg,
        "f1_macro": report.f1_macro,
        "tp": report.tp,
        "fp": report.fp,
        "tn": report.tn,
        "fn": report.fn,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "pathology": pathology,
        "seed": seed,
        "config": config,
    }
    reference = REFERENCE_AUC.get(pathology.strip().lower())
    if reference is not None:
        payload["reference_auc"] = reference
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_roc_csv(curve: Sequence[RocPoint], path) -> None:
    lines = ["threshold,fpr,tpr"]
    for p in curve:
        lines.append(f"{p.threshold!r},{p.fpr!r},{p.tpr!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_roc_svg(curve: Sequence[RocPoint], path, title: str = "ROC") -> None:
    """Static line plot: unit axes, dashed chance diagonal, the curve."""
    size, margin = 480, 56
    span = size - 2 * margin

    def px(fpr: float) -> float:
        return margin + fpr * span

    def py(tpr: float) -> float:
        return size - margin - tpr * span

    points = " ".join(f"{px(p.fpr):.2f},{py(p.tpr):.2f}" for p in curve)
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = px(v), py(v)
        ticks.append(f'<line x1="{x:.2f}" y1="{size - margin}" x2="{x:.2f}" y2="{size - margin + 5}" stroke="#333"/>')
        ticks.append(f'<text x="{x:.2f}" y="{size - margin + 18}" font-size="11" text-anchor="middle">{v:g}</text>')
        ticks.append(f'<line x1="{margin - 5}" y1="{y:.2f}" x2="{margin}" y2="{y:.2f}" stroke="#333"/>')
        ticks.append(f'<text x="{margin - 9}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{v:g}</text>')
    svg = f"""<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect width="{size}" height="{size}" fill="white"/>
<text x="{size / 2}" y="24" font-size="14" text-anchor="middle">{title}</text>
<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="#333"/>
<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="#333"/>
{chr(10).join(ticks)}
<line x1="{px(0)}" y1="{py(0)}" x2="{px(1)}" y2="{py(1)}" stroke="#999" stroke-dasharray="5,4"/>
<polyline points="{points}" fill="none" stroke="#b4232a" stroke-width="2"/>
<text x="{size / 2}" y="{size - 16}" font-size="12" text-anchor="middle">false positive rate</text>
<text x="16" y="{size / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {size / 2})">true positive rate</text>
</svg>
"""
    Path(path).write_text(svg, encoding="utf-8")
