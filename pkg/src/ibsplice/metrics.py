"""Forensic scoring of predicted splice maps: F1, Matthews correlation and
pixel ROC-AUC, under both the ground-truth-optimal threshold and Otsu's
automatic threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from .localization import HeatMap, otsu_threshold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(mask_pred: np.ndarray, mask_true: np.ndarray) -> ConfusionCounts:
    """Pixelwise confusion counts of two boolean maps."""
    pred = np.asarray(mask_pred, dtype=bool)
    true = np.asarray(mask_true, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return ConfusionCounts(
        tp=int((pred & true).sum()),
        fp=int((pred & ~true).sum()),
        tn=int((~pred & ~true).sum()),
        fn=int((~pred & true).sum()),
    )


def f1(counts: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); zero denominator scores 0 by convention."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom > 0 else 0.0


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation; zero denominator scores 0 by convention."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(float(denom))


def roc_auc(prob_map: np.ndarray, mask_true: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with midrank tie handling."""
    scores = np.asarray(prob_map, dtype=np.float64).ravel()
    truth = np.asarray(mask_true, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise ValueError("prob map and mask shapes differ")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: mask contains a single class")
    ranks = rankdata(scores)
    return (ranks[truth].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def _threshold_candidates(values: np.ndarray) -> np.ndarray:
    """All cuts with distinct confusion outcomes: below-min, midpoints, at-max."""
    v = np.unique(values)
    mids = (v[:-1] + v[1:]) / 2 if v.size > 1 else np.empty(0)
    return np.concatenate([[v[0] - 1.0], mids, [v[-1]]])


def optimal_threshold(prob_map: np.ndarray, mask_true: np.ndarray,
                      metric: str = "f1") -> tuple[float, float]:
    """Exhaustive threshold scan maximizing F1 or MCC; ties pick the lowest cut.

    Predictions are `prob > threshold`; the scan includes the all-positive
    and all-negative cuts so the result dominates any fixed threshold.
    """
    if metric not in ("f1", "mcc"):
        raise ValueError(f"unknown metric {metric!r}")
    scorer = f1 if metric == "f1" else mcc
    scores = np.asarray(prob_map, dtype=np.float64).ravel()
    truth = np.asarray(mask_true, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise ValueError("prob map and mask shapes differ")
    if truth.all() or not truth.any():
        raise ValueError("optimal threshold undefined: mask contains a single class")

    # Cumulative positives/negatives over descending distinct values give the
    # confusion counts at every candidate cut in O(n log n).
    order = np.argsort(scores)[::-1]
    sorted_scores = scores[order]
    sorted_truth = truth[order]
    distinct_end = np.nonzero(np.diff(sorted_scores))[0]  # last index of each value run
    boundaries = np.concatenate([distinct_end, [scores.size - 1]])
    cum_tp = np.cumsum(sorted_truth)[boundaries]
    cum_fp = np.cumsum(~sorted_truth)[boundaries]
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())

    candidates = _threshold_candidates(scores)
    best_t, best_s = None, -np.inf
    # candidate i (ascending) admits exactly the top (len(boundaries)-i) value runs
    for i, t in enumerate(candidates):
        runs_in = len(boundaries) - i
        if runs_in > 0:
            tp, fp = int(cum_tp[runs_in - 1]), int(cum_fp[runs_in - 1])
        else:
            tp, fp = 0, 0
        s = scorer(ConfusionCounts(tp=tp, fp=fp, tn=n_neg - fp, fn=n_pos - tp))
        if s > best_s:
            best_t, best_s = float(t), float(s)
    return best_t, best_s


@dataclass
class ImageScore:
    case_id: str
    f1_optimal: float
    f1_otsu: float
    mcc_optimal: float
    mcc_otsu: float
    auc: float
    threshold_f1: float
    threshold_mcc: float
    threshold_otsu: float


@dataclass
class ScoreReport:
    per_image: list[ImageScore]
    f1_optimal: float
    f1_otsu: float
    mcc_optimal: float
    mcc_otsu: float
    auc: float
    skipped: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned text table: one row per thresholding policy."""
        lines = [f"{'threshold':<12}{'F1':>8}{'MCC':>8}{'AUC':>8}",
                 f"{'optimal':<12}{self.f1_optimal:>8.3f}{self.mcc_optimal:>8.3f}{self.auc:>8.3f}",
                 f"{'otsu':<12}{self.f1_otsu:>8.3f}{self.mcc_otsu:>8.3f}{self.auc:>8.3f}"]
        return "\n".join(lines)


def score_case(case_id: str, heat: HeatMap | np.ndarray, mask_true: np.ndarray) -> ImageScore:
    prob = heat.prob if isinstance(heat, HeatMap) else np.asarray(heat)
    t_f1, s_f1 = optimal_threshold(prob, mask_true, "f1")
    t_mcc, s_mcc = optimal_threshold(prob, mask_true, "mcc")
    t_otsu = otsu_threshold(prob)
    pred = prob > t_otsu
    c = confusion(pred, mask_true)
    return ImageScore(case_id=case_id, f1_optimal=s_f1, f1_otsu=f1(c),
                      mcc_optimal=s_mcc, mcc_otsu=mcc(c),
                      auc=roc_auc(prob, mask_true),
                      threshold_f1=t_f1, threshold_mcc=t_mcc, threshold_otsu=t_otsu)


def evaluate_dataset(cases: list[tuple[str, HeatMap | np.ndarray, np.ndarray]]) -> ScoreReport:
    """Per-image scores and unweighted means over all scorable cases.

    Cases whose mask has a single class or whose map is constant are skipped
    with a log entry; evaluating nothing is an error.
    """
    if not cases:
        raise ValueError("no cases to evaluate")
    per_image: list[ImageScore] = []
    skipped: list[str] = []
    for case_id, heat, mask_true in cases:
        try:
            per_image.append(score_case(case_id, heat, mask_true))
        except ValueError as exc:
            log.warning("skipping case %s: %s", case_id, exc)
            skipped.append(case_id)
    if not per_image:
        raise ValueError("all cases failed their metric preconditions")
    mean = lambda attr: float(np.mean([getattr(s, attr) for s in per_image]))
    return ScoreReport(per_image=per_image,
                       f1_optimal=mean("f1_optimal"), f1_otsu=mean("f1_otsu"),
                       mcc_optimal=mean("mcc_optimal"), mcc_otsu=mean("mcc_otsu"),
                       auc=mean("auc"), skipped=skipped)
