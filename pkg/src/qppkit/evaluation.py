"""Ground-truth effectiveness, correlation, and the cross-validation protocol.

The evaluation protocol follows the repeated two-fold design: each trial
randomly splits the queries into two halves, trains on one half
(including any variant aggregation and feature selection) and predicts
on the other, in both directions. Trials are seeded independently from
a master seed via a SplitMix64 derivation so they are reproducible in
isolation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.stats import rankdata, t as student_t

from .corpus import Corpus, Qrels
from .predictors import FeatureMatrix
from .retrieval import RankedList

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def derive_trial_seed(master_seed: int, trial: int) -> int:
    """Per-trial seed: one SplitMix64 scramble of master_seed + trial.

    z = (master + (trial+1) * 0x9E3779B97F4A7C15); then two xor-shift
    multiplications and a final xor-shift, all modulo 2^64.
    """
    z = (master_seed + (trial + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


# --------------------------------------------------------------- effectiveness


def average_precision(ranked: RankedList, qrels: Qrels, corpus: Corpus) -> float:
    """Mean precision at the ranks of retrieved relevant documents.

    Grades above zero count as relevant; the divisor is the total number
    of judged-relevant documents for the query. Raises when the query
    has no relevant documents.
    """
    total_relevant = qrels.relevant_count(ranked.query_id)
    if total_relevant == 0:
        raise ValueError(f"query {ranked.query_id!r} has no relevant documents")
    hits = 0
    precision_sum = 0.0
    for rank, (doc_id, _) in enumerate(ranked.entries, start=1):
        if qrels.grade(ranked.query_id, corpus.external_id(doc_id)) > 0:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total_relevant


def ndcg(
    ranked: RankedList, qrels: Qrels, corpus: Corpus, cutoff: int | None = None
) -> float:
    """Normalized DCG with gain 2^grade - 1 and discount log2(rank + 1).

    The ideal ranking orders all judged documents by grade; the default
    cutoff is the length of the ranked list.
    """
    judged = qrels.judged(ranked.query_id)
    if not any(g > 0 for g in judged.values()):
        raise ValueError(f"query {ranked.query_id!r} has no relevant documents")
    if cutoff is None:
        cutoff = len(ranked)
    dcg = 0.0
    for rank, (doc_id, _) in enumerate(ranked.entries[:cutoff], start=1):
        grade = qrels.grade(ranked.query_id, corpus.external_id(doc_id))
        if grade > 0:
            dcg += (2.0**grade - 1.0) / math.log2(rank + 1)
    ideal = sorted(judged.values(), reverse=True)[:cutoff]
    idcg = sum(
        (2.0**g - 1.0) / math.log2(rank + 1)
        for rank, g in enumerate(ideal, start=1)
        if g > 0
    )
    return dcg / idcg


def compute_targets(
    ranked_lists: dict[str, RankedList],
    qrels: Qrels,
    corpus: Corpus,
    metric: str,
    cutoff: int | None = None,
) -> tuple[dict[str, float], list[str]]:
    """Per-query effectiveness targets; queries without relevant documents
    are excluded and returned separately."""
    metric = metric.upper()
    if metric not in ("AP", "NDCG"):
        raise ValueError(f"unknown target metric {metric!r}")
    targets: dict[str, float] = {}
    excluded: list[str] = []
    for qid, ranked in ranked_lists.items():
        if qrels.relevant_count(qid) == 0:
            excluded.append(qid)
            continue
        if metric == "AP":
            targets[qid] = average_precision(ranked, qrels, corpus)
        else:
            targets[qid] = ndcg(ranked, qrels, corpus, cutoff)
    if excluded:
        log.warning(
            "excluded %d queries with no relevant documents: %s",
            len(excluded),
            ", ".join(excluded),
        )
    return targets, excluded


# ----------------------------------------------------------------- correlation


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("correlation needs at least 3 paired values")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(dx @ dy) / math.sqrt(sx * sy)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties get averaged ranks)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("correlation needs at least 3 paired values")
    return pearson(rankdata(x), rankdata(y))


# ---------------------------------------------------------------- significance


def paired_t_test(a, b) -> float:
    """Two-sided paired Student-t p-value on per-trial differences.

    All-zero differences give p = 1.0 by convention; zero-variance
    nonzero differences give p = 0.0 (below any machine alpha).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("paired t-test needs at least 2 paired values")
    diff = a - b
    if np.all(diff == 0.0):
        return 1.0
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        return 0.0
    t_stat = mean / (sd / math.sqrt(len(diff)))
    return 2.0 * float(student_t.sf(abs(t_stat), len(diff) - 1))


def bonferroni(p_list, m: int, alpha: float = 0.05) -> list[bool]:
    """Reject decisions at level alpha corrected for m comparisons."""
    if m < 1:
        raise ValueError("m must be at least 1")
    return [p < alpha / m for p in p_list]


def selection_frequency(
    selected_sets: list[set[str] | frozenset[str] | tuple[str, ...]],
    all_features: list[str],
) -> dict[str, float]:
    """Percentage of fold-fits in which each feature was selected."""
    total = len(selected_sets)
    if total == 0:
        return {f: 0.0 for f in all_features}
    return {
        f: 100.0 * sum(1 for s in selected_sets if f in s) / total
        for f in all_features
    }


# ------------------------------------------------------------- cross-validation


class FittedPredictor(Protocol):
    selected_features: list[str]

    def predict_matrix(self, features: FeatureMatrix) -> np.ndarray: ...


FitFn = Callable[[FeatureMatrix, np.ndarray], FittedPredictor]


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 30
    folds: int = 2
    seed: int = 0
    correlation: str = "both"  # pearson | spearman | both
    target_metric: str = "AP"
    significance_alpha: float = 0.05

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.folds != 2:
            raise ValueError("the protocol is fixed to 2 folds")
        if not 0.0 < self.significance_alpha < 1.0:
            raise ValueError("significance_alpha must lie in (0, 1)")


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    fitted: FittedPredictor
    predictions: np.ndarray
    pearson_r: float
    spearman_rho: float
    degenerate: bool = False


@dataclass
class TrialResult:
    trial: int
    seed: int
    folds: list[FoldResult] = field(default_factory=list)
    error: str | None = None


def split_queries(n: int, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Random half split; with odd n the extra query goes to the first fold."""
    perm = rng.permutation(n)
    half = (n + 1) // 2
    return list(map(int, perm[:half])), list(map(int, perm[half:]))


def _fold_correlations(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, bool]:
    try:
        return pearson(pred, truth), spearman(pred, truth), False
    except ValueError:
        # degenerate folds (constant predictions or too few points) score 0
        return 0.0, 0.0, True


def cross_validate(
    features: FeatureMatrix,
    targets: np.ndarray,
    fit_fn: FitFn,
    config: EvalConfig,
) -> list[TrialResult]:
    """Repeated two-fold cross-validation of one prediction method.

    fit_fn receives only the training fold's features and targets and
    must return a fitted predictor exposing predict_matrix and
    selected_features. Training failures mark the trial as errored; the
    trial is kept in the output so nothing is silently dropped.
    Correlations are well defined only with >= 3 test queries (>= 6
    total); degenerate folds are flagged and score 0.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = len(features.query_ids)
    if len(targets) != n:
        raise ValueError("targets must align with feature rows")
    if n < 4:
        raise ValueError("cross-validation needs at least 4 queries")
    results: list[TrialResult] = []
    for trial in range(config.trials):
        seed = derive_trial_seed(config.seed, trial)
        rng = np.random.default_rng(seed)
        fold_a, fold_b = split_queries(n, rng)
        result = TrialResult(trial=trial, seed=seed)
        try:
            for fold_idx, (train_idx, test_idx) in enumerate(
                ((fold_a, fold_b), (fold_b, fold_a))
            ):
                train = features.select_rows(train_idx)
                test = features.select_rows(test_idx)
                fitted = fit_fn(train, targets[train_idx])
                pred = np.asarray(fitted.predict_matrix(test), dtype=np.float64)
                r, rho, degenerate = _fold_correlations(pred, targets[test_idx])
                result.folds.append(
                    FoldResult(
                        fold=fold_idx,
                        train_ids=[features.query_ids[i] for i in train_idx],
                        test_ids=[features.query_ids[i] for i in test_idx],
                        fitted=fitted,
                        predictions=pred,
                        pearson_r=r,
                        spearman_rho=rho,
                        degenerate=degenerate,
                    )
                )
        except Exception as exc:
            result.error = f"{type(exc).__name__}: {exc}"
            result.folds = []
            log.warning("trial %d failed: %s", trial, result.error)
        results.append(result)
    return results


@dataclass
class MethodSummary:
    pearson_fold_mean: float
    spearman_fold_mean: float
    pearson_trial_mean: float
    spearman_trial_mean: float
    pearson_by_trial: list[float]
    spearman_by_trial: list[float]
    avg_selected: float
    selection_frequency: dict[str, float]
    fold_count: int
    trials_failed: int
    selected_sets: list[tuple[str, ...]]


def summarize_trials(trials: list[TrialResult], all_features: list[str]) -> MethodSummary:
    """Means over fold-evaluations and over trial averages, plus selection
    statistics. Errored trials are counted, not averaged."""
    fold_r: list[float] = []
    fold_rho: list[float] = []
    trial_r: list[float] = []
    trial_rho: list[float] = []
    selected_sets: list[tuple[str, ...]] = []
    failed = 0
    for trial in trials:
        if trial.error is not None:
            failed += 1
            continue
        rs = [f.pearson_r for f in trial.folds]
        rhos = [f.spearman_rho for f in trial.folds]
        fold_r.extend(rs)
        fold_rho.extend(rhos)
        trial_r.append(float(np.mean(rs)))
        trial_rho.append(float(np.mean(rhos)))
        selected_sets.extend(tuple(f.fitted.selected_features) for f in trial.folds)
    return MethodSummary(
        pearson_fold_mean=float(np.mean(fold_r)) if fold_r else math.nan,
        spearman_fold_mean=float(np.mean(fold_rho)) if fold_rho else math.nan,
        pearson_trial_mean=float(np.mean(trial_r)) if trial_r else math.nan,
        spearman_trial_mean=float(np.mean(trial_rho)) if trial_rho else math.nan,
        pearson_by_trial=trial_r,
        spearman_by_trial=trial_rho,
        avg_selected=(
            float(np.mean([len(s) for s in selected_sets])) if selected_sets else math.nan
        ),
        selection_frequency=selection_frequency(selected_sets, all_features),
        fold_count=len(fold_r),
        trials_failed=failed,
        selected_sets=selected_sets,
    )


# ---------------------------------------------------------------------- report


@dataclass
class MethodMetricResult:
    method: str
    target_metric: str
    pearson_fold_mean: float
    spearman_fold_mean: float
    pearson_trial_mean: float
    spearman_trial_mean: float
    avg_selected: float
    selection_frequency: dict[str, float]
    fold_count: int
    trials_failed: int
    mean_inference_seconds: float | None = None


@dataclass
class SignificanceEntry:
    target_metric: str
    correlation: str
    method_a: str
    method_b: str
    p_value: float
    significant: bool


@dataclass
class EvalReport:
    entries: list[MethodMetricResult]
    significance: list[SignificanceEntry]
    trials: int
    seed: int
    alpha: float

    def to_dict(self, include_timing: bool = True) -> dict:
        entries = []
        for e in self.entries:
            d = {
                "method": e.method,
                "target_metric": e.target_metric,
                "pearson_fold_mean": e.pearson_fold_mean,
                "spearman_fold_mean": e.spearman_fold_mean,
                "pearson_trial_mean": e.pearson_trial_mean,
                "spearman_trial_mean": e.spearman_trial_mean,
                "avg_selected": e.avg_selected,
                "selection_frequency": e.selection_frequency,
                "fold_count": e.fold_count,
                "trials_failed": e.trials_failed,
            }
            if include_timing:
                d["mean_inference_seconds"] = e.mean_inference_seconds
            entries.append(d)
        return {
            "trials": self.trials,
            "seed": self.seed,
            "alpha": self.alpha,
            "results": entries,
            "significance": [
                {
                    "target_metric": s.target_metric,
                    "correlation": s.correlation,
                    "method_a": s.method_a,
                    "method_b": s.method_b,
                    "p_value": s.p_value,
                    "significant": s.significant,
                }
                for s in self.significance
            ],
        }

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def write_report_files(report: EvalReport, out_dir) -> None:
    """CSV views of the report: correlations, sparsity/timing, selection
    frequency, and significance, plus the JSON equivalent."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "correlations.csv", "w", encoding="utf-8") as fh:
        fh.write(
            "method,target_metric,pearson_fold_mean,spearman_fold_mean,"
            "pearson_trial_mean,spearman_trial_mean\n"
        )
        for e in report.entries:
            fh.write(
                f"{e.method},{e.target_metric},{e.pearson_fold_mean:.6f},"
                f"{e.spearman_fold_mean:.6f},{e.pearson_trial_mean:.6f},"
                f"{e.spearman_trial_mean:.6f}\n"
            )
    with open(out / "sparsity.csv", "w", encoding="utf-8") as fh:
        fh.write("method,target_metric,avg_selected,mean_inference_seconds\n")
        for e in report.entries:
            timing = (
                f"{e.mean_inference_seconds:.6f}"
                if e.mean_inference_seconds is not None
                else ""
            )
            fh.write(f"{e.method},{e.target_metric},{e.avg_selected:.4f},{timing}\n")
    with open(out / "selection_frequency.csv", "w", encoding="utf-8") as fh:
        fh.write("method,target_metric,feature,percentage\n")
        for e in report.entries:
            for feature, pct in e.selection_frequency.items():
                fh.write(f"{e.method},{e.target_metric},{feature},{pct:.2f}\n")
    with open(out / "significance.csv", "w", encoding="utf-8") as fh:
        fh.write("target_metric,correlation,method_a,method_b,p_value,significant\n")
        for s in report.significance:
            fh.write(
                f"{s.target_metric},{s.correlation},{s.method_a},{s.method_b},"
                f"{s.p_value:.6g},{int(s.significant)}\n"
            )
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
