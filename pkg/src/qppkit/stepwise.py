"""Iterative feature-subset search: stepwise AIC and p-value strategies.

The stepwise search starts from the complete model (configurable) and at
each step fits every model reachable by removing one active feature or
re-adding a previously removed one, keeping the candidate with the
lowest AIC if it strictly improves on the current model. Forward and
backward searches use per-coefficient p-values with a threshold instead.

Candidate ties are broken by preferring removals over additions, then
the lexicographically smallest feature label. Candidate fits that fail
(collinearity, too few rows) are recorded with a failure marker and
treated as AIC = +inf.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import CollinearityError
from .regression import DesignMatrix, LinearModel, fit_mle


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "stepwise_aic"  # stepwise_aic | forward_pvalue | backward_pvalue
    p_threshold: float = 0.05
    start: str = "full"  # full | empty (stepwise_aic only)

    def __post_init__(self):
        if self.kind not in ("stepwise_aic", "forward_pvalue", "backward_pvalue"):
            raise ValueError(f"unknown selection strategy {self.kind!r}")
        if not 0.0 < self.p_threshold < 1.0:
            raise ValueError("p_threshold must lie in (0, 1)")
        if self.start not in ("full", "empty"):
            raise ValueError("start must be 'full' or 'empty'")


@dataclass
class CandidateEval:
    action: str  # add | remove
    feature: str
    aic: float | None
    p_value: float | None = None
    failed: bool = False
    error: str | None = None

    def sort_key(self):
        aic = self.aic if self.aic is not None and not self.failed else math.inf
        return (aic, 0 if self.action == "remove" else 1, self.feature)


@dataclass
class SelectionStep:
    action: str
    feature: str
    aic_before: float
    aic_after: float
    candidates: list[CandidateEval] = field(default_factory=list)


@dataclass
class SelectionTrace:
    steps: list[SelectionStep]
    initial_model: LinearModel
    final_model: LinearModel

    def selected(self) -> tuple[str, ...]:
        return self.final_model.feature_labels


def _try_fit(design: DesignMatrix, columns: list[str]) -> tuple[LinearModel | None, str | None]:
    try:
        return fit_mle(design, columns), None
    except (CollinearityError, ValueError) as exc:
        return None, str(exc)


def select_stepwise_aic(
    design: DesignMatrix,
    all_features: list[str],
    start: str = "full",
) -> tuple[LinearModel, SelectionTrace]:
    """Greedy add/remove search that strictly decreases AIC until stuck.

    Returns the final fitted model and the full trace of accepted steps
    with every candidate evaluation. The initial fit must succeed; its
    errors propagate.
    """
    features = list(all_features)
    current = list(features) if start == "full" else []
    model = fit_mle(design, current)
    initial_model = model
    steps: list[SelectionStep] = []
    while True:
        active = set(current)
        candidates: list[CandidateEval] = []
        fits: dict[tuple[str, str], LinearModel] = {}
        for feature in sorted(active):
            trial = [f for f in current if f != feature]
            fitted, err = _try_fit(design, trial)
            if fitted is None:
                candidates.append(
                    CandidateEval("remove", feature, None, failed=True, error=err)
                )
            else:
                fits[("remove", feature)] = fitted
                candidates.append(CandidateEval("remove", feature, fitted.aic))
        for feature in sorted(set(features) - active):
            trial = current + [feature]
            fitted, err = _try_fit(design, trial)
            if fitted is None:
                candidates.append(
                    CandidateEval("add", feature, None, failed=True, error=err)
                )
            else:
                fits[("add", feature)] = fitted
                candidates.append(CandidateEval("add", feature, fitted.aic))
        viable = [c for c in candidates if not c.failed]
        if not viable:
            break
        best = min(viable, key=CandidateEval.sort_key)
        if best.aic >= model.aic:
            break
        steps.append(
            SelectionStep(best.action, best.feature, model.aic, best.aic, candidates)
        )
        model = fits[(best.action, best.feature)]
        if best.action == "remove":
            current = [f for f in current if f != best.feature]
        else:
            current = current + [best.feature]
    return model, SelectionTrace(steps, initial_model, model)


def select_forward_pvalue(
    design: DesignMatrix,
    all_features: list[str],
    threshold: float = 0.05,
) -> tuple[LinearModel, SelectionTrace]:
    """Repeatedly add the candidate with the smallest fitted p-value.

    Stops when the best candidate's p-value is not strictly below the
    threshold.
    """
    features = list(all_features)
    current: list[str] = []
    model = fit_mle(design, current)
    initial_model = model
    steps: list[SelectionStep] = []
    while True:
        remaining = sorted(set(features) - set(current))
        if not remaining:
            break
        candidates: list[CandidateEval] = []
        fits: dict[str, LinearModel] = {}
        for feature in remaining:
            fitted, err = _try_fit(design, current + [feature])
            if fitted is None:
                candidates.append(
                    CandidateEval("add", feature, None, failed=True, error=err)
                )
                continue
            p_val = fitted.coef_stats[fitted.feature_labels.index(feature)].p_value
            fits[feature] = fitted
            candidates.append(CandidateEval("add", feature, fitted.aic, p_value=p_val))
        viable = [c for c in candidates if not c.failed]
        if not viable:
            break
        best = min(viable, key=lambda c: (c.p_value, c.feature))
        if not best.p_value < threshold:
            break
        steps.append(
            SelectionStep("add", best.feature, model.aic, fits[best.feature].aic, candidates)
        )
        model = fits[best.feature]
        current = current + [best.feature]
    return model, SelectionTrace(steps, initial_model, model)


def select_backward_pvalue(
    design: DesignMatrix,
    all_features: list[str],
    threshold: float = 0.05,
) -> tuple[LinearModel, SelectionTrace]:
    """Repeatedly drop the feature with the highest p-value in the fit.

    Starts from the complete model and stops once every remaining
    p-value is at or below the threshold.
    """
    current = list(all_features)
    model = fit_mle(design, current)
    initial_model = model
    steps: list[SelectionStep] = []
    while current:
        by_p = [
            CandidateEval("remove", label, None, p_value=stat.p_value)
            for label, stat in zip(model.feature_labels, model.coef_stats)
        ]
        worst_p = max(c.p_value for c in by_p)
        worst_feature = min(c.feature for c in by_p if c.p_value == worst_p)
        if not worst_p > threshold:
            break
        trial = [f for f in current if f != worst_feature]
        fitted, err = _try_fit(design, trial)
        if fitted is None:
            break
        steps.append(
            SelectionStep("remove", worst_feature, model.aic, fitted.aic, by_p)
        )
        model = fitted
        current = trial
    return model, SelectionTrace(steps, initial_model, model)


def select(
    design: DesignMatrix,
    all_features: list[str],
    strategy: SelectionStrategy,
) -> tuple[LinearModel, SelectionTrace]:
    if strategy.kind == "stepwise_aic":
        return select_stepwise_aic(design, all_features, start=strategy.start)
    if strategy.kind == "forward_pvalue":
        return select_forward_pvalue(design, all_features, strategy.p_threshold)
    return select_backward_pvalue(design, all_features, strategy.p_threshold)


def write_trace(trace: SelectionTrace, path: str) -> None:
    """Export the trace as JSON lines, one accepted step per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for step in trace.steps:
            record = asdict(step)
            for cand in record["candidates"]:
                if cand["aic"] is not None and not math.isfinite(cand["aic"]):
                    cand["aic"] = None
            fh.write(json.dumps(record) + "\n")
