"""Two-stage experiment orchestration.

Stage 1 collapses the family x depth feature variants into one column
per predictor family, fitted on training data only. Stage 2 fits a
linear model on the aggregated columns, optionally with feature
selection. run_experiment drives the whole protocol end to end from a
plain-text configuration file and writes every artifact under a run
directory.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    DEFAULT_STOPWORDS,
    Corpus,
    ingest_documents,
    ingest_qrels,
    ingest_queries,
    load_stopwords,
)
from .errors import QppError
from .evaluation import (
    EvalConfig,
    EvalReport,
    MethodMetricResult,
    SignificanceEntry,
    bonferroni,
    compute_targets,
    cross_validate,
    derive_trial_seed,
    paired_t_test,
    pearson,
    summarize_trials,
    write_report_files,
)
from .predictors import (
    FAMILIES,
    FeatureMatrix,
    FeatureVariantId,
    PredictorConfig,
    QueryArtifacts,
    build_matrix,
    compute_artifacts_batch,
    variant_value,
)
from .regression import DesignMatrix, LinearModel, fit_mle, predict_rows, save_model
from .retrieval import RetrievalConfig, write_run
from .stepwise import SelectionStrategy, SelectionTrace, select, write_trace

log = logging.getLogger(__name__)

METHODS = ("one_stage_full_LM", "two_stage_full_LM", "two_stage_AIC_FS")


@dataclass(frozen=True)
class AggregationMethod:
    kind: str = "pairwise_rank_linear"  # pairwise_rank_linear | best_variant_by_pearson
    iterations: int = 200
    learning_rate: float = 0.1
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pairwise_rank_linear", "best_variant_by_pearson"):
            raise ValueError(f"unknown aggregation method {self.kind!r}")
        if self.iterations < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("aggregation hyper-parameters must be positive")


def _family_columns(columns: list[str]) -> dict[str, list[str]]:
    by_family: dict[str, list[str]] = {f: [] for f in FAMILIES}
    for label in columns:
        variant = FeatureVariantId.parse(label)
        if variant.family not in by_family:
            raise ValueError(f"unknown predictor family in column {label!r}")
        by_family[variant.family].append(label)
    for family, labels in by_family.items():
        if not labels:
            raise ValueError(f"no variant columns for family {family}")
        labels.sort(key=lambda lb: FeatureVariantId.parse(lb).depth)
    return by_family


def pairwise_hinge_loss(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Mean hinge loss over ordered pairs: max(0, 1 - w.(x_i - x_j)) for y_i > y_j."""
    scores = X @ w
    loss = 0.0
    count = 0
    for i in range(len(y)):
        for j in range(len(y)):
            if y[i] > y[j]:
                loss += max(0.0, 1.0 - (scores[i] - scores[j]))
                count += 1
    return loss / count if count else 0.0


def _fit_pairwise_weights(
    X: np.ndarray, y: np.ndarray, method: AggregationMethod, family_seed: int
) -> np.ndarray:
    n, m = X.shape
    idx_i, idx_j = np.nonzero(y[:, None] > y[None, :])
    if len(idx_i) == 0:
        return np.full(m, 1.0 / m)
    diffs = X[idx_i] - X[idx_j]
    rng = np.random.default_rng(family_seed)
    w = np.full(m, 1.0 / m)
    batch = min(method.batch_size, len(diffs))
    for _ in range(method.iterations):
        take = rng.choice(len(diffs), size=batch, replace=False)
        d = diffs[take]
        violated = d @ w < 1.0
        if violated.any():
            w = w + method.learning_rate * d[violated].mean(axis=0)
    return w


@dataclass
class VariantAggregator:
    """Frozen stage-1 transform: one output column per predictor family."""

    method_kind: str
    family_variants: dict[str, list[str]]
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    chosen: dict[str, str] = field(default_factory=dict)

    def transform(self, features: FeatureMatrix) -> FeatureMatrix:
        cols = []
        for family in FAMILIES:
            labels = self.family_variants[family]
            block = np.column_stack([features.column(lb) for lb in labels])
            if self.method_kind == "pairwise_rank_linear":
                cols.append(block @ self.weights[family])
            else:
                cols.append(features.column(self.chosen[family]))
        return FeatureMatrix(
            list(features.query_ids), list(FAMILIES), np.column_stack(cols)
        )

    def transform_row(self, raw_row: dict[str, float]) -> dict[str, float]:
        out: dict[str, float] = {}
        for family in FAMILIES:
            labels = self.family_variants[family]
            if self.method_kind == "pairwise_rank_linear":
                vec = np.array([raw_row[lb] for lb in labels])
                out[family] = float(vec @ self.weights[family])
            else:
                out[family] = raw_row[self.chosen[family]]
        return out

    def needed_variants(self, families: list[str]) -> list[str]:
        """Raw variant columns required to compute the given family columns."""
        needed: list[str] = []
        for family in families:
            if self.method_kind == "pairwise_rank_linear":
                needed.extend(self.family_variants[family])
            else:
                needed.append(self.chosen[family])
        return needed


def fit_aggregator(
    features: FeatureMatrix, targets: np.ndarray, method: AggregationMethod
) -> VariantAggregator:
    """Learn the stage-1 per-family combination on training data only."""
    targets = np.asarray(targets, dtype=np.float64)
    by_family = _family_columns(features.columns)
    agg = VariantAggregator(method_kind=method.kind, family_variants=by_family)
    for fam_idx, family in enumerate(FAMILIES):
        labels = by_family[family]
        block = np.column_stack([features.column(lb) for lb in labels])
        variances = block.var(axis=0)
        if np.all(variances == 0.0):
            log.warning(
                "family %s has zero variance on the training fold; "
                "passing through %s",
                family,
                labels[0],
            )
            if method.kind == "pairwise_rank_linear":
                w = np.zeros(len(labels))
                w[0] = 1.0
                agg.weights[family] = w
            else:
                agg.chosen[family] = labels[0]
            continue
        if method.kind == "pairwise_rank_linear":
            agg.weights[family] = _fit_pairwise_weights(
                block, targets, method, derive_family_seed(method.seed, fam_idx)
            )
        else:
            best_label = None
            best_abs_r = -1.0
            for lb, var in zip(labels, variances):
                if var == 0.0:
                    continue
                r = abs(pearson(features.column(lb), targets))
                if r > best_abs_r + 1e-15:
                    best_abs_r = r
                    best_label = lb
            agg.chosen[family] = best_label
    return agg


def derive_family_seed(seed: int, family_index: int) -> int:
    return derive_trial_seed(seed, family_index)


def aggregate_variants(
    features: FeatureMatrix, targets: np.ndarray, method: AggregationMethod
) -> tuple[FeatureMatrix, VariantAggregator]:
    """Stage 1: collapse variant columns to one column per family.

    Returns the transformed matrix together with the frozen aggregator
    so the same weights can be applied to held-out folds.
    """
    agg = fit_aggregator(features, targets, method)
    return agg.transform(features), agg


# ------------------------------------------------------------------ methods


@dataclass
class FittedLinear:
    """A trained prediction method: optional stage-1 transform + linear model."""

    model: LinearModel
    aggregator: VariantAggregator | None = None
    trace: SelectionTrace | None = None

    @property
    def selected_features(self) -> list[str]:
        return list(self.model.feature_labels)

    def predict_matrix(self, features: FeatureMatrix) -> np.ndarray:
        if self.aggregator is not None:
            features = self.aggregator.transform(features)
        return predict_rows(self.model, features.columns, features.values)

    def predict_raw_row(self, raw_row: dict[str, float]) -> float:
        from .regression import predict

        row = (
            self.aggregator.transform_row(raw_row)
            if self.aggregator is not None
            else raw_row
        )
        return predict(self.model, row)

    def needed_variants(self) -> list[str]:
        if self.aggregator is None:
            return self.selected_features
        return self.aggregator.needed_variants(self.selected_features)


def make_fit_fn(
    method: str,
    aggregation: AggregationMethod,
    strategy: SelectionStrategy,
):
    """Build the training closure cross_validate drives for one method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")

    def fit(train_features: FeatureMatrix, train_targets: np.ndarray) -> FittedLinear:
        if method == "one_stage_full_LM":
            design = DesignMatrix(
                tuple(train_features.columns), train_features.values, train_targets
            )
            return FittedLinear(model=fit_mle(design, list(train_features.columns)))
        transformed, agg = aggregate_variants(train_features, train_targets, aggregation)
        design = DesignMatrix(
            tuple(transformed.columns), transformed.values, train_targets
        )
        if method == "two_stage_full_LM":
            return FittedLinear(
                model=fit_mle(design, list(transformed.columns)), aggregator=agg
            )
        model, trace = select(design, list(transformed.columns), strategy)
        return FittedLinear(model=model, aggregator=agg, trace=trace)

    return fit


# ----------------------------------------------------------------- experiment


@dataclass
class ExperimentConfig:
    corpus_path: str
    queries_path: str
    qrels_path: str
    corpus_format: str = "tsv"
    stopwords_path: str | None = None
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    depths: tuple[int, ...] = (10, 50, 100, 200, 500, 1000)
    sw1_cap: float = 10.0
    aggregation: AggregationMethod = field(default_factory=AggregationMethod)
    strategy: SelectionStrategy = field(default_factory=SelectionStrategy)
    trials: int = 30
    seed: int = 0
    alpha: float = 0.05
    metrics: tuple[str, ...] = ("AP", "NDCG")
    methods: tuple[str, ...] = METHODS
    threads: int = 1
    run_tag: str = "qppkit"


_CONFIG_KEYS = {
    "corpus", "corpus_format", "queries", "qrels", "stopwords",
    "mu", "k", "fb_docs", "fb_terms", "rm_lambda",
    "depths", "sw1_cap",
    "aggregation", "agg_iterations", "agg_learning_rate", "agg_batch_size",
    "selection", "p_threshold", "selection_start",
    "trials", "seed", "alpha", "metrics", "methods", "threads", "run_tag",
}

_STRATEGY_NAMES = {
    "stepwise-aic": "stepwise_aic",
    "forward-p": "forward_pvalue",
    "backward-p": "backward_pvalue",
}


def load_experiment_config(path: str) -> ExperimentConfig:
    """Parse a `key = value` configuration file (# starts a comment)."""
    raw: dict[str, str] = {}
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise QppError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise QppError(f"{path}:{lineno}: unknown configuration key {key!r}")
            raw[key] = value
    for required in ("corpus", "queries", "qrels"):
        if required not in raw:
            raise QppError(f"{path}: missing required key {required!r}")

    def resolve(p: str) -> str:
        candidate = Path(p)
        if not candidate.is_absolute():
            candidate = base / candidate
        if not candidate.exists():
            raise QppError(f"{path}: referenced file does not exist: {candidate}")
        return str(candidate)

    retrieval = RetrievalConfig(
        mu=float(raw.get("mu", 1000.0)),
        k=int(raw.get("k", 1000)),
        fb_docs=int(raw.get("fb_docs", 10)),
        fb_terms=int(raw.get("fb_terms", 20)),
        rm_interpolation=float(raw.get("rm_lambda", 0.5)),
    )
    aggregation = AggregationMethod(
        kind=raw.get("aggregation", "pairwise_rank_linear"),
        iterations=int(raw.get("agg_iterations", 200)),
        learning_rate=float(raw.get("agg_learning_rate", 0.1)),
        batch_size=int(raw.get("agg_batch_size", 256)),
        seed=int(raw.get("seed", 0)),
    )
    strategy = SelectionStrategy(
        kind=_STRATEGY_NAMES.get(raw.get("selection", "stepwise-aic"), raw.get("selection", "stepwise_aic")),
        p_threshold=float(raw.get("p_threshold", 0.05)),
        start=raw.get("selection_start", "full"),
    )
    methods = tuple(
        m.strip() for m in raw.get("methods", ",".join(METHODS)).split(",") if m.strip()
    )
    if not methods:
        raise QppError(f"{path}: method roster is empty")
    for m in methods:
        if m not in METHODS:
            raise QppError(f"{path}: unknown method {m!r}")
    metrics = tuple(
        m.strip().upper() for m in raw.get("metrics", "ap,ndcg").split(",") if m.strip()
    )
    return ExperimentConfig(
        corpus_path=resolve(raw["corpus"]),
        queries_path=resolve(raw["queries"]),
        qrels_path=resolve(raw["qrels"]),
        corpus_format=raw.get("corpus_format", "tsv"),
        stopwords_path=resolve(raw["stopwords"]) if "stopwords" in raw else None,
        retrieval=retrieval,
        depths=tuple(int(d) for d in raw.get("depths", "10,50,100,200,500,1000").split(",")),
        sw1_cap=float(raw.get("sw1_cap", 10.0)),
        aggregation=aggregation,
        strategy=strategy,
        trials=int(raw.get("trials", 30)),
        seed=int(raw.get("seed", 0)),
        alpha=float(raw.get("alpha", 0.05)),
        metrics=metrics,
        methods=methods,
        threads=int(raw.get("threads", 1)),
        run_tag=raw.get("run_tag", "qppkit"),
    )


def evaluate_methods(
    features: FeatureMatrix,
    targets_by_metric: dict[str, np.ndarray],
    methods: list[str],
    aggregation: AggregationMethod,
    strategy: SelectionStrategy,
    eval_config: EvalConfig,
    timing_fn=None,
) -> EvalReport:
    """Cross-validate every roster method on every target metric.

    timing_fn, when given, maps (method, metric, trials) to a mean
    per-query inference time in seconds.
    """
    entries: list[MethodMetricResult] = []
    by_trial: dict[tuple[str, str, str], list[float]] = {}
    for metric, targets in targets_by_metric.items():
        for method in methods:
            fit_fn = make_fit_fn(method, aggregation, strategy)
            trials = cross_validate(features, targets, fit_fn, eval_config)
            freq_features = (
                list(features.columns) if method == "one_stage_full_LM" else list(FAMILIES)
            )
            summary = summarize_trials(trials, freq_features)
            entries.append(
                MethodMetricResult(
                    method=method,
                    target_metric=metric,
                    pearson_fold_mean=summary.pearson_fold_mean,
                    spearman_fold_mean=summary.spearman_fold_mean,
                    pearson_trial_mean=summary.pearson_trial_mean,
                    spearman_trial_mean=summary.spearman_trial_mean,
                    avg_selected=summary.avg_selected,
                    selection_frequency=summary.selection_frequency,
                    fold_count=summary.fold_count,
                    trials_failed=summary.trials_failed,
                    mean_inference_seconds=(
                        timing_fn(method, metric, trials) if timing_fn else None
                    ),
                )
            )
            by_trial[(metric, "pearson", method)] = summary.pearson_by_trial
            by_trial[(metric, "spearman", method)] = summary.spearman_by_trial

    significance: list[SignificanceEntry] = []
    comparisons: list[tuple[str, str, str, str, float]] = []
    for metric in targets_by_metric:
        for corr in ("pearson", "spearman"):
            for i, method_a in enumerate(methods):
                for method_b in methods[i + 1 :]:
                    a = by_trial[(metric, corr, method_a)]
                    b = by_trial[(metric, corr, method_b)]
                    m = min(len(a), len(b))
                    if m < 2:
                        continue
                    p = paired_t_test(a[:m], b[:m])
                    comparisons.append((metric, corr, method_a, method_b, p))
    if comparisons:
        decisions = bonferroni(
            [c[4] for c in comparisons], len(comparisons), eval_config.significance_alpha
        )
        for (metric, corr, ma, mb, p), sig in zip(comparisons, decisions):
            significance.append(SignificanceEntry(metric, corr, ma, mb, p, sig))
    return EvalReport(
        entries=entries,
        significance=significance,
        trials=eval_config.trials,
        seed=eval_config.seed,
        alpha=eval_config.significance_alpha,
    )


def time_inference(
    fitted: FittedLinear,
    artifacts: list[QueryArtifacts],
    corpus: Corpus,
    retrieval_config: RetrievalConfig,
    predictor_config: PredictorConfig,
) -> list[float]:
    """Wall-clock seconds per query: compute only the variants the fitted
    model needs, then predict."""
    needed = fitted.needed_variants()
    variants = [FeatureVariantId.parse(label) for label in needed]
    times: list[float] = []
    for art in artifacts:
        start = time.perf_counter()
        raw_row = {
            v.label: variant_value(
                v.family, v.depth, art, corpus, retrieval_config, predictor_config
            )
            for v in variants
        }
        fitted.predict_raw_row(raw_row)
        times.append(time.perf_counter() - start)
    return times


def run_experiment(config: ExperimentConfig, out_dir: str) -> EvalReport:
    """Execute the full protocol and write all artifacts under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "ingest"
    try:
        corpus = ingest_documents(config.corpus_path, config.corpus_format)
        queries = ingest_queries(config.queries_path)
        qrels = ingest_qrels(config.qrels_path)
        stopwords = (
            load_stopwords(config.stopwords_path)
            if config.stopwords_path
            else DEFAULT_STOPWORDS
        )
        predictor_config = PredictorConfig(
            depths=config.depths, stopwords=stopwords, sw1_cap=config.sw1_cap
        )

        stage = "retrieve"
        artifacts = compute_artifacts_batch(
            queries, corpus, config.retrieval, config.threads
        )
        runs_dir = out / "runs"
        runs_dir.mkdir(exist_ok=True)
        write_run(
            [a.ranked for a in artifacts],
            corpus,
            str(runs_dir / "original.run"),
            config.run_tag,
        )

        stage = "targets"
        ranked_by_qid = {a.query.id: a.ranked for a in artifacts}
        targets_by_metric: dict[str, dict[str, float]] = {}
        excluded_all: set[str] = set()
        for metric in config.metrics:
            targets, excluded = compute_targets(ranked_by_qid, qrels, corpus, metric)
            targets_by_metric[metric] = targets
            excluded_all.update(excluded)
        kept_queries = [q for q in queries if q.id not in excluded_all]
        kept_artifacts = [a for a in artifacts if a.query.id not in excluded_all]
        if len(kept_queries) < 4:
            raise QppError("fewer than 4 queries with relevance judgments")

        stage = "features"
        features = build_matrix(
            kept_queries,
            corpus,
            config.retrieval,
            predictor_config,
            threads=config.threads,
            artifacts=kept_artifacts,
        )
        features.to_csv(str(out / "features.csv"))
        target_vectors: dict[str, np.ndarray] = {}
        for metric, targets in targets_by_metric.items():
            vec = np.array([targets[q.id] for q in kept_queries])
            target_vectors[metric] = vec
            with open(out / f"targets_{metric.lower()}.csv", "w", encoding="utf-8") as fh:
                fh.write(f"qid,{metric.lower()}\n")
                for q, v in zip(kept_queries, vec):
                    fh.write(f"{q.id},{v:.9g}\n")

        stage = "evaluate"
        eval_config = EvalConfig(
            trials=config.trials, seed=config.seed, significance_alpha=config.alpha
        )
        artifacts_by_qid = {a.query.id: a for a in kept_artifacts}

        def timing_fn(method: str, metric: str, trials) -> float:
            times: list[float] = []
            for trial in trials:
                if trial.error is not None:
                    continue
                for fold in trial.folds:
                    fold_artifacts = [artifacts_by_qid[qid] for qid in fold.test_ids]
                    times.extend(
                        time_inference(
                            fold.fitted,
                            fold_artifacts,
                            corpus,
                            config.retrieval,
                            predictor_config,
                        )
                    )
            return float(np.mean(times)) if times else float("nan")

        report = evaluate_methods(
            features,
            target_vectors,
            list(config.methods),
            config.aggregation,
            config.strategy,
            eval_config,
            timing_fn=timing_fn,
        )

        stage = "export"
        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
        for metric, vec in target_vectors.items():
            for method in config.methods:
                fit_fn = make_fit_fn(method, config.aggregation, config.strategy)
                fitted = fit_fn(features, vec)
                save_model(
                    fitted.model, str(models_dir / f"{method}_{metric.lower()}.json")
                )
                if fitted.trace is not None:
                    write_trace(
                        fitted.trace,
                        str(models_dir / f"{method}_{metric.lower()}.trace.jsonl"),
                    )
        write_report_files(report, out)
        return report
    except QppError:
        raise
    except Exception as exc:
        raise QppError(f"experiment failed during stage {stage!r}: {exc}") from exc
