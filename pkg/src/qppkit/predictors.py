"""Post-retrieval query performance predictors and the feature matrix.

Eight predictor families are computed from one base retrieval and one
expanded retrieval per query, at each configured feedback depth n:

  QFDOC    overlap of the original and expanded document rankings
  QFTERM   coverage of the expansion terms by the top documents
  QFJSD    Jensen-Shannon divergence between the two lists' term models
  CLARITY  KL divergence of the feedback relevance model from the corpus
  WIG      gap between mean top-document scores and the collection score
  NQC      normalized standard deviation of the top scores
  UQC      unnormalized standard deviation of the top scores
  SW1      stopword / non-stopword token ratio in the top documents

Information-theoretic quantities (QFJSD, CLARITY) use base-2 logs;
retrieval scores are natural-log likelihoods.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Query
from .errors import PredictorError
from .retrieval import (
    ExpandedQuery,
    RankedList,
    RetrievalConfig,
    collection_score,
    expand_query,
    floored_collection_prob,
    relevance_model,
    retrieve,
    retrieve_expanded,
)

FAMILIES = ("QFDOC", "QFTERM", "QFJSD", "CLARITY", "WIG", "NQC", "UQC", "SW1")

DEFAULT_DEPTHS = (10, 50, 100, 200, 500, 1000)


def qf_cut(n: int) -> int:
    """Rank cutoff for the QF-family overlaps: min(50, n)."""
    return min(50, n)


@dataclass(frozen=True)
class PredictorConfig:
    depths: tuple[int, ...] = DEFAULT_DEPTHS
    stopwords: frozenset[str] = frozenset()
    sw1_cap: float = 10.0

    def __post_init__(self):
        if not self.depths:
            raise ValueError("at least one feedback depth is required")
        if any(d <= 0 for d in self.depths):
            raise ValueError("feedback depths must be positive")
        if list(self.depths) != sorted(set(self.depths)):
            raise ValueError("feedback depths must be strictly increasing")
        if self.sw1_cap <= 0:
            raise ValueError("sw1_cap must be positive")


@dataclass(frozen=True)
class FeatureVariantId:
    family: str
    depth: int

    @property
    def label(self) -> str:
        return f"{self.family}@{self.depth}"

    @classmethod
    def parse(cls, label: str) -> "FeatureVariantId":
        family, _, depth = label.partition("@")
        return cls(family=family, depth=int(depth))


def _require_entries(ranked: RankedList) -> None:
    if len(ranked) < 1:
        raise ValueError("predictor needs a non-empty ranked list")


def qf_doc(orig_list: RankedList, exp_list: RankedList, n: int) -> float:
    """Fraction of shared documents in the top-QFcut(n) of both rankings.

    If a list is shorter than the cutoff, the denominator is bounded by
    the shorter list's length. Symmetric in its two arguments.
    """
    _require_entries(orig_list)
    _require_entries(exp_list)
    cut = qf_cut(n)
    denom = min(cut, len(orig_list), len(exp_list))
    orig = set(orig_list.doc_ids(cut))
    expd = set(exp_list.doc_ids(cut))
    return len(orig & expd) / denom


def _top_doc_terms(ranked: RankedList, corpus: Corpus, m: int) -> set[str]:
    terms: set[str] = set()
    for doc_id in ranked.doc_ids(m):
        terms.update(corpus.doc(doc_id).term_freqs)
    return terms


def qf_term(
    orig_list: RankedList, expanded: ExpandedQuery, corpus: Corpus, n: int
) -> float:
    """Fraction of expansion terms occurring in the top-QFcut(n) documents."""
    _require_entries(orig_list)
    support = set(expanded.weights)
    if not support:
        raise ValueError("expanded query has empty support")
    doc_terms = _top_doc_terms(orig_list, corpus, qf_cut(n))
    return len(doc_terms & support) / len(support)


def _concat_language_model(
    ranked: RankedList, corpus: Corpus, m: int
) -> dict[str, float]:
    counts: Counter[str] = Counter()
    for doc_id in ranked.doc_ids(m):
        counts.update(corpus.doc(doc_id).term_freqs)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("top documents contain no tokens")
    return {t: c / total for t, c in counts.items()}


def jensen_shannon(p: dict[str, float], q: dict[str, float]) -> float:
    """Base-2 Jensen-Shannon divergence between two distributions; in [0, 1]."""
    jsd = 0.0
    for t in p.keys() | q.keys():
        pt = p.get(t, 0.0)
        qt = q.get(t, 0.0)
        m = 0.5 * (pt + qt)
        if pt > 0.0:
            jsd += 0.5 * pt * math.log2(pt / m)
        if qt > 0.0:
            jsd += 0.5 * qt * math.log2(qt / m)
    return jsd


def qf_jsd(
    orig_list: RankedList, exp_list: RankedList, corpus: Corpus, n: int
) -> float:
    """Divergence between the term models of the two top-QFcut(n) lists.

    Each model is the maximum-likelihood unigram distribution of the
    concatenated top documents. Higher values mean more query drift.
    """
    _require_entries(orig_list)
    _require_entries(exp_list)
    cut = qf_cut(n)
    p = _concat_language_model(orig_list, corpus, cut)
    q = _concat_language_model(exp_list, corpus, cut)
    return jensen_shannon(p, q)


def clarity(
    orig_list: RankedList, corpus: Corpus, config: RetrievalConfig, n: int
) -> float:
    """KL divergence (bits) of the top-n relevance model from the corpus model.

    The relevance model is the RM1 estimate over the top-n documents,
    untruncated over their joint vocabulary.
    """
    _require_entries(orig_list)
    entries = orig_list.entries[:n]
    support = frozenset(_top_doc_terms(orig_list, corpus, n))
    theta_r = relevance_model(entries, corpus, config, support=support)
    kl = 0.0
    for term, p_r in theta_r.items():
        if p_r > 0.0:
            kl += p_r * math.log2(p_r / floored_collection_prob(corpus, term))
    return kl


def wig(
    orig_list: RankedList,
    query: Query,
    corpus: Corpus,
    config: RetrievalConfig,
    n: int,
) -> float:
    """Weighted information gain of the top-n scores over the collection score.

    (mean top-n score - collection score) / sqrt(|q|), with the collection
    scored as a single document.
    """
    _require_entries(orig_list)
    top = orig_list.scores(n)
    base = collection_score(query, corpus, config)
    return (float(top.mean()) - base) / math.sqrt(len(query.terms))


def uqc(orig_list: RankedList, n: int) -> float:
    """Population standard deviation of the top-n retrieval scores."""
    _require_entries(orig_list)
    return float(np.std(orig_list.scores(n)))


def nqc(
    orig_list: RankedList,
    query: Query,
    corpus: Corpus,
    config: RetrievalConfig,
    n: int,
) -> float:
    """Top-n score standard deviation normalized by |collection score|."""
    base = collection_score(query, corpus, config)
    if base == 0.0:
        raise ValueError("collection score is zero; NQC undefined")
    return uqc(orig_list, n) / abs(base)


def sw1(
    orig_list: RankedList, corpus: Corpus, config: PredictorConfig, n: int
) -> float:
    """Mean stopword / non-stopword token ratio over the top-n documents.

    Documents with no non-stopword tokens contribute sw1_cap (or 0.0 when
    they are empty).
    """
    _require_entries(orig_list)
    ratios = []
    for doc_id in orig_list.doc_ids(n):
        doc = corpus.doc(doc_id)
        stop = sum(tf for t, tf in doc.term_freqs.items() if t in config.stopwords)
        non_stop = doc.length - stop
        if non_stop > 0:
            ratios.append(stop / non_stop)
        else:
            ratios.append(config.sw1_cap if stop > 0 else 0.0)
    return float(np.mean(ratios))


@dataclass
class QueryArtifacts:
    """Retrieval products reused by every predictor at every depth."""

    query: Query
    ranked: RankedList
    expanded: ExpandedQuery
    expanded_ranked: RankedList


def compute_artifacts(
    query: Query, corpus: Corpus, config: RetrievalConfig
) -> QueryArtifacts:
    ranked = retrieve(query, corpus, config)
    expanded = expand_query(query, ranked, corpus, config)
    expanded_ranked = retrieve_expanded(expanded, corpus, config)
    return QueryArtifacts(query, ranked, expanded, expanded_ranked)


def variant_value(
    family: str,
    depth: int,
    artifacts: QueryArtifacts,
    corpus: Corpus,
    retrieval_config: RetrievalConfig,
    predictor_config: PredictorConfig,
) -> float:
    if family == "QFDOC":
        return qf_doc(artifacts.ranked, artifacts.expanded_ranked, depth)
    if family == "QFTERM":
        return qf_term(artifacts.ranked, artifacts.expanded, corpus, depth)
    if family == "QFJSD":
        return qf_jsd(artifacts.ranked, artifacts.expanded_ranked, corpus, depth)
    if family == "CLARITY":
        return clarity(artifacts.ranked, corpus, retrieval_config, depth)
    if family == "WIG":
        return wig(artifacts.ranked, artifacts.query, corpus, retrieval_config, depth)
    if family == "NQC":
        return nqc(artifacts.ranked, artifacts.query, corpus, retrieval_config, depth)
    if family == "UQC":
        return uqc(artifacts.ranked, depth)
    if family == "SW1":
        return sw1(artifacts.ranked, corpus, predictor_config, depth)
    raise ValueError(f"unknown predictor family {family!r}")


@dataclass
class FeatureMatrix:
    """Dense queries x features matrix with labeled rows and columns."""

    query_ids: list[str]
    columns: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.query_ids), len(self.columns)):
            raise ValueError("matrix shape does not match its labels")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.columns.index(label)]

    def select_rows(self, indices: list[int]) -> "FeatureMatrix":
        return FeatureMatrix(
            [self.query_ids[i] for i in indices],
            list(self.columns),
            self.values[indices, :],
        )

    def select_columns(self, labels: list[str]) -> "FeatureMatrix":
        idx = [self.columns.index(label) for label in labels]
        return FeatureMatrix(list(self.query_ids), list(labels), self.values[:, idx])

    def row_dict(self, i: int) -> dict[str, float]:
        return dict(zip(self.columns, (float(v) for v in self.values[i, :])))

    def to_csv(self, path: str) -> None:
        """Write `qid,<column>,...` with 9 significant digits per value."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("qid," + ",".join(self.columns) + "\n")
            for qid, row in zip(self.query_ids, self.values):
                fh.write(qid + "," + ",".join(f"{v:.9g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "FeatureMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if not header or header[0] != "qid":
                raise ValueError(f"{path}: first CSV column must be 'qid'")
            columns = header[1:]
            query_ids = []
            rows = []
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(header):
                    raise ValueError(f"{path}: row width does not match header")
                query_ids.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        values = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(columns)))
        return cls(query_ids, columns, values)


def variant_labels(depths: tuple[int, ...]) -> list[str]:
    return [FeatureVariantId(f, d).label for f in FAMILIES for d in depths]


def build_matrix(
    queries: list[Query],
    corpus: Corpus,
    retrieval_config: RetrievalConfig,
    predictor_config: PredictorConfig,
    threads: int = 1,
    artifacts: list[QueryArtifacts] | None = None,
) -> FeatureMatrix:
    """Compute every family x depth feature for every query.

    One retrieval and one expansion per query are shared across depths.
    Any cell failure aborts with the query and column identified.
    """
    depths = predictor_config.depths
    if retrieval_config.k < max(depths):
        raise ValueError(
            f"retrieval depth k={retrieval_config.k} is below the largest "
            f"feedback depth {max(depths)}"
        )
    if artifacts is None:
        artifacts = compute_artifacts_batch(queries, corpus, retrieval_config, threads)
    columns = variant_labels(depths)
    values = np.zeros((len(queries), len(columns)))

    def fill_row(i: int) -> None:
        art = artifacts[i]
        col = 0
        for family in FAMILIES:
            for depth in depths:
                try:
                    values[i, col] = variant_value(
                        family, depth, art, corpus, retrieval_config, predictor_config
                    )
                except Exception as exc:
                    raise PredictorError(
                        f"query {art.query.id!r}, column {family}@{depth}: {exc}"
                    ) from exc
                col += 1

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(len(queries))))
    else:
        for i in range(len(queries)):
            fill_row(i)
    return FeatureMatrix([q.id for q in queries], columns, values)


def compute_artifacts_batch(
    queries: list[Query],
    corpus: Corpus,
    config: RetrievalConfig,
    threads: int = 1,
) -> list[QueryArtifacts]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(
                pool.map(lambda q: compute_artifacts(q, corpus, config), queries)
            )
    return [compute_artifacts(q, corpus, config) for q in queries]
