"""Query-likelihood retrieval with Dirichlet smoothing, plus RM3 expansion.

Scores are natural-log query likelihoods. A term scores
log((tf(t,d) + mu*p(t|C)) / (|d| + mu)) and the query score is the
weight-weighted sum over its terms, where weights are query term counts
or expanded-query probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .corpus import Corpus, Document, Query


@dataclass(frozen=True)
class RetrievalConfig:
    mu: float = 1000.0
    k: int = 1000
    fb_docs: int = 10
    fb_terms: int = 20
    rm_interpolation: float = 0.5

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.fb_docs < 1 or self.fb_terms < 1:
            raise ValueError("fb_docs and fb_terms must be at least 1")
        if not 0.0 <= self.rm_interpolation <= 1.0:
            raise ValueError("rm_interpolation must lie in [0, 1]")


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[int, float]]

    def __len__(self) -> int:
        return len(self.entries)

    def doc_ids(self, limit: int | None = None) -> list[int]:
        entries = self.entries if limit is None else self.entries[:limit]
        return [doc_id for doc_id, _ in entries]

    def scores(self, limit: int | None = None) -> np.ndarray:
        entries = self.entries if limit is None else self.entries[:limit]
        return np.array([score for _, score in entries], dtype=np.float64)


@dataclass
class ExpandedQuery:
    weights: dict[str, float]
    query_id: str = ""


def floored_collection_prob(corpus: Corpus, term: str) -> float:
    """p(t|C) with unseen terms floored to 1/(2*total_tokens).

    The floor keeps log scores finite for out-of-vocabulary query terms.
    """
    p = corpus.collection_prob(term)
    if p > 0.0:
        return p
    return 1.0 / (2.0 * corpus.total_tokens)


def query_weights(query: Query | ExpandedQuery | Mapping[str, float]) -> dict[str, float]:
    """Term weights: query term counts, or expanded-query probabilities."""
    if isinstance(query, Query):
        weights: dict[str, float] = {}
        for term in query.terms:
            weights[term] = weights.get(term, 0.0) + 1.0
        return weights
    if isinstance(query, ExpandedQuery):
        return dict(query.weights)
    return dict(query)


def score_document(
    query: Query | ExpandedQuery | Mapping[str, float],
    doc: Document,
    corpus: Corpus,
    config: RetrievalConfig,
) -> float:
    """Dirichlet-smoothed log likelihood of the query given one document."""
    weights = query_weights(query)
    if not weights:
        raise ValueError("cannot score an empty query")
    mu = config.mu
    score = 0.0
    for term, w in weights.items():
        p_c = floored_collection_prob(corpus, term)
        tf = doc.term_freqs.get(term, 0)
        score += w * math.log((tf + mu * p_c) / (doc.length + mu))
    return score


def collection_score(
    query: Query | ExpandedQuery | Mapping[str, float],
    corpus: Corpus,
    config: RetrievalConfig,
) -> float:
    """Query log likelihood against the collection treated as one document.

    Term frequency is the collection frequency and the length is the
    total token count.
    """
    weights = query_weights(query)
    if not weights:
        raise ValueError("cannot score an empty query")
    mu = config.mu
    total = corpus.total_tokens
    score = 0.0
    for term, w in weights.items():
        p_c = floored_collection_prob(corpus, term)
        cf = corpus.collection_freq.get(term, 0)
        score += w * math.log((cf + mu * p_c) / (total + mu))
    return score


def _retrieve_weighted(
    weights: dict[str, float], corpus: Corpus, config: RetrievalConfig, query_id: str
) -> RankedList:
    if not weights:
        raise ValueError("cannot retrieve with an empty query")
    if len(corpus) == 0:
        raise ValueError("cannot retrieve from an empty corpus")
    mu = config.mu
    n_docs = len(corpus)
    # score(d) = base + adjust(d) - W * log(|d| + mu), where base collects the
    # tf=0 numerators and adjust corrects documents that contain a query term
    total_weight = 0.0
    base = 0.0
    adjust = np.zeros(n_docs, dtype=np.float64)
    for term, w in weights.items():
        total_weight += w
        p_c = floored_collection_prob(corpus, term)
        zero_tf = math.log(mu * p_c)
        base += w * zero_tf
        for doc_id, tf in corpus.postings.get(term, ()):
            adjust[doc_id] += w * (math.log(tf + mu * p_c) - zero_tf)
    scores = base + adjust - total_weight * np.log(corpus.doc_lengths + mu)
    # ties broken by ascending internal id; lexsort is stable on the index key
    order = np.lexsort((np.arange(n_docs), -scores))[: config.k]
    return RankedList(query_id, [(int(i), float(scores[i])) for i in order])


def retrieve(query: Query, corpus: Corpus, config: RetrievalConfig) -> RankedList:
    """Rank the top-k documents for a plain term query."""
    return _retrieve_weighted(query_weights(query), corpus, config, query.id)


def retrieve_expanded(
    expanded: ExpandedQuery, corpus: Corpus, config: RetrievalConfig
) -> RankedList:
    """Rank the top-k documents for an expanded (weighted) query."""
    return _retrieve_weighted(expanded.weights, corpus, config, expanded.query_id)


def relevance_model(
    entries: list[tuple[int, float]],
    corpus: Corpus,
    config: RetrievalConfig,
    support: frozenset[str] | None = None,
) -> dict[str, float]:
    """RM1 estimate p(t|R) over feedback documents.

    p(t|R) is proportional to sum_d w(d) * p(t|d) with p(t|d) the
    Dirichlet-smoothed document model and w(d) the softmax of the
    documents' retrieval scores. With support=None the model ranges over
    the whole vocabulary; otherwise it is normalized over the given
    support only.
    """
    if not entries:
        raise ValueError("relevance model needs at least one feedback document")
    mu = config.mu
    scores = np.array([score for _, score in entries], dtype=np.float64)
    log_w = scores - scores.max()
    doc_w = np.exp(log_w)
    doc_w /= doc_w.sum()

    terms = support if support is not None else corpus.vocabulary
    # background mass: sum_d w(d) * mu * p(t|C) / (|d| + mu)
    bg_coeff = 0.0
    for (doc_id, _), w in zip(entries, doc_w):
        bg_coeff += w / (corpus.doc(doc_id).length + mu)
    raw = {t: mu * floored_collection_prob(corpus, t) * bg_coeff for t in terms}
    for (doc_id, _), w in zip(entries, doc_w):
        doc = corpus.doc(doc_id)
        denom = doc.length + mu
        for term, tf in doc.term_freqs.items():
            if term in raw:
                raw[term] += w * tf / denom
    total = sum(raw.values())
    return {t: v / total for t, v in raw.items()}


def expand_query(
    query: Query, ranked: RankedList, corpus: Corpus, config: RetrievalConfig
) -> ExpandedQuery:
    """RM3 expansion of a query from its pseudo-relevance feedback documents.

    The RM1 model over the top fb_docs documents is truncated to the top
    fb_terms terms, renormalized, and interpolated with the original
    query's term distribution at weight rm_interpolation.
    """
    if len(ranked) < 1:
        raise ValueError("query expansion needs at least one feedback document")
    fb_entries = ranked.entries[: config.fb_docs]
    rm1 = relevance_model(fb_entries, corpus, config)
    top = sorted(rm1.items(), key=lambda kv: (-kv[1], kv[0]))[: config.fb_terms]
    trunc_total = sum(w for _, w in top)
    lam = config.rm_interpolation

    counts = query_weights(query)
    q_len = sum(counts.values())
    combined: dict[str, float] = {t: lam * c / q_len for t, c in counts.items()}
    if trunc_total > 0:
        for term, w in top:
            combined[term] = combined.get(term, 0.0) + (1.0 - lam) * w / trunc_total
    total = sum(combined.values())
    weights = {t: w / total for t, w in combined.items() if w > 0.0}
    return ExpandedQuery(weights=weights, query_id=query.id)


def write_run(
    ranked_lists: list[RankedList], corpus: Corpus, path: str, tag: str = "qppkit"
) -> None:
    """Write rankings in TREC run format: `qid Q0 docid rank score tag`."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in ranked_lists:
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                fh.write(
                    f"{ranked.query_id} Q0 {corpus.external_id(doc_id)} "
                    f"{rank} {score:.6f} {tag}\n"
                )
