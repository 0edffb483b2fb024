"""Document/query ingestion and an immutable in-memory index.

The index keeps everything the predictors need: per-document term
frequencies and lengths, sorted postings, collection and document
frequencies, and the collection unigram model.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

_TOKEN_RE = re.compile(r"[^\W_]+")

# Small default English stopword list, used when no file is supplied.
DEFAULT_STOPWORDS = frozenset(
    """a an and are as at be but by for if in into is it no not of on or
    such that the their then there these they this to was will with""".split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters.

    Underscores count as separators. Empty tokens are dropped, so empty
    or all-punctuation input yields an empty list.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    internal_id: int
    external_id: str
    length: int
    term_freqs: dict[str, int]


@dataclass(frozen=True)
class Query:
    id: str
    terms: tuple[str, ...]

    def __post_init__(self):
        if not self.terms:
            raise DataFormatError(f"query {self.id!r} has no terms after tokenization")


@dataclass
class Qrels:
    """Relevance grades keyed by query id, then external document id."""

    grades: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise DataFormatError(f"negative relevance grade for {query_id}/{doc_id}")
        self.grades.setdefault(query_id, {})[doc_id] = grade

    def grade(self, query_id: str, doc_id: str) -> int:
        """Grade of a judged document; unjudged documents count as 0."""
        return self.grades.get(query_id, {}).get(doc_id, 0)

    def judged(self, query_id: str) -> dict[str, int]:
        return self.grades.get(query_id, {})

    def relevant_count(self, query_id: str) -> int:
        return sum(1 for g in self.grades.get(query_id, {}).values() if g > 0)

    def query_ids(self) -> list[str]:
        return list(self.grades)


class Corpus:
    """Immutable index over a document collection.

    Construction is single-threaded; afterwards the corpus is treated as
    read-only and may be shared across threads.
    """

    def __init__(self, documents: list[Document]):
        self.documents = documents
        self.postings: dict[str, list[tuple[int, int]]] = {}
        self.collection_freq: dict[str, int] = {}
        self.doc_freq: dict[str, int] = {}
        self.total_tokens = 0
        self._by_external: dict[str, Document] = {}
        for doc in documents:
            if doc.external_id in self._by_external:
                raise DataFormatError(f"duplicate document id {doc.external_id!r}")
            self._by_external[doc.external_id] = doc
            self.total_tokens += doc.length
            for term, tf in doc.term_freqs.items():
                self.postings.setdefault(term, []).append((doc.internal_id, tf))
                self.collection_freq[term] = self.collection_freq.get(term, 0) + tf
                self.doc_freq[term] = self.doc_freq.get(term, 0) + 1
        # documents arrive in internal_id order, so postings are already sorted
        self.vocabulary = frozenset(self.postings)
        self.doc_lengths = np.array([d.length for d in documents], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.documents)

    def doc(self, internal_id: int) -> Document:
        return self.documents[internal_id]

    def external_id(self, internal_id: int) -> str:
        return self.documents[internal_id].external_id

    def by_external(self, external_id: str) -> Document:
        return self._by_external[external_id]

    def collection_prob(self, term: str) -> float:
        """p(term | collection): collection frequency over total tokens.

        Unseen terms get 0. Raises on an empty corpus.
        """
        if self.total_tokens == 0:
            raise DataFormatError("collection probability undefined for empty corpus")
        return self.collection_freq.get(term, 0) / self.total_tokens


def build_corpus(records: list[tuple[str, str]]) -> Corpus:
    """Index (external_id, text) pairs in order of first appearance."""
    documents = []
    for internal_id, (external_id, text) in enumerate(records):
        tokens = tokenize(text)
        documents.append(
            Document(
                internal_id=internal_id,
                external_id=external_id,
                length=len(tokens),
                term_freqs=dict(Counter(tokens)),
            )
        )
    return Corpus(documents)


def ingest_documents(path: str, format: str = "tsv") -> Corpus:
    """Load a document collection from disk.

    Formats: "tsv" (one document per line, `id<TAB>text`) and
    "trectext" (`<DOC><DOCNO>..</DOCNO><TEXT>..</TEXT></DOC>` blocks).
    """
    if format == "tsv":
        return build_corpus(_read_tsv(path))
    if format == "trectext":
        return build_corpus(_read_trectext(path))
    raise DataFormatError(f"unknown corpus format {format!r}")


def _read_tsv(path: str) -> list[tuple[str, str]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected 'id<TAB>text'")
            doc_id, text = line.split("\t", 1)
            if not doc_id:
                raise DataFormatError(f"{path}:{lineno}: empty document id")
            records.append((doc_id, text))
    return records


_DOC_RE = re.compile(r"<DOC>(.*?)</DOC>", re.S)
_DOCNO_RE = re.compile(r"<DOCNO>(.*?)</DOCNO>", re.S)
_TEXT_RE = re.compile(r"<TEXT>(.*?)</TEXT>", re.S)


def _read_trectext(path: str) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    records = []
    for match in _DOC_RE.finditer(raw):
        lineno = raw.count("\n", 0, match.start()) + 1
        block = match.group(1)
        docno = _DOCNO_RE.search(block)
        if docno is None:
            raise DataFormatError(f"{path}:{lineno}: <DOC> block without <DOCNO>")
        texts = _TEXT_RE.findall(block)
        if not texts:
            raise DataFormatError(f"{path}:{lineno}: <DOC> block without <TEXT>")
        records.append((docno.group(1).strip(), "\n".join(texts)))
    return records


def ingest_queries(path: str) -> list[Query]:
    """Read queries from `qid<TAB>title` lines; titles are tokenized."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected 'qid<TAB>title'")
            qid, title = line.split("\t", 1)
            terms = tuple(tokenize(title))
            if not terms:
                raise DataFormatError(f"{path}:{lineno}: query title has no terms")
            queries.append(Query(id=qid, terms=terms))
    return queries


def ingest_qrels(path: str) -> Qrels:
    """Read relevance judgments in `qid 0 docid rel` format."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 'qid 0 docid rel'")
            qid, _, doc_id, rel = parts
            try:
                grade = int(rel)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer relevance grade {rel!r}"
                ) from None
            if grade < 0:
                raise DataFormatError(f"{path}:{lineno}: negative relevance grade")
            qrels.add(qid, doc_id, grade)
    return qrels


def load_stopwords(path: str) -> frozenset[str]:
    """One stopword per line, normalized with the document tokenizer."""
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words.update(tokenize(line))
    return frozenset(words)
