"""Sparse TF-IDF vectors and inverted indexes over small corpora.

Weighting is log(1+tf) * log(N/df), L2-normalized. Stopwords are only used
to gate stage-1 candidate filtering; the vectors themselves keep all terms
(idf already down-weights the common ones).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

_TERM_RE = re.compile(r"[a-z0-9']+")

# the 25-term stopword list shipped with the artifact
STOPWORDS = frozenset(
    "a an the is are was were be been being of in on at to and or with for it this that by from as".split()
)
assert len(STOPWORDS) == 25


def terms_of(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


def term_counts(tokens) -> dict[str, int]:
    counts: dict[str, int] = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    return counts


def tfidf_vector(counts: dict[str, int], df: dict[str, int], n_docs: int) -> dict[str, float]:
    """L2-normalized log(1+tf)*log(N/df) weights; terms unseen in the corpus
    (or present in every document) drop out. May be empty."""
    weights = {}
    for term, tf in counts.items():
        d = df.get(term, 0)
        if d <= 0:
            continue
        w = math.log(1.0 + tf) * math.log(n_docs / d)
        if w > 0.0:
            weights[term] = w
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm > 0:
        for term in weights:
            weights[term] /= norm
    return weights


def cosine_sparse(a: dict[str, float], b: dict[str, float]) -> float:
    if len(b) < len(a):
        a, b = b, a
    return sum(w * b[t] for t, w in a.items() if t in b)


@dataclass
class InvertedIndex:
    """term -> posting list of (document position, term frequency), postings
    sorted by position; df equals posting length."""

    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    n_docs: int = 0

    @classmethod
    def build(cls, token_lists) -> "InvertedIndex":
        idx = cls()
        for doc_pos, tokens in enumerate(token_lists):
            idx.n_docs += 1
            for term, tf in sorted(term_counts(tokens).items()):
                idx.postings.setdefault(term, []).append((doc_pos, tf))
        return idx

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def df_table(self) -> dict[str, int]:
        return {t: len(p) for t, p in self.postings.items()}

    def candidates(self, query_terms, skip_stopwords: bool = True) -> list[int]:
        """Document positions sharing at least one (non-stopword) query term."""
        seen: set[int] = set()
        for term in query_terms:
            if skip_stopwords and term in STOPWORDS:
                continue
            for doc_pos, _ in self.postings.get(term, ()):
                seen.add(doc_pos)
        return sorted(seen)
