"""Single-modal retrieval: label-based image similarity and three-stage text
retrieval (inverted-index filter, TF-IDF ranking, dense-embedding rerank).

Both index kinds persist to single versioned JSON files; scores and tie
order (descending score, ascending id) are deterministic and insensitive to
corpus permutation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .bpe import Vocabulary
from .errors import InputError
from .scenes import RegionSet
from .tfidf import InvertedIndex, cosine_sparse, term_counts, terms_of, tfidf_vector

log = logging.getLogger(__name__)

TEXT_FILTER_K = 1000  # TF-IDF survivors fed to the reranker
TEXT_RERANK_K = 100  # final embedding-ranked pool


class MeanTokenEmbedder:
    """Embeds a text as the mean of its token-embedding rows.

    The default dense reranker: no external encoder, just the current
    model's embedding table (recompute the index when the checkpoint
    changes; `tag` records the provenance).
    """

    def __init__(self, vocab: Vocabulary, table: np.ndarray, tag: str = "init"):
        self.vocab = vocab
        self.table = np.asarray(table, dtype=np.float64)
        self.tag = tag

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def embed(self, text: str) -> np.ndarray:
        ids = self.vocab.encode(text)
        if not ids:
            return np.zeros(self.dim)
        return self.table[ids].mean(axis=0)


def _dense_cosine(q: np.ndarray, mat: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(mat, axis=1)
    out = np.zeros(mat.shape[0])
    ok = (norms > 0) & (qn > 0)
    if qn > 0:
        out[ok] = (mat[ok] @ q) / (norms[ok] * qn)
    return out


def _top_ids(scored: list[tuple[str, float]], k: int) -> list[str]:
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return [i for i, _ in scored[:k]]


# -- image retrieval ------------------------------------------------------------


def _label_terms(regions: RegionSet) -> list[str]:
    return [f"c{int(l)}" for l in regions.labels]


@dataclass
class ImageIndex:
    """Per-image TF-IDF vectors over the multiset of argmax region labels."""

    ids: list[str]
    labels: dict[str, list[str]]
    vectors: dict[str, dict[str, float]]
    df: dict[str, int]

    @classmethod
    def build(cls, images) -> "ImageIndex":
        """`images`: iterable of (id, RegionSet)."""
        ids, labels = [], {}
        for image_id, regions in images:
            ids.append(image_id)
            labels[image_id] = _label_terms(regions)
        df: dict[str, int] = {}
        for image_id in ids:
            for term in set(labels[image_id]):
                df[term] = df.get(term, 0) + 1
        n = len(ids)
        vectors = {
            image_id: tfidf_vector(term_counts(labels[image_id]), df, n) for image_id in ids
        }
        return cls(ids=ids, labels=labels, vectors=vectors, df=df)

    def vector_for(self, query) -> dict[str, float]:
        if isinstance(query, str):
            return self.vectors[query]
        return tfidf_vector(term_counts(_label_terms(query)), self.df, len(self.ids))


def build_image_index(images) -> ImageIndex:
    return ImageIndex.build(images)


def retrieve_images(query, index: ImageIndex, k: int) -> list[str]:
    """Top-k image ids by label-TF-IDF cosine, excluding the query itself;
    ties break by ascending id. k beyond the collection returns everything."""
    qvec = index.vector_for(query)
    exclude = query if isinstance(query, str) else None
    scored = [
        (image_id, cosine_sparse(qvec, index.vectors[image_id]))
        for image_id in index.ids
        if image_id != exclude
    ]
    return _top_ids(scored, k)


# -- text retrieval ----------------------------------------------------------------


@dataclass
class TextIndex:
    """Sentence corpus with inverted index, TF-IDF vectors, and dense
    embeddings for the rerank stage."""

    ids: list[str]
    texts: dict[str, str]
    inverted: InvertedIndex
    vectors: dict[str, dict[str, float]]
    embeddings: np.ndarray
    embedder_tag: str

    @classmethod
    def build(cls, records, embedder) -> "TextIndex":
        """`records`: iterable of (id, text)."""
        ids, texts = [], {}
        for text_id, text in records:
            ids.append(text_id)
            texts[text_id] = text
        token_lists = [terms_of(texts[i]) for i in ids]
        inverted = InvertedIndex.build(token_lists)
        df = inverted.df_table()
        vectors = {
            text_id: tfidf_vector(term_counts(tokens), df, len(ids))
            for text_id, tokens in zip(ids, token_lists)
        }
        embeddings = (
            np.stack([embedder.embed(texts[i]) for i in ids])
            if ids
            else np.zeros((0, embedder.dim))
        )
        return cls(
            ids=ids,
            texts=texts,
            inverted=inverted,
            vectors=vectors,
            embeddings=embeddings,
            embedder_tag=embedder.tag,
        )


def build_text_index(records, embedder) -> TextIndex:
    return TextIndex.build(records, embedder)


def retrieve_texts(
    query_text: str,
    index: TextIndex,
    embedder,
    k_filter: int = TEXT_FILTER_K,
    k_rerank: int = TEXT_RERANK_K,
    exclude_id: str | None = None,
) -> list[str]:
    """Three stages: candidates sharing a non-stopword term with the query,
    TF-IDF cosine keeps top k_filter, embedding cosine keeps top k_rerank."""
    qterms = terms_of(query_text)
    cand_pos = index.inverted.candidates(qterms)
    cand_ids = [index.ids[p] for p in cand_pos if index.ids[p] != exclude_id]
    if not cand_ids:
        log.info("text retrieval: no candidates share a non-stopword term with %r", query_text)
        return []
    qvec = tfidf_vector(term_counts(qterms), index.inverted.df_table(), index.inverted.n_docs)
    stage2 = _top_ids([(i, cosine_sparse(qvec, index.vectors[i])) for i in cand_ids], k_filter)
    qemb = embedder.embed(query_text)
    pos_of = {text_id: k for k, text_id in enumerate(index.ids)}
    emb_scores = _dense_cosine(qemb, index.embeddings[[pos_of[i] for i in stage2]])
    return _top_ids(list(zip(stage2, emb_scores)), k_rerank)


# -- persistence ---------------------------------------------------------------------

IMAGE_INDEX_VERSION = 1
TEXT_INDEX_VERSION = 1


def save_image_index(path, index: ImageIndex) -> None:
    doc = {
        "format": "vlpt-image-index",
        "version": IMAGE_INDEX_VERSION,
        "ids": index.ids,
        "labels": index.labels,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_image_index(path) -> ImageIndex:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "vlpt-image-index" or doc.get("version") != IMAGE_INDEX_VERSION:
        raise InputError(f"{path}: not a readable image index")
    df: dict[str, int] = {}
    for image_id in doc["ids"]:
        for term in set(doc["labels"][image_id]):
            df[term] = df.get(term, 0) + 1
    n = len(doc["ids"])
    vectors = {
        i: tfidf_vector(term_counts(doc["labels"][i]), df, n) for i in doc["ids"]
    }
    return ImageIndex(ids=doc["ids"], labels=doc["labels"], vectors=vectors, df=df)


def save_text_index(path, index: TextIndex) -> None:
    doc = {
        "format": "vlpt-text-index",
        "version": TEXT_INDEX_VERSION,
        "ids": index.ids,
        "texts": index.texts,
        "embedder_tag": index.embedder_tag,
        "embeddings": index.embeddings.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_text_index(path) -> TextIndex:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "vlpt-text-index" or doc.get("version") != TEXT_INDEX_VERSION:
        raise InputError(f"{path}: not a readable text index")
    ids = doc["ids"]
    texts = doc["texts"]
    token_lists = [terms_of(texts[i]) for i in ids]
    inverted = InvertedIndex.build(token_lists)
    df = inverted.df_table()
    vectors = {
        text_id: tfidf_vector(term_counts(tokens), df, len(ids))
        for text_id, tokens in zip(ids, token_lists)
    }
    return TextIndex(
        ids=ids,
        texts=texts,
        inverted=inverted,
        vectors=vectors,
        embeddings=np.array(doc["embeddings"], dtype=np.float64).reshape(len(ids), -1),
        embedder_tag=doc["embedder_tag"],
    )
