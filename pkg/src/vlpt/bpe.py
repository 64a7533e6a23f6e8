"""Byte-level BPE vocabulary: training, encoding, decoding, persistence.

The id space is dense from 0: five reserved markers, then the 256 byte
tokens, then learned merges. Merges never produce or consume reserved ids,
and because the byte alphabet is always present, decode(encode(s)) == s for
any input string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ConfigError, InputError

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[IMG]", "[MASK]")
PAD, CLS, SEP, IMG, MASK = range(5)
N_RESERVED = len(RESERVED_TOKENS)
N_BYTES = 256
BASE_SIZE = N_RESERVED + N_BYTES

# chunks are maximal "optional whitespace + word" runs, plus trailing whitespace
_CHUNK_RE = re.compile(r"\s*\S+|\s+")

_VOCAB_HEADER = "vlpt-vocab 1"


def _bytes_to_printable() -> dict[int, str]:
    """Invertible map from byte values to printable unicode chars (so merge
    files stay plain text)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    mapping = {b: chr(b) for b in keep}
    shift = 0
    for b in range(256):
        if b not in mapping:
            mapping[b] = chr(256 + shift)
            shift += 1
    return mapping


_B2P = _bytes_to_printable()
_P2B = {v: k for k, v in _B2P.items()}


@dataclass
class Vocabulary:
    """Ordered merge rules plus the fixed reserved/byte alphabet."""

    merges: list[tuple[int, int]] = field(default_factory=list)
    _token_bytes: list[bytes] = field(default_factory=list, repr=False)
    _ranks: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._token_bytes:
            self._token_bytes = [b""] * N_RESERVED + [bytes([b]) for b in range(N_BYTES)]
            for a, b in self.merges:
                self._token_bytes.append(self._token_bytes[a] + self._token_bytes[b])
        if not self._ranks:
            self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return BASE_SIZE + len(self.merges)

    @property
    def first_regular_id(self) -> int:
        """Lowest non-reserved id; [first_regular_id, size) are drawable as
        random replacement tokens."""
        return N_RESERVED

    def token_bytes(self, token_id: int) -> bytes:
        return self._token_bytes[token_id]

    # -- encode / decode -------------------------------------------------------

    def _apply_merges(self, ids: tuple[int, ...]) -> tuple[int, ...]:
        ids = list(ids)
        while len(ids) > 1:
            best_rank = None
            for a, b in zip(ids, ids[1:]):
                r = self._ranks.get((a, b))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            new_id = BASE_SIZE + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return tuple(ids)

    def encode_chunk(self, chunk: str) -> list[int]:
        hit = self._cache.get(chunk)
        if hit is None:
            raw = tuple(N_RESERVED + b for b in chunk.encode("utf-8"))
            hit = self._apply_merges(raw)
            self._cache[chunk] = hit
        return list(hit)

    def encode_words(self, text: str) -> list[tuple[str, list[int]]]:
        """Split text into word chunks (leading whitespace attached) and
        encode each; concatenating the chunks reproduces the text."""
        return [(chunk, self.encode_chunk(chunk)) for chunk in _CHUNK_RE.findall(text)]

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for _, ids in self.encode_words(text):
            out.extend(ids)
        return out

    def decode(self, ids) -> str:
        parts: list[bytes] = []
        for i in ids:
            if i < N_RESERVED:
                parts.append(RESERVED_TOKENS[i].encode("utf-8"))
            else:
                parts.append(self._token_bytes[i])
        return b"".join(parts).decode("utf-8", errors="replace")

    # -- persistence ------------------------------------------------------------

    def _printable(self, token_id: int) -> str:
        return "".join(_B2P[b] for b in self._token_bytes[token_id])

    def save(self, path) -> None:
        lines = [_VOCAB_HEADER, "reserved " + " ".join(RESERVED_TOKENS), str(len(self.merges))]
        for a, b in self.merges:
            lines.append(f"{self._printable(a)} {self._printable(b)}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != _VOCAB_HEADER:
            raise InputError(f"{path}: not a vocabulary file (or wrong version)")
        if lines[1] != "reserved " + " ".join(RESERVED_TOKENS):
            raise InputError(f"{path}: reserved-token header mismatch")
        n = int(lines[2])
        by_bytes = {bytes([b]): N_RESERVED + b for b in range(N_BYTES)}
        merges: list[tuple[int, int]] = []
        for k, line in enumerate(lines[3 : 3 + n]):
            sa, sb = line.split(" ")
            ba = bytes(_P2B[c] for c in sa)
            bb = bytes(_P2B[c] for c in sb)
            pair = (by_bytes[ba], by_bytes[bb])
            merges.append(pair)
            by_bytes[ba + bb] = BASE_SIZE + k
        return cls(merges=merges)


def train_bpe(corpus, target_vocab_size: int) -> Vocabulary:
    """Learn BPE merges from an iterable of text lines.

    Deterministic given corpus order: the most frequent adjacent pair wins
    each round, ties broken by ascending pair ids. Stops early once no pair
    repeats or the target size is reached.
    """
    lines = list(corpus)
    if not lines or all(not ln.strip() for ln in lines):
        raise InputError("empty corpus")
    if target_vocab_size <= BASE_SIZE:
        raise ConfigError(
            f"target_vocab_size must exceed {BASE_SIZE} (reserved + byte alphabet)"
        )
    words: dict[tuple[int, ...], int] = {}
    for line in lines:
        for chunk in _CHUNK_RE.findall(line):
            key = tuple(N_RESERVED + b for b in chunk.encode("utf-8"))
            words[key] = words.get(key, 0) + 1

    merges: list[tuple[int, int]] = []
    while BASE_SIZE + len(merges) < target_vocab_size:
        counts: dict[tuple[int, int], int] = {}
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                counts[pair] = counts.get(pair, 0) + freq
        if not counts:
            break
        best, best_count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_count < 2:
            break
        new_id = BASE_SIZE + len(merges)
        merges.append(best)
        a, b = best
        rebuilt: dict[tuple[int, ...], int] = {}
        for word, freq in words.items():
            out = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            key = tuple(out)
            rebuilt[key] = rebuilt.get(key, 0) + freq
        words = rebuilt
    return Vocabulary(merges=merges)
