"""Token sequences, phrase detection, and the two language-masking strategies.

Masking always operates on whole words (and detected phrases): spans are
sampled in word units, snapped outward to phrase boundaries, and the special
[CLS]/[SEP] markers are never touched. The 15%/25% selection budgets are
lower bounds counted in subword tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .bpe import CLS, MASK, SEP, Vocabulary
from .errors import ContractError, SequenceTooShort
from .rng import as_generator


@dataclass
class TokenSequence:
    """Subword ids bracketed by [CLS]/[SEP], with word and phrase spans.

    `word_spans` are half-open index ranges over `ids` that partition the
    interior; `words` holds the surface chunk per span (leading whitespace
    attached); `phrase_spans` align to word boundaries.
    """

    ids: list[int]
    word_spans: list[tuple[int, int]]
    words: list[str]
    phrase_spans: list[tuple[int, int]] = field(default_factory=list)

    @property
    def interior_len(self) -> int:
        return len(self.ids) - 2

    def word_range_of_tokens(self, lo: int, hi: int) -> tuple[int, int]:
        """Smallest word-index range whose spans cover token range [lo, hi)."""
        first = last = None
        for w, (s, e) in enumerate(self.word_spans):
            if s < hi and e > lo:
                if first is None:
                    first = w
                last = w
        if first is None:
            raise ContractError("token range covers no words")
        return first, last + 1


def tokenize(vocab: Vocabulary, text: str, max_len: int = 64) -> TokenSequence:
    """Encode text into a bracketed TokenSequence of at most max_len ids,
    truncating at a word boundary."""
    ids = [CLS]
    spans: list[tuple[int, int]] = []
    words: list[str] = []
    for chunk, chunk_ids in vocab.encode_words(text):
        if len(ids) + len(chunk_ids) + 1 > max_len:
            break
        spans.append((len(ids), len(ids) + len(chunk_ids)))
        words.append(chunk)
        ids.extend(chunk_ids)
    ids.append(SEP)
    return TokenSequence(ids=ids, word_spans=spans, words=words)


# -- phrase detection -----------------------------------------------------------


def _norm(word: str) -> str:
    return word.strip().lower()


def _is_capitalized(word: str) -> bool:
    w = word.strip()
    return bool(w) and w[0].isupper()


def detect_phrases(seq: TokenSequence, lexicon) -> list[tuple[int, int]]:
    """Non-overlapping leftmost-longest lexicon matches plus maximal runs of
    two or more capitalized words, as token spans aligned to word boundaries.

    Lexicon entries are multiword strings matched case-insensitively. A
    single capitalized word is already a whole masking unit, so runs shorter
    than two words are not reported.
    """
    norm_words = [_norm(w) for w in seq.words]
    by_first: dict[str, list[list[str]]] = {}
    for entry in lexicon:
        parts = [p.lower() for p in entry.split()]
        if parts:
            by_first.setdefault(parts[0], []).append(parts)
    for entries in by_first.values():
        entries.sort(key=len, reverse=True)

    spans: list[tuple[int, int]] = []
    i = 0
    n = len(norm_words)
    while i < n:
        matched = None
        for parts in by_first.get(norm_words[i], ()):
            j = i + len(parts)
            if j <= n and norm_words[i:j] == parts:
                matched = j
                break
        if matched is not None:
            spans.append((seq.word_spans[i][0], seq.word_spans[matched - 1][1]))
            i = matched
            continue
        if _is_capitalized(seq.words[i]):
            j = i
            while j < n and _is_capitalized(seq.words[j]):
                j += 1
            if j - i >= 2:
                spans.append((seq.word_spans[i][0], seq.word_spans[j - 1][1]))
                i = j
                continue
        i += 1
    return spans


# -- bidirectional masking --------------------------------------------------------

MASK_ACTION, RANDOM_ACTION, KEEP_ACTION = "mask", "random", "keep"

SPAN_GEO_P = 0.2
MASK_BUDGET = 0.15
MAX_SPAN_WORDS = 10  # geometric span lengths are truncated here
ACTION_PROBS = (0.8, 0.1, 0.1)  # mask / random / keep


@dataclass
class MaskingPlan:
    """Masked token positions with their replacement actions and targets.

    `replacements` holds the concrete id written at each position, so a plan
    is replayable after serialization without re-drawing randomness.
    """

    positions: list[int]
    actions: list[str]
    targets: list[int]
    replacements: list[int]

    def to_dict(self) -> dict:
        return {
            "positions": self.positions,
            "actions": self.actions,
            "targets": self.targets,
            "replacements": self.replacements,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskingPlan":
        return cls(
            positions=list(d["positions"]),
            actions=list(d["actions"]),
            targets=list(d["targets"]),
            replacements=list(d["replacements"]),
        )


def apply_masking_plan(ids: list[int], plan: MaskingPlan) -> list[int]:
    out = list(ids)
    for pos, rep in zip(plan.positions, plan.replacements):
        out[pos] = rep
    return out


def sample_bidirectional_mask(
    seq: TokenSequence,
    rng,
    vocab: Vocabulary,
    budget: float = MASK_BUDGET,
    geo_p: float = SPAN_GEO_P,
    max_span_words: int = MAX_SPAN_WORDS,
    action_probs: tuple = ACTION_PROBS,
) -> MaskingPlan:
    """Select whole-word spans (lengths ~ Geo(geo_p), in words) until at
    least `budget` of interior tokens are covered, snap selections outward
    to phrase boundaries, then draw mask/random/keep actions per token."""
    gen = as_generator(rng)
    n_words = len(seq.word_spans)
    if n_words == 0:
        raise ContractError("cannot mask a sequence with an empty interior")
    tok_len = [e - s for s, e in seq.word_spans]
    n_interior = sum(tok_len)
    needed = max(1, math.ceil(budget * n_interior))

    phrase_word_ranges = [seq.word_range_of_tokens(s, e) for s, e in seq.phrase_spans]
    selected = [False] * n_words
    covered = 0

    def mark(ws: int, we: int) -> None:
        nonlocal covered
        for w in range(ws, we):
            if not selected[w]:
                selected[w] = True
                covered += tok_len[w]

    draws = 0
    while covered < needed:
        draws += 1
        if draws > 100 * n_words:  # degenerate rng stream; finish greedily
            for w in range(n_words):
                if covered >= needed:
                    break
                mark(w, w + 1)
            break
        span = min(int(gen.geometric(geo_p)), max_span_words, n_words)
        start = int(gen.integers(0, n_words - span + 1))
        mark(start, start + span)
        for ws, we in phrase_word_ranges:
            if any(selected[w] for w in range(ws, we)):
                mark(ws, we)

    positions: list[int] = []
    for w in range(n_words):
        if selected[w]:
            positions.extend(range(*seq.word_spans[w]))

    p_mask, p_random = action_probs[0], action_probs[1]
    actions, targets, replacements = [], [], []
    for pos in positions:
        u = float(gen.random())
        target = seq.ids[pos]
        if u < p_mask:
            actions.append(MASK_ACTION)
            replacements.append(MASK)
        elif u < p_mask + p_random:
            actions.append(RANDOM_ACTION)
            replacements.append(int(gen.integers(vocab.first_regular_id, vocab.size)))
        else:
            actions.append(KEEP_ACTION)
            replacements.append(target)
        targets.append(target)
    return MaskingPlan(positions=positions, actions=actions, targets=targets, replacements=replacements)


# -- seq2seq fragment splitting ----------------------------------------------------

FRAGMENT_BUDGET = 0.25
FRAGMENT_MIN, FRAGMENT_MAX = 4, 32  # l ~ U(4, 32), in tokens


@dataclass
class Seq2SeqSplit:
    """A source/target split: fragments removed from the original sequence
    form the target (each wrapped in [CLS]/[SEP]); the remainder is the
    source. `fragments` are half-open token spans over the original ids."""

    source_ids: list[int]
    target_ids: list[int]
    fragments: list[tuple[int, int]]

    def fragment_token_lists(self) -> list[list[int]]:
        """Unwrap the target back into per-fragment token lists."""
        out = []
        i = 0
        for s, e in self.fragments:
            assert self.target_ids[i] == CLS
            out.append(self.target_ids[i + 1 : i + 1 + (e - s)])
            i += (e - s) + 2
        return out

    def reconstruct(self) -> list[int]:
        """Reinsert the fragments into the source, reproducing the original."""
        frags = self.fragment_token_lists()
        total = len(self.source_ids) + sum(e - s for s, e in self.fragments)
        out: list[int | None] = [None] * total
        for (s, e), toks in zip(self.fragments, frags):
            out[s:e] = toks
        src = iter(self.source_ids)
        for i in range(total):
            if out[i] is None:
                out[i] = next(src)
        return out  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return {
            "source_ids": self.source_ids,
            "target_ids": self.target_ids,
            "fragments": [list(f) for f in self.fragments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqSplit":
        return cls(
            source_ids=list(d["source_ids"]),
            target_ids=list(d["target_ids"]),
            fragments=[tuple(f) for f in d["fragments"]],
        )


def sample_seq2seq_split(
    seq: TokenSequence,
    rng,
    budget: float = FRAGMENT_BUDGET,
    frag_min: int = FRAGMENT_MIN,
    frag_max: int = FRAGMENT_MAX,
) -> Seq2SeqSplit:
    """Remove word-aligned fragments (token lengths ~ U(frag_min, frag_max),
    the last truncated to the remaining budget) until at least `budget` of
    interior tokens are selected."""
    gen = as_generator(rng)
    n_interior = seq.interior_len
    if n_interior < frag_min:
        raise SequenceTooShort(
            f"interior of {n_interior} tokens is below the fragment minimum {frag_min}"
        )
    n_words = len(seq.word_spans)
    tok_len = [e - s for s, e in seq.word_spans]
    needed = math.ceil(budget * n_interior)

    free = [True] * n_words
    covered = 0
    word_ranges: list[tuple[int, int]] = []
    while covered < needed:
        want = min(int(gen.integers(frag_min, frag_max + 1)), needed - covered)
        candidates = [w for w in range(n_words) if free[w]]
        ws = int(candidates[gen.integers(0, len(candidates))])
        we, acc = ws, 0
        while we < n_words and free[we] and acc < want:
            acc += tok_len[we]
            we += 1
        for w in range(ws, we):
            free[w] = False
        covered += acc
        word_ranges.append((ws, we))

    word_ranges.sort()
    fragments = [(seq.word_spans[ws][0], seq.word_spans[we - 1][1]) for ws, we in word_ranges]
    in_fragment = [False] * len(seq.ids)
    target_ids: list[int] = []
    for s, e in fragments:
        for i in range(s, e):
            in_fragment[i] = True
        target_ids.append(CLS)
        target_ids.extend(seq.ids[s:e])
        target_ids.append(SEP)
    source_ids = [t for i, t in enumerate(seq.ids) if not in_fragment[i]]
    return Seq2SeqSplit(source_ids=source_ids, target_ids=target_ids, fragments=fragments)
