"""Template caption grammar over scene graphs.

Captions are built from clauses joined by " and ": a relation clause is
"a [attr] subj REL a [attr] obj", an isolated object renders as "a [attr]
obj". `parse` inverts `render` exactly for grammar-produced captions and
falls back to positional pattern extraction otherwise (noun phrases of at
most two words, first word read as the attribute).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class SceneGraph:
    """Objects, (object, attribute) pairs, and (subject, relation, object)
    triples extracted from or underlying a caption."""

    objects: list[str] = field(default_factory=list)
    attributes: list[tuple[str, str]] = field(default_factory=list)
    relations: list[tuple[str, str, str]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.objects or self.attributes or self.relations)

    def canonical(self):
        return (
            tuple(sorted(set(self.objects))),
            tuple(sorted(set(self.attributes))),
            tuple(sorted(set(self.relations))),
        )

    def validate(self) -> None:
        owners = set(self.objects)
        for obj, _ in self.attributes:
            if obj not in owners:
                raise ConfigError(f"attribute owner {obj!r} missing from objects")
        for s, _, o in self.relations:
            if s not in owners or o not in owners:
                raise ConfigError("relation endpoint missing from objects")

    def to_dict(self) -> dict:
        return {
            "objects": list(self.objects),
            "attributes": [list(a) for a in self.attributes],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls(
            objects=list(d["objects"]),
            attributes=[tuple(a) for a in d["attributes"]],
            relations=[tuple(r) for r in d["relations"]],
        )


class CaptionGrammar:
    """Render/parse captions for fixed object/attribute/relation vocabularies.

    The three vocabularies must be pairwise disjoint so parsing is
    unambiguous; relations may be multiword ("next to").
    """

    def __init__(self, objects, attributes, relations):
        self.objects = tuple(objects)
        self.attributes = tuple(attributes)
        self.relations = tuple(relations)
        if not (self.objects and self.attributes and self.relations):
            raise ConfigError("grammar vocabularies must be nonempty")
        rel_words = {w for r in self.relations for w in r.split()}
        if (set(self.objects) & set(self.attributes)) or (set(self.objects) & rel_words) or (
            set(self.attributes) & rel_words
        ):
            raise ConfigError("grammar vocabularies must be pairwise disjoint")
        self._obj = set(self.objects)
        self._attr = set(self.attributes)
        self._rel = set(self.relations)

    # -- rendering ---------------------------------------------------------------

    def _np(self, graph: SceneGraph, obj: str) -> str:
        for owner, attr in graph.attributes:
            if owner == obj:
                return f"a {attr} {obj}"
        return f"a {obj}"

    def render(self, graph: SceneGraph) -> str:
        clauses = []
        mentioned = set()
        for s, rel, o in graph.relations:
            clauses.append(f"{self._np(graph, s)} {rel} {self._np(graph, o)}")
            mentioned.update((s, o))
        for obj in graph.objects:
            if obj not in mentioned:
                clauses.append(self._np(graph, obj))
        return " and ".join(clauses)

    # -- parsing -----------------------------------------------------------------

    def _parse_np(self, words: list[str]) -> tuple[str | None, str] | None:
        if len(words) == 1:
            return (None, words[0])
        if len(words) == 2:
            if words[0] in self._attr or words[0] not in self._obj:
                return (words[0], words[1])
            return None
        return None

    def _parse_clause(self, clause: str):
        words = clause.split()
        if not words or words[0] != "a":
            return None
        articles = [i for i, w in enumerate(words) if w == "a"]
        if len(articles) == 1:
            return (self._parse_np(words[1:]), None, None)
        if len(articles) != 2:
            return None
        second = articles[1]
        # the relation is the suffix of the middle segment not claimed by NP1
        middle = words[1:second]
        for np_len in (2, 1):
            if len(middle) > np_len:
                np1 = self._parse_np(middle[:np_len])
                rel = " ".join(middle[np_len:])
                if np1 is not None and (rel in self._rel or not self._known(middle[np_len:])):
                    np2 = self._parse_np(words[second + 1 :])
                    if np2 is not None:
                        return (np1, rel, np2)
        return None

    def _known(self, words) -> bool:
        vocab = self._obj | self._attr
        return any(w in vocab for w in words)

    def parse(self, caption: str) -> SceneGraph:
        """Extract a scene graph; unparseable input yields an empty graph."""
        graph = SceneGraph()
        seen_obj = set()

        def add_np(np_parsed):
            attr, obj = np_parsed
            if obj not in seen_obj:
                seen_obj.add(obj)
                graph.objects.append(obj)
            if attr is not None and (obj, attr) not in graph.attributes:
                graph.attributes.append((obj, attr))
            return obj

        for clause in caption.split(" and "):
            clause = clause.strip()
            if not clause:
                continue
            parsed = self._parse_clause(clause)
            if parsed is None:
                continue
            np1, rel, np2 = parsed
            if np1 is None:
                continue
            subj = add_np(np1)
            if rel is not None and np2 is not None:
                obj = add_np(np2)
                triple = (subj, rel, obj)
                if triple not in graph.relations:
                    graph.relations.append(triple)
        return graph


DEFAULT_OBJECTS = (
    "ball", "table", "dog", "cat", "chair", "car",
    "tree", "bird", "box", "cup", "hat", "bike",
)
DEFAULT_ATTRIBUTES = ("red", "blue", "green", "small", "large", "round", "wooden", "shiny")
DEFAULT_RELATIONS = ("on", "under", "beside", "near", "behind", "above")


def default_grammar() -> CaptionGrammar:
    return CaptionGrammar(DEFAULT_OBJECTS, DEFAULT_ATTRIBUTES, DEFAULT_RELATIONS)
