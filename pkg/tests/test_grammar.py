import pytest

from vlpt.errors import ConfigError
from vlpt.grammar import CaptionGrammar, SceneGraph, default_grammar


@pytest.fixture(scope="module")
def grammar():
    return default_grammar()


def test_single_pattern_match(grammar):
    g = grammar.parse("a red ball")
    assert g.objects == ["ball"]
    assert g.attributes == [("ball", "red")]
    assert g.relations == []


def test_empty_string_gives_empty_graph(grammar):
    assert grammar.parse("").is_empty()


def test_relation_clause(grammar):
    g = grammar.parse("a red ball on a blue table")
    assert g.canonical() == (
        ("ball", "table"),
        (("ball", "red"), ("table", "blue")),
        (("ball", "on", "table"),),
    )


def test_multi_clause(grammar):
    g = grammar.parse("a red ball on a blue table and a small dog")
    assert set(g.objects) == {"ball", "table", "dog"}
    assert ("dog", "small") in g.attributes


def test_render_parse_roundtrip_handmade(grammar):
    g = SceneGraph(
        objects=["ball", "table", "cat"],
        attributes=[("ball", "red"), ("cat", "small")],
        relations=[("ball", "on", "table"), ("table", "beside", "cat")],
    )
    g.validate()
    assert grammar.parse(grammar.render(g)).canonical() == g.canonical()


def test_attributeless_objects(grammar):
    g = SceneGraph(objects=["ball", "table"], relations=[("ball", "under", "table")])
    caption = grammar.render(g)
    assert caption == "a ball under a table"
    assert grammar.parse(caption).canonical() == g.canonical()


def test_unparseable_is_best_effort_or_empty(grammar):
    assert grammar.parse("the weather is nice today").is_empty()
    # unknown words still follow the positional pattern
    g = grammar.parse("a glowing widget")
    assert g.objects == ["widget"]
    assert g.attributes == [("widget", "glowing")]


def test_multiword_relation():
    grammar = CaptionGrammar(("ball", "table"), ("red",), ("next to", "on top of"))
    g = SceneGraph(
        objects=["ball", "table"],
        attributes=[("ball", "red")],
        relations=[("ball", "on top of", "table")],
    )
    assert grammar.parse(grammar.render(g)).canonical() == g.canonical()


def test_disjointness_enforced():
    with pytest.raises(ConfigError):
        CaptionGrammar(("ball",), ("ball",), ("on",))
    with pytest.raises(ConfigError):
        CaptionGrammar(("ball",), ("red",), ("red",))


def test_graph_validate_rejects_dangling():
    g = SceneGraph(objects=["ball"], attributes=[("table", "red")])
    with pytest.raises(ConfigError):
        g.validate()
