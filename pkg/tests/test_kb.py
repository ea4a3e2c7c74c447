import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgvl.kb import DEFAULT_STOPLIST, Fact, KnowledgeBase, ingest_kb, kb_from_text, query_entities

CHURCH_KB = "bride\tRelatedTo\tchurch\t3.2\nchurch\tUsedFor\tget married\t2.8\nchurch\tIsA\tbuilding\t1.1\n"


def brute_force_query(facts, token, k, stoplist=()):
    """Enumerate every fact touching ``token`` and sort independently of the index."""
    if k == 0 or token in stoplist:
        return []
    hits = []
    for f in facts:
        if f.head == token:
            hits.append((f.tail, f.weight, f.relation))
        if f.tail == token and f.head != token:
            hits.append((f.head, f.weight, f.relation))
    hits.sort(key=lambda h: (-h[1], h[0], h[2]))
    out, seen = [], set()
    for entity, w, _ in hits:
        if entity not in seen:
            seen.add(entity)
            out.append((entity, w))
    return out[:k]


def test_single_fact_is_found_from_both_ends():
    kb = kb_from_text("bride\tRelatedTo\tchurch\t3.2\n")
    assert query_entities(kb, "church", 2) == [("bride", 3.2)]
    assert query_entities(kb, "bride", 2) == [("church", 3.2)]


def test_empty_input():
    kb = kb_from_text("")
    assert len(kb) == 0
    assert kb.report.accepted == 0 and kb.report.rejected == 0
    assert query_entities(kb, "church", 3) == []


def test_posting_order_by_weight():
    kb = kb_from_text("a\tr\tchurch\t1.0\nb\tr\tchurch\t3.2\n")
    postings = kb.postings("church")
    weights = [kb.facts[fid].weight for fid, _ in postings]
    assert weights == sorted(weights, reverse=True) == [3.2, 1.0]


def test_church_top2():
    kb = kb_from_text(CHURCH_KB)
    expected = brute_force_query(kb.facts, "church", 2)
    assert expected == [("bride", 3.2), ("get married", 2.8)]
    assert query_entities(kb, "church", 2) == expected


def test_k_zero_and_stoplist():
    kb = kb_from_text(CHURCH_KB + "the\tRelatedTo\tchurch\t9\n")
    assert query_entities(kb, "church", 0) == []
    assert query_entities(kb, "the", 2, stoplist={"the"}) == []
    assert "the" in DEFAULT_STOPLIST
    with pytest.raises(ValueError):
        query_entities(kb, "church", -1)


def test_unknown_token():
    assert query_entities(kb_from_text(CHURCH_KB), "zebra", 5) == []


def test_malformed_lines_are_reported():
    text = (
        "# header comment\n"
        "\n"
        "a\tr\tb\t1.5\n"
        "only\tthree\tfields\n"
        "a\tr\tb\tnot-a-number\n"
        "a\tr\tb\t-2\n"
        "a\tr\tb\tnan\n"
        "  Big   Dog \tIsA\t Animal\t2\n"
    )
    kb = ingest_kb(io.StringIO(text))
    assert kb.report.accepted == 2
    assert kb.report.rejected == 4
    assert [n for n, _ in kb.report.errors] == [4, 5, 6, 7]
    assert query_entities(kb, "big dog", 1) == [("animal", 2.0)]


def test_ties_break_on_entity_then_relation():
    kb = kb_from_text("x\tB\tzeta\t1\nx\tA\talpha\t1\nx\tA\tzeta\t1\n")
    assert [kb.facts[f].relation for f, _ in kb.postings("x")] == ["A", "A", "B"]
    assert query_entities(kb, "x", 3) == [("alpha", 1.0), ("zeta", 1.0)]


def test_duplicates_keep_highest_weight():
    kb = kb_from_text("x\tA\ty\t1\ny\tB\tx\t5\n")
    assert query_entities(kb, "x", 2) == [("y", 5.0)]


def test_fact_invariants():
    with pytest.raises(ValueError):
        Fact("a", "r", "b", -1.0)
    with pytest.raises(ValueError):
        Fact("", "r", "b", 1.0)
    with pytest.raises(ValueError):
        Fact("A", "r", "b", 1.0)


def test_ingest_from_path(tmp_path):
    path = tmp_path / "kb.tsv"
    path.write_text(CHURCH_KB, encoding="utf-8")
    assert len(ingest_kb(path)) == 3


concepts = st.sampled_from(["church", "bride", "dog", "cat", "the", "get married", "ring"])
facts_strategy = st.lists(
    st.builds(Fact, concepts, st.sampled_from(["RelatedTo", "IsA", "UsedFor"]), concepts,
              st.sampled_from([0.0, 0.5, 1.0, 2.5, 3.2])),
    max_size=25,
)


@settings(max_examples=150, deadline=None)
@given(facts_strategy, concepts, st.integers(0, 6))
def test_query_properties(facts, token, k):
    kb = KnowledgeBase(facts)
    result = query_entities(kb, token, k)
    assert len(result) <= k
    assert result == query_entities(kb, token, k)
    assert query_entities(kb, token, k + 1)[: len(result)] == result
    weights = {f.weight for f in facts if token in (f.head, f.tail)}
    assert all(w in weights for _, w in result)
    assert result == brute_force_query(facts, token, k, DEFAULT_STOPLIST)
    for fid, _ in (p for postings in kb.index.values() for p in postings):
        assert 0 <= fid < len(kb.facts)
