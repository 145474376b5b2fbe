import math

import numpy as np
import pytest

from clinigym.exceptions import ContractViolationError, IngestionError, PassageNotFoundError, QuerySyntaxError
from clinigym.knowledge import KnowledgeStore, Passage, parse_query, tokenize

PASSAGES = [
    {"doc_id": "d1", "content": "Sepsis requires early antibiotics and fluid resuscitation.", "source": "wikipedia"},
    {"doc_id": "d2", "content": "Septic shock: vasopressors after fluids. Sepsis kills.", "source": "pubmed"},
    {"doc_id": "d3", "content": "Hypertension treatments include ACE inhibitors and thiazides.", "source": "pubmed"},
    {"doc_id": "d4", "content": "ACE inhibitors raise bradykinin, which causes a dry cough.", "source": "wikipedia"},
    {"doc_id": "d5", "content": "Fluid balance in heart failure is guided by diuretics.", "source": "pubmed"},
]


@pytest.fixture
def small_store():
    store = KnowledgeStore()
    store.ingest(PASSAGES)
    return store


def _bm25(query_terms, docs):
    """Independent BM25 over tokenized documents."""
    count = len(docs)
    average = sum(len(d) for d in docs.values()) / count
    scores = {}
    for doc_id, terms in docs.items():
        score = 0.0
        for term in query_terms:
            tf = terms.count(term)
            if not tf:
                continue
            n = sum(term in d for d in docs.values())
            idf = math.log(1 + (count - n + 0.5) / (n + 0.5))
            score += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len(terms) / average))
        if score:
            scores[doc_id] = score
    return scores


def test_tokenize():
    assert tokenize("Hypertension treatments") == ["hypertens", "treatment"]
    assert tokenize("") == []
    assert tokenize("Café-au-lait spots") == tokenize("cafe au lait spot")


def test_ingest_stats(small_store):
    stats = small_store.stats
    assert stats.passage_count == len(small_store) == 5
    assert stats.average_doc_length == pytest.approx(sum(len(tokenize(p["content"])) for p in PASSAGES) / 5)
    assert small_store.has_doc("d3")
    assert small_store.get_passage("d4").source == "wikipedia"


def test_duplicate_doc_id_leaves_index_untouched(small_store):
    with pytest.raises(IngestionError, match="d6"):
        small_store.ingest(
            [{"doc_id": "d6", "content": "new passage"}, {"doc_id": "d6", "content": "duplicate"}]
        )
    with pytest.raises(IngestionError, match="d1"):
        small_store.ingest([{"doc_id": "d1", "content": "already indexed"}])
    assert len(small_store) == 5
    assert not small_store.has_doc("d6")


def test_invalid_passage_record():
    with pytest.raises(IngestionError):
        Passage.from_mapping({"doc_id": "x"})


def test_ingest_jsonl_rejects_bad_lines(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"doc_id": "a", "content": "fever"}\nnot json\n', encoding="utf-8")
    store = KnowledgeStore()
    with pytest.raises(IngestionError, match=":2:"):
        store.ingest_jsonl(path)
    assert len(store) == 0


def test_idf(small_store):
    (sepsis,) = tokenize("sepsis")
    assert small_store.idf(sepsis) == pytest.approx(math.log(1 + 3.5 / 2.5))
    assert small_store.idf("absent") == pytest.approx(math.log(1 + 5.5 / 0.5))


@pytest.mark.parametrize("query", ["sepsis fluid", "ACE inhibitors", "fluid resuscitation bradykinin"])
def test_search_matches_bm25(small_store, query):
    docs = {p["doc_id"]: tokenize(p["content"]) for p in PASSAGES}
    expected = _bm25(list(dict.fromkeys(tokenize(query))), docs)
    hits = small_store.search(query, k=10)
    assert [h.doc_id for h in hits] == sorted(expected, key=lambda d: (-expected[d], d))
    for hit in hits:
        assert hit.score == pytest.approx(expected[hit.doc_id])


CORPUS_WORDS = (
    "sepsis", "fluid", "lactate", "antibiotic", "pressure", "cough", "fever", "renal", "cardiac", "insulin",
    "glucose", "stroke", "warfarin", "bleeding", "oxygen", "asthma", "steroid", "rash", "pain", "dose",
)  # fmt: skip


def test_search_matches_bm25_on_random_corpora():
    rng = np.random.default_rng(88)
    for corpus in range(10):
        passages = [
            {
                "doc_id": f"c{corpus}-{i:03d}",
                "content": " ".join(rng.choice(CORPUS_WORDS, size=int(rng.integers(1, 30)))),
                "source": "pubmed",
            }
            for i in range(100)
        ]
        store = KnowledgeStore()
        store.ingest(passages)
        docs = {p["doc_id"]: tokenize(p["content"]) for p in passages}
        for _ in range(100):
            query = " ".join(rng.choice(CORPUS_WORDS, size=int(rng.integers(1, 4))))
            expected = _bm25(list(dict.fromkeys(tokenize(query))), docs)
            hits = store.search(query, k=100)
            assert {h.doc_id for h in hits} == set(expected)
            for hit in hits:
                assert abs(hit.score - expected[hit.doc_id]) < 1e-9
            scores = [h.score for h in hits]
            assert scores == sorted(scores, reverse=True)


def test_search_top_k_and_source(small_store):
    assert len(small_store.search("sepsis fluid", k=1)) == 1
    assert {h.doc_id for h in small_store.search("sepsis fluid", source="pubmed")} == {"d2", "d5"}
    assert small_store.search("", k=3) == []
    with pytest.raises(ContractViolationError):
        small_store.search("sepsis", k=0)


def test_boolean_queries(small_store):
    assert {h.doc_id for h in small_store.search("sepsis AND fluid")} == {"d1", "d2"}
    assert {h.doc_id for h in small_store.search("fluid NOT sepsis")} == {"d5"}
    assert {h.doc_id for h in small_store.search("(bradykinin OR thiazides) AND ACE")} == {"d3", "d4"}
    assert {h.doc_id for h in small_store.search('"dry cough"')} == {"d4"}


@pytest.mark.parametrize("query", ["sepsis AND", "OR fluid", "(sepsis", "sepsis)", '"unterminated'])
def test_malformed_queries(small_store, query):
    with pytest.raises(QuerySyntaxError):
        small_store.search(query)


def test_parse_query_empty():
    assert parse_query("   ") is None


def test_snippet_highlights(store):
    snippet = store.snippet("wiki-sepsis", "sepsis")
    assert "[sepsis]" in snippet.casefold()
    assert len(snippet.replace("[", "").replace("]", "")) <= 240


def test_snippet_fallback_and_unknown(small_store):
    assert small_store.snippet("d3", "insulin") == PASSAGES[2]["content"][:240]
    assert small_store.snippet("d4", "cough") == "ACE inhibitors raise bradykinin, which causes a dry [cough]."
    with pytest.raises(PassageNotFoundError):
        small_store.snippet("missing", "sepsis")


def test_snippet_window_leads_into_match():
    content = "filler " * 60 + "anaphylaxis needs epinephrine " + "tail " * 60
    store = KnowledgeStore()
    store.ingest([{"doc_id": "long", "content": content}])
    snippet = store.snippet("long", "anaphylaxis")
    assert snippet.startswith(content[content.index("anaphylaxis") - 60 : content.index("anaphylaxis")])
    assert "[anaphylaxis]" in snippet


def test_save_and_load(tmp_path, small_store):
    path = tmp_path / "index.sqlite"
    small_store.save(path)
    loaded = KnowledgeStore.load(path)
    assert loaded.stats == small_store.stats
    for query in ("sepsis fluid", "ACE AND cough", "fluid NOT sepsis"):
        assert loaded.search(query) == small_store.search(query)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        KnowledgeStore.load(tmp_path / "missing.sqlite")


def test_default_store(store):
    assert len(store) == 30
    assert store.has_doc("pmid-10001001")
    assert {store.get_passage(h.doc_id).source for h in store.search("sepsis", source="wikipedia")} == {"wikipedia"}
