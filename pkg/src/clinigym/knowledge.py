"""Full-text passage index with BM25 ranking, Porter stemming, snippets and boolean queries."""

from __future__ import annotations

import logging
import math
import re
import sqlite3
import threading
import unicodedata
from contextlib import closing
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, NoReturn

import attrs
import voluptuous as vol
from nltk.stem.porter import PorterStemmer

from .const import BM25_B, BM25_K1, DEFAULT_SEARCH_K, SNIPPET_LEAD, SNIPPET_WINDOW
from .exceptions import ContractViolationError, IngestionError, PassageNotFoundError, QuerySyntaxError
from .utils import iter_jsonl

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

_LOGGER = logging.getLogger(__name__)

_STEMMER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)
_WORD_RE = re.compile(r"[^\W_]+")
_QUERY_TOKEN_RE = re.compile(r'\(|\)|"[^"]*"?|[^\s()"]+')
_OPERATORS = frozenset({"AND", "OR", "NOT"})

PASSAGE_SCHEMA = vol.Schema(
    {
        vol.Required("doc_id"): vol.All(str, vol.Length(min=1)),
        vol.Required("content"): vol.All(str, vol.Length(min=1)),
        vol.Optional("source", default=""): str,
        vol.Optional("title", default=""): str,
        vol.Optional("category", default=""): str,
        vol.Optional("dataset_name", default=""): str,
    },
    extra=vol.REMOVE_EXTRA,
)


@attrs.frozen
class Passage:
    """A retrievable unit of the knowledge base."""

    doc_id: str
    content: str
    source: str = ""
    title: str = ""
    category: str = ""
    dataset_name: str = ""

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> Passage:
        """Validate a raw record and build a passage."""
        try:
            return cls(**PASSAGE_SCHEMA(dict(data)))
        except vol.Invalid as err:
            msg = f"Invalid passage record {data.get('doc_id', '<no doc_id>')!r}: {err}"
            raise IngestionError(msg) from err


@attrs.frozen
class IndexStats:
    """Counts describing an index."""

    passage_count: int
    distinct_terms: int
    average_doc_length: float


@attrs.frozen
class SearchHit:
    """One ranked search result."""

    doc_id: str
    score: float
    snippet: str


def _fold(text: str) -> str:
    """Lowercase and strip diacritics the way unicode61 does."""
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch)).lower()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    """Return the Porter stem of a single folded word."""
    return _STEMMER.stem(word, to_lowercase=False)


def tokenize(text: str) -> list[str]:
    """Split text into lowercase, diacritic-free, Porter-stemmed terms."""
    return [stem(word) for word in _WORD_RE.findall(_fold(text))]


# Boolean query tree


@attrs.frozen
class _Terms:
    stems: tuple[str, ...]


@attrs.frozen
class _Or:
    children: tuple[Any, ...]


@attrs.frozen
class _And:
    children: tuple[Any, ...]


@attrs.frozen
class _Not:
    keep: Any
    drop: Any


class _QueryParser:
    """Recursive-descent parser; AND/NOT bind tighter than OR, bare terms are OR-ed."""

    def __init__(self, query: str) -> None:
        self._query = query
        self._tokens = _QUERY_TOKEN_RE.findall(query)
        self._pos = 0

    def parse(self) -> Any:
        if not self._tokens:
            return None
        node = self._expr()
        if self._pos != len(self._tokens):
            self._fail(f"unexpected {self._tokens[self._pos]!r}")
        return node

    def _peek(self) -> str | None:
        return self._tokens[self._pos] if self._pos < len(self._tokens) else None

    def _fail(self, reason: str) -> NoReturn:
        msg = f"Malformed query {self._query!r}: {reason}"
        raise QuerySyntaxError(msg)

    def _expr(self) -> Any:
        children = [self._and_expr()]
        while (token := self._peek()) is not None and token != ")":
            if token == "OR":
                self._pos += 1
            children.append(self._and_expr())
        return children[0] if len(children) == 1 else _Or(tuple(children))

    def _and_expr(self) -> Any:
        node = self._primary()
        while (token := self._peek()) in {"AND", "NOT"}:
            self._pos += 1
            right = self._primary()
            node = _And((node, right)) if token == "AND" else _Not(node, right)
        return node

    def _primary(self) -> Any:
        token = self._peek()
        if token is None:
            self._fail("expression ends with an operator")
        if token in _OPERATORS:
            self._fail(f"operator {token} without a left operand")
        if token == ")":
            self._fail("unbalanced ')'")
        self._pos += 1
        if token == "(":
            node = self._expr()
            if self._peek() != ")":
                self._fail("missing ')'")
            self._pos += 1
            return node
        if token.startswith('"'):
            if len(token) < 2 or not token.endswith('"'):  # noqa: PLR2004
                self._fail("unterminated quote")
            return _Terms(tuple(tokenize(token[1:-1])))
        return _Terms(tuple(tokenize(token)))


def parse_query(query: str) -> Any:
    """Parse a boolean query; None for an empty query."""
    return _QueryParser(query).parse()


def _positive_stems(node: Any, out: list[str]) -> list[str]:
    """Collect scored stems in query order, skipping negated branches."""
    if isinstance(node, _Terms):
        out.extend(s for s in node.stems if s not in out)
    elif isinstance(node, _Or | _And):
        for child in node.children:
            _positive_stems(child, out)
    elif isinstance(node, _Not):
        _positive_stems(node.keep, out)
    return out


class KnowledgeStore:
    """BM25 index over passages; immutable after ingest, safe for concurrent readers."""

    def __init__(self) -> None:
        """Initialize an empty in-memory index."""
        self._passages: dict[str, Passage] = {}
        self._doc_ids: list[str] = []
        self._lengths: list[int] = []
        self._postings: dict[str, dict[int, int]] = {}
        self._total_length = 0
        self._lock = threading.Lock()

    @property
    def stats(self) -> IndexStats:
        """Return passage count, vocabulary size and mean document length."""
        count = len(self._doc_ids)
        average = self._total_length / count if count else 0.0
        return IndexStats(passage_count=count, distinct_terms=len(self._postings), average_doc_length=average)

    def __len__(self) -> int:
        """Return the number of indexed passages."""
        return len(self._doc_ids)

    def has_doc(self, doc_id: str) -> bool:
        """Return True if the doc_id is indexed."""
        return doc_id in self._passages

    def get_passage(self, doc_id: str) -> Passage:
        """Return an indexed passage."""
        try:
            return self._passages[doc_id]
        except KeyError as err:
            msg = f"Passage {doc_id!r} is not indexed"
            raise PassageNotFoundError(msg) from err

    def ingest(self, passages: Iterable[Passage | Mapping[str, Any]]) -> IndexStats:
        """
        Add a stream of passages to the index.

        The whole stream is validated before anything is indexed, so a duplicate
        doc_id leaves the index untouched.

        Args:
            passages: Passage objects or raw records with the passage fields

        Returns:
            Statistics of the index after ingestion

        """
        with self._lock:
            batch: list[Passage] = []
            seen: set[str] = set()
            for item in passages:
                passage = item if isinstance(item, Passage) else Passage.from_mapping(item)
                if passage.doc_id in seen or passage.doc_id in self._passages:
                    msg = f"Duplicate doc_id {passage.doc_id!r}"
                    raise IngestionError(msg)
                seen.add(passage.doc_id)
                batch.append(passage)

            for passage in batch:
                terms = tokenize(passage.content)
                counts: dict[str, int] = {}
                for term in terms:
                    counts[term] = counts.get(term, 0) + 1
                self._add(passage, len(terms), counts)

        stats = self.stats
        _LOGGER.info(
            "Indexed %s passages (%s total, %s terms, avg length %.2f)",
            len(batch),
            stats.passage_count,
            stats.distinct_terms,
            stats.average_doc_length,
        )
        return stats

    def ingest_jsonl(self, path: str | Path) -> IndexStats:
        """Ingest a JSONL corpus file."""

        def _records() -> Iterable[Mapping[str, Any]]:
            for line_no, record in iter_jsonl(path):
                if isinstance(record, Exception) or not isinstance(record, dict):
                    msg = f"{path}:{line_no}: not a passage record"
                    raise IngestionError(msg)
                yield record

        return self.ingest(_records())

    def _add(self, passage: Passage, length: int, counts: Mapping[str, int]) -> None:
        index = len(self._doc_ids)
        self._passages[passage.doc_id] = passage
        self._doc_ids.append(passage.doc_id)
        self._lengths.append(length)
        self._total_length += length
        for term, tf in counts.items():
            self._postings.setdefault(term, {})[index] = tf

    def _matching(self, node: Any) -> set[int]:
        if isinstance(node, _Terms):
            if not node.stems:
                return set()
            docs = set(self._postings.get(node.stems[0], ()))
            for term in node.stems[1:]:
                docs &= self._postings.get(term, {}).keys()
            return docs
        if isinstance(node, _Or):
            return set().union(*(self._matching(child) for child in node.children))
        if isinstance(node, _And):
            docs = self._matching(node.children[0])
            for child in node.children[1:]:
                docs &= self._matching(child)
            return docs
        return self._matching(node.keep) - self._matching(node.drop)

    def idf(self, term: str) -> float:
        """Return the BM25 idf of a stemmed term."""
        count = len(self._doc_ids)
        n = len(self._postings.get(term, ()))
        return math.log(1.0 + (count - n + 0.5) / (n + 0.5))

    def _score(self, index: int, stems: list[str], average: float) -> float:
        score = 0.0
        length_norm = BM25_K1 * (1.0 - BM25_B + BM25_B * self._lengths[index] / average)
        for term in stems:
            tf = self._postings.get(term, {}).get(index, 0)
            if tf:
                score += self.idf(term) * tf * (BM25_K1 + 1.0) / (tf + length_norm)
        return score

    def search(self, query: str, k: int = DEFAULT_SEARCH_K, source: str | None = None) -> list[SearchHit]:
        """Return the top-k passages by BM25, ties broken by ascending doc_id."""
        if k < 1:
            msg = f"k must be at least 1, got {k}"
            raise ContractViolationError(msg)
        node = parse_query(query)
        if node is None or not self._doc_ids:
            return []
        stems = _positive_stems(node, [])
        average = self._total_length / len(self._doc_ids)
        candidates = self._matching(node)
        if source is not None:
            candidates = {i for i in candidates if self._passages[self._doc_ids[i]].source == source}
        ranked = sorted(
            ((self._score(i, stems, average), self._doc_ids[i]) for i in candidates),
            key=lambda item: (-item[0], item[1]),
        )
        return [
            SearchHit(doc_id=doc_id, score=score, snippet=self._snippet(self._passages[doc_id].content, stems))
            for score, doc_id in ranked[:k]
        ]

    def snippet(self, doc_id: str, query: str) -> str:
        """Return a highlighted window of a passage around the first query match."""
        passage = self.get_passage(doc_id)
        node = parse_query(query)
        stems = _positive_stems(node, []) if node is not None else []
        return self._snippet(passage.content, stems)

    @staticmethod
    def _snippet(content: str, stems: list[str]) -> str:
        wanted = set(stems)
        matches = [m for m in _WORD_RE.finditer(content) if stem(_fold(m.group())) in wanted]
        if not matches:
            return content[:SNIPPET_WINDOW]
        first = matches[0].start()
        start = max(0, min(first - SNIPPET_LEAD, len(content) - SNIPPET_WINDOW))
        end = min(len(content), start + SNIPPET_WINDOW)
        parts: list[str] = []
        cursor = start
        for match in matches:
            if match.start() < start or match.end() > end:
                continue
            parts.extend((content[cursor : match.start()], f"[{match.group()}]"))
            cursor = match.end()
        parts.append(content[cursor:end])
        return "".join(parts)

    def save(self, path: str | Path) -> None:
        """Write the index to a single SQLite file, replacing any existing one."""
        target = Path(path)
        target.unlink(missing_ok=True)
        with closing(sqlite3.connect(target)) as conn:
            conn.executescript(
                """
                CREATE TABLE passages (
                    doc_id TEXT PRIMARY KEY, source TEXT, title TEXT, content TEXT,
                    category TEXT, dataset_name TEXT, length INTEGER
                );
                CREATE TABLE postings (term TEXT, doc_id TEXT, tf INTEGER);
                """
            )
            conn.executemany(
                "INSERT INTO passages VALUES (?, ?, ?, ?, ?, ?, ?)",
                (
                    (p.doc_id, p.source, p.title, p.content, p.category, p.dataset_name, self._lengths[i])
                    for i, p in enumerate(self._passages[d] for d in self._doc_ids)
                ),
            )
            conn.executemany(
                "INSERT INTO postings VALUES (?, ?, ?)",
                (
                    (term, self._doc_ids[index], tf)
                    for term, docs in self._postings.items()
                    for index, tf in docs.items()
                ),
            )
            conn.commit()
        _LOGGER.info("Saved index with %s passages to %s", len(self), target)

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeStore:
        """Open an index file written by save()."""
        source = Path(path)
        if not source.exists():
            msg = f"Index file {source} does not exist"
            raise FileNotFoundError(msg)
        store = cls()
        with closing(sqlite3.connect(f"file:{source}?mode=ro", uri=True)) as conn:
            rows = conn.execute(
                "SELECT doc_id, source, title, content, category, dataset_name, length FROM passages ORDER BY doc_id"
            ).fetchall()
            position = {}
            for doc_id, src, title, content, category, dataset_name, length in rows:
                position[doc_id] = len(store)
                passage = Passage(doc_id, content, src, title, category, dataset_name)
                store._add(passage, length, {})  # noqa: SLF001
            for term, doc_id, tf in conn.execute("SELECT term, doc_id, tf FROM postings"):
                store._postings.setdefault(term, {})[position[doc_id]] = tf  # noqa: SLF001
        _LOGGER.info("Loaded index with %s passages from %s", len(store), source)
        return store


_DEFAULT_STORE: KnowledgeStore | None = None
_DEFAULT_STORE_LOCK = threading.Lock()


def default_store() -> KnowledgeStore:
    """Return the shared store built lazily from the packaged desk corpus."""
    global _DEFAULT_STORE  # noqa: PLW0603
    with _DEFAULT_STORE_LOCK:
        if _DEFAULT_STORE is None:
            store = KnowledgeStore()
            corpus = resources.files("clinigym").joinpath("data/corpus/desk_corpus.jsonl")
            with resources.as_file(corpus) as corpus_path:
                store.ingest_jsonl(corpus_path)
            _DEFAULT_STORE = store
        return _DEFAULT_STORE
