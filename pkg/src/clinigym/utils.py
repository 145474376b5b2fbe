"""Utility functions for clinigym."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

_LOGGER = logging.getLogger(__name__)

# Whitespace-plus-punctuation tokenizer used for token counts of text actions
_COUNT_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def canonical_json(value: Any) -> str:
    """
    Serialize a value to its canonical JSON text.

    Keys are sorted, separators carry no whitespace and non-ASCII characters
    are kept as-is so the UTF-8 encoding of the text is the canonical byte form.

    Args:
        value: Any JSON-serializable value

    Returns:
        The canonical JSON text

    """
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def md5_hex(value: Any) -> str:
    """Return the MD5 digest of the canonical form of a value."""
    return hashlib.md5(canonical_json(value).encode("utf-8"), usedforsecurity=False).hexdigest()


def count_tokens(text: str) -> int:
    """Count whitespace-plus-punctuation tokens."""
    return len(_COUNT_TOKEN_RE.findall(text))


def derive_seed(*parts: int) -> np.random.Generator:
    """Return a generator seeded from a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([abs(int(p)) for p in parts]))


def format_float(value: float) -> str:
    """Format a float for byte-stable CSV output."""
    return f"{value:.10g}"


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """
    Yield (line number, decoded value) for every non-blank line of a JSONL file.

    Lines that fail to decode are yielded as ValueError instances so callers can
    report them with their line number instead of aborting.
    """
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as err:
                yield line_no, ValueError(f"invalid JSON: {err.msg}")


def iter_json_records(path: str | Path) -> Iterator[tuple[int, Any]]:
    """
    Yield (line number, record) from a JSON array file or a JSONL file.

    For arrays the line number is the one on which each element starts.
    """
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped.startswith("["):
        yield from iter_jsonl(path)
        return

    decoder = json.JSONDecoder()
    pos = text.index("[") + 1
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            return
        line_no = text.count("\n", 0, pos) + 1
        try:
            record, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as err:
            yield line_no, ValueError(f"invalid JSON: {err.msg}")
            return
        yield line_no, record


def write_jsonl(path: str | Path, records: Iterable[Any]) -> int:
    """Write records as one canonical JSON document per line; return the count."""
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(canonical_json(record))
            handle.write("\n")
            count += 1
    _LOGGER.debug("Wrote %s records to %s", count, path)
    return count
