"""Tokenized image database and the prefix trie over its sequences.

Every image is stored as a sequence of discrete visual token ids that ends
with a reserved ``image_end`` token.  The trie answers "which tokens may
legally extend this prefix" during constrained decoding and maps complete
sequences back to image ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .errors import (
    DuplicateIdError,
    EmptyDatabaseError,
    IndexIoError,
    ParseError,
    TokenOutOfRangeError,
)

TokenSeq = Tuple[int, ...]


@dataclass(frozen=True)
class ImageRecord:
    """One database entry: an image id plus its visual token sequence."""

    image_id: str
    tokens: TokenSeq
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass
class ImageDatabase:
    """All records of one index, with the vocabulary bounds they satisfy."""

    records: List[ImageRecord]
    vocab_size: int
    image_end: int

    def __post_init__(self) -> None:
        if not self.records:
            raise EmptyDatabaseError("database holds no records")
        seen = set()
        for record in self.records:
            if record.image_id in seen:
                raise DuplicateIdError(f"duplicate image_id {record.image_id!r}")
            seen.add(record.image_id)
            for tok in record.tokens:
                if tok < 0 or tok >= self.vocab_size:
                    raise TokenOutOfRangeError(
                        f"record {record.image_id!r}: token {tok} outside [0, {self.vocab_size})"
                    )
            if record.tokens.count(self.image_end) != 1 or record.tokens[-1] != self.image_end:
                raise ParseError(
                    f"record {record.image_id!r} must end with image_end {self.image_end}, "
                    "appearing exactly once"
                )

    def __len__(self) -> int:
        return len(self.records)

    def max_sequence_length(self) -> int:
        return max(len(r.tokens) for r in self.records)

    def ids(self) -> List[str]:
        return [r.image_id for r in self.records]


class _TrieNode:
    __slots__ = ("children", "terminal_ids")

    def __init__(self) -> None:
        self.children: Dict[int, "_TrieNode"] = {}
        self.terminal_ids: List[str] = []

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, _TrieNode):
            return NotImplemented
        return (
            self.terminal_ids == other.terminal_ids
            and self.children.keys() == other.children.keys()
            and all(self.children[t] == other.children[t] for t in self.children)
        )


class Trie:
    """Prefix tree over the stored token sequences.

    Terminal nodes are exactly the nodes reached by a complete stored
    sequence.  Because every stored sequence ends with ``image_end``,
    terminals never have children, so "prefix of another sequence" ambiguity
    cannot arise.
    """

    def __init__(self) -> None:
        self.root = _TrieNode()
        self.node_count = 1
        self.max_depth = 0

    def _insert(self, tokens: Sequence[int], image_id: str) -> None:
        node = self.root
        for tok in tokens:
            child = node.children.get(tok)
            if child is None:
                child = _TrieNode()
                node.children[tok] = child
                self.node_count += 1
            node = child
        node.terminal_ids.append(image_id)
        self.max_depth = max(self.max_depth, len(tokens))

    def _walk(self, prefix: Sequence[int]) -> Optional[_TrieNode]:
        node = self.root
        for tok in prefix:
            node = node.children.get(tok)
            if node is None:
                return None
        return node

    def allowed_next(self, prefix: Sequence[int]) -> Set[int]:
        """Tokens t such that some stored sequence starts with prefix + [t].

        Total over all prefixes: an unknown prefix (or a complete sequence,
        whose node is a childless terminal) yields the empty set.
        """
        node = self._walk(prefix)
        if node is None:
            return set()
        return set(node.children.keys())

    def lookup(self, sequence: Sequence[int]) -> List[str]:
        """Sorted image ids whose stored tokens equal ``sequence`` exactly."""
        node = self._walk(sequence)
        if node is None:
            return []
        return list(node.terminal_ids)

    def is_empty(self) -> bool:
        return not self.root.children

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trie):
            return NotImplemented
        return self.root == other.root


def build_trie(db: ImageDatabase) -> Trie:
    """Build the prefix trie for a database.

    The structure is independent of record order; terminal id lists are
    sorted so that sequence collisions expand deterministically.
    """
    trie = Trie()
    for record in db.records:
        trie._insert(record.tokens, record.image_id)
    _sort_terminals(trie.root)
    return trie


def _sort_terminals(node: _TrieNode) -> None:
    node.terminal_ids.sort()
    for child in node.children.values():
        _sort_terminals(child)


def _validate_tokens(
    image_id: str, raw: Sequence[int], vocab_size: int, image_end: int, lineno: int
) -> TokenSeq:
    for tok in raw:
        if tok < 0 or tok >= vocab_size:
            raise TokenOutOfRangeError(
                f"line {lineno}: token {tok} outside [0, {vocab_size}) for record {image_id!r}"
            )
    tokens = tuple(raw)
    if image_end not in tokens:
        tokens = tokens + (image_end,)
    if tokens.count(image_end) != 1 or tokens[-1] != image_end:
        raise ParseError(
            f"line {lineno}: image_end token {image_end} must appear exactly once, "
            f"as the final element (record {image_id!r})"
        )
    return tokens


def _parse_index_lines(
    lines: Iterable[str],
    vocab_size: Optional[int],
    image_end: Optional[int],
    source: str,
) -> ImageDatabase:
    header_vocab: Optional[int] = None
    header_end: Optional[int] = None
    rows: List[Tuple[int, str, List[int]]] = []

    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("vocab_size="):
                header_vocab = _parse_int(body.split("=", 1)[1], lineno, "vocab_size")
            elif body.startswith("image_end="):
                header_end = _parse_int(body.split("=", 1)[1], lineno, "image_end")
            continue
        if "\t" not in line:
            raise ParseError(f"line {lineno}: expected 'image_id<TAB>tokens' in {source}")
        image_id, _, payload = line.partition("\t")
        if not image_id:
            raise ParseError(f"line {lineno}: empty image_id")
        toks = [_parse_int(part, lineno, "token") for part in payload.split()]
        rows.append((lineno, image_id, toks))

    if vocab_size is None:
        vocab_size = header_vocab
    if image_end is None:
        image_end = header_end
    if vocab_size is None or image_end is None:
        raise ParseError(
            f"{source}: vocab_size and image_end must come from arguments or '#' headers"
        )
    if not 0 <= image_end < vocab_size:
        raise TokenOutOfRangeError(f"image_end {image_end} outside [0, {vocab_size})")

    records: List[ImageRecord] = []
    seen: Set[str] = set()
    for lineno, image_id, toks in rows:
        if image_id in seen:
            raise DuplicateIdError(f"line {lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        records.append(
            ImageRecord(image_id, _validate_tokens(image_id, toks, vocab_size, image_end, lineno))
        )

    if not records:
        raise EmptyDatabaseError(f"{source}: no records")
    return ImageDatabase(records=records, vocab_size=vocab_size, image_end=image_end)


def _parse_int(text: str, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"line {lineno}: {what} {text!r} is not an integer") from None


def load_database(
    path: str, vocab_size: Optional[int] = None, image_end: Optional[int] = None
) -> ImageDatabase:
    """Load an index file (``image_id<TAB>tok tok ...`` per line).

    ``image_end`` is appended to any sequence that lacks it.  Values passed
    as arguments override the optional ``#vocab_size=`` / ``#image_end=``
    header lines.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return _parse_index_lines(fh, vocab_size, image_end, source=str(path))
    except OSError as exc:
        raise IndexIoError(f"cannot read index {path}: {exc}") from exc


def save_index(db: ImageDatabase, path: str) -> None:
    """Write a database back to the line format, headers included.

    Record order is preserved, so save/load/save round-trips byte-exactly.
    Record metadata is in-memory only and is not persisted.
    """
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#vocab_size={db.vocab_size}\n")
            fh.write(f"#image_end={db.image_end}\n")
            for record in db.records:
                fh.write(f"{record.image_id}\t{' '.join(str(t) for t in record.tokens)}\n")
    except OSError as exc:
        raise IndexIoError(f"cannot write index {path}: {exc}") from exc


def load_index(path: str) -> ImageDatabase:
    """Load an index previously written by :func:`save_index`."""
    return load_database(path)


@dataclass
class RetrievalIndex:
    """Database plus its trie, ready for constrained decoding.

    The trie is never persisted; it is rebuilt deterministically from the
    database on load.
    """

    db: ImageDatabase
    trie: Trie

    @classmethod
    def from_database(cls, db: ImageDatabase) -> "RetrievalIndex":
        return cls(db=db, trie=build_trie(db))

    @classmethod
    def from_file(
        cls, path: str, vocab_size: Optional[int] = None, image_end: Optional[int] = None
    ) -> "RetrievalIndex":
        return cls.from_database(load_database(path, vocab_size, image_end))
