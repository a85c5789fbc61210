"""Next-token log-probability providers.

A scorer is anything that, given a batch of token contexts, returns one
full-vocabulary vector of natural-log probabilities per context.  The
in-process :class:`ToyScorer` reads its distributions from a small table
and is the deterministic substrate for tests and benchmarks; external
model servers are reached through :mod:`tiger.remote`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    NonNormalizableError,
    ParseError,
    TokenOutOfRangeError,
    UnsupportedError,
)
from .token_index import TokenSeq

# Finite stand-in for log(0); hardcoded so independent implementations of
# the wire protocol floor to the identical double.
LOG_FLOOR = -690.7755278982137

Context = Sequence[int]


@dataclass(frozen=True)
class ScorerInfo:
    """Static facts a scorer declares about its token space."""

    vocab_size: int
    image_start: int
    image_end: int
    visual_range: Tuple[int, int]  # inclusive ids of visual payload tokens
    supports_tokenize: bool
    name: str

    def __post_init__(self) -> None:
        if not 0 <= self.image_start < self.vocab_size:
            raise TokenOutOfRangeError(f"image_start {self.image_start} outside vocab")
        if not 0 <= self.image_end < self.vocab_size:
            raise TokenOutOfRangeError(f"image_end {self.image_end} outside vocab")
        if self.image_start == self.image_end:
            raise ParseError("image_start and image_end must be distinct")
        lo, hi = self.visual_range
        if not (0 <= lo <= hi < self.vocab_size):
            raise TokenOutOfRangeError(f"visual_range {self.visual_range} outside vocab")


@dataclass(frozen=True)
class Prompt:
    """A tokenized text prompt.  Empty tokens are valid only as the null prompt."""

    tokens: TokenSeq
    text: Optional[str] = None

    def __len__(self) -> int:
        return len(self.tokens)


NULL_PROMPT = Prompt(tokens=())


class Scorer:
    """Interface shared by all scorer backends."""

    def info(self) -> ScorerInfo:
        raise NotImplementedError

    def next_logprobs(self, contexts: Sequence[Context]) -> List[np.ndarray]:
        raise NotImplementedError

    def tokenize(self, text: str) -> List[int]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class CountingScorer(Scorer):
    """Pass-through wrapper counting decode calls and scored contexts."""

    def __init__(self, inner: Scorer) -> None:
        self.inner = inner
        self.calls = 0
        self.contexts = 0

    def info(self) -> ScorerInfo:
        return self.inner.info()

    def next_logprobs(self, contexts: Sequence[Context]) -> List[np.ndarray]:
        self.calls += 1
        self.contexts += len(contexts)
        return self.inner.next_logprobs(contexts)

    def tokenize(self, text: str) -> List[int]:
        return self.inner.tokenize(text)

    def reset(self) -> None:
        self.calls = 0
        self.contexts = 0

    def close(self) -> None:
        self.inner.close()


def _check_context(context: Context, vocab_size: int) -> None:
    if len(context) == 0:
        raise ValueError("contexts must be non-empty")
    for tok in context:
        if tok < 0 or tok >= vocab_size:
            raise TokenOutOfRangeError(f"context token {tok} outside [0, {vocab_size})")


def _row_to_logprobs(
    row: Mapping[int, float], vocab_size: int, where: str
) -> np.ndarray:
    total = 0.0
    for tok, prob in row.items():
        if tok < 0 or tok >= vocab_size:
            raise TokenOutOfRangeError(f"{where}: token {tok} outside [0, {vocab_size})")
        if prob < 0:
            raise ParseError(f"{where}: negative probability {prob} for token {tok}")
        total += prob
    if total == 0.0:
        raise NonNormalizableError(f"{where}: probabilities sum to zero")
    if abs(total - 1.0) > 1e-9:
        warnings.warn(f"{where}: probabilities sum to {total!r}; renormalizing")
    vec = np.full(vocab_size, LOG_FLOOR, dtype=np.float64)
    for tok, prob in row.items():
        p = prob / total
        vec[tok] = np.log(p) if p > 0.0 else LOG_FLOOR
    vec.flags.writeable = False
    return vec


def _uniform_logprobs(vocab_size: int) -> np.ndarray:
    vec = np.full(vocab_size, np.log(1.0 / vocab_size), dtype=np.float64)
    vec.flags.writeable = False
    return vec


class ToyScorer(Scorer):
    """Pure table-backed scorer.

    Distributions come from explicit context-keyed rows; contexts with no
    row fall back to the default row, or to the uniform distribution when
    no default row was declared.  All rows are normalized at construction,
    with exact zeros floored to ``LOG_FLOOR`` so downstream log sums stay
    finite.
    """

    def __init__(
        self,
        info: ScorerInfo,
        rows: Mapping[Sequence[int], Mapping[int, float]],
        default_row: Optional[Mapping[int, float]] = None,
        word_map: Optional[Mapping[str, int]] = None,
    ) -> None:
        self._info = ScorerInfo(
            vocab_size=info.vocab_size,
            image_start=info.image_start,
            image_end=info.image_end,
            visual_range=info.visual_range,
            supports_tokenize=bool(word_map),
            name=info.name,
        )
        self._rows: Dict[TokenSeq, np.ndarray] = {
            tuple(ctx): _row_to_logprobs(row, info.vocab_size, where=f"row {list(ctx)}")
            for ctx, row in rows.items()
        }
        if default_row is not None:
            self._backoff = _row_to_logprobs(default_row, info.vocab_size, "default row")
        else:
            self._backoff = _uniform_logprobs(info.vocab_size)
        self._word_map = dict(word_map) if word_map else {}

    def info(self) -> ScorerInfo:
        return self._info

    def next_logprobs(self, contexts: Sequence[Context]) -> List[np.ndarray]:
        if len(contexts) == 0:
            raise ValueError("batch must be non-empty")
        vocab = self._info.vocab_size
        out: List[np.ndarray] = []
        for ctx in contexts:
            _check_context(ctx, vocab)
            out.append(self._rows.get(tuple(ctx), self._backoff))
        return out

    def tokenize(self, text: str) -> List[int]:
        if not self._info.supports_tokenize:
            raise UnsupportedError(f"scorer {self._info.name!r} has no tokenizer")
        words = text.split()
        tokens: List[int] = []
        for word in words:
            if word not in self._word_map:
                raise ParseError(f"word {word!r} not in the fixture vocabulary")
            tokens.append(self._word_map[word])
        return tokens


def _parse_kv(part: str, lineno: int) -> Tuple[str, str]:
    if "=" not in part:
        raise ParseError(f"line {lineno}: expected key=value, got {part!r}")
    key, _, value = part.partition("=")
    return key, value


def parse_table(text: str, name: str = "table") -> ToyScorer:
    """Parse the line-based toy table format into a scorer.

    Recognized lines::

        INFO vocab_size=<int> image_start=<int> image_end=<int> visual=<lo>-<hi>
        CTX <tok tok ...> : <tok>=<prob> ...
        DEFAULT : <tok>=<prob> ...
        WORD <string>=<tok>
    """
    info_fields: Dict[str, int] = {}
    visual: Optional[Tuple[int, int]] = None
    rows: Dict[Tuple[int, ...], Dict[int, float]] = {}
    default_row: Optional[Dict[int, float]] = None
    word_map: Dict[str, int] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind == "INFO":
            for part in rest.split():
                key, value = _parse_kv(part, lineno)
                if key == "visual":
                    lo, _, hi = value.partition("-")
                    try:
                        visual = (int(lo), int(hi))
                    except ValueError:
                        raise ParseError(f"line {lineno}: bad visual range {value!r}") from None
                elif key == "name":
                    name = value
                else:
                    try:
                        info_fields[key] = int(value)
                    except ValueError:
                        raise ParseError(f"line {lineno}: bad integer {value!r} for {key}") from None
        elif kind in ("CTX", "DEFAULT"):
            if kind == "CTX":
                ctx_text, sep, row_text = rest.partition(":")
                if not sep:
                    raise ParseError(f"line {lineno}: CTX line needs ':'")
                try:
                    ctx = tuple(int(t) for t in ctx_text.split())
                except ValueError:
                    raise ParseError(f"line {lineno}: non-integer context token") from None
            else:
                _, sep, row_text = line.partition(":")
                if not sep:
                    raise ParseError(f"line {lineno}: DEFAULT line needs ':'")
                ctx = ()
            row: Dict[int, float] = {}
            for part in row_text.split():
                key, value = _parse_kv(part, lineno)
                try:
                    tok, prob = int(key), float(value)
                except ValueError:
                    raise ParseError(f"line {lineno}: bad token=prob pair {part!r}") from None
                if tok in row:
                    raise ParseError(f"line {lineno}: duplicate token {tok}")
                row[tok] = prob
            if kind == "CTX":
                if ctx in rows:
                    raise ParseError(f"line {lineno}: duplicate CTX row for {list(ctx)}")
                rows[ctx] = row
            else:
                if default_row is not None:
                    raise ParseError(f"line {lineno}: duplicate DEFAULT row")
                default_row = row
        elif kind == "WORD":
            key, value = _parse_kv(rest.strip(), lineno)
            try:
                word_map[key] = int(value)
            except ValueError:
                raise ParseError(f"line {lineno}: bad token id {value!r}") from None
        else:
            raise ParseError(f"line {lineno}: unknown directive {kind!r}")

    for required in ("vocab_size", "image_start", "image_end"):
        if required not in info_fields:
            raise ParseError(f"table {name!r}: INFO line missing {required}")
    if visual is None:
        raise ParseError(f"table {name!r}: INFO line missing visual=<lo>-<hi>")

    info = ScorerInfo(
        vocab_size=info_fields["vocab_size"],
        image_start=info_fields["image_start"],
        image_end=info_fields["image_end"],
        visual_range=visual,
        supports_tokenize=bool(word_map),
        name=name,
    )
    return ToyScorer(info, rows, default_row, word_map)


def toy_scorer_from_table(path: str) -> ToyScorer:
    """Load a :class:`ToyScorer` from a table file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read table {path}: {exc}") from exc
    return parse_table(text, name=str(path))


def validate_logprob_vector(vec: np.ndarray, tol: float = 1e-6) -> float:
    """Return logsumexp(vec); raise if it strays from 0 beyond ``tol``.

    Also rejects positive entries beyond 1e-9 slack: every component must
    be a log-probability.
    """
    m = float(np.max(vec))
    if m > 1e-9:
        raise ValueError(f"log-probability vector has positive entry {m}")
    lse = m + float(np.log(np.sum(np.exp(vec - m))))
    if abs(lse) > tol:
        raise ValueError(f"log-probability vector off normalization: logsumexp={lse}")
    return lse
