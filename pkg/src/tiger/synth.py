"""Seeded synthetic databases and scorers for tests and benchmarks."""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .scorer import Context, Scorer, ScorerInfo, ToyScorer
from .token_index import ImageDatabase, ImageRecord, TokenSeq

# Layout shared by all synthetic instances: two reserved specials up front,
# visual payload ids right after.
IMAGE_START = 0
IMAGE_END = 1
FIRST_VISUAL = 2


def synth_info(vocab_size: int, name: str = "synth") -> ScorerInfo:
    return ScorerInfo(
        vocab_size=vocab_size,
        image_start=IMAGE_START,
        image_end=IMAGE_END,
        visual_range=(FIRST_VISUAL, vocab_size - 1),
        supports_tokenize=False,
        name=name,
    )


class HashScorer(Scorer):
    """Pure scorer with a random normalized row behind every context.

    Each row is drawn from a Dirichlet seeded by a stable hash of
    ``(seed, context)``, so results are reproducible across processes and
    independent of call order or batching.  Rows are cached.
    """

    def __init__(self, info: ScorerInfo, seed: int) -> None:
        self._info = info
        self._seed = seed
        self._cache: Dict[TokenSeq, np.ndarray] = {}

    def info(self) -> ScorerInfo:
        return self._info

    def _row(self, ctx: TokenSeq) -> np.ndarray:
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        key = (str(self._seed) + ":" + ",".join(map(str, ctx))).encode("ascii")
        digest = hashlib.blake2b(key, digest_size=16).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        probs = rng.dirichlet(np.ones(self._info.vocab_size))
        vec = np.log(probs)
        vec.flags.writeable = False
        self._cache[ctx] = vec
        return vec

    def next_logprobs(self, contexts: Sequence[Context]) -> List[np.ndarray]:
        if len(contexts) == 0:
            raise ValueError("batch must be non-empty")
        return [self._row(tuple(ctx)) for ctx in contexts]


def make_random_database(
    seed: int,
    size: int,
    vocab_size: int,
    max_payload: int = 5,
) -> ImageDatabase:
    """Random variable-length sequences; collisions across ids may occur."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(size):
        length = int(rng.integers(1, max_payload + 1))
        payload = rng.integers(FIRST_VISUAL, vocab_size, size=length)
        tokens = tuple(int(t) for t in payload) + (IMAGE_END,)
        records.append(ImageRecord(f"img{i:05d}", tokens))
    return ImageDatabase(records=records, vocab_size=vocab_size, image_end=IMAGE_END)


def tree_arity_for(size: int, depth: int, minimum: int = 6) -> int:
    """Smallest arity >= minimum whose depth-level tree holds ``size`` leaves."""
    arity = minimum
    while arity**depth < size:
        arity += 1
    return arity


def make_tree_database(size: int, vocab_size: int, depth: int, arity: int = 6) -> ImageDatabase:
    """Fixed-length sequences spread uniformly over a base-``arity`` tree.

    Every sequence has ``depth`` payload tokens plus image_end, so
    constrained search runs the same number of steps at every database
    size.
    """
    if arity**depth < size:
        raise ValueError(f"arity**depth={arity**depth} cannot host {size} sequences")
    if FIRST_VISUAL + arity * depth > vocab_size:
        raise ValueError("vocab too small for the requested tree")
    stride = (arity**depth) // size
    records = []
    for i in range(size):
        code = i * stride
        digits = []
        for _ in range(depth):
            digits.append(code % arity)
            code //= arity
        digits.reverse()
        # Distinct id block per level keeps the trie a clean tree.
        tokens = tuple(FIRST_VISUAL + level * arity + d for level, d in enumerate(digits))
        records.append(ImageRecord(f"img{i:06d}", tokens + (IMAGE_END,)))
    return ImageDatabase(records=records, vocab_size=vocab_size, image_end=IMAGE_END)


def make_uniform_scorer(vocab_size: int, name: str = "uniform") -> ToyScorer:
    """Table scorer with no explicit rows: every context is uniform."""
    return ToyScorer(synth_info(vocab_size, name), rows={})


def random_prompt_tokens(rng: np.random.Generator, vocab_size: int, max_len: int = 4) -> TokenSeq:
    length = int(rng.integers(1, max_len + 1))
    return tuple(int(t) for t in rng.integers(FIRST_VISUAL, vocab_size, size=length))
