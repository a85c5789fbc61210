"""Generative retrieval: constrained beam search, reranking, and the oracle.

``exhaustive_rank`` scores every database image with a proxy and sorts; it
is the correctness oracle but costs one scoring pass per image.
``forward_beam_search`` decodes image token sequences under trie
constraints instead, so its scorer work is bounded by the sequence length
and does not grow with the database.  ``reverse_rerank`` re-orders a
shortlist with the (stronger) reverse proxy.

Tie-breaking is deterministic everywhere: score descending, then
lexicographically smallest token prefix, then ascending image id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Generator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyInputError, EmptyTrieError
from .proxies import PriorCache, ProxyConfig, ProxyKind, reverse_likelihood, similarity
from .scorer import Context, Prompt, Scorer, ScorerInfo
from .token_index import ImageDatabase, RetrievalIndex, TokenSeq, Trie


@dataclass(frozen=True)
class BeamConfig:
    """Settings for the constrained forward search.

    The proxy must score in the prompt-to-image direction, so the reverse
    proxy is rejected here; it only enters through reranking.
    """

    beam_size: int = 800
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    max_steps: Optional[int] = None  # None: longest stored sequence

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.proxy.kind is ProxyKind.REVERSE:
            raise ValueError("beam search scores prompt-to-image; reverse proxy not allowed")


@dataclass
class ScoredCandidate:
    image_id: str
    tokens: TokenSeq
    score: float
    rank: int
    forward_score: Optional[float] = None
    reverse_score: Optional[float] = None


@dataclass
class RankedList:
    items: List[ScoredCandidate]
    proxy_used: ProxyConfig

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> List[str]:
        return [c.image_id for c in self.items]

    def top(self) -> ScoredCandidate:
        if not self.items:
            raise EmptyInputError("ranked list is empty")
        return self.items[0]


@dataclass(frozen=True)
class CompletedPath:
    """A finished beam: its full token sequence and accumulated log scores."""

    tokens: TokenSeq
    score: float
    cond_total: float
    uncond_total: Optional[float]


def candidate_json(c: ScoredCandidate) -> dict:
    """The wire shape of one ranked item."""
    out = {"rank": c.rank, "image_id": c.image_id, "score": c.score, "tokens": list(c.tokens)}
    if c.forward_score is not None:
        out["forward_score"] = c.forward_score
    if c.reverse_score is not None:
        out["reverse_score"] = c.reverse_score
    return out


def exhaustive_rank(
    scorer: Scorer,
    x: Prompt,
    db: ImageDatabase,
    cfg: ProxyConfig,
    cache: Optional[PriorCache] = None,
) -> RankedList:
    """Score every image with the proxy and sort.

    Ties break by ascending image id.  This is the oracle that beam search
    is checked against.
    """
    if cache is None and cfg.kind is ProxyKind.DEBIASED_PMI:
        cache = {}
    scored: List[ScoredCandidate] = []
    for record in db.records:
        s = similarity(scorer, x, record.tokens, cfg, cache=cache)
        cand = ScoredCandidate(record.image_id, record.tokens, s.value, rank=0)
        if cfg.kind is ProxyKind.REVERSE:
            cand.reverse_score = s.value
        else:
            cand.forward_score = s.value
        scored.append(cand)
    scored.sort(key=lambda c: (-c.score, c.image_id))
    for i, cand in enumerate(scored):
        cand.rank = i + 1
    return RankedList(items=scored, proxy_used=cfg)


class _Beam:
    __slots__ = ("prefix", "cond", "uncond")

    def __init__(self, prefix: TokenSeq, cond: float, uncond: float) -> None:
        self.prefix = prefix
        self.cond = cond
        self.uncond = uncond


def beam_search_stepper(
    trie: Trie,
    info: ScorerInfo,
    prompt_tokens: TokenSeq,
    cfg: BeamConfig,
) -> Generator[List[Context], List[np.ndarray], List[CompletedPath]]:
    """Constrained beam search as a coroutine.

    Yields one batch of contexts per decode step and expects the matching
    log-prob vectors to be sent back.  For the debiased proxy each live
    beam keeps a paired null-prompt context in the same batch, so one step
    still costs one scorer call.
    """
    if trie.is_empty():
        raise EmptyTrieError("cannot search an empty trie")
    pmi = cfg.proxy.kind is ProxyKind.DEBIASED_PMI
    eta = cfg.proxy.eta
    max_steps = cfg.max_steps if cfg.max_steps is not None else trie.max_depth
    beam_width = cfg.beam_size

    cond_base = tuple(prompt_tokens) + (info.image_start,)
    uncond_base = tuple(cfg.proxy.null_prompt.tokens) + (info.image_start,)

    def effective(cond: float, uncond: float) -> float:
        return cond - eta * uncond if pmi else cond

    live: List[_Beam] = [_Beam((), 0.0, 0.0)]
    completed: List[CompletedPath] = []
    steps = 0
    while live and len(completed) < beam_width and steps < max_steps:
        allowed = [sorted(trie.allowed_next(b.prefix)) for b in live]
        live = [b for b, a in zip(live, allowed) if a]
        allowed = [a for a in allowed if a]
        if not live:
            break
        contexts: List[Context] = [cond_base + b.prefix for b in live]
        if pmi:
            contexts += [uncond_base + b.prefix for b in live]
        vectors = yield contexts
        steps += 1

        expansions: List[Tuple[float, TokenSeq, float, float]] = []
        for i, beam in enumerate(live):
            cvec = vectors[i]
            uvec = vectors[len(live) + i] if pmi else None
            for tok in allowed[i]:
                cond = beam.cond + float(cvec[tok])
                uncond = beam.uncond + float(uvec[tok]) if pmi else 0.0
                expansions.append((effective(cond, uncond), beam.prefix + (tok,), cond, uncond))
        expansions.sort(key=lambda e: (-e[0], e[1]))

        next_live: List[_Beam] = []
        for score, prefix, cond, uncond in expansions:
            if len(next_live) >= beam_width:
                break
            if prefix[-1] == info.image_end:
                completed.append(
                    CompletedPath(prefix, score, cond, uncond if pmi else None)
                )
            else:
                next_live.append(_Beam(prefix, cond, uncond))
        live = next_live

    completed.sort(key=lambda c: (-c.score, c.tokens))
    return completed


def drive(stepper, scorer: Scorer):
    """Run a decode coroutine to completion against a scorer."""
    try:
        batch = next(stepper)
        while True:
            batch = stepper.send(scorer.next_logprobs(batch))
    except StopIteration as stop:
        return stop.value


def paths_to_ranked(
    paths: Sequence[CompletedPath], trie: Trie, cfg: BeamConfig
) -> RankedList:
    """Expand finished beams into ranked image candidates.

    A sequence shared by several images expands into all of them in
    ascending id order; the list is then cut to the beam width.
    """
    items: List[ScoredCandidate] = []
    for path in paths:
        score = path.score / len(path.tokens) if cfg.proxy.length_normalize else path.score
        for image_id in trie.lookup(path.tokens):
            items.append(
                ScoredCandidate(
                    image_id=image_id,
                    tokens=path.tokens,
                    score=score,
                    rank=0,
                    forward_score=score,
                )
            )
    items.sort(key=lambda c: (-c.score, c.tokens, c.image_id))
    items = items[: cfg.beam_size]
    for i, cand in enumerate(items):
        cand.rank = i + 1
    return RankedList(items=items, proxy_used=cfg.proxy)


def forward_beam_search(
    scorer: Scorer,
    x: Prompt,
    trie: Trie,
    db: ImageDatabase,
    cfg: BeamConfig,
) -> RankedList:
    """Trie-constrained beam search over the stored sequences.

    Scorer decode calls are bounded by ``max_steps`` regardless of the
    database size.
    """
    del db  # the trie carries everything needed; kept for signature parity
    stepper = beam_search_stepper(trie, scorer.info(), tuple(x.tokens), cfg)
    completed = drive(stepper, scorer)
    return paths_to_ranked(completed, trie, cfg)


def reverse_rerank(scorer: Scorer, x: Prompt, candidates: RankedList) -> RankedList:
    """Re-score a shortlist with the reverse proxy and re-sort.

    The output is a permutation of the input items; ties break by
    ascending image id.
    """
    if not candidates.items:
        raise EmptyInputError("nothing to rerank")
    rescored: List[ScoredCandidate] = []
    for item in candidates.items:
        rev = reverse_likelihood(scorer, x, item.tokens).value
        rescored.append(replace(item, score=rev, reverse_score=rev))
    rescored.sort(key=lambda c: (-c.score, c.image_id))
    for i, cand in enumerate(rescored):
        cand.rank = i + 1
    return RankedList(items=rescored, proxy_used=ProxyConfig(kind=ProxyKind.REVERSE))


def retrieve(
    scorer: Scorer,
    x: Prompt,
    index: "RetrievalIndex",
    beam_cfg: BeamConfig,
    rrr: bool = True,
    top_k: Optional[int] = None,
) -> RankedList:
    """Forward beam search, optional reverse reranking, then truncation."""
    ranked = forward_beam_search(scorer, x, index.trie, index.db, beam_cfg)
    if rrr and ranked.items:
        ranked = reverse_rerank(scorer, x, ranked)
    if top_k is not None:
        ranked = RankedList(items=ranked.items[:top_k], proxy_used=ranked.proxy_used)
    return ranked
