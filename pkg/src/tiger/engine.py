"""One decoding loop for both jobs: free generation and constrained retrieval.

The unconstrained generation path and the trie-constrained retrieval beams
advance in lockstep, merging their contexts into a single scorer batch per
step, so running both costs as many decode calls as the longer of the two.
A final decision compares the generated sequence against the retrieved
top-1 under a similarity proxy and picks the winner.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Dict, Generator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyPromptError, EmptyTrieError, TigerError
from .proxies import PriorCache, ProxyConfig, ProxyKind, similarity
from .retrieval import (
    BeamConfig,
    CompletedPath,
    RankedList,
    ScoredCandidate,
    beam_search_stepper,
    candidate_json,
    paths_to_ranked,
    reverse_rerank,
)
from .scorer import Context, CountingScorer, Prompt, Scorer, ScorerInfo
from .token_index import RetrievalIndex, TokenSeq


class GenMode(enum.Enum):
    GREEDY = "greedy"
    BEAM = "beam"
    SAMPLE = "sample"


@dataclass(frozen=True)
class GenConfig:
    mode: GenMode = GenMode.GREEDY
    beam_size: int = 4  # BEAM mode width
    seed: Optional[int] = None  # SAMPLE mode must set this
    temperature: float = 1.0
    sample_top_k: int = 0  # 0: sample from the full support
    max_steps: int = 64
    restrict_to_visual: bool = True

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.mode is GenMode.SAMPLE and self.seed is None:
            raise ValueError("sample mode needs an explicit seed")
        if self.mode is GenMode.BEAM and self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass(frozen=True)
class GenOutcome:
    """A finished generation with its accumulated log scores."""

    tokens: TokenSeq
    cond_total: float
    uncond_total: Optional[float]
    steps: int


def _support_ids(info: ScorerInfo, restrict_to_visual: bool) -> np.ndarray:
    if not restrict_to_visual:
        return np.arange(info.vocab_size)
    lo, hi = info.visual_range
    ids = set(range(lo, hi + 1))
    ids.add(info.image_end)
    return np.array(sorted(ids), dtype=np.int64)


def generation_stepper(
    info: ScorerInfo,
    prompt_tokens: TokenSeq,
    cfg: GenConfig,
    null_tokens: Optional[TokenSeq] = None,
) -> Generator[List[Context], List[np.ndarray], GenOutcome]:
    """Unconstrained decoding as a coroutine (see ``beam_search_stepper``).

    Decoding starts from ``prompt + image_start`` and stops at image_end or
    after ``max_steps`` tokens, in which case image_end is appended and an
    extra scoring request covers it, so the accumulated totals always equal
    a teacher-forced pass over the returned sequence.  When ``null_tokens``
    is given, a paired content-free context rides in the same batches and
    an unconditional total is accumulated alongside.
    """
    track = null_tokens is not None
    base = tuple(prompt_tokens) + (info.image_start,)
    null_base = (tuple(null_tokens) + (info.image_start,)) if track else ()
    support = _support_ids(info, cfg.restrict_to_visual)
    rng = np.random.default_rng(cfg.seed) if cfg.mode is GenMode.SAMPLE else None

    if cfg.mode is GenMode.BEAM:
        return (yield from _beam_generation(info, base, null_base, support, cfg, track))

    tokens: List[int] = []
    cond = 0.0
    uncond = 0.0
    steps = 0
    ended = False
    while len(tokens) < cfg.max_steps:
        contexts: List[Context] = [base + tuple(tokens)]
        if track:
            contexts.append(null_base + tuple(tokens))
        vectors = yield contexts
        steps += 1
        scores = vectors[0][support]
        if cfg.mode is GenMode.GREEDY:
            pick = int(support[int(np.argmax(scores))])
        else:
            pick = _sample_token(rng, support, scores, cfg)
        cond += float(vectors[0][pick])
        if track:
            uncond += float(vectors[1][pick])
        tokens.append(pick)
        if pick == info.image_end:
            ended = True
            break
    if not ended:
        # Truncated: append image_end and score that final position too.
        contexts = [base + tuple(tokens)]
        if track:
            contexts.append(null_base + tuple(tokens))
        vectors = yield contexts
        steps += 1
        cond += float(vectors[0][info.image_end])
        if track:
            uncond += float(vectors[1][info.image_end])
        tokens.append(info.image_end)
    return GenOutcome(tuple(tokens), cond, uncond if track else None, steps)


def _sample_token(rng, support: np.ndarray, scores: np.ndarray, cfg: GenConfig) -> int:
    if cfg.sample_top_k > 0 and cfg.sample_top_k < len(support):
        order = np.argsort(-scores, kind="stable")[: cfg.sample_top_k]
        support = support[order]
        scores = scores[order]
    logits = scores / cfg.temperature
    probs = np.exp(logits - np.max(logits))
    probs /= probs.sum()
    return int(rng.choice(support, p=probs))


def _beam_generation(
    info: ScorerInfo,
    base: TokenSeq,
    null_base: TokenSeq,
    support: np.ndarray,
    cfg: GenConfig,
    track: bool,
) -> Generator[List[Context], List[np.ndarray], GenOutcome]:
    width = cfg.beam_size
    live: List[Tuple[TokenSeq, float, float]] = [((), 0.0, 0.0)]
    completed: List[CompletedPath] = []
    steps = 0
    while live and len(completed) < width and steps < cfg.max_steps:
        contexts: List[Context] = [base + prefix for prefix, _, _ in live]
        if track:
            contexts += [null_base + prefix for prefix, _, _ in live]
        vectors = yield contexts
        steps += 1
        expansions: List[Tuple[float, TokenSeq, float, float]] = []
        for i, (prefix, cond, uncond) in enumerate(live):
            scores = vectors[i][support]
            # A beam can contribute at most width live children plus the
            # single image_end completion, so width+1 candidates suffice.
            order = np.argsort(-scores, kind="stable")[: width + 1]
            uvec = vectors[len(live) + i] if track else None
            for j in order:
                tok = int(support[j])
                new_cond = cond + float(scores[j])
                new_uncond = uncond + float(uvec[tok]) if track else 0.0
                expansions.append((new_cond, prefix + (tok,), new_cond, new_uncond))
        expansions.sort(key=lambda e: (-e[0], e[1]))
        next_live: List[Tuple[TokenSeq, float, float]] = []
        for score, prefix, cond, uncond in expansions:
            if len(next_live) >= width:
                break
            if prefix[-1] == info.image_end:
                completed.append(CompletedPath(prefix, score, cond, uncond if track else None))
            else:
                next_live.append((prefix, cond, uncond))
        live = next_live

    if completed:
        completed.sort(key=lambda c: (-c.score, c.tokens))
        best = completed[0]
        return GenOutcome(best.tokens, best.cond_total, best.uncond_total, steps)
    if not live:
        raise TigerError("beam generation ran out of paths")
    # No path finished in time: force-terminate the best live beam.
    live.sort(key=lambda b: (-b[1], b[0]))
    prefix, cond, uncond = live[0]
    contexts = [base + prefix]
    if track:
        contexts.append(null_base + prefix)
    vectors = yield contexts
    steps += 1
    cond += float(vectors[0][info.image_end])
    if track:
        uncond += float(vectors[1][info.image_end])
    return GenOutcome(prefix + (info.image_end,), cond, uncond if track else None, steps)


def generate(
    scorer: Scorer,
    x: Prompt,
    cfg: GenConfig,
    null_prompt: Optional[Prompt] = None,
) -> GenOutcome:
    """Run unconstrained generation on its own."""
    stepper = generation_stepper(
        scorer.info(),
        tuple(x.tokens),
        cfg,
        null_tokens=tuple(null_prompt.tokens) if null_prompt is not None else None,
    )
    return _drive_all(scorer, [stepper])[0]


def generate_tokens(scorer: Scorer, x: Prompt, cfg: GenConfig) -> TokenSeq:
    """Unconstrained generation, tokens only."""
    return generate(scorer, x, cfg).tokens


def _drive_all(scorer: Scorer, steppers: Sequence[Generator]) -> List:
    """Advance several decode coroutines in lockstep.

    While more than one is active their per-step context batches merge into
    a single scorer call; total decode calls equal the longest stepper's
    step count.
    """
    results: List = [None] * len(steppers)
    pending: List[Optional[List[Context]]] = []
    for i, stepper in enumerate(steppers):
        try:
            pending.append(next(stepper))
        except StopIteration as stop:  # pragma: no cover - steppers always request
            results[i] = stop.value
            pending.append(None)
    while any(batch is not None for batch in pending):
        merged: List[Context] = []
        spans: List[Tuple[int, int, int]] = []
        for i, batch in enumerate(pending):
            if batch is None:
                continue
            spans.append((i, len(merged), len(merged) + len(batch)))
            merged.extend(batch)
        vectors = scorer.next_logprobs(merged)
        for i, lo, hi in spans:
            try:
                pending[i] = steppers[i].send(vectors[lo:hi])
            except StopIteration as stop:
                results[i] = stop.value
                pending[i] = None
    return results


def synchronous_generate_retrieve(
    scorer: Scorer,
    x: Prompt,
    index: RetrievalIndex,
    gen_cfg: GenConfig,
    beam_cfg: BeamConfig,
    gen_null: Optional[Prompt] = None,
) -> Tuple[GenOutcome, RankedList]:
    """Generate and retrieve in one loop of merged scorer batches.

    Outputs are bit-identical to running :func:`generate` and
    ``forward_beam_search`` separately; only the batching differs.
    """
    if index.trie.is_empty():
        raise EmptyTrieError("index trie is empty")
    info = scorer.info()
    gen_stepper = generation_stepper(
        info,
        tuple(x.tokens),
        gen_cfg,
        null_tokens=tuple(gen_null.tokens) if gen_null is not None else None,
    )
    beam_stepper = beam_search_stepper(index.trie, info, tuple(x.tokens), beam_cfg)
    gen_outcome, completed = _drive_all(scorer, [gen_stepper, beam_stepper])
    return gen_outcome, paths_to_ranked(completed, index.trie, beam_cfg)


class Chosen(enum.Enum):
    GENERATION = "generation"
    RETRIEVAL = "retrieval"


@dataclass
class UnifiedResult:
    generated: TokenSeq
    retrieved: RankedList
    chosen: Chosen
    chosen_tokens: TokenSeq
    s_gen: float
    s_ret: float
    decision_proxy: ProxyConfig
    forward_list: Optional[RankedList] = None
    reranked_list: Optional[RankedList] = None
    scorer_calls: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    prompt_text: Optional[str] = None
    prompt_tokens: TokenSeq = ()

    def to_json_dict(self, top_k: Optional[int] = None, include_timings: bool = True) -> Dict:
        items = self.retrieved.items if top_k is None else self.retrieved.items[:top_k]
        out = {
            "prompt": self.prompt_text if self.prompt_text is not None else list(self.prompt_tokens),
            "generated_tokens": list(self.generated),
            "retrieved": [candidate_json(c) for c in items],
            "chosen": self.chosen.value,
            "chosen_tokens": list(self.chosen_tokens),
            "s_gen": self.s_gen,
            "s_ret": self.s_ret,
            "decision_proxy": {
                "kind": self.decision_proxy.kind.value,
                "eta": self.decision_proxy.eta,
                "length_normalize": self.decision_proxy.length_normalize,
            },
            "scorer_calls": self.scorer_calls,
        }
        if include_timings:
            out["timings"] = self.timings
        return out


def _same_scoring(a: ProxyConfig, b: ProxyConfig) -> bool:
    return (
        a.kind is b.kind
        and a.eta == b.eta
        and tuple(a.null_prompt.tokens) == tuple(b.null_prompt.tokens)
        and a.length_normalize == b.length_normalize
    )


def decide(
    scorer: Scorer,
    x: Prompt,
    y_gen: TokenSeq,
    y_ret: ScoredCandidate,
    cfg: ProxyConfig,
    s_gen_cached: Optional[float] = None,
    s_ret_cached: Optional[float] = None,
    prior_cache: Optional[PriorCache] = None,
) -> UnifiedResult:
    """Pick between the generated sequence and the retrieved top-1.

    Scores already computed upstream can be passed in; anything missing is
    computed here.  An exact tie goes to retrieval, whose result is a real
    database image.  The raw forward proxy is rejected: its ranking is
    known to be skewed by the sequence prior, so only the debiased and
    reverse proxies qualify as judges.
    """
    if cfg.kind is ProxyKind.FORWARD:
        raise ValueError("decision proxy must be the debiased or reverse proxy")
    s_gen = s_gen_cached
    if s_gen is None:
        s_gen = similarity(scorer, x, y_gen, cfg, cache=prior_cache).value
    s_ret = s_ret_cached
    if s_ret is None:
        s_ret = similarity(scorer, x, y_ret.tokens, cfg, cache=prior_cache).value
    if s_ret >= s_gen:
        chosen, chosen_tokens = Chosen.RETRIEVAL, y_ret.tokens
    else:
        chosen, chosen_tokens = Chosen.GENERATION, y_gen
    return UnifiedResult(
        generated=y_gen,
        retrieved=RankedList(items=[y_ret], proxy_used=cfg),
        chosen=chosen,
        chosen_tokens=chosen_tokens,
        s_gen=s_gen,
        s_ret=s_ret,
        decision_proxy=cfg,
        prompt_text=x.text,
        prompt_tokens=tuple(x.tokens),
    )


@dataclass(frozen=True)
class PipelineConfig:
    beam: BeamConfig = field(default_factory=BeamConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    rrr: bool = True
    decision: ProxyConfig = field(default_factory=lambda: ProxyConfig(kind=ProxyKind.REVERSE))
    top_k: int = 10


def tiger_one(scorer: Scorer, x: Prompt, index: RetrievalIndex, cfg: PipelineConfig) -> UnifiedResult:
    """Full pipeline: synchronous decode, optional rerank, then decide.

    Every intermediate (the forward list, the reranked list, both decision
    scores) is kept on the result for inspection, together with wall-clock
    timings and the scorer call count.
    """
    if len(x.tokens) == 0:
        raise EmptyPromptError("the unified pipeline needs a non-empty prompt")
    if index.trie.is_empty():
        raise EmptyTrieError("index trie is empty")
    counting = CountingScorer(scorer)
    timings: Dict[str, float] = {}
    track_gen_prior = cfg.decision.kind is ProxyKind.DEBIASED_PMI

    t0 = time.perf_counter()
    gen_outcome, forward_list = synchronous_generate_retrieve(
        counting,
        x,
        index,
        cfg.gen,
        cfg.beam,
        gen_null=cfg.decision.null_prompt if track_gen_prior else None,
    )
    t1 = time.perf_counter()
    timings["generate_retrieve"] = t1 - t0

    reranked: Optional[RankedList] = None
    final_list = forward_list
    if cfg.rrr and forward_list.items:
        reranked = reverse_rerank(counting, x, forward_list)
        final_list = reranked
    t2 = time.perf_counter()
    timings["rerank"] = t2 - t1

    if not final_list.items:
        raise TigerError("retrieval produced no candidates; raise beam max_steps")
    top1 = final_list.top()

    s_gen_cached: Optional[float] = None
    s_ret_cached: Optional[float] = None
    if cfg.decision.kind is ProxyKind.REVERSE and not cfg.decision.length_normalize:
        if cfg.rrr and top1.reverse_score is not None:
            s_ret_cached = top1.reverse_score
    elif cfg.decision.kind is ProxyKind.DEBIASED_PMI:
        if _same_scoring(cfg.decision, cfg.beam.proxy) and top1.forward_score is not None:
            s_ret_cached = top1.forward_score
        if gen_outcome.uncond_total is not None and not cfg.decision.length_normalize:
            s_gen_cached = gen_outcome.cond_total - cfg.decision.eta * gen_outcome.uncond_total

    result = decide(
        counting,
        x,
        gen_outcome.tokens,
        top1,
        cfg.decision,
        s_gen_cached=s_gen_cached,
        s_ret_cached=s_ret_cached,
    )
    t3 = time.perf_counter()
    timings["decide"] = t3 - t2
    timings["total"] = t3 - t0

    result.retrieved = RankedList(items=final_list.items[: cfg.top_k], proxy_used=final_list.proxy_used)
    result.forward_list = forward_list
    result.reranked_list = reranked
    result.scorer_calls = counting.calls
    result.timings = timings
    return result
