"""Training-free similarity proxies between a prompt and a token sequence.

Three scores, all plain sums of per-step next-token log-probabilities:

* forward: log-likelihood of the image tokens given the prompt,
* debiased: forward minus ``eta`` times the null-prompt (prior) likelihood,
  which cancels the sequence's popularity bias,
* reverse: log-likelihood of the prompt tokens given the image.

Scores live in the log domain and are unnormalized; only their ordering
over candidates matters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import EmptyPromptError
from .scorer import NULL_PROMPT, Prompt, Scorer
from .token_index import TokenSeq


class ProxyKind(enum.Enum):
    FORWARD = "forward"
    DEBIASED_PMI = "pmi"
    REVERSE = "reverse"


@dataclass(frozen=True)
class ProxyConfig:
    kind: ProxyKind = ProxyKind.FORWARD
    eta: float = 1.0  # debias strength; only DEBIASED_PMI reads it
    null_prompt: Prompt = NULL_PROMPT
    length_normalize: bool = False


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    positions: int
    components: Dict[str, float] = field(default_factory=dict)


PriorCache = Dict[Tuple[TokenSeq, TokenSeq], SimilarityScore]


def _teacher_forced_sum(scorer: Scorer, prefix: Sequence[int], targets: Sequence[int]) -> float:
    """Sum of log p(targets[i] | prefix + targets[:i]), accumulated left to right.

    All step contexts are known up front, so this is a single batched call.
    """
    contexts = [tuple(prefix) + tuple(targets[:i]) for i in range(len(targets))]
    vectors = scorer.next_logprobs(contexts)
    total = 0.0
    for i, vec in enumerate(vectors):
        total += float(vec[targets[i]])
    return total


def forward_likelihood(scorer: Scorer, x: Prompt, y: TokenSeq) -> SimilarityScore:
    """log p(Y | X): score every token of Y, the final image_end included.

    The initial context is the prompt tokens followed by image_start.
    """
    info = scorer.info()
    if not y or y[-1] != info.image_end:
        raise ValueError("image token sequence must end with image_end")
    prefix = tuple(x.tokens) + (info.image_start,)
    value = _teacher_forced_sum(scorer, prefix, y)
    return SimilarityScore(value=value, positions=len(y), components={"conditional": value})


def prior_likelihood(
    scorer: Scorer,
    y: TokenSeq,
    null_prompt: Prompt = NULL_PROMPT,
    cache: Optional[PriorCache] = None,
) -> SimilarityScore:
    """log p(Y): the forward likelihood under a content-free prompt."""
    if cache is not None:
        key = (tuple(y), tuple(null_prompt.tokens))
        hit = cache.get(key)
        if hit is not None:
            return hit
    score = forward_likelihood(scorer, null_prompt, y)
    score = SimilarityScore(score.value, score.positions, components={"prior": score.value})
    if cache is not None:
        cache[key] = score
    return score


def debiased_pmi(
    scorer: Scorer,
    x: Prompt,
    y: TokenSeq,
    cfg: ProxyConfig,
    cache: Optional[PriorCache] = None,
) -> SimilarityScore:
    """log p(Y | X) - eta * log p(Y).  At eta = 0 this is the forward score."""
    conditional = forward_likelihood(scorer, x, y)
    prior = prior_likelihood(scorer, y, cfg.null_prompt, cache=cache)
    value = conditional.value - cfg.eta * prior.value
    return SimilarityScore(
        value=value,
        positions=conditional.positions,
        components={"conditional": conditional.value, "prior": prior.value},
    )


def reverse_likelihood(scorer: Scorer, x: Prompt, y: TokenSeq) -> SimilarityScore:
    """log p(X | Y): score the prompt tokens with the image as context.

    The image tokens (image_end retained) are the whole initial context;
    no terminator is appended to the prompt.
    """
    if len(x.tokens) == 0:
        raise EmptyPromptError("reverse likelihood needs a non-empty prompt")
    value = _teacher_forced_sum(scorer, tuple(y), x.tokens)
    return SimilarityScore(value=value, positions=len(x.tokens), components={"reverse": value})


def similarity(
    scorer: Scorer,
    x: Prompt,
    y: TokenSeq,
    cfg: ProxyConfig,
    cache: Optional[PriorCache] = None,
) -> SimilarityScore:
    """Dispatch to the configured proxy, optionally length-normalizing."""
    if cfg.kind is ProxyKind.FORWARD:
        score = forward_likelihood(scorer, x, y)
    elif cfg.kind is ProxyKind.DEBIASED_PMI:
        score = debiased_pmi(scorer, x, y, cfg, cache=cache)
    elif cfg.kind is ProxyKind.REVERSE:
        score = reverse_likelihood(scorer, x, y)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown proxy kind {cfg.kind!r}")
    if cfg.length_normalize:
        score = SimilarityScore(
            value=score.value / score.positions,
            positions=score.positions,
            components=score.components,
        )
    return score
