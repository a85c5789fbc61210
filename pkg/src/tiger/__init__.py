"""Generative text-to-image retrieval and generation over tokenized databases."""

from .engine import (
    Chosen,
    GenConfig,
    GenMode,
    PipelineConfig,
    UnifiedResult,
    decide,
    generate,
    generate_tokens,
    synchronous_generate_retrieve,
    tiger_one,
)
from .errors import TigerError
from .proxies import (
    ProxyConfig,
    ProxyKind,
    SimilarityScore,
    debiased_pmi,
    forward_likelihood,
    prior_likelihood,
    reverse_likelihood,
    similarity,
)
from .remote import connect_external, open_scorer
from .retrieval import (
    BeamConfig,
    RankedList,
    ScoredCandidate,
    exhaustive_rank,
    forward_beam_search,
    retrieve,
    reverse_rerank,
)
from .scorer import (
    NULL_PROMPT,
    CountingScorer,
    Prompt,
    Scorer,
    ScorerInfo,
    ToyScorer,
    toy_scorer_from_table,
)
from .token_index import (
    ImageDatabase,
    ImageRecord,
    RetrievalIndex,
    Trie,
    build_trie,
    load_database,
    load_index,
    save_index,
)

__version__ = "0.1.0"
