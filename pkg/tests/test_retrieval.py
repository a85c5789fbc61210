import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T1_FORWARD, T1_REVERSE
from tiger.errors import EmptyInputError, EmptyPromptError, EmptyTrieError
from tiger.proxies import ProxyConfig, ProxyKind
from tiger.retrieval import (
    BeamConfig,
    RankedList,
    exhaustive_rank,
    forward_beam_search,
    retrieve,
    reverse_rerank,
)
from tiger.scorer import CountingScorer, Prompt, ToyScorer
from tiger.synth import (
    HashScorer,
    make_random_database,
    random_prompt_tokens,
    synth_info,
)
from tiger.token_index import ImageDatabase, ImageRecord, RetrievalIndex, Trie, build_trie
from toy_families import build_bias_family

FWD = ProxyConfig(kind=ProxyKind.FORWARD)
PMI = ProxyConfig(kind=ProxyKind.DEBIASED_PMI, eta=1.0)
REV = ProxyConfig(kind=ProxyKind.REVERSE)


def random_instance(seed, size=8, vocab=16):
    scorer = HashScorer(synth_info(vocab), seed)
    db = make_random_database(seed, size=size, vocab_size=vocab)
    rng = np.random.default_rng(seed + 777)
    prompt = Prompt(tokens=random_prompt_tokens(rng, vocab))
    return scorer, db, prompt


class TestExhaustiveRank:
    def test_fixture_forward_ordering(self, t1_scorer, t1_db, t1_prompt):
        ranked = exhaustive_rank(t1_scorer, t1_prompt, t1_db, FWD)
        assert ranked.ids() == ["C", "A", "B"]
        for cand in ranked.items:
            assert cand.score == pytest.approx(T1_FORWARD[cand.image_id], abs=1e-12)
        assert [c.rank for c in ranked.items] == [1, 2, 3]

    def test_fixture_reverse_ordering(self, t1_scorer, t1_db, t1_prompt):
        ranked = exhaustive_rank(t1_scorer, t1_prompt, t1_db, REV)
        assert ranked.ids() == ["B", "A", "C"]
        for cand in ranked.items:
            assert cand.score == pytest.approx(T1_REVERSE[cand.image_id], abs=1e-12)

    def test_single_image_db(self, t1_scorer, t1_prompt):
        db = ImageDatabase([ImageRecord("only", (101, 102, 199))], 300, 199)
        for cfg in (FWD, PMI, REV):
            ranked = exhaustive_rank(t1_scorer, t1_prompt, db, cfg)
            assert ranked.ids() == ["only"] and ranked.items[0].rank == 1

    def test_identical_sequences_tie_break_by_id(self, t1_scorer, t1_prompt):
        db = ImageDatabase(
            [ImageRecord("zz", (101, 102, 199)), ImageRecord("aa", (101, 102, 199))], 300, 199
        )
        ranked = exhaustive_rank(t1_scorer, t1_prompt, db, FWD)
        assert ranked.ids() == ["aa", "zz"]


class TestForwardBeamSearch:
    def test_full_beam_equals_oracle_on_fixture(self, t1_scorer, t1_db, t1_index, t1_prompt):
        ranked = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3)
        )
        oracle = exhaustive_rank(t1_scorer, t1_prompt, t1_db, FWD)
        assert ranked.ids() == oracle.ids()
        assert [c.score for c in ranked.items] == [c.score for c in oracle.items]

    def test_beam_one_follows_greedy_chain(self, t1_scorer, t1_db, t1_index, t1_prompt):
        # The fixture root is a 0.5/0.5 tie; the lexicographic tie-break
        # takes 101, whose argmax continuation is 102 -> 199: image A.
        ranked = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=1)
        )
        assert ranked.ids() == ["A"]

    def test_beam_one_with_dominant_chain(self):
        info = synth_info(16)
        rows = {
            (0,): {2: 0.7, 5: 0.3},
            (0, 2): {3: 1.0},
            (0, 2, 3): {1: 1.0},
            (0, 5): {6: 1.0},
            (0, 5, 6): {1: 1.0},
        }
        scorer = ToyScorer(info, rows)
        db = ImageDatabase(
            [ImageRecord("low", (5, 6, 1)), ImageRecord("top", (2, 3, 1))], 16, 1
        )
        index = RetrievalIndex.from_database(db)
        ranked = forward_beam_search(
            scorer, Prompt(tokens=()), index.trie, db, BeamConfig(beam_size=1)
        )
        assert ranked.ids() == ["top"]

    def test_single_image_any_beam(self, t1_scorer, t1_prompt):
        db = ImageDatabase([ImageRecord("only", (101, 102, 199))], 300, 199)
        index = RetrievalIndex.from_database(db)
        for beam in (1, 2, 64):
            ranked = forward_beam_search(
                t1_scorer, t1_prompt, index.trie, db, BeamConfig(beam_size=beam)
            )
            assert ranked.ids() == ["only"]

    def test_empty_trie_rejected(self, t1_scorer, t1_prompt, t1_db):
        with pytest.raises(EmptyTrieError):
            forward_beam_search(t1_scorer, t1_prompt, Trie(), t1_db, BeamConfig(beam_size=2))

    def test_reverse_proxy_rejected_in_config(self):
        with pytest.raises(ValueError):
            BeamConfig(beam_size=2, proxy=REV)

    def test_step_count_bounded_by_max_steps(self, t1_scorer, t1_db, t1_index, t1_prompt):
        counting = CountingScorer(t1_scorer)
        forward_beam_search(counting, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3))
        assert counting.calls <= t1_index.trie.max_depth

    def test_duplicate_sequences_expand_by_id(self, t1_scorer, t1_prompt):
        db = ImageDatabase(
            [ImageRecord("zz", (101, 102, 199)), ImageRecord("aa", (101, 102, 199))], 300, 199
        )
        index = RetrievalIndex.from_database(db)
        ranked = forward_beam_search(t1_scorer, t1_prompt, index.trie, db, BeamConfig(beam_size=2))
        assert ranked.ids() == ["aa", "zz"]

    @given(seed=st.integers(0, 5000), size=st.integers(1, 16))
    @settings(max_examples=60, deadline=None)
    def test_oracle_equivalence_forward(self, seed, size):
        scorer, db, prompt = random_instance(seed, size=size)
        index = RetrievalIndex.from_database(db)
        beam = forward_beam_search(scorer, prompt, index.trie, db, BeamConfig(beam_size=len(db)))
        oracle = exhaustive_rank(scorer, prompt, db, FWD)
        assert beam.ids() == oracle.ids()

    @given(seed=st.integers(0, 5000), size=st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_oracle_equivalence_debiased(self, seed, size):
        scorer, db, prompt = random_instance(seed, size=size)
        index = RetrievalIndex.from_database(db)
        beam = forward_beam_search(
            scorer, prompt, index.trie, db, BeamConfig(beam_size=len(db), proxy=PMI)
        )
        oracle = exhaustive_rank(scorer, prompt, db, PMI)
        assert beam.ids() == oracle.ids()
        assert [c.score for c in beam.items] == [c.score for c in oracle.items]

    @given(seed=st.integers(0, 3000), size=st.integers(2, 12))
    @settings(max_examples=30, deadline=None)
    def test_oracle_equivalence_length_normalized(self, seed, size):
        # Variable-length sequences reorder under per-token normalization.
        scorer, db, prompt = random_instance(seed, size=size)
        index = RetrievalIndex.from_database(db)
        cfg = ProxyConfig(kind=ProxyKind.FORWARD, length_normalize=True)
        beam = forward_beam_search(
            scorer, prompt, index.trie, db, BeamConfig(beam_size=len(db), proxy=cfg)
        )
        oracle = exhaustive_rank(scorer, prompt, db, cfg)
        assert beam.ids() == oracle.ids()
        assert [c.score for c in beam.items] == [c.score for c in oracle.items]

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=30, deadline=None)
    def test_constraint_safety(self, seed):
        scorer, db, prompt = random_instance(seed, size=10)
        trie = build_trie(db)
        seen = []

        class RecordingTrie(Trie):
            def __init__(self, inner):
                self.root = inner.root
                self.node_count = inner.node_count
                self.max_depth = inner.max_depth

            def allowed_next(self, prefix):
                seen.append(tuple(prefix))
                return super().allowed_next(prefix)

        recording = RecordingTrie(trie)
        forward_beam_search(scorer, prompt, recording, db, BeamConfig(beam_size=4))
        stored = [r.tokens for r in db.records]
        for prefix in seen:
            assert any(tokens[: len(prefix)] == prefix for tokens in stored)

    def test_completions_do_not_occupy_live_slots(self):
        # At the second step one path completes at rank 1 while two live
        # expansions rank below it.  The live frontier must be replenished
        # to full width so the weaker branch survives; it ends up beating
        # the stronger branch, whose continuation collapses.
        info = synth_info(64)
        rows = {
            (0,): {10: 1.0},
            (0, 10): {1: 0.5, 11: 0.3, 12: 0.15, 5: 0.05},
            (0, 10, 11): {20: 0.1, 5: 0.9},
            (0, 10, 11, 20): {1: 1.0},
            (0, 10, 12): {21: 1.0},
            (0, 10, 12, 21): {1: 1.0},
        }
        scorer = ToyScorer(info, rows)
        db = ImageDatabase(
            [
                ImageRecord("X", (10, 1)),
                ImageRecord("A", (10, 11, 20, 1)),
                ImageRecord("B", (10, 12, 21, 1)),
            ],
            64,
            1,
        )
        index = RetrievalIndex.from_database(db)
        ranked = forward_beam_search(
            scorer, Prompt(tokens=()), index.trie, db, BeamConfig(beam_size=2)
        )
        # X completes at 0.5; B finishes at 0.15 > A's 0.03.
        assert ranked.ids() == ["X", "B"]

    def test_pmi_beam_batches_both_streams_per_step(self, t1_scorer, t1_db, t1_index, t1_prompt):
        counting = CountingScorer(t1_scorer)
        forward_beam_search(
            counting, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3, proxy=PMI)
        )
        assert counting.calls <= t1_index.trie.max_depth


class TestReverseRerank:
    def test_equals_reverse_oracle_on_full_set(self, t1_scorer, t1_db, t1_index, t1_prompt):
        forward = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3)
        )
        reranked = reverse_rerank(t1_scorer, t1_prompt, forward)
        oracle = exhaustive_rank(t1_scorer, t1_prompt, t1_db, REV)
        assert reranked.ids() == oracle.ids()
        assert [c.score for c in reranked.items] == [c.score for c in oracle.items]

    def test_permutation_of_input(self, t1_scorer, t1_db, t1_index, t1_prompt):
        forward = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3)
        )
        reranked = reverse_rerank(t1_scorer, t1_prompt, forward)
        assert sorted(reranked.ids()) == sorted(forward.ids())
        assert {c.tokens for c in reranked.items} == {c.tokens for c in forward.items}

    def test_idempotent_on_sorted_input(self, t1_scorer, t1_prompt, t1_db):
        oracle = exhaustive_rank(t1_scorer, t1_prompt, t1_db, REV)
        again = reverse_rerank(t1_scorer, t1_prompt, oracle)
        assert again.ids() == oracle.ids()

    def test_single_candidate(self, t1_scorer, t1_prompt, t1_db):
        oracle = exhaustive_rank(t1_scorer, t1_prompt, t1_db, REV)
        single = RankedList(items=[oracle.items[0]], proxy_used=REV)
        out = reverse_rerank(t1_scorer, t1_prompt, single)
        assert out.ids() == [oracle.items[0].image_id]
        assert out.items[0].reverse_score is not None

    def test_empty_inputs_rejected(self, t1_scorer, t1_prompt):
        with pytest.raises(EmptyInputError):
            reverse_rerank(t1_scorer, t1_prompt, RankedList(items=[], proxy_used=REV))
        dummy = exhaustive_rank(
            t1_scorer,
            t1_prompt,
            ImageDatabase([ImageRecord("a", (101, 102, 199))], 300, 199),
            REV,
        )
        with pytest.raises(EmptyPromptError):
            reverse_rerank(t1_scorer, Prompt(tokens=()), dummy)

    def test_keeps_forward_scores(self, t1_scorer, t1_db, t1_index, t1_prompt):
        forward = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_db, BeamConfig(beam_size=3)
        )
        reranked = reverse_rerank(t1_scorer, t1_prompt, forward)
        fwd_by_id = {c.image_id: c.forward_score for c in forward.items}
        for cand in reranked.items:
            assert cand.forward_score == fwd_by_id[cand.image_id]


class TestRetrieve:
    def test_rrr_off_is_beam_search_truncated(self, t1_scorer, t1_index, t1_prompt):
        full = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_index.db, BeamConfig(beam_size=3)
        )
        got = retrieve(t1_scorer, t1_prompt, t1_index, BeamConfig(beam_size=3), rrr=False, top_k=2)
        assert got.ids() == full.ids()[:2]

    def test_rrr_on_full_beam_equals_reverse_oracle(self, t1_scorer, t1_index, t1_prompt):
        got = retrieve(t1_scorer, t1_prompt, t1_index, BeamConfig(beam_size=3), rrr=True, top_k=3)
        oracle = exhaustive_rank(t1_scorer, t1_prompt, t1_index.db, REV)
        assert got.ids() == oracle.ids()

    def test_top_k_larger_than_beam(self, t1_scorer, t1_index, t1_prompt):
        got = retrieve(t1_scorer, t1_prompt, t1_index, BeamConfig(beam_size=2), rrr=False, top_k=10)
        assert len(got) == 2


class TestBiasFamily:
    def test_debiased_recovers_relevance_forward_follows_bias(self):
        fam = build_bias_family()
        fwd_hits = 0
        for prompt, gt in fam.queries:
            fwd = exhaustive_rank(fam.scorer, prompt, fam.db, FWD)
            pmi = exhaustive_rank(fam.scorer, prompt, fam.db, PMI)
            rev = exhaustive_rank(fam.scorer, prompt, fam.db, REV)
            assert fwd.items[0].image_id == fam.hot_id  # bias dominates
            fwd_hits += fwd.items[0].image_id == gt
            assert pmi.items[0].image_id == gt
            assert rev.items[0].image_id == gt
        assert fwd_hits / len(fam.queries) < 0.5

    def test_reverse_and_debiased_rankings_invariant_to_bias_change(self):
        from toy_families import BIAS_VARIANT

        fam_a = build_bias_family()
        fam_b = build_bias_family(bias=BIAS_VARIANT)
        for (prompt, gt), (prompt_b, _) in zip(fam_a.queries, fam_b.queries):
            assert prompt.tokens == prompt_b.tokens
            # Reverse rows never touch the bias weights: full-order invariance.
            rev_a = exhaustive_rank(fam_a.scorer, prompt, fam_a.db, REV)
            rev_b = exhaustive_rank(fam_b.scorer, prompt, fam_b.db, REV)
            assert rev_a.ids() == rev_b.ids()
            # The debiased score collapses to the relevance weights, whose
            # argmax is the ground truth under either bias.
            pmi_a = exhaustive_rank(fam_a.scorer, prompt, fam_a.db, PMI)
            pmi_b = exhaustive_rank(fam_b.scorer, prompt, fam_b.db, PMI)
            assert pmi_a.items[0].image_id == pmi_b.items[0].image_id == gt
