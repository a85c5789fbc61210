import math

import pytest

from tiger.engine import (
    Chosen,
    GenConfig,
    GenMode,
    PipelineConfig,
    decide,
    generate,
    generate_tokens,
    synchronous_generate_retrieve,
    tiger_one,
)
from tiger.errors import EmptyPromptError, EmptyTrieError
from tiger.proxies import ProxyConfig, ProxyKind, debiased_pmi, reverse_likelihood
from tiger.retrieval import BeamConfig, forward_beam_search, retrieve
from tiger.scorer import CountingScorer, Prompt, ToyScorer
from tiger.synth import HashScorer, make_random_database, synth_info
from tiger.token_index import ImageDatabase, ImageRecord, RetrievalIndex

PMI1 = ProxyConfig(kind=ProxyKind.DEBIASED_PMI, eta=1.0)
REV = ProxyConfig(kind=ProxyKind.REVERSE)


def dominant_scorer():
    """Argmax chain from an empty prompt: 104 -> 105 -> end."""
    info = synth_info(200, name="dominant")
    rows = {
        (0,): {104: 0.6, 101: 0.4},
        (0, 104): {105: 0.9, 106: 0.1},
        (0, 104, 105): {1: 1.0},
        (0, 101): {102: 1.0},
        (0, 101, 102): {1: 1.0},
    }
    return ToyScorer(info, rows)


class TestGenerate:
    def test_greedy_follows_argmax_chain(self):
        tokens = generate_tokens(dominant_scorer(), Prompt(tokens=()), GenConfig())
        assert tokens == (104, 105, 1)

    def test_max_steps_one_appends_end(self):
        cfg = GenConfig(max_steps=1)
        tokens = generate_tokens(dominant_scorer(), Prompt(tokens=()), cfg)
        assert tokens == (104, 1)
        assert len(tokens) == 2

    def test_truncated_score_equals_teacher_forcing(self):
        scorer = dominant_scorer()
        outcome = generate(scorer, Prompt(tokens=()), GenConfig(max_steps=1))
        # p(104) = 0.6, then the forced end token is scored off the table floor.
        from tiger.proxies import forward_likelihood

        assert outcome.cond_total == forward_likelihood(scorer, Prompt(tokens=()), outcome.tokens).value

    def test_sample_reproducible_from_seed(self):
        scorer = HashScorer(synth_info(32), 9)
        cfg = GenConfig(mode=GenMode.SAMPLE, seed=123, max_steps=6)
        a = generate_tokens(scorer, Prompt(tokens=(5,)), cfg)
        b = generate_tokens(scorer, Prompt(tokens=(5,)), cfg)
        assert a == b

    def test_sample_needs_seed(self):
        with pytest.raises(ValueError):
            GenConfig(mode=GenMode.SAMPLE, seed=None)

    def test_beam_mode_finds_delayed_winner(self):
        # Greedy takes 104 (0.6) but that branch ends at 0.6*0.5 = 0.3,
        # while the 101 branch finishes with total mass 0.4.
        info = synth_info(200)
        rows = {
            (0,): {104: 0.6, 101: 0.4},
            (0, 104): {105: 0.5, 1: 0.5},
            (0, 104, 105): {1: 1.0},
            (0, 101): {102: 1.0},
            (0, 101, 102): {1: 1.0},
        }
        scorer = ToyScorer(info, rows)
        greedy = generate_tokens(scorer, Prompt(tokens=()), GenConfig())
        beam = generate_tokens(scorer, Prompt(tokens=()), GenConfig(mode=GenMode.BEAM, beam_size=2))
        assert greedy == (104, 1)  # the 0.5/0.5 tie resolves to the lower id
        assert beam == (101, 102, 1)

    def test_restrict_to_visual_masks_support(self):
        info = synth_info(8)
        # Unrestricted argmax would be token 0 (image_start), outside visuals.
        rows = {(0,): {0: 0.8, 3: 0.15, 1: 0.05}, (0, 3): {1: 1.0}}
        scorer = ToyScorer(info, rows)
        tokens = generate_tokens(scorer, Prompt(tokens=()), GenConfig())
        assert tokens == (3, 1)
        unrestricted = generate_tokens(
            scorer, Prompt(tokens=()), GenConfig(restrict_to_visual=False, max_steps=1)
        )
        assert unrestricted[0] == 0


class TestSynchronous:
    def test_separability_on_fixture(self, t1_scorer, t1_index, t1_prompt):
        gen_cfg = GenConfig(max_steps=8)
        beam_cfg = BeamConfig(beam_size=3)
        sync_gen, sync_ranked = synchronous_generate_retrieve(
            t1_scorer, t1_prompt, t1_index, gen_cfg, beam_cfg
        )
        solo_gen = generate(t1_scorer, t1_prompt, gen_cfg)
        solo_ranked = forward_beam_search(
            t1_scorer, t1_prompt, t1_index.trie, t1_index.db, beam_cfg
        )
        assert sync_gen == solo_gen
        assert sync_ranked.ids() == solo_ranked.ids()
        assert [c.score for c in sync_ranked.items] == [c.score for c in solo_ranked.items]

    def test_separability_on_random_instances(self):
        for seed in range(12):
            scorer = HashScorer(synth_info(24), seed)
            db = make_random_database(seed, size=8, vocab_size=24)
            index = RetrievalIndex.from_database(db)
            prompt = Prompt(tokens=(7,))
            gen_cfg = GenConfig(max_steps=6)
            beam_cfg = BeamConfig(beam_size=4)
            sync_gen, sync_ranked = synchronous_generate_retrieve(
                scorer, prompt, index, gen_cfg, beam_cfg
            )
            assert sync_gen == generate(scorer, prompt, gen_cfg)
            solo = forward_beam_search(scorer, prompt, index.trie, db, beam_cfg)
            assert sync_ranked.ids() == solo.ids()
            assert [c.score for c in sync_ranked.items] == [c.score for c in solo.items]

    def test_total_steps_is_max_of_both_paths(self, t1_scorer, t1_index, t1_prompt):
        counting = CountingScorer(t1_scorer)
        gen_cfg = GenConfig(max_steps=8)  # fixture chain ends after 3 tokens
        beam_cfg = BeamConfig(beam_size=3)  # stored sequences need 3 steps
        synchronous_generate_retrieve(counting, t1_prompt, t1_index, gen_cfg, beam_cfg)
        solo_gen = CountingScorer(t1_scorer)
        generate(solo_gen, t1_prompt, gen_cfg)
        solo_beam = CountingScorer(t1_scorer)
        forward_beam_search(solo_beam, t1_prompt, t1_index.trie, t1_index.db, beam_cfg)
        assert counting.calls == max(solo_gen.calls, solo_beam.calls)

    def test_uneven_paths_step_accounting(self):
        # Generation ends after 2 tokens, retrieval needs 3 decode steps.
        info = synth_info(200)
        rows = {
            (0,): {104: 0.9, 101: 0.1},
            (0, 104): {1: 1.0},
        }
        scorer = ToyScorer(info, rows)
        db = ImageDatabase(
            [ImageRecord("a", (101, 102, 1)), ImageRecord("b", (101, 103, 1))], 200, 1
        )
        index = RetrievalIndex.from_database(db)
        counting = CountingScorer(scorer)
        gen, ranked = synchronous_generate_retrieve(
            counting, Prompt(tokens=()), index, GenConfig(max_steps=8), BeamConfig(beam_size=2)
        )
        assert gen.tokens == (104, 1)
        assert len(ranked) == 2
        assert counting.calls == 3

    def test_empty_trie_before_any_call(self, t1_scorer, t1_prompt):
        empty_db = ImageDatabase([ImageRecord("a", (101, 199))], 300, 199)
        index = RetrievalIndex.from_database(empty_db)
        index.trie.root.children.clear()
        counting = CountingScorer(t1_scorer)
        with pytest.raises(EmptyTrieError):
            synchronous_generate_retrieve(
                counting, t1_prompt, index, GenConfig(), BeamConfig(beam_size=2)
            )
        assert counting.calls == 0


class TestDecide:
    def test_comparison_cases(self, t1_scorer, t1_prompt):
        cand = retrieve(
            t1_scorer,
            t1_prompt,
            RetrievalIndex.from_file("tests/data/fixture_t1.idx"),
            BeamConfig(beam_size=3),
            rrr=True,
            top_k=1,
        ).top()
        res = decide(t1_scorer, t1_prompt, (101, 102, 199), cand, REV,
                     s_gen_cached=-2.0, s_ret_cached=-1.0)
        assert res.chosen is Chosen.RETRIEVAL
        res = decide(t1_scorer, t1_prompt, (101, 102, 199), cand, REV,
                     s_gen_cached=-1.0, s_ret_cached=-2.0)
        assert res.chosen is Chosen.GENERATION
        res = decide(t1_scorer, t1_prompt, (101, 102, 199), cand, REV,
                     s_gen_cached=-1.0, s_ret_cached=-1.0)
        assert res.chosen is Chosen.RETRIEVAL  # exact tie keeps the database image

    def test_forward_decision_rejected(self, t1_scorer, t1_prompt):
        cand = retrieve(
            t1_scorer,
            t1_prompt,
            RetrievalIndex.from_file("tests/data/fixture_t1.idx"),
            BeamConfig(beam_size=3),
            rrr=False,
            top_k=1,
        ).top()
        with pytest.raises(ValueError):
            decide(t1_scorer, t1_prompt, (101, 102, 199), cand, ProxyConfig(kind=ProxyKind.FORWARD))

    def test_generated_equals_stored_ties_to_retrieval(self, t1_scorer, t1_prompt, t1_index):
        ranked = retrieve(t1_scorer, t1_prompt, t1_index, BeamConfig(beam_size=3), rrr=True)
        top = ranked.top()
        res = decide(t1_scorer, t1_prompt, top.tokens, top, REV)
        assert res.s_gen == res.s_ret
        assert res.chosen is Chosen.RETRIEVAL
        assert res.chosen_tokens == top.tokens

    def test_cached_retrieved_score_costs_no_calls(self, t1_scorer, t1_prompt, t1_index):
        ranked = retrieve(t1_scorer, t1_prompt, t1_index, BeamConfig(beam_size=3), rrr=True)
        top = ranked.top()
        counting = CountingScorer(t1_scorer)
        res = decide(
            t1_scorer if False else counting,
            t1_prompt,
            (104, 105, 199),
            top,
            REV,
            s_ret_cached=top.reverse_score,
        )
        # Only the generated sequence needed scoring: one batched call.
        assert counting.calls == 1
        assert res.s_ret == top.reverse_score


class TestTigerOne:
    def test_fixture_prefers_retrieval_of_b(self, t1_scorer, t1_prompt, t1_index):
        cfg = PipelineConfig(beam=BeamConfig(beam_size=3), gen=GenConfig(max_steps=8))
        res = tiger_one(t1_scorer, t1_prompt, t1_index, cfg)
        # The weak generator copies image A; reverse similarity favors stored B.
        assert res.generated == (101, 102, 199)
        assert res.chosen is Chosen.RETRIEVAL
        assert res.retrieved.top().image_id == "B"
        assert res.chosen_tokens == (101, 103, 199)
        assert res.s_ret == pytest.approx(math.log(0.5) + math.log(0.8), abs=1e-12)
        assert res.s_gen == pytest.approx(math.log(0.3) + math.log(0.6), abs=1e-12)

    def test_novel_generation_wins(self):
        # No stored image matches the prompt; the generator's novel path does.
        info = synth_info(100)
        rows = {
            (9, 0): {70: 0.95, 60: 0.05},
            (9, 0, 70): {71: 1.0},
            (9, 0, 70, 71): {1: 1.0},
            (9, 0, 60): {61: 1.0},
            (9, 0, 60, 61): {1: 1.0},
            (70, 71, 1): {9: 0.9, 2: 0.1},
            (60, 61, 1): {9: 0.001, 2: 0.999},
        }
        scorer = ToyScorer(info, rows)
        db = ImageDatabase([ImageRecord("stored", (60, 61, 1))], 100, 1)
        index = RetrievalIndex.from_database(db)
        cfg = PipelineConfig(beam=BeamConfig(beam_size=2), gen=GenConfig(max_steps=5))
        res = tiger_one(scorer, Prompt(tokens=(9,)), index, cfg)
        assert res.generated == (70, 71, 1)
        assert res.chosen is Chosen.GENERATION
        assert res.chosen_tokens == (70, 71, 1)

    def test_decide_reuses_pmi_scores_without_new_calls(self, t1_scorer, t1_prompt, t1_index):
        beam_cfg = BeamConfig(beam_size=3, proxy=PMI1)
        cfg = PipelineConfig(beam=beam_cfg, gen=GenConfig(max_steps=8), rrr=False, decision=PMI1)
        outer = CountingScorer(t1_scorer)
        res = tiger_one(outer, t1_prompt, t1_index, cfg)
        # Rerun just the synchronous phase: the pipeline must not have added
        # any decide-time calls on top of it.
        probe = CountingScorer(t1_scorer)
        synchronous_generate_retrieve(
            probe, t1_prompt, t1_index, cfg.gen, beam_cfg, gen_null=cfg.decision.null_prompt
        )
        assert outer.calls == probe.calls
        assert res.scorer_calls == probe.calls
        # Cached decision scores must equal fresh recomputation bit-for-bit.
        assert res.s_gen == debiased_pmi(t1_scorer, t1_prompt, res.generated, PMI1).value
        assert res.s_ret == debiased_pmi(t1_scorer, t1_prompt, res.retrieved.top().tokens, PMI1).value

    def test_decision_soundness_recomputed(self, t1_scorer, t1_index):
        for seed in range(6):
            scorer = HashScorer(synth_info(24), seed)
            db = make_random_database(seed + 50, size=6, vocab_size=24)
            index = RetrievalIndex.from_database(db)
            prompt = Prompt(tokens=(5, 9))
            cfg = PipelineConfig(beam=BeamConfig(beam_size=4), gen=GenConfig(max_steps=6))
            res = tiger_one(scorer, prompt, index, cfg)
            s_gen = reverse_likelihood(scorer, prompt, res.generated).value
            s_ret = reverse_likelihood(scorer, prompt, res.retrieved.top().tokens).value
            assert res.s_gen == s_gen and res.s_ret == s_ret
            assert res.chosen is (Chosen.RETRIEVAL if s_ret >= s_gen else Chosen.GENERATION)

    def test_intermediates_retained(self, t1_scorer, t1_prompt, t1_index):
        cfg = PipelineConfig(beam=BeamConfig(beam_size=3), gen=GenConfig(max_steps=8))
        res = tiger_one(t1_scorer, t1_prompt, t1_index, cfg)
        assert res.forward_list is not None and res.forward_list.ids() == ["C", "A", "B"]
        assert res.reranked_list is not None and res.reranked_list.ids() == ["B", "A", "C"]
        assert res.scorer_calls > 0
        assert set(res.timings) == {"generate_retrieve", "rerank", "decide", "total"}

    def test_empty_prompt_rejected(self, t1_scorer, t1_index):
        cfg = PipelineConfig(beam=BeamConfig(beam_size=2), gen=GenConfig())
        with pytest.raises(EmptyPromptError):
            tiger_one(t1_scorer, Prompt(tokens=()), t1_index, cfg)

    def test_json_round_trip(self, t1_scorer, t1_prompt, t1_index):
        import json

        cfg = PipelineConfig(beam=BeamConfig(beam_size=3), gen=GenConfig(max_steps=8), top_k=2)
        res = tiger_one(t1_scorer, t1_prompt, t1_index, cfg)
        payload = json.loads(json.dumps(res.to_json_dict(include_timings=False)))
        assert payload["chosen"] == "retrieval"
        assert payload["prompt"] == "red car"
        assert len(payload["retrieved"]) == 2
        assert payload["retrieved"][0]["image_id"] == "B"
        assert "timings" not in payload
