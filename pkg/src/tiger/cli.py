"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Scorers are chosen
with ``--scorer toy:<table> | stdio:<command> | tcp:<host:port>`` or the
``TIGER_SCORER`` environment variable.  All randomness sits behind an
explicit ``--seed``, so identical commands produce identical output files
(wall-clock columns of ``eval bench`` and opt-in ``--timings`` excepted).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

from . import evaluation
from .engine import GenConfig, GenMode, PipelineConfig, tiger_one
from .errors import ParseError, TigerError
from .proxies import ProxyConfig, ProxyKind
from .remote import open_scorer
from .retrieval import BeamConfig, candidate_json, exhaustive_rank, retrieve
from .scorer import NULL_PROMPT, Prompt, Scorer
from .token_index import RetrievalIndex, load_database, save_index


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit 1 instead of 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_scorer(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--scorer",
        default=None,
        help="scorer spec toy:<table> | stdio:<cmd> | tcp:<host:port> (default: $TIGER_SCORER)",
    )
    p.add_argument("--timeout", type=float, default=30.0, help="external scorer timeout seconds")


def _add_index(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index", required=True, help="index file path")
    p.add_argument("--vocab-size", type=int, default=None, help="override the file header")
    p.add_argument("--image-end", type=int, default=None, help="override the file header")


def _add_prompt(p: argparse.ArgumentParser, allow_file: bool = False) -> None:
    p.add_argument("--prompt", default=None, help="prompt text (tokenized by the scorer)")
    p.add_argument("--prompt-tokens", default=None, help="pre-tokenized prompt, e.g. '7 12'")
    if allow_file:
        p.add_argument("--prompts-file", default=None, help="one prompt per line (text)")


def _add_onoff(p: argparse.ArgumentParser, name: str, default: str, help_text: str) -> None:
    p.add_argument(
        f"--{name}",
        nargs="?",
        const="on",
        default=default,
        choices=["on", "off"],
        help=f"{help_text} (default {default})",
    )


def _resolve_prompt(args, scorer: Scorer) -> Prompt:
    if args.prompt is not None and args.prompt_tokens is not None:
        raise ParseError("give --prompt or --prompt-tokens, not both")
    if args.prompt_tokens is not None:
        return Prompt(tokens=tuple(int(t) for t in args.prompt_tokens.split()))
    if args.prompt is not None:
        return Prompt(tokens=tuple(scorer.tokenize(args.prompt)), text=args.prompt)
    raise ParseError("a prompt is required (--prompt or --prompt-tokens)")


def _load_index(args, scorer: Optional[Scorer]) -> RetrievalIndex:
    vocab, end = args.vocab_size, args.image_end
    if (vocab is None or end is None) and scorer is not None:
        info = scorer.info()
        try:
            return RetrievalIndex.from_file(args.index, vocab, end)
        except ParseError:
            # No headers in the file: fall back to the scorer's declaration.
            vocab = vocab if vocab is not None else info.vocab_size
            end = end if end is not None else info.image_end
    return RetrievalIndex.from_file(args.index, vocab, end)


def _proxy_config(kind: str, eta: float, null_prompt: Prompt, length_normalize: bool) -> ProxyConfig:
    kinds = {"forward": ProxyKind.FORWARD, "pmi": ProxyKind.DEBIASED_PMI, "reverse": ProxyKind.REVERSE}
    return ProxyConfig(
        kind=kinds[kind], eta=eta, null_prompt=null_prompt, length_normalize=length_normalize
    )


def _null_prompt(args, scorer: Scorer) -> Prompt:
    text = getattr(args, "null_prompt", None)
    if not text:
        return NULL_PROMPT
    return Prompt(tokens=tuple(scorer.tokenize(text)), text=text)


def _write_out(path: Optional[str], payload: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(payload)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)


def _json_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def _cmd_index_build(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout) if args.scorer else None
    vocab, end = args.vocab_size, args.image_end
    if (vocab is None or end is None) and scorer is not None:
        info = scorer.info()
        vocab = vocab if vocab is not None else info.vocab_size
        end = end if end is not None else info.image_end
    db = load_database(args.infile, vocab, end)
    save_index(db, args.out)
    print(f"records={len(db)} vocab_size={db.vocab_size} image_end={db.image_end}")
    return 0


def _cmd_index_inspect(args) -> int:
    index = RetrievalIndex.from_file(args.infile)
    db = index.db
    lengths = [len(r.tokens) for r in db.records]
    print(f"records={len(db)}")
    print(f"vocab_size={db.vocab_size}")
    print(f"image_end={db.image_end}")
    print(f"min_len={min(lengths)} max_len={max(lengths)}")
    print(f"trie_nodes={index.trie.node_count}")
    return 0


def _cmd_rank(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    prompt = _resolve_prompt(args, scorer)
    cfg = _proxy_config(args.proxy, args.eta, _null_prompt(args, scorer), args.length_normalize)
    ranked = exhaustive_rank(scorer, prompt, index.db, cfg)
    items = ranked.items[: args.top_k] if args.top_k else ranked.items
    _write_out(args.out, "".join(_json_line(candidate_json(c)) for c in items))
    return 0


def _cmd_retrieve(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    prompt = _resolve_prompt(args, scorer)
    proxy = _proxy_config(args.proxy, args.eta, _null_prompt(args, scorer), False)
    beam_cfg = BeamConfig(beam_size=args.beam, proxy=proxy, max_steps=args.max_steps)
    ranked = retrieve(scorer, prompt, index, beam_cfg, rrr=args.rrr == "on", top_k=args.top_k)
    _write_out(args.out, "".join(_json_line(candidate_json(c)) for c in ranked.items))
    return 0


def _gen_config(args) -> GenConfig:
    modes = {"greedy": GenMode.GREEDY, "beam": GenMode.BEAM, "sample": GenMode.SAMPLE}
    return GenConfig(
        mode=modes[args.gen_mode],
        beam_size=args.gen_beam,
        seed=args.seed,
        temperature=args.temperature,
        sample_top_k=args.sample_top_k,
        max_steps=args.max_steps,
        restrict_to_visual=args.restrict_to_visual == "on",
    )


def _cmd_generate(args) -> int:
    from .engine import generate

    scorer = open_scorer(args.scorer, args.timeout)
    prompt = _resolve_prompt(args, scorer)
    outcome = generate(scorer, prompt, _gen_config(args))
    _write_out(
        args.out,
        _json_line({"tokens": list(outcome.tokens), "logprob": outcome.cond_total, "steps": outcome.steps}),
    )
    return 0


def _pipeline_config(args, null_prompt: Prompt) -> PipelineConfig:
    proxy = _proxy_config(args.proxy, args.eta, null_prompt, False)
    decision = _proxy_config(args.decision, args.eta, null_prompt, False)
    return PipelineConfig(
        beam=BeamConfig(beam_size=args.beam, proxy=proxy, max_steps=None),
        gen=_gen_config(args),
        rrr=args.rrr == "on",
        decision=decision,
        top_k=args.top_k,
    )


def _cmd_unify(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    cfg = _pipeline_config(args, _null_prompt(args, scorer))

    prompts: List[Prompt]
    if args.prompts_file is not None:
        with open(args.prompts_file, "r", encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh if line.strip()]
        prompts = [Prompt(tokens=tuple(scorer.tokenize(t)), text=t) for t in texts]
    else:
        prompts = [_resolve_prompt(args, scorer)]

    jobs = min(args.jobs, len(prompts))
    if jobs > 1:
        chunks = [prompts[i::jobs] for i in range(jobs)]

        def run_chunk(chunk: List[Prompt]):
            local = open_scorer(args.scorer, args.timeout)
            try:
                return [tiger_one(local, p, index, cfg) for p in chunk]
            finally:
                local.close()

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunk_results = list(pool.map(run_chunk, chunks))
        results = [None] * len(prompts)
        for lane, chunk in enumerate(chunk_results):
            for j, res in enumerate(chunk):
                results[lane + j * jobs] = res
    else:
        results = [tiger_one(scorer, p, index, cfg) for p in prompts]

    payload = "".join(
        _json_line(r.to_json_dict(top_k=args.top_k, include_timings=args.timings)) for r in results
    )
    _write_out(args.out, payload)
    if args.decode_hook:
        _run_decode_hook(args.decode_hook, results)
    return 0


def _run_decode_hook(template: str, results) -> None:
    """Hand each generated sequence to an external decoder command.

    ``{tokens}`` in the template expands to the space-separated token ids
    of the generated sequence; decoding pixels is outside this engine.
    """
    import shlex
    import subprocess

    for res in results:
        tokens = " ".join(str(t) for t in res.generated)
        command = [part.replace("{tokens}", tokens) for part in shlex.split(template)]
        subprocess.run(command, check=True)


def _cmd_eval_recall(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    evalset = evaluation.load_evalset(args.evalset, scorer, index.db)
    beam_cfg = BeamConfig(beam_size=args.beam, max_steps=args.max_steps)
    ks = [int(k) for k in args.ks.split(",")]
    ranked = [
        retrieve(scorer, q.prompt, index, beam_cfg, rrr=args.rrr == "on", top_k=max(ks))
        for q in evalset.queries
    ]
    metrics = evaluation.recall_at_k(ranked, evalset, ks)
    rows = [{**{"beam": float(args.beam)}, **{f"recall@{k}": metrics[k] for k in ks}}]
    _write_out(args.out, evaluation.format_csv(rows, ["beam"] + [f"recall@{k}" for k in ks]))
    return 0


def _cmd_eval_sweep_eta(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    evalset = evaluation.load_evalset(args.evalset, scorer, index.db)
    etas = [float(e) for e in args.etas.split(",")]
    ks = [int(k) for k in args.ks.split(",")]
    rows = evaluation.sweep_eta(scorer, evalset, index.db, etas, ks)
    _write_out(args.out, evaluation.format_csv(rows, ["eta"] + [f"recall@{k}" for k in ks]))
    return 0


def _cmd_eval_sweep_beam(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    index = _load_index(args, scorer)
    evalset = evaluation.load_evalset(args.evalset, scorer, index.db)
    beams = [int(b) for b in args.beams.split(",")]
    ks = [int(k) for k in args.ks.split(",")]
    rows = evaluation.sweep_beam(scorer, evalset, index, beams, rrr=args.rrr == "on", ks=ks)
    _write_out(args.out, evaluation.format_csv(rows, ["beam"] + [f"recall@{k}" for k in ks]))
    return 0


def _cmd_eval_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    cfg = evaluation.BenchConfig(
        queries_per_size=args.queries,
        beam_size=args.beam,
        max_steps=args.max_steps,
        embed_dim=args.dim,
        seed=args.seed,
    )
    rows = evaluation.bench_efficiency(sizes, cfg)
    columns = [
        "db_size",
        "gen_qps",
        "dense_qps",
        "decode_steps_per_query",
        "dense_comparisons_per_query",
        "gen_seconds",
        "dense_seconds",
    ]
    _write_out(args.out, evaluation.format_csv(rows, columns))
    gen = [row["gen_qps"] for row in rows]
    dense = [row["dense_qps"] for row in rows]
    print(
        f"generative: {min(gen):.0f}..{max(gen):.0f} prompts/s "
        f"({(max(gen) - min(gen)) / max(gen):.0%} spread); "
        f"dense: {dense[0]:.0f} -> {dense[-1]:.0f} prompts/s "
        f"({dense[0] / dense[-1]:.1f}x slowdown); "
        f"decode steps/query constant at {rows[0]['decode_steps_per_query']:g}",
        file=sys.stderr,
    )
    return 0


def _cmd_eval_filter(args) -> int:
    records = evaluation.load_filtration(args.records)
    selected = evaluation.filter_benchmark(records, args.threshold, args.top_n)
    _write_out(args.out, "prompt_id\n" + "".join(f"{pid}\n" for pid in selected))
    return 0


def _cmd_scorer_probe(args) -> int:
    scorer = open_scorer(args.scorer, args.timeout)
    info = scorer.info()
    print(f"name={info.name}")
    print(f"vocab_size={info.vocab_size}")
    print(f"image_start={info.image_start} image_end={info.image_end}")
    print(f"visual_range={info.visual_range[0]}-{info.visual_range[1]}")
    print(f"supports_tokenize={str(info.supports_tokenize).lower()}")
    vecs = scorer.next_logprobs([[info.image_start]])
    from .scorer import validate_logprob_vector

    lse = validate_logprob_vector(vecs[0])
    print(f"logprobs_ok=true logsumexp={lse:.3e}")
    scorer.close()
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tiger", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_index = sub.add_parser("index", help="build or inspect token indexes")
    index_sub = p_index.add_subparsers(dest="index_command", required=True, parser_class=_Parser)
    p_build = index_sub.add_parser("build", help="validate a raw file and write an index")
    p_build.add_argument("--in", dest="infile", required=True)
    p_build.add_argument("--out", required=True)
    p_build.add_argument("--vocab-size", type=int, default=None)
    p_build.add_argument("--image-end", type=int, default=None)
    _add_scorer(p_build)
    p_build.set_defaults(func=_cmd_index_build)
    p_inspect = index_sub.add_parser("inspect", help="print index statistics")
    p_inspect.add_argument("--in", dest="infile", required=True)
    p_inspect.set_defaults(func=_cmd_index_inspect)

    p_rank = sub.add_parser("rank", help="exhaustive ranking with any proxy")
    _add_scorer(p_rank)
    _add_index(p_rank)
    _add_prompt(p_rank)
    p_rank.add_argument("--proxy", choices=["forward", "pmi", "reverse"], default="forward")
    p_rank.add_argument("--eta", type=float, default=1.0)
    p_rank.add_argument("--null-prompt", default=None, help="text for the content-free prompt")
    p_rank.add_argument("--length-normalize", action="store_true")
    p_rank.add_argument("--top-k", type=int, default=0, help="0 keeps the whole ranking")
    p_rank.add_argument("--out", default=None)
    p_rank.set_defaults(func=_cmd_rank)

    p_retr = sub.add_parser("retrieve", help="constrained beam search, optional reranking")
    _add_scorer(p_retr)
    _add_index(p_retr)
    _add_prompt(p_retr)
    p_retr.add_argument("--beam", type=int, default=800)
    p_retr.add_argument("--max-steps", type=int, default=None)
    p_retr.add_argument("--proxy", choices=["forward", "pmi"], default="forward")
    p_retr.add_argument("--eta", type=float, default=1.0)
    p_retr.add_argument("--null-prompt", default=None)
    _add_onoff(p_retr, "rrr", "on", "reverse reranking")
    p_retr.add_argument("--top-k", type=int, default=10)
    p_retr.add_argument("--out", default=None)
    p_retr.set_defaults(func=_cmd_retrieve)

    p_gen = sub.add_parser("generate", help="unconstrained generation")
    _add_scorer(p_gen)
    _add_prompt(p_gen)
    _add_gen_flags(p_gen)
    p_gen.add_argument("--out", default=None)
    p_gen.set_defaults(func=_cmd_generate)

    p_unify = sub.add_parser("unify", help="full pipeline: generate, retrieve, decide")
    _add_scorer(p_unify)
    _add_index(p_unify)
    _add_prompt(p_unify, allow_file=True)
    p_unify.add_argument("--beam", type=int, default=800)
    p_unify.add_argument("--proxy", choices=["forward", "pmi"], default="forward", help="beam proxy")
    p_unify.add_argument("--eta", type=float, default=1.0)
    p_unify.add_argument("--null-prompt", default=None, help="text for the content-free prompt")
    _add_onoff(p_unify, "rrr", "on", "reverse reranking")
    p_unify.add_argument("--decision", choices=["reverse", "pmi"], default="reverse")
    _add_gen_flags(p_unify)
    p_unify.add_argument("--top-k", type=int, default=10)
    p_unify.add_argument("--jobs", type=int, default=1, help="parallel workers across prompts")
    p_unify.add_argument("--timings", action="store_true", help="include wall-clock timings")
    p_unify.add_argument(
        "--decode-hook",
        default=None,
        help="command template run per prompt with {tokens} = generated token ids",
    )
    p_unify.add_argument("--out", default=None)
    p_unify.set_defaults(func=_cmd_unify)

    p_eval = sub.add_parser("eval", help="metrics, sweeps, benchmarks, filtration")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)

    p_recall = eval_sub.add_parser("recall", help="recall@k of retrieval over an eval set")
    _add_scorer(p_recall)
    _add_index(p_recall)
    p_recall.add_argument("--evalset", required=True)
    p_recall.add_argument("--beam", type=int, default=800)
    p_recall.add_argument("--max-steps", type=int, default=None)
    _add_onoff(p_recall, "rrr", "on", "reverse reranking")
    p_recall.add_argument("--ks", default="1,5,10")
    p_recall.add_argument("--out", default=None)
    p_recall.set_defaults(func=_cmd_eval_recall)

    p_eta = eval_sub.add_parser("sweep-eta", help="debias strength sweep")
    _add_scorer(p_eta)
    _add_index(p_eta)
    p_eta.add_argument("--evalset", required=True)
    p_eta.add_argument("--etas", default="0,0.25,0.5,1,1.5,2")
    p_eta.add_argument("--ks", default="1,5")
    p_eta.add_argument("--out", default=None)
    p_eta.set_defaults(func=_cmd_eval_sweep_eta)

    p_beam = eval_sub.add_parser("sweep-beam", help="beam size sweep with ranking bound")
    _add_scorer(p_beam)
    _add_index(p_beam)
    p_beam.add_argument("--evalset", required=True)
    p_beam.add_argument("--beams", default="1,2,4,8,16")
    _add_onoff(p_beam, "rrr", "off", "reverse reranking")
    p_beam.add_argument("--ks", default="1,5,10")
    p_beam.add_argument("--out", default=None)
    p_beam.set_defaults(func=_cmd_eval_sweep_beam)

    p_bench = eval_sub.add_parser("bench", help="throughput vs database size")
    p_bench.add_argument("--sizes", default="1000,10000,100000")
    p_bench.add_argument("--queries", type=int, default=20)
    p_bench.add_argument("--beam", type=int, default=8)
    p_bench.add_argument("--max-steps", type=int, default=8)
    p_bench.add_argument("--dim", type=int, default=256)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(func=_cmd_eval_bench)

    p_filter = eval_sub.add_parser("filter", help="alignment-threshold filtration")
    p_filter.add_argument("--records", required=True)
    p_filter.add_argument("--threshold", type=float, default=30.0)
    p_filter.add_argument("--top-n", type=int, default=1000)
    p_filter.add_argument("--out", default=None)
    p_filter.set_defaults(func=_cmd_eval_filter)

    p_scorer = sub.add_parser("scorer", help="scorer utilities")
    scorer_sub = p_scorer.add_subparsers(dest="scorer_command", required=True, parser_class=_Parser)
    p_probe = scorer_sub.add_parser("probe", help="handshake and smoke-test a scorer")
    _add_scorer(p_probe)
    p_probe.set_defaults(func=_cmd_scorer_probe)

    return parser


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gen-mode", choices=["greedy", "beam", "sample"], default="greedy")
    p.add_argument("--gen-beam", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sample-top-k", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=64)
    _add_onoff(p, "restrict-to-visual", "on", "mask generation to visual tokens")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TigerError, OSError, ValueError) as exc:
        print(f"tiger: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
