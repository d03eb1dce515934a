"""Command-line interface.

Subcommands: ``train``, ``coord-check``, ``ingest``, ``mix``, ``probe``,
``chat-format``, and ``bench`` (compiled-vs-python kernel comparison).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import kernels
from .chat import SpecialTokens, assemble, parse, read_conversations, render
from .config import ModelConfig, MuPParams, load_run_config
from .coordcheck import coord_check
from .data import (
    FimSentinels,
    draw_domains,
    ingest,
    read_shard,
    write_shard,
    write_shard_manifest,
)
from .model import init_params
from .probe import ProbeSuite, balance_report, track, write_curves
from .tokenizer import ByteTokenizer
from .train import Trainer


def _load_shards(paths: dict[str, str], base_dir: str) -> dict:
    shards = {}
    for domain, path in paths.items():
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        shards[domain] = read_shard(path)
    return shards


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    shards = _load_shards(cfg.shard_paths, base)
    tokenizer = ByteTokenizer(vocab_size=cfg.model.vocab_size)
    trainer = Trainer(cfg, shards, FimSentinels.from_tokenizer(tokenizer),
                      run_dir=args.run_dir)
    if args.resume:
        state = trainer.load_checkpoint(args.resume)
        print(f"resumed from {state.last_checkpoint_id} "
              f"(phase {state.phase_id}, step {state.step_in_phase})")
    else:
        state = trainer.fresh_state()
    if args.skip_batches:
        phase = cfg.phase(state.phase_id)
        state = trainer.skip_batches(state, args.skip_batches, phase,
                                     cfg.mixtures[state.phase_id])
        print(f"skipped {args.skip_batches} batches at phase {state.phase_id}")
    state = trainer.run_all(state)
    report = state.ledger.report()
    print(f"done: phase {state.phase_id}, global step {state.global_step}, "
          f"tokens {report['accumulated']}")
    print(f"checkpoints under {os.path.join(trainer.run_dir, 'checkpoints')}")
    return 0


def cmd_coord_check(args) -> int:
    widths = [int(w) for w in args.widths.split(",")]
    configs = [ModelConfig(n_layers=args.layers, hidden_dim=w, n_heads=args.heads,
                           vocab_size=args.vocab_size, seq_len=args.seq_len,
                           attention_scaling=args.attention_scaling)
               for w in widths]
    mup = MuPParams.for_width(widths[0], base_width=args.base_width)
    report = coord_check(configs, mup, steps=args.steps, seed=args.seed,
                         lr=args.lr, batch_size=args.batch_size,
                         seq_len=args.seq_len, band=(args.band_low, args.band_high),
                         slope_tolerance=args.slope_tolerance)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        print(f"report written to {args.out}")
    for metric, exponent in sorted(report.score_exponents.items()):
        print(f"{metric}: width exponent {exponent:+.3f}")
    if report.ok:
        print(f"coord check OK across widths {report.widths}")
        return 0
    print(f"coord check FLAGGED {len(report.flagged)} item(s):")
    for flag in report.flagged[:20]:
        print(f"  {flag}")
    return 1


def cmd_ingest(args) -> int:
    docs = []
    for path in args.files:
        with open(path, "r", encoding="utf-8") as fh:
            docs.append(fh.read())
    tokenizer = ByteTokenizer(vocab_size=args.vocab_size)
    shard = ingest(docs, args.domain, tokenizer, seed=args.seed)
    digest = write_shard(shard, args.out)
    print(f"{args.out}: domain={args.domain} docs={shard.n_docs} "
          f"tokens={shard.token_count} sha256={digest[:16]}...")
    if args.manifest:
        write_shard_manifest({args.domain: args.out}, args.manifest)
        print(f"manifest written to {args.manifest}")
    return 0


def cmd_mix(args) -> int:
    cfg = load_run_config(args.config)
    mix = cfg.mixtures[args.phase]
    print(f"phase {args.phase} mixture:")
    for domain in mix.domains:
        print(f"  {domain}: {mix.weights[domain]}")
    print(f"  fim rate: {mix.fim_rate} ({mix.fim_mode})")
    if args.samples:
        rng = np.random.default_rng(args.seed)
        picks = draw_domains(mix, rng, args.samples)
        for i, domain in enumerate(mix.domains):
            frac = float((picks == i).mean())
            print(f"  empirical {domain}: {frac:.5f} over {args.samples} draws")
    return 0


def cmd_probe(args) -> int:
    cfg = load_run_config(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    held = _load_shards(cfg.probe_paths, base)
    suite = ProbeSuite(shards=held, seq_len=cfg.model.seq_len,
                       batch_size=cfg.probe_batch_size)
    if not args.no_disjointness_check and cfg.shard_paths:
        suite.validate_disjoint(_load_shards(cfg.shard_paths, base))
    trainer = Trainer(cfg, {}, run_dir=args.run_dir)
    manifests = trainer.checkpoint_manifests()
    if not manifests:
        print("no checkpoints found", file=sys.stderr)
        return 1
    records = track(manifests, suite, cfg.model, cfg.mup,
                    os.path.join(trainer.run_dir, "checkpoints"))
    out = args.out or os.path.join(trainer.run_dir, "curves.jsonl")
    write_curves(records, out)
    print(f"{len(records)} records written to {out}")
    domains = sorted(held)
    if "language" in held and "code" in held:
        for row in balance_report(records):
            print(json.dumps(row, sort_keys=True))
    else:
        for record in records:
            print(record.to_json())
    return 0


def cmd_chat_format(args) -> int:
    tokenizer = ByteTokenizer(vocab_size=args.vocab_size)
    specials = SpecialTokens.from_tokenizer(tokenizer)
    convs = read_conversations(args.roundtrip)
    failures = 0
    for i, conv in enumerate(convs):
        ids = assemble(conv, specials, tokenizer)
        back = parse(ids, specials, tokenizer)
        ok = back == conv
        failures += 0 if ok else 1
        status = "ok" if ok else "MISMATCH"
        print(f"[{i}] {status} ({ids.size} tokens): {render(conv)[:96]}")
    print(f"{len(convs) - failures}/{len(convs)} round trips identical")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    from .kernels import pure
    try:
        from .kernels import _fused as fused
    except ImportError:
        print("compiled backend not built; run `python setup.py build_ext --inplace`",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    n, d, t, v = args.rows, 256, 128, 512

    x = rng.normal(size=(n, d)).astype(np.float32)
    gain = np.ones(d, dtype=np.float32)
    bias = np.zeros(d, dtype=np.float32)
    scores = rng.normal(size=(16, t, t)).astype(np.float32)
    logits = rng.normal(size=(n, v)).astype(np.float32)
    targets = rng.integers(0, v, size=n).astype(np.int64)
    gate = rng.normal(size=(n, 682)).astype(np.float32)
    up = rng.normal(size=(n, 682)).astype(np.float32)

    cases = {
        "layernorm_forward": lambda k: k.layernorm_forward(x, gain, bias, 1e-5),
        "causal_softmax": lambda k: k.causal_softmax(scores),
        "softmax_xent": lambda k: k.softmax_xent(logits, targets, -1),
        "silu_mul_forward": lambda k: k.silu_mul_forward(gate, up),
    }

    def clock(fn, backend, iters=args.iters):
        fn(backend)
        t0 = time.perf_counter()
        for _ in range(iters):
            fn(backend)
        return (time.perf_counter() - t0) / iters * 1e3

    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':22s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = clock(fn, pure)
        t_cy = clock(fn, fused)
        print(f"{name:22s} {t_py:10.3f} {t_cy:12.3f} {t_py / t_cy:7.1f}x")

    # end-to-end training step under each backend
    from .model import grad as grad_fn, init_params as init_fn
    from .optim import OptimState, adamw_step, build_group_rules
    import phaselab.kernels as kmod
    import importlib

    config = ModelConfig(n_layers=4, hidden_dim=256, n_heads=4, vocab_size=512,
                         seq_len=128)
    mup = MuPParams.for_width(256, base_width=256)
    tokens = rng.integers(0, 512, size=(4, 128))
    tgts = np.roll(tokens, -1, 1)
    tgts[:, -1] = -1

    def step_time(backend):
        for kname in ("layernorm_forward", "layernorm_backward", "causal_softmax",
                      "causal_softmax_backward", "softmax_xent",
                      "silu_mul_forward", "silu_mul_backward", "adamw_update"):
            setattr(kmod, kname, getattr(backend, kname))
        params = init_fn(config, mup, seed=0, dtype=np.float32)
        rules = build_group_rules(params, mup)
        state = OptimState.init(params)
        _, g = grad_fn(config, mup, params, tokens, tgts)
        t0 = time.perf_counter()
        for _ in range(args.steps):
            _, g = grad_fn(config, mup, params, tokens, tgts)
            params, state = adamw_step(state, params, g, 0.003, rules,
                                       in_place=True)
        return (time.perf_counter() - t0) / args.steps * 1e3

    t_py = step_time(pure)
    t_cy = step_time(fused)
    importlib.reload(kmod)
    print(f"{'train step (B4 T128)':22s} {t_py:10.1f} {t_cy:12.1f} {t_py / t_cy:7.1f}x")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="phaselab",
        description="Desk-scale multi-phase pretraining laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured training phases")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint manifest (file or directory)")
    p.add_argument("--skip-batches", type=int, default=0)
    p.add_argument("--run-dir", default=None,
                   help="override the run directory (also: PHASELAB_RUN_DIR)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("coord-check", help="activation-scale check across widths")
    p.add_argument("--widths", default="256,512,1024")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--base-width", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attention-scaling", default="head_dim",
                   choices=["head_dim", "hidden_dim", "sqrt_head_dim"])
    p.add_argument("--band-low", type=float, default=0.5)
    p.add_argument("--band-high", type=float, default=2.0)
    p.add_argument("--slope-tolerance", type=float, default=0.25)
    p.add_argument("--out", help="write the full JSON report here")
    p.set_defaults(fn=cmd_coord_check)

    p = sub.add_parser("ingest", help="tokenize text files into a shard")
    p.add_argument("files", nargs="+")
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--manifest", help="also write a shard manifest here")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("mix", help="show a phase's mixture (optionally sampled)")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", required=True)
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_mix)

    p = sub.add_parser("probe", help="held-out perplexity per checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--no-disjointness-check", action="store_true")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("chat-format", help="round-trip conversations through the wire format")
    p.add_argument("--roundtrip", required=True, metavar="FILE")
    p.add_argument("--vocab-size", type=int, default=512)
    p.set_defaults(fn=cmd_chat_format)

    p = sub.add_parser("bench", help="compare python and compiled kernel backends")
    p.add_argument("--rows", type=int, default=512)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
