"""Evaluation probes: perplexity oracles, curve tracking, balance report."""

import math

import numpy as np
import pytest

from phaselab.config import MixtureSpec, ModelConfig, MuPParams, PhaseSpec, RunConfig
from phaselab.data import TokenShard, ingest
from phaselab.model import forward, init_params, loss
from phaselab.probe import (
    CurveRecord,
    DisjointnessError,
    ProbeError,
    ProbeSuite,
    balance_report,
    perplexity,
    track,
    write_curves,
)
from phaselab.synth import bracket_code_docs, ngram_language_docs
from phaselab.tokenizer import ByteTokenizer
from phaselab.train import Trainer


def tiny_model(vocab=512):
    return ModelConfig(n_layers=1, hidden_dim=32, n_heads=2, vocab_size=vocab,
                       seq_len=32, rotary_fraction=0.25)


@pytest.fixture
def tok():
    return ByteTokenizer(vocab_size=512)


def test_uniform_model_perplexity_is_vocab_size(tok):
    config = tiny_model()
    mup = MuPParams.for_width(32, base_width=32)
    params = init_params(config, mup, seed=0, dtype=np.float64)
    # zero readout -> identical logits -> uniform predictive distribution
    params["out_proj.w"][:] = 0.0
    params["out_proj.b"][:] = 0.0
    shard = ingest(ngram_language_docs(0, 20), "language", tok, seed=0)
    ppl = perplexity(config, mup, params, shard, seq_len=32)
    assert ppl == pytest.approx(config.vocab_size, rel=1e-6)


def test_perplexity_equals_exp_loss_on_same_windows(tok):
    config = tiny_model()
    mup = MuPParams.for_width(32, base_width=32)
    params = init_params(config, mup, seed=1, dtype=np.float64)
    shard = ingest(ngram_language_docs(1, 10), "language", tok, seed=1)
    seq = 32
    ppl = perplexity(config, mup, params, shard, seq_len=seq, batch_size=4)
    n_windows = shard.token_count // seq
    windows = shard.token_ids[:n_windows * seq].astype(np.int64).reshape(n_windows, seq)
    targets = np.empty_like(windows)
    targets[:, :-1] = windows[:, 1:]
    targets[:, -1] = -1
    logits = forward(config, mup, params, windows)
    assert ppl == pytest.approx(math.exp(loss(logits, targets)), rel=1e-9)


def test_empty_shard_probe_error(tok):
    config = tiny_model()
    mup = MuPParams.for_width(32, base_width=32)
    params = init_params(config, mup, seed=0)
    shard = ingest(["tiny"], "language", tok, seed=0)  # 5 tokens < one window
    with pytest.raises(ProbeError):
        perplexity(config, mup, params, shard, seq_len=32)


def test_overfit_single_document_drives_perplexity_down(tok):
    """Memorizing one short document pushes held-in perplexity toward 1."""
    from phaselab.data import BatchSampler, DataCursor
    from phaselab.model import grad
    from phaselab.optim import OptimState, adamw_step, build_group_rules

    config = ModelConfig(n_layers=2, hidden_dim=32, n_heads=2, vocab_size=512,
                         seq_len=32, rotary_fraction=0.25)
    mup = MuPParams.for_width(32, base_width=32)
    doc = "the cat sat on the mat and the dog sat on the log. " * 4
    shard = ingest([doc], "language", tok, seed=0)
    params = init_params(config, mup, seed=0, dtype=np.float64)
    rules = build_group_rules(params, mup)
    state = OptimState.init(params)
    sampler = BatchSampler({"language": shard})
    mix = MixtureSpec(weights={"language": 1.0})
    phase = PhaseSpec("phase1", 10, 500, 0.01, 0.002, 2, 32)
    cursor = DataCursor.fresh(0, mix.domains)
    from phaselab.optim import lr_at
    for step in range(1, 401):
        batch, cursor = sampler.sample(mix, phase, cursor)
        _, grads = grad(config, mup, params, batch.tokens, batch.targets)
        params, state = adamw_step(state, params, grads, lr_at(phase, step), rules)
    ppl = perplexity(config, mup, params, shard, seq_len=32)
    assert ppl < 1.5


def run_tiny_training(tmp_path, tok, steps=12, interval=4):
    model = tiny_model()
    phase = PhaseSpec("phase1", 2, steps, 0.004, 0.001, 2, 32)
    mix = MixtureSpec(weights={"language": 1.0})
    cfg = RunConfig(model=model,
                    mup=MuPParams.for_width(32, base_width=32),
                    phases=[phase], mixtures={"phase1": mix},
                    shard_paths={}, probe_paths={},
                    run_dir=str(tmp_path / "run"), seed=3, dtype="float64",
                    checkpoint_interval=interval)
    shards = {"language": ingest(ngram_language_docs(5, 50), "language", tok, seed=5)}
    trainer = Trainer(cfg, shards)
    trainer.run_phase(trainer.fresh_state(), phase, mix)
    return trainer, cfg


def make_suite(tok, seq=32):
    held_lang = ingest(ngram_language_docs(99, 10), "language", tok, seed=99)
    held_code = ingest(bracket_code_docs(98, 10), "code", tok, seed=98)
    return ProbeSuite(shards={"language": held_lang, "code": held_code},
                      seq_len=seq, batch_size=4)


def test_track_orders_and_flags_transitions(tmp_path, tok):
    trainer, cfg = run_tiny_training(tmp_path, tok)
    manifests = trainer.checkpoint_manifests()
    assert len(manifests) == 3
    suite = make_suite(tok)
    # scramble the input order; track must sort by accumulated tokens
    records = track(list(reversed(manifests)), suite, cfg.model, cfg.mup,
                    str(tmp_path / "run" / "checkpoints"))
    tokens_axis = [r.accumulated_tokens for r in records]
    assert tokens_axis == sorted(tokens_axis)
    assert all(not r.phase_transition for r in records)  # single phase
    assert all("language_ppl" in r.metrics and "code_ppl" in r.metrics
               for r in records)
    assert all(r.flops_estimate > 0 for r in records)
    out = tmp_path / "curves.jsonl"
    write_curves(records, out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == len(records)


def test_track_single_checkpoint(tmp_path, tok):
    trainer, cfg = run_tiny_training(tmp_path, tok, steps=4, interval=4)
    manifests = trainer.checkpoint_manifests()
    assert len(manifests) == 1
    suite = make_suite(tok)
    records = track(manifests, suite, cfg.model, cfg.mup,
                    str(tmp_path / "run" / "checkpoints"))
    assert len(records) == 1


def test_track_skips_unloadable_with_warning(tmp_path, tok):
    trainer, cfg = run_tiny_training(tmp_path, tok)
    manifests = trainer.checkpoint_manifests()
    bad = tmp_path / "run" / "checkpoints" / manifests[0].checkpoint_id / "params.npz"
    bad.unlink()
    suite = make_suite(tok)
    with pytest.warns(UserWarning, match="skipping checkpoint"):
        records = track(manifests, suite, cfg.model, cfg.mup,
                        str(tmp_path / "run" / "checkpoints"))
    assert len(records) == len(manifests) - 1


def test_probe_deterministic(tmp_path, tok):
    trainer, cfg = run_tiny_training(tmp_path, tok, steps=4, interval=4)
    manifests = trainer.checkpoint_manifests()
    suite = make_suite(tok)
    root = str(tmp_path / "run" / "checkpoints")
    a = track(manifests, suite, cfg.model, cfg.mup, root)
    b = track(manifests, suite, cfg.model, cfg.mup, root)
    assert [r.metrics for r in a] == [r.metrics for r in b]


def test_balance_report_pairs():
    records = [
        CurveRecord("c1", "phase1", 10, 640, {"language_ppl": 8.0, "code_ppl": 9.0}),
        CurveRecord("c2", "phase2", 10, 1280, {"language_ppl": 7.5, "code_ppl": 4.0}),
    ]
    pairs = balance_report(records)
    assert len(pairs) == 2
    assert pairs[0]["language_ppl"] == 8.0
    assert pairs[1]["code_ppl"] == 4.0


def test_balance_report_symmetric_on_identical_shards(tok):
    config = tiny_model()
    mup = MuPParams.for_width(32, base_width=32)
    params = init_params(config, mup, seed=0, dtype=np.float64)
    shard = ingest(ngram_language_docs(7, 10), "language", tok, seed=7)
    p1 = perplexity(config, mup, params, shard, seq_len=32)
    shard_as_code = TokenShard("code", shard.token_ids, shard.doc_boundaries,
                               shard.shuffle_seed)
    p2 = perplexity(config, mup, params, shard_as_code, seq_len=32)
    assert p1 == p2


def test_balance_report_empty_and_missing():
    assert balance_report([]) == []
    bad = [CurveRecord("c", "phase1", 1, 64, {"language_ppl": 5.0})]
    with pytest.raises(ProbeError):
        balance_report(bad)


def test_disjointness_check(tok):
    train = ingest(ngram_language_docs(1, 30), "language", tok, seed=1)
    held = ingest(ngram_language_docs(2, 10), "language", tok, seed=2)
    suite = ProbeSuite(shards={"language": held}, seq_len=32)
    suite.validate_disjoint({"language": train})  # distinct corpora pass

    # a held-out shard carved out of the training stream must fail
    overlap = TokenShard("language", train.token_ids[:64].copy(),
                         np.array([64], dtype=np.int64), shuffle_seed=0)
    bad = ProbeSuite(shards={"language": overlap}, seq_len=32)
    with pytest.raises(DisjointnessError):
        bad.validate_disjoint({"language": train})
