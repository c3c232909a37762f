import json
import math

import numpy as np
import pytest

from blockdiff.corpus import make_split, synthetic_markov_corpus, tokenize
from blockdiff.evalcli import (
    eval_perplexity,
    run_invariant_suite,
    strict_leak_check,
    unigram_entropy,
)
from blockdiff.masks import MaskMatrix, MaskPair, build_masks
from blockdiff.model import forward
from blockdiff.schedule import sample_masking_order

from conftest import rng_for, tiny_model


# -- perplexity -------------------------------------------------------------------

def _tiny_split(seed=0, seq_len=8, size=400, vocab=13):
    tokens = rng_for(seed).integers(0, vocab, size=size)
    return make_split(tokens, seq_len=seq_len, val_fraction=0.25)


def test_untrained_model_perplexity_is_vocab_size():
    params, config = tiny_model(50, vocab=257, scrambled=False)
    tokens = tokenize(synthetic_markov_corpus(np.full((3, 3), 1 / 3), 600, 0))
    split = make_split(tokens, seq_len=16, val_fraction=0.25)
    nll, ppl = eval_perplexity(params, config, split)
    assert abs(nll - math.log(257)) < 1e-6
    assert abs(ppl - 257.0) < 1e-3


def test_eval_matches_hand_loop():
    from blockdiff.objective import LossWeights, diffusion_loss
    from blockdiff.schedule import identity_plan

    params, config = tiny_model(51)
    split = _tiny_split(1, seq_len=8, size=120)
    nll, ppl = eval_perplexity(params, config, split)
    plan = identity_plan(8)
    from blockdiff.corpus import windows

    table = windows(split.val, 8, 8)
    want = np.mean([
        float(diffusion_loss(forward(row, plan, params, config), row, plan,
                             LossWeights.uniform(8)).data)
        for row in table
    ])
    assert abs(nll - want) < 1e-10
    assert ppl == float(np.exp(nll))


def test_perplexity_positive_and_finite():
    params, config = tiny_model(52)
    split = _tiny_split(2)
    nll, ppl = eval_perplexity(params, config, split)
    assert 0 < ppl < np.inf


# -- unigram entropy -----------------------------------------------------------------

def test_entropy_of_constant_sequence():
    assert unigram_entropy([7, 7, 7, 7]) == 0.0


def test_entropy_even_split():
    assert abs(unigram_entropy([1, 2, 1, 2]) - math.log(2)) < 1e-12


def test_entropy_hand_value():
    want = -(0.5 * math.log(0.5) + 0.25 * math.log(0.25) + 0.25 * math.log(0.25))
    assert abs(unigram_entropy([5, 5, 6, 7]) - want) < 1e-12
    assert abs(unigram_entropy([5, 5, 6, 7]) - 1.0397207708399179) < 1e-12


def test_entropy_rejects_empty():
    with pytest.raises(ValueError):
        unigram_entropy([])


def test_entropy_invariances(rng):
    tokens = rng.integers(0, 9, size=64)
    base = unigram_entropy(tokens)
    assert unigram_entropy(tokens[::-1]) == base
    relabeled = (tokens * 7 + 3) % 251  # injective relabeling for this range
    assert abs(unigram_entropy(relabeled) - base) < 1e-12


# -- invariant suite ------------------------------------------------------------------

def test_invariant_suite_all_pass():
    report = run_invariant_suite(0)
    failures = [row for row in report if not row["passed"]]
    assert not failures, failures


def test_invariant_suite_lists_each_invariant_once():
    report = run_invariant_suite(0)
    names = [row["name"] for row in report]
    assert len(names) == len(set(names))
    assert len(names) >= 15


def test_corrupted_strict_mask_is_caught(rng):
    params, config = tiny_model(53)
    plan = sample_masking_order(6, rng_for(8))
    tokens = rng_for(9).integers(0, config.vocab, size=6)
    good = build_masks(plan)
    ok, _ = strict_leak_check(params, config, plan, tokens, good)
    assert ok
    # allow one diagonal-block entry in the strict mask
    allowed = good.strict.allowed.copy()
    row = int(np.flatnonzero(np.asarray(plan.block_sizes) >= 1)[0])
    allowed[0, 0] = True  # block 1 attends itself: a leak
    bad = MaskPair(causal=good.causal, strict=MaskMatrix(plan.n, allowed))
    ok, detail = strict_leak_check(params, config, plan, tokens, bad)
    assert not ok and "leak" in detail


# -- CLI ------------------------------------------------------------------------------

def test_cli_dump_plan_and_mask(capsys):
    from blockdiff.cli import main

    assert main(["dump-plan", "--tau", "3,2,4,4,1,3,2"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "7 4"
    assert out.splitlines()[1] == "3 2 4 4 1 3 2"

    assert main(["dump-mask", "--length", "8", "--streams", "2", "--kind", "strict"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "00000000"
    assert rows[2] == "11000000"  # first parallel group sees the two heads


def test_cli_flops(capsys):
    from blockdiff.cli import main

    assert main(["flops", "--length", "64", "--dim", "32", "--layers", "8",
                 "--two-stream-layers", "0"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["ratio_vs_standard"] == 1.0


def test_cli_verify(capsys):
    from blockdiff.cli import main

    assert main(["verify", "--seed", "0"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert all(row["passed"] for row in payload)


def test_cli_verify_names_failed_invariant(capsys, monkeypatch):
    from blockdiff import evalcli
    from blockdiff.cli import main

    broken = [("always_fails", lambda seed: (False, "injected failure"))]
    monkeypatch.setattr(evalcli, "INVARIANT_CHECKS",
                        evalcli.INVARIANT_CHECKS[:2] + broken)
    assert main(["verify"]) == 1
    captured = capsys.readouterr()
    assert "always_fails" in captured.err


def test_cli_train_eval_generate_round_trip(tmp_path, capsys):
    from blockdiff.cli import main

    data = tmp_path / "corpus.txt"
    data.write_bytes(synthetic_markov_corpus(np.full((2, 2), 0.5), 2000, 1))
    config = tmp_path / "train.cfg"
    config.write_text("""
# toy settings
vocab = 257
dim = 8
heads = 2
layers = 2
two_stream_layers = 1
batch_size = 2
seq_len = 16
total_steps = 3
warmup_steps = 1
dropout = 0.0
ar_steps = 0
ramp_end_step = 2
max_shuffled = 2
seed = 4
""")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--data", str(data),
                 "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 3
    ck = summary["checkpoint"]
    assert (out / "metrics.csv").exists()

    assert main(["eval", "--checkpoint", ck, "--data", str(data),
                 "--seq-len", "16"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["perplexity"] == pytest.approx(np.exp(payload["nll"]))

    assert main(["generate", "--checkpoint", ck, "--length", "8", "--streams", "2",
                 "--seed", "1", "--format", "json"]) == 0
    gen = json.loads(capsys.readouterr().out)
    assert len(gen["tokens"]) == 8
    assert gen["model_calls"] == 2 + 3
    assert gen["groups"][0] == [0] and gen["groups"][2] == [1, 5]

    assert main(["entropy", "--checkpoint", ck, "--length", "16", "--samples", "2",
                 "--csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("mean_unigram_entropy")
