import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockdiff.corpus import (
    VOCAB,
    detokenize,
    make_batches,
    make_split,
    markov_bigram_distribution,
    markov_entropy_rate,
    markov_stationary,
    synthetic_markov_corpus,
    tokenize,
    windows,
)

from conftest import rng_for


def test_tokenize_offsets_past_marker():
    ids = tokenize(b"ab")
    assert ids.tolist() == [0x61 + 1, 0x62 + 1]
    assert VOCAB.size == 257 and VOCAB.bos_id == 0


def test_empty_round_trip():
    assert tokenize(b"").size == 0
    assert detokenize([]) == b""


def test_detokenize_range_check():
    with pytest.raises(ValueError):
        detokenize([257])


def test_detokenize_drops_marker():
    assert detokenize([0, ord("a") + 1, 0]) == b"a"


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=200))
def test_round_trip_identity(blob):
    assert detokenize(tokenize(blob)) == blob


# -- batching --------------------------------------------------------------------

def test_two_non_overlapping_windows():
    tokens = np.arange(1, 17)
    split = make_split(tokens, seq_len=8, val_fraction=0.0)
    table = windows(split.train, 8, 8)
    assert table.shape == (2, 8)
    assert np.array_equal(table[0], tokens[:8])
    assert np.array_equal(table[1], tokens[8:])


def test_epoch_reshuffles_but_preserves_multiset():
    tokens = rng_for(0).integers(1, 257, size=64 * 9)
    split = make_split(tokens, seq_len=64, val_fraction=0.0)
    rng = rng_for(1)
    epoch1 = np.concatenate(list(make_batches(split, 2, 64, rng)))
    epoch2 = np.concatenate(list(make_batches(split, 2, 64, rng)))
    assert not np.array_equal(epoch1, epoch2)
    key = lambda table: sorted(tuple(row) for row in table)
    assert key(epoch1) == key(epoch2)


def test_batches_deterministic_under_seed():
    tokens = rng_for(2).integers(1, 257, size=400)
    split = make_split(tokens, seq_len=32, val_fraction=0.1)
    a = np.concatenate(list(make_batches(split, 3, 32, rng_for(7))))
    b = np.concatenate(list(make_batches(split, 3, 32, rng_for(7))))
    assert np.array_equal(a, b)


def test_corpus_too_short_rejected():
    with pytest.raises(ValueError):
        make_split(np.arange(4), seq_len=8)


def test_split_never_crosses_boundary():
    tokens = np.arange(100)
    split = make_split(tokens, seq_len=10, val_fraction=0.2)
    assert split.train.max() < split.val.min()
    assert windows(split.train, 10, 10).max() < 80


# -- synthetic chains ---------------------------------------------------------------

def test_deterministic_chain_has_zero_entropy():
    table = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert markov_entropy_rate(table) == 0.0
    text = synthetic_markov_corpus(table, 50, seed=0)
    assert set(text) <= {ord("a"), ord("b")}
    # strict alternation after the first token
    for i in range(1, 50):
        assert text[i] != text[i - 1]


def test_uniform_chain_entropy_is_log_k():
    table = np.full((4, 4), 0.25)
    assert abs(markov_entropy_rate(table) - math.log(4)) < 1e-12
    assert np.allclose(markov_stationary(table), 0.25)


def test_invalid_rows_rejected():
    with pytest.raises(ValueError):
        synthetic_markov_corpus(np.array([[0.5, 0.4], [0.5, 0.5]]), 10, 0)


def test_empirical_transition_frequencies_match_table():
    table = np.array([
        [0.1, 0.7, 0.1, 0.1],
        [0.1, 0.1, 0.7, 0.1],
        [0.1, 0.1, 0.1, 0.7],
        [0.7, 0.1, 0.1, 0.1],
    ])
    text = synthetic_markov_corpus(table, 1_000_000, seed=3)
    arr = np.frombuffer(text, dtype=np.uint8) - ord("a")
    counts = np.zeros((4, 4))
    np.add.at(counts, (arr[:-1], arr[1:]), 1.0)
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(freq - table).max() < 0.01


def test_bigram_distribution_sums_to_one():
    table = np.array([[0.3, 0.7], [0.6, 0.4]])
    joint = markov_bigram_distribution(table)
    assert abs(joint.sum() - 1.0) < 1e-12
    mu = markov_stationary(table)
    assert np.allclose(joint.sum(axis=1), mu)
