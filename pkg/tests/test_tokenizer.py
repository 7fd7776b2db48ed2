"""State tokenization: binning against an edge-enumeration oracle."""

import math

import numpy as np
import pytest

from deskvla.autodiff import Tensor, mul, sum_all
from deskvla.rng import Rng
from deskvla.tokenizer import (
    InputError,
    ProprioSpec,
    StateMlpParams,
    bin_index,
    bin_of_token,
    mlp_encode_state,
    state_token_ids,
    token_id,
    tokenize_state,
)
from deskvla.autodiff import finite_diff_check

DEFAULT = ProprioSpec(dims=15, clip_min=-3.0, clip_max=3.0, bins=256, vocab_size=1024)
SMALL = ProprioSpec(dims=3, clip_min=-3.0, clip_max=3.0, bins=8, vocab_size=32)


def oracle_bin(value, spec):
    """Independent oracle: largest enumerated bin edge at or below the value."""
    clipped = min(max(value, spec.clip_min), spec.clip_max)
    width = (spec.clip_max - spec.clip_min) / (spec.bins - 1)
    edges = [spec.clip_min + i * width for i in range(spec.bins)]
    best = 0
    for i, edge in enumerate(edges):
        if edge <= clipped:
            best = i
    return min(best, spec.bins - 1)


def test_lower_clip_bound():
    assert bin_index(-3.0, DEFAULT) == 0


def test_upper_clip_overflows_to_last_bin():
    assert bin_index(10.0, DEFAULT) == 255


def test_exact_upper_edge_lands_in_last_bin():
    assert bin_index(3.0, DEFAULT) == 255


def test_midpoint_value():
    # (0 + 3) / 6 * 255 = 127.5 -> floor 127
    assert bin_index(0.0, DEFAULT) == 127


def test_non_finite_rejected():
    with pytest.raises(InputError):
        bin_index(float("nan"), DEFAULT)
    with pytest.raises(InputError):
        bin_index(math.inf, DEFAULT)


def test_degenerate_spec_rejected():
    with pytest.raises(InputError):
        ProprioSpec(dims=1, clip_min=1.0, clip_max=1.0, bins=8, vocab_size=32)
    with pytest.raises(InputError):
        ProprioSpec(dims=1, clip_min=-1.0, clip_max=1.0, bins=1, vocab_size=32)
    with pytest.raises(InputError):
        ProprioSpec(dims=1, clip_min=-1.0, clip_max=1.0, bins=64, vocab_size=32)


@pytest.mark.parametrize("spec", [SMALL, DEFAULT], ids=["B8_V32", "B256_V1024"])
def test_oracle_agreement_on_uniform_samples(spec):
    rng = Rng(42).child("oracle", spec.bins)
    values = (spec.clip_max - spec.clip_min + 2.0) * rng.uniform(10_000) + spec.clip_min - 1.0
    for v in values:
        assert bin_index(v, spec) == oracle_bin(v, spec)


def test_monotone_in_value():
    rng = Rng(7)
    values = np.sort(8.0 * rng.uniform(500) - 4.0)
    bins = [bin_index(v, DEFAULT) for v in values]
    assert all(b1 <= b2 for b1, b2 in zip(bins, bins[1:]))


def test_token_id_reverse_mapping():
    assert token_id(0, ProprioSpec(vocab_size=1000, bins=256)) == 999
    assert token_id(255, ProprioSpec(vocab_size=1000, bins=256)) == 744


def test_token_id_range_and_bijection():
    ids = [token_id(b, SMALL) for b in range(SMALL.bins)]
    assert len(set(ids)) == SMALL.bins
    assert min(ids) == SMALL.vocab_size - SMALL.bins
    assert max(ids) == SMALL.vocab_size - 1
    for b in range(SMALL.bins):
        assert bin_of_token(token_id(b, SMALL), SMALL) == b


def test_token_id_bounds_checked():
    with pytest.raises(InputError):
        token_id(-1, SMALL)
    with pytest.raises(InputError):
        token_id(SMALL.bins, SMALL)


def test_tokenize_state_lookup_rows():
    rng = Rng(3)
    spec = ProprioSpec(dims=1, clip_min=-3.0, clip_max=3.0, bins=8, vocab_size=32)
    table = Tensor(rng.normal((32, 4)))
    seq = tokenize_state([spec.clip_min], table, spec)
    np.testing.assert_array_equal(seq.embeddings.data[0], table.data[31])
    assert seq.modality == "proprio"


def test_tokenize_state_sub_bin_noise_invariant():
    spec = SMALL
    q = np.array([0.11, -1.2, 2.4])
    width = (spec.clip_max - spec.clip_min) / (spec.bins - 1)
    # nudge each value within its own bin (checked by construction)
    nudged = q + width * 0.25
    assert [bin_index(v, spec) for v in q] == [bin_index(v, spec) for v in nudged]
    table = Tensor(Rng(5).normal((32, 4)))
    a = tokenize_state(q, table, spec)
    b = tokenize_state(nudged, table, spec)
    np.testing.assert_array_equal(a.embeddings.data, b.embeddings.data)


def test_tokenize_state_clipping_idempotent():
    spec = SMALL
    q = np.array([-9.0, 0.4, 9.0])
    clipped = np.clip(q, spec.clip_min, spec.clip_max)
    table = Tensor(Rng(5).normal((32, 4)))
    np.testing.assert_array_equal(
        tokenize_state(q, table, spec).embeddings.data,
        tokenize_state(clipped, table, spec).embeddings.data,
    )


def test_tokenize_state_gradient_reaches_only_used_rows():
    spec = SMALL
    table = Tensor(Rng(9).normal((32, 4)), requires_grad=True)
    q = [-3.0, 0.0, 3.0]
    seq = tokenize_state(q, table, spec)
    sum_all(seq.embeddings).backward()
    touched = set(state_token_ids(q, spec))
    for row in range(32):
        if row in touched:
            assert np.any(table.grad[row] != 0.0)
        else:
            assert np.all(table.grad[row] == 0.0)


def test_tokenize_state_validates_table_and_length():
    table = Tensor(np.zeros((16, 4)))
    with pytest.raises(InputError):
        tokenize_state([0.0, 0.0, 0.0], table, SMALL)
    table = Tensor(np.zeros((32, 4)))
    with pytest.raises(InputError):
        tokenize_state([0.0], table, SMALL)


# -- MLP encoding variant -------------------------------------------------


def test_mlp_encode_zero_weights_zero_token():
    params = StateMlpParams(
        w1=Tensor(np.zeros((5, 6))), b1=Tensor(np.zeros(6)),
        w2=Tensor(np.zeros((6, 4))), b2=Tensor(np.zeros(4)),
    )
    out = mlp_encode_state(np.ones(5), params)
    np.testing.assert_array_equal(out.embeddings.data, np.zeros((1, 4)))


def test_mlp_encode_output_shape():
    for p in (3, 9, 15):
        params = StateMlpParams.init(p, 8, 4, Rng(p))
        assert mlp_encode_state(np.zeros(p), params).embeddings.shape == (1, 4)


def test_mlp_encode_dim_mismatch():
    params = StateMlpParams.init(5, 8, 4, Rng(0))
    with pytest.raises(InputError):
        mlp_encode_state(np.zeros(7), params)


def test_mlp_encode_gradient_check():
    rng = Rng(17)
    params = StateMlpParams.init(4, 6, 3, rng.child("init"))
    state = rng.normal(4)
    weight = Tensor(rng.normal((1, 3)))

    def loss_wrt(tensor_name):
        def f(x):
            swapped = StateMlpParams(
                w1=x if tensor_name == "w1" else params.w1,
                b1=x if tensor_name == "b1" else params.b1,
                w2=x if tensor_name == "w2" else params.w2,
                b2=x if tensor_name == "b2" else params.b2,
            )
            return sum_all(mul(mlp_encode_state(state, swapped).embeddings, weight))
        return f

    for name in ("w1", "b1", "w2", "b2"):
        err = finite_diff_check(loss_wrt(name), getattr(params, name))
        assert err < 1e-5, f"{name}: {err:.2e}"
