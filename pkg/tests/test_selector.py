"""Selection mechanism: scoring, voting, straight-through weights, pooling."""

import numpy as np
import pytest

from deskvla.autodiff import Tensor, finite_diff_check, mul, stop_gradient, sum_all
from deskvla.rng import Rng
from deskvla.selector import (
    AnnealSchedule,
    SelectorError,
    SelectorParams,
    anneal_alpha,
    apply_selection,
    context_token,
    make_queries,
    perturb,
    pool_tokens,
    score,
    select_tokens,
    soft_probs,
    ste_weights,
    vote_mask,
)


def _params(d, tracked=True):
    p = SelectorParams.init(d)
    if not tracked:
        for _, t, _ in p.named():
            t.requires_grad = False
    return p


class FixedUniform:
    """Rng stand-in that returns a preset uniform field."""

    def __init__(self, values):
        self.values = np.asarray(values)

    def uniform(self, shape=None):
        assert shape is None or tuple(shape) == self.values.shape
        return self.values.copy()


# -- query generation ------------------------------------------------------


def test_single_guidance_token_degenerate_softmax():
    rng = Rng(0)
    d = 6
    params = _params(d)
    visual = Tensor(rng.normal((4, d)))
    guidance = Tensor(rng.normal((1, d)))
    queries = make_queries(visual, guidance, params)
    from deskvla.autodiff import rmsnorm

    expected = rmsnorm(guidance, params.gain_guidance).data
    for row in queries.data:
        np.testing.assert_allclose(row, expected[0], atol=1e-12)


def test_queries_in_convex_hull():
    # independent oracle: nonnegative least squares with a sum-to-one row
    from scipy.optimize import nnls

    rng = Rng(1)
    d = 2
    params = _params(d)
    for seed in range(10):
        r = rng.child(seed)
        visual = Tensor(r.normal((5, d)))
        guidance = Tensor(r.normal((3, d)))
        queries = make_queries(visual, guidance, params)
        from deskvla.autodiff import rmsnorm

        hull = rmsnorm(guidance, params.gain_guidance).data
        basis = np.vstack([hull.T, np.ones(hull.shape[0])])
        for q in queries.data:
            _, residual = nnls(basis, np.concatenate([q, [1.0]]))
            assert residual < 1e-8


def test_make_queries_gradient():
    rng = Rng(2)
    d = 5
    params = _params(d)
    guidance = Tensor(rng.normal((3, d)))
    weight = Tensor(rng.normal((6, d)))
    f = lambda x: sum_all(mul(make_queries(x, guidance, params), weight))
    assert finite_diff_check(f, Tensor(rng.normal((6, d)))) < 1e-5


def test_make_queries_validates():
    params = _params(4)
    with pytest.raises(SelectorError):
        make_queries(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 5))), params)
    with pytest.raises(SelectorError):
        make_queries(Tensor(np.ones((3, 4))), Tensor(np.zeros((0, 4))), params)


# -- scoring ---------------------------------------------------------------


def test_score_single_token():
    rng = Rng(3)
    d = 4
    params = _params(d)
    visual = Tensor(rng.normal((1, d)))
    queries = Tensor(rng.normal((1, d)))
    out = score(queries, visual, params)
    from deskvla.autodiff import rmsnorm

    qn = rmsnorm(queries, params.gain_query).data
    vn = rmsnorm(visual, params.gain_visual).data
    np.testing.assert_allclose(out.data, qn @ vn.T / np.sqrt(d), atol=1e-12)


def test_score_bounded_by_sqrt_dim():
    # rows have unit RMS after normalization, so |dot| <= D and |S| <= sqrt(D)
    rng = Rng(4)
    d = 8
    params = _params(d)
    for seed in range(10):
        r = rng.child(seed)
        visual = Tensor(10.0 * r.normal((7, d)))
        queries = make_queries(visual, Tensor(r.normal((3, d))), params)
        s = score(queries, visual, params)
        assert np.all(np.abs(s.data) <= np.sqrt(d) + 1e-9)


def test_score_gradient():
    rng = Rng(5)
    d = 4
    params = _params(d)
    queries = Tensor(rng.normal((5, d)))
    weight = Tensor(rng.normal((5, 5)))
    f = lambda x: sum_all(mul(score(queries, x, params), weight))
    assert finite_diff_check(f, Tensor(rng.normal((5, d)))) < 1e-5


# -- noise ------------------------------------------------------------------


def test_perturb_zero_alpha_is_identity():
    rng = Rng(6)
    scores = Tensor(rng.normal((4, 4)))
    out = perturb(scores, 0.0, rng.child("noise"))
    assert out is scores


def test_perturb_fixed_seed_reproducible():
    scores = Tensor(np.zeros((3, 3)))
    a = perturb(scores, 0.7, Rng(9).child("n"))
    b = perturb(scores, 0.7, Rng(9).child("n"))
    assert a.data.tobytes() == b.data.tobytes()


def test_perturb_small_alpha_preserves_argmax():
    rng = Rng(7)
    scores = Tensor(rng.normal((6, 6)))
    hard = scores.data.argmax(axis=1)
    agreements = 0
    for seed in range(1000):
        noisy = perturb(scores, 1e-6, Rng(seed).child("mc"))
        agreements += np.array_equal(noisy.data.argmax(axis=1), hard)
    assert agreements == 1000


def test_perturb_rejects_negative_alpha():
    with pytest.raises(SelectorError):
        perturb(Tensor(np.zeros((2, 2))), -0.1, Rng(0))


# -- voting ------------------------------------------------------------------


def test_vote_mask_diagonal_dominant():
    mask, counts = vote_mask(Tensor(np.eye(3) * 10.0))
    np.testing.assert_array_equal(mask, [1, 1, 1])
    np.testing.assert_array_equal(counts, [1, 1, 1])


def test_vote_mask_single_column():
    scores = np.zeros((5, 5))
    scores[:, 0] = 1.0
    mask, counts = vote_mask(scores)
    np.testing.assert_array_equal(mask, [1, 0, 0, 0, 0])
    assert counts[0] == 5


def test_vote_mask_tie_breaks_low_index():
    mask, _ = vote_mask(np.zeros((2, 4)))
    np.testing.assert_array_equal(mask, [1, 0, 0, 0])


def test_vote_count_bounds():
    rng = Rng(8)
    for seed in range(25):
        mask, counts = vote_mask(rng.child(seed).normal((9, 9)))
        assert 1 <= mask.sum() <= 9
        assert counts.sum() == 9


def test_untrained_iid_kept_fraction():
    # with i.i.d. scores each token survives with prob 1 - (1 - 1/n)^n
    n, trials = 100, 200
    rng = Rng(77)
    fractions = []
    for t in range(trials):
        mask, _ = vote_mask(rng.child(t).normal((n, n)))
        fractions.append(mask.sum() / n)
    expected = 1.0 - (1.0 - 1.0 / n) ** n
    assert abs(np.mean(fractions) - expected) < 0.03


# -- soft vote distribution ---------------------------------------------------


def test_soft_probs_sum_to_one():
    rng = Rng(10)
    for seed in range(10):
        _, mean_probs = soft_probs(Tensor(rng.child(seed).normal((6, 6))), 0.5)
        assert abs(mean_probs.data.sum() - 1.0) < 1e-9


def test_soft_probs_high_temperature_uniform():
    rng = Rng(11)
    _, mean_probs = soft_probs(Tensor(rng.normal((8, 8))), 1e6)
    assert np.abs(mean_probs.data - 1.0 / 8).max() < 1e-6


def test_soft_probs_low_temperature_matches_votes():
    rng = Rng(12)
    noisy = Tensor(rng.normal((10, 10)))
    # ensure comfortable row margins so the hard/soft limits agree
    gaps = np.sort(noisy.data, axis=1)
    assert np.all(gaps[:, -1] - gaps[:, -2] > 5e-3)
    _, counts = vote_mask(noisy)
    _, mean_probs = soft_probs(noisy, 1e-4)
    np.testing.assert_allclose(mean_probs.data.reshape(-1), counts / 10.0, atol=1e-3)


def test_soft_probs_rejects_nonpositive_alpha():
    with pytest.raises(SelectorError):
        soft_probs(Tensor(np.zeros((2, 2))), 0.0)


# -- straight-through weights --------------------------------------------------


def test_ste_forward_equals_mask():
    mean_probs = Tensor(np.array([[0.7], [0.3]]))
    w = ste_weights(np.array([1, 0]), mean_probs)
    np.testing.assert_array_equal(w.data, [[1.0], [0.0]])


def test_ste_gradient_equals_probs_gradient():
    # two graphs from the same upstream parameters must produce the same grads
    rng = Rng(13)
    d = 4
    params = _params(d)
    visual = Tensor(rng.normal((5, d)), requires_grad=True)
    guidance = Tensor(rng.normal((2, d)))

    def build_probs():
        noisy = perturb(score(make_queries(visual, guidance, params), visual, params),
                        0.4, Rng(99).child("noise"))
        _, mean_probs = soft_probs(noisy, 0.4)
        return noisy, mean_probs

    noisy, mean_probs = build_probs()
    mask, _ = vote_mask(noisy)
    sum_all(ste_weights(mask, mean_probs)).backward()
    grads_w = {id(t): t.grad.copy() for _, t, _ in params.named() if t.grad is not None}
    grad_vis_w = visual.grad.copy()

    for _, t, _ in params.named():
        t.grad = None
    visual.grad = None
    _, mean_probs = build_probs()
    sum_all(mean_probs).backward()
    for name, t, _ in params.named():
        if t.grad is not None:
            np.testing.assert_array_equal(grads_w[id(t)], t.grad)
    np.testing.assert_array_equal(grad_vis_w, visual.grad)


def test_ste_mask_path_gets_no_gradient():
    probs = Tensor(np.array([[0.6], [0.4]]), requires_grad=True)
    w = ste_weights(np.array([1, 0]), probs)
    sum_all(w).backward()
    np.testing.assert_array_equal(probs.grad, np.ones((2, 1)))
    # the hard mask is plain data; nothing upstream of it exists to receive
    # gradient, and the stop-gradient side contributes exactly zero
    sg = stop_gradient(probs)
    assert not sg.requires_grad


# -- gather / scaling -----------------------------------------------------------


def test_apply_selection_identity_when_all_kept():
    rng = Rng(14)
    visual = Tensor(rng.normal((4, 3)))
    weights = Tensor(np.ones((4, 1)))
    compact, kept, attn = apply_selection(visual, weights, np.ones(4, dtype=int))
    np.testing.assert_array_equal(compact.data, visual.data)
    np.testing.assert_array_equal(kept, np.arange(4))
    np.testing.assert_array_equal(attn, np.ones(4, dtype=int))


def test_apply_selection_gathers_in_order():
    visual = Tensor(np.arange(12.0).reshape(4, 3))
    weights = Tensor(np.ones((4, 1)))
    compact, kept, _ = apply_selection(visual, weights, np.array([0, 1, 0, 1]))
    np.testing.assert_array_equal(kept, [1, 3])
    np.testing.assert_array_equal(compact.data, visual.data[[1, 3]])


def test_apply_selection_rejects_empty_mask():
    with pytest.raises(SelectorError):
        apply_selection(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 1))), np.zeros(3))


def test_apply_selection_forward_values_bitwise():
    rng = Rng(15)
    d = 4
    params = _params(d)
    visual = Tensor(rng.normal((6, d)))
    result = select_tokens(visual, Tensor(rng.normal((3, d))), params,
                           alpha=0.6, rng=rng.child("z"), soft=True)
    np.testing.assert_array_equal(result.compact.data,
                                  visual.data[result.kept_indices])


def test_selection_gradient_wrt_visual_matches_finite_differences():
    # frozen noise keeps the vote mask stable under probe perturbations; the
    # stop-gradient snapshot is frozen at the base point so the probed
    # function's derivative equals the straight-through surrogate gradient
    rng = Rng(16)
    d = 4
    params = _params(d, tracked=False)
    base_visual = Tensor(rng.normal((5, d)))
    guidance = Tensor(rng.normal((2, d)))
    noise = rng.child("frozen").uniform((5, 5))
    weight = Tensor(rng.normal((5, d)))

    base_noisy = perturb(score(make_queries(base_visual, guidance, params),
                               base_visual, params), 0.5, FixedUniform(noise))
    base_mask, _ = vote_mask(base_noisy)
    _, base_probs = soft_probs(base_noisy, 0.5)
    frozen_probs = base_probs.data.copy()

    def f(x):
        noisy = perturb(score(make_queries(x, guidance, params), x, params),
                        0.5, FixedUniform(noise))
        _, mean_probs = soft_probs(noisy, 0.5)
        from deskvla.autodiff import add, gather_rows, sub

        w = add(Tensor(base_mask.astype(np.float64).reshape(-1, 1)),
                sub(mean_probs, Tensor(frozen_probs)))
        kept = np.flatnonzero(base_mask)
        compact = mul(gather_rows(x, kept), gather_rows(w, kept))
        return sum_all(mul(compact, Tensor(weight.data[kept])))

    assert finite_diff_check(f, base_visual) < 1e-5


# -- context token ---------------------------------------------------------------


def test_context_token_identity_projection_constant_rows():
    row = np.array([1.0, -2.0, 0.5])
    visual = Tensor(np.tile(row, (5, 1)))
    ctx = context_token(visual, Tensor(np.eye(3)))
    np.testing.assert_allclose(ctx.data, row.reshape(1, -1), atol=1e-15)


def test_context_token_linearity():
    rng = Rng(17)
    visual = Tensor(rng.normal((4, 3)))
    proj = Tensor(rng.normal((3, 3)))
    doubled = context_token(Tensor(2.0 * visual.data), proj)
    np.testing.assert_allclose(doubled.data, 2.0 * context_token(visual, proj).data,
                               atol=1e-12)


def test_context_token_gradient_spreads_mean():
    rng = Rng(18)
    visual = Tensor(rng.normal((5, 3)), requires_grad=True)
    proj = Tensor(rng.normal((3, 3)))
    upstream = rng.normal((1, 3))
    sum_all(mul(context_token(visual, proj), Tensor(upstream))).backward()
    expected_row = (upstream @ proj.data) / 5.0  # (g W_c) / n per row
    for row in visual.grad:
        np.testing.assert_allclose(row, expected_row.reshape(-1), atol=1e-12)


# -- anneal -----------------------------------------------------------------------


def test_anneal_endpoints_and_midpoint():
    sched = AnnealSchedule(1.0, 0.01, 1000)
    assert anneal_alpha(0, sched) == 1.0
    assert abs(anneal_alpha(1000, sched) - 0.01) < 1e-15
    assert abs(anneal_alpha(500, sched) - 0.505) < 1e-12


def test_anneal_monotone_and_clamped():
    sched = AnnealSchedule(1.0, 0.01, 100)
    values = [anneal_alpha(s, sched) for s in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert anneal_alpha(-5, sched) == 1.0
    assert abs(anneal_alpha(500, sched) - 0.01) < 1e-15


# -- pooling baselines --------------------------------------------------------------


def test_pool_mean_identical_rows():
    row = np.array([2.0, 4.0, -1.0])
    compact, kept = pool_tokens(Tensor(np.tile(row, (6, 1))), "mean")
    np.testing.assert_allclose(compact.data, row.reshape(1, -1), atol=1e-15)
    assert kept.size == 0


def test_pool_random_full_is_sorted_copy():
    rng = Rng(19)
    visual = Tensor(rng.normal((5, 3)))
    compact, kept = pool_tokens(visual, "random_k", k=5, rng=rng.child("r"))
    np.testing.assert_array_equal(kept, np.arange(5))
    np.testing.assert_array_equal(compact.data, visual.data)


def test_pool_max_topk_by_norm():
    visual = Tensor(np.diag([1.0, 5.0, 2.0]))
    compact, kept = pool_tokens(visual, "max_topk", k=1)
    np.testing.assert_array_equal(kept, [1])
    np.testing.assert_array_equal(compact.data, visual.data[[1]])


def test_pool_validates_k_and_method():
    visual = Tensor(np.ones((4, 2)))
    with pytest.raises(SelectorError):
        pool_tokens(visual, "max_topk", k=0)
    with pytest.raises(SelectorError):
        pool_tokens(visual, "random_k", k=5, rng=Rng(0))
    with pytest.raises(SelectorError):
        pool_tokens(visual, "nope", k=1)


# -- full pass invariants --------------------------------------------------------------


def test_select_tokens_deterministic_at_zero_alpha():
    rng = Rng(20)
    d = 6
    params = _params(d)
    visual = Tensor(rng.normal((8, d)))
    guidance = Tensor(rng.normal((3, d)))
    a = select_tokens(visual, guidance, params, 0.0, Rng(1).child("x"), soft=False)
    b = select_tokens(visual, guidance, params, 0.0, Rng(2).child("y"), soft=False)
    np.testing.assert_array_equal(a.keep_mask, b.keep_mask)
    assert abs(a.probs.data.sum() - 1.0) < 1e-9


def test_select_tokens_reproducible_with_seed():
    rng = Rng(21)
    d = 6
    params = _params(d)
    visual = Tensor(rng.normal((8, d)))
    guidance = Tensor(rng.normal((3, d)))
    a = select_tokens(visual, guidance, params, 0.8, Rng(5).child("n"), soft=True)
    b = select_tokens(visual, guidance, params, 0.8, Rng(5).child("n"), soft=True)
    np.testing.assert_array_equal(a.keep_mask, b.keep_mask)
    np.testing.assert_array_equal(a.ste_weights.data, b.ste_weights.data)


def test_select_tokens_fused_normalization_matches_composed_ops():
    rng = Rng(22)
    d = 5
    params = _params(d)
    visual = Tensor(rng.normal((6, d)))
    guidance = Tensor(rng.normal((3, d)))
    fused = select_tokens(visual, guidance, params, 0.0, None, soft=False)
    composed = score(make_queries(visual, guidance, params), visual, params)
    mask, counts = vote_mask(composed)
    np.testing.assert_array_equal(fused.keep_mask, mask)
    np.testing.assert_array_equal(fused.vote_counts, counts)
