import numpy as np
import pytest

from hvtsurv.blocks import (
    AttnPoolParams,
    BucketParams,
    RelPosBiasTable,
    WindowBlockParams,
    attn_pool,
    attn_pool_backward,
    bucket_distance,
    bucket_distances,
    inverse_permutation,
    local_window_attention,
    local_window_attention_backward,
    manhattan_bias,
    manhattan_bias_backward,
    manhattan_bucket_index,
    shuffle_window_attention,
    shuffle_window_attention_backward,
    spatial_shuffle,
)
from hvtsurv.errors import ShapeError, ValidationError
from hvtsurv.numerics import ParamStore, finite_diff_check

rng = np.random.default_rng(777)
DEFAULTS = BucketParams()


class TestBucketDistance:
    def test_zero(self):
        assert bucket_distance(0.0, DEFAULTS) == 0

    def test_reference_table(self):
        # derived by direct evaluation of the piecewise map with the
        # default (1.9, 7.6, 11.4, 7) parameters
        expected = {0: 0, 1: 1, 2: 2, 3: 3, 5: 4, 11.4: 6, 100: 7}
        for x, want in expected.items():
            assert bucket_distance(float(x), DEFAULTS) == want

    def test_inner_branch_value(self):
        # g(3): 1.9 + ln(3/1.9)/ln(6) * 3.8 = 2.8687 -> rounds to 3
        inner = 1.9 + np.log(3 / 1.9) / np.log(11.4 / 1.9) * (7.6 - 3.8)
        assert abs(inner - 2.8687) < 1e-3
        assert bucket_distance(3.0, DEFAULTS) == 3

    def test_cap_at_lambda(self):
        inner = 1.9 + np.log(100 / 1.9) / np.log(11.4 / 1.9) * (7.6 - 3.8)
        assert inner > 10
        assert bucket_distance(100.0, DEFAULTS) == 7

    def test_even_and_monotone_and_capped(self):
        xs = np.sort(rng.uniform(0, 500, size=200))
        buckets = bucket_distances(xs, DEFAULTS)
        assert np.all(np.diff(buckets) >= 0)
        assert np.all(buckets <= DEFAULTS.lam)
        assert np.all(buckets >= 0)
        assert np.array_equal(bucket_distances(-xs, DEFAULTS), buckets)

    def test_validation(self):
        with pytest.raises(ValidationError):
            BucketParams(alpha=0.0)
        with pytest.raises(ValidationError):
            BucketParams(alpha=3.0, beta=2.0)
        with pytest.raises(ValidationError):
            BucketParams(gamma=1.0)
        with pytest.raises(ValidationError):
            BucketParams(lam=0)


class TestManhattanBias:
    def test_identical_coords_constant(self):
        table = RelPosBiasTable.init(DEFAULTS, 2, rng)
        coords = np.array([[3, 3]] * 4)
        bias = manhattan_bias(coords, table, DEFAULTS)
        for h in range(2):
            assert np.allclose(bias[h], table.table[0, h])

    def test_distance_three_lookup(self):
        table = RelPosBiasTable.init(DEFAULTS, 3, rng)
        bias = manhattan_bias(np.array([[1, 1], [2, 3]]), table, DEFAULTS)
        assert np.allclose(bias[:, 0, 1], table.table[bucket_distance(3, DEFAULTS)])
        assert bucket_distance(3, DEFAULTS) == 3

    def test_symmetry(self):
        table = RelPosBiasTable.init(DEFAULTS, 4, rng)
        for _ in range(20):
            coords = rng.integers(1, 30, size=(6, 2))
            bias = manhattan_bias(coords, table, DEFAULTS)
            assert np.allclose(bias, bias.transpose(0, 2, 1))

    def test_only_low_rows_addressed(self):
        for _ in range(50):
            coords = rng.integers(1, 1000, size=(8, 2))
            idx = manhattan_bucket_index(coords, DEFAULTS)
            assert idx.max() <= DEFAULTS.lam
            assert idx.min() >= 0


def block_fd_error(w=4, d=8, heads=2, seed=0, with_bias=True, shuffle_len=None):
    """Max FD relative error of a window block over params, input and table."""
    local_rng = np.random.default_rng(seed)
    params = WindowBlockParams.init(d, heads, local_rng)
    table = RelPosBiasTable.init(DEFAULTS, heads, local_rng)
    length = shuffle_len or w
    coords = local_rng.integers(1, 8, size=(w, 2))
    idx = manhattan_bucket_index(coords, DEFAULTS)
    x = local_rng.normal(size=(length, d))
    probe = local_rng.normal(size=(length, d))

    store = ParamStore()
    store.add("x", x)
    for name in params.array_fields():
        store.add(name, getattr(params, name))
    if with_bias:
        store.add("bias_table", table.table)

    def rebuild(ps):
        pr = WindowBlockParams(**{n: ps[n] for n in params.array_fields()}, n_heads=heads)
        bias = None
        if with_bias:
            bias = RelPosBiasTable(table=ps["bias_table"]).table[idx].transpose(2, 0, 1)
        return pr, bias

    def f(ps):
        pr, bias = rebuild(ps)
        if shuffle_len:
            out = shuffle_window_attention(ps["x"], pr, w)
        else:
            out = local_window_attention(ps["x"], pr, bias)
        return float(np.sum(out * probe))

    pr, bias = rebuild(store)
    if shuffle_len:
        _, st = shuffle_window_attention(store["x"], pr, w, return_state=True)
        gx, grads = shuffle_window_attention_backward(probe, st, pr)
    else:
        _, st = local_window_attention(store["x"], pr, bias, return_state=True)
        gx, grads, gbias = local_window_attention_backward(probe, st, pr)
        if with_bias:
            store.add_grad("bias_table", manhattan_bias_backward(gbias, idx, table.table.shape))
    store.add_grad("x", gx)
    for k, v in grads.items():
        store.add_grad(k, v)
    return finite_diff_check(f, store, eps=1e-5)


class TestLocalWindowAttention:
    def test_identical_rows_uniform_attention(self):
        params = WindowBlockParams.init(8, 2, np.random.default_rng(1))
        x = np.tile(rng.normal(size=8), (5, 1))
        out, st = local_window_attention(x, params, None, return_state=True)
        assert np.allclose(st["attn"], 1.0 / 5.0)
        assert np.allclose(out, out[0])

    def test_attention_rows_sum_to_one(self):
        params = WindowBlockParams.init(8, 2, np.random.default_rng(2))
        table = RelPosBiasTable.init(DEFAULTS, 2, rng)
        for _ in range(20):
            coords = rng.integers(1, 9, size=(6, 2))
            bias = manhattan_bias(coords, table, DEFAULTS)
            x = rng.normal(size=(6, 8))
            _, st = local_window_attention(x, params, bias, return_state=True)
            assert np.allclose(st["attn"].sum(axis=-1), 1.0, atol=1e-6)

    def test_permutation_equivariance_zero_bias(self):
        params = WindowBlockParams.init(8, 2, np.random.default_rng(3))
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        out = local_window_attention(x, params, None)
        out_p = local_window_attention(x[perm], params, None)
        assert np.allclose(out_p, out[perm])

    def test_gradient_full_block(self):
        assert block_fd_error(seed=0) < 1e-4

    def test_bias_shape_checked(self):
        params = WindowBlockParams.init(8, 2, np.random.default_rng(4))
        with pytest.raises(ShapeError):
            local_window_attention(rng.normal(size=(4, 8)), params, np.zeros((2, 3, 3)))


class TestSpatialShuffle:
    def test_four_by_two(self):
        assert spatial_shuffle(4, 2).tolist() == [0, 2, 1, 3]

    def test_single_window_identity(self):
        assert np.array_equal(spatial_shuffle(5, 5), np.arange(5))

    def test_round_trip(self):
        for _ in range(30):
            w = int(rng.integers(1, 9))
            length = w * int(rng.integers(1, 9))
            perm = spatial_shuffle(length, w)
            assert np.array_equal(perm[inverse_permutation(perm)], np.arange(length))
            assert sorted(perm.tolist()) == list(range(length))

    def test_inverse_is_transposed_stride_shuffle(self):
        perm = spatial_shuffle(12, 3)
        assert np.array_equal(inverse_permutation(perm),
                              np.arange(12).reshape(3, 4).T.ravel())

    def test_square_case_spreads_windows(self):
        w = 4
        perm = spatial_shuffle(w * w, w)
        old_window = perm // w
        for k in range(w):
            assert sorted(old_window[k * w : (k + 1) * w].tolist()) == list(range(w))

    def test_indivisible_length(self):
        with pytest.raises(ShapeError):
            spatial_shuffle(7, 2)


class TestShuffleWindowAttention:
    def test_single_window_equals_local(self):
        params = WindowBlockParams.init(8, 2, np.random.default_rng(5))
        x = rng.normal(size=(4, 8))
        assert np.allclose(
            shuffle_window_attention(x, params, 4),
            local_window_attention(x, params, None),
        )

    def test_row_order_restored(self):
        # with w=1 each row only attends to itself, so the output must be
        # the rowwise block map in the original order
        params = WindowBlockParams.init(8, 2, np.random.default_rng(6))
        x = rng.normal(size=(6, 8))
        out = shuffle_window_attention(x, params, 1)
        rowwise = np.vstack([local_window_attention(x[i : i + 1], params, None)
                             for i in range(6)])
        assert np.allclose(out, rowwise)

    def test_gradient(self):
        # seed picked so no gradient element sits below the central
        # difference noise floor (~1e-10 absolute at eps=1e-5)
        assert block_fd_error(seed=0, with_bias=False, shuffle_len=8) < 1e-4


class TestAttnPool:
    def test_identical_rows_uniform(self):
        pool = AttnPoolParams.init(6, 4, np.random.default_rng(7))
        h = np.tile(rng.normal(size=6), (5, 1))
        pooled, weights = attn_pool(h, pool)
        assert np.allclose(weights, 0.2)
        assert np.allclose(pooled, h[0])

    def test_singleton(self):
        pool = AttnPoolParams.init(6, 4, np.random.default_rng(8))
        h = rng.normal(size=(1, 6))
        pooled, weights = attn_pool(h, pool)
        assert np.allclose(weights, [1.0])
        assert np.allclose(pooled, h[0])

    def test_weights_sum_to_one(self):
        pool = AttnPoolParams.init(6, 4, np.random.default_rng(9))
        for _ in range(50):
            _, weights = attn_pool(rng.normal(size=(rng.integers(1, 20), 6)), pool)
            assert np.isclose(weights.sum(), 1.0, atol=1e-6)

    def test_gradient(self):
        local_rng = np.random.default_rng(10)
        pool = AttnPoolParams.init(8, 5, local_rng)
        h = local_rng.normal(size=(6, 8))
        probe = local_rng.normal(size=8)
        store = ParamStore()
        store.add("h", h)
        store.add("U", pool.U)
        store.add("V", pool.V)

        def f(ps):
            pooled, _ = attn_pool(ps["h"], AttnPoolParams(U=ps["U"], V=ps["V"]))
            return float(np.sum(pooled * probe))

        pooled, _, st = attn_pool(store["h"], AttnPoolParams(U=store["U"], V=store["V"]),
                                  return_state=True)
        gh, grads = attn_pool_backward(probe, st, AttnPoolParams(U=store["U"], V=store["V"]))
        store.add_grad("h", gh)
        store.add_grad("U", grads["U"])
        store.add_grad("V", grads["V"])
        assert finite_diff_check(f, store, eps=1e-5) < 1e-4
