import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sherlab import nn
from oracles import grads_close, numeric_grads, random_network


def two_layer(seed=7):
    return nn.mlp_init([nn.LayerSpec(2, 3, "relu"), nn.LayerSpec(3, 1, "linear")], seed)


def test_init_deterministic_and_zero_bias():
    a, b = two_layer(), two_layer()
    assert nn.params_equal(a, b)
    assert all(np.all(l.b == 0) for l in a.layers)
    bound = np.sqrt(1 / 2)
    assert np.all(np.abs(a.layers[0].W) <= bound)


def test_init_dimension_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.mlp_init([nn.LayerSpec(2, 3), nn.LayerSpec(4, 1, "linear")], 0)


def test_bn_running_stats_start_at_identity():
    p = nn.mlp_init([nn.LayerSpec(3, 4, "relu", True)], 0)
    assert np.all(p.layers[0].bn.running_mean == 0)
    assert np.all(p.layers[0].bn.running_var == 1)


def test_zero_weights_tanh_gives_zero():
    p = nn.mlp_init([nn.LayerSpec(3, 4, "relu"), nn.LayerSpec(4, 2, "tanh")], 0)
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    out, _ = nn.mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(out == 0)


def test_single_linear_layer():
    p = nn.mlp_init([nn.LayerSpec(1, 1, "linear")], 0)
    p = p.with_arrays([np.array([[2.0]]), np.array([1.0])])
    out, _ = nn.mlp_forward(p, np.array([[3.0]]))
    assert out.tolist() == [[7.0]]


def test_eval_mode_is_stable():
    p = nn.mlp_init([nn.LayerSpec(3, 4, "relu", True), nn.LayerSpec(4, 1, "linear")], 1)
    x = np.random.default_rng(1).normal(size=(6, 3))
    a, _ = nn.mlp_forward(p, x, "eval")
    b, _ = nn.mlp_forward(p, x, "eval")
    assert np.array_equal(a, b)


def test_forward_rejects_bad_input():
    p = two_layer()
    with pytest.raises(nn.ShapeError):
        nn.mlp_forward(p, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nn.mlp_forward(p, np.array([[np.nan, 0.0]]))


def test_train_bn_needs_two_rows():
    p = nn.mlp_init([nn.LayerSpec(3, 4, "relu", True)], 0)
    with pytest.raises(ValueError):
        nn.mlp_forward(p, np.zeros((1, 3)), "train")


def test_backward_zero_grad_output():
    p = two_layer()
    x = np.random.default_rng(0).normal(size=(4, 2))
    out, cache = nn.mlp_forward(p, x)
    grads, gx = nn.mlp_backward(p, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gx == 0)


def test_backward_cache_mismatch():
    p, q = two_layer(1), two_layer(2)
    out, cache = nn.mlp_forward(p, np.ones((2, 2)))
    with pytest.raises(nn.NetworkStateError):
        nn.mlp_backward(q, cache, np.ones_like(out))


def test_backward_matches_finite_differences_two_layer():
    rng = np.random.default_rng(3)
    p = nn.mlp_init([nn.LayerSpec(3, 5, "tanh"), nn.LayerSpec(5, 2, "linear")], 3)
    x = rng.normal(size=(4, 3))
    out, cache = nn.mlp_forward(p, x)
    R = rng.normal(size=out.shape)
    grads, gx = nn.mlp_backward(p, cache, R)
    ngrads, ngx = numeric_grads(p, x, R)
    assert all(grads_close(a, n) for a, n in zip(grads, ngrads))
    assert grads_close(gx, ngx)


def test_duplicated_row_doubles_gradient():
    p = two_layer()
    x = np.array([[0.3, -0.7]])
    out1, c1 = nn.mlp_forward(p, x)
    g1, _ = nn.mlp_backward(p, c1, np.ones_like(out1))
    out2, c2 = nn.mlp_forward(p, np.vstack([x, x]))
    g2, _ = nn.mlp_backward(p, c2, np.ones_like(out2))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_check_property(seed):
    rng = np.random.default_rng(seed)
    p, _ = random_network(rng)
    x = rng.normal(size=(int(rng.integers(2, 6)), p.in_dim))
    out, cache = nn.mlp_forward(p, x)
    R = rng.normal(size=out.shape)
    grads, gx = nn.mlp_backward(p, cache, R)
    ngrads, ngx = numeric_grads(p, x, R)
    assert all(grads_close(a, n) for a, n in zip(grads, ngrads))
    assert grads_close(gx, ngx)


def test_eval_mode_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    p = nn.mlp_init([nn.LayerSpec(3, 5, "tanh", True), nn.LayerSpec(5, 2, "linear")], 8)
    _, cache = nn.mlp_forward(p, rng.normal(size=(16, 3)) * 2 + 1)
    p = nn.apply_bn_stats(p, cache)  # non-trivial running statistics
    x = rng.normal(size=(4, 3))
    out, cache = nn.mlp_forward(p, x, "eval")
    R = rng.normal(size=out.shape)
    grads, gx = nn.mlp_backward(p, cache, R)
    ngrads, ngx = numeric_grads(p, x, R, mode="eval")
    assert all(grads_close(a, n) for a, n in zip(grads, ngrads))
    assert grads_close(gx, ngx)
    # a single row is fine in eval mode
    out1, c1 = nn.mlp_forward(p, x[:1], "eval")
    g1, _ = nn.mlp_backward(p, c1, R[:1])
    assert np.all(np.isfinite(g1[0]))


def test_adam_zero_grads_leave_params():
    p = two_layer()
    s = nn.AdamState.zeros_like(p)
    q, s2 = nn.adam_step(p, [np.zeros_like(a) for a in p.arrays()], s)
    assert nn.params_equal(p, q)
    assert s2.t == 1


def test_adam_single_scalar_step():
    p = nn.mlp_init([nn.LayerSpec(1, 1, "linear")], 0)
    p = p.with_arrays([np.array([[0.0]]), np.array([0.0])])
    s = nn.AdamState.zeros_like(p)
    q, _ = nn.adam_step(p, [np.array([[1.0]]), np.array([0.0])], s, lr=0.001, clip_norm=None)
    assert abs(q.layers[0].W[0, 0] - (-0.001)) < 1e-9


def test_adam_refuses_non_finite():
    p = two_layer()
    grads = [np.zeros_like(a) for a in p.arrays()]
    grads[0][0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        nn.adam_step(p, grads, nn.AdamState.zeros_like(p))


def test_clip_norm_six_to_three():
    g = [np.array([6.0, 0.0]), np.array([0.0])]
    clipped = nn.clip_by_global_norm(g, 3.0)
    assert nn.global_norm(clipped) == pytest.approx(3.0, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.1, 50))
def test_clipping_never_increases_norm(values, clip):
    g = [np.array(values)]
    clipped = nn.clip_by_global_norm(g, clip)
    n0, n1 = nn.global_norm(g), nn.global_norm(clipped)
    assert n1 <= max(n0, clip) * (1 + 1e-12)
    if n0 <= clip:
        assert np.array_equal(clipped[0], g[0])


def test_expand_zero_alpha_is_neutral():
    rng = np.random.default_rng(0)
    p = nn.mlp_init([nn.LayerSpec(4, 6, "relu", True), nn.LayerSpec(6, 2, "tanh")], 0)
    q = nn.expand_input_layer(p, 3, 0.0, seed=5, positions=[1, 4, 6])
    assert q.in_dim == 7
    assert np.all(q.layers[0].W[:, [1, 4, 6]] == 0)
    x = rng.normal(size=(10, 4))
    xq = np.zeros((10, 7))
    xq[:, [0, 2, 3, 5]] = x
    xq[:, [1, 4, 6]] = rng.normal(size=(10, 3)) * 100
    a, _ = nn.mlp_forward(p, x, "eval")
    b, _ = nn.mlp_forward(q, xq, "eval")
    assert np.array_equal(a, b)
    # every other parameter is untouched
    assert np.array_equal(q.layers[0].W[:, [0, 2, 3, 5]], p.layers[0].W)
    assert all(np.array_equal(u, v) for u, v in zip(p.arrays()[1:], q.arrays()[1:]))


def test_expand_zero_dims_is_identity():
    p = two_layer()
    assert nn.expand_input_layer(p, 0, 1.0, 0) is p


def test_expand_alpha_scaling_exact():
    p = two_layer()
    one = nn.expand_input_layer(p, 2, 1.0, seed=9)
    tenth = nn.expand_input_layer(p, 2, 0.1, seed=9)
    np.testing.assert_array_equal(one.layers[0].W[:, 2:] * 0.1, tenth.layers[0].W[:, 2:])
    assert np.any(one.layers[0].W[:, 2:] != 0)


def test_expand_negative_alpha():
    with pytest.raises(ValueError):
        nn.expand_input_layer(two_layer(), 1, -0.5, 0)


def test_expand_adam_state_zero_for_new_columns():
    p = two_layer()
    s = nn.AdamState.zeros_like(p)
    grads = [np.ones_like(a) for a in p.arrays()]
    p, s = nn.adam_step(p, grads, s)
    s2 = nn.expand_adam_state(s, 2, [0, 3])
    assert s2.m[0].shape == (3, 4)
    assert np.all(s2.m[0][:, [0, 3]] == 0) and np.all(s2.v[0][:, [0, 3]] == 0)
    np.testing.assert_array_equal(s2.m[0][:, [1, 2]], s.m[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5))
def test_expansion_neutrality_property(seed, old, added):
    rng = np.random.default_rng(seed)
    p = nn.mlp_init([nn.LayerSpec(old, 5, "relu", bool(seed % 2)), nn.LayerSpec(5, 1, "linear")], seed)
    q = nn.expand_input_layer(p, added, 0.0, seed)
    x = rng.normal(size=(7, old))
    padded = np.hstack([x, rng.normal(size=(7, added))])
    assert np.array_equal(nn.mlp_forward(p, x, "eval")[0], nn.mlp_forward(q, padded, "eval")[0])


def test_snapshot_round_trip():
    p = nn.mlp_init([nn.LayerSpec(3, 4, "relu", True), nn.LayerSpec(4, 2, "tanh")], 11)
    out, cache = nn.mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3)))
    p = nn.apply_bn_stats(p, cache)
    blob = nn.params_to_bytes(p)
    q, end = nn.params_from_bytes(blob)
    assert end == len(blob)
    assert nn.params_equal(p, q) and q.seed == 11


def test_snapshot_rejects_garbage():
    with pytest.raises(ValueError):
        nn.params_from_bytes(b"nope" + bytes(20))


def test_determinism_of_updates():
    def run():
        p = two_layer(3)
        s = nn.AdamState.zeros_like(p)
        x = np.random.default_rng(4).normal(size=(8, 2))
        for _ in range(5):
            out, cache = nn.mlp_forward(p, x)
            grads, _ = nn.mlp_backward(p, cache, out)
            p, s = nn.adam_step(p, grads, s)
        return p
    assert nn.params_equal(run(), run())
