import numpy as np
import pytest

from _util import max_grad_error, numpy_gat, toy_split
from gacl.dataset import Schema, make_synthetic, parse_records, split_by_density
from gacl.diffcore import ParameterStore, Tensor, ops
from gacl.dyngraph import build_graph
from gacl.tpgat import (
    Ablation,
    InvocationContext,
    SideParams,
    WindowBuilder,
    extract_batch,
    extract_features,
    init_params,
    propagate_layer,
    semantic_attention,
    side_params,
    target_prompt_adjust,
)


def make_params(n_nodes, d, l_g, ablation, seed=0, jitter=True):
    ps = ParameterStore()
    rng = np.random.default_rng(seed)
    init_params(ps, rng, n_nodes, d, l_g, Ablation.parse(ablation))
    if jitter:  # generic draws: non-zero biases and slopes that differ per side
        for name, t in ps.items():
            if t.data.ndim == 0:
                t.data[...] = rng.uniform(-0.5, 0.5)
    return ps


def layer_from(values: dict) -> SideParams:
    return SideParams(**{k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in values.items()})


# -- semantic attention ------------------------------------------------------

def test_semantic_attention_zero_weights():
    layer = layer_from(dict(W_attn=np.zeros(3), W_msg=np.eye(3), prelu_slope=0.25))
    rng = np.random.default_rng(0)
    assert semantic_attention(rng.normal(size=3), rng.normal(size=3), layer).item() == 0.5


def test_semantic_attention_cancellation():
    layer = layer_from(dict(W_attn=np.array([0.3, -2.0]), W_msg=np.eye(2), prelu_slope=0.25))
    x = np.array([1.5, -0.7])
    assert semantic_attention(x, -x, layer).item() == 0.5


def test_semantic_attention_scalar_value():
    layer = layer_from(dict(W_attn=np.array([1.0, 0.0]), W_msg=np.eye(2), prelu_slope=0.25))
    out = semantic_attention(np.array([1.0, 0.0]), np.array([1.0, 0.0]), layer).item()
    assert out == pytest.approx(0.880797, abs=1e-6)


# -- target prompt -------------------------------------------------------

def _full_layer(d=3, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
    return layer_from(dict(W_attn=rng.normal(size=d), W_msg=rng.normal(size=(d, d)), prelu_slope=0.25,
                           W_w=rng.normal(size=d), b_w=rng.normal(), W_alpha=f(2 * d),
                           b_alpha=f() if zero else rng.normal(), W_beta=f(2 * d),
                           b_beta=f() if zero else rng.normal()))


def test_semantic_only_returns_input():
    rng = np.random.default_rng(1)
    attn = Tensor(rng.uniform(size=4))
    out = target_prompt_adjust(attn, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.uniform(size=4),
                               _full_layer(), Ablation.SEMANTIC_ONLY)
    assert np.array_equal(out.data, attn.data)


def test_zero_affine_params_collapse_to_zero():
    rng = np.random.default_rng(2)
    out = target_prompt_adjust(Tensor(rng.uniform(size=5)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                               rng.uniform(size=5), _full_layer(zero=True), Ablation.FULL)
    assert np.all(out.data == 0.0)


def test_prompt_affine_bounds():
    # alpha, beta in (-1, 1) and attn in (0, 1) bound the adjusted attention by (-2, 2)
    rng = np.random.default_rng(3)
    for seed in range(20):
        layer = _full_layer(seed=seed)
        attn = Tensor(rng.uniform(size=6))
        out = target_prompt_adjust(attn, rng.normal(size=(6, 3)) * 10, rng.normal(size=(6, 3)),
                                   rng.uniform(size=6), layer, Ablation.FULL)
        assert np.all(np.abs(out.data) < 2.0)


def test_prompt_matches_hand_formula():
    rng = np.random.default_rng(4)
    layer = _full_layer(seed=4)
    xt, xn, w, a = rng.normal(size=3), rng.normal(size=3), 0.37, 0.61
    out = target_prompt_adjust(Tensor(a), xt, xn, w, layer, Ablation.FULL).item()

    def l2n(v):
        return v / np.linalg.norm(v)

    x_hat = np.concatenate([l2n(xt + xn), l2n(layer.W_w.data * w + layer.b_w.data)])
    alpha = np.tanh(layer.W_alpha.data @ x_hat + layer.b_alpha.data)
    beta = np.tanh(layer.W_beta.data @ x_hat + layer.b_beta.data)
    assert out == pytest.approx(alpha * a + beta, abs=1e-14)


@pytest.mark.parametrize("mode,half", [(Ablation.NO_TARGET, "weight"), (Ablation.NO_WEIGHT, "feature")])
def test_ablated_prompt_uses_one_half(mode, half):
    rng = np.random.default_rng(5)
    d = 3
    vals = dict(W_attn=rng.normal(size=d), W_msg=np.eye(d), prelu_slope=0.25, W_alpha=rng.normal(size=d),
                b_alpha=0.1, W_beta=rng.normal(size=d), b_beta=-0.2)
    if half == "weight":
        vals.update(W_w=rng.normal(size=d), b_w=0.3)
    layer = layer_from(vals)
    xt, xn, w = rng.normal(size=d), rng.normal(size=d), 0.8
    out = target_prompt_adjust(Tensor(0.5), xt, xn, w, layer, mode).item()
    x_hat = layer.W_w.data * w + 0.3 if half == "weight" else xt + xn
    x_hat = x_hat / np.linalg.norm(x_hat)
    expected = np.tanh(vals["W_alpha"] @ x_hat + 0.1) * 0.5 + np.tanh(vals["W_beta"] @ x_hat - 0.2)
    assert out == pytest.approx(expected, abs=1e-14)


# -- parameters ----------------------------------------------------------

@pytest.mark.parametrize("mode,width,has_w,has_ab", [
    ("full", 8, True, True), ("t", 4, True, True), ("w", 4, False, True), ("tw", 0, False, False)])
def test_parameter_layout(mode, width, has_w, has_ab):
    ps = make_params(6, 4, 2, mode, jitter=False)
    for layer in (1, 2):
        for side in ("user", "service"):
            p = f"tpgat.layer{layer}.{side}."
            assert (p + "W_w" in ps) == has_w
            assert (p + "W_alpha" in ps) == has_ab
            if has_ab:
                assert ps[p + "W_alpha"].shape == (width,) == ps[p + "W_beta"].shape
            assert ps[p + "W_msg"].shape == (4, 4)
    assert ps["tpgat.embedding"].shape == (6, 4)


def test_per_side_parameters_are_distinct():
    ps = make_params(4, 3, 1, "full")
    assert ps["tpgat.layer1.user.W_attn"] is not ps["tpgat.layer1.service.W_attn"]
    assert not np.array_equal(ps["tpgat.layer1.user.W_msg"].data, ps["tpgat.layer1.service.W_msg"].data)


# -- propagate_layer -------------------------------------------------------

def _features(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return {i: Tensor(rng.normal(size=d)) for i in range(n)}


def test_single_neighbour_gets_full_weight():
    layer = _full_layer(seed=6)
    feats = _features(3, 3)
    ctx = InvocationContext(0, 1, 0)
    out = propagate_layer(0, [(2, 0.4)], feats, ctx, layer, True).data
    pre = feats[0].data + layer.W_msg.data @ feats[2].data
    assert np.allclose(out, np.where(pre > 0, pre, layer.prelu_slope.data * pre), atol=1e-14)


def test_empty_neighbourhood_is_prelu_of_center():
    layer = _full_layer(seed=7)
    feats = _features(2, 3)
    out = propagate_layer(0, [], feats, InvocationContext(0, 1, 0), layer, True).data
    x = feats[0].data
    assert np.array_equal(out, np.where(x > 0, x, 0.25 * x))


def test_equal_attention_splits_evenly():
    layer = _full_layer(seed=8)
    feats = _features(3, 3)
    feats[3] = Tensor(feats[2].data.copy())
    out = propagate_layer(0, [(2, 0.5), (3, 0.5)], feats, InvocationContext(0, 1, 0), layer, True).data
    pre = feats[0].data + layer.W_msg.data @ feats[2].data  # 0.5 * m + 0.5 * m
    assert np.allclose(out, np.where(pre > 0, pre, 0.25 * pre), atol=1e-14)


def test_propagate_layer_matches_numpy_reference():
    sp = toy_split(3, 3, 2, density=0.8, seed=3)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 1, "full", seed=3)
    vals = {n: t.data for n, t in ps.items()}
    feats = {v: Tensor(vals["tpgat.embedding"][v]) for v in range(g.n_nodes)}
    u, s, t = 1, 2, 1
    ctx = InvocationContext(u, g.service_node(s), t, Ablation.FULL)
    got_u = propagate_layer(u, g.adjacency(u, t), feats, ctx, side_params(ps.as_dict(), 1, "user"), True)
    got_s = propagate_layer(g.service_node(s), g.adjacency(g.service_node(s), t), feats, ctx,
                            side_params(ps.as_dict(), 1, "service"), False)
    ref_u, ref_s = numpy_gat(g, vals, u, s, t, 1, "full")
    assert np.max(np.abs(got_u.data - ref_u)) < 1e-12
    assert np.max(np.abs(got_s.data - ref_s)) < 1e-12


# -- batched extraction ----------------------------------------------------

def _batched_vs_reference(seed, mode, l_g, cap=None):
    rng = np.random.default_rng(seed)
    n, m, T = (int(v) for v in rng.integers(2, 6, size=3))
    sp = split_by_density(make_synthetic(n, m, T, seed=seed), float(rng.uniform(0.3, 0.9)), seed)
    g = build_graph(sp)
    d = 4
    ps = make_params(g.n_nodes, d, l_g, mode, seed=seed)
    vals = {k: t.data for k, t in ps.items()}
    targets = [(int(rng.integers(n)), int(rng.integers(m)), int(rng.integers(1, T + 1))) for _ in range(4)]
    wb = WindowBuilder(g, 1, l_g, cap, seed).build(targets)
    users, services = extract_batch(ps.as_dict(), wb, l_g, Ablation.parse(mode))
    worst = 0.0
    for b, (u, s, T_) in enumerate(targets):
        ref_u, ref_s = numpy_gat(g, vals, u, s, T_ - 1, l_g, "semantic_only" if mode == "tw" else "full")
        worst = max(worst, np.max(np.abs(users.data[b, 0] - ref_u)), np.max(np.abs(services.data[b, 0] - ref_s)))
    return worst


@pytest.mark.parametrize("mode", ["full", "tw"])
@pytest.mark.parametrize("l_g", [1, 2, 3])
def test_batched_extraction_matches_full_snapshot_reference(mode, l_g):
    for seed in range(5):
        assert _batched_vs_reference(seed, mode, l_g) < 1e-12


def test_uncapped_cap_above_degree_is_exact():
    assert _batched_vs_reference(11, "full", 2, cap=64) < 1e-12


def test_binding_cap_changes_features():
    rows = "".join(f"0 {s} 0 {s + 1}.0\n" for s in range(10))
    sp = split_by_density(parse_records(rows.encode(), Schema(n_slices=1)), 0.999999, 0)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 1, "full")
    full = WindowBuilder(g, 1, 1, None, 0).build([(0, 0, 1)])
    capped = WindowBuilder(g, 1, 1, 3, 0).build([(0, 0, 1)])
    a = extract_batch(ps.as_dict(), full, 1, Ablation.FULL)[0].data
    b = extract_batch(ps.as_dict(), capped, 1, Ablation.FULL)[0].data
    assert not np.allclose(a, b)
    assert np.sum(capped.center == 0) == 3


def test_isolated_targets_give_prelu_embedding():
    sp = split_by_density(parse_records(b"1 1 0 1.0\n1 1 1 2.0\n", Schema(n_users=2, n_services=2)),
                          0.999999, 0)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 1, "full")
    ctx = InvocationContext(0, g.service_node(0), 2)
    user_seq, service_seq = extract_features(g, ctx, 2, 1, None, 0, ps.as_dict())
    emb = ps["tpgat.embedding"].data
    a_u = ps["tpgat.layer1.user.prelu_slope"].data
    a_s = ps["tpgat.layer1.service.prelu_slope"].data
    for row in range(2):
        assert np.array_equal(user_seq.data[row], np.where(emb[0] > 0, emb[0], a_u * emb[0]))
        x = emb[g.service_node(0)]
        assert np.array_equal(service_seq.data[row], np.where(x > 0, x, a_s * x))


def test_window_precondition():
    g = build_graph(toy_split())
    ps = make_params(g.n_nodes, 4, 1, "full")
    with pytest.raises(ValueError):
        extract_features(g, InvocationContext(0, g.service_node(0), 1), 2, 1, None, 0, ps.as_dict())
    with pytest.raises(ValueError):
        WindowBuilder(g, 1, 1, None, 0).build([(0, 0, g.n_slices + 1)])


def test_rows_ordered_oldest_first():
    sp = split_by_density(make_synthetic(3, 3, 4, seed=1), 0.7, 1)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 1, "full")
    ctx = InvocationContext(0, g.service_node(1), 4)
    user_seq, _ = extract_features(g, ctx, 3, 1, None, 0, ps.as_dict())
    for row, t in enumerate(range(1, 4)):
        one, _ = extract_features(g, InvocationContext(0, g.service_node(1), t + 1), 1, 1, None, 0, ps.as_dict())
        # batch composition changes summation order, so equality is to rounding
        assert np.allclose(user_seq.data[row], one.data[0], atol=1e-14, rtol=0)


def _target_pair(mode, seed=0):
    # 3 users / 3 services, dense slice: user 0 aggregates every service with either target prompt
    sp = split_by_density(make_synthetic(3, 3, 1, seed=seed), 0.999999, 0)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 1, mode, seed=seed)
    a, _ = extract_features(g, InvocationContext(0, g.service_node(1), 1, Ablation.parse(mode)), 1, 1, None, 0,
                            ps.as_dict())
    b, _ = extract_features(g, InvocationContext(0, g.service_node(2), 1, Ablation.parse(mode)), 1, 1, None, 0,
                            ps.as_dict())
    return a.data, b.data


@pytest.mark.parametrize("mode", ["full", "w"])
def test_features_depend_on_target(mode):
    a, b = _target_pair(mode)
    assert np.max(np.abs(a - b)) > 1e-6


@pytest.mark.parametrize("mode", ["t", "tw"])
def test_features_independent_of_target_without_target_prompt(mode):
    a, b = _target_pair(mode)
    assert np.array_equal(a, b)


def test_aggregation_weights_sum_to_one():
    sp = split_by_density(make_synthetic(5, 6, 3, seed=2), 0.6, 2)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 4, 2, "full")
    wb = WindowBuilder(g, 2, 2, None, 0).build([(0, 1, 2), (3, 4, 3)])
    captured = []
    extract_batch(ps.as_dict(), wb, 2, Ablation.FULL, weights_out=captured)
    assert captured
    for centers, w in captured:
        sums = np.bincount(centers, weights=w)
        assert np.allclose(sums[np.unique(centers)], 1.0, atol=1e-12, rtol=0)


@pytest.mark.parametrize("mode", ["full", "t", "w", "tw"])
def test_tpgat_gradients(mode):
    sp = toy_split(2, 2, 2, density=0.999999, seed=0)
    g = build_graph(sp)
    ps = make_params(g.n_nodes, 3, 2, mode, seed=1)
    wb = WindowBuilder(g, 2, 2, None, 0).build([(0, 1, 2), (1, 0, 2)])
    R = np.random.default_rng(2).normal(size=(2, 2, 3))

    def loss():
        users, services = extract_batch(ps.as_dict(), wb, 2, Ablation.parse(mode))
        return ops.sum(ops.mul(ops.add(users, ops.scale(services, 0.5)), R))

    err, where = max_grad_error(loss, dict(ps.items()))
    assert err < 1e-4, where
