import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stcnet.errors import ConfigError, ShapeError
from stcnet.nn import RngStream, grad_check
from stcnet.stc import (
    Agent,
    CurveAggregation,
    CurveSet,
    STCModule,
    StcConfig,
    check_curve_invariants,
    curve_record,
    generate_curves,
    interframe_knn,
    knn_candidates,
    random_generation,
    select_next_node,
)


@pytest.fixture(autouse=True)
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def feats(*shape, seed=0):
    return torch.from_numpy(RngStream(seed, "stc-test").normal(shape))


def embed_for(F, c_mid, seed=1):
    W = feats(F.shape[1], c_mid, seed=seed)
    return torch.einsum("nctv,cm->nmtv", F, W)


# k-NN -----------------------------------------------------------------------


def brute_force_knn(F, t, v, k, exclude):
    q = F[:, t, v]
    dists = [(float(((F[:, t + 1, j] - q) ** 2).sum()), j) for j in range(F.shape[2]) if not (exclude and j == v)]
    return [j for _, j in sorted(dists)[:k]]


@pytest.mark.parametrize("seed", range(10))
def test_knn_matches_brute_force(seed):
    F = feats(6, 4, 8, seed=seed)
    for exclude in (True, False):
        cfg = StcConfig(k=3, exclude_same_node=exclude)
        for t in range(3):
            for v in range(8):
                assert interframe_knn(F, t, v, cfg) == brute_force_knn(F, t, v, 3, exclude)


def test_knn_exact_match_k1():
    F = feats(3, 2, 5)
    F[:, 1, 3] = F[:, 0, 1]
    assert interframe_knn(F, 0, 1, StcConfig(k=1)) == [3]


def test_knn_ties_go_to_lower_index():
    F = torch.zeros(2, 2, 4)
    assert interframe_knn(F, 0, 2, StcConfig(k=3)) == [0, 1, 3]
    assert interframe_knn(F, 0, 2, StcConfig(k=3, exclude_same_node=False)) == [0, 1, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31), st.data())
def test_knn_exclusion_never_returns_query(V, seed, data):
    k = data.draw(st.integers(1, V - 1))
    v = data.draw(st.integers(0, V - 1))
    out = interframe_knn(feats(4, 3, V, seed=seed), 1, v, StcConfig(k=k))
    assert v not in out and len(out) == len(set(out)) == k


def test_knn_argument_errors():
    F = feats(3, 3, 5)
    with pytest.raises(ConfigError):
        interframe_knn(F, 0, 0, StcConfig(k=5))
    with pytest.raises(ConfigError):
        interframe_knn(F, 0, 0, StcConfig(k=0))
    with pytest.raises(ValueError):
        interframe_knn(F, 2, 0, StcConfig(k=2))
    # exclusion off admits k == V
    assert len(interframe_knn(F, 0, 0, StcConfig(k=5, exclude_same_node=False))) == 5


def test_knn_batched_agrees_with_single():
    F = feats(2, 4, 3, 7, seed=3)
    q, keys = F[:, :, 0, :], F[:, :, 1, :]
    excl = torch.arange(7).expand(2, 7)
    out = knn_candidates(q, keys, 2, excl)
    for n in range(2):
        for v in range(7):
            assert out[n, v].tolist() == interframe_knn(F[n], 0, v, StcConfig(k=2))


# node selection -------------------------------------------------------------


def test_select_single_candidate():
    agent = Agent(3, RngStream(0, "a"))
    q, c = feats(1, 4, 3), feats(1, 4, 1, 3, seed=2)
    for mode in ("train", "eval", "soft"):
        choice, w = select_next_node(q, c, agent, mode, RngStream(1, "s"))
        assert (choice == 0).all() and torch.equal(w, torch.ones(1, 4, 1))


def test_select_eval_is_agent_argmax():
    agent = Agent(3, RngStream(0, "a"))
    q, c = feats(2, 5, 3), feats(2, 5, 4, 3, seed=2)
    choice, w = select_next_node(q, c, agent, "eval")
    assert torch.equal(choice, agent(q, c).argmax(-1))
    assert ((w == 0) | (w == 1)).all()


def test_select_soft_path_gradient_wrt_agent():
    agent = Agent(3, RngStream(0, "a"))
    q, c = feats(2, 5, 3), feats(2, 5, 4, 3, seed=2)
    tgt = feats(2, 5, 3, seed=3)

    def loss():
        _, w = select_next_node(q, c, agent, "soft")
        return ((c * w.unsqueeze(-1)).sum(2) * tgt).sum()

    assert grad_check(loss, list(agent.parameters())) <= 1e-4


# curve generation -----------------------------------------------------------


def test_two_frames_single_step():
    F = feats(1, 6, 2, 5)
    cfg = StcConfig(k=2)
    agent = Agent(2, RngStream(0, "a"))
    cs = generate_curves(F, embed_for(F, 2), cfg, agent, "eval")
    assert cs.indices.shape == (1, 1, 5) and cs.features.shape == (1, 6, 1, 5)
    for v in range(5):
        assert int(cs.indices[0, 0, v]) in interframe_knn(F[0], 0, v, cfg)
    assert torch.equal(cs.features[0, :, 0].detach(), F[0, :, 1, cs.indices[0, 0]])


def test_too_few_frames():
    F = feats(1, 4, 1, 5)
    with pytest.raises(ValueError):
        generate_curves(F, embed_for(F, 2), StcConfig(k=2), Agent(2, RngStream(0, "a")))


def test_embedding_shape_mismatch():
    F = feats(1, 4, 3, 5)
    with pytest.raises(ShapeError):
        generate_curves(F, feats(1, 2, 3, 4), StcConfig(k=2), Agent(2, RngStream(0, "a")))


def test_eval_generation_is_deterministic():
    F = feats(2, 6, 7, 5)
    agent = Agent(2, RngStream(0, "a"))
    a = generate_curves(F, embed_for(F, 2), StcConfig(k=3), agent, "eval")
    b = generate_curves(F, embed_for(F, 2), StcConfig(k=3), agent, "eval")
    assert torch.equal(a.indices, b.indices) and torch.equal(a.features, b.features)


def test_train_generation_replays_with_same_stream():
    F = feats(2, 6, 7, 5)
    agent = Agent(2, RngStream(0, "a"))
    a = generate_curves(F, embed_for(F, 2), StcConfig(k=3), agent, "train", RngStream(4, "n"))
    b = generate_curves(F, embed_for(F, 2), StcConfig(k=3), agent, "train", RngStream(4, "n"))
    assert torch.equal(a.indices, b.indices)


def nearest_chain(F, exclude):
    """Plain nearest-neighbour chaining for one (C, T, V) sample."""
    C, T, V = F.shape
    paths = []
    for c in range(V):
        cur, path = c, [c]
        for t in range(T - 1):
            cur = brute_force_knn(F, t, cur, 1, exclude)[0]
            path.append(cur)
        paths.append(path)
    return paths


def test_straight_line_mode_ignores_agent():
    F = feats(1, 5, 6, 7, seed=8)
    cfg = StcConfig(k=4, straight_line_mode=True)
    assert cfg.effective_k == 1
    runs = [
        generate_curves(F, embed_for(F, 2, seed=s), cfg, Agent(2, RngStream(s, "a")), "train", RngStream(s, "n"))
        for s in range(3)
    ]
    for cs in runs[1:]:
        assert torch.equal(cs.indices, runs[0].indices)
    assert runs[0].paths(0) == nearest_chain(F[0], exclude=True)


@pytest.mark.parametrize("exclude", [True, False])
def test_invariant_sweep(exclude):
    for seed in range(200):
        r = np.random.default_rng(seed)
        V, T = int(r.integers(3, 10)), int(r.integers(2, 8))
        k = int(r.integers(1, V if exclude else V + 1))
        cfg = StcConfig(k=k, exclude_same_node=exclude)
        cs = random_generation(V, T, 4, cfg, seed, mode=("train", "eval")[seed % 2])
        assert cs.indices.shape == (1, T - 1, V)
        assert check_curve_invariants(cs, exclude) == []


def test_revisits_possible_only_without_exclusion():
    # features constant in time: every joint's nearest successor is itself
    F = feats(1, 4, 1, 6).repeat(1, 1, 5, 1)
    agent = Agent(2, RngStream(0, "a"))
    off = generate_curves(F, embed_for(F, 2), StcConfig(k=1, exclude_same_node=False), agent, "eval")
    assert (off.indices == torch.arange(6)).all()
    assert check_curve_invariants(off, exclude_same_node=True) != []
    on = generate_curves(F, embed_for(F, 2), StcConfig(k=1), agent, "eval")
    assert check_curve_invariants(on, exclude_same_node=True) == []


def test_invariant_checker_flags_bad_curves():
    idx = torch.tensor([[[1, 0, 9]]])
    cands = torch.tensor([[[[1, 2], [2, 1], [0, 1]]]])
    problems = check_curve_invariants(CurveSet(idx, torch.zeros(1, 1, 1, 3), cands), True)
    assert "index out of range" in problems
    assert any("candidate set" in p for p in problems)


def test_curve_paths_and_record():
    idx = torch.tensor([[[1, 2, 0], [0, 1, 2]]])
    cs = CurveSet(idx, torch.zeros(1, 1, 2, 3), idx.unsqueeze(-1))
    assert cs.paths(0) == [[0, 1, 0], [1, 2, 1], [2, 0, 2]]
    rec = curve_record(2, 3, 3, cs.paths(0), block="coord.3")
    assert rec == {"label": 2, "T": 3, "V": 3, "curves": cs.paths(0), "block": "coord.3"}


# aggregation ----------------------------------------------------------------


def randomized_aggregation(C=8, c_mid=3, seed=0):
    agg = CurveAggregation(C, c_mid, RngStream(seed, "agg"))
    with torch.no_grad():
        agg.w_agg.copy_(feats(2 * c_mid, C, seed=seed + 11))
    return agg


def test_aggregation_identity_at_init():
    x, curves = feats(2, 8, 5, 4), feats(2, 8, 4, 4, seed=1)
    agg = CurveAggregation(8, 3, RngStream(0, "agg"))
    assert torch.equal(agg(x, curves), x)


def test_aggregation_shape_and_attention_rows():
    x, curves = feats(2, 8, 5, 4), feats(2, 8, 4, 4, seed=1)
    agg = randomized_aggregation()
    y = agg(x, curves)
    assert y.shape == x.shape and not torch.equal(y, x)
    att_intra, att_inter = agg.last_attention
    assert att_intra.shape == (2, 20, 4) and att_inter.shape == (2, 20, 4)
    for a in (att_intra, att_inter):
        assert torch.allclose(a.sum(-1), torch.ones(2, 20), rtol=0, atol=1e-12)


def test_aggregation_shape_error():
    agg = randomized_aggregation()
    with pytest.raises(ShapeError):
        agg(feats(1, 8, 5, 4), feats(1, 8, 5, 4))


def test_aggregation_curve_order_invariant():
    x, curves = feats(2, 8, 5, 6), feats(2, 8, 4, 6, seed=1)
    agg = randomized_aggregation()
    perm = torch.from_numpy(RngStream(3, "perm").permutation(6))
    assert torch.allclose(agg(x, curves), agg(x, curves[..., perm]), rtol=0, atol=1e-12)


def test_aggregation_gradient():
    x, curves = feats(1, 8, 4, 3).requires_grad_(), feats(1, 8, 3, 3, seed=1).requires_grad_()
    agg = randomized_aggregation()
    tgt = feats(1, 8, 4, 3, seed=5)
    params = [x, curves] + list(agg.parameters())
    assert grad_check(lambda: (agg(x, curves) * tgt).sum(), params, max_coords_per_tensor=6, rng=RngStream(0, "gc")) <= 1e-4


# module ---------------------------------------------------------------------


def test_stc_module_gradients_reach_agent():
    m = STCModule(8, StcConfig(k=3), RngStream(0, "stc")).train()
    with torch.no_grad():
        m.aggregate.w_agg.copy_(feats(4, 8, seed=2))
    x = feats(2, 8, 6, 5, seed=3)
    (m(x, RngStream(0, "noise")) * feats(2, 8, 6, 5, seed=4)).sum().backward()
    for p in m.agent.parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0


def test_stc_module_soft_path_gradient():
    m = STCModule(8, StcConfig(k=3), RngStream(0, "stc"))
    m.soft_path = True
    with torch.no_grad():
        m.aggregate.w_agg.copy_(feats(4, 8, seed=2))
    x = feats(1, 8, 4, 5, seed=3)
    tgt = feats(1, 8, 4, 5, seed=4)
    err = grad_check(lambda: (m(x) * tgt).sum(), list(m.parameters()), max_coords_per_tensor=4, rng=RngStream(1, "gc"))
    assert err <= 1e-4


def test_stc_module_needs_rng_in_training():
    m = STCModule(8, StcConfig(k=3), RngStream(0, "stc")).train()
    with pytest.raises(ValueError, match="RngStream"):
        m(feats(1, 8, 4, 5))


def test_stc_module_records_curves():
    m = STCModule(8, StcConfig(k=2), RngStream(0, "stc")).eval()
    m.record = True
    m(feats(3, 8, 4, 5))
    assert m.last_curves.indices.shape == (3, 3, 5)
    assert check_curve_invariants(m.last_curves, True) == []


def test_config_validation():
    with pytest.raises(ConfigError):
        StcConfig(k=4).validate(4)
    StcConfig(k=4, exclude_same_node=False).validate(4)
    with pytest.raises(ConfigError):
        StcConfig(c_mid=0).validate(8)
    with pytest.raises(ConfigError):
        StcConfig(temperature=0).validate(8)
    assert StcConfig().mid_channels(64) == 16 and StcConfig(c_mid=5).mid_channels(64) == 5
