import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiermatch import autodiff as ad
from hiermatch.autodiff import Tensor
from hiermatch.coattention import coattend
from hiermatch.embedder import (
    ModelConfig,
    PairEmbedding,
    embed_pair,
    embed_single,
    hinge,
    project,
    triplet_loss,
)
from hiermatch.hierarchy import FeatureSet, GumbelConfig, HierarchyTrace, TraceEntry, TraceError
from hiermatch.params import Adam, ParamStore

from .helpers import central_diff, rel_err

D_RAW, D, D_H = 4, 6, 3


def setup(seed=0, **flags):
    return ParamStore.init(D_RAW, D, D_H, seed=seed), ModelConfig(d=D, d_h=D_H, **flags)


def regions(rng, n):
    return rng.standard_normal((n, D_RAW))


# ---- projection -------------------------------------------------------------

def test_project_single_row():
    p, _ = setup()
    assert project(np.ones((1, D_RAW)), p).shape == (1, D)


def test_project_zero_weights():
    p, _ = setup()
    p["proj.W"].data[:] = 0
    assert not np.any(project(np.ones((3, D_RAW)), p).data)


def test_project_affine_oracle():
    rng = np.random.default_rng(0)
    p, _ = setup()
    p["proj.b"].data = rng.standard_normal(D)
    x = regions(rng, 5)
    assert np.allclose(project(x, p).data, x @ p["proj.W"].data + p["proj.b"].data, atol=1e-12)


def test_project_rejects_empty():
    p, _ = setup()
    with pytest.raises(ValueError, match="empty region set"):
        project(np.zeros((0, D_RAW)), p)


# ---- embed_pair ---------------------------------------------------------------

def test_single_nodes_take_no_steps():
    rng = np.random.default_rng(1)
    p, cfg = setup()
    s, ph = regions(rng, 1), regions(rng, 1)
    e = embed_pair(s, ph, p, cfg)
    assert e.steps == 0 and e.levels == 0
    S = FeatureSet.from_tensor(project(s, p), "sketch")
    P = FeatureSet.from_tensor(project(ph, p), "photo")
    S2, P2 = coattend(S, P, p)
    assert np.array_equal(e.sketch_final.data, S2.nodes.data)
    assert np.array_equal(e.photo_final.data, P2.nodes.data)


def test_unequal_branches_loop_counts():
    rng = np.random.default_rng(2)
    p, cfg = setup()
    e = embed_pair(regions(rng, 3), regions(rng, 5), p, cfg, GumbelConfig(), rng)
    assert len(e.sketch_trace) == 2 and len(e.photo_trace) == 4
    assert e.levels == 4
    assert [t.level for t in e.sketch_trace] == [0, 1]
    assert [t.level for t in e.photo_trace] == [0, 1, 2, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 1000))
def test_step_counts_for_any_sizes(ns, np_, seed):
    rng = np.random.default_rng(seed)
    p, cfg = setup(seed % 5)
    with ad.no_grad():
        e = embed_pair(regions(rng, ns), regions(rng, np_), p, cfg, GumbelConfig(), rng)
    assert e.steps == (ns - 1) + (np_ - 1)
    assert e.levels == max(ns, np_) - 1
    assert e.sketch_final.shape == e.photo_final.shape == (1, D)


def test_explicit_replay_is_bit_exact():
    rng = np.random.default_rng(3)
    p, cfg = setup()
    s, ph = regions(rng, 5), regions(rng, 4)
    rec = embed_pair(s, ph, p, cfg, GumbelConfig(rng_seed=11))
    replay = embed_pair(s, ph, p, ModelConfig(d=D, d_h=D_H, explicit_hierarchy=True),
                        sketch_trace=HierarchyTrace.from_text(rec.sketch_trace.to_text()),
                        photo_trace=rec.photo_trace)
    assert np.array_equal(rec.sketch_final.data, replay.sketch_final.data)
    assert np.array_equal(rec.photo_final.data, replay.photo_final.data)


def test_explicit_mode_rejects_bad_traces():
    rng = np.random.default_rng(4)
    p, _ = setup()
    cfg = ModelConfig(d=D, d_h=D_H, explicit_hierarchy=True)
    good = HierarchyTrace([TraceEntry(0, "photo", 0, 1, 2)])
    with pytest.raises(TraceError):
        embed_pair(regions(rng, 2), regions(rng, 2), p, cfg, photo_trace=good)  # no sketch trace
    bad = HierarchyTrace([TraceEntry(0, "sketch", 0, 7, 2)])
    with pytest.raises(TraceError):
        embed_pair(regions(rng, 2), regions(rng, 2), p, cfg, sketch_trace=bad, photo_trace=good)
    short = HierarchyTrace([TraceEntry(0, "sketch", 0, 1, 3)])
    with pytest.raises(TraceError):
        embed_pair(regions(rng, 3), regions(rng, 2), p, cfg, sketch_trace=short, photo_trace=good)


def test_no_coattn_no_hierarchy_is_mean_pool():
    rng = np.random.default_rng(5)
    p, cfg = setup(no_coattn=True, no_hierarchy=True)
    s, ph = regions(rng, 3), regions(rng, 6)
    e = embed_pair(s, ph, p, cfg)
    W, b = p["proj.W"].data, p["proj.b"].data
    assert np.array_equal(e.sketch_final.data[0], np.mean(s @ W + b, axis=0))
    assert np.array_equal(e.photo_final.data[0], np.mean(ph @ W + b, axis=0))


def test_no_hierarchy_coattends_once_then_pools():
    rng = np.random.default_rng(6)
    p, cfg = setup(no_hierarchy=True)
    s, ph = regions(rng, 3), regions(rng, 4)
    e = embed_pair(s, ph, p, cfg)
    S, P = coattend(FeatureSet.from_tensor(project(s, p), "sketch"),
                    FeatureSet.from_tensor(project(ph, p), "photo"), p)
    assert np.array_equal(e.sketch_final.data[0], S.nodes.data.mean(axis=0))
    assert np.array_equal(e.photo_final.data[0], P.nodes.data.mean(axis=0))


# ---- embed_single -------------------------------------------------------------

def test_single_equals_pair_without_coattention():
    rng = np.random.default_rng(7)
    p, cfg = setup(no_coattn=True)
    s, ph = regions(rng, 5), regions(rng, 3)
    pair = embed_pair(s, ph, p, cfg)
    vs, _ = embed_single(s, p, cfg, branch="sketch")
    vp, _ = embed_single(ph, p, cfg, branch="photo")
    assert np.array_equal(vs.data, pair.sketch_final.data)
    assert np.array_equal(vp.data, pair.photo_final.data)


def test_single_is_deterministic():
    rng = np.random.default_rng(8)
    p, cfg = setup()
    s = regions(rng, 6)
    a, ta = embed_single(s, p, cfg)
    b, tb = embed_single(s, p, cfg)
    assert np.array_equal(a.data, b.data) and ta == tb


def test_single_two_nodes_by_hand():
    rng = np.random.default_rng(9)
    p, cfg = setup()
    s = regions(rng, 2)
    x = s @ p["proj.W"].data + p["proj.b"].data
    v, trace = embed_single(s, p, cfg)
    assert len(trace) == 1
    assert np.allclose(v.data[0], np.maximum(p["hier.W_F"].data @ np.concatenate([x[0], x[1]]), 0),
                       atol=1e-12)


# ---- loss ---------------------------------------------------------------------

def test_loss_boundary_and_interior():
    assert hinge(Tensor(0.0), Tensor(0.5), 0.5).item() == 0.0
    assert hinge(Tensor(1.0), Tensor(0.5), 0.5).item() == 1.0


def test_loss_gradient_signs():
    dp, dn = Tensor(1.0, requires_grad=True), Tensor(0.5, requires_grad=True)
    ad.backward(hinge(dp, dn, 0.5))
    assert float(dp.grad) == 1.0 and float(dn.grad) == -1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 5))
def test_loss_nonnegative_and_zero_iff_satisfied(d_pos, d_neg, margin):
    v = hinge(Tensor(d_pos), Tensor(d_neg), margin).item()
    assert v >= 0
    assert (v == 0) == ((d_pos - d_neg) + margin <= 0)


def test_triplet_loss_from_embeddings():
    a = PairEmbedding(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))   # D+ = 1
    b = PairEmbedding(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.5]]))   # D- = 0.25
    assert triplet_loss(a, b, 0.5).item() == pytest.approx(1.25)


@pytest.mark.parametrize("flags", [{}, {"no_coattn": True}, {"no_hierarchy": True},
                                   {"no_coattn": True, "no_hierarchy": True}])
def test_triplet_gradients_match_finite_differences(flags):
    rng = np.random.default_rng(10)
    p, cfg = setup(1, **flags)
    s, pos, neg = regions(rng, 4), regions(rng, 3), regions(rng, 5)
    g = GumbelConfig(mode="sample", estimator="soft")

    def loss():
        r = np.random.default_rng(0)
        return triplet_loss(embed_pair(s, pos, p, cfg, g, r), embed_pair(s, neg, p, cfg, g, r), 100.0)

    p.zero_grad()
    ad.backward(loss())
    with ad.no_grad():
        for name, t in p.items():
            num = central_diff(lambda: loss().item(), t.data)
            assert rel_err(t.grad, num) < 1e-4, name


def test_straight_through_gap_scales_with_unsaturated_mass():
    """ST and soft-forward gradients differ by about (1 - s) times the gradient size."""
    rng = np.random.default_rng(11)
    p, _ = setup(2)
    s, pos, neg = regions(rng, 4), regions(rng, 3), regions(rng, 3)
    out = {}
    for tau in (1e-3, 0.3):
        cfg = ModelConfig(d=D, d_h=D_H, tau=tau)
        grads, peaks = {}, []
        for est in ("st", "soft"):
            g = GumbelConfig(tau=tau, estimator=est)
            r = np.random.default_rng(4)
            ep = embed_pair(s, pos, p, cfg, g, r, keep_soft=True)
            en = embed_pair(s, neg, p, cfg, g, r, keep_soft=True)
            p.zero_grad()
            ad.backward(triplet_loss(ep, en, 100.0))
            grads[est] = np.concatenate([v.ravel() for v in p.grads().values()])
            peaks += [float(np.max(e.soft)) for tr in (ep.sketch_trace, ep.photo_trace,
                                                      en.sketch_trace, en.photo_trace) for e in tr]
        out[tau] = (np.max(np.abs(grads["st"] - grads["soft"])), 1 - min(peaks), np.max(np.abs(grads["st"])))
    gap, mass, scale = out[1e-3]
    assert mass == 0.0 and gap == 0.0
    gap, mass, scale = out[0.3]
    assert mass > 0 and 0 < gap <= 10 * mass * scale


def test_adam_descends_on_a_fixed_triplet():
    rng = np.random.default_rng(12)
    p, cfg = setup(3)
    s, neg = regions(rng, 4), regions(rng, 4)
    pos = s + 0.5 * rng.standard_normal(s.shape)

    def loss():
        return triplet_loss(embed_pair(s, pos, p, cfg), embed_pair(s, neg, p, cfg), 50.0)

    opt = Adam(p, lr=1e-4)
    first = loss().item()
    assert first > 0
    for _ in range(50):
        p.zero_grad()
        ad.backward(loss())
        opt.step()
    assert loss().item() < first
