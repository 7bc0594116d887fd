import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfusion import dense_crf as dc
from semfusion.errors import EmptyMap, LengthMismatch, TooLarge
from semfusion.semantics_core import LabelSet
from semfusion.surfel_map import SurfelMap

from conftest import random_map

P = dc.CrfParams()


def feats(p=(0, 0, 0), c=(0, 0, 0), n=(0, 0, 1)):
    return dc.CrfFeatures(np.array(p, float), np.array(c, float), np.array(n, float))


def graph(unary, pos=None, col=None, nrm=None):
    unary = np.asarray(unary, float)
    n = unary.shape[0]
    pos = np.zeros((n, 3)) if pos is None else np.asarray(pos, float)
    col = np.zeros((n, 3)) if col is None else np.asarray(col, float)
    nrm = np.tile([0, 0, 1.0], (n, 1)) if nrm is None else np.asarray(nrm, float)
    return dc.CrfGraph(np.arange(n), pos, col, nrm, unary)


def random_graph(rng, n, labels, spread=0.1):
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return graph(rng.uniform(0, 3, (n, labels)), rng.uniform(-spread, spread, (n, 3)),
                 rng.uniform(0, 60, (n, 3)), nrm)


def reference_step(g, q, params):
    """Dense double loop over the update formula, independent of the vectorised path."""
    n, L = g.unary.shape
    out = np.empty((n, L))
    for s in range(n):
        e = []
        for l in range(L):
            msg = 0.0
            for t in range(n):
                if t == s:
                    continue
                dp = sum((g.positions[s][a] - g.positions[t][a]) ** 2 for a in range(3))
                dc_ = sum((g.colours[s][a] - g.colours[t][a]) ** 2 for a in range(3))
                dn = sum((g.normals[s][a] - g.normals[t][a]) ** 2 for a in range(3))
                k1 = math.exp(-dp / (2 * params.theta_alpha**2) - dc_ / (2 * params.theta_beta**2))
                k2 = math.exp(-dp / (2 * params.theta_alpha**2) - dn / (2 * params.theta_gamma**2))
                msg += (params.w1 * k1 + params.w2 * k2) * (1.0 - q[t][l])
            e.append(-g.unary[s][l] - msg)
        m = max(e)
        z = sum(math.exp(x - m) for x in e)
        out[s] = [math.exp(x - m) / z for x in e]
    return out


# --- kernels -----------------------------------------------------------------


def test_kernel_values():
    a = feats()
    assert dc.kernel_appearance(a, a, P) == 1.0
    assert dc.kernel_smoothness(a, a, P) == 1.0
    half = math.exp(-0.5)
    assert abs(dc.kernel_appearance(a, feats(p=(0.05, 0, 0)), P) - half) <= 1e-12
    assert abs(dc.kernel_appearance(a, feats(c=(20, 0, 0)), P) - half) <= 1e-12
    assert abs(dc.kernel_appearance(a, feats(c=(12, 16, 0)), P) - half) <= 1e-12
    # construct a unit normal at chord distance exactly 0.1 from (0, 0, 1)
    zc = 1 - 0.1**2 / 2
    n2 = (0.0, math.sqrt(1 - zc**2), zc)
    assert abs(np.linalg.norm(np.subtract(n2, (0, 0, 1))) - 0.1) < 1e-15
    assert abs(dc.kernel_smoothness(a, feats(n=n2), P) - half) <= 1e-12
    assert abs(dc.kernel_smoothness(a, feats(p=(0.15, 0, 0)), P) - math.exp(-4.5)) <= 1e-12
    assert dc.kernel_smoothness(a, feats(p=(0.15, 0, 0)), P) == pytest.approx(0.0111, abs=1e-4)


vec = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))


@given(vec, vec, vec, vec)
def test_kernel_bounds_and_symmetry(p1, p2, c1, c2):
    f1 = feats(p=p1, c=np.multiply(c1, 255))
    f2 = feats(p=p2, c=np.multiply(c2, 255))
    for k in (dc.kernel_appearance, dc.kernel_smoothness):
        v = k(f1, f2, P)
        assert 0.0 <= v <= 1.0
        assert v == k(f2, f1, P)
    # strictly below one once the distance is representable in the exponent
    if np.sum(np.subtract(p1, p2) ** 2) / (2 * P.theta_alpha**2) > 1e-15:
        assert dc.kernel_smoothness(f1, f2, P) < 1.0


# --- graph and energy --------------------------------------------------------


def test_build_graph_unaries():
    smap = SurfelMap(LabelSet(("a", "b", "c")))
    e = 1e-12
    smap.add_surfels([[0, 0, 0], [1, 0, 0]], [[0, 0, 1]] * 2, [[0, 0, 0]] * 2, 0.01, 0,
                     probs=[[0.5, 0.5 - e, e], [1 - 2 * e, e, e]])
    g = dc.build_graph(smap)
    assert g.ids.tolist() == [0, 1] and g.size == 2
    assert g.unary[0, 0] == pytest.approx(0.6931, abs=1e-4)
    assert g.unary[1, 1] == pytest.approx(27.631, abs=1e-3)
    assert np.isfinite(g.unary).all()


def test_build_graph_empty_map():
    with pytest.raises(EmptyMap):
        dc.build_graph(SurfelMap(LabelSet(("a",))))


def test_gibbs_energy_examples():
    assert dc.gibbs_energy(graph([[0.2, 0.9]]), [0], P) == pytest.approx(0.2)
    g = graph([[0.1, 0.3], [0.4, 0.2]])
    assert dc.gibbs_energy(g, [0, 0], P) == pytest.approx(0.5)
    g0 = graph(np.zeros((2, 2)))
    assert dc.gibbs_energy(g0, [0, 1], P) == pytest.approx(13.0)
    with pytest.raises(LengthMismatch):
        dc.gibbs_energy(g0, [0], P)


def test_gibbs_energy_sparse_equals_dense():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 40, 3)
    lab = rng.integers(0, 3, 40)
    dense = dc.gibbs_energy(g, lab, P, dc.pairwise_matrix(g, P, "exact"))
    sparse = dc.gibbs_energy(g, lab, dc.CrfParams(cutoff_sigmas=50), dc.pairwise_matrix(g, dc.CrfParams(cutoff_sigmas=50), "cutoff"))
    assert dense == pytest.approx(sparse, rel=1e-12)


# --- mean field --------------------------------------------------------------


def test_step_without_pairwise_returns_stored_distribution():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet([1, 1, 1], 6)
    g = graph(-np.log(probs), rng.normal(size=(6, 3)) * 0.01)
    q = dc.mean_field_step(g, rng.dirichlet([1, 1, 1], 6), dc.CrfParams(w1=0, w2=0))
    np.testing.assert_allclose(q, probs, rtol=0, atol=1e-15)


def test_step_attractive_pair():
    g = graph(np.full((2, 2), math.log(2)))
    q = dc.mean_field_step(g, np.array([[1.0, 0.0], [1.0, 0.0]]), P)
    assert np.all(q[:, 0] > 0.99)


def test_step_single_node_ignores_params():
    probs = np.array([[0.2, 0.5, 0.3]])
    g = graph(-np.log(probs))
    for params in (P, dc.CrfParams(w1=100, w2=50, theta_alpha=1.0)):
        np.testing.assert_allclose(dc.mean_field_step(g, np.array([[1.0, 0, 0]]), params), probs, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25), st.integers(2, 4))
def test_step_matches_double_loop(seed, n, L):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, L)
    q = rng.dirichlet(np.ones(L), n)
    np.testing.assert_allclose(dc.mean_field_step(g, q, P), reference_step(g, q, P), rtol=0, atol=1e-12)


def test_cutoff_agrees_with_exact():
    rng = np.random.default_rng(5)
    for trial in range(4):
        smap = random_map(rng, 400, labels=3, spread=0.2)
        exact = dc.infer(smap, dc.CrfParams(mode="exact"))
        cut = dc.infer(smap, dc.CrfParams(mode="cutoff"))
        assert exact.report.mode == "exact" and cut.report.mode == "cutoff"
        rel = np.abs(cut.marginals - exact.marginals) / exact.marginals
        assert rel.max() <= 0.02


def test_auto_mode_threshold():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 10, 2)
    assert dc.resolve_mode(g, dc.CrfParams(auto_exact_limit=10)) == "exact"
    assert dc.resolve_mode(g, dc.CrfParams(auto_exact_limit=9)) == "cutoff"


# --- brute force -------------------------------------------------------------


def test_brute_force_examples():
    lab, e = dc.brute_force_map(graph([[0.2, 0.9]]), P)
    assert lab.tolist() == [0] and e == pytest.approx(0.2)
    far = graph([[0.5, 0.1, 0.9], [0.2, 0.7, 0.3]], pos=[[0, 0, 0], [100, 0, 0]])
    lab, _ = dc.brute_force_map(far, P)
    assert lab.tolist() == [1, 0]
    # ties resolve to the lexicographically first labeling
    lab, e = dc.brute_force_map(graph(np.zeros((2, 2)), pos=[[0, 0, 0], [100, 0, 0]]), P)
    assert lab.tolist() == [0, 0] and e == 0.0


def test_brute_force_too_large():
    with pytest.raises(TooLarge):
        dc.brute_force_map(graph(np.zeros((15, 3))), P)


def dominant_instance(rng, n, L):
    """Random features with unaries whose gap exceeds each node's total pairwise weight."""
    g = random_graph(rng, n, L, spread=0.08)
    w = dc.pairwise_matrix(g, P, "exact")
    incident = w.sum(axis=1)
    best = rng.integers(0, L, n)
    unary = np.empty((n, L))
    for s in range(n):
        low = rng.uniform(0, 0.5)
        unary[s] = low + incident[s] + rng.uniform(0.01, 2.0) + rng.uniform(0, 2, L)
        unary[s, best[s]] = low
    g.unary = unary
    return g, best


def graph_to_map(g):
    probs = np.exp(-g.unary)
    probs /= probs.sum(axis=1, keepdims=True)
    smap = SurfelMap(LabelSet(tuple(f"c{i}" for i in range(g.label_count))))
    smap.add_surfels(g.positions, g.normals, g.colours, 0.01, 0, probs=probs)
    return smap


def test_dominant_unary_instance_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(30):
        g, best = dominant_instance(rng, int(rng.integers(2, 7)), int(rng.integers(2, 4)))
        lab, _ = dc.brute_force_map(g, P)
        assert lab.tolist() == best.tolist()
        smap = graph_to_map(g)
        dc.run_inference(smap, P)
        assert np.argmax(smap.table.probs, axis=1).tolist() == best.tolist()


# --- inference ---------------------------------------------------------------


def test_run_inference_zero_pairwise_is_noop():
    rng = np.random.default_rng(3)
    smap = random_map(rng, 50)
    before = smap.table.probs.copy()
    dc.run_inference(smap, dc.CrfParams(w1=0, w2=0))
    np.testing.assert_allclose(smap.table.probs, before, rtol=0, atol=1e-9)


def test_run_inference_identical_distributions_unchanged():
    smap = SurfelMap(LabelSet(("a", "b", "c")))
    rng = np.random.default_rng(0)
    smap.add_surfels(rng.uniform(-1, 1, (20, 3)), np.tile([0, 0, 1.0], (20, 1)), np.zeros((20, 3)), 0.01, 0,
                     probs=np.tile([0.2, 0.5, 0.3], (20, 1)))
    dc.run_inference(smap, dc.CrfParams(w1=0, w2=0))
    np.testing.assert_allclose(smap.table.probs, np.tile([0.2, 0.5, 0.3], (20, 1)), atol=1e-9)


def test_coincident_surfels_agree():
    smap = SurfelMap(LabelSet(("a", "b")))
    smap.add_surfels([[0, 0, 1]] * 2, [[0, 0, 1]] * 2, [[9, 9, 9]] * 2, 0.01, 0, probs=[[0.9, 0.1], [0.4, 0.6]])
    report = dc.run_inference(smap, P)
    assert np.argmax(smap.table.probs, axis=1).tolist() == [0, 0]
    assert report.nodes == 2 and report.iterations == 10
    assert report.energy_after <= report.energy_before
    assert report.wall_time >= 0


def test_plain_synchronous_update_oscillates_on_pair():
    smap = SurfelMap(LabelSet(("a", "b")))
    smap.add_surfels([[0, 0, 1]] * 2, [[0, 0, 1]] * 2, [[9, 9, 9]] * 2, 0.01, 0, probs=[[0.9, 0.1], [0.4, 0.6]])
    res = dc.infer(smap, dc.CrfParams(relax=1.0))
    assert np.argmax(res.marginals, axis=1).tolist() == [0, 1]


def test_random_instance_energy_not_below_brute_force():
    rng = np.random.default_rng(13)
    g = random_graph(rng, 8, 3, spread=0.05)
    _, e_min = dc.brute_force_map(g, P)
    res = dc.infer(graph_to_map(g), P)
    e = dc.gibbs_energy(g, np.argmax(res.marginals, axis=1), P)
    assert e >= e_min - 1e-9


def test_run_inference_empty_map():
    with pytest.raises(EmptyMap):
        dc.run_inference(SurfelMap(LabelSet(("a",))))


def test_rows_stay_valid_after_write_back():
    rng = np.random.default_rng(21)
    smap = random_map(rng, 300, labels=4, spread=0.1)
    dc.run_inference(smap, P)
    np.testing.assert_allclose(smap.table.probs.sum(axis=1), 1.0, atol=1e-9)
    assert smap.table.probs.min() >= 1e-12


def test_blend_factor():
    rng = np.random.default_rng(2)
    smap = random_map(rng, 30)
    before = smap.table.probs.copy()
    res = dc.infer(smap, P)
    dc.write_back(smap, res, blend=0.25)
    np.testing.assert_allclose(smap.table.probs, 0.75 * before + 0.25 * res.marginals, atol=1e-12)


def test_subsampling_is_seeded_and_reported():
    rng = np.random.default_rng(1)
    smap = random_map(rng, 200)
    a = dc.infer(smap, dc.CrfParams(max_exact_nodes=50, seed=3))
    b = dc.infer(smap, dc.CrfParams(max_exact_nodes=50, seed=3))
    assert a.report.subsampled and a.report.nodes == 50
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.marginals, b.marginals)


def test_selection_limits_nodes():
    rng = np.random.default_rng(1)
    smap = random_map(rng, 40)
    before = smap.table.probs.copy()
    report = dc.run_inference(smap, P, selection=smap.ids[:10])
    assert report.nodes == 10
    np.testing.assert_array_equal(smap.table.probs[10:], before[10:])


def test_snapshot_isolation():
    rng = np.random.default_rng(6)
    smap = random_map(rng, 60)
    snap = smap.snapshot()
    res = dc.infer(snap, P)
    # the live map changes after the snapshot: some surfels vanish, new ones arrive
    smap.remove_ids(smap.ids[:10])
    smap.add_surfels(np.zeros((5, 3)), np.tile([0, 0, 1.0], (5, 1)), np.zeros((5, 3)), 0.01, 1)
    res_again = dc.infer(snap, P)
    np.testing.assert_array_equal(res.marginals, res_again.marginals)
    new_rows = smap.table.probs[-5:].copy()
    vanished = dc.write_back(smap, res, P.blend)
    assert vanished == 10 and res.report.vanished == 10
    smap.check_integrity()
    np.testing.assert_array_equal(smap.table.probs[-5:], new_rows)
    alive = np.isin(res.ids, smap.ids)
    np.testing.assert_allclose(smap.table.probs[:50], res.marginals[alive], atol=1e-12)


def test_report_serialises():
    rng = np.random.default_rng(0)
    d = dc.run_inference(random_map(rng, 5), P).to_dict()
    assert set(d) >= {"nodes", "iterations", "wall_time", "energy_before", "energy_after", "mode"}
