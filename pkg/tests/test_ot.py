"""Transport estimator, exact oracles, and divergence baselines."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from wdhrl.errors import (
    ConfigError,
    DomainError,
    EstimationError,
    FittingError,
    OracleScopeError,
    ShapeError,
)
from wdhrl.ot import (
    DiscreteMeasure,
    DualPotentials,
    OtParams,
    RandomFeatureMap,
    cost,
    dual_objective_terms,
    dual_sgd_step,
    embed,
    estimate_wd,
    exact_wd_1d,
    exact_wd_discrete,
    fit_potentials,
    iterator_sampler,
    js_divergence_categorical,
    make_feature_map,
    median_heuristic_bandwidth,
    paired_sampler,
    pair_costs,
    product_sampler,
)
from wdhrl.rngs import substream


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

def test_feature_map_shapes_and_determinism():
    fm = make_feature_map(d=3, m=16, bandwidth=2.0, seed=7)
    assert fm.G.shape == (3, 16)
    assert fm.b.shape == (16,)
    assert fm.d == 3 and fm.m == 16
    fm2 = make_feature_map(d=3, m=16, bandwidth=2.0, seed=7)
    assert np.array_equal(fm.G, fm2.G) and np.array_equal(fm.b, fm2.b)
    fm3 = make_feature_map(d=3, m=16, bandwidth=2.0, seed=8)
    assert not np.array_equal(fm.G, fm3.G)


def test_feature_map_validation():
    with pytest.raises(ConfigError):
        make_feature_map(d=0, m=8, bandwidth=1.0, seed=0)
    with pytest.raises(ConfigError):
        make_feature_map(d=2, m=0, bandwidth=1.0, seed=0)
    with pytest.raises(ConfigError):
        make_feature_map(d=2, m=8, bandwidth=0.0, seed=0)


def test_embed_bounds_and_shape():
    fm = make_feature_map(d=2, m=32, bandwidth=1.0, seed=0)
    x = substream("embed_pts", 0).normal(size=(50, 2))
    feats = embed(fm, x)
    assert feats.shape == (50, 32)
    assert np.all(np.abs(feats) <= 1.0 / math.sqrt(32) + 1e-12)


def test_embed_rejects_bad_shapes():
    fm = make_feature_map(d=2, m=8, bandwidth=1.0, seed=0)
    with pytest.raises(ShapeError):
        embed(fm, np.zeros(2))
    with pytest.raises(ShapeError):
        embed(fm, np.zeros((4, 3)))


def test_embed_matches_kernel_expectation():
    # Averaged over fresh maps, <phi(x), phi(y)> estimates half the
    # expectation of cos(w . (x - y) / width) for standard normal w.  The
    # reference value is computed here by numerical quadrature, not from a
    # kernel formula.
    x = np.array([[0.4, -0.2, 1.0]])
    y = np.array([[1.1, 0.3, 0.2]])
    bandwidth = 0.9
    s = float(np.linalg.norm(x - y)) / bandwidth
    ref, quad_err = quad(
        lambda t: math.cos(s * t) * math.exp(-t * t / 2.0) / math.sqrt(2 * math.pi),
        -12.0, 12.0)
    assert quad_err < 1e-9
    assert abs(ref - 0.4266241552421304) < 1e-12  # frozen from the same quadrature

    dots = []
    for seed in range(400):
        fm = make_feature_map(d=3, m=8, bandwidth=bandwidth, seed=seed)
        dots.append(float(embed(fm, x)[0] @ embed(fm, y)[0]))
    mc = np.mean(dots)
    se = np.std(dots) / math.sqrt(len(dots))
    assert abs(mc - 0.5 * ref) < 4 * se + 1e-3


def test_cost_and_pair_costs():
    a = np.array([1.0, 2.0])
    b = np.array([4.0, 6.0])
    assert cost(a, b) == 25.0
    assert cost(a, a) == 0.0
    assert cost(a, b) == cost(b, a)
    X = np.stack([a, a])
    Y = np.stack([b, a])
    assert np.allclose(pair_costs(X, Y), [25.0, 0.0])
    with pytest.raises(ShapeError):
        cost(a, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        pair_costs(X, Y[:1])


def test_median_heuristic_bandwidth():
    pts = np.array([[0.0, 0.0], [0.0, 2.0]])
    assert median_heuristic_bandwidth(pts) == 2.0
    with pytest.raises(DomainError):
        median_heuristic_bandwidth(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        median_heuristic_bandwidth(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Dual SGD
# ---------------------------------------------------------------------------

def _tiny_map():
    # Hand-built d=1, m=2 map so every quantity below is reproducible by a
    # few lines of scalar arithmetic.
    return RandomFeatureMap(
        G=np.array([[0.5, -1.0]]), b=np.array([0.25, 1.5]),
        m=2, bandwidth=1.0, seed=0)


def test_dual_sgd_three_step_trace_matches_hand_loop():
    # Frozen from an independent scalar reimplementation of the update rule
    # (math module only): three pairs, smoothing 0.5, step 0.1.
    fm = _tiny_map()
    params = OtParams(smoothing=0.5, step_size=0.1, rounds=3, eval_samples=1)
    pairs = [(np.array([0.0]), np.array([1.0])),
             (np.array([2.0]), np.array([-1.0])),
             (np.array([0.5]), np.array([0.5]))]
    pot = fit_potentials(iterator_sampler(pairs), fm, fm, params, seed=0)

    assert pot.rounds_run == 3
    assert pot.clamp_events == 0
    np.testing.assert_allclose(
        pot.p_mu, [0.04135292909682359, 0.053017789466301396], rtol=0, atol=1e-14)
    np.testing.assert_allclose(
        pot.p_nu, [-0.07722911533950926, 0.03204689770376376], rtol=0, atol=1e-14)
    np.testing.assert_allclose(
        pot.objective_trace,
        [-0.21924785753831688, -0.058625307017352704, -0.2080954047151553],
        rtol=0, atol=1e-14)


def test_fixed_point_at_matched_identical_pairs():
    # Identical matched pairs give z = 0, F = 1, step 0: potentials stay at
    # zero and every objective value is exactly -smoothing.
    fm = make_feature_map(d=2, m=16, bandwidth=1.0, seed=3)
    pts = substream("fixed_pt", 0).normal(size=(20, 2))
    params = OtParams(smoothing=0.05, step_size=0.01, rounds=200, eval_samples=64)
    pot = fit_potentials(paired_sampler(pts, pts), fm, fm, params, seed=1)
    assert np.all(pot.p_mu == 0.0) and np.all(pot.p_nu == 0.0)
    assert pot.objective_trace == pytest.approx([-0.05] * 200, abs=1e-15)
    feats = embed(fm, pts)
    assert estimate_wd(pot, (feats, feats), params) == pytest.approx(-0.05, abs=1e-15)


def test_product_coupling_of_identical_measures_is_not_a_fixed_point():
    # Independent draws from the same cloud see nonzero costs, so the fit
    # moves off zero and the estimate sits well above -smoothing.
    fm = make_feature_map(d=2, m=32, bandwidth=1.0, seed=3)
    pts = substream("prod_pts", 0).normal(size=(64, 2))
    params = OtParams(smoothing=0.1, step_size=0.01, rounds=1000, eval_samples=64)
    pot = fit_potentials(product_sampler(pts, pts), fm, fm, params, seed=1)
    assert np.any(pot.p_mu != 0.0)
    feats = embed(fm, pts)
    ix = substream("prod_eval", 0).integers(64, size=512)
    iy = substream("prod_eval", 1).integers(64, size=512)
    est = estimate_wd(pot, (feats[ix], feats[iy]), params)
    assert est > 0.0  # sits near the smoothed optimum, not at -smoothing


def test_dual_sgd_step_clamps_and_counts():
    params = OtParams(smoothing=0.01, step_size=0.1, rounds=1, eval_samples=1, exp_clamp=5.0)
    pot = DualPotentials(p_mu=np.array([100.0]), p_nu=np.array([0.0]))
    dual_sgd_step(pot, np.array([1.0]), np.array([1.0]), 0.0, params)
    assert pot.clamp_events == 1
    assert np.all(np.isfinite(pot.p_mu))


def test_dual_sgd_step_shape_mismatch():
    pot = DualPotentials(p_mu=np.zeros(3), p_nu=np.zeros(3))
    with pytest.raises(ShapeError):
        dual_sgd_step(pot, np.zeros(2), np.zeros(3), 0.0, OtParams())


def test_fit_potentials_exhausted_sampler():
    fm = _tiny_map()
    pairs = [(np.array([0.0]), np.array([1.0]))]
    params = OtParams(smoothing=0.5, step_size=0.1, rounds=5, eval_samples=1)
    with pytest.raises(FittingError, match="exhausted after 1 of 5"):
        fit_potentials(iterator_sampler(pairs), fm, fm, params, seed=0)


def test_fit_potentials_feature_count_mismatch():
    fa = make_feature_map(d=1, m=4, bandwidth=1.0, seed=0)
    fb = make_feature_map(d=1, m=8, bandwidth=1.0, seed=0)
    with pytest.raises(ShapeError):
        fit_potentials(iterator_sampler([]), fa, fb, OtParams(), seed=0)


def test_penalty_forms_against_hand_values():
    # With potentials p_mu = (1, 0), p_nu = (0, 1) and a single eval pair,
    # s and F are two-line computations; both penalty conventions checked.
    phi_x = np.array([[0.5, 0.5]])
    phi_y = np.array([[0.25, 0.25]])
    s = 0.5 - 0.25
    c = 2 * 0.25 ** 2
    pot = DualPotentials(p_mu=np.array([1.0, 0.0]), p_nu=np.array([0.0, 1.0]))
    scaled = OtParams(smoothing=0.5, penalty_form="scaled")
    ratio = OtParams(smoothing=0.5, penalty_form="ratio")
    F = math.exp((s - c) / 0.5)
    assert estimate_wd(pot, (phi_x, phi_y), scaled) == pytest.approx(s - 0.5 * F, abs=1e-15)
    assert estimate_wd(pot, (phi_x, phi_y), ratio) == pytest.approx(s - F / 0.5, abs=1e-15)
    vals, Fs = dual_objective_terms(pot.p_mu, pot.p_nu, phi_x, phi_y, scaled)
    assert Fs[0] == pytest.approx(F, abs=1e-15)
    assert vals[0] == pytest.approx(s - 0.5 * F, abs=1e-15)


def test_estimate_wd_validation():
    pot = DualPotentials(p_mu=np.zeros(4), p_nu=np.zeros(4))
    params = OtParams()
    with pytest.raises(EstimationError):
        estimate_wd(pot, (np.zeros((0, 4)), np.zeros((0, 4))), params)
    with pytest.raises(EstimationError):
        estimate_wd(pot, (np.zeros((2, 4)), np.zeros((3, 4))), params)
    with pytest.raises(EstimationError):
        estimate_wd(pot, (np.zeros((2, 3)), np.zeros((2, 3))), params)


def test_ot_params_validation():
    for kwargs in (dict(smoothing=0.0), dict(step_size=-1.0), dict(rounds=0),
                   dict(eval_samples=0), dict(penalty_form="bogus"),
                   dict(exp_clamp=0.0)):
        with pytest.raises(ConfigError):
            OtParams(**kwargs)


def test_estimator_tracks_embedded_lp_on_separated_pair():
    # The estimator targets transport cost between the pushforwards under
    # the feature map, so the reference oracle runs on embedded supports.
    rng = substream("sep_pair", 0)
    xs = rng.normal(size=(5, 2)) * 0.3
    ys = rng.normal(size=(5, 2)) * 0.3 + np.array([3.0, 0.0])
    fm = make_feature_map(d=2, m=2000, bandwidth=1.0, seed=11)
    params = OtParams(smoothing=0.05, step_size=0.01, rounds=2000, eval_samples=1024)
    pot = fit_potentials(product_sampler(xs, ys), fm, fm, params, seed=5)
    idx = substream("sep_pair_eval", 0)
    phi_x = embed(fm, xs)[idx.integers(5, size=1024)]
    phi_y = embed(fm, ys)[substream("sep_pair_eval", 1).integers(5, size=1024)]
    est = estimate_wd(pot, (phi_x, phi_y), params)
    exact = exact_wd_discrete(
        DiscreteMeasure.uniform(embed(fm, xs)),
        DiscreteMeasure.uniform(embed(fm, ys)), method="lp")
    assert abs(est - exact) <= max(0.10 * exact, 0.02)


# ---------------------------------------------------------------------------
# Exact discrete oracle
# ---------------------------------------------------------------------------

def test_discrete_measure_validation():
    with pytest.raises(ShapeError):
        DiscreteMeasure(points=np.zeros((0, 2)), weights=np.zeros(0))
    with pytest.raises(ShapeError):
        DiscreteMeasure(points=np.zeros((2, 2)), weights=np.zeros(3))
    with pytest.raises(DomainError):
        DiscreteMeasure(points=np.zeros((2, 2)), weights=np.array([1.5, -0.5]))
    with pytest.raises(DomainError):
        DiscreteMeasure(points=np.zeros((2, 2)), weights=np.array([0.4, 0.4]))


def test_exact_routes_agree_on_uniform_supports():
    rng = substream("routes", 0)
    for trial in range(5):
        n = int(rng.integers(2, 7))
        p = DiscreteMeasure.uniform(rng.normal(size=(n, 3)))
        q = DiscreteMeasure.uniform(rng.normal(size=(n, 3)) + 1.0)
        lp = exact_wd_discrete(p, q, method="lp")
        asg = exact_wd_discrete(p, q, method="assignment")
        enum = exact_wd_discrete(p, q, method="enumeration")
        assert abs(lp - asg) <= 1e-9
        assert abs(lp - enum) <= 1e-9
        assert exact_wd_discrete(p, q) == asg  # auto routes to assignment here


def test_exact_wd_weighted_hand_case():
    # Two source atoms collapsing onto one target: cost is the weighted
    # average of the individual squared distances.
    p = DiscreteMeasure(points=np.array([[0.0], [2.0]]), weights=np.array([0.25, 0.75]))
    q = DiscreteMeasure(points=np.array([[1.0]]), weights=np.array([1.0]))
    got = exact_wd_discrete(p, q)
    assert got == pytest.approx(0.25 * 1.0 + 0.75 * 1.0, abs=1e-12)
    q2 = DiscreteMeasure(points=np.array([[3.0]]), weights=np.array([1.0]))
    assert exact_wd_discrete(p, q2) == pytest.approx(0.25 * 9.0 + 0.75 * 1.0, abs=1e-12)


def test_exact_wd_custom_costfn():
    p = DiscreteMeasure.uniform(np.array([[0.0], [1.0]]))
    q = DiscreteMeasure.uniform(np.array([[2.0], [3.0]]))
    got = exact_wd_discrete(p, q, costfn=lambda x, y: abs(float(x[0] - y[0])))
    assert got == pytest.approx(2.0, abs=1e-12)


def test_exact_wd_guardrails():
    p = DiscreteMeasure.uniform(np.zeros((3, 2)))
    q3 = DiscreteMeasure.uniform(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        exact_wd_discrete(p, DiscreteMeasure.uniform(np.ones((3, 3))))
    with pytest.raises(OracleScopeError, match="max_couplings"):
        exact_wd_discrete(p, q3, max_couplings=8)
    with pytest.raises(ConfigError):
        exact_wd_discrete(p, q3, method="sinkhorn")
    weighted = DiscreteMeasure(points=np.zeros((2, 2)), weights=np.array([0.3, 0.7]))
    uni2 = DiscreteMeasure.uniform(np.ones((2, 2)))
    with pytest.raises(OracleScopeError):
        exact_wd_discrete(weighted, uni2, method="assignment")
    with pytest.raises(OracleScopeError):
        exact_wd_discrete(weighted, uni2, method="enumeration")
    big = DiscreteMeasure.uniform(np.zeros((7, 1)))
    big2 = DiscreteMeasure.uniform(np.ones((7, 1)))
    with pytest.raises(OracleScopeError, match="capped at 6"):
        exact_wd_discrete(big, big2, method="enumeration")


def test_exact_wd_1d_matches_lp():
    rng = substream("oned", 0)
    xs = rng.normal(size=12)
    ys = rng.normal(size=12) + 2.0
    lp1 = exact_wd_discrete(
        DiscreteMeasure.uniform(xs[:, None]), DiscreteMeasure.uniform(ys[:, None]),
        costfn=lambda a, b: abs(float(a[0] - b[0])), method="lp")
    assert abs(exact_wd_1d(xs, ys, power=1) - lp1) <= 1e-9
    lp2 = exact_wd_discrete(
        DiscreteMeasure.uniform(xs[:, None]), DiscreteMeasure.uniform(ys[:, None]),
        method="lp")
    assert abs(exact_wd_1d(xs, ys, power=2) - lp2) <= 1e-9


def test_exact_wd_1d_gaussian_closed_form():
    # For two normal samples the squared quantile cost approaches
    # (mean gap)^2 + (sd gap)^2; n = 20000 keeps sampling error small.
    rng = substream("gauss_1d", 0)
    xs = rng.normal(loc=0.0, scale=1.0, size=20000)
    ys = rng.normal(loc=3.0, scale=1.0, size=20000)
    assert exact_wd_1d(xs, ys, power=2) == pytest.approx(9.0, rel=0.05)


def test_exact_wd_1d_validation():
    with pytest.raises(ShapeError):
        exact_wd_1d(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        exact_wd_1d(np.zeros(0), np.zeros(0))
    with pytest.raises(DomainError):
        exact_wd_1d(np.zeros(3), np.zeros(3), power=3)


# ---------------------------------------------------------------------------
# Jensen-Shannon baseline
# ---------------------------------------------------------------------------

def test_js_divergence_reference_points():
    assert js_divergence_categorical([1.0, 0.0], [0.0, 1.0]) == pytest.approx(
        math.log(2.0), abs=1e-12)
    assert js_divergence_categorical([0.3, 0.7], [0.3, 0.7]) == 0.0
    # Hand value: JS([1/2, 1/2], [1, 0]) = (3/4) ln(4/3).
    got = js_divergence_categorical([0.5, 0.5], [1.0, 0.0])
    assert got == pytest.approx(0.75 * math.log(4.0 / 3.0), abs=1e-12)
    assert got == pytest.approx(0.21576155433883568, abs=1e-12)


def test_js_divergence_validation():
    with pytest.raises(ShapeError):
        js_divergence_categorical([0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(DomainError):
        js_divergence_categorical([1.2, -0.2], [0.5, 0.5])
    with pytest.raises(DomainError):
        js_divergence_categorical([0.5, 0.4], [0.5, 0.5])


def test_js_divergence_range():
    rng = substream("js_range", 0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        v = js_divergence_categorical(p, q)
        assert 0.0 <= v <= math.log(2.0) + 1e-12


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def test_paired_sampler_requires_alignment():
    with pytest.raises(ShapeError):
        paired_sampler(np.zeros((3, 2)), np.zeros((4, 2)))


def test_paired_sampler_returns_matched_rows():
    xs = np.arange(10, dtype=float)[:, None]
    ys = xs + 100.0
    sample = paired_sampler(xs, ys)
    rng = substream("paired", 0)
    for _ in range(20):
        x, y = sample(rng)
        assert y[0] - x[0] == 100.0


def test_product_sampler_covers_cross_pairs():
    xs = np.array([[0.0], [1.0]])
    ys = np.array([[10.0], [20.0]])
    sample = product_sampler(xs, ys)
    rng = substream("product", 0)
    seen = {(float(x[0]), float(y[0])) for x, y in (sample(rng) for _ in range(200))}
    assert len(seen) == 4
