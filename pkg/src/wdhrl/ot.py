"""Smoothed Wasserstein distance in a random-feature dual, with exact oracles.

Points are embedded by a random cosine feature map of an RBF kernel, dual
potentials are linear functionals of the embedding, and the smoothed-transport
dual objective

    E[ mu(x) - nu(y) - beta * exp((mu(x) - nu(y) - c(x, y)) / beta) ]

is ascended by single-pair stochastic gradient steps, then read off as an
empirical mean over evaluation pairs.  The ground cost is squared Euclidean
distance in the embedding space, which keeps it bounded (embedding entries
live in [-1/sqrt(m), 1/sqrt(m)]).

Exact solvers for validation at small scale: the discrete transport problem
(assignment / LP / permutation enumeration), the 1-D quantile coupling, and a
categorical Jensen-Shannon divergence used as a geometry baseline.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import (
    ConfigError,
    DomainError,
    EstimationError,
    FittingError,
    OracleScopeError,
    ShapeError,
)
from .rngs import substream

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RandomFeatureMap:
    """Random cosine feature map x -> cos((x / bandwidth) @ G + b) / sqrt(m).

    ``G`` has shape (d, m) with standard normal entries and ``b`` is uniform
    on [0, 2*pi); both are fixed for the map's lifetime, so embedding the
    same point twice gives bitwise identical features.
    """

    G: np.ndarray
    b: np.ndarray
    m: int
    bandwidth: float
    seed: int

    @property
    def d(self) -> int:
        return self.G.shape[0]


@dataclass
class DualPotentials:
    """Dual vectors of the random-feature transport objective, plus fit
    diagnostics.  ``mu(x) = p_mu @ phi(x)`` and ``nu(y) = p_nu @ phi(y)``.

    ``objective_trace[t]`` is the running mean of the per-pair dual objective
    over the first t+1 fitting rounds; ``clamp_events`` counts exponent
    clippings during fitting.
    """

    p_mu: np.ndarray
    p_nu: np.ndarray
    rounds_run: int = 0
    objective_trace: list = field(default_factory=list)
    clamp_events: int = 0


@dataclass(frozen=True)
class OtParams:
    """Estimator knobs.

    smoothing        entropic smoothing beta (> 0)
    step_size        dual SGD step eta (> 0)
    rounds           fitting rounds M (>= 1)
    eval_samples     evaluation pairs C for the final estimate (>= 1)
    penalty_form     "scaled" uses beta * exp(z / beta) (default, the form
                     consistent with the smoothed dual); "ratio" uses
                     exp(z / beta) / beta (alternative scaling convention,
                     exposed for comparison)
    exp_clamp        symmetric bound on the exponent argument z / beta
    """

    smoothing: float = 0.1
    step_size: float = 0.01
    rounds: int = 500
    eval_samples: int = 256
    penalty_form: str = "scaled"
    exp_clamp: float = 30.0

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ConfigError(f"smoothing must be > 0, got {self.smoothing}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.eval_samples < 1:
            raise ConfigError(
                f"eval_samples must be >= 1, got {self.eval_samples}")
        if self.penalty_form not in ("scaled", "ratio"):
            raise ConfigError(
                f"penalty_form must be 'scaled' or 'ratio', got {self.penalty_form!r}")
        if self.exp_clamp <= 0:
            raise ConfigError(f"exp_clamp must be > 0, got {self.exp_clamp}")


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported measure: points (n, d) with weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ShapeError(f"points must be a non-empty (n, d) array, got shape {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise ShapeError(
                f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DomainError(f"weights must sum to 1 (got {w.sum()!r})")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, atol=1e-12))


# ---------------------------------------------------------------------------
# Feature map and embedding
# ---------------------------------------------------------------------------

def make_feature_map(d: int, m: int, bandwidth: float, seed: int) -> RandomFeatureMap:
    """Draw a random feature map for inputs of dimension ``d``.

    Deterministic per seed: the projection matrix has iid standard normal
    entries and the phases are uniform on [0, 2*pi).
    """
    if d < 1:
        raise ConfigError(f"input dimension must be >= 1, got {d}")
    if m < 1:
        raise ConfigError(f"feature count must be >= 1, got {m}")
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")
    rng = substream("feature_map", seed, d, m)
    G = rng.standard_normal((d, m))
    b = rng.uniform(0.0, 2.0 * np.pi, m)
    return RandomFeatureMap(G=G, b=b, m=m, bandwidth=float(bandwidth), seed=seed)


def embed(fmap: RandomFeatureMap, x: np.ndarray) -> np.ndarray:
    """Embed a batch of points: (h, d) -> (h, m), entries in [-1/sqrt(m), 1/sqrt(m)]."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D batch (h, d), got shape {x.shape}")
    if x.shape[1] != fmap.d:
        raise ShapeError(
            f"input dimension {x.shape[1]} does not match map dimension {fmap.d}")
    return np.cos((x / fmap.bandwidth) @ fmap.G + fmap.b) / np.sqrt(fmap.m)


def cost(x: np.ndarray, y: np.ndarray) -> float:
    """Squared Euclidean ground cost between two embedded vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"cost expects two equal-length vectors, got {x.shape} and {y.shape}")
    d = x - y
    return float(d @ d)


def pair_costs(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Row-wise squared Euclidean costs between two (h, m) batches."""
    if X.shape != Y.shape:
        raise ShapeError(f"batch shapes differ: {X.shape} vs {Y.shape}")
    d = X - Y
    return np.einsum("ij,ij->i", d, d)


def median_heuristic_bandwidth(points: np.ndarray) -> float:
    """Median pairwise distance of a sample; a conventional kernel width.

    Off by default everywhere; callers opt in explicitly.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ShapeError("need at least two points of shape (n, d)")
    diffs = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    med = float(np.median(np.sqrt(d2[np.triu_indices(pts.shape[0], k=1)])))
    if med <= 0:
        raise DomainError("all points identical; median bandwidth undefined")
    return med


# ---------------------------------------------------------------------------
# Dual SGD
# ---------------------------------------------------------------------------

def _penalty(F: np.ndarray, params: OtParams):
    if params.penalty_form == "scaled":
        return params.smoothing * F
    return F / params.smoothing


def dual_objective_terms(p_mu, p_nu, phi_x, phi_y, params: OtParams):
    """Per-pair dual objective values and constraint factors F.

    ``phi_x`` and ``phi_y`` are embedded batches of equal shape (C, m).
    Returns (values, F) where values[i] = mu(x_i) - nu(y_i) - penalty(F_i)
    and F_i = exp(clamped (mu - nu - c_i) / beta).
    """
    s = phi_x @ p_mu - phi_y @ p_nu
    z = s - pair_costs(phi_x, phi_y)
    F = np.exp(np.clip(z / params.smoothing, -params.exp_clamp, params.exp_clamp))
    return s - _penalty(F, params), F


def dual_sgd_step(pot: DualPotentials, phi_x: np.ndarray, phi_y: np.ndarray,
                  c: float, params: OtParams) -> DualPotentials:
    """One stochastic ascent step on the dual objective for a single pair.

    F = exp((mu(x) - nu(y) - c) / beta), exponent clamped to
    +-params.exp_clamp (clampings are counted on the potentials);
    p_mu += (1 - F) * eta * phi_x and p_nu -= (1 - F) * eta * phi_y.
    Mutates and returns ``pot``.  At F = 1 the potentials are a fixed point.
    """
    if phi_x.shape != pot.p_mu.shape or phi_y.shape != pot.p_nu.shape:
        raise ShapeError(
            f"feature shapes {phi_x.shape}/{phi_y.shape} do not match potentials "
            f"{pot.p_mu.shape}/{pot.p_nu.shape}")
    z = float(pot.p_mu @ phi_x - pot.p_nu @ phi_y - c)
    arg = z / params.smoothing
    if arg > params.exp_clamp or arg < -params.exp_clamp:
        pot.clamp_events += 1
        arg = float(np.clip(arg, -params.exp_clamp, params.exp_clamp))
    F = math.exp(arg)
    step = (1.0 - F) * params.step_size
    pot.p_mu += step * phi_x
    pot.p_nu -= step * phi_y
    return pot


def fit_potentials(sampler, map_x: RandomFeatureMap, map_y: RandomFeatureMap,
                   params: OtParams, seed: int) -> DualPotentials:
    """Fit dual potentials by ``params.rounds`` single-pair SGD steps.

    ``sampler(rng)`` must return a raw point pair (x, y) with dimensions
    matching the two maps, or None when exhausted (which raises a
    FittingError naming the rounds completed).  Potentials start at zero.
    Deterministic given the seed.
    """
    if map_x.m != map_y.m:
        raise ShapeError(
            f"maps must share a feature count, got {map_x.m} and {map_y.m}")
    pot = DualPotentials(p_mu=np.zeros(map_x.m), p_nu=np.zeros(map_y.m))
    rng = substream("fit_potentials", seed)
    running = 0.0
    for t in range(params.rounds):
        pair = sampler(rng)
        if pair is None:
            raise FittingError(
                f"pair source exhausted after {t} of {params.rounds} rounds")
        x, y = pair
        phi_x = embed(map_x, np.asarray(x, dtype=float)[None, :])[0]
        phi_y = embed(map_y, np.asarray(y, dtype=float)[None, :])[0]
        dual_sgd_step(pot, phi_x, phi_y, cost(phi_x, phi_y), params)
        val, _ = dual_objective_terms(
            pot.p_mu, pot.p_nu, phi_x[None, :], phi_y[None, :], params)
        running += float(val[0])
        pot.objective_trace.append(running / (t + 1))
        pot.rounds_run += 1
    return pot


def estimate_wd(pot: DualPotentials, eval_pairs, params: OtParams) -> float:
    """Empirical dual objective over embedded evaluation pairs.

    ``eval_pairs`` is a tuple (phi_x, phi_y) of equal-shape (C, m) arrays.
    Reported raw: the value may be negative (smoothing bias) and is close to
    the exact transport cost only once the potentials are fit and the
    smoothing is small.
    """
    phi_x, phi_y = eval_pairs
    phi_x = np.asarray(phi_x, dtype=float)
    phi_y = np.asarray(phi_y, dtype=float)
    if phi_x.ndim != 2 or phi_x.shape != phi_y.shape:
        raise EstimationError(
            f"eval pairs must be equal-shape (C, m) batches, got "
            f"{phi_x.shape} and {phi_y.shape}")
    if phi_x.shape[0] == 0:
        raise EstimationError("no evaluation pairs supplied")
    if phi_x.shape[1] != pot.p_mu.shape[0]:
        raise EstimationError(
            f"eval feature dim {phi_x.shape[1]} does not match potentials "
            f"{pot.p_mu.shape[0]}")
    values, _ = dual_objective_terms(pot.p_mu, pot.p_nu, phi_x, phi_y, params)
    return float(values.mean())


# ---------------------------------------------------------------------------
# Pair samplers
# ---------------------------------------------------------------------------

def product_sampler(xs: np.ndarray, ys: np.ndarray,
                    weights_x=None, weights_y=None):
    """Independent draws from two point sets (product of the marginals)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)

    def sample(rng):
        i = rng.choice(len(xs), p=weights_x) if weights_x is not None else rng.integers(len(xs))
        j = rng.choice(len(ys), p=weights_y) if weights_y is not None else rng.integers(len(ys))
        return xs[i], ys[j]

    return sample


def paired_sampler(xs: np.ndarray, ys: np.ndarray):
    """Matched-index draws from two aligned point sets.

    Used for CRN-coupled pushforward batches: row i of both sets came from
    the same underlying draw, so sampling the shared index preserves the
    coupling (and makes identical batches estimate ~0 within smoothing bias).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) != len(ys):
        raise ShapeError(f"paired sets must have equal length, got {len(xs)} and {len(ys)}")

    def sample(rng):
        i = rng.integers(len(xs))
        return xs[i], ys[i]

    return sample


def iterator_sampler(pairs):
    """Wrap a finite iterable of pairs; signals exhaustion by returning None."""
    it = iter(pairs)

    def sample(rng):
        return next(it, None)

    return sample


# ---------------------------------------------------------------------------
# Exact discrete oracle
# ---------------------------------------------------------------------------

def _cost_matrix(p: DiscreteMeasure, q: DiscreteMeasure, costfn):
    if costfn is None:
        diffs = p.points[:, None, :] - q.points[None, :, :]
        return np.einsum("ijk,ijk->ij", diffs, diffs)
    M = np.empty((p.n, q.n))
    for i in range(p.n):
        for j in range(q.n):
            M[i, j] = costfn(p.points[i], q.points[j])
    return M


def _transport_lp(M: np.ndarray, wx: np.ndarray, wy: np.ndarray) -> float:
    n, m = M.shape
    rows, cols, data = [], [], []
    for i in range(n):
        rows.extend([i] * m)
        cols.extend(range(i * m, (i + 1) * m))
        data.extend([1.0] * m)
    for j in range(m):
        rows.extend([n + j] * n)
        cols.extend(range(j, n * m, m))
        data.extend([1.0] * n)
    A_eq = scipy.sparse.csr_matrix((data, (rows, cols)), shape=(n + m, n * m))
    res = linprog(M.ravel(), A_eq=A_eq, b_eq=np.concatenate([wx, wy]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise OracleScopeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def exact_wd_discrete(p: DiscreteMeasure, q: DiscreteMeasure, costfn=None, *,
                      method: str = "auto", max_couplings: int = 10_000) -> float:
    """Exact optimal transport cost between two small discrete measures.

    ``costfn(x, y)`` defaults to squared Euclidean distance.  Routes:

    - "assignment": Hungarian algorithm; exact for uniform equal-size
      measures (the transport LP has a permutation optimum there).
    - "lp": HiGHS linear program on the transport polytope (general weights).
    - "enumeration": exhaustive minimum over all n! permutation couplings;
      uniform equal-size with n <= 6 only.  Independent cross-check route.
    - "auto": assignment when uniform equal-size, else LP.

    The problem size n*m must not exceed ``max_couplings``.
    """
    if p.points.shape[1] != q.points.shape[1]:
        raise ShapeError(
            f"point dimensions differ: {p.points.shape[1]} vs {q.points.shape[1]}")
    if p.n * q.n > max_couplings:
        raise OracleScopeError(
            f"problem size {p.n}x{q.n} exceeds max_couplings={max_couplings}")
    if method not in ("auto", "assignment", "lp", "enumeration"):
        raise ConfigError(f"unknown method {method!r}")

    uniform_equal = p.n == q.n and p.is_uniform() and q.is_uniform()
    if method == "auto":
        method = "assignment" if uniform_equal else "lp"

    M = _cost_matrix(p, q, costfn)

    if method == "assignment":
        if not uniform_equal:
            raise OracleScopeError(
                "assignment route needs uniform equal-size measures")
        ri, ci = linear_sum_assignment(M)
        return float(M[ri, ci].sum() / p.n)

    if method == "enumeration":
        if not uniform_equal:
            raise OracleScopeError(
                "enumeration route needs uniform equal-size measures")
        if p.n > 6:
            raise OracleScopeError(
                f"enumeration route capped at 6 points, got {p.n}")
        idx = range(p.n)
        best = min(sum(M[i, pi] for i, pi in zip(idx, perm))
                   for perm in itertools.permutations(idx))
        return float(best / p.n)

    return _transport_lp(M, p.weights, q.weights)


def exact_wd_1d(xs: np.ndarray, ys: np.ndarray, power: int = 1) -> float:
    """Exact 1-D transport cost between equal-size samples via the quantile
    coupling: sort both sides and average |x_(i) - y_(i)|^power.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if len(xs) != len(ys) or len(xs) == 0:
        raise ShapeError(
            f"need equal-size non-empty samples, got {len(xs)} and {len(ys)}")
    if power not in (1, 2):
        raise DomainError(f"power must be 1 or 2, got {power}")
    gaps = np.abs(np.sort(xs) - np.sort(ys))
    return float((gaps ** power).mean())


# ---------------------------------------------------------------------------
# Jensen-Shannon baseline
# ---------------------------------------------------------------------------

def js_divergence_categorical(p, q) -> float:
    """Jensen-Shannon divergence between two categorical laws (natural log).

    Bounded in [0, ln 2]; ln 2 exactly for disjoint supports.  Zero-mass
    bins contribute nothing (0 * log 0 = 0).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1 or len(p) == 0:
        raise ShapeError(f"need two equal-length 1-D laws, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0):
            raise DomainError(f"{name} has negative mass")
        if abs(v.sum() - 1.0) > 1e-9:
            raise DomainError(f"{name} must sum to 1 (got {v.sum()!r})")
    mix = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / mix[mask])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))
