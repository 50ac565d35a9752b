"""Monte Carlo checks of the efficient score and the Self-Prentice variance.

Random numbers come from NumPy's ``PCG64`` bit generator seeded by
``SeedSequence(root, spawn_key=(stream,))``.  Large samples are drawn in
fixed-size shards, each with its own stream, so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq

from .designs import CaseCohortSpec, case_cohort_model, sp_asymptotic_variance
from .model_core import FullDataModel, MissingnessDesign, ModelError, ScoreField, cond_mean_phase1
from .operators import (
    NuisanceDirection,
    apply_D,
    apply_DG,
    apply_m,
    apply_m_inverse,
    apply_Pi1,
    apply_R1,
    nuisance_score,
    verify_decomposition,
)
from .score_solver import (
    EfficientScoreSolution,
    efficient_score,
    phase1_posterior,
    score_parts,
    solve,
)

__all__ = [
    "SeedSpec",
    "make_rng",
    "Dataset",
    "simulate",
    "Moments",
    "empirical_moments",
    "Check",
    "stat_check",
    "nuisance_at",
    "observed_nuisance_at",
    "orthogonality_check",
    "sp_estimate",
    "sp_estimator_variance_mc",
    "SPResult",
    "run_validation",
    "operator_checks",
    "random_field",
    "DEFAULT_DIRECTIONS",
]

SE_BAND = 4.0
SHARD = 1 << 17


@dataclass(frozen=True)
class SeedSpec:
    """Root seed plus stream id."""

    root: int
    stream: int = 0

    def child(self, k: int) -> "SeedSpec":
        return SeedSpec(self.root, self.stream * 1_000_003 + k + 1)


def make_rng(seed: SeedSpec) -> np.random.Generator:
    ss = np.random.SeedSequence(seed.root, spawn_key=(seed.stream,))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Dataset:
    """Simulated observations.

    ``level`` is the true covariate level (``X`` is available only where
    ``r == 1``); ``xi`` marks subcohort membership, drawn with probability
    ``pi(y, 0, v)`` for every subject and coupled so that ``r = delta | xi``
    whenever failures are always sampled.
    """

    y: np.ndarray
    delta: np.ndarray
    level: np.ndarray
    r: np.ndarray
    xi: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def observed_level(self) -> np.ndarray:
        return np.where(self.r == 1, self.level, -1)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("y", "delta", "level", "r", "xi")))


def _simulate_shard(model: FullDataModel, design: MissingnessDesign, n: int,
                    seed: SeedSpec) -> Dataset:
    rng = make_rng(seed)
    L = model.n_levels
    level = rng.choice(L, size=n, p=np.asarray(model.pmf))
    e_t = rng.standard_exponential(n)
    e_c = rng.standard_exponential(n)
    u_atoms = rng.random((n, max(1, max(len(c.atoms) for c in model.censoring))))
    u_r = rng.random(n)
    r_l = model.risk_scores()
    T = model.baseline.inverse_cumulative(e_t / r_l[level])
    C = np.full(n, np.inf)
    for l in range(L):
        sel = level == l
        cens = model.censoring[l]
        c = np.full(sel.sum(), np.inf) if cens.hazard is None else cens.hazard.inverse_cumulative(e_c[sel])
        done = np.zeros(sel.sum(), dtype=bool)
        ua = u_atoms[sel]
        for k, (t_a, p_a) in enumerate(cens.atoms):
            hit = ~done & (c > t_a) & (ua[:, k] < p_a)
            c = np.where(hit, t_a, c)
            done |= hit | (c <= t_a)
        C[sel] = c
    delta = (T <= C).astype(np.int8)
    y = np.minimum(T, C)
    pi_obs = np.empty(n)
    pi_sub = np.empty(n)
    for l, lv in enumerate(model.levels):
        sel = level == l
        pi_obs[sel] = design.pi(y[sel], delta[sel], lv.v)
        pi_sub[sel] = design.pi(y[sel], np.zeros(sel.sum(), dtype=int), lv.v)
    r = (u_r < pi_obs).astype(np.int8)
    xi = (u_r < pi_sub).astype(np.int8)
    return Dataset(y, delta, level.astype(np.int64), r, xi)


def simulate(model: FullDataModel, design: MissingnessDesign, n: int, seed: SeedSpec,
             threads: int = 1) -> Dataset:
    """Draw ``n`` i.i.d. observations; identical ``seed`` gives identical data."""
    if n <= 0:
        raise ModelError("sample size must be positive")
    sizes = [min(SHARD, n - k) for k in range(0, n, SHARD)]
    args = [(model, design, s, seed.child(i)) for i, s in enumerate(sizes)]
    if threads > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda a: _simulate_shard(*a), args))
    else:
        parts = [_simulate_shard(*a) for a in args]
    return Dataset.concat(parts)


# ---------------------------------------------------------------------------
# moments and checks


@dataclass
class Moments:
    n: int
    mean: np.ndarray
    cov: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov)


def empirical_moments(values) -> Moments:
    """Sample mean, covariance and standard errors of the mean and variances.

    The variance SE is ``sqrt((m4 - s^4) / n)`` with ``m4`` the fourth central
    moment.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ModelError("need at least two observations")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (n - 1)
    var = np.diag(cov)
    m4 = np.mean(c ** 4, axis=0)
    return Moments(n, mean, cov, np.sqrt(var / n), np.sqrt(np.maximum(m4 - var ** 2, 0) / n))


@dataclass
class Check:
    """One statistical or numerical check."""

    name: str
    null: float
    estimate: float
    se: float
    band: float
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def stat_check(name: str, null: float, estimate: float, se: float, band: float = SE_BAND) -> Check:
    """Pass iff ``|estimate - null| <= band * se``."""
    ok = bool(abs(estimate - null) <= band * se)
    return Check(name, float(null), float(estimate), float(se), float(band), ok)


# ---------------------------------------------------------------------------
# nuisance scores at observations


def _gauss_integral(fn, a: np.ndarray, b: np.ndarray, n_gauss: int = 8) -> np.ndarray:
    gx, gw = np.polynomial.legendre.leggauss(n_gauss)
    gx, gw = 0.5 * (gx + 1), 0.5 * gw
    span = np.maximum(b - a, 0.0)
    pts = a[:, None] + span[:, None] * gx[None, :]
    return np.sum(np.broadcast_to(fn(pts), pts.shape) * gw, axis=1) * span


def _hazard_integral(fn, hazard, y: np.ndarray) -> np.ndarray:
    """``int_0^y fn(t) rate(t) dt`` for a piecewise-constant hazard."""
    out = np.zeros_like(y)
    knots = list(hazard.knots) + [np.inf]
    for j, rate in enumerate(hazard.rates):
        if rate == 0:
            continue
        a = np.full_like(y, knots[j])
        b = np.minimum(y, knots[j + 1])
        out += rate * _gauss_integral(fn, a, b)
    return out


def nuisance_at(direction: NuisanceDirection, model: FullDataModel, y, delta, level) -> np.ndarray:
    """Full-data score of a nuisance direction at ``(y, delta, z_level)``."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta)
    level = np.asarray(level)
    if direction.kind == "h":
        c = np.asarray(direction.payload, dtype=float)
        return (c - np.sum(c * np.asarray(model.pmf)))[level]
    if direction.kind == "lambda":
        a = direction.payload
        comp = _hazard_integral(a, model.baseline, y) * model.risk_scores()[level]
        return delta * np.broadcast_to(a(y), y.shape) - comp
    bfun = direction.payload
    out = np.zeros_like(y)
    for l in range(model.n_levels):
        sel = level == l
        if not np.any(sel):
            continue
        ys = y[sel]
        cens = model.censoring[l]
        comp = np.zeros_like(ys)
        if cens.hazard is not None:
            comp += _hazard_integral(lambda t: bfun(t, l), cens.hazard, ys)
        for t_a, p_a in cens.atoms:
            comp += np.where(ys >= t_a, p_a * float(np.broadcast_to(bfun(np.array([t_a]), l), (1,))[0]), 0.0)
        out[sel] = (1 - delta[sel]) * np.broadcast_to(bfun(ys, l), ys.shape) - comp
    return out


def observed_nuisance_at(direction: NuisanceDirection, sol: EfficientScoreSolution,
                         data: Dataset) -> np.ndarray:
    """``R a(U0) + (1 - R) E[a | phase 1]`` at each observation."""
    model = sol.tables.model
    full = nuisance_at(direction, model, data.y, data.delta, data.level)
    if sol.design_tables.phase1 == "YDV":
        post = phase1_posterior(model, data.y, data.delta, data.level)
        all_lv = np.stack([nuisance_at(direction, model, data.y, data.delta,
                                       np.full(data.n, l)) for l in range(model.n_levels)], axis=1)
        cond = np.sum(post * all_lv, axis=1)
    else:
        f = cond_mean_phase1(nuisance_score(direction, sol.tables), sol.tables, "DV")
        table = np.stack([f.atom[:, 0] if sol.tables.n_atoms else f.cens[:, 0, 0], f.fail[:, 0, 0]])
        cond = table[data.delta, data.level]
    return np.where(data.r == 1, full, cond)


DEFAULT_DIRECTIONS = (
    NuisanceDirection("lambda", lambda t: np.ones_like(t), "a=1"),
    NuisanceDirection("lambda", lambda t: t, "a=t"),
    NuisanceDirection("lambda", lambda t: t ** 2, "a=t^2"),
    NuisanceDirection("lambdaG", lambda t, l: np.ones_like(t), "b=1"),
)


def _level_z(model: FullDataModel) -> np.ndarray:
    return model.covariates()[:, 0]


def default_directions(model: FullDataModel) -> list[NuisanceDirection]:
    """``a in {1, t, t^2}``, ``b in {1, t z}`` and ``c = z - E Z``."""
    z = _level_z(model)
    dirs = list(DEFAULT_DIRECTIONS)
    dirs.append(NuisanceDirection("lambdaG", lambda t, l: t * z[l], "b=tz"))
    dirs.append(NuisanceDirection("h", z, "c=z-EZ"))
    return dirs


def orthogonality_check(sol: EfficientScoreSolution, directions, data: Dataset,
                        band: float = SE_BAND, k: np.ndarray | None = None) -> list[Check]:
    """Sample covariance of ``k*`` with each observed nuisance score, with SE."""
    if k is None:
        k = efficient_score(sol, data.y, data.delta, data.level, data.r)[:, 0]
    out = []
    for d in directions:
        s = observed_nuisance_at(d, sol, data)
        prod = (k - k.mean()) * (s - s.mean())
        est = prod.sum() / (data.n - 1)
        se = prod.std(ddof=1) / math.sqrt(data.n)
        out.append(stat_check(f"orthogonality[{d.label or d.kind}]", 0.0, est, se, band))
    return out


# ---------------------------------------------------------------------------
# Self-Prentice estimator


def sp_estimate(data: Dataset, z_levels: np.ndarray, theta0: float = 0.0,
                xtol: float = 1e-10) -> float:
    """Root of the Self-Prentice pseudo-score with subcohort-only risk sets.

    Returns ``nan`` when no sign change is found.
    """
    z = z_levels[data.level]
    fail = data.delta == 1
    yf, zf = data.y[fail], z[fail]
    sub = data.xi == 1
    ys, ls = data.y[sub], data.level[sub]
    L = len(z_levels)
    order = np.argsort(ys)
    ys_sorted = ys[order]
    ls_sorted = ls[order]
    # at-risk counts per level at each failure time: #{subcohort: Y >= t}
    counts = np.zeros((len(yf), L))
    for l in range(L):
        yl = ys_sorted[ls_sorted == l]
        counts[:, l] = len(yl) - np.searchsorted(yl, yf, side="left")
    if np.any(counts.sum(axis=1) == 0):
        return float("nan")

    def score(th):
        w = counts * np.exp(th * z_levels)[None, :]
        return float(np.sum(zf - (w @ z_levels) / w.sum(axis=1)))

    lo, hi = theta0 - 1.0, theta0 + 1.0
    flo, fhi = score(lo), score(hi)
    k = 0
    while flo * fhi > 0 and k < 40:
        lo, hi = lo - (hi - lo), hi + (hi - lo)
        flo, fhi = score(lo), score(hi)
        k += 1
    if flo * fhi > 0:
        return float("nan")
    return brentq(score, lo, hi, xtol=xtol)


@dataclass
class SPResult:
    variance: float
    se: float
    n_used: int
    n_failed: int
    mean_bias: float


def sp_estimator_variance_mc(spec: CaseCohortSpec, n: int = 5000, m: int = 2000,
                             seed: SeedSpec = SeedSpec(20040601), threads: int = 1) -> SPResult:
    """Empirical variance of ``sqrt(n)(theta_SP - theta)`` over ``m`` cohorts."""
    model, design = case_cohort_model(spec)
    zl = _level_z(model)

    def one(i):
        data = _simulate_shard(model, design, n, seed.child(i))
        return sp_estimate(data, zl, spec.theta)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            est = np.array(list(ex.map(one, range(m))))
    else:
        est = np.array([one(i) for i in range(m)])
    ok = np.isfinite(est)
    x = math.sqrt(n) * (est[ok] - spec.theta)
    mom = empirical_moments(x)
    return SPResult(float(mom.var[0]), float(mom.se_var[0]), int(ok.sum()), int((~ok).sum()),
                    float(mom.mean[0]))


# ---------------------------------------------------------------------------
# validation suite


def _quadrature_prob_failure(tables, level=None) -> float:
    m = tables.m1 if level is None else tables.m1[level]
    return float(m.sum())


def run_validation(model: FullDataModel, design: MissingnessDesign, n: int, seed: SeedSpec,
                   grid_n: int = 400, band: float = SE_BAND, threads: int = 1,
                   route: str = "T") -> list[Check]:
    """Default Monte Carlo suite: data checks, k* moments and orthogonality."""
    sol = solve(model, design, grid_n, route)
    data = simulate(model, design, n, seed, threads)
    tables = sol.tables
    checks = []
    pd = _quadrature_prob_failure(tables)
    checks.append(stat_check("P(Delta=1)", pd, data.delta.mean(),
                             math.sqrt(pd * (1 - pd) / n), band))
    epi = float(np.sum(tables.m1 * sol.design_tables.pi1) + np.sum(tables.m0 * sol.design_tables.pi0)
                + np.sum(tables.ma * sol.design_tables.pia))
    checks.append(stat_check("P(R=1)", epi, data.r.mean(), math.sqrt(epi * (1 - epi) / n), band))
    checks.extend(_ks_checks(model, tables, data, band))
    k = efficient_score(sol, data.y, data.delta, data.level, data.r)[:, 0]
    mom = empirical_moments(k)
    checks.append(stat_check("mean(k*)", 0.0, mom.mean[0], mom.se_mean[0], band))
    checks.append(stat_check("var(k*)=I*", float(sol.I_star[0, 0]), mom.var[0], mom.se_var[0], band))
    checks.extend(orthogonality_check(sol, default_directions(model), data, band, k=k))
    return checks


def _ks_checks(model: FullDataModel, tables, data: Dataset, band: float) -> list[Check]:
    """Per-level sup distance between empirical and analytic failure subdistributions.

    The band uses the largest pointwise standard error ``0.5 / sqrt(n_l)``.
    """
    out = []
    for l in range(model.n_levels):
        sel = data.level == l
        nl = int(sel.sum())
        if nl == 0:
            continue
        yl = np.sort(data.y[sel & (data.delta == 1)])
        # analytic W1(t | z) at the sample points, by quadrature on the mesh
        cum = np.concatenate([[0.0], np.cumsum(tables.m1[l].sum(axis=1))]) / model.pmf[l]
        grid = tables.grid.boundaries
        F = np.interp(yl, grid, cum)
        emp_hi = np.arange(1, len(yl) + 1) / nl
        emp_lo = np.arange(0, len(yl)) / nl
        dist = float(max(np.max(np.abs(emp_hi - F), initial=0.0), np.max(np.abs(emp_lo - F), initial=0.0)))
        out.append(Check(f"KS[level {l}]", 0.0, dist, 0.5 / math.sqrt(nl), band,
                         bool(dist <= band * 0.5 / math.sqrt(nl))))
    return out


# ---------------------------------------------------------------------------
# deterministic operator identities


def random_field(tables, rng: np.random.Generator, centred: bool = False) -> ScoreField:
    """Standard normal values at every mesh point; optionally mean zero."""
    b = ScoreField(rng.standard_normal(tables.m1.shape), rng.standard_normal(tables.m0.shape),
                   rng.standard_normal(tables.ma.shape))
    if centred:
        b = b - float(tables.expect(b)) / tables.total_mass
    return b


def operator_checks(tables, dt, seed: SeedSpec, n_fields: int = 100,
                    tol: float = 1e-8) -> list[Check]:
    """Worst relative error of each operator identity over random inputs.

    A check passes iff its error is at most ``tol``.
    """
    rng = make_rng(seed)
    sup = tables.support
    errs = {k: 0.0 for k in ("R1D=I", "Pi1 idempotent", "adjoint", "isometry",
                             "decomposition", "m m^-1 = id")}
    for _ in range(n_fields):
        u = np.where(sup, rng.standard_normal(sup.shape), 0.0)
        b = random_field(tables, rng, centred=True)
        Du = apply_D(u, tables)
        scale_u = np.max(np.abs(u))
        errs["R1D=I"] = max(errs["R1D=I"], np.max(np.abs(apply_R1(Du, tables) - u)) / scale_u)
        p = apply_Pi1(u, tables)
        errs["Pi1 idempotent"] = max(errs["Pi1 idempotent"],
                                     np.max(np.abs(apply_Pi1(p, tables) - p)) / scale_u)
        lhs = tables.inner(Du, b)
        rhs = tables.l2_w1(u, apply_R1(b, tables))
        norm = math.sqrt(tables.inner(Du, Du) * tables.inner(b, b))
        errs["adjoint"] = max(errs["adjoint"], abs(lhs - rhs) / norm)
        iso = tables.l2_w1(u, u)
        errs["isometry"] = max(errs["isometry"], abs(tables.inner(Du, Du) - iso) / iso)
        # a generic element of the discrete score space
        c = rng.standard_normal(tables.n_levels)
        c -= np.sum(c * tables.pmf)
        s = (Du + apply_DG(rng.standard_normal(sup.shape), rng.standard_normal(tables.ma.shape),
                           tables) + ScoreField.from_level_values(tables, c))
        errs["decomposition"] = max(errs["decomposition"],
                                    verify_decomposition(s, tables) / s.max_abs(tables))
        back = apply_m(apply_m_inverse(b, tables, dt), tables, dt)
        errs["m m^-1 = id"] = max(errs["m m^-1 = id"], (back - b).max_abs(tables) / b.max_abs(tables))
    return [Check(f"operator[{k}]", 0.0, float(v), float(tol), 1.0, bool(v <= tol))
            for k, v in errs.items()]
