"""Complete-data Cox model, two-phase missingness design and grid tables.

Everything downstream works on a :class:`TimeGrid` of cells ``(t[i-1], t[i]]``
(with ``t[-1] = 0``).  Each cell carries a Gauss-Legendre sub-rule, and the
observed-data law of ``(Y, Delta, Z)`` is tabulated on those points together
with the censoring atoms.  Functions of ``(y, delta, z)`` are stored on the
same points (:class:`ScoreField`), so every expectation is a finite sum that
reproduces the exact integral to quadrature precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "SupportError",
    "PiecewiseHazard",
    "CovariateLevel",
    "CensoringSpec",
    "FullDataModel",
    "MissingnessDesign",
    "TimeGrid",
    "make_grid",
    "ScoreField",
    "ObservedTables",
    "DesignTables",
    "build_observed_tables",
    "design_tables",
    "cond_mean_given_failure",
    "cond_mean_future",
    "cond_mean_phase1",
]

PHASE1_SCOPES = ("YDV", "DV")
COEFFICIENT_SCOPES = ("z", "x")
DEFAULT_SIGMA = 1e-6
_TIME_EPS = 1e-12


class ModelError(ValueError):
    """Invalid model, design or grid specification."""


class SupportError(ValueError):
    """A quantity is requested where the law puts no mass."""


# ---------------------------------------------------------------------------
# hazards


@dataclass(frozen=True)
class PiecewiseHazard:
    """Piecewise-constant hazard rate.

    ``rates[j]`` applies on ``[knots[j], knots[j + 1])``; the last rate extends
    to infinity.  ``knots[0]`` must be 0.
    """

    knots: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "rates", rates)
        if len(knots) == 0 or len(knots) != len(rates):
            raise ModelError("hazard needs one rate per knot")
        if knots[0] != 0.0:
            raise ModelError("first hazard knot must be 0")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ModelError("hazard knots must be strictly increasing")
        if any(not math.isfinite(r) or r < 0 for r in rates):
            raise ModelError("hazard rates must be finite and nonnegative")

    @classmethod
    def constant(cls, rate: float) -> "PiecewiseHazard":
        return cls((0.0,), (rate,))

    def _segment(self, t, left: bool):
        k = np.asarray(self.knots)
        side = "left" if left else "right"
        return np.clip(np.searchsorted(k, t, side=side) - 1, 0, len(k) - 1)

    def rate(self, t, left: bool = False):
        """Hazard at ``t``; ``left=True`` gives the left limit at a knot."""
        t = np.asarray(t, dtype=float)
        return np.asarray(self.rates)[self._segment(t, left)]

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        k = np.asarray(self.knots)
        r = np.asarray(self.rates)
        base = np.concatenate([[0.0], np.cumsum(np.diff(k) * r[:-1])])
        j = self._segment(t, left=False)
        return base[j] + r[j] * (t - k[j])

    def inverse_cumulative(self, h):
        """Smallest ``t`` with ``cumulative(t) >= h``; ``inf`` if never reached."""
        h = np.asarray(h, dtype=float)
        k = np.asarray(self.knots)
        r = np.asarray(self.rates)
        base = np.concatenate([[0.0], np.cumsum(np.diff(k) * r[:-1])])
        j = np.clip(np.searchsorted(base, h, side="right") - 1, 0, len(k) - 1)
        # skip zero-rate segments that end exactly at the target level
        out = np.full(h.shape, np.inf)
        pos = r[j] > 0
        out[pos] = k[j][pos] + (h[pos] - base[j][pos]) / r[j][pos]
        return out

    def breakpoints(self) -> tuple[float, ...]:
        return self.knots[1:]


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class CovariateLevel:
    """One support point ``z = (x, v)`` of the covariate distribution."""

    x: tuple[float, ...]
    v: tuple[float, ...] = ()
    index: int = 0

    def covariate(self, scope: str) -> np.ndarray:
        if scope == "x":
            return np.asarray(self.x, dtype=float)
        return np.asarray(self.x + self.v, dtype=float)


@dataclass(frozen=True)
class CensoringSpec:
    """Censoring law for one covariate level.

    ``atoms`` lists ``(time, conditional_mass)`` pairs where the conditional
    mass is ``P(C = c | C >= c)``.  An atom of conditional mass 1 ends follow-up.
    ``hazard`` is an optional absolutely continuous censoring hazard.
    """

    atoms: tuple[tuple[float, float], ...]
    hazard: PiecewiseHazard | None = None

    def __post_init__(self):
        atoms = tuple(sorted((float(t), float(p)) for t, p in self.atoms))
        object.__setattr__(self, "atoms", atoms)
        for t, p in atoms:
            if not (t > 0 and 0 < p <= 1):
                raise ModelError(f"bad censoring atom ({t}, {p})")
        if len({t for t, _ in atoms}) != len(atoms):
            raise ModelError("duplicate censoring atom times")

    @classmethod
    def administrative(cls, tau: float) -> "CensoringSpec":
        return cls(((tau, 1.0),))

    def _atom_arrays(self):
        if not self.atoms:
            return np.zeros(0), np.zeros(0)
        t, p = zip(*self.atoms)
        return np.asarray(t), np.asarray(p)

    def cum_hazard(self, t):
        t = np.asarray(t, dtype=float)
        if self.hazard is None:
            return np.zeros_like(t)
        return self.hazard.cumulative(t)

    def rate(self, t, left: bool = False):
        t = np.asarray(t, dtype=float)
        if self.hazard is None:
            return np.zeros_like(t)
        return self.hazard.rate(t, left=left)

    def surv_ge(self, t):
        """``P(C >= t)``."""
        t = np.asarray(t, dtype=float)
        at, ap = self._atom_arrays()
        out = np.exp(-self.cum_hazard(t))
        for c, p in zip(at, ap):
            out = np.where(t > c, out * (1.0 - p), out)
        return out

    def surv_gt(self, t):
        """``P(C > t)``."""
        t = np.asarray(t, dtype=float)
        at, ap = self._atom_arrays()
        out = np.exp(-self.cum_hazard(t))
        for c, p in zip(at, ap):
            out = np.where(t >= c, out * (1.0 - p), out)
        return out


@dataclass(frozen=True)
class FullDataModel:
    """Complete-data law of ``(Y, Delta, X, V)`` under a Cox model.

    Parameters
    ----------
    theta : sequence of float
        Regression coefficient, one entry per modelled covariate component.
    levels : sequence of CovariateLevel
        Finite support of ``Z = (X, V)``.
    pmf : sequence of float
        ``h(z)`` for each level.
    baseline : PiecewiseHazard
        Baseline failure hazard ``lambda(t)``.
    censoring : sequence of CensoringSpec
        Censoring law per level (``T`` and ``C`` independent given ``Z``).
    tau : float
        End of study; every level must carry a censoring atom of conditional
        mass 1 at ``tau``.
    coefficient_scope : {'z', 'x'}
        Whether ``theta`` multiplies the full ``z = (x, v)`` or only ``x``.
    """

    theta: tuple[float, ...]
    levels: tuple[CovariateLevel, ...]
    pmf: tuple[float, ...]
    baseline: PiecewiseHazard
    censoring: tuple[CensoringSpec, ...]
    tau: float
    coefficient_scope: str = "z"

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        levels = tuple(
            CovariateLevel(tuple(map(float, lv.x)), tuple(map(float, lv.v)), i)
            for i, lv in enumerate(self.levels)
        )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "pmf", tuple(float(p) for p in self.pmf))
        object.__setattr__(self, "censoring", tuple(self.censoring))
        object.__setattr__(self, "tau", float(self.tau))
        self.validate()

    def validate(self):
        if self.coefficient_scope not in COEFFICIENT_SCOPES:
            raise ModelError(f"coefficient_scope must be one of {COEFFICIENT_SCOPES}")
        L = len(self.levels)
        if L == 0 or len(self.pmf) != L or len(self.censoring) != L:
            raise ModelError("levels, pmf and censoring must have equal nonzero length")
        pmf = np.asarray(self.pmf)
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ModelError("covariate pmf must be nonnegative and sum to 1")
        pairs = [(lv.x, lv.v) for lv in self.levels]
        if len(set(pairs)) != L:
            raise ModelError("covariate levels must be distinct")
        dims = {len(lv.covariate(self.coefficient_scope)) for lv in self.levels}
        if dims != {len(self.theta)}:
            raise ModelError("theta dimension does not match the covariate dimension")
        if not self.tau > 0:
            raise ModelError("tau must be positive")
        for cens in self.censoring:
            if not cens.atoms or cens.atoms[-1] != (self.tau, 1.0):
                raise ModelError("each level needs a terminal censoring atom (tau, 1)")
            if any(t > self.tau for t, _ in cens.atoms):
                raise ModelError("censoring atom beyond tau")

    # -- covariate bookkeeping -------------------------------------------
    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return len(self.theta)

    def covariates(self) -> np.ndarray:
        """Regression covariate per level, shape ``(L, d)``."""
        return np.array([lv.covariate(self.coefficient_scope) for lv in self.levels])

    def risk_scores(self) -> np.ndarray:
        return np.exp(self.covariates() @ np.asarray(self.theta))

    def v_groups(self) -> tuple[np.ndarray, list[tuple[float, ...]]]:
        """Index of each level's phase-1 covariate value, and the values."""
        values: list[tuple[float, ...]] = []
        idx = []
        for lv in self.levels:
            if lv.v not in values:
                values.append(lv.v)
            idx.append(values.index(lv.v))
        return np.asarray(idx), values

    def atom_times(self) -> np.ndarray:
        return np.unique([t for c in self.censoring for t, _ in c.atoms])

    def breakpoints(self) -> np.ndarray:
        """Every time where a density may jump (hazard knots, atoms)."""
        pts = list(self.baseline.breakpoints())
        for c in self.censoring:
            pts += [t for t, _ in c.atoms]
            if c.hazard is not None:
                pts += list(c.hazard.breakpoints())
        pts = np.unique(np.asarray(pts, dtype=float))
        return pts[(pts > 0) & (pts <= self.tau)]

    # -- densities -------------------------------------------------------
    def surv_T(self, t, level: int):
        return np.exp(-self.risk_scores()[level] * self.baseline.cumulative(t))

    def failure_density(self, t, level: int, left: bool = True):
        """``w1(t | z)``: subdensity of an observed failure at ``t``."""
        r = self.risk_scores()[level]
        lam = self.baseline.rate(t, left=left)
        return r * lam * self.surv_T(t, level) * self.censoring[level].surv_ge(t)

    def censoring_density(self, t, level: int, left: bool = True):
        """Absolutely continuous part of ``w2(t | z)``."""
        c = self.censoring[level]
        return c.rate(t, left=left) * c.surv_ge(t) * self.surv_T(t, level)

    def censoring_atoms(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Atom times and unconditional masses ``P(Y = c, Delta = 0 | z)``."""
        c = self.censoring[level]
        at, ap = c._atom_arrays()
        return at, ap * c.surv_ge(at) * self.surv_T(at, level)

    def survivor(self, t, level: int):
        """``S(y | z) = P(Y > y | z) = (1 - F)(1 - G)``."""
        return self.surv_T(t, level) * self.censoring[level].surv_gt(t)


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True)
class MissingnessDesign:
    """Phase-2 sampling probabilities ``pi(y, delta, v)``.

    ``probs[b, delta, g]`` is the selection probability in time bucket ``b``
    (buckets are ``(breaks[b-1], breaks[b]]``) for phase-1 covariate group
    ``g``.  ``v_values`` names the groups; ``None`` means ``pi`` does not depend
    on ``V``.  ``phase1`` is ``'YDV'`` when ``(Y, Delta, V)`` is always observed
    and ``'DV'`` when only ``(Delta, V)`` is.
    """

    probs: np.ndarray
    breaks: tuple[float, ...] = ()
    v_values: tuple[tuple[float, ...], ...] | None = None
    phase1: str = "YDV"
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 3 or probs.shape[1] != 2:
            raise ModelError("probs must have shape (buckets, 2, groups)")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        if self.v_values is not None:
            vv = tuple(tuple(float(a) for a in v) for v in self.v_values)
            object.__setattr__(self, "v_values", vv)
        self.validate()

    def validate(self):
        if self.phase1 not in PHASE1_SCOPES:
            raise ModelError(f"phase1 must be one of {PHASE1_SCOPES}")
        if not self.sigma > 0:
            raise ModelError("sigma must be positive")
        if not np.all(np.isfinite(self.probs)):
            raise ModelError("selection probabilities must be finite")
        if np.any(self.probs < self.sigma) or np.any(self.probs > 1):
            raise ModelError(f"selection probabilities must lie in [sigma={self.sigma}, 1]")
        if self.probs.shape[0] != len(self.breaks) + 1:
            raise ModelError("need one bucket more than breaks")
        if any(b <= a for a, b in zip(self.breaks, self.breaks[1:])):
            raise ModelError("bucket breaks must increase")
        if self.phase1 == "DV" and self.probs.shape[0] != 1:
            raise ModelError("pi cannot depend on Y when Y is not observed at phase 1")
        n_groups = 1 if self.v_values is None else len(self.v_values)
        if self.probs.shape[2] != n_groups:
            raise ModelError("probs group axis does not match v_values")

    @classmethod
    def by_delta(cls, pi_failure: float, pi_censored: float, phase1: str = "YDV",
                 sigma: float = DEFAULT_SIGMA) -> "MissingnessDesign":
        return cls(np.array([[[pi_censored], [pi_failure]]]), phase1=phase1, sigma=sigma)

    @classmethod
    def full(cls, phase1: str = "YDV") -> "MissingnessDesign":
        return cls.by_delta(1.0, 1.0, phase1=phase1)

    @classmethod
    def stratified(cls, v_values, pi_censored, pi_failure=None, phase1: str = "YDV",
                   sigma: float = DEFAULT_SIGMA) -> "MissingnessDesign":
        """Sampling depending on ``(Delta, V)``; failures default to ``pi = 1``."""
        pc = np.asarray(pi_censored, dtype=float)
        pf = np.ones_like(pc) if pi_failure is None else np.asarray(pi_failure, dtype=float)
        return cls(np.stack([pc, pf])[None], v_values=tuple(v_values), phase1=phase1, sigma=sigma)

    def group_index(self, v: tuple[float, ...]) -> int:
        if self.v_values is None:
            return 0
        v = tuple(float(a) for a in v)
        try:
            return self.v_values.index(v)
        except ValueError:
            raise ModelError(f"design has no selection probability for v={v}") from None

    def pi(self, t, delta, v: tuple[float, ...] = ()):
        """Vectorised ``pi(t, delta, v)`` with right-closed buckets."""
        t = np.asarray(t, dtype=float)
        b = np.searchsorted(np.asarray(self.breaks), t, side="left")
        return self.probs[b, np.asarray(delta, dtype=int), self.group_index(v)]


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class TimeGrid:
    """Cells ``(nodes[i-1], nodes[i]]`` covering ``(0, tau]``.

    ``weights`` are the cell widths, i.e. the right-endpoint rule.
    """

    nodes: np.ndarray
    atom_times: np.ndarray
    tau: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        atoms = np.asarray(self.atom_times, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "atom_times", atoms)
        if nodes.ndim != 1 or len(nodes) == 0:
            raise ModelError("grid needs at least one node")
        if nodes[0] <= 0 or np.any(np.diff(nodes) <= 0):
            raise ModelError("grid nodes must be positive and strictly increasing")
        if nodes[-1] != self.tau:
            raise ModelError("last grid node must equal tau")
        if len(np.unique(atoms)) != len(atoms) or not np.all(np.isin(atoms, nodes)):
            raise ModelError("atom times must be distinct grid nodes")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], self.nodes])

    @property
    def weights(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def atom_cell(self) -> np.ndarray:
        """Index ``i`` with ``nodes[i] == atom``; the atom sits just after cell ``i``."""
        return np.searchsorted(self.nodes, self.atom_times)

    def cell_of(self, t) -> np.ndarray:
        return np.clip(np.searchsorted(self.nodes, t, side="left"), 0, self.n - 1)

    def refined(self) -> "TimeGrid":
        """Split every cell in two."""
        b = self.boundaries
        mids = 0.5 * (b[:-1] + b[1:])
        return TimeGrid(np.sort(np.concatenate([self.nodes, mids])), self.atom_times, self.tau)


def make_grid(model: FullDataModel, n: int = 400, design: MissingnessDesign | None = None,
              extra=()) -> TimeGrid:
    """Uniform grid of ``n`` cells on ``(0, tau]`` with every breakpoint inserted.

    Breakpoints of the hazards, the censoring atoms and the design's time
    buckets become nodes, so all densities are smooth inside each cell.
    """
    if n < 1:
        raise ModelError("grid needs at least one cell")
    tau = model.tau
    pts = list(model.breakpoints()) + [float(e) for e in extra]
    if design is not None:
        pts += [b for b in design.breaks if 0 < b < tau]
    uniform = tau * np.arange(1, n + 1) / n
    special = np.unique(np.asarray(pts, dtype=float))
    special = special[(special > 0) & (special <= tau)]
    # snap uniform nodes lying within rounding distance of a breakpoint
    keep = np.ones(n, dtype=bool)
    if len(special):
        d = np.min(np.abs(uniform[:, None] - special[None, :]), axis=1)
        keep = d > _TIME_EPS * tau
    nodes = np.unique(np.concatenate([uniform[keep], special]))
    nodes[-1] = tau
    return TimeGrid(nodes, model.atom_times(), tau)


# ---------------------------------------------------------------------------
# score fields on the quadrature mesh


@dataclass
class ScoreField:
    """Function ``b(y, delta, z)`` sampled on the observed-data support.

    ``fail[l, i, g]`` holds ``b(y, 1, z_l)`` at Gauss point ``g`` of cell ``i``;
    ``cens`` the same for ``delta = 0`` on the continuous censoring part and
    ``atom[l, k]`` the value at censoring atom ``k``.  A trailing axis may carry
    vector components.
    """

    fail: np.ndarray
    cens: np.ndarray
    atom: np.ndarray

    def _map(self, fn, other=None):
        if other is None:
            return ScoreField(fn(self.fail), fn(self.cens), fn(self.atom))
        if isinstance(other, ScoreField):
            return ScoreField(fn(self.fail, other.fail), fn(self.cens, other.cens),
                              fn(self.atom, other.atom))
        return ScoreField(fn(self.fail, other), fn(self.cens, other), fn(self.atom, other))

    def __add__(self, other):
        return self._map(np.add, other)

    def __sub__(self, other):
        return self._map(np.subtract, other)

    def __mul__(self, other):
        return self._map(np.multiply, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._map(np.divide, other)

    def __neg__(self):
        return self._map(np.negative)

    def __rsub__(self, other):
        return self._map(lambda a, b: np.subtract(b, a), other)

    def copy(self) -> "ScoreField":
        return self._map(np.array)

    def component(self, j: int) -> "ScoreField":
        return self._map(lambda a: a[..., j])

    def max_abs(self, tables: "ObservedTables | None" = None) -> float:
        """Sup norm, restricted to points carrying mass when ``tables`` is given."""
        parts = [self.fail, self.cens, self.atom]
        if tables is not None:
            masks = [tables.m1 > 0, tables.m0 > 0, tables.ma > 0]
            parts = [p[m] for p, m in zip(parts, masks)]
        return float(max((np.max(np.abs(p)) if p.size else 0.0) for p in parts))

    @classmethod
    def zeros(cls, tables: "ObservedTables") -> "ScoreField":
        L, N, G = tables.m1.shape
        return cls(np.zeros((L, N, G)), np.zeros((L, N, G)), np.zeros((L, tables.n_atoms)))

    @classmethod
    def from_callable(cls, tables: "ObservedTables", fn: Callable) -> "ScoreField":
        """Sample ``fn(t, delta, level)`` (vectorised in ``t``) on the mesh."""
        L = tables.n_levels
        fail = np.stack([np.broadcast_to(fn(tables.fine_t, 1, l), tables.fine_t.shape)
                         for l in range(L)]).astype(float)
        cens = np.stack([np.broadcast_to(fn(tables.fine_t, 0, l), tables.fine_t.shape)
                         for l in range(L)]).astype(float)
        at = tables.grid.atom_times
        atom = np.stack([np.broadcast_to(fn(at, 0, l), at.shape) for l in range(L)]).astype(float)
        return cls(fail, cens, atom.reshape(L, len(at)))

    @classmethod
    def from_level_values(cls, tables: "ObservedTables", values) -> "ScoreField":
        """Function of ``z`` only."""
        values = np.asarray(values, dtype=float)
        L, N, G = tables.m1.shape
        tail = values.shape[1:]
        fail = np.broadcast_to(values.reshape((L, 1, 1) + tail), (L, N, G) + tail).copy()
        atom = np.broadcast_to(values.reshape((L, 1) + tail), (L, tables.n_atoms) + tail).copy()
        return cls(fail, fail.copy(), atom)


def _masses_like(mass: np.ndarray, values: np.ndarray) -> np.ndarray:
    return mass.reshape(mass.shape + (1,) * (values.ndim - mass.ndim))


# ---------------------------------------------------------------------------
# observed tables


@dataclass
class ObservedTables:
    """Observed-data law of ``(Y, Delta, Z)`` tabulated on a grid.

    Masses are joint, i.e. they include ``h(z)``: ``m1`` (failures, per Gauss
    point), ``m0`` (continuous censoring), ``ma`` (censoring atoms).
    """

    model: FullDataModel
    grid: TimeGrid
    n_gauss: int
    fine_t: np.ndarray        # (N, G)
    fine_w: np.ndarray        # (N, G)
    risk: np.ndarray          # (L,)  exp(theta' z)
    covariates: np.ndarray    # (L, d)
    pmf: np.ndarray           # (L,)
    lam_cell: np.ndarray      # (N,)  baseline hazard on each cell
    dlam: np.ndarray          # (N,)  baseline cumulative hazard increment
    s_within: np.ndarray      # (N, G) baseline cumulative hazard from cell start
    lamG_cell: np.ndarray     # (L, N)
    dlamG: np.ndarray         # (L, N)
    sG_within: np.ndarray     # (L, N, G)
    atom_p: np.ndarray        # (L, A) conditional atom masses
    m1: np.ndarray            # (L, N, G)
    m0: np.ndarray            # (L, N, G)
    ma: np.ndarray            # (L, A)
    survivor: np.ndarray      # (L, N+1) S(y|z) at the cell boundaries
    groups: np.ndarray        # (L,) phase-1 covariate group
    group_values: list = field(default_factory=list)
    rho1: np.ndarray = None   # posterior level weights within group
    rho0: np.ndarray = None
    rhoa: np.ndarray = None

    @property
    def n_levels(self) -> int:
        return self.m1.shape[0]

    @property
    def n_cells(self) -> int:
        return self.m1.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.ma.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_values)

    @property
    def G1(self) -> np.ndarray:
        """W1 mass of each (level, cell): the Gram diagonal of ``L2(W1)``."""
        return self.m1.sum(axis=2)

    @property
    def support(self) -> np.ndarray:
        return self.G1 > 0

    @property
    def w1(self) -> np.ndarray:
        return self.G1

    @property
    def w2(self) -> np.ndarray:
        """Continuous censoring mass per (level, cell)."""
        return self.m0.sum(axis=2)

    @property
    def marginal_failure(self) -> np.ndarray:
        """``sum_z w1(cell | z) h(z)``."""
        return self.G1.sum(axis=0)

    @property
    def total_mass(self) -> float:
        return float(self.m1.sum() + self.m0.sum() + self.ma.sum())

    def expect(self, b: ScoreField) -> np.ndarray:
        """``E[b(Y, Delta, Z)]``."""
        return (np.tensordot(self.m1, b.fail, axes=3) + np.tensordot(self.m0, b.cens, axes=3)
                + np.tensordot(self.ma, b.atom, axes=2))

    def inner(self, a: ScoreField, b: ScoreField) -> np.ndarray:
        """``E[a b^T]`` (scalar for scalar fields)."""
        if a.fail.ndim == 4 or b.fail.ndim == 4:
            af = a.fail if a.fail.ndim == 4 else a.fail[..., None]
            bf = b.fail if b.fail.ndim == 4 else b.fail[..., None]
            ac = a.cens if a.cens.ndim == 4 else a.cens[..., None]
            bc = b.cens if b.cens.ndim == 4 else b.cens[..., None]
            aa = a.atom if a.atom.ndim == 3 else a.atom[..., None]
            ba = b.atom if b.atom.ndim == 3 else b.atom[..., None]
            return (np.einsum("lng,lngi,lngj->ij", self.m1, af, bf)
                    + np.einsum("lng,lngi,lngj->ij", self.m0, ac, bc)
                    + np.einsum("la,lai,laj->ij", self.ma, aa, ba))
        return float(np.sum(self.m1 * a.fail * b.fail) + np.sum(self.m0 * a.cens * b.cens)
                     + np.sum(self.ma * a.atom * b.atom))

    def level_mean(self, b: ScoreField) -> np.ndarray:
        """``E[b | Z = z]`` per level (zero for levels without mass)."""
        num = (np.einsum("lng,lng...->l...", self.m1, b.fail)
               + np.einsum("lng,lng...->l...", self.m0, b.cens)
               + np.einsum("la,la...->l...", self.ma, b.atom))
        den = self.pmf.reshape((-1,) + (1,) * (num.ndim - 1))
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    def l2_w1(self, u: np.ndarray, w: np.ndarray) -> float:
        """``<u, w>`` in ``L2(W1)`` for grid functions."""
        return float(np.sum(self.G1 * u * w))


def _gauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def build_observed_tables(model: FullDataModel, grid: TimeGrid, n_gauss: int = 4) -> ObservedTables:
    """Tabulate ``W1``, ``W2``, the survivor function and posterior weights.

    Raises
    ------
    ModelError
        If the grid misses a breakpoint or atom of the model, or ends before tau.
    """
    if grid.tau != model.tau:
        raise ModelError("grid tau differs from model tau")
    missing = np.setdiff1d(model.breakpoints(), grid.nodes)
    if len(missing):
        raise ModelError(f"grid is missing model breakpoints/atoms {missing.tolist()}")
    if not np.array_equal(np.sort(grid.atom_times), model.atom_times()):
        raise ModelError("grid atom_times do not list the model's censoring atoms")

    L = model.n_levels
    b = grid.boundaries
    left, width = b[:-1], np.diff(b)
    gx, gw = _gauss(n_gauss)
    fine_t = left[:, None] + width[:, None] * gx[None, :]
    fine_w = width[:, None] * gw[None, :]
    mid = left + 0.5 * width

    risk = model.risk_scores()
    pmf = np.asarray(model.pmf)
    lam_cell = model.baseline.rate(mid)
    dlam = np.diff(model.baseline.cumulative(b))
    s_within = lam_cell[:, None] * (fine_t - left[:, None])

    atoms = grid.atom_times
    A = len(atoms)
    lamG_cell = np.zeros((L, grid.n))
    dlamG = np.zeros((L, grid.n))
    sG_within = np.zeros((L, grid.n, n_gauss))
    atom_p = np.zeros((L, A))
    m1 = np.empty((L, grid.n, n_gauss))
    m0 = np.empty((L, grid.n, n_gauss))
    ma = np.zeros((L, A))
    survivor = np.empty((L, grid.n + 1))
    for l in range(L):
        cens = model.censoring[l]
        lamG_cell[l] = cens.rate(mid)
        dlamG[l] = np.diff(cens.cum_hazard(b))
        sG_within[l] = lamG_cell[l][:, None] * (fine_t - left[:, None])
        for t, p in cens.atoms:
            atom_p[l, np.searchsorted(atoms, t)] = p
        # densities from inside each cell: rates are those of the cell
        sT = model.surv_T(fine_t, l)
        sC = cens.surv_ge(fine_t)
        m1[l] = fine_w * risk[l] * lam_cell[:, None] * sT * sC * pmf[l]
        m0[l] = fine_w * lamG_cell[l][:, None] * sT * sC * pmf[l]
        at, amass = model.censoring_atoms(l)
        ma[l, np.searchsorted(atoms, at)] = amass * pmf[l]
        survivor[l] = model.survivor(b, l)

    groups, group_values = model.v_groups()
    tables = ObservedTables(
        model=model, grid=grid, n_gauss=n_gauss, fine_t=fine_t, fine_w=fine_w, risk=risk,
        covariates=model.covariates(), pmf=pmf, lam_cell=lam_cell, dlam=dlam,
        s_within=s_within, lamG_cell=lamG_cell, dlamG=dlamG, sG_within=sG_within,
        atom_p=atom_p, m1=m1, m0=m0, ma=ma, survivor=survivor, groups=groups,
        group_values=group_values,
    )
    tables.rho1 = _posterior(m1, groups)
    tables.rho0 = _posterior(m0, groups)
    tables.rhoa = _posterior(ma, groups)
    if abs(tables.total_mass - 1.0) > 1e-8:
        raise ModelError(f"grid does not cover the model support (mass {tables.total_mass})")
    return tables


def _posterior(mass: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """``P(level | point, group)``: mass normalised within each phase-1 group."""
    tot = np.zeros_like(mass)
    for g in np.unique(groups):
        sel = groups == g
        tot[sel] = mass[sel].sum(axis=0)
    return np.divide(mass, tot, out=np.zeros_like(mass), where=tot > 0)


# ---------------------------------------------------------------------------
# design on the mesh


@dataclass
class DesignTables:
    """Selection probabilities evaluated at every mesh point and level."""

    design: MissingnessDesign
    pi1: np.ndarray     # (L, N, G)
    pi0: np.ndarray     # (L, N, G)
    pia: np.ndarray     # (L, A)
    pi_cell: np.ndarray  # (L, N) pi(y, 1, v) on each cell

    @property
    def phase1(self) -> str:
        return self.design.phase1

    def as_field(self) -> ScoreField:
        return ScoreField(self.pi1, self.pi0, self.pia)

    def odds_field(self) -> ScoreField:
        """``(1 - pi) / pi``."""
        return ScoreField((1 - self.pi1) / self.pi1, (1 - self.pi0) / self.pi0,
                          (1 - self.pia) / self.pia)

    @property
    def is_full(self) -> bool:
        return bool(np.all(self.pi1 == 1) and np.all(self.pi0 == 1) and np.all(self.pia == 1))


def design_tables(design: MissingnessDesign, tables: ObservedTables) -> DesignTables:
    """Evaluate ``pi`` on the mesh.

    Raises
    ------
    ModelError
        If a bucket boundary is not a grid node (``pi`` must be constant on
        each cell) or the design lacks a level's ``v``.
    """
    design.validate()
    missing = [b for b in design.breaks if 0 < b < tables.grid.tau and b not in tables.grid.nodes]
    if missing:
        raise ModelError(f"design bucket boundaries {missing} are not grid nodes")
    model = tables.model
    t = tables.fine_t
    L = tables.n_levels
    pi1 = np.empty_like(tables.m1)
    pi0 = np.empty_like(tables.m0)
    pia = np.empty_like(tables.ma)
    cell_end = tables.grid.nodes
    pi_cell = np.empty((L, tables.n_cells))
    for l, lv in enumerate(model.levels):
        pi1[l] = design.pi(t, 1, lv.v)
        pi0[l] = design.pi(t, 0, lv.v)
        pia[l] = design.pi(tables.grid.atom_times, 0, lv.v)
        pi_cell[l] = design.pi(cell_end, 1, lv.v)
    return DesignTables(design, pi1, pi0, pia, pi_cell)


# ---------------------------------------------------------------------------
# conditional expectations


def _grid_function_values(g, tables: ObservedTables) -> np.ndarray:
    """Coerce ``g`` to per-(level, cell) values."""
    g = np.asarray(g, dtype=float)
    L, N = tables.n_levels, tables.n_cells
    if g.shape[:1] == (L,) and g.ndim == 1:
        return np.broadcast_to(g[:, None], (L, N))
    if g.shape[:2] == (L, N):
        return g
    if g.ndim == 2 and g.shape[0] == L and g.shape[1] != N:
        return np.broadcast_to(g[:, None, :], (L, N, g.shape[1]))
    raise ModelError(f"cannot interpret array of shape {g.shape} as a grid function")


def cond_mean_given_failure(g, tables: ObservedTables, at: str = "cells", strict: bool = False):
    """``E[g(Y, Z) | Y, Delta = 1]``.

    Parameters
    ----------
    g : array or callable
        Values per level ``(L,)``, per (level, cell) ``(L, N)``, or a callable
        ``g(t, level)``.
    at : {'cells', 'nodes'}
        ``'cells'`` conditions on the cell containing ``Y`` (the conditioning
        used by the discretised projection); ``'nodes'`` conditions on ``Y``
        equal to each grid node exactly, using the left-limit densities.
    strict : bool
        Raise :class:`SupportError` instead of returning NaN where the failure
        law puts no mass.
    """
    model = tables.model
    if at == "cells":
        if callable(g):
            vals = np.stack([g(tables.grid.nodes, l) for l in range(tables.n_levels)])
        else:
            vals = _grid_function_values(g, tables)
        w = tables.G1
    elif at == "nodes":
        t = tables.grid.nodes
        if callable(g):
            vals = np.stack([g(t, l) for l in range(tables.n_levels)])
        else:
            vals = _grid_function_values(g, tables)
        w = np.stack([model.failure_density(t, l) * model.pmf[l] for l in range(tables.n_levels)])
    else:
        raise ValueError("at must be 'cells' or 'nodes'")
    vals = np.asarray(vals, dtype=float)
    den = w.sum(axis=0)
    if strict and np.any(den <= 0):
        raise SupportError("conditioning on a failure time with zero failure density")
    wv = w.reshape(w.shape + (1,) * (vals.ndim - 2))
    num = (wv * vals).sum(axis=0)
    dv = den.reshape(den.shape + (1,) * (vals.ndim - 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(dv > 0, num / np.where(dv > 0, dv, 1.0), np.nan)


def _tail_sums(tables: ObservedTables, b: ScoreField) -> np.ndarray:
    """``E[b; Y > t_j | z]`` (joint, times h) at every cell boundary ``t_j``.

    Returns shape ``(L, N+1)`` (plus trailing component axes).
    """
    per_cell = (np.einsum("lng,lng...->ln...", tables.m1, b.fail)
                + np.einsum("lng,lng...->ln...", tables.m0, b.cens))
    atom_contrib = np.zeros_like(per_cell)
    cell = tables.grid.atom_cell
    wa = _masses_like(tables.ma, b.atom) * b.atom
    # an atom at node t_i counts for boundaries j < i+1, i.e. it sits with cell i
    np.add.at(atom_contrib, (slice(None), cell), wa)
    total = per_cell + atom_contrib
    rev = np.cumsum(total[:, ::-1], axis=1)[:, ::-1]
    zeros = np.zeros_like(total[:, :1])
    return np.concatenate([rev, zeros], axis=1)


def cond_mean_future(g, tables: ObservedTables, level: int | None = None, at=None):
    """``E[g(Y, Delta, Z) | Y > y, Z = z]``.

    ``g`` is a :class:`ScoreField` or a callable ``g(t, delta, level)``.  By
    default the mean is returned at the cell boundaries ``(0, t_1, ..., t_N)``
    with shape ``(L, N+1)`` (or ``(N+1,)`` for one ``level``).  With ``at``
    (requires a callable) it is evaluated at arbitrary times, integrating the
    partial cell with the same Gauss rule.  Where ``Y > y`` is empty the
    value is 0.

    Raises
    ------
    SupportError
        If ``S(y | z) = 0`` at an interior point.
    """
    b = g if isinstance(g, ScoreField) else ScoreField.from_callable(tables, g)
    tails = _tail_sums(tables, b)
    S = tables.survivor * tables.pmf[:, None]
    if at is None:
        num, den = tails, S
    else:
        if isinstance(g, ScoreField):
            raise ModelError("evaluation at arbitrary times needs a callable")
        num, den = _future_at(g, tables, np.atleast_1d(np.asarray(at, dtype=float)), tails)
    empty = den <= 0
    interior = empty.copy()
    if at is None:
        interior[:, -1] = False
    else:
        interior &= np.asarray(at)[None, :] < tables.grid.tau
    interior &= tables.pmf[:, None] > 0
    if np.any(interior):
        raise SupportError("survivor function vanishes before tau")
    den_b = den.reshape(den.shape + (1,) * (num.ndim - 2))
    out = np.where(den_b > 0, num / np.where(den_b > 0, den_b, 1.0), 0.0)
    return out if level is None else out[level]


def _future_at(fn, tables: ObservedTables, y: np.ndarray, tails: np.ndarray):
    """Numerator/denominator of the future mean at arbitrary times."""
    model = tables.model
    grid = tables.grid
    cell = grid.cell_of(y)
    right = grid.nodes[cell]
    gx, gw = _gauss(tables.n_gauss)
    L = tables.n_levels
    num = np.zeros((L, len(y)))
    den = np.zeros((L, len(y)))
    span = np.maximum(right - y, 0.0)
    pts = y[:, None] + span[:, None] * gx[None, :]
    wts = span[:, None] * gw[None, :]
    for l in range(L):
        h = model.pmf[l]
        f1 = model.failure_density(pts, l) * h
        f0 = model.censoring_density(pts, l) * h
        num[l] = np.sum(wts * (f1 * fn(pts, 1, l) + f0 * fn(pts, 0, l)), axis=1)
        # tail beyond the cell end, plus the atom sitting at the end when y < end
        at_end = np.zeros(grid.n)
        np.add.at(at_end, grid.atom_cell, tables.ma[l] * fn(grid.atom_times, 0, l))
        num[l] += tails[l, cell + 1] + np.where(right > y, at_end[cell], 0.0)
        den[l] = model.survivor(y, l) * h
    return num, den


def cond_mean_phase1(b: ScoreField, tables: ObservedTables, phase1: str = "YDV") -> ScoreField:
    """``E[b | phase-1 statistic]`` returned as a field on the same mesh.

    With ``phase1='YDV'`` the statistic is ``(Y, Delta, V)`` and the mean
    averages over ``X`` at each point.  With ``'DV'`` it is ``(Delta, V)`` and
    the mean averages over ``X`` and ``Y``.
    """
    groups = tables.groups
    if phase1 == "YDV":
        out = []
        for vals, rho in ((b.fail, tables.rho1), (b.cens, tables.rho0), (b.atom, tables.rhoa)):
            rw = _masses_like(rho, vals) * vals
            agg = np.zeros_like(vals)
            for g in np.unique(groups):
                sel = groups == g
                agg[sel] = rw[sel].sum(axis=0)
            out.append(agg)
        return ScoreField(*out)
    if phase1 != "DV":
        raise ModelError(f"unknown phase-1 scope {phase1!r}")
    fail = np.zeros_like(b.fail)
    cens = np.zeros_like(b.cens)
    atom = np.zeros_like(b.atom)
    for g in np.unique(groups):
        sel = groups == g
        m1 = _masses_like(tables.m1[sel], b.fail)
        m0 = _masses_like(tables.m0[sel], b.cens)
        ma = _masses_like(tables.ma[sel], b.atom)
        p1 = tables.m1[sel].sum()
        p0 = tables.m0[sel].sum() + tables.ma[sel].sum()
        e1 = (m1 * b.fail[sel]).sum(axis=(0, 1, 2)) / p1 if p1 > 0 else 0.0
        e0 = ((m0 * b.cens[sel]).sum(axis=(0, 1, 2)) + (ma * b.atom[sel]).sum(axis=(0, 1))) / p0 \
            if p0 > 0 else 0.0
        fail[sel] = e1
        cens[sel] = e0
        atom[sel] = e0
    return ScoreField(fail, cens, atom)


def phase1_probabilities(tables: ObservedTables) -> np.ndarray:
    """``P(Delta = delta, V in group g)`` as an array ``(2, n_groups)``."""
    out = np.zeros((2, tables.n_groups))
    for g in range(tables.n_groups):
        sel = tables.groups == g
        out[1, g] = tables.m1[sel].sum()
        out[0, g] = tables.m0[sel].sum() + tables.ma[sel].sum()
    return out


def level_arrays(values: Sequence[float], tables: ObservedTables) -> np.ndarray:
    """Broadcast per-level values to ``(L, N)``."""
    return np.broadcast_to(np.asarray(values, dtype=float)[:, None], (tables.n_levels, tables.n_cells))
