"""Efficient-score equation, its solution and the information bound.

Two algebraically equivalent discrete systems are provided:

* route ``'T'``: ``(I + T) u = Pi1 Z`` with ``T = Pi1 R1 H``;
* route ``'K'``: ``u - K u + (pi / E[pi | cell]) E[K u | cell]
  = pi (Z - E[Z | Y, R Delta = 1])``.

Both are solved by dense LU with one step of iterative refinement on the
cells carrying failure mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .model_core import (
    DesignTables,
    FullDataModel,
    MissingnessDesign,
    ModelError,
    ObservedTables,
    ScoreField,
    build_observed_tables,
    cond_mean_phase1,
    design_tables,
    make_grid,
)
from .operators import (
    _trail,
    apply_D,
    apply_K,
    apply_Pi1,
    apply_T,
    assemble_K,
    assemble_T,
    support_mask,
)

__all__ = [
    "NumericError",
    "DesignVariant",
    "LinearSystem",
    "EfficientScoreSolution",
    "BoundResult",
    "assemble_system",
    "solve_ustar",
    "solve",
    "information_bound",
    "fulldata_information",
    "f_star",
    "phase1_posterior",
    "score_parts",
    "efficient_score",
    "compute_bound",
]

COND_CEILING = 1e12
ROUTES = ("T", "K")


class NumericError(RuntimeError):
    """Singular or ill-conditioned system, or a residual above tolerance."""


@dataclass(frozen=True)
class DesignVariant:
    """What phase 1 observes and which covariate the coefficient multiplies."""

    phase1: str
    scope: str

    @property
    def tag(self) -> str:
        y = "Y-observed" if self.phase1 == "YDV" else "Y-missing"
        return f"{y}/{self.scope.upper()}-coefficient"

    @classmethod
    def of(cls, model: FullDataModel, design: MissingnessDesign) -> "DesignVariant":
        return cls(design.phase1, model.coefficient_scope)


@dataclass
class LinearSystem:
    """Square system on the stacked ``(level, cell)`` index."""

    matrix: np.ndarray
    rhs: np.ndarray          # (L*N, d)
    support: np.ndarray      # (L*N,) bool
    route: str
    shape: tuple[int, int, int]

    @property
    def n_unknowns(self) -> int:
        return int(self.support.sum())


@dataclass
class EfficientScoreSolution:
    """Solved ``u*`` with diagnostics; ``I_star`` is filled by :func:`information_bound`."""

    u_star: np.ndarray            # (L, N, d)
    tables: ObservedTables
    design_tables: DesignTables
    variant: DesignVariant
    route: str
    residual: float
    condition: float
    centering: float
    f_star: np.ndarray | None = None   # (N, d)
    I_star: np.ndarray | None = None
    I_full: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.u_star.shape[2]

    @property
    def n_cells(self) -> int:
        return self.tables.n_cells


@dataclass
class BoundResult:
    """Grid-refined bound with the convergence trail."""

    solution: EfficientScoreSolution
    I_star: np.ndarray
    I_full: np.ndarray
    converged: bool
    trail: list = field(default_factory=list)

    @property
    def are(self) -> np.ndarray:
        """``I* / I_full`` (elementwise ratio of the diagonals for vector theta)."""
        return np.diag(self.I_star) / np.diag(self.I_full)


# ---------------------------------------------------------------------------
# assembly


def _covariate_field(tables: ObservedTables) -> np.ndarray:
    """Regression covariate as a grid function ``(L, N, d)``."""
    Z = tables.covariates
    return np.broadcast_to(Z[:, None, :], (tables.n_levels, tables.n_cells, Z.shape[1])).copy()


def _cell_avg(x: np.ndarray, tables: ObservedTables) -> np.ndarray:
    """``E[x | Y in cell, Delta = 1]`` for a grid function (returns ``(N, ...)``)."""
    G1 = _trail(tables.G1, x.ndim)
    tot = G1.sum(axis=0)
    num = (G1 * x).sum(axis=0)
    return np.divide(num, tot, out=np.zeros(num.shape), where=tot > 0)


def rhs_T(tables: ObservedTables) -> np.ndarray:
    return apply_Pi1(_covariate_field(tables), tables)


def rhs_K(tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """``pi(Y,1,V) (Z - E[Z | Y, R Delta = 1])`` with cell conditioning."""
    Z = _covariate_field(tables)
    pc = dt.pi_cell[:, :, None]
    ez = _cell_avg(pc * Z, tables) / _cell_avg(pc, tables)
    out = pc * (Z - ez[None])
    return np.where(support_mask(tables)[:, :, None], out, 0.0)


def assemble_system(tables: ObservedTables, dt: DesignTables, route: str = "T") -> LinearSystem:
    """Assemble the route-``T`` or route-``K`` system.

    Raises
    ------
    ModelError
        Unknown route, or a design whose ``pi(y, 1, v)`` varies inside a cell.
    """
    if route not in ROUTES:
        raise ModelError(f"route must be one of {ROUTES}")
    L, N = tables.n_levels, tables.n_cells
    n = L * N
    sup = support_mask(tables).reshape(-1)
    if route == "T":
        A = np.eye(n) + assemble_T(tables, dt)
        b = rhs_T(tables)
    else:
        K = assemble_K(tables, dt)
        G1 = tables.G1
        tot = G1.sum(axis=0)
        w = np.divide(G1, tot, out=np.zeros_like(G1), where=tot > 0)
        Kr = K.reshape(L, N, n)
        EK = np.einsum("ln,lnk->nk", w, Kr)                    # E[Ku | cell]
        epi = (w * dt.pi_cell).sum(axis=0)
        scale = np.divide(dt.pi_cell, epi[None], out=np.zeros_like(dt.pi_cell), where=epi > 0)
        A = np.eye(n) - K + (scale[:, :, None] * EK[None]).reshape(n, n)
        b = rhs_K(tables, dt)
    return LinearSystem(A, b.reshape(n, -1), sup, route, (L, N, b.shape[2]))


# ---------------------------------------------------------------------------
# solve


_gecon = lapack.get_lapack_funcs("gecon", dtype=np.float64)


def _solve_dense(A: np.ndarray, b: np.ndarray, ceiling: float):
    anorm = np.linalg.norm(A, 1)
    lu, piv = linalg.lu_factor(A, check_finite=True)
    if np.any(np.diag(lu) == 0):
        raise NumericError("singular system matrix")
    rcond, info = _gecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if not cond < ceiling:
        raise NumericError(f"condition estimate {cond:.3g} exceeds ceiling {ceiling:.3g}")
    x = linalg.lu_solve((lu, piv), b)
    r = b - A @ x
    x = x + linalg.lu_solve((lu, piv), r)
    return x, cond


def solve_ustar(system: LinearSystem, tables: ObservedTables, dt: DesignTables,
                cond_ceiling: float = COND_CEILING, tol: float = 1e-8) -> EfficientScoreSolution:
    """Solve for ``u*`` on the support and check residual and centering.

    Raises
    ------
    NumericError
        Condition estimate above ``cond_ceiling`` or residual above ``tol``.
    """
    L, N, d = system.shape
    s = system.support
    A = system.matrix[np.ix_(s, s)]
    x, cond = _solve_dense(A, system.rhs[s], cond_ceiling)
    u = np.zeros((L * N, d))
    u[s] = x
    u = u.reshape(L, N, d)
    # residual of the T-form equation, evaluated matrix-free
    res = u + apply_T(u, tables, dt) - rhs_T(tables)
    residual = float(np.max(np.abs(res))) if res.size else 0.0
    centering = float(np.max(np.abs(_cell_avg(u, tables))))
    if residual > tol:
        raise NumericError(f"residual {residual:.3g} above tolerance {tol:.3g}")
    variant = DesignVariant(dt.phase1, tables.model.coefficient_scope)
    sol = EfficientScoreSolution(u, tables, dt, variant, system.route, residual, cond, centering)
    sol.f_star = f_star(u, tables, dt)
    return sol


def f_star(u: np.ndarray, tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """Centering function ``-(E[Ku | Y] + E[pi Pi1 Z | Y]) / E[pi | Y]`` per cell."""
    Ku = apply_K(u, tables, dt)
    pc = dt.pi_cell[:, :, None]
    num = _cell_avg(Ku, tables) + _cell_avg(pc * rhs_T(tables), tables)
    return -num / _cell_avg(pc, tables)


def solve(model: FullDataModel, design: MissingnessDesign, n: int = 400, route: str = "T",
          n_gauss: int = 4, cond_ceiling: float = COND_CEILING) -> EfficientScoreSolution:
    """Build tables on an ``n``-cell grid, solve, and attach ``I*`` and ``I_full``."""
    grid = make_grid(model, n, design)
    tables = build_observed_tables(model, grid, n_gauss)
    dt = design_tables(design, tables)
    sol = solve_ustar(assemble_system(tables, dt, route), tables, dt, cond_ceiling)
    information_bound(sol)
    sol.I_full = fulldata_information(tables)
    return sol


# ---------------------------------------------------------------------------
# information


def _weighted_inner(tables: ObservedTables, a: ScoreField, b: ScoreField, w: ScoreField) -> np.ndarray:
    return (np.einsum("lng,lng,lngi,lngj->ij", tables.m1, w.fail, a.fail, b.fail)
            + np.einsum("lng,lng,lngi,lngj->ij", tables.m0, w.cens, a.cens, b.cens)
            + np.einsum("la,la,lai,laj->ij", tables.ma, w.atom, a.atom, b.atom))


def _branches(u: np.ndarray, tables: ObservedTables, dt: DesignTables):
    """``(k | R=1, k | R=0)`` as score fields."""
    zeta = apply_D(u, tables)
    e = cond_mean_phase1(zeta, tables, dt.phase1)
    pi, odds = dt.as_field(), dt.odds_field()
    k1 = ScoreField(zeta.fail / pi.fail[..., None] - odds.fail[..., None] * e.fail,
                    zeta.cens / pi.cens[..., None] - odds.cens[..., None] * e.cens,
                    zeta.atom / pi.atom[..., None] - odds.atom[..., None] * e.atom)
    return k1, e


def information_bound(sol: EfficientScoreSolution) -> np.ndarray:
    """``I* = E[pi (zeta/pi - ((1-pi)/pi) e)^2 + (1 - pi) e^2]`` by quadrature."""
    tables, dt = sol.tables, sol.design_tables
    k1, e = _branches(sol.u_star, tables, dt)
    pi = dt.as_field()
    I = _weighted_inner(tables, k1, k1, pi) + _weighted_inner(tables, e, e, 1 - pi)
    sol.I_star = 0.5 * (I + I.T)
    return sol.I_star


def fulldata_information(tables: ObservedTables, exact: bool = False) -> np.ndarray:
    """``I_full = E[Delta (Z - E[Z | Y, Delta = 1])^{x2}]``.

    With ``exact=False`` the conditional mean is taken given the grid cell of
    ``Y``, which is the information of the discretised full-data model and
    equals ``I*`` when ``pi = 1``.  With ``exact=True`` it is taken given ``Y``
    itself at every quadrature point.
    """
    Z = tables.covariates
    if exact:
        m = tables.m1
        tot = m.sum(axis=0)
        ez = np.einsum("lng,ld->ngd", m, Z) / tot[..., None]
        c = Z[:, None, None, :] - ez[None]
        return np.einsum("lng,lngi,lngj->ij", m, c, c)
    c = apply_Pi1(_covariate_field(tables), tables)
    return np.einsum("ln,lni,lnj->ij", tables.G1, c, c)


# ---------------------------------------------------------------------------
# pointwise evaluation at observations


def _level_densities(model: FullDataModel, y: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Joint density/mass of ``(y, delta, z_l)`` for every level, shape ``(n, L)``."""
    out = np.zeros((len(y), model.n_levels))
    for l in range(model.n_levels):
        h = model.pmf[l]
        f1 = model.failure_density(y, l) * h
        at, am = model.censoring_atoms(l)
        f0 = model.censoring_density(y, l) * h
        if len(at):
            k = np.searchsorted(at, y)
            kk = np.clip(k, 0, len(at) - 1)
            hit = at[kk] == y
            # an atom dominates any density at the same time
            f0 = np.where(hit, am[kk] * h, f0)
        out[:, l] = np.where(delta == 1, f1, f0)
    return out


def phase1_posterior(model: FullDataModel, y, delta, level) -> np.ndarray:
    """``P(Z = z_l' | Y = y, Delta = delta, V = v(level))``, shape ``(n, L)``."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=int)
    level = np.asarray(level, dtype=int)
    groups, _ = model.v_groups()
    dens = _level_densities(model, y, delta)
    dens = dens * (groups[None, :] == groups[level][:, None])
    tot = dens.sum(axis=1, keepdims=True)
    return np.divide(dens, tot, out=np.zeros_like(dens), where=tot > 0)


def _zeta_all_levels(u: np.ndarray, tables: ObservedTables, y: np.ndarray, delta: np.ndarray):
    """``Du(y, delta, z_l)`` for each observation and every level, ``(n, L, d)``."""
    model = tables.model
    grid = tables.grid
    cell = grid.cell_of(y)
    left = grid.boundaries[cell]
    within = model.baseline.cumulative(y) - model.baseline.cumulative(left)
    cum = np.cumsum(u * tables.dlam[None, :, None], axis=1) - u * tables.dlam[None, :, None]
    uc = u[:, cell, :]                                 # (L, n, d)
    comp = tables.risk[:, None, None] * (cum[:, cell, :] + uc * within[None, :, None])
    z = delta[None, :, None] * uc - comp
    return np.transpose(z, (1, 0, 2))


def score_parts(sol: EfficientScoreSolution, y, delta, level):
    """``zeta = Du*`` at the observation, ``e = E[Du* | phase 1]`` and ``pi``."""
    tables, dt = sol.tables, sol.design_tables
    model = tables.model
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=int)
    level = np.asarray(level, dtype=int)
    if np.any(y <= 0) or np.any(y > model.tau) or np.any((delta != 0) & (delta != 1)):
        raise ModelError("observation outside the model support")
    zall = _zeta_all_levels(sol.u_star, tables, y, delta)
    zeta = zall[np.arange(len(y)), level]
    if dt.phase1 == "YDV":
        post = phase1_posterior(model, y, delta, level)
        e = np.einsum("nl,nld->nd", post, zall)
    else:
        ef = cond_mean_phase1(apply_D(sol.u_star, tables), tables, "DV")
        table = np.zeros((2, model.n_levels, sol.dim))
        table[1] = ef.fail[:, 0, 0]
        table[0] = ef.atom[:, 0] if tables.n_atoms else ef.cens[:, 0, 0]
        e = table[delta, level]
    design = dt.design
    pi = np.empty(len(y))
    for l, lv in enumerate(model.levels):
        sel = level == l
        if np.any(sel):
            pi[sel] = design.pi(y[sel], delta[sel], lv.v)
    return zeta, e, pi


def efficient_score(sol: EfficientScoreSolution, y, delta, level, r) -> np.ndarray:
    """``k* = (R/pi) Du* - ((R - pi)/pi) E[Du* | phase 1]`` at observations.

    ``level`` must hold the true covariate level; it is only used through
    ``V`` when ``r = 0``.
    """
    zeta, e, pi = score_parts(sol, y, delta, level)
    r = np.asarray(r, dtype=float)[:, None]
    pi = pi[:, None]
    return r / pi * zeta - (r - pi) / pi * e


# ---------------------------------------------------------------------------
# refinement driver


def compute_bound(model: FullDataModel, design: MissingnessDesign, n: int = 400,
                  route: str = "T", refine: bool = True, rtol: float = 1e-4,
                  max_nodes: int = 6400, max_unknowns: int = 12000, n_gauss: int = 4,
                  cond_ceiling: float = COND_CEILING) -> BoundResult:
    """Solve on a grid of ``n`` cells, doubling until ``I*`` settles.

    Refinement stops when the relative change of ``I*`` (max over the
    diagonal) drops below ``rtol``, or when the next grid would exceed
    ``max_nodes`` cells or ``max_unknowns`` unknowns; ``converged`` reports
    which happened.
    """
    trail = []
    sol = solve(model, design, n, route, n_gauss, cond_ceiling)
    trail.append((sol.n_cells, np.diag(sol.I_star).tolist()))
    converged = False
    while refine:
        n2 = 2 * n
        if n2 > max_nodes or model.n_levels * n2 > max_unknowns:
            break
        new = solve(model, design, n2, route, n_gauss, cond_ceiling)
        trail.append((new.n_cells, np.diag(new.I_star).tolist()))
        old_d, new_d = np.diag(sol.I_star), np.diag(new.I_star)
        change = float(np.max(np.abs(new_d - old_d) / np.abs(new_d)))
        sol, n = new, n2
        if change < rtol:
            converged = True
            break
    return BoundResult(sol, sol.I_star, sol.I_full, converged, trail)
