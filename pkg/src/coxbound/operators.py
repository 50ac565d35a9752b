"""Score operators of the Cox model on a grid.

Grid functions ``u`` are arrays of shape ``(L, N)`` (levels by cells), or
``(L, N, d)`` for vector-valued functions, and stand for functions that are
constant on each cell ``(t[i-1], t[i]]``.  Score fields are
:class:`~coxbound.model_core.ScoreField` objects.

The discretisation is a Galerkin scheme.  ``apply_D`` integrates piecewise
constant ``u`` against the counting-process martingale exactly; ``apply_R1``
is the adjoint of ``apply_D`` in ``L2(W1)`` (so ``R1 D = I`` and the isometry
hold to quadrature precision); ``apply_Pi1`` conditions on the cell that
contains ``Y``.  Every operator is available matrix-free and as an assembled
matrix, and the two agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model_core import (
    DesignTables,
    ModelError,
    ObservedTables,
    ScoreField,
    _gauss,
    cond_mean_phase1,
)

__all__ = [
    "apply_D",
    "apply_DG",
    "apply_R1",
    "apply_R2",
    "apply_Pi1",
    "apply_B",
    "apply_H",
    "apply_T",
    "apply_K",
    "K_terms",
    "apply_m",
    "apply_m_inverse",
    "cell_mean",
    "future_mean",
    "verify_decomposition",
    "NuisanceDirection",
    "nuisance_score",
    "observed_nuisance_score",
    "weighted_gram",
    "fail_projection",
    "assemble_R1H",
    "assemble_T",
    "assemble_K",
    "Pi1_matrix",
    "support_mask",
]


# ---------------------------------------------------------------------------
# helpers


def _as_grid(u, tables: ObservedTables) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[:2] != (tables.n_levels, tables.n_cells):
        raise ModelError(f"grid function must have shape (L, N, ...), got {u.shape}")
    return u


def _trail(a: np.ndarray, ndim: int) -> np.ndarray:
    """Append singleton axes so ``a`` broadcasts against an array of ``ndim``."""
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    den = _trail(den, num.ndim)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def _exclusive_cumsum(x: np.ndarray, axis: int = 1) -> np.ndarray:
    c = np.cumsum(x, axis=axis)
    return c - x


def support_mask(tables: ObservedTables) -> np.ndarray:
    """Boolean ``(L, N)`` mask of cells with positive ``W1`` mass."""
    return tables.G1 > 0


def _atoms_per_cell(tables: ObservedTables, values: np.ndarray) -> np.ndarray:
    """Sum atom-indexed values ``(L, A, ...)`` into the cell they close."""
    out = np.zeros((values.shape[0], tables.n_cells) + values.shape[2:])
    np.add.at(out, (slice(None), tables.grid.atom_cell), values)
    return out


def _tail_after(cont: np.ndarray, atom_at: np.ndarray) -> np.ndarray:
    """Mass strictly after the interior of each cell.

    ``cont[l, i]`` is the continuous mass of cell ``i``; ``atom_at[l, i]`` the
    atom mass sitting at node ``t[i]`` (which follows the interior of cell i).
    """
    rev_c = np.cumsum(cont[:, ::-1], axis=1)[:, ::-1]
    rev_a = np.cumsum(atom_at[:, ::-1], axis=1)[:, ::-1]
    after_c = np.concatenate([rev_c[:, 1:], np.zeros_like(rev_c[:, :1])], axis=1)
    return after_c + rev_a


# ---------------------------------------------------------------------------
# D, R1, Pi1, B


def apply_D(u, tables: ObservedTables) -> ScoreField:
    """``Du = Delta u(Y, Z) - exp(theta'Z) int_0^Y u(t, Z) dLambda(t)``."""
    u = _as_grid(u, tables)
    nd = u.ndim
    r = _trail(tables.risk, nd)
    cum = _exclusive_cumsum(u * _trail(tables.dlam[None, :], nd))
    comp = r[..., None] * (cum[:, :, None] + u[:, :, None] * _trail(tables.s_within[None], nd + 1))
    fail = u[:, :, None] - comp
    ca = tables.grid.atom_cell
    atom = -r * (cum[:, ca] + u[:, ca] * _trail(tables.dlam[ca][None, :], nd))
    return ScoreField(fail, -comp, atom)


def apply_R1(b: ScoreField, tables: ObservedTables) -> np.ndarray:
    """Galerkin ``R1 b``: the ``L2(W1)`` adjoint of :func:`apply_D`.

    Converges to ``b(y, 1, z) - E[b | Y > y, Z = z]`` under grid refinement.
    """
    nd = b.fail.ndim
    r = _trail(tables.risk, nd)
    s = _trail(tables.s_within[None], nd)
    m1 = _trail(tables.m1, nd)
    m0 = _trail(tables.m0, nd)
    loc = np.sum(m1 * (1.0 - r * s) * b.fail - m0 * r * s * b.cens, axis=2)
    cont = np.sum(m1 * b.fail + m0 * b.cens, axis=2)
    atom_at = _atoms_per_cell(tables, _trail(tables.ma, b.atom.ndim) * b.atom)
    kappa = _trail(tables.risk[:, None] * tables.dlam[None, :], loc.ndim)
    return _safe_div(loc - kappa * _tail_after(cont, atom_at), tables.G1)


def cell_mean(b: ScoreField, tables: ObservedTables) -> np.ndarray:
    """Average of ``b(y, 1, z)`` over each (level, cell) under ``W1``."""
    nd = b.fail.ndim
    return _safe_div(np.sum(_trail(tables.m1, nd) * b.fail, axis=2), tables.G1)


def future_mean(b: ScoreField, tables: ObservedTables) -> np.ndarray:
    """Galerkin counterpart of ``E[b(Y', Delta, Z) | Y' > Y, Z]``.

    Defined by ``R1 b = cell_mean(b) - future_mean(b)``.
    """
    return cell_mean(b, tables) - apply_R1(b, tables)


def apply_Pi1(s, tables: ObservedTables) -> np.ndarray:
    """``s - E[s | Y in cell, Delta = 1]``, an orthogonal projection in ``L2(W1)``."""
    s = _as_grid(s, tables)
    G1 = _trail(tables.G1, s.ndim)
    tot = G1.sum(axis=0)
    num = (G1 * s).sum(axis=0)
    mean = np.divide(num, tot, out=np.zeros(num.shape), where=tot > 0)
    return np.where(G1 > 0, s - mean[None], 0.0)


def apply_B(s, tables: ObservedTables) -> ScoreField:
    """``Bs = D Pi1 s``."""
    return apply_D(apply_Pi1(s, tables), tables)


# ---------------------------------------------------------------------------
# censoring martingale


def _atom_dg_support(tables: ObservedTables) -> np.ndarray:
    """Atoms that carry a censoring score: ``0 < p < 1`` and positive mass."""
    return (tables.atom_p < 1.0) & (tables.ma > 0)


def apply_DG(v, v_atom, tables: ObservedTables) -> ScoreField:
    """``int b(t, Z) dM_G(t)`` for ``b`` constant on cells plus atom values.

    ``v`` has shape ``(L, N)`` and ``v_atom`` shape ``(L, A)``.  Directions at
    atoms of conditional mass 1 give the zero score and are ignored.
    """
    v = _as_grid(v, tables)
    v_atom = np.where(tables.atom_p < 1.0, np.asarray(v_atom, dtype=float), 0.0)
    p = tables.atom_p
    ca = tables.grid.atom_cell
    cum_c = _exclusive_cumsum(v * tables.dlamG)
    atom_jump = _atoms_per_cell(tables, v_atom * p)          # jump at node t_i
    cum_a_before = _exclusive_cumsum(atom_jump)               # atoms at nodes before cell i
    comp = cum_c[:, :, None] + cum_a_before[:, :, None] + v[:, :, None] * tables.sG_within
    fail = -comp
    cens = v[:, :, None] - comp
    comp_atom = cum_c[:, ca] + v[:, ca] * tables.dlamG[:, ca] + cum_a_before[:, ca] + v_atom * p
    atom = v_atom - comp_atom
    return ScoreField(fail, cens, atom)


def apply_R2(b: ScoreField, tables: ObservedTables) -> tuple[np.ndarray, np.ndarray]:
    """Galerkin ``R2 b`` on the censoring support: cell values and atom values.

    Converges to ``b(y, 0, z) - E[b | Y > y, Z = z]``.  Atoms of conditional
    mass 1 carry no censoring score and get value 0.
    """
    sG = tables.sG_within
    cont = np.sum(tables.m1 * b.fail + tables.m0 * b.cens, axis=2)
    wa = tables.ma * b.atom
    atom_at = _atoms_per_cell(tables, wa)
    tail = _tail_after(cont, atom_at)
    loc = np.sum(tables.m0 * (1.0 - sG) * b.cens - tables.m1 * sG * b.fail, axis=2)
    W2 = tables.w2
    v = _safe_div(loc - tables.dlamG * tail, W2)

    # atom directions: +(1-p) at the atom, -p at everything after it
    ca = tables.grid.atom_cell
    after_c = np.concatenate([np.cumsum(cont[:, ::-1], axis=1)[:, ::-1][:, 1:],
                              np.zeros_like(cont[:, :1])], axis=1)
    order = np.argsort(tables.grid.atom_times)
    later_a = np.zeros_like(wa)
    rev = np.cumsum(wa[:, order[::-1]], axis=1)[:, ::-1]
    later_a[:, order] = rev - wa[:, order]
    p = tables.atom_p
    num = (1 - p) * wa - p * (after_c[:, ca] + later_a)
    den = (1 - p) * tables.ma
    ok = _atom_dg_support(tables)
    v_atom = np.divide(num, den, out=np.zeros_like(num), where=ok)
    return v, v_atom


def verify_decomposition(b: ScoreField, tables: ObservedTables) -> float:
    """Sup-norm residual of ``b - [D R1 b + D_G R2 b + E(b | Z)]``.

    ``b`` must have mean zero; mass-less points are ignored.
    """
    mean = float(np.sum(tables.expect(b)))
    if abs(mean) > 1e-8 * max(1.0, b.max_abs(tables)):
        raise ModelError(f"decomposition needs a mean-zero field (mean {mean:.3g})")
    u = apply_R1(b, tables)
    v, va = apply_R2(b, tables)
    rec = apply_D(u, tables) + apply_DG(v, va, tables) + ScoreField.from_level_values(
        tables, tables.level_mean(b))
    return (b - rec).max_abs(tables)


# ---------------------------------------------------------------------------
# missingness operators


def _check_design(dt: DesignTables, tables: ObservedTables):
    if dt.pi1.shape != tables.m1.shape or dt.pia.shape != tables.ma.shape:
        raise ModelError("design tables were built for a different grid")
    if np.any(dt.pi1 < dt.design.sigma) or np.any(dt.pi0 < dt.design.sigma):
        raise ModelError("selection probability below the floor sigma")


def apply_H(u, tables: ObservedTables, dt: DesignTables) -> ScoreField:
    """``((1 - pi)/pi) [Du - E(Du | phase 1)]``."""
    _check_design(dt, tables)
    zeta = apply_D(u, tables)
    e = cond_mean_phase1(zeta, tables, dt.phase1)
    return _scale(zeta - e, dt.odds_field())


def _scale(b: ScoreField, w: ScoreField) -> ScoreField:
    return ScoreField(b.fail * _trail(w.fail, b.fail.ndim), b.cens * _trail(w.cens, b.cens.ndim),
                      b.atom * _trail(w.atom, b.atom.ndim))


def _div(b: ScoreField, w: ScoreField) -> ScoreField:
    return ScoreField(b.fail / _trail(w.fail, b.fail.ndim), b.cens / _trail(w.cens, b.cens.ndim),
                      b.atom / _trail(w.atom, b.atom.ndim))


def apply_T(u, tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """``T = Pi1 R1 H``."""
    return apply_Pi1(apply_R1(apply_H(u, tables, dt), tables), tables)


def _pi_cell(dt: DesignTables, ndim: int) -> np.ndarray:
    if not np.allclose(dt.pi1, dt.pi_cell[:, :, None], rtol=0, atol=0):
        raise ModelError("pi(y, 1, v) must be constant on each grid cell")
    return _trail(dt.pi_cell, ndim)


def K_terms(u, tables: ObservedTables, dt: DesignTables) -> tuple[np.ndarray, ...]:
    """The four terms of ``K u``, in order.

    1. ``-E[Du | Y' > Y, Z]``
    2. ``pi(Y,1,V) E[Du/pi | Y' > Y, Z]``
    3. ``(1 - pi(Y,1,V)) E[Du | phase 1]`` at ``Delta = 1``
    4. ``-pi(Y,1,V) E[((1-pi)/pi) E(Du | phase 1) | Y' > Y, Z]``
    """
    _check_design(dt, tables)
    u = _as_grid(u, tables)
    pc = _pi_cell(dt, u.ndim)
    zeta = apply_D(u, tables)
    e = cond_mean_phase1(zeta, tables, dt.phase1)
    t1 = -future_mean(zeta, tables)
    t2 = pc * future_mean(_div(zeta, dt.as_field()), tables)
    t3 = (1 - pc) * cell_mean(e, tables)
    t4 = -pc * future_mean(_scale(e, dt.odds_field()), tables)
    sup = _trail(support_mask(tables), u.ndim)
    return tuple(np.where(sup, t, 0.0) for t in (t1, t2, t3, t4))


def apply_K(u, tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """Sum of :func:`K_terms`."""
    t1, t2, t3, t4 = K_terms(u, tables, dt)
    return t1 + t2 + t3 + t4


def apply_m(a: ScoreField, tables: ObservedTables, dt: DesignTables) -> ScoreField:
    """Information operator ``pi a + (1 - pi) E[a | phase 1]``."""
    _check_design(dt, tables)
    pi = dt.as_field()
    e = cond_mean_phase1(a, tables, dt.phase1)
    return _scale(a, pi) + _scale(e, ScoreField(1 - pi.fail, 1 - pi.cens, 1 - pi.atom))


def apply_m_inverse(a: ScoreField, tables: ObservedTables, dt: DesignTables) -> ScoreField:
    """Inverse information operator ``a/pi - ((1 - pi)/pi) E[a | phase 1]``."""
    _check_design(dt, tables)
    e = cond_mean_phase1(a, tables, dt.phase1)
    return _div(a, dt.as_field()) - _scale(e, dt.odds_field())


# ---------------------------------------------------------------------------
# nuisance directions


@dataclass(frozen=True)
class NuisanceDirection:
    """Direction of a one-dimensional nuisance submodel.

    ``kind='lambda'``: ``payload`` is ``a(t)``; ``kind='lambdaG'``:
    ``payload`` is ``b(t, level)``; ``kind='h'``: ``payload`` is the array
    ``c(z)`` per level (centred on use).
    """

    kind: str
    payload: object
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("lambda", "lambdaG", "h"):
            raise ModelError(f"unknown nuisance kind {self.kind!r}")


def _partial_integrals(fn: Callable, tables: ObservedTables, rate: np.ndarray, level=None):
    """``int_{t[i-1]}^{y} fn(t) rate_i dt`` at Gauss points and over whole cells."""
    b = tables.grid.boundaries
    left, width = b[:-1], np.diff(b)
    gx, gw = _gauss(tables.n_gauss + 4)
    if level is None:
        def f(t):
            return np.broadcast_to(fn(t), np.shape(t))
    else:
        def f(t):
            return np.broadcast_to(fn(t, level), np.shape(t))
    whole = np.sum(f(left[:, None] + width[:, None] * gx) * gw, axis=1) * width * rate
    y = tables.fine_t
    span = y - left[:, None]
    pts = left[:, None, None] + span[:, :, None] * gx[None, None, :]
    part = np.sum(f(pts) * gw, axis=2) * span * rate[:, None]
    return part, whole


def nuisance_score(direction: NuisanceDirection, tables: ObservedTables) -> ScoreField:
    """Full-data score of a nuisance direction on the mesh.

    Callables are integrated against the hazards with a higher-order Gauss
    rule inside each cell, so no piecewise-constant approximation is made.
    """
    L = tables.n_levels
    ca = tables.grid.atom_cell
    if direction.kind == "h":
        c = np.asarray(direction.payload, dtype=float)
        c = c - np.sum(c * tables.pmf)
        return ScoreField.from_level_values(tables, c)
    if direction.kind == "lambda":
        a = direction.payload
        part, whole = _partial_integrals(a, tables, tables.lam_cell)
        cum = _exclusive_cumsum(whole[None, :], axis=1)[0]
        comp_pts = cum[:, None] + part
        comp_atoms = cum[ca] + whole[ca]
        r = tables.risk
        a_pts = np.broadcast_to(a(tables.fine_t), tables.fine_t.shape)
        fail = a_pts[None] - r[:, None, None] * comp_pts[None]
        cens = -r[:, None, None] * np.broadcast_to(comp_pts, tables.m0.shape[1:])[None]
        atom = -r[:, None] * comp_atoms[None, :]
        return ScoreField(np.broadcast_to(fail, tables.m1.shape).copy(),
                          np.broadcast_to(cens, tables.m0.shape).copy(), atom)
    bfun = direction.payload
    p = tables.atom_p
    at = tables.grid.atom_times
    fail = np.empty_like(tables.m1)
    cens = np.empty_like(tables.m0)
    atom = np.empty_like(tables.ma)
    for l in range(L):
        part, whole = _partial_integrals(bfun, tables, tables.lamG_cell[l], level=l)
        jump = np.zeros(tables.n_cells)
        np.add.at(jump, ca, np.where(p[l] < 1.0, np.broadcast_to(bfun(at, l), at.shape), 0.0) * p[l])
        cum = _exclusive_cumsum((whole + jump)[None], axis=1)[0]
        comp = cum[:, None] + part
        fail[l] = -comp
        cens[l] = np.broadcast_to(bfun(tables.fine_t, l), comp.shape) - comp
        own = np.where(p[l] < 1.0, np.broadcast_to(bfun(at, l), at.shape), 0.0)
        atom[l] = own * (1 - p[l]) - (cum[ca] + whole[ca])
    return ScoreField(fail, cens, atom)


def observed_nuisance_score(direction: NuisanceDirection, tables: ObservedTables,
                            dt: DesignTables) -> tuple[ScoreField, ScoreField]:
    """Observed-data score ``R a + (1 - R) E[a | phase 1]`` as its two branches."""
    a = nuisance_score(direction, tables)
    return a, cond_mean_phase1(a, tables, dt.phase1)


# ---------------------------------------------------------------------------
# matrix assembly


class _Kernel:
    """Per-level pieces of ``D e_{l,i}`` for piecewise-constant basis functions."""

    def __init__(self, tables: ObservedTables):
        self.tables = tables
        r = tables.risk
        self.a1 = 1.0 - r[:, None, None] * tables.s_within[None]
        self.a0 = -r[:, None, None] * tables.s_within[None]
        self.kappa = r[:, None] * tables.dlam[None, :]

    def _tail(self, w1, w0, wa):
        t = self.tables
        cont = np.sum(w1 + w0, axis=1)
        atom_at = np.zeros(t.n_cells)
        np.add.at(atom_at, t.grid.atom_cell, wa)
        return _tail_after(cont[None], atom_at[None])[0]

    def gram(self, w1, w0, wa, l, lp) -> np.ndarray:
        """``G[i, k] = sum_p w(p) De_{l,i}(p) De_{lp,k}(p)``."""
        a1l, a1p, a0l, a0p = self.a1[l], self.a1[lp], self.a0[l], self.a0[lp]
        kl, kp = self.kappa[l], self.kappa[lp]
        tail = self._tail(w1, w0, wa)
        s0 = np.sum(w1 * a1l * a1p + w0 * a0l * a0p, axis=1)
        awl = np.sum(w1 * a1l + w0 * a0l, axis=1)
        awp = np.sum(w1 * a1p + w0 * a0p, axis=1)
        vl = -awl + kl * tail
        vp = -awp + kp * tail
        G = np.triu(np.outer(kl, vp), 1) + np.tril(np.outer(vl, kp), -1)
        G[np.diag_indices_from(G)] = s0 + kl * kp * tail
        return G

    def gvec(self, w1, w0, wa, l) -> np.ndarray:
        """``g[i] = sum_p w(p) De_{l,i}(p)``."""
        tail = self._tail(w1, w0, wa)
        aw = np.sum(w1 * self.a1[l] + w0 * self.a0[l], axis=1)
        return aw - self.kappa[l] * tail

    def fail_projection(self, w1, l) -> np.ndarray:
        """``P[i, k] = sum_{p fail in cell i} w(p) De_{l,k}(p)``."""
        P = np.tril(np.outer(np.sum(w1, axis=1), -self.kappa[l]), -1)
        P[np.diag_indices_from(P)] = np.sum(w1 * self.a1[l], axis=1)
        return P


def weighted_gram(tables: ObservedTables, w1, w0, wa, l: int, lp: int) -> np.ndarray:
    """Weighted Gram matrix of the ``D`` images of two levels' cell indicators."""
    return _Kernel(tables).gram(w1, w0, wa, l, lp)


def fail_projection(tables: ObservedTables, w1, l: int) -> np.ndarray:
    """Failure-point weighted sums of ``D e_{l,k}`` over each cell."""
    return _Kernel(tables).fail_projection(w1, l)


def _blocks_to_matrix(blocks: dict, L: int, N: int) -> np.ndarray:
    M = np.zeros((L * N, L * N))
    for (l, lp), B in blocks.items():
        M[l * N:(l + 1) * N, lp * N:(lp + 1) * N] = B
    return M


def _row_scale(M: np.ndarray, tables: ObservedTables, scale: np.ndarray) -> np.ndarray:
    return M * scale.reshape(-1)[:, None]


def _inv_G1(tables: ObservedTables) -> np.ndarray:
    G1 = tables.G1
    return np.divide(1.0, G1, out=np.zeros_like(G1), where=G1 > 0)


def _phase1_dv(tables: ObservedTables, dt: DesignTables, ker: _Kernel):
    """Per-level ``g`` vectors, odds and masses for conditioning on ``(Delta, V)``."""
    L = tables.n_levels
    z = np.zeros_like(tables.m1[0])
    za = np.zeros_like(tables.ma[0])
    g1 = [ker.gvec(tables.m1[l], z, za, l) for l in range(L)]
    g0 = [ker.gvec(z, tables.m0[l], tables.ma[l], l) for l in range(L)]
    P = {}
    odds = {}
    for grp in range(tables.n_groups):
        sel = tables.groups == grp
        P[grp] = (tables.m1[sel].sum(), tables.m0[sel].sum() + tables.ma[sel].sum())
        lv = int(np.flatnonzero(sel)[0])
        c1 = (1 - dt.pi1[lv]) / dt.pi1[lv]
        c0 = np.concatenate([((1 - dt.pi0[lv]) / dt.pi0[lv]).ravel(),
                             (1 - dt.pia[lv]) / dt.pia[lv]])
        odds[grp] = (float(c1.flat[0]), float(c0.flat[0]) if c0.size else 0.0)
    return g1, g0, P, odds


def _pairs(tables: ObservedTables):
    g = tables.groups
    L = tables.n_levels
    return [(l, lp) for l in range(L) for lp in range(L) if g[l] == g[lp]]


def assemble_R1H(tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """Matrix of ``u -> R1 H u`` on the stacked ``(level, cell)`` index."""
    _check_design(dt, tables)
    ker = _Kernel(tables)
    L, N = tables.n_levels, tables.n_cells
    c1 = (1 - dt.pi1) / dt.pi1
    c0 = (1 - dt.pi0) / dt.pi0
    ca = (1 - dt.pia) / dt.pia
    blocks = {}
    if dt.phase1 == "YDV":
        for l, lp in _pairs(tables):
            eye = 1.0 if l == lp else 0.0
            w1 = c1[l] * tables.m1[l] * (eye - tables.rho1[lp])
            w0 = c0[l] * tables.m0[l] * (eye - tables.rho0[lp])
            wa = ca[l] * tables.ma[l] * (eye - tables.rhoa[lp])
            blocks[(l, lp)] = ker.gram(w1, w0, wa, l, lp)
    else:
        g1, g0, P, odds = _phase1_dv(tables, dt, ker)
        for l, lp in _pairs(tables):
            grp = tables.groups[l]
            B = np.zeros((N, N))
            if l == lp:
                B += ker.gram(c1[l] * tables.m1[l], c0[l] * tables.m0[l],
                              ca[l] * tables.ma[l], l, l)
            o1, o0 = odds[grp]
            p1, p0 = P[grp]
            if p1 > 0:
                B -= o1 * np.outer(g1[l], g1[lp]) / p1
            if p0 > 0:
                B -= o0 * np.outer(g0[l], g0[lp]) / p0
            blocks[(l, lp)] = B
    M = _blocks_to_matrix(blocks, L, N)
    return _row_scale(M, tables, _inv_G1(tables))


def Pi1_matrix(tables: ObservedTables) -> np.ndarray:
    """Matrix of :func:`apply_Pi1` on the stacked index."""
    L, N = tables.n_levels, tables.n_cells
    G1 = tables.G1
    tot = G1.sum(axis=0)
    w = np.divide(G1, tot, out=np.zeros_like(G1), where=tot > 0)
    P = np.zeros((L * N, L * N))
    idx = np.arange(N)
    for l in range(L):
        for lp in range(L):
            P[l * N + idx, lp * N + idx] = ((1.0 if l == lp else 0.0) - w[lp]) * (G1[l] > 0)
    return P


def _apply_Pi1_rows(M: np.ndarray, tables: ObservedTables) -> np.ndarray:
    """``Pi1 M`` without forming the projection matrix."""
    L, N = tables.n_levels, tables.n_cells
    G1 = tables.G1
    tot = G1.sum(axis=0)
    w = np.divide(G1, tot, out=np.zeros_like(G1), where=tot > 0)
    Mr = M.reshape(L, N, -1)
    mean = np.einsum("ln,lnk->nk", w, Mr)
    out = (Mr - mean[None]) * (G1 > 0)[:, :, None]
    return out.reshape(L * N, -1)


def assemble_T(tables: ObservedTables, dt: DesignTables) -> np.ndarray:
    """Matrix of ``T = Pi1 R1 H``."""
    return _apply_Pi1_rows(assemble_R1H(tables, dt), tables)


def assemble_K(tables: ObservedTables, dt: DesignTables, terms: bool = False):
    """Matrix of ``K`` (or its four terms when ``terms=True``)."""
    _check_design(dt, tables)
    ker = _Kernel(tables)
    L, N = tables.n_levels, tables.n_cells
    m1, m0, ma = tables.m1, tables.m0, tables.ma
    pi1, pi0, pia = dt.pi1, dt.pi0, dt.pia
    pc = _pi_cell(dt, 2)
    c1, c0, ca = (1 - pi1) / pi1, (1 - pi0) / pi0, (1 - pia) / pia
    inv = _inv_G1(tables)

    def F_diag(w1, w0, wa):
        blocks = {}
        for l in range(L):
            A = ker.fail_projection(w1[l], l)
            R = ker.gram(w1[l], w0[l], wa[l], l, l)
            blocks[(l, l)] = A - R
        return _row_scale(_blocks_to_matrix(blocks, L, N), tables, inv)

    F_zeta = F_diag(m1, m0, ma)
    F_zeta_pi = F_diag(m1 / pi1, m0 / pi0, ma / pia)

    Ae = {}
    R1ce = {}
    if dt.phase1 == "YDV":
        for l, lp in _pairs(tables):
            Ae[(l, lp)] = ker.fail_projection(m1[l] * tables.rho1[lp], lp)
            R1ce[(l, lp)] = ker.gram(c1[l] * m1[l] * tables.rho1[lp], c0[l] * m0[l] * tables.rho0[lp],
                                     ca[l] * ma[l] * tables.rhoa[lp], l, lp)
    else:
        g1, g0, P, odds = _phase1_dv(tables, dt, ker)
        for l, lp in _pairs(tables):
            grp = tables.groups[l]
            o1, o0 = odds[grp]
            p1, p0 = P[grp]
            G1l = tables.G1[l]
            Ae[(l, lp)] = np.outer(G1l, g1[lp]) / p1 if p1 > 0 else np.zeros((N, N))
            B = np.zeros((N, N))
            if p1 > 0:
                B += o1 * np.outer(g1[l], g1[lp]) / p1
            if p0 > 0:
                B += o0 * np.outer(g0[l], g0[lp]) / p0
            R1ce[(l, lp)] = B
    A_e = _row_scale(_blocks_to_matrix(Ae, L, N), tables, inv)
    R_ce = _row_scale(_blocks_to_matrix(R1ce, L, N), tables, inv)
    c_cell = (1 - pc) / pc
    F_ce = _row_scale(A_e, tables, c_cell) - R_ce

    sup = support_mask(tables).reshape(-1)[:, None]
    pcv = pc.reshape(-1)[:, None]
    t1 = -F_zeta
    t2 = pcv * F_zeta_pi
    t3 = (1 - pcv) * A_e
    t4 = -pcv * F_ce
    out = tuple(np.where(sup, t, 0.0) for t in (t1, t2, t3, t4))
    return out if terms else out[0] + out[1] + out[2] + out[3]
