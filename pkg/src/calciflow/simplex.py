"""Bounded-variable revised simplex for min c'z s.t. Az = b, l <= z <= u.

Dense two-phase implementation with an explicit basis inverse, product-form
pivot updates, periodic refactorization, and a Bland's-rule fallback when
degenerate pivots stall the objective.  Problem sizes here are a few
hundred rows, so dense linear algebra is the right tradeoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InfeasibleError, UnboundedError, ValidationError

TOL = 1e-9
REFACTOR_EVERY = 64
STALL_LIMIT = 40

BASIC, AT_LOWER, AT_UPPER, FREE = 0, 1, 2, 3


@dataclass
class LinearProgram:
    """min c'z subject to A z = b and elementwise bounds on z."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        m, n = self.A.shape
        if not (self.c.size == n and self.b.size == m
                and self.lower.size == n and self.upper.size == n):
            raise ValidationError("inconsistent LP dimensions")
        if np.any(self.lower > self.upper + TOL):
            bad = int(np.argmax(self.lower - self.upper))
            raise ValidationError(f"lower > upper for variable {bad}")
        if self.names and len(self.names) != n:
            raise ValidationError("name list length mismatch")

    @property
    def shape(self):
        return self.A.shape


@dataclass
class SimplexResult:
    status: str
    z: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    phase1_iterations: int = 0


class _Tableau:
    """Mutable solver state over a fixed (A, bounds) problem."""

    def __init__(self, A, b, lower, upper):
        self.A = A
        self.b = b
        self.lower = lower
        self.upper = upper
        self.m, self.n = A.shape
        self.z = np.zeros(self.n)
        self.stat = np.full(self.n, AT_LOWER, dtype=int)
        self.basis = np.zeros(self.m, dtype=int)
        self.B_inv = np.eye(self.m)
        self.pivots_since_refactor = 0

    def refactor(self):
        B = self.A[:, self.basis]
        try:
            self.B_inv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular basis during refactorization")
        self.pivots_since_refactor = 0
        self._recompute_basics()

    def _recompute_basics(self):
        nonbasic_mask = self.stat != BASIC
        rhs = self.b - self.A[:, nonbasic_mask] @ self.z[nonbasic_mask]
        self.z[self.basis] = self.B_inv @ rhs

    def minimize(self, c, tol=TOL, max_iter=None):
        """Run pivots until optimal; returns iteration count."""
        m, n = self.m, self.n
        if max_iter is None:
            max_iter = 200 + 40 * (m + n)
        bland = False
        stall = 0
        last_obj = np.inf

        for it in range(max_iter):
            y = self.B_inv.T @ c[self.basis]
            d = c - self.A.T @ y

            enter, direction = self._pick_entering(d, tol, bland)
            if enter is None:
                return it
            a_col = self.A[:, enter]
            w = self.B_inv @ a_col

            t, leave_row, leave_to = self._ratio_test(enter, direction, w,
                                                      tol, bland)
            if not np.isfinite(t):
                ray = np.zeros(n)
                ray[enter] = direction
                ray[self.basis] -= direction * w
                raise UnboundedError(
                    "objective unbounded below", ray=ray)

            obj = float(c @ self.z)
            if obj > last_obj - 1e-13:
                stall += 1
                if stall > STALL_LIMIT:
                    bland = True
            else:
                stall = 0
            last_obj = obj

            self._apply_step(enter, direction, w, t, leave_row, leave_to)
        raise ConvergenceError("simplex iteration limit reached",
                               iterations=max_iter)

    def _pick_entering(self, d, tol, bland):
        stat = self.stat
        can_low = (stat == AT_LOWER) & (d < -tol)
        can_up = (stat == AT_UPPER) & (d > tol)
        can_free = (stat == FREE) & (np.abs(d) > tol)
        eligible = can_low | can_up | can_free
        if not eligible.any():
            return None, 0
        if bland:
            j = int(np.flatnonzero(eligible)[0])
        else:
            score = np.where(eligible, np.abs(d), -np.inf)
            j = int(np.argmax(score))
        direction = +1 if (can_low[j] or (can_free[j] and d[j] < 0)) else -1
        return j, direction

    def _ratio_test(self, enter, direction, w, tol, bland=False):
        lo, up = self.lower, self.upper
        span = up[enter] - lo[enter]
        t_best = span if np.isfinite(span) else np.inf

        bi = self.basis
        wd = direction * w
        ti = np.full(self.m, np.inf)
        dec = wd > tol
        inc = wd < -tol
        with np.errstate(invalid="ignore"):
            ti[dec] = (self.z[bi[dec]] - lo[bi[dec]]) / wd[dec]
            ti[inc] = (up[bi[inc]] - self.z[bi[inc]]) / (-wd[inc])
        ti[~np.isfinite(ti)] = np.inf
        np.clip(ti, 0.0, None, out=ti)

        t_min = float(ti.min()) if self.m else np.inf
        if t_min >= t_best - tol:
            # entering variable reaches its other bound first: bound flip
            return t_best, None, None
        near = np.flatnonzero(ti <= t_min + tol)
        if bland:
            # anti-cycling: smallest basic variable index among blockers
            r = int(near[np.argmin(bi[near])])
        else:
            # numerical stability: largest pivot magnitude among blockers
            r = int(near[np.argmax(np.abs(w[near]))])
        leave_to = AT_LOWER if wd[r] > 0 else AT_UPPER
        return max(float(ti[r]), 0.0), r, leave_to

    def _apply_step(self, enter, direction, w, t, leave_row, leave_to):
        if t > 0.0:
            self.z[self.basis] -= direction * t * w
            self.z[enter] += direction * t
        if leave_row is None:
            # bound flip: the entering variable traverses to its other bound
            self.stat[enter] = AT_UPPER if direction > 0 else AT_LOWER
            self.z[enter] = (self.upper[enter] if direction > 0
                             else self.lower[enter])
            return
        out = self.basis[leave_row]
        self.stat[out] = leave_to
        self.z[out] = self.lower[out] if leave_to == AT_LOWER else self.upper[out]
        self.basis[leave_row] = enter
        self.stat[enter] = BASIC
        # product-form update of the explicit inverse
        piv = w[leave_row]
        if abs(piv) < 1e-11:
            self.refactor()
            return
        row = self.B_inv[leave_row] / piv
        self.B_inv -= np.outer(w, row)
        self.B_inv[leave_row] = row
        self.pivots_since_refactor += 1
        if self.pivots_since_refactor >= REFACTOR_EVERY:
            self.refactor()


def solve(lp: LinearProgram, tol: float = TOL) -> SimplexResult:
    """Two-phase bounded simplex; raises on infeasible or unbounded input."""
    m, n = lp.shape
    A, b, c = lp.A, lp.b, lp.c
    lower, upper = lp.lower.copy(), lp.upper.copy()

    # start every structural variable on a finite bound (free ones at zero)
    z0 = np.zeros(n)
    stat0 = np.empty(n, dtype=int)
    for j in range(n):
        if np.isfinite(lower[j]):
            z0[j], stat0[j] = lower[j], AT_LOWER
        elif np.isfinite(upper[j]):
            z0[j], stat0[j] = upper[j], AT_UPPER
        else:
            z0[j], stat0[j] = 0.0, FREE

    resid = b - A @ z0
    signs = np.where(resid >= 0.0, 1.0, -1.0)

    tab = _Tableau(
        A=np.hstack([A, np.diag(signs)]),
        b=b,
        lower=np.concatenate([lower, np.zeros(m)]),
        upper=np.concatenate([upper, np.full(m, np.inf)]),
    )
    tab.z = np.concatenate([z0, np.abs(resid)])
    tab.stat = np.concatenate([stat0, np.full(m, BASIC, dtype=int)])
    tab.basis = np.arange(n, n + m)
    tab.B_inv = np.diag(signs)  # diagonal sign matrix is its own inverse

    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    it1 = tab.minimize(c1, tol=tol)
    phase1_obj = float(c1 @ tab.z)
    if phase1_obj > 1e-7:
        y = tab.B_inv.T @ c1[tab.basis]
        raise InfeasibleError(
            f"no feasible point (phase-1 optimum {phase1_obj:.3e})",
            certificate={"objective": phase1_obj, "duals": y})

    # pin artificials to zero and optimize the real objective
    tab.upper[n:] = 0.0
    tab.z[n:] = np.where(np.abs(tab.z[n:]) < tol, 0.0, tab.z[n:])
    for j in range(n, n + m):
        if tab.stat[j] != BASIC:
            tab.stat[j] = AT_LOWER
            tab.z[j] = 0.0
    c2 = np.concatenate([c, np.zeros(m)])
    it2 = tab.minimize(c2, tol=tol)

    tab.refactor()  # recompute basics from scratch to kill pivot drift
    z = tab.z[:n].copy()
    snap_lo = np.isfinite(lower) & (np.abs(z - lower) < tol)
    snap_up = np.isfinite(upper) & (np.abs(z - upper) < tol)
    z[snap_lo] = lower[snap_lo]
    z[snap_up] = upper[snap_up]

    feas = float(np.max(np.abs(A @ z - b))) if m else 0.0
    if feas > 1e-6:
        raise ConvergenceError(
            f"simplex returned an infeasible point (|Az-b| = {feas:.3e})",
            residual_norm=feas)

    y = tab.B_inv.T @ c2[tab.basis]
    d = c - A.T @ y
    return SimplexResult(status="optimal", z=z, objective=float(c @ z),
                         duals=y, reduced_costs=d,
                         iterations=it1 + it2, phase1_iterations=it1)
