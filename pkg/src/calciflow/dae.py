"""Differential-algebraic integration core.

The loop model has the semi-explicit form

    x'(t) = f(x, y, u, d, p)
    0     = g(x, y, u, d, p)

and is advanced with fixed-step implicit Euler: each step solves the stacked
nonlinear system x+ = x + dt*f(x+, y+), 0 = g(x+, y+) for (x+, y+) with a
damped Newton iteration on a dense finite-difference Jacobian.  The scheme is
first order and strongly stable, which is what the stiff thermal/kinetic
coupling needs at a fixed seconds-scale step.

This module is deliberately generic: it knows nothing about the plant.  The
plant assembly lives in `calciflow.plant` and feeds residual callables in
here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (CalciflowError, ConvergenceError, DomainError,
                     OvertemperatureError)


class EvaluationError(CalciflowError):
    """Residual or Jacobian evaluation produced non-finite values."""


# Trial points a solver probes may leave the model's validity region
# (property ranges, positivity).  Those evaluations fail recoverably:
# the point is rejected like a non-finite residual, not escalated.
RECOVERABLE = (DomainError, OvertemperatureError)


@dataclass
class SolverConfig:
    """Tolerances and step policy for the implicit integrator."""

    dt: float = 1.0  # s
    newton_tol: float = 1e-8  # on the scaled residual, inf-norm
    max_newton_iter: int = 30
    fd_epsilon: float = 1e-7  # relative FD perturbation
    tol_alg: float = 1e-6  # accepted-state algebraic residual bound
    max_step_halvings: int = 4
    reuse_jacobian: bool = True
    jacobian_max_age: int = 25  # accepted steps between forced refreshes

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        for name in ("newton_tol", "fd_epsilon", "tol_alg"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")


def fd_jacobian(fn, z, eps_rel=1e-7):
    """Dense forward-difference Jacobian of fn at z.

    Column j perturbs z_j by eps_rel*max(1, |z_j|).
    """
    z = np.asarray(z, dtype=float)
    r0 = np.asarray(fn(z), dtype=float)
    if not np.all(np.isfinite(r0)):
        raise EvaluationError("residual function returned non-finite values at base point")
    jac = np.empty((r0.size, z.size))
    for j in range(z.size):
        dz = eps_rel * max(1.0, abs(z[j]))
        z_pert = z.copy()
        z_pert[j] += dz
        try:
            r1 = np.asarray(fn(z_pert), dtype=float)
        except RECOVERABLE:
            # base point sits on a domain boundary: difference backwards
            z_pert[j] = z[j] - dz
            r1 = np.asarray(fn(z_pert), dtype=float)
            dz = -dz
        if not np.all(np.isfinite(r1)):
            raise EvaluationError(f"residual function returned non-finite values (column {j})")
        jac[:, j] = (r1 - r0) / dz
    return jac


def _norm(r):
    return float(np.max(np.abs(r))) if r.size else 0.0


def newton_solve_info(residual_fn, guess, cfg: SolverConfig, jacobian=None):
    """Damped Newton iteration; returns (z, info).

    Line search: up to 8 halvings against a sufficient-decrease test on the
    squared residual 2-norm (the Newton direction descends it); convergence
    is checked on the inf-norm.  The Jacobian is rebuilt lazily: a caller-
    supplied or aged matrix is kept while the iteration contracts well and
    replaced when progress degrades.  If even a fresh Jacobian cannot find a
    decreasing step, a bounded number of best-effort steps are taken anyway;
    this rides out the saddle regions of stiff residual landscapes instead of
    aborting on them.

    info carries the last Jacobian (for reuse across steps), the iteration
    count, and the final residual norm.
    """
    z = np.asarray(guess, dtype=float).copy()
    r = np.asarray(residual_fn(z), dtype=float)
    if not np.all(np.isfinite(r)):
        raise EvaluationError("residual not finite at initial guess")
    norm = _norm(r)
    merit = float(r @ r)
    jac = jacobian
    jac_fresh = False  # a supplied Jacobian counts as stale
    n_jac = 0
    forced = 0
    forced_budget = max(8, cfg.max_newton_iter // 4)

    it = 0
    while it < cfg.max_newton_iter:
        if norm <= cfg.newton_tol:
            return z, {"iterations": it, "residual_norm": norm, "jacobian": jac,
                       "jacobian_builds": n_jac}
        if jac is None:
            jac = fd_jacobian(residual_fn, z, cfg.fd_epsilon)
            jac_fresh = True
            n_jac += 1
        try:
            dz = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            dz, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        if not np.all(np.isfinite(dz)):
            raise ConvergenceError("Newton direction not finite", residual_norm=norm,
                                   iterations=it)

        # Step halving: try lam = 1, 1/2, ..., 1/256 (8 halvings).
        accepted = False
        best = None
        lam = 1.0
        for _ in range(9):
            z_try = z + lam * dz
            try:
                r_try = np.asarray(residual_fn(z_try), dtype=float)
            except RECOVERABLE:
                lam *= 0.5
                continue
            if np.all(np.isfinite(r_try)):
                norm_try = _norm(r_try)
                merit_try = float(r_try @ r_try)
                if merit_try < merit * (1.0 - 1e-4 * lam) or norm_try <= cfg.newton_tol:
                    accepted = True
                    best = (z_try, r_try, norm_try, merit_try)
                    break
                if best is None or merit_try < best[3]:
                    best = (z_try, r_try, norm_try, merit_try)
            lam *= 0.5

        if accepted:
            contraction = best[2] / max(norm, 1e-300)
            z, r, norm, merit = best
            if not jac_fresh and contraction > 0.3:
                jac = None  # aged matrix is slowing us down
            else:
                jac_fresh = False
            it += 1
            continue

        if not jac_fresh:
            jac = None  # stale Jacobian: rebuild and retry this iterate
            continue
        if best is not None and forced < forced_budget:
            forced += 1
            z, r, norm, merit = best
            jac = None
            it += 1
            continue
        raise ConvergenceError(
            f"Newton stalled at residual norm {norm:.3e}", residual_norm=norm, iterations=it
        )

    if norm <= cfg.newton_tol:
        return z, {"iterations": cfg.max_newton_iter, "residual_norm": norm, "jacobian": jac,
                   "jacobian_builds": n_jac}
    raise ConvergenceError(
        f"Newton did not converge in {cfg.max_newton_iter} iterations "
        f"(residual norm {norm:.3e})",
        residual_norm=norm,
        iterations=cfg.max_newton_iter,
    )


def newton_solve(residual_fn, guess, cfg: SolverConfig, jacobian=None):
    """Solve residual_fn(z) = 0; returns z with inf-norm residual <= newton_tol."""
    z, _ = newton_solve_info(residual_fn, guess, cfg, jacobian=jacobian)
    return z


class ImplicitEulerStepper:
    """Fixed-step backward-Euler integrator over a residual pair callable.

    residual_pair(x, y, t) must return (f, g).  Scale vectors divide the
    stacked residual rows so newton_tol applies uniformly; they default to
    ones.  The Jacobian of the stacked step system is kept between steps and
    rebuilt when it ages out or Newton struggles.
    """

    def __init__(self, residual_pair, n_x, n_y, cfg: SolverConfig,
                 scale_x=None, scale_g=None):
        self.residual_pair = residual_pair
        self.n_x = int(n_x)
        self.n_y = int(n_y)
        self.cfg = cfg
        self.scale_x = np.ones(n_x) if scale_x is None else np.asarray(scale_x, float)
        self.scale_g = np.ones(n_y) if scale_g is None else np.asarray(scale_g, float)
        self._jac = None
        self._jac_age = 0
        self._last_dt = None
        self.last_substeps = []

    def _stacked_residual(self, x_old, t_new, dt):
        sx = np.maximum(self.scale_x, np.abs(x_old))

        def phi(zz):
            x_new, y_new = zz[: self.n_x], zz[self.n_x:]
            f, g = self.residual_pair(x_new, y_new, t_new)
            rx = (x_new - x_old - dt * np.asarray(f, float)) / sx
            rg = np.asarray(g, float) / self.scale_g if self.n_y else np.empty(0)
            return np.concatenate((rx, rg))

        return phi

    def attempt(self, x, y, t, dt):
        """One backward-Euler solve over [t, t+dt]; raises on Newton failure."""
        phi = self._stacked_residual(x, t + dt, dt)
        guess = np.concatenate((x, y))
        jac = self._jac if (self.cfg.reuse_jacobian and self._last_dt == dt
                            and self._jac_age < self.cfg.jacobian_max_age) else None
        z, info = newton_solve_info(phi, guess, self.cfg, jacobian=jac)
        if info["jacobian_builds"] > 0 or jac is None:
            self._jac_age = 0
        else:
            self._jac_age += 1
        self._jac = info["jacobian"]
        self._last_dt = dt
        return z[: self.n_x], z[self.n_x:]

    def step(self, x, y, t, dt=None):
        """Advance by the nominal step, halving on rejection (max 4 halvings).

        Halved substeps are repeated so the returned state always lands on
        t + dt; the output grid stays fixed.  The accepted substates are kept
        on self.last_substeps as (dt_sub, x, y) tuples, which is what exact
        per-step balance accounting needs when a step was subdivided.
        """
        dt = self.cfg.dt if dt is None else dt
        halvings = 0
        while True:
            sub = dt / (1 << halvings)
            try:
                x_new, y_new = x, y
                t_new = t
                accepted = []
                for _ in range(1 << halvings):
                    x_new, y_new = self.attempt(x_new, y_new, t_new, sub)
                    t_new += sub
                    accepted.append((sub, x_new, y_new))
                self.last_substeps = accepted
                return x_new, y_new, t + dt
            except ConvergenceError:
                self._jac = None
                halvings += 1
                if halvings > self.cfg.max_step_halvings:
                    raise


def step_implicit_euler(residual_pair, x, y, t, cfg: SolverConfig,
                        scale_x=None, scale_g=None):
    """Single backward-Euler step of the stacked system; returns (x+, y+).

    One-shot convenience over ImplicitEulerStepper for callers that do not
    integrate a trajectory.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    stepper = ImplicitEulerStepper(residual_pair, x.size, y.size, cfg,
                                   scale_x=scale_x, scale_g=scale_g)
    x_new, y_new = stepper.attempt(x, y, t, cfg.dt)
    return x_new, y_new


def solve_steady_state(residual_pair, x, y, t, cfg: SolverConfig,
                       scale_x=None, scale_g=None):
    """Newton on the stacked steady equations f = 0, g = 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n_x = x.size
    sx = np.ones(n_x) if scale_x is None else np.maximum(np.asarray(scale_x, float), np.abs(x))
    sg = np.ones(y.size) if scale_g is None else np.asarray(scale_g, float)

    def phi(zz):
        f, g = residual_pair(zz[:n_x], zz[n_x:], t)
        return np.concatenate((np.asarray(f, float) / sx,
                               np.asarray(g, float) / sg if y.size else np.empty(0)))

    z = newton_solve(phi, np.concatenate((x, y)), cfg)
    return z[:n_x], z[n_x:]


def with_dt(cfg: SolverConfig, dt: float) -> SolverConfig:
    return replace(cfg, dt=dt)
