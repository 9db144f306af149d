"""Radial distribution network and exact branch-flow power flow.

Per-unit throughout.  Branch flows are defined at the sending (parent) end;
bus withdrawals are load-positive.  The solver is a backward/forward sweep:
the backward pass accumulates branch flows from the leaves using the current
loss estimate, the forward pass propagates squared voltages from the
substation and refreshes squared branch currents.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ValidationError

SWEEP_TOL = 1e-10
MAX_SWEEPS = 100
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = "pq"  # "substation" | "pq"
    devices: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r: float
    x: float

    def __post_init__(self):
        if self.r < 0.0 or self.x < 0.0:
            raise ValidationError(
                f"branch {self.from_bus}-{self.to_bus}: negative impedance")


class RadialNetwork:
    """Buses, branches, and the tree orientation rooted at the substation."""

    def __init__(self, buses, branches, u0: float = 1.0,
                 base_mva: float = 1.0, base_kv: float = 1.0):
        self.buses = list(buses)
        self.branches = list(branches)
        self.u0 = float(u0)
        self.base_mva = float(base_mva)
        self.base_kv = float(base_kv)
        self.bus_ids = [b.id for b in self.buses]
        self._by_id = {b.id: b for b in self.buses}
        subs = [b.id for b in self.buses if b.kind == "substation"]
        self.substation = subs[0] if len(subs) == 1 else None
        self._subs = subs
        self._oriented = None

    @classmethod
    def from_dict(cls, data: dict) -> "RadialNetwork":
        buses = [Bus(id=str(b["id"]), kind=str(b.get("type", "pq")),
                     devices=dict(b.get("devices", {})))
                 for b in data.get("buses", [])]
        branches = [Branch(from_bus=str(e["from"]), to_bus=str(e["to"]),
                           r=float(e["r"]), x=float(e["x"]))
                    for e in data.get("branches", [])]
        return cls(buses, branches, u0=float(data.get("u0", 1.0)),
                   base_mva=float(data.get("base_mva", 1.0)),
                   base_kv=float(data.get("base_kv", 1.0)))

    @classmethod
    def from_file(cls, path) -> "RadialNetwork":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def bus(self, bus_id: str) -> Bus:
        return self._by_id[bus_id]

    def orient(self):
        """(parent map, children map, buses in BFS order from the root).

        Only valid on a network that passed validate_radial.
        """
        if self._oriented is not None:
            return self._oriented
        adj = {b: [] for b in self.bus_ids}
        for e in self.branches:
            adj[e.from_bus].append(e.to_bus)
            adj[e.to_bus].append(e.from_bus)
        parent = {self.substation: None}
        order = [self.substation]
        queue = deque([self.substation])
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if j not in parent:
                    parent[j] = i
                    order.append(j)
                    queue.append(j)
        children = {b: [] for b in self.bus_ids}
        for j, i in parent.items():
            if i is not None:
                children[i].append(j)
        self._oriented = (parent, children, order)
        return self._oriented

    def branch_impedance(self):
        """Impedance keyed by (parent, child) in tree orientation."""
        parent, _, _ = self.orient()
        z = {}
        for e in self.branches:
            if parent.get(e.to_bus) == e.from_bus:
                z[(e.from_bus, e.to_bus)] = (e.r, e.x)
            else:
                z[(e.to_bus, e.from_bus)] = (e.r, e.x)
        return z


def validate_radial(net: RadialNetwork):
    """List of violation messages; empty means the network is usable."""
    errors = []
    if len(net._subs) != 1:
        errors.append(f"expected exactly one substation, found {net._subs}")
    if len(set(net.bus_ids)) != len(net.bus_ids):
        errors.append("duplicate bus ids")
    known = set(net.bus_ids)
    for e in net.branches:
        for end in (e.from_bus, e.to_bus):
            if end not in known:
                errors.append(f"branch {e.from_bus}-{e.to_bus}: "
                              f"unknown bus {end!r}")
    if errors:
        return errors

    n, m = len(net.bus_ids), len(net.branches)
    if m != n - 1:
        errors.append(f"radial network needs |E| = |N|-1, got {m} != {n - 1}")

    adj = {b: [] for b in net.bus_ids}
    for e in net.branches:
        adj[e.from_bus].append(e.to_bus)
        adj[e.to_bus].append(e.from_bus)
    root = net._subs[0] if net._subs else net.bus_ids[0]
    seen = {root}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    missing = sorted(known - seen)
    if missing:
        errors.append(f"buses unreachable from substation: {missing}")
    if m == n - 1 and not missing:
        # connected with n-1 edges => a tree; cycles only arise with m >= n
        pass
    elif m >= n and not missing:
        errors.append("network contains a cycle")
    return errors


@dataclass
class PowerFlowSolution:
    """Converged branch-flow state, everything in per-unit."""

    U: dict  # bus -> squared voltage magnitude
    P: dict  # (i, j) -> real power at sending end
    Q: dict  # (i, j) -> reactive power at sending end
    l: dict  # (i, j) -> squared current magnitude
    injection_p: dict  # bus -> net real injection (generation positive)
    injection_q: dict
    sweeps: int = 0

    def losses(self, net: RadialNetwork) -> float:
        z = net.branch_impedance()
        return sum(self.l[k] * z[k][0] for k in self.l)


def _check_valid(net: RadialNetwork):
    errors = validate_radial(net)
    if errors:
        raise ValidationError("; ".join(errors))


def solve_power_flow(net: RadialNetwork, withdrawals: dict,
                     u0=None) -> PowerFlowSolution:
    """Backward/forward sweep; withdrawals maps bus -> (P, Q), load positive.

    Raises ConvergenceError after 100 sweeps, with the last iterate attached
    to the exception for inspection.
    """
    _check_valid(net)
    u0 = net.u0 if u0 is None else float(u0)
    parent, children, order = net.orient()
    z = net.branch_impedance()
    root = net.substation

    w = {b: (0.0, 0.0) for b in net.bus_ids}
    for b, pq in withdrawals.items():
        if b not in w:
            raise ValidationError(f"withdrawal at unknown bus {b!r}")
        p, q = float(pq[0]), float(pq[1])
        if not (np.isfinite(p) and np.isfinite(q)):
            raise ValidationError(f"withdrawal at {b!r} must be finite")
        w[b] = (p, q)

    U = {b: u0 for b in net.bus_ids}
    P = {k: 0.0 for k in z}
    Q = {k: 0.0 for k in z}
    l = {k: 0.0 for k in z}

    for sweep in range(1, MAX_SWEEPS + 1):
        delta = 0.0
        # backward: flows from the leaves, losses from the previous iterate
        for j in reversed(order):
            if j == root:
                continue
            i = parent[j]
            k = (i, j)
            p_new = w[j][0] + sum(P[(j, c)] for c in children[j]) + z[k][0] * l[k]
            q_new = w[j][1] + sum(Q[(j, c)] for c in children[j]) + z[k][1] * l[k]
            delta = max(delta, abs(p_new - P[k]), abs(q_new - Q[k]))
            P[k], Q[k] = p_new, q_new
        # forward: voltages from the root, then refresh currents
        for j in order:
            if j == root:
                continue
            i = parent[j]
            k = (i, j)
            r_ij, x_ij = z[k]
            u_new = (U[i] - 2.0 * (P[k] * r_ij + Q[k] * x_ij)
                     + (r_ij * r_ij + x_ij * x_ij) * l[k])
            if u_new <= 0.0:
                exc = ConvergenceError(
                    f"voltage collapse at bus {j!r} (U = {u_new:.3e})",
                    iterations=sweep)
                exc.last = PowerFlowSolution(U, P, Q, l, {}, {}, sweep)
                raise exc
            l_new = (P[k] * P[k] + Q[k] * Q[k]) / U[i]
            delta = max(delta, abs(u_new - U[j]), abs(l_new - l[k]))
            U[j], l[k] = u_new, l_new
        if delta < SWEEP_TOL:
            break
    else:
        exc = ConvergenceError(
            f"power flow did not converge in {MAX_SWEEPS} sweeps "
            f"(last update {delta:.3e})", residual_norm=delta,
            iterations=MAX_SWEEPS)
        exc.last = PowerFlowSolution(U, P, Q, l, {}, {}, MAX_SWEEPS)
        raise exc

    inj_p = {b: -w[b][0] for b in net.bus_ids}
    inj_q = {b: -w[b][1] for b in net.bus_ids}
    inj_p[root] = sum(P[(root, c)] for c in children[root]) + w[root][0]
    inj_q[root] = sum(Q[(root, c)] for c in children[root]) + w[root][1]
    return PowerFlowSolution(U=U, P=P, Q=Q, l=l, injection_p=inj_p,
                             injection_q=inj_q, sweeps=sweep)


def branch_flow_residuals(net: RadialNetwork, sol: PowerFlowSolution,
                          withdrawals=None) -> np.ndarray:
    """Stacked feasibility residuals of a candidate solution.

    Rows: per-branch voltage drop, per non-substation bus real and reactive
    balance, per-branch apparent-power identity.  Zero iff exact.
    """
    _check_valid(net)
    parent, children, order = net.orient()
    z = net.branch_impedance()
    root = net.substation
    if withdrawals is None:
        withdrawals = {b: (-sol.injection_p.get(b, 0.0),
                           -sol.injection_q.get(b, 0.0))
                       for b in net.bus_ids if b != root}

    rows = []
    for (i, j), (r_ij, x_ij) in sorted(z.items()):
        rows.append(sol.U[i] - 2.0 * (sol.P[(i, j)] * r_ij
                                      + sol.Q[(i, j)] * x_ij)
                    + (r_ij ** 2 + x_ij ** 2) * sol.l[(i, j)] - sol.U[j])
    for j in order:
        if j == root:
            continue
        i = parent[j]
        k = (i, j)
        w_p, w_q = withdrawals.get(j, (0.0, 0.0))
        rows.append(sol.P[k] - z[k][0] * sol.l[k]
                    - w_p - sum(sol.P[(j, c)] for c in children[j]))
        rows.append(sol.Q[k] - z[k][1] * sol.l[k]
                    - w_q - sum(sol.Q[(j, c)] for c in children[j]))
    for (i, j) in sorted(z):
        rows.append(sol.l[(i, j)] * sol.U[i]
                    - (sol.P[(i, j)] ** 2 + sol.Q[(i, j)] ** 2))
    return np.array(rows)
