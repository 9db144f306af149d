"""LP solver tests against a brute-force vertex enumeration oracle.

The oracle enumerates every basic solution (choice of basis columns plus a
bound assignment for the rest), keeps the feasible ones, and minimizes
directly; on compact instances this is exhaustive, so agreement certifies
global optimality.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calciflow import simplex
from calciflow.errors import InfeasibleError, UnboundedError, ValidationError
from calciflow.simplex import LinearProgram, solve


def brute_force_min(c, A, b, lower, upper, feas_tol=1e-7):
    """Smallest objective over all feasible basic solutions, or None."""
    A = np.atleast_2d(np.asarray(A, float))
    m, n = A.shape
    best = None
    for basis in itertools.combinations(range(n), m):
        B = A[:, basis]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        nonbasic = [j for j in range(n) if j not in basis]
        options = []
        for j in nonbasic:
            opts = [v for v in (lower[j], upper[j]) if np.isfinite(v)]
            options.append(opts or [0.0])
        for choice in itertools.product(*options):
            zn = np.asarray(choice)
            rhs = b - A[:, nonbasic] @ zn if nonbasic else np.asarray(b, float)
            zb = np.linalg.solve(B, rhs)
            idx = list(basis)
            if (np.any(zb < np.asarray(lower)[idx] - feas_tol)
                    or np.any(zb > np.asarray(upper)[idx] + feas_tol)):
                continue
            z = np.zeros(n)
            z[idx] = zb
            z[nonbasic] = zn
            val = float(np.asarray(c) @ z)
            if best is None or val < best:
                best = val
    return best


def test_box_corner():
    lp = LinearProgram(c=[-1.0], A=[[0.0]], b=[0.0], lower=[0.0], upper=[1.0])
    res = solve(lp)
    assert res.status == "optimal"
    assert res.z[0] == pytest.approx(1.0, abs=1e-9)
    assert res.objective == pytest.approx(-1.0, abs=1e-9)


def test_degenerate_optimum_value():
    lp = LinearProgram(c=[1.0, 1.0], A=[[1.0, 1.0]], b=[1.0],
                       lower=[0.0, 0.0], upper=[np.inf, np.inf])
    res = solve(lp)
    assert res.objective == pytest.approx(1.0, abs=1e-9)
    assert np.max(np.abs(lp.A @ res.z - lp.b)) < 1e-9


def test_free_variable():
    lp = LinearProgram(c=[1.0, 0.0], A=[[1.0, 1.0]], b=[3.0],
                       lower=[-np.inf, 0.0], upper=[np.inf, 1.0])
    res = solve(lp)
    assert res.z[1] == pytest.approx(1.0, abs=1e-9)
    assert res.z[0] == pytest.approx(2.0, abs=1e-9)


def test_bound_flip_optimum():
    # one equality, three boxed variables; optimum loads the cheap ones
    lp = LinearProgram(c=[-1.0, -2.0, 0.0], A=[[1.0, 1.0, 1.0]], b=[3.0],
                       lower=[0.0, 0.0, 0.0], upper=[2.0, 2.0, 3.0])
    res = solve(lp)
    assert res.objective == pytest.approx(-5.0, abs=1e-9)
    assert res.z[1] == pytest.approx(2.0, abs=1e-9)


def test_pinned_variable():
    lp = LinearProgram(c=[1.0, 0.0], A=[[1.0, 1.0]], b=[2.0],
                       lower=[0.0, 1.5], upper=[np.inf, 1.5])
    res = solve(lp)
    assert res.z == pytest.approx([0.5, 1.5], abs=1e-9)


def test_infeasible_with_certificate():
    lp = LinearProgram(c=[0.0, 0.0], A=[[1.0, 1.0]], b=[2.0],
                       lower=[0.0, 0.0], upper=[0.5, 0.5])
    with pytest.raises(InfeasibleError) as info:
        solve(lp)
    cert = info.value.certificate
    assert cert["objective"] == pytest.approx(1.0, abs=1e-7)
    # Farkas check: the dual prices the rhs above anything the box can pay
    y = np.asarray(cert["duals"])
    ya = y @ lp.A
    box_max = np.sum(np.where(ya > 0, ya * lp.upper, ya * lp.lower))
    assert y @ lp.b > box_max + 1e-9


def test_unbounded_with_ray():
    lp = LinearProgram(c=[-1.0, 0.0], A=[[1.0, -1.0]], b=[0.0],
                       lower=[0.0, 0.0], upper=[np.inf, np.inf])
    with pytest.raises(UnboundedError) as info:
        solve(lp)
    ray = np.asarray(info.value.ray)[:2]
    assert np.max(np.abs(lp.A @ ray)) < 1e-9
    assert lp.c @ ray < -1e-9


def test_beale_cycling_instance_terminates():
    # classic degenerate instance that cycles under naive most-negative rule
    c = [-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0]
    A = [[0.25, -60.0, -1.0 / 25.0, 9.0, 1.0, 0.0, 0.0],
         [0.5, -90.0, -1.0 / 50.0, 3.0, 0.0, 1.0, 0.0],
         [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]]
    b = [0.0, 0.0, 1.0]
    lower = [0.0] * 7
    upper = [np.inf] * 7
    res = solve(LinearProgram(c=c, A=A, b=b, lower=lower, upper=upper))
    assert res.objective == pytest.approx(-0.05, abs=1e-9)
    oracle = brute_force_min(c, A, b, lower, upper)
    assert res.objective == pytest.approx(oracle, abs=1e-9)


def test_dimension_validation():
    with pytest.raises(ValidationError):
        LinearProgram(c=[1.0, 2.0], A=[[1.0]], b=[1.0],
                      lower=[0.0], upper=[1.0])
    with pytest.raises(ValidationError):
        LinearProgram(c=[1.0], A=[[1.0]], b=[1.0], lower=[2.0], upper=[1.0])


def random_instance(rng, force_feasible):
    n = int(rng.integers(3, 7))
    m = int(rng.integers(1, min(4, n)))
    A = rng.normal(size=(m, n))
    lower = rng.uniform(-2.0, 0.0, n)
    upper = lower + rng.uniform(0.5, 3.0, n)
    c = rng.normal(size=n)
    if force_feasible:
        x0 = lower + (upper - lower) * rng.uniform(0.2, 0.8, n)
        b = A @ x0
    else:
        b = rng.normal(size=m) * 4.0
    return c, A, b, lower, upper


def test_random_instances_match_vertex_enumeration():
    rng = np.random.default_rng(20260814)
    solved = infeasible = 0
    for trial in range(40):
        c, A, b, lower, upper = random_instance(rng, force_feasible=trial % 2 == 0)
        oracle = brute_force_min(c, A, b, lower, upper)
        lp = LinearProgram(c=c, A=A, b=b, lower=lower, upper=upper)
        if oracle is None:
            with pytest.raises(InfeasibleError):
                solve(lp)
            infeasible += 1
        else:
            res = solve(lp)
            assert res.objective == pytest.approx(oracle, abs=1e-6), trial
            assert np.max(np.abs(A @ res.z - b)) < 1e-9
            assert np.all(res.z >= lower - 1e-9)
            assert np.all(res.z <= upper + 1e-9)
            solved += 1
    assert solved >= 15 and infeasible >= 5


def test_kkt_certificate_on_larger_instance():
    rng = np.random.default_rng(7)
    m, n = 25, 60
    A = rng.normal(size=(m, n))
    lower = np.full(n, -1.0)
    upper = rng.uniform(0.5, 2.0, n)
    x0 = lower + (upper - lower) * rng.uniform(0.1, 0.9, n)
    b = A @ x0
    c = rng.normal(size=n)
    res = solve(LinearProgram(c=c, A=A, b=b, lower=lower, upper=upper))

    assert np.max(np.abs(A @ res.z - b)) < 1e-9
    assert np.all(res.z >= lower - 1e-9) and np.all(res.z <= upper + 1e-9)
    d = res.reduced_costs
    at_lower = np.abs(res.z - lower) < 1e-8
    at_upper = np.abs(res.z - upper) < 1e-8
    interior = ~(at_lower | at_upper)
    # dual feasibility certifies optimality for a linear objective
    assert np.all(d[at_lower & ~at_upper] > -1e-7)
    assert np.all(d[at_upper & ~at_lower] < 1e-7)
    assert np.max(np.abs(d[interior])) < 1e-7
    # strong duality within roundoff
    dual_obj = res.duals @ b + np.sum(
        np.where(d > 0, d * lower, d * upper)[~interior & ~(at_lower & at_upper)])
    assert res.objective == pytest.approx(dual_obj, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_feasible_instances_agree_with_oracle(seed):
    rng = np.random.default_rng(seed)
    c, A, b, lower, upper = random_instance(rng, force_feasible=True)
    res = solve(LinearProgram(c=c, A=A, b=b, lower=lower, upper=upper))
    oracle = brute_force_min(c, A, b, lower, upper)
    assert oracle is not None
    assert res.objective == pytest.approx(oracle, abs=1e-6)
