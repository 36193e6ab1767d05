import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from feeder_microgrid import optim
from feeder_microgrid.exceptions import ModelError, SolverError
from feeder_microgrid.optim import (
    LinearModel,
    SolveStatus,
    polygon_ball,
    polygon_contains,
    quicksum,
    solve_lp,
    solve_milp,
)

BACKENDS = ["bnb", "highs"]


def _two_var_lp():
    model = LinearModel("vertex")
    x = model.add_var("x")
    y = model.add_var("y")
    model.add_constraint(x + 2 * y, "<=", 4, "c1")
    model.add_constraint(3 * x + y, "<=", 6, "c2")
    model.set_objective(x + y, "max")
    return model, x, y


def _random_binary_model(rng, n, m):
    model = LinearModel("random")
    xs = [model.add_var(f"x{j}", binary=True) for j in range(n)]
    c = rng.integers(-5, 21, size=n)
    a = rng.integers(0, 10, size=(m, n))
    b = rng.integers(5, 25, size=m)
    for i in range(m):
        model.add_constraint(quicksum(float(a[i, j]) * xs[j] for j in range(n)), "<=", float(b[i]))
    model.set_objective(quicksum(float(c[j]) * xs[j] for j in range(n)), "max")
    return model, c, a, b


def _enumerate(c, a, b):
    best = -math.inf
    for bits in itertools.product((0, 1), repeat=len(c)):
        v = np.array(bits)
        if np.all(a @ v <= b):
            best = max(best, float(c @ v))
    return best


def test_lp_single_bound():
    model = LinearModel()
    x = model.add_var("x", 0.0, 3.0)
    model.set_objective(x, "max")

    solution = solve_lp(model)

    # Assertions
    assert solution.status is SolveStatus.OPTIMAL
    assert solution.objective == pytest.approx(3.0)


def test_lp_vertex_solution():
    """
    max x + y over two crossing constraints lands on their intersection.
    """
    model, x, y = _two_var_lp()

    solution = solve_lp(model)

    # Assertions
    assert solution.is_optimal
    assert solution.objective == pytest.approx(3.2, abs=1e-7)
    assert solution.value(x) == pytest.approx(1.6, abs=1e-7)
    assert solution.value(y) == pytest.approx(1.2, abs=1e-7)
    assert model.max_violation(solution.x) < 1e-7


def test_lp_infeasible():
    model = LinearModel()
    x = model.add_var("x")
    model.add_constraint(x, "<=", -1.0)
    model.set_objective(0.0, "min")

    solution = solve_lp(model)

    # Assertions
    assert solution.status is SolveStatus.INFEASIBLE
    assert not solution.has_point
    with pytest.raises(SolverError):
        solution.value(x)


def test_lp_duality_on_random_instances():
    """
    Primal and dual objectives agree on random feasible bounded LPs.
    """
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, m = rng.integers(2, 7), rng.integers(1, 6)
        model = LinearModel("dual")
        xs = [model.add_var(f"x{j}", 0.0, 10.0) for j in range(n)]
        a = rng.uniform(0.0, 1.5, size=(m, n))
        b = rng.uniform(1.0, 20.0, size=m)
        for i in range(m):
            model.add_constraint(quicksum(float(a[i, j]) * xs[j] for j in range(n)), "<=", float(b[i]))
        model.add_constraint(xs[0] + xs[1], ">=", 0.5)
        model.set_objective(quicksum(float(v) * x for v, x in zip(rng.uniform(-1, 3, size=n), xs)))

        solution = solve_lp(model)

        # Assertions
        assert solution.is_optimal
        assert solution.dual_objective is not None
        assert solution.objective == pytest.approx(solution.dual_objective, abs=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_milp_two_binaries(backend):
    model = LinearModel()
    x = model.add_var("x", binary=True)
    y = model.add_var("y", binary=True)
    model.add_constraint(x + y, "<=", 1.5)
    model.set_objective(x + y, "max")

    solution = solve_milp(model, backend=backend)

    # Assertions
    assert solution.is_optimal
    assert solution.objective == pytest.approx(1.0)
    assert solution.value(x) + solution.value(y) == pytest.approx(1.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_model(backend):
    solution = solve_milp(LinearModel("empty"), backend=backend)

    # Assertions
    assert solution.is_optimal
    assert solution.objective == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_knapsack_matches_enumeration(backend):
    """
    An 8-item knapsack agrees with brute force over all 256 subsets.
    """
    rng = np.random.default_rng(5)
    weights = rng.integers(1, 15, size=8)
    values = rng.integers(1, 30, size=8)
    capacity = int(weights.sum() // 2)
    model = LinearModel("knapsack")
    xs = [model.add_var(f"item{j}", binary=True) for j in range(8)]
    model.add_constraint(quicksum(float(w) * x for w, x in zip(weights, xs)), "<=", capacity)
    model.set_objective(quicksum(float(v) * x for v, x in zip(values, xs)), "max")

    solution = solve_milp(model, backend=backend)

    # Assertions
    assert solution.is_optimal
    assert solution.objective == pytest.approx(
        _enumerate(values, weights[None, :], np.array([capacity])), abs=1e-6
    )


@pytest.mark.parametrize("backend", BACKENDS)
def test_milp_matches_enumeration_on_random_instances(backend):
    """
    Sixty random pure-binary programs with up to ten binaries and ten rows
    match exhaustive enumeration.
    """
    rng = np.random.default_rng(2024)
    for _ in range(60):
        n, m = int(rng.integers(2, 11)), int(rng.integers(1, 11))
        model, c, a, b = _random_binary_model(rng, n, m)

        solution = solve_milp(model, backend=backend)

        # Assertions
        assert solution.is_optimal
        assert solution.objective == pytest.approx(_enumerate(c, a, b), abs=1e-6)
        assert model.max_violation(solution.x) < 1e-6


def test_branch_and_bound_is_deterministic():
    rng = np.random.default_rng(9)
    model, *_ = _random_binary_model(rng, 10, 6)

    first = solve_milp(model, backend="bnb")
    second = solve_milp(model, backend="bnb")

    # Assertions
    assert first.nodes == second.nodes
    assert np.array_equal(first.x, second.x)
    assert first.objective == second.objective


def test_node_limit_reports_iteration_limit():
    """
    A fractional root with a one-node budget stops without an incumbent.
    """
    model = LinearModel()
    x1, x2, x3 = (model.add_var(f"x{j}", binary=True) for j in range(3))
    model.add_constraint(2 * x1 + 3 * x2 + x3, "<=", 4)
    model.set_objective(5 * x1 + 4 * x2 + 3 * x3, "max")

    solution = solve_milp(model, backend="bnb", node_limit=1)

    # Assertions
    assert solution.status is SolveStatus.ITERATION_LIMIT
    assert not solution.has_point


def test_milp_without_binaries_is_an_lp():
    model, _, _ = _two_var_lp()

    solution = solve_milp(model)

    # Assertions
    assert solution.objective == pytest.approx(3.2, abs=1e-7)
    assert solution.nodes == 0


def test_polygon_hexagon_membership():
    """
    Unit hexagon: centre and vertex inside, edge-normal direction switches
    between 0.86 and 0.87 of the radius.
    """
    c30, s30 = math.cos(math.pi / 6), math.sin(math.pi / 6)

    # Assertions
    assert polygon_contains(0.0, 0.0, 1.0)
    assert polygon_contains(1.0, 0.0, 1.0)
    assert polygon_contains(0.86 * c30, 0.86 * s30, 1.0)
    assert not polygon_contains(0.87 * c30, 0.87 * s30, 1.0)
    assert not polygon_contains(0.90 * c30, 0.90 * s30, 1.0)
    assert not polygon_contains(1400.0, 1400.0, 2000.0)


def test_polygon_constraints_inside_ball():
    """
    Sampled points satisfying the polygon rows lie inside the disc.
    """
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2100.0, 2100.0, size=(10_000, 2))
    inside = [polygon_contains(p, q, 2000.0) for p, q in pts]

    # Assertions
    assert any(inside)
    assert np.all(np.hypot(pts[inside, 0], pts[inside, 1]) <= 2000.0 + 1e-6)


def test_polygon_ball_limits_an_lp():
    """
    Maximising along an edge normal stops at the inradius.
    """
    model = LinearModel()
    p = model.add_var("p", -math.inf, math.inf)
    q = model.add_var("q", -math.inf, math.inf)
    model.add_constraints(polygon_ball(p, q, 2000.0, 6), "cap")
    model.set_objective(p * math.cos(math.pi / 6) + q * math.sin(math.pi / 6), "max")

    solution = solve_lp(model)

    # Assertions
    assert len(model.rows) == 6
    assert solution.objective == pytest.approx(2000.0 * math.cos(math.pi / 6), abs=1e-6)


def test_polygon_rejects_bad_arguments():
    model = LinearModel()
    p, q = model.add_var("p"), model.add_var("q")
    with pytest.raises(ModelError):
        polygon_ball(p, q, 1.0, 2)
    with pytest.raises(ModelError):
        polygon_ball(p, q, 0.0, 6)


def test_model_errors():
    """
    Ill-formed models fail fast with ModelError.
    """
    model = LinearModel()
    x = model.add_var("x")
    other = LinearModel()
    other.add_var("a")
    stray = other.add_var("b")

    # Assertions
    with pytest.raises(ModelError):
        model.add_var("x")
    with pytest.raises(ModelError):
        _ = x * x
    with pytest.raises(ModelError):
        model.add_constraint(stray, "<=", 1.0)
    with pytest.raises(ModelError):
        model.set_objective(x, "maximise")
    with pytest.raises(ModelError):
        solve_milp(model, gap=-1.0)
    model.add_var("z", binary=True)
    with pytest.raises(ModelError):
        solve_milp(model, backend="cplex")


def test_lp_dump(tmp_path):
    """
    The LP text dump carries every section an external solver expects.
    """
    model = LinearModel("dump")
    x = model.add_var("x[a,0]", 0.0, 5.0)
    y = model.add_var("y", binary=True)
    model.add_constraint(x - 2 * y, ">=", -1.0, "row[1]")
    model.set_objective(x + 3 * y, "max")

    path = model.write_lp(tmp_path / "model.lp")
    text = path.read_text()

    # Assertions
    lines = text.splitlines()
    assert lines[0] == "\\ dump"
    assert lines[1] == "Maximize"
    assert lines[2].startswith(" obj:")
    for section in ("Subject To", "Bounds", "Binaries", "End"):
        assert section in lines
    assert "x_a_0_" in text
    assert " row_1_: 1 x_a_0_ - 2 y >= -1" in lines
    assert " 0 <= x_a_0_ <= 5" in lines


def test_lp_retries_next_method_on_numerical_trouble(mocker):
    """
    A simplex run that stalls is retried with the next HiGHS method.
    """
    real = optim.linprog
    methods = []

    def flaky(*args, method, **kwargs):
        methods.append(method)
        if len(methods) == 1:
            return SimpleNamespace(status=4, message="numerical difficulties")
        return real(*args, method=method, **kwargs)

    mocker.patch.object(optim, "linprog", side_effect=flaky)
    model, _, _ = _two_var_lp()

    solution = solve_lp(model)

    # Assertions
    assert methods == ["highs-ds", "highs-ipm"]
    assert solution.objective == pytest.approx(3.2, abs=1e-6)


def test_lp_gives_up_after_every_method(mocker):
    mocker.patch.object(optim, "linprog",
                        return_value=SimpleNamespace(status=1, message="iteration limit"))
    model, _, _ = _two_var_lp()

    solution = solve_lp(model)

    # Assertions
    assert solution.status is SolveStatus.ITERATION_LIMIT
    assert optim.linprog.call_count == len(optim.LP_METHODS)
