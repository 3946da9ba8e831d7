import numpy as np
import pytest
import scipy.sparse as sps

from acbc.polyalg import VariableSpace, parse_polynomial
from acbc.sdpsolve import (
    BudgetExceededError,
    SolverConfig,
    min_eigenvalue_check,
    project_onto_equalities,
    solve_feasibility,
)
from acbc.soscompile import SdpProblem, compile_to_sdp, sos_constraint_program
from sdp_instances import constructed_feasible, constructed_infeasible

XY = VariableSpace(("x", "y"))
MOTZKIN = "x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1"


def sos_sdp(text, space=XY, prune="diagonal"):
    return compile_to_sdp(sos_constraint_program(parse_polynomial(text, space)), prune=prune)


def test_square_feasible():
    sol = solve_feasibility(sos_sdp("x^2 + 2*x + 1", VariableSpace(("x",))))
    assert sol.status == "feasible"
    assert np.max(np.abs(sol.blocks[0] - np.array([[1.0, 1.0], [1.0, 1.0]]))) < 1e-7
    assert sol.residual <= 1e-9


def test_negative_constant_infeasible():
    sol = solve_feasibility(sos_sdp("x^2 - 1", VariableSpace(("x",))))
    assert sol.status == "infeasible"
    assert sol.y is not None


@pytest.mark.parametrize("prune", ["diagonal", "degree"])
def test_motzkin_infeasible_with_ray(prune):
    sdp = sos_sdp(MOTZKIN, prune=prune)
    sol = solve_feasibility(sdp)
    assert sol.status == "infeasible"
    y = sol.y
    assert abs(sdp.b @ y - 1.0) < 1e-6
    for a, n in zip(sdp.A, sdp.block_sizes):
        S = -(a.T @ y).reshape(n, n)
        assert np.linalg.eigvalsh((S + S.T) / 2)[0] >= -1e-6


def test_motzkin_times_norm_feasible():
    sol = solve_feasibility(sos_sdp(f"(x^2 + y^2 + 1)*({MOTZKIN})"))
    assert sol.status == "feasible"


def test_random_instances_classified():
    rng = np.random.default_rng(2024)
    for k in range(50):
        sizes = tuple(int(v) for v in rng.integers(1, 6, rng.integers(1, 4)))
        m = int(rng.integers(2, 9))
        assert solve_feasibility(constructed_feasible(rng, sizes, m, int(rng.integers(0, 3)))).status == "feasible", k
        assert solve_feasibility(constructed_infeasible(rng, sizes, m)).status == "infeasible", k


def test_feasible_solution_validated():
    rng = np.random.default_rng(5)
    sdp = constructed_feasible(rng)
    sol = solve_feasibility(sdp)
    assert np.max(np.abs(sdp.residual(sol.blocks, sol.w))) <= 1e-9
    assert all(np.linalg.eigvalsh(X)[0] >= -1e-8 for X in sol.blocks)


def test_zero_psd_rows_inconsistent():
    # free-only row 0*X + w = 1 and w = 2 cannot both hold
    A = [sps.csr_matrix(np.zeros((2, 1)))]
    F = sps.csr_matrix(np.array([[1.0], [1.0]]))
    sdp = SdpProblem([1], ["blk"], A, F, np.array([1.0, 2.0]))
    assert solve_feasibility(sdp).status == "infeasible"


def test_budget():
    sdp = sos_sdp("x^2 + 2*x + 1", VariableSpace(("x",)))
    with pytest.raises(BudgetExceededError):
        solve_feasibility(sdp, SolverConfig(budget=1))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol=0)
    with pytest.raises(ValueError):
        SolverConfig(step_fraction=1.0)


def test_min_eigenvalue_check():
    ok, lam = min_eigenvalue_check(np.diag([1.0, -1e-9]))
    assert ok and lam == pytest.approx(-1e-9)
    assert not min_eigenvalue_check(np.diag([1.0, -1e-3]))[0]
    with pytest.raises(ValueError):
        min_eigenvalue_check(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_projection_restores_equalities():
    rng = np.random.default_rng(9)
    sdp = constructed_feasible(rng)
    sol = solve_feasibility(sdp)
    noisy = [X + 1e-6 * np.eye(len(X)) for X in sol.blocks]
    blocks, w = project_onto_equalities(sdp, noisy, sol.w)
    assert np.max(np.abs(sdp.residual(blocks, w))) < 1e-10
