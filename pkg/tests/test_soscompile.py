import math

import numpy as np
import pytest

from acbc.polyalg import VariableSpace, parse_polynomial
from acbc.sdpsolve import solve_feasibility
from acbc.soscompile import (
    AffinePoly,
    NonlinearityError,
    build_safety_program,
    build_reach_program,
    compile_to_sdp,
    extract_certificate,
    gram_checks,
    parse_fixed_policy,
    prune_gram_basis,
    sos_constraint_program,
)

X = VariableSpace(("x",))


def test_affine_products_are_checked():
    a = AffinePoly.template(X, [(0,), (1,)], [0, 1])
    p = parse_polynomial("x + 1", X)
    assert a.times(p).degree == 2
    with pytest.raises(NonlinearityError):
        a * a


def test_trivial_square():
    prog = sos_constraint_program(parse_polynomial("x^2 + 2*x + 1", X))
    sdp = compile_to_sdp(prog)
    assert sdp.block_sizes == [2]
    sol = solve_feasibility(sdp)
    assert sol.status == "feasible"
    assert np.allclose(sol.blocks[0], [[1, 1], [1, 1]], atol=1e-7)


def test_vehicle_sizes_degree_mode(vehicle_aug, vehicle_regions):
    prog = build_safety_program(vehicle_aug, vehicle_regions, deg_b=2, deg_policy=1, deg_mult=2)
    names = [c.name for c in prog.constraints]
    assert names == ["init[0]", "unsafe[0]", "decrease"]
    dec = prog.constraints[-1]
    assert dec.degree == 4 and len(dec.variables) == 6
    sdp = compile_to_sdp(prog, prune="degree")
    sizes = {lab: n for lab, n in zip(sdp.block_labels, sdp.block_sizes)}
    assert sizes["decrease.gram"] == 28 == math.comb(8, 2)
    assert sizes["init[0].gram"] == 15 == math.comb(6, 2)
    assert sizes["unsafe[0].gram"] == 15
    assert any("odd degree" in w for w in prog.warnings)


def test_safety_program_rejects_bad_constants(vehicle_aug, vehicle_regions):
    with pytest.raises(ValueError):
        build_safety_program(vehicle_aug, vehicle_regions, eps_lo=1.0, eps_hi=1.0)


def test_constant_certificate_infeasible(vehicle_aug, vehicle_regions):
    prog = build_safety_program(vehicle_aug, vehicle_regions, deg_b=0)
    sol = solve_feasibility(compile_to_sdp(prog))
    assert sol.status == "infeasible"


def test_room_program_shapes(room_aug, room_reach):
    pol = parse_fixed_policy("0;0", room_aug)
    prog = build_reach_program(room_aug, room_reach, deg_v=2, eps=0.01, fixed_policy=pol)
    names = [c.name for c in prog.constraints]
    assert sum(n.startswith("boundary") for n in names) == 4
    dec = prog.constraints[-1]
    assert dec.name == "decrease" and dec.degree == 4
    assert set(dec.variables) == {"T1", "T2", "Th1", "Th2", "vh1", "vh2"}
    assert prog.policies == []


def test_room_degree_six_is_large(room_aug, room_reach):
    pol = parse_fixed_policy("0;0", room_aug)
    prog = build_reach_program(room_aug, room_reach, deg_v=6, eps=0.01, fixed_policy=pol)
    dec = prog.constraints[-1]
    assert dec.degree == 12 and len(dec.gram_basis) == 924


def test_room_budget_for_degrees_two_and_four(room_aug, room_reach):
    pol = parse_fixed_policy("0;0", room_aug)
    for deg in (2, 4):
        sdp = compile_to_sdp(build_reach_program(room_aug, room_reach, deg_v=deg, fixed_policy=pol))
        assert sum(sdp.block_sizes) <= 1200


def test_fixed_policy_parsing(room_aug, vehicle_aug):
    with pytest.raises(ValueError):
        parse_fixed_policy("0", room_aug)
    with pytest.raises(ValueError):
        parse_fixed_policy("v1;0", room_aug)
    p = parse_fixed_policy("u1 + xh1", vehicle_aug, "u")
    assert p[0].variables_used() == ("xh1", "u1")


def test_reach_program_requires_positive_slack(room_aug, room_reach):
    with pytest.raises(ValueError):
        build_reach_program(room_aug, room_reach, eps=0.0)


def test_diagonal_pruning_keeps_needed_monomials():
    sp = VariableSpace(("x", "y"))
    prog = sos_constraint_program(parse_polynomial("x^4 + y^2 + 1", sp))
    basis = prune_gram_basis(prog.constraints[0], "diagonal")
    assert set(basis) == {(0, 0), (1, 0), (0, 1), (2, 0)}
    assert len(prune_gram_basis(prog.constraints[0], "degree")) == 6


def test_gram_matching_on_random_assignments(vehicle_aug, vehicle_regions):
    """Polynomial-level re-substitution agrees with the sparse equality rows."""
    prog = build_safety_program(vehicle_aug, vehicle_regions)
    sdp = compile_to_sdp(prog)
    rng = np.random.default_rng(0)
    for _ in range(5):
        blocks = []
        for n in sdp.block_sizes:
            G = rng.standard_normal((n, n))
            blocks.append(G @ G.T)
        w = rng.standard_normal(sdp.n_free)
        res = sdp.residual(blocks, w)
        checks = gram_checks(prog, sdp, blocks, w)
        for ci, chk in enumerate(checks):
            rows = res[sdp.constraint_rows[ci]]
            expected = float(np.max(np.abs(rows)))
            assert abs(chk.residual - expected) < 1e-9 * max(1.0, expected)
        # shift b so the assignment is exactly feasible; residual then vanishes
        sdp_b = sdp.b + res
        sdp_feasible = type(sdp)(sdp.block_sizes, sdp.block_labels, sdp.A, sdp.F, sdp_b, sdp.row_labels,
                                 sdp.free_names, sdp.constraint_blocks, sdp.constraint_rows, sdp.block_bases)
        assert np.max(np.abs(sdp_feasible.residual(blocks, w))) < 1e-9


def test_synthesized_gram_checks(vehicle_synthesis):
    prog, sdp, sol, cert = vehicle_synthesis
    assert sol.status == "feasible"
    for chk in cert.gram_checks:
        assert chk.residual < 1e-9
        assert chk.min_eig >= -1e-8


def test_extracted_shapes(vehicle_synthesis):
    _, _, _, cert = vehicle_synthesis
    assert cert.polynomial.degree == 2
    assert set(cert.polynomial.variables_used()) <= {"x1", "x2", "xh1", "xh2"}
    assert len(cert.policy) == 1 and cert.policy[0].degree == 1
    assert set(cert.policy[0].variables_used()) <= {"x1", "x2", "xh1", "xh2", "u1"}
    assert cert.multipliers


def test_extract_refuses_infeasible():
    prog = sos_constraint_program(parse_polynomial("x^2 - 1", X))
    sdp = compile_to_sdp(prog)
    sol = solve_feasibility(sdp)
    with pytest.raises(ValueError):
        extract_certificate(prog, sdp, sol)


def test_sdp_dump(tmp_path):
    prog = sos_constraint_program(parse_polynomial("x^2 + 2*x + 1", X))
    sdp = compile_to_sdp(prog)
    path = tmp_path / "sdp.txt"
    sdp.dump(path)
    text = path.read_text()
    assert "rhs" in text and text.endswith("\n")
