import math

import numpy as np
import pytest

from acbc.polyalg import (
    Polynomial,
    PolynomialSyntaxError,
    SpaceMismatchError,
    UnknownVariableError,
    VariableSpace,
    format_polynomial,
    monomial_basis,
    parse_polynomial,
)

SP = VariableSpace(("x", "y", "z"))


def random_poly(rng, space=SP, terms=6, degree=3):
    out = {}
    for _ in range(terms):
        e = tuple(int(v) for v in rng.integers(0, degree + 1, len(space)))
        if sum(e) <= degree:
            out[e] = float(rng.normal())
    return Polynomial(space, out)


def close(p, q, tol=1e-10):
    d = p - q
    scale = max([1.0] + [abs(c) for c in p.terms.values()] + [abs(c) for c in q.terms.values()])
    return all(abs(c) <= tol * scale for c in d.terms.values())


def test_parse_basic():
    p = parse_polynomial("x^2 - 2*x*y + 1", SP)
    assert p.evaluate([1.0, 1.0, 0.0]) == 0.0
    assert p.degree == 2
    assert parse_polynomial("(x+1)^2", SP) == parse_polynomial("x^2 + 2*x + 1", SP)
    assert parse_polynomial("-(x - y)", SP) == parse_polynomial("y - x", SP)


def test_parse_errors():
    with pytest.raises(UnknownVariableError):
        parse_polynomial("x + w", SP)
    with pytest.raises(PolynomialSyntaxError):
        parse_polynomial("x +* y", SP)
    with pytest.raises(PolynomialSyntaxError):
        parse_polynomial("x^1.5", SP)


def test_zero_and_constant():
    z = Polynomial.zero(SP)
    assert z.is_zero() and format_polynomial(z) == "0"
    assert Polynomial.constant(SP, 0.0).is_zero()
    assert Polynomial.constant(SP, 3.0).degree == 0


def test_ring_axioms_random():
    rng = np.random.default_rng(1)
    for _ in range(60):
        p, q, r = (random_poly(rng) for _ in range(3))
        assert close(p + q, q + p)
        assert close((p + q) + r, p + (q + r))
        assert close(p * q, q * p)
        assert close((p * q) * r, p * (q * r))
        assert close(p * (q + r), p * q + p * r)
        assert close(p - p, Polynomial.zero(SP))
        assert close(p * Polynomial.constant(SP, 1.0), p)


def test_print_parse_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = random_poly(rng)
        assert parse_polynomial(str(p), SP) == p


def test_print_is_graded_lex():
    p = parse_polynomial("1 + z + x*y + x^2 + y - 0.5*y^2", SP)
    assert str(p) == "1.0 + y + z + x^2 + x*y - 0.5*y^2"


def test_substitute_evaluate_commute():
    rng = np.random.default_rng(3)
    tgt = VariableSpace(("a", "b"))
    for _ in range(50):
        p = random_poly(rng)
        images = [random_poly(rng, tgt, terms=3, degree=2) for _ in range(3)]
        composed = p.substitute(images, tgt)
        for _ in range(5):
            pt = rng.uniform(-1.5, 1.5, 2)
            inner = [img.evaluate(pt) for img in images]
            a, b = composed.evaluate(pt), p.evaluate(inner)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(b), sum(abs(c) for c in composed.terms.values()))


def test_substitute_missing_image():
    p = parse_polynomial("x + y", SP)
    tgt = VariableSpace(("a",))
    with pytest.raises(KeyError):
        p.substitute({"x": Polynomial.variable(tgt, "a")}, tgt)


def test_space_mismatch():
    other = VariableSpace(("x", "y"))
    with pytest.raises(SpaceMismatchError):
        parse_polynomial("x", SP) + parse_polynomial("x", other)


def test_evaluate_many_matches_scalar():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = random_poly(rng)
        pts = rng.uniform(-2, 2, (30, 3))
        vec = p.evaluate_many(pts)
        sca = np.array([p.evaluate(z) for z in pts])
        assert np.allclose(vec, sca, rtol=1e-13, atol=1e-13)


def test_monomial_basis_sizes():
    sp6 = VariableSpace(tuple(f"v{i}" for i in range(6)))
    assert len(monomial_basis(sp6, 2)) == math.comb(8, 2)
    assert len(monomial_basis(sp6, 6)) == math.comb(12, 6) == 924
    assert len(monomial_basis(SP, 1, ["x", "z"])) == 3
    assert monomial_basis(SP, -1) == []


def test_embed_with_rename():
    p = parse_polynomial("x*y + 2", SP)
    big = VariableSpace(("x", "y", "z", "xh", "yh", "zh"))
    q = p.embed(big, {"x": "xh", "y": "yh", "z": "zh"})
    assert q.variables_used() == ("xh", "yh")
    assert q.evaluate([0, 0, 0, 2, 3, 0]) == 8.0


def test_variable_space_validation():
    with pytest.raises(ValueError):
        VariableSpace(("x", "x"))
    with pytest.raises(ValueError):
        VariableSpace(("u", "x"), ("input", "state"))
