"""Checking candidate certificates by dense sampling and by fixed SOS re-checks.

Sampling never proves anything; it only looks for counterexamples.  A
certificate is called verified only when :func:`recheck_fixed_certificate`
finds SOS multipliers for it with the certificate and policy held fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentedSystem, RegionBundle
from .polyalg import Polynomial, VariableSpace, parse_polynomial
from .sysmodel import SemiAlgebraicSet, sample_set

NONSTRICT_TOL = 1e-9
MAX_WITNESSES = 10


@dataclass
class Certificate:
    kind: str                              # safety | reach | plain
    space: VariableSpace                   # (x, xh, u, uh)
    polynomial: Polynomial                 # B or V over (x, xh)
    policy: tuple[Polynomial, ...]         # partner input (safety) or input (reach)
    constants: dict
    provenance: str = "synthesized"
    multipliers: dict = field(default_factory=dict)   # name -> (lambda, g), original coordinates
    gram_checks: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("safety", "reach", "plain"):
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if self.provenance not in ("synthesized", "user-supplied"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.kind == "safety":
            lo, hi = self.constants.get("eps_lo"), self.constants.get("eps_hi")
            if lo is None or hi is None or not hi > lo:
                raise ValueError("safety certificate needs eps_hi > eps_lo")
        if self.kind == "reach":
            eps = self.constants.get("eps")
            if eps is None or not eps > 0:
                raise ValueError("reach certificate needs slack eps > 0")
        for p in (self.polynomial,) + tuple(self.policy):
            if p.space != self.space:
                raise ValueError("certificate polynomials must live in the augmented variable space")


# ---------------------------------------------------------------------------
# exchange format


def _encode(p: Polynomial) -> list[dict]:
    return [{"exponents": list(m), "coefficient": p.terms[m]} for m in p.monomials()]


def _decode(doc, space: VariableSpace) -> Polynomial:
    if isinstance(doc, str):
        return parse_polynomial(doc, space)
    if not isinstance(doc, list):
        raise ValueError("polynomial must be a term list or an expression string")
    terms = {}
    for t in doc:
        e = tuple(int(v) for v in t["exponents"])
        if len(e) != len(space):
            raise ValueError(f"term exponents {e} do not match {len(space)} variables")
        terms[e] = terms.get(e, 0.0) + float(t["coefficient"])
    return Polynomial(space, terms)


def certificate_to_dict(cert: Certificate) -> dict:
    return {
        "kind": cert.kind,
        "variables": list(cert.space.names),
        "polynomial": _encode(cert.polynomial),
        "policy": [_encode(p) for p in cert.policy],
        "constants": dict(sorted(cert.constants.items())),
        "provenance": cert.provenance,
    }


def dumps_certificate(cert: Certificate) -> str:
    return json.dumps(certificate_to_dict(cert), sort_keys=True, indent=2) + "\n"


def save_certificate(cert: Certificate, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_certificate(cert))


def certificate_from_dict(doc: dict, aug: AugmentedSystem) -> Certificate:
    allowed = {"kind", "variables", "polynomial", "policy", "constants", "provenance"}
    if not isinstance(doc, dict):
        raise ValueError("certificate file must hold a JSON object")
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown certificate fields: {sorted(extra)}")
    space = aug.full_space
    names = doc.get("variables", list(space.names))
    if list(names) != list(space.names):
        raise ValueError(f"certificate variables {names} do not match the system {list(space.names)}")
    kind = doc.get("kind")
    poly = _decode(doc["polynomial"], space)
    policy = tuple(_decode(p, space) for p in doc.get("policy", []))
    m = aug.m
    if len(policy) != m:
        raise ValueError(f"policy needs {m} components, got {len(policy)}")
    constants = {k: float(v) for k, v in doc.get("constants", {}).items()}
    return Certificate(kind, space, poly, policy, constants, doc.get("provenance", "user-supplied"))


def load_certificate(path, aug: AugmentedSystem) -> Certificate:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return certificate_from_dict(doc, aug)


# ---------------------------------------------------------------------------
# sampling validation


@dataclass
class ConditionReport:
    name: str
    description: str
    samples: int
    max_excess: float          # max of (lhs - bound); <= 0 means satisfied everywhere sampled
    violations: int
    tolerance: float
    witnesses: list[tuple[tuple[float, ...], float]] = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max(0.0, self.max_excess)

    @property
    def violation_rate(self) -> float:
        return self.violations / self.samples if self.samples else 0.0

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"condition": self.name, "description": self.description, "samples": self.samples,
                "max_excess": self.max_excess, "max_violation": self.max_violation,
                "violations": self.violations, "violation_rate": self.violation_rate,
                "tolerance": self.tolerance,
                "witnesses": [{"point": list(p), "excess": v} for p, v in self.witnesses]}


@dataclass
class ValidationReport:
    kind: str
    conditions: list[ConditionReport]

    @property
    def verdict(self) -> str:
        return "no-violation-found" if all(c.ok for c in self.conditions) else "violated"

    def condition(self, name: str) -> ConditionReport:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "verdict": self.verdict, "conditions": [c.to_dict() for c in self.conditions]}


def _pair_to_full(aug: AugmentedSystem, pair_pts: np.ndarray, inputs: np.ndarray | None = None,
                  partner: bool = False) -> np.ndarray:
    n2, m = 2 * aug.n, aug.m
    Z = np.zeros((len(pair_pts), n2 + 2 * m))
    Z[:, :n2] = pair_pts
    if inputs is not None and m:
        if partner:
            Z[:, n2 + m:] = inputs
        else:
            Z[:, n2:n2 + m] = inputs
    return Z


def _region_points(region: SemiAlgebraicSet, count: int, seed: int) -> np.ndarray:
    pts = sample_set(region, count=count, seed=seed, stratified=True)
    corners = region.box_corners()
    if len(corners):
        corners = corners[region.contains_many(corners)]
        pts = np.concatenate([pts, corners])
    return pts


def _input_points(U: SemiAlgebraicSet, count: int, seed: int) -> np.ndarray:
    if len(U.space) == 0:
        return np.zeros((count, 0))
    return sample_set(U, count=count, seed=seed, stratified=True)


def _product_with_corners(aug, pair_pts, inp_pts, R: SemiAlgebraicSet, U: SemiAlgebraicSet, partner: bool):
    """Random pairing of state and input samples plus all corner combinations."""
    Z = _pair_to_full(aug, pair_pts, inp_pts[: len(pair_pts)] if aug.m else None, partner)
    rc = R.box_corners()
    rc = rc[R.contains_many(rc)] if len(rc) else rc
    uc = U.box_corners() if aug.m else np.zeros((1, 0))
    if len(rc) and len(uc):
        ii, jj = np.meshgrid(np.arange(len(rc)), np.arange(len(uc)), indexing="ij")
        Zc = _pair_to_full(aug, rc[ii.ravel()], uc[jj.ravel()] if aug.m else None, partner)
        Z = np.concatenate([Z, Zc])
    return Z


def _apply_policy(aug: AugmentedSystem, Z: np.ndarray, policy: Sequence[Polynomial], target: str) -> np.ndarray:
    Z = Z.copy()
    n2, m = 2 * aug.n, aug.m
    vals = [p.evaluate_many(Z) for p in policy]
    for i, v in enumerate(vals):
        if target == "uh":
            Z[:, n2 + m + i] = v
        else:
            Z[:, n2 + i] = v
    return Z


def _decrease(aug: AugmentedSystem, cert: Polynomial, Z: np.ndarray) -> np.ndarray:
    nxt = np.stack([f.evaluate_many(Z) for f in aug.dynamics], axis=1)
    Zn = Z.copy()
    Zn[:, : 2 * aug.n] = nxt
    return cert.evaluate_many(Zn) - cert.evaluate_many(Z)


def condition_excess(cert: Certificate, aug: AugmentedSystem, condition: str, point: Sequence[float]) -> float:
    """Scalar re-evaluation of one condition at a full-space point.

    Uses plain scalar polynomial evaluation (independent of the vectorised
    path) so reported witnesses can be re-checked exactly.
    """
    z = [float(v) for v in point]
    n2, m = 2 * aug.n, aug.m
    P = cert.polynomial
    c = cert.constants
    if condition in ("initial", "reach-initial"):
        bound = c["eps_lo"] if condition == "initial" else 0.0
        return P.evaluate(z) - bound
    if condition == "unsafe":
        return c["eps_hi"] - P.evaluate(z)
    if condition == "boundary":
        return c["eps"] - P.evaluate(z)
    if condition in ("decrease", "reach-decrease"):
        z = list(z)
        off = n2 + m if condition == "decrease" else n2
        for i, p in enumerate(cert.policy):
            z[off + i] = p.evaluate(z)
        nxt = [f.evaluate(z) for f in aug.dynamics]
        zn = list(z)
        zn[:n2] = nxt
        delta = P.evaluate(zn) - P.evaluate(z)
        return delta + (c["eps"] if condition == "reach-decrease" else 0.0)
    raise ValueError(f"unknown condition {condition!r}")


def _report(cert, aug, name, desc, Z, excess, tol) -> ConditionReport:
    bad = np.nonzero(excess > tol)[0]
    witnesses = []
    # largest violations first; keep only those the scalar path reproduces
    for i in bad[np.argsort(-excess[bad], kind="stable")]:
        if len(witnesses) >= MAX_WITNESSES:
            break
        pt = tuple(float(v) for v in Z[i])
        val = condition_excess(cert, aug, name, pt)
        if val > tol:
            witnesses.append((pt, val))
    max_excess = float(excess.max()) if len(excess) else -math.inf
    return ConditionReport(name, desc, int(len(Z)), max_excess, int(len(bad)), tol, witnesses)


def validate_safety_certificate(cert: Certificate, aug: AugmentedSystem, regions: RegionBundle,
                                samples: int = 100_000, seed: int = 0) -> ValidationReport:
    """Sample the three safety conditions: B <= eps_lo on R0, B >= eps_hi on Ru, B decreasing."""
    if cert.kind != "safety":
        raise ValueError("safety validation needs a safety certificate")
    B = cert.polynomial
    out = []
    P0 = _pair_to_full(aug, _region_points(regions.R0, samples, seed))
    out.append(_report(cert, aug, "initial", "B <= eps_lo on R0", P0,
                       B.evaluate_many(P0) - cert.constants["eps_lo"], NONSTRICT_TOL))
    Pu = _pair_to_full(aug, _region_points(regions.Ru, samples, seed + 1))
    out.append(_report(cert, aug, "unsafe", "B >= eps_hi on Ru", Pu,
                       cert.constants["eps_hi"] - B.evaluate_many(Pu), NONSTRICT_TOL))
    pr = sample_set(regions.R, count=samples, seed=seed + 2, stratified=True)
    pu = _input_points(aug.U, samples, seed + 3)
    Z = _product_with_corners(aug, pr, pu, regions.R, aug.U, partner=False)
    Z = _apply_policy(aug, Z, cert.policy, "uh")
    out.append(_report(cert, aug, "decrease", "B(f(x,u), f(xh,uh)) - B(x,xh) <= 0 with uh from the policy",
                       Z, _decrease(aug, B, Z), NONSTRICT_TOL))
    return ValidationReport("safety", out)


def validate_reach_certificate(cert: Certificate, aug: AugmentedSystem, regions: RegionBundle,
                               samples: int = 100_000, seed: int = 0) -> ValidationReport:
    """Sample V <= 0 on R0, V >= eps on the boundary faces, V decreasing by eps on the closure."""
    if cert.kind != "reach":
        raise ValueError("reach validation needs a reach certificate")
    if regions.boundary is None or regions.closure is None:
        raise ValueError("reach regions required")
    V = cert.polynomial
    eps = cert.constants["eps"]
    out = []
    P0 = _pair_to_full(aug, _region_points(regions.R0, samples, seed))
    out.append(_report(cert, aug, "reach-initial", "V <= 0 on R0", P0, V.evaluate_many(P0), NONSTRICT_TOL))
    Pb = _pair_to_full(aug, _region_points(regions.boundary, samples, seed + 1))
    out.append(_report(cert, aug, "boundary", "V >= eps on boundary faces outside Ru", Pb,
                       eps - V.evaluate_many(Pb), NONSTRICT_TOL))
    pr = sample_set(regions.closure, count=samples, seed=seed + 2, stratified=True)
    pu = _input_points(aug.Uh, samples, seed + 3)
    Z = _product_with_corners(aug, pr, pu, regions.closure, aug.Uh, partner=True)
    Z = _apply_policy(aug, Z, cert.policy, "u")
    out.append(_report(cert, aug, "reach-decrease", "V(f(x,u), f(xh,uh)) - V(x,xh) <= -eps with u from the policy",
                       Z, _decrease(aug, V, Z) + eps, NONSTRICT_TOL))
    return ValidationReport("reach", out)


def validate_certificate(cert: Certificate, aug: AugmentedSystem, regions: RegionBundle,
                         samples: int = 100_000, seed: int = 0) -> ValidationReport:
    if cert.kind == "safety":
        return validate_safety_certificate(cert, aug, regions, samples, seed)
    return validate_reach_certificate(cert, aug, regions, samples, seed)


# ---------------------------------------------------------------------------
# policy range


@dataclass
class PolicyBoundsReport:
    checked: int
    out_of_bounds: int
    witnesses: list[tuple[tuple[float, ...], tuple[float, ...]]]

    @property
    def fraction(self) -> float:
        return self.out_of_bounds / self.checked if self.checked else 0.0

    def to_dict(self) -> dict:
        return {"checked": self.checked, "out_of_bounds": self.out_of_bounds, "fraction": self.fraction,
                "witnesses": [{"point": list(p), "policy": list(v)} for p, v in self.witnesses]}


def check_policy_bounds(cert: Certificate, aug: AugmentedSystem, samples: int = 100_000,
                        seed: int = 0) -> PolicyBoundsReport:
    """How often the policy output leaves the input set on sampled (x, xh, input)."""
    if not cert.policy:
        return PolicyBoundsReport(0, 0, [])
    partner_input = cert.kind == "reach"
    R = aug.R
    pr = sample_set(R, count=samples, seed=seed, stratified=True)
    U = aug.Uh if partner_input else aug.U
    pu = _input_points(U, samples, seed + 1)
    Z = _product_with_corners(aug, pr, pu, R, U, partner=partner_input)
    vals = np.stack([p.evaluate_many(Z) for p in cert.policy], axis=1)
    inside = aug.U.contains_many(vals)
    bad = np.nonzero(~inside)[0]
    if len(bad):
        # report the furthest excursions first
        lo = np.array([b[0] for b in aug.U.bounding_box()]) if aug.U.bounding_box() else None
        hi = np.array([b[1] for b in aug.U.bounding_box()]) if aug.U.bounding_box() else None
        if lo is not None:
            dist = np.maximum(lo - vals[bad], 0).sum(axis=1) + np.maximum(vals[bad] - hi, 0).sum(axis=1)
            bad = bad[np.argsort(-dist, kind="stable")]
    witnesses = [(tuple(float(v) for v in Z[i]), tuple(float(v) for v in vals[i])) for i in bad[:MAX_WITNESSES]]
    return PolicyBoundsReport(int(len(Z)), int(len(np.nonzero(~inside)[0])), witnesses)


# ---------------------------------------------------------------------------
# fixed-certificate SOS re-check


@dataclass
class RecheckResult:
    outcome: str                  # certified | inconclusive
    solver_status: str
    gram_checks: list
    message: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.outcome == "certified"

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "solver_status": self.solver_status, "message": self.message,
                "gram_checks": [{"constraint": g.name, "residual": g.residual, "min_eig": g.min_eig}
                                for g in self.gram_checks],
                "solver": self.stats}


def recheck_fixed_certificate(cert: Certificate, aug: AugmentedSystem, regions: RegionBundle, *,
                              deg_mult: int | None = None, config=None, tighten: float = 0.0) -> RecheckResult:
    """Search SOS multipliers with the certificate and its policy held fixed.

    The policy is substituted into the dynamics, so the decrease condition
    is checked along the policy itself.  Certified only if the multiplier
    SDP is feasible and every Gram block re-checks.
    """
    from .sdpsolve import solve_feasibility
    from .soscompile import build_safety_program, build_reach_program, compile_to_sdp, gram_checks

    deg = max(cert.polynomial.degree, 0)
    if cert.kind == "safety":
        prog = build_safety_program(aug, regions, deg_b=deg, deg_mult=deg_mult,
                                    eps_lo=cert.constants["eps_lo"], eps_hi=cert.constants["eps_hi"],
                                    tighten=tighten, fixed_certificate=cert.polynomial,
                                    fixed_policy=cert.policy)
    elif cert.kind == "reach":
        prog = build_reach_program(aug, regions, deg_v=deg, deg_mult=deg_mult, eps=cert.constants["eps"],
                                   tighten=tighten, fixed_certificate=cert.polynomial,
                                   fixed_policy=cert.policy)
    else:
        raise ValueError("only safety or reach certificates can be re-checked")
    sdp = compile_to_sdp(prog)
    sol = solve_feasibility(sdp, config)
    if sol.status != "feasible":
        return RecheckResult("inconclusive", sol.status, [], sol.message, sol.stats())
    checks = gram_checks(prog, sdp, sol.blocks, sol.w)
    ok = all(c.passed() for c in checks)
    return RecheckResult("certified" if ok else "inconclusive", sol.status, checks,
                         "" if ok else "Gram re-check failed", sol.stats())
