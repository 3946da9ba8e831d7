"""SOS programs for augmented barrier certificates and their Gram compilation.

Two program families are assembled:

* safety (opacity): ``-B + eps_lo``, ``B - eps_hi`` and the decrease
  condition of B along the paired dynamics with a partner-input policy;
* reach (lack of opacity): ``-V``, ``V - eps`` on boundary faces and the
  strict decrease of V with a (free or fixed) input policy.

Each region constraint ``g >= 0`` enters through an SOS multiplier, so every
program stays affine in its unknown coefficients.  The program is built in
box-normalised coordinates (each bounded variable mapped onto [-1, 1]); the
certificate is mapped back to the original variables on extraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sps

from .augment import AugmentedSystem, RegionBundle
from .polyalg import (
    Monomial,
    Polynomial,
    VariableSpace,
    format_polynomial,
    monomial_basis,
    monomial_key,
    parse_polynomial,
)
from .sysmodel import SemiAlgebraicSet

log = logging.getLogger(__name__)

CONST = -1  # column key of the known part in an AffinePoly


# default multipliers fill the degree gap up to quadratics; larger ones via deg_mult
MAX_DEFAULT_MULT_DEGREE = 2


class NonlinearityError(RuntimeError):
    """An unknown-times-unknown product was about to form."""


class AffinePoly:
    """Polynomial whose coefficients are affine in the free unknowns.

    ``terms[mono][col]`` is the coefficient of unknown ``col`` (``CONST`` for
    the known part).
    """

    __slots__ = ("space", "terms")

    def __init__(self, space: VariableSpace, terms: dict | None = None):
        self.space = space
        self.terms: dict[Monomial, dict[int, float]] = terms or {}

    @classmethod
    def known(cls, p: Polynomial) -> "AffinePoly":
        return cls(p.space, {m: {CONST: c} for m, c in p.terms.items()})

    @classmethod
    def template(cls, space: VariableSpace, basis: Sequence[Monomial], cols: Sequence[int]) -> "AffinePoly":
        return cls(space, {m: {c: 1.0} for m, c in zip(basis, cols)})

    @classmethod
    def combination(cls, parts: Sequence[Polynomial], cols: Sequence[int]) -> "AffinePoly":
        out = cls(parts[0].space if parts else None)
        for p, col in zip(parts, cols):
            for m, c in p.terms.items():
                row = out.terms.setdefault(m, {})
                row[col] = row.get(col, 0.0) + c
        return out

    def copy(self) -> "AffinePoly":
        return AffinePoly(self.space, {m: dict(r) for m, r in self.terms.items()})

    def __add__(self, other):
        if isinstance(other, Polynomial):
            other = AffinePoly.known(other)
        elif isinstance(other, (int, float)):
            other = AffinePoly.known(Polynomial.constant(self.space, other))
        out = self.copy()
        for m, r in other.terms.items():
            row = out.terms.setdefault(m, {})
            for col, c in r.items():
                row[col] = row.get(col, 0.0) + c
        return out

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        if isinstance(other, Polynomial):
            other = AffinePoly.known(other)
        elif isinstance(other, (int, float)):
            other = AffinePoly.known(Polynomial.constant(self.space, other))
        return self + (-other)

    def __radd__(self, other):
        return self + other

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, a: float) -> "AffinePoly":
        return AffinePoly(self.space, {m: {c: a * v for c, v in r.items()} for m, r in self.terms.items()})

    def times(self, p: Polynomial) -> "AffinePoly":
        """Multiply by a known polynomial (the only product allowed)."""
        if not isinstance(p, Polynomial):
            raise NonlinearityError("AffinePoly can only be multiplied by a known polynomial")
        out: dict = {}
        for m1, r in self.terms.items():
            for m2, c2 in p.terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                row = out.setdefault(m, {})
                for col, c in r.items():
                    row[col] = row.get(col, 0.0) + c * c2
        return AffinePoly(self.space, out)

    def __mul__(self, other):
        if isinstance(other, AffinePoly):
            if other.is_known():
                return self.times(other.value(np.zeros(0)))
            if self.is_known():
                return other.times(self.value(np.zeros(0)))
            raise NonlinearityError("product of two unknown templates")
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return self.times(other)

    def cleaned(self) -> "AffinePoly":
        out = {}
        for m, r in self.terms.items():
            r2 = {c: v for c, v in r.items() if v != 0.0}
            if r2:
                out[m] = r2
        return AffinePoly(self.space, out)

    def is_known(self) -> bool:
        return all(set(r) <= {CONST} for r in self.terms.values())

    @property
    def degree(self) -> int:
        return max((sum(m) for m, r in self.cleaned().terms.items()), default=-1)

    def support(self) -> set:
        return set(self.cleaned().terms)

    def columns(self) -> set:
        return {c for r in self.terms.values() for c in r if c != CONST}

    def value(self, w: np.ndarray) -> Polynomial:
        """Concrete polynomial for unknown values ``w``."""
        out = {}
        for m, r in self.terms.items():
            s = 0.0
            for col, c in r.items():
                s += c if col == CONST else c * w[col]
            out[m] = s
        return Polynomial(self.space, out)

    def variables_used(self) -> set:
        used = set()
        for m in self.cleaned().terms:
            used.update(i for i, e in enumerate(m) if e)
        return {self.space.names[i] for i in used}


@dataclass
class PolyTemplate:
    """Unknown polynomial: free linear combination or Gram-form SOS multiplier."""

    name: str
    role: str  # certificate | policy-component | sos-multiplier
    basis: list[Monomial]
    columns: list[int] = field(default_factory=list)  # free-scalar columns (non-SOS roles)
    variables: tuple[str, ...] = ()

    def affine(self, space: VariableSpace) -> AffinePoly:
        return AffinePoly.template(space, self.basis, self.columns)


@dataclass
class SosConstraint:
    """``expr - sum(lambda_k * g_k)`` must be SOS over ``variables``."""

    name: str
    expr: AffinePoly
    multipliers: list[tuple[PolyTemplate, Polynomial]]
    variables: tuple[str, ...]
    gram_basis: list[Monomial]
    degree: int


@dataclass
class Scaling:
    """Affine map original = offset + scale * normalised, per variable."""

    space: VariableSpace
    offset: np.ndarray
    scale: np.ndarray

    def to_normalized(self, p: Polynomial) -> Polynomial:
        """Express a polynomial in the normalised coordinates."""
        sp = self.space
        if p.space != sp:
            p = p.embed(sp)
        images = [Polynomial(sp, {_unit(sp, i): s, (0,) * len(sp): c})
                  for i, (c, s) in enumerate(zip(self.offset, self.scale))]
        return p.substitute(images, sp)

    def to_original(self, p: Polynomial) -> Polynomial:
        sp = self.space
        images = [Polynomial(sp, {_unit(sp, i): 1.0 / s, (0,) * len(sp): -c / s})
                  for i, (c, s) in enumerate(zip(self.offset, self.scale))]
        return p.substitute(images, sp)

    def output_to_original(self, p: Polynomial, var: str) -> Polynomial:
        """Map a normalised-coordinate value of ``var`` back to original units."""
        i = self.space.index(var)
        return self.to_original(p).scale(self.scale[i]) + self.offset[i]


def _unit(sp: VariableSpace, i: int) -> Monomial:
    e = [0] * len(sp)
    e[i] = 1
    return tuple(e)


@dataclass
class SosProgram:
    kind: str  # safety | reach
    aug: AugmentedSystem
    regions: RegionBundle
    space: VariableSpace
    scaling: Scaling
    certificate: PolyTemplate
    policies: list[PolyTemplate]
    free_names: list[str]
    constraints: list[SosConstraint]
    constants: dict
    fixed_policy: tuple[Polynomial, ...] | None = None
    warnings: list[str] = field(default_factory=list)
    fixed_certificate: Polynomial | None = None

    @property
    def n_free(self) -> int:
        return len(self.free_names)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "free_scalars": self.n_free,
            "constraints": [
                {"name": c.name, "degree": c.degree, "gram": len(c.gram_basis),
                 "multipliers": [len(t.basis) for t, _ in c.multipliers]}
                for c in self.constraints
            ],
        }


def _even_ceil(d: int) -> int:
    return d + (d % 2)


def _make_scaling(aug: AugmentedSystem, normalize: bool) -> Scaling:
    sp = aug.full_space
    off = np.zeros(len(sp))
    sc = np.ones(len(sp))
    if normalize:
        xbox = aug.base.X.bounding_box()
        ubox = aug.base.U.bounding_box()
        names = aug.x_names + aug.u_names
        boxes = list(xbox or [(-math.inf, math.inf)] * aug.n) + list(ubox or [(-math.inf, math.inf)] * aug.m)
        for name, (lo, hi) in zip(names, boxes):
            if math.isfinite(lo) and math.isfinite(hi) and hi > lo:
                for v in (name, aug.rename[name]):
                    i = sp.index(v)
                    off[i] = (lo + hi) / 2
                    sc[i] = (hi - lo) / 2
    return Scaling(sp, off, sc)


class _Builder:
    def __init__(self, aug: AugmentedSystem, regions: RegionBundle, normalize: bool):
        self.aug = aug
        self.regions = regions
        self.sp = aug.full_space
        self.scaling = _make_scaling(aug, normalize)
        self.free_names: list[str] = []
        self.warnings: list[str] = []
        # normalised paired dynamics: state_i' in normalised units
        self.dyn = []
        names = aug.x_names + aug.xh_names
        for name, f in zip(names, aug.dynamics):
            i = self.sp.index(name)
            fw = self.scaling.to_normalized(f)
            self.dyn.append((fw - self.scaling.offset[i]).scale(1.0 / self.scaling.scale[i]))

    def free_template(self, name: str, role: str, variables: Sequence[str], degree: int) -> PolyTemplate:
        basis = monomial_basis(self.sp, degree, variables)
        cols = []
        for m in basis:
            cols.append(len(self.free_names))
            label = format_polynomial(Polynomial(self.sp, {m: 1.0}))
            self.free_names.append(f"{name}[{label}]")
        return PolyTemplate(name, role, basis, cols, tuple(variables))

    def normalized_constraints(self, s: SemiAlgebraicSet) -> list[Polynomial]:
        out = []
        for g in s.expanded_constraints():
            gw = self.scaling.to_normalized(g.embed(self.sp))
            big = max((abs(c) for c in gw.terms.values()), default=0.0)
            if big == 0.0:
                continue
            out.append(gw.scale(1.0 / big))
        return out

    def compose_with_dynamics(self, cert: PolyTemplate, state_images=None) -> AffinePoly:
        """cert(f(x,u), f(xh,uh)) as an affine polynomial (known dynamics)."""
        sp = self.sp
        images = {}
        names = self.aug.x_names + self.aug.xh_names
        dyn = state_images if state_images is not None else self.dyn
        for name, f in zip(names, dyn):
            images[name] = f
        parts = []
        for m in cert.basis:
            mono = Polynomial(sp, {m: 1.0})
            parts.append(mono.substitute(images, sp))
        return AffinePoly.combination(parts, cert.columns)

    def constraint(self, name: str, expr: AffinePoly, groups: list[tuple[list[Polynomial], Sequence[str]]],
                   mult_degree: int | None) -> SosConstraint:
        """Attach multipliers and pick the Gram basis for one SOS constraint."""
        expr = expr.cleaned()
        base = max(expr.degree, 0)
        D = _even_ceil(base)
        pending = []
        for gs, mvars in groups:
            for g in gs:
                if mult_degree is None:
                    d = min(MAX_DEFAULT_MULT_DEGREE, _even_ceil(max(D - g.degree, 0)))
                else:
                    d = _even_ceil(mult_degree)
                pending.append((g, tuple(mvars), d))
        total = max([base] + [d + g.degree for g, _, d in pending])
        if total % 2:
            self.warnings.append(f"{name}: odd degree {total} raised to {total + 1}")
            log.info("%s: odd degree %d raised to %d", name, total, total + 1)
        D = _even_ceil(total)
        multipliers = []
        for k, (g, mvars, d) in enumerate(pending):
            basis = monomial_basis(self.sp, d // 2, mvars)
            multipliers.append((PolyTemplate(f"{name}.lambda{k}", "sos-multiplier", basis, [], mvars), g))
        variables = set(expr.variables_used())
        for tmpl, g in multipliers:
            variables.update(tmpl.variables)
            variables.update(g.variables_used())
        variables = tuple(v for v in self.sp.names if v in variables)
        gram = monomial_basis(self.sp, D // 2, variables)
        return SosConstraint(name, expr, multipliers, variables, gram, D)


def _default_policy_degree(deg: int | None) -> int:
    return 1 if deg is None else deg


def _fixed_template(name: str) -> PolyTemplate:
    return PolyTemplate(name, "certificate", [], [], ())


def _substitute_inputs(b: "_Builder", names: Sequence[str], polys: Sequence[Polynomial]) -> list[Polynomial]:
    """Normalised paired dynamics with the listed inputs replaced by polynomials."""
    sp = b.sp
    images = {v: Polynomial.variable(sp, v) for v in sp.names}
    for name, pol in zip(names, polys):
        i = sp.index(name)
        pw = b.scaling.to_normalized(pol.embed(sp))
        images[name] = (pw - b.scaling.offset[i]).scale(1.0 / b.scaling.scale[i])
    return [f.substitute(images, sp) for f in b.dyn]


def _certificate_parts(b: "_Builder", name: str, variables, degree: int, fixed: Polynomial | None, dyn):
    """Template (or fixed polynomial) for B / V and its composition with dynamics."""
    sp = b.sp
    if fixed is None:
        tmpl = b.free_template(name, "certificate", variables, degree)
        return tmpl, tmpl.affine(sp), b.compose_with_dynamics(tmpl, dyn)
    fw = b.scaling.to_normalized(fixed.embed(sp))
    bad = set(fw.variables_used()) - set(variables)
    if bad:
        raise ValueError(f"certificate may only use {list(variables)}; found {sorted(bad)}")
    images = dict(zip(b.aug.x_names + b.aug.xh_names, dyn))
    composed = fw.substitute(images, sp)
    return _fixed_template(name), AffinePoly.known(fw), AffinePoly.known(composed)


def _check_policy(policy, m: int, allowed: set, what: str) -> tuple[Polynomial, ...]:
    policy = tuple(policy)
    if len(policy) != m:
        raise ValueError(f"fixed policy needs {m} components, got {len(policy)}")
    for pol in policy:
        bad = set(pol.variables_used()) - allowed
        if bad:
            raise ValueError(f"{what} may only use {sorted(allowed)}; found {sorted(bad)}")
    return policy


def build_safety_program(aug: AugmentedSystem, regions: RegionBundle, *, deg_b: int = 2,
                         deg_policy: int | None = 1, deg_mult: int | None = None,
                         eps_lo: float = 1.0, eps_hi: float = 1.001, tighten: float = 1e-6,
                         policy_in_u: bool = False, normalize: bool = True,
                         fixed_certificate: Polynomial | None = None,
                         fixed_policy: Sequence[Polynomial] | None = None) -> SosProgram:
    """Safety-type program: certificate B, partner-input policy, multipliers.

    With ``fixed_policy`` the partner input is replaced by the given
    polynomials of (x, xh, u) and the policy term disappears; with
    ``fixed_certificate`` only multipliers remain unknown.
    """
    if not eps_hi > eps_lo:
        raise ValueError("eps_hi must exceed eps_lo")
    if deg_b < 0 or (deg_mult is not None and deg_mult < 0):
        raise ValueError("degrees must be non-negative")
    b = _Builder(aug, regions, normalize)
    sp = b.sp
    pair_vars = aug.x_names + aug.xh_names
    dyn = b.dyn
    if fixed_policy is not None:
        fixed_policy = _check_policy(fixed_policy, aug.m, set(pair_vars + aug.u_names), "partner-input policy")
        dyn = _substitute_inputs(b, aug.uh_names, fixed_policy)
    B, Baff, BF = _certificate_parts(b, "B", pair_vars, deg_b, fixed_certificate, dyn)
    policies = []
    if fixed_policy is None:
        dp = _default_policy_degree(deg_policy)
        policies = [b.free_template(f"p_{uh}", "policy-component", pair_vars + aug.u_names, dp)
                    for uh in aug.uh_names]
    constraints = []
    for k, piece in enumerate(regions.R0.pieces()):
        g0 = b.normalized_constraints(piece)
        expr = -Baff + (eps_lo - tighten)
        constraints.append(b.constraint(f"init[{k}]", expr, [(g0, pair_vars)], deg_mult))
    for k, piece in enumerate(regions.Ru.pieces()):
        gu = b.normalized_constraints(piece)
        expr = Baff - (eps_hi + tighten)
        constraints.append(b.constraint(f"unsafe[{k}]", expr, [(gu, pair_vars)], deg_mult))
    g = b.normalized_constraints(regions.R)
    gc = b.normalized_constraints(_input_set_full(aug.U, sp))
    expr = -(BF - Baff) - tighten
    for uh, pol in zip(aug.uh_names, policies):
        expr = expr - (Polynomial.variable(sp, uh) - pol.affine(sp))
    groups = [(g, pair_vars)]
    if aug.m:
        groups.append((gc, aug.u_names))
    constraints.append(b.constraint("decrease", expr, groups, deg_mult))
    if policy_in_u and aug.m and policies:
        constraints.extend(_policy_bound_constraints(b, aug, policies, g, gc, pair_vars, deg_mult, "uh"))
    return SosProgram("safety", aug, regions, sp, b.scaling, B, policies, b.free_names, constraints,
                      {"eps_lo": eps_lo, "eps_hi": eps_hi, "tighten": tighten}, fixed_policy, b.warnings,
                      fixed_certificate)


def _input_set_full(U: SemiAlgebraicSet, sp: VariableSpace) -> SemiAlgebraicSet:
    cons = tuple(g.embed(sp) for g in U.expanded_constraints())
    return SemiAlgebraicSet(sp, cons)


def _policy_bound_constraints(b, aug, policies, g, gc, pair_vars, deg_mult, which):
    sp = b.sp
    box = aug.base.U.box
    if box is None:
        raise ValueError("policy bounds need a box input set")
    out = []
    for i, pol in enumerate(policies):
        lo, hi = box[i]
        name = aug.u_names[i]
        # bounds in normalised units of the partner/own input
        ui = sp.index(aug.rename[name] if which == "uh" else name)
        lo_w = (lo - b.scaling.offset[ui]) / b.scaling.scale[ui]
        hi_w = (hi - b.scaling.offset[ui]) / b.scaling.scale[ui]
        p = pol.affine(sp)
        in_vars = aug.u_names if which == "uh" else aug.uh_names
        groups = [(g, pair_vars)] + ([(gc, in_vars)] if gc else [])
        if math.isfinite(hi):
            out.append(b.constraint(f"policy_hi[{i}]", -p + hi_w, groups, deg_mult))
        if math.isfinite(lo):
            out.append(b.constraint(f"policy_lo[{i}]", p - lo_w, groups, deg_mult))
    return out


def parse_fixed_policy(text: str | Sequence[str], aug: AugmentedSystem, inputs: str = "uh") -> tuple[Polynomial, ...]:
    """Parse ``"p1;...;pm"`` into full-space polynomials.

    ``inputs="uh"``: an input policy over (x, xh, uh) for the reach program;
    ``inputs="u"``: a partner-input policy over (x, xh, u) for the safety program.
    """
    if inputs not in ("u", "uh"):
        raise ValueError("inputs must be 'u' or 'uh'")
    parts = [t.strip() for t in text.split(";")] if isinstance(text, str) else list(text)
    if len(parts) != aug.m:
        raise ValueError(f"fixed policy needs {aug.m} components, got {len(parts)}")
    allowed = set(aug.x_names + aug.xh_names + (aug.uh_names if inputs == "uh" else aug.u_names))
    out = []
    for t in parts:
        p = parse_polynomial(t, aug.full_space)
        bad = set(p.variables_used()) - allowed
        if bad:
            raise ValueError(f"fixed policy may only use x, xh, {inputs}; found {sorted(bad)}")
        out.append(p)
    return tuple(out)


def build_reach_program(aug: AugmentedSystem, regions: RegionBundle, *, deg_v: int = 2,
                        deg_policy: int | None = 1, deg_mult: int | None = None, eps: float = 0.01,
                        fixed_policy: Sequence[Polynomial] | None = None, tighten: float = 1e-6,
                        normalize: bool = True, fixed_certificate: Polynomial | None = None) -> SosProgram:
    """Reach-type program; ``fixed_policy`` substitutes u before assembly."""
    if not eps > 0:
        raise ValueError("slack eps must be positive")
    if deg_v < 0 or (deg_mult is not None and deg_mult < 0):
        raise ValueError("degrees must be non-negative")
    if regions.boundary is None or regions.closure is None:
        raise ValueError("reach regions (boundary decomposition) required")
    b = _Builder(aug, regions, normalize)
    sp = b.sp
    pair_vars = aug.x_names + aug.xh_names
    policies = []
    dyn = b.dyn
    if fixed_policy is not None:
        fixed_policy = _check_policy(fixed_policy, aug.m, set(pair_vars + aug.uh_names), "input policy")
        dyn = _substitute_inputs(b, aug.u_names, fixed_policy)
    else:
        pvars = pair_vars + aug.uh_names
        dp = _default_policy_degree(deg_policy)
        policies = [b.free_template(f"p_{u}", "policy-component", pvars, dp) for u in aug.u_names]
    V, Vaff, VF = _certificate_parts(b, "V", pair_vars, deg_v, fixed_certificate, dyn)
    constraints = []
    for k, piece in enumerate(regions.R0.pieces()):
        g0 = b.normalized_constraints(piece)
        constraints.append(b.constraint(f"init[{k}]", -Vaff - tighten, [(g0, pair_vars)], deg_mult))
    faces = regions.boundary.pieces()
    if not faces:
        raise ValueError("missing boundary decomposition")
    for k, face in enumerate(faces):
        gu = b.normalized_constraints(face)
        constraints.append(b.constraint(f"boundary[{k}]", Vaff - (eps + tighten), [(gu, pair_vars)], deg_mult))
    g = b.normalized_constraints(regions.closure)
    gc = b.normalized_constraints(_input_set_full(aug.Uh, sp))
    expr = -(VF - Vaff)
    for u, pol in zip(aug.u_names, policies):
        expr = expr - (Polynomial.variable(sp, u) - pol.affine(sp))
    expr = expr - (eps + tighten)
    groups = [(g, pair_vars)]
    if aug.m:
        groups.append((gc, aug.uh_names))
    constraints.append(b.constraint("decrease", expr, groups, deg_mult))
    return SosProgram("reach", aug, regions, sp, b.scaling, V, policies, b.free_names, constraints,
                      {"eps": eps, "tighten": tighten}, fixed_policy, b.warnings, fixed_certificate)


def sos_constraint_program(expr: Polynomial, degree_half: int | None = None) -> SosProgram:
    """Stand-alone 'expr is SOS' program with no unknown coefficients."""
    sp = expr.space
    D = _even_ceil(max(expr.degree, 0))
    vars_ = tuple(v for v in sp.names if v in expr.variables_used())
    gram = monomial_basis(sp, D // 2 if degree_half is None else degree_half, vars_)
    n = len(sp)
    con = SosConstraint("sos", AffinePoly.known(expr), [], vars_, gram, D)
    scaling = Scaling(sp, np.zeros(n), np.ones(n))
    empty = PolyTemplate("none", "certificate", [], [], ())
    return SosProgram("plain", None, None, sp, scaling, empty, [], [], [con], {})


# ---------------------------------------------------------------------------
# Gram compilation


@dataclass
class SdpProblem:
    """Block PSD variables X_b and free scalars w with A(X) + F w = b.

    ``A[k]`` is an (rows x size_k^2) sparse matrix acting on the row-major
    flattening of block k; entries are stored for both (i, j) and (j, i).
    """

    block_sizes: list[int]
    block_labels: list[str]
    A: list[sps.csr_matrix]
    F: sps.csr_matrix
    b: np.ndarray
    row_labels: list[tuple[int, Monomial]] = field(default_factory=list)
    free_names: list[str] = field(default_factory=list)
    constraint_blocks: list[list[int]] = field(default_factory=list)
    constraint_rows: list[range] = field(default_factory=list)
    block_bases: list[list[Monomial]] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.b)

    @property
    def n_free(self) -> int:
        return self.F.shape[1]

    def residual(self, blocks: Sequence[np.ndarray], w: np.ndarray) -> np.ndarray:
        r = self.F @ w - self.b if self.n_free else -self.b.copy()
        for Ak, X in zip(self.A, blocks):
            r = r + Ak @ np.asarray(X).ravel()
        return r

    def dump(self, path) -> None:
        """Sparse text dump: one line per nonzero equality coefficient."""
        lines = ["# acbc sparse SDP dump: A(X) + F w = b",
                 f"# rows {self.n_rows} blocks {len(self.block_sizes)} free {self.n_free}"]
        for k, (n, lab) in enumerate(zip(self.block_sizes, self.block_labels)):
            lines.append(f"block {k} {n} {lab}")
        for k, Ak in enumerate(self.A):
            n = self.block_sizes[k]
            coo = Ak.tocoo()
            for r, c, v in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
                i, j = divmod(c, n)
                if i <= j:
                    lines.append(f"{r} {k} {i} {j} {v!r}")
        coo = self.F.tocoo()
        for r, c, v in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
            lines.append(f"{r} free {c} {v!r}")
        for r, v in enumerate(self.b.tolist()):
            if v != 0.0:
                lines.append(f"{r} rhs {v!r}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _gram_entries(basis: list[Monomial], g: Polynomial | None):
    """Yield (monomial, i, j, coefficient) for i <= j of basis^T Q basis * g."""
    gt = [((0,) * len(basis[0]), 1.0)] if g is None else list(g.terms.items())
    for i, bi in enumerate(basis):
        for j in range(i, len(basis)):
            bj = basis[j]
            prod = tuple(a + c for a, c in zip(bi, bj))
            for gm, gc in gt:
                yield tuple(a + c for a, c in zip(prod, gm)), i, j, gc


def multiplier_support(con: SosConstraint) -> set:
    """Monomials any multiplier product can contribute to."""
    out = set()
    for tmpl, g in con.multipliers:
        for m, _, _, _ in _gram_entries(tmpl.basis, g):
            out.add(m)
    return out


def prune_gram_basis(con: SosConstraint, mode: str = "diagonal") -> list[Monomial]:
    """Shrink the Gram basis of one constraint.

    ``degree`` keeps every monomial up to half the constraint degree.
    ``diagonal`` repeatedly drops a monomial b when 2b is absent from the
    expression and multiplier supports and no other basis pair produces it;
    the diagonal entry for b is then forced to zero, and so is its whole
    row in any PSD solution.
    """
    basis = list(con.gram_basis)
    if mode == "degree" or not basis:
        return basis
    if mode != "diagonal":
        raise ValueError(f"unknown pruning mode {mode!r}")
    present = con.expr.support() | multiplier_support(con)
    while True:
        pair_count: dict = {}
        for i, bi in enumerate(basis):
            for j in range(i + 1, len(basis)):
                m = tuple(a + c for a, c in zip(bi, basis[j]))
                pair_count[m] = pair_count.get(m, 0) + 1
        keep = []
        for b in basis:
            sq = tuple(2 * a for a in b)
            if sq in present or pair_count.get(sq, 0):
                keep.append(b)
        if len(keep) == len(basis):
            return keep
        basis = keep


def compile_to_sdp(prog: SosProgram, prune: str = "diagonal") -> SdpProblem:
    """Coefficient matching: one PSD block per SOS constraint and multiplier."""
    blocks: list[tuple[int, str, list]] = []
    rows_acc: list[tuple[int, Monomial]] = []
    Frows, Fcols, Fvals = [], [], []
    bvec: list[float] = []
    constraint_blocks, constraint_rows = [], []
    for ci, con in enumerate(prog.constraints):
        cols = con.expr.columns()
        if any(c >= prog.n_free for c in cols):
            raise NonlinearityError(f"{con.name}: unknown column outside program")
        entries_by_block = []
        support = set(con.expr.support())
        gram = prune_gram_basis(con, prune)
        if gram:
            ents = list(_gram_entries(gram, None))
            entries_by_block.append((gram, f"{con.name}.gram", ents))
            support.update(e[0] for e in ents)
        for tmpl, g in con.multipliers:
            if not tmpl.basis:
                continue
            ents = list(_gram_entries(tmpl.basis, g))
            entries_by_block.append((tmpl.basis, tmpl.name, ents))
            support.update(e[0] for e in ents)
        monos = sorted(support, key=monomial_key)
        base = len(rows_acc)
        index = {m: base + k for k, m in enumerate(monos)}
        rows_acc.extend((ci, m) for m in monos)
        expr = con.expr.cleaned().terms
        for m in monos:
            r = index[m]
            row = expr.get(m, {})
            bvec.append(row.get(CONST, 0.0))
            for col, v in row.items():
                if col != CONST:
                    Frows.append(r)
                    Fcols.append(col)
                    Fvals.append(-v)
        ids = []
        for basis, label, ents in entries_by_block:
            ids.append(len(blocks))
            blocks.append((basis, label, [(index[m], i, j, v) for m, i, j, v in ents]))
        constraint_blocks.append(ids)
        constraint_rows.append(range(base, len(rows_acc)))
    m = len(rows_acc)
    A = []
    for basis, label, ents in blocks:
        size = len(basis)
        r = np.array([e[0] for e in ents], dtype=np.int64)
        i = np.array([e[1] for e in ents], dtype=np.int64)
        j = np.array([e[2] for e in ents], dtype=np.int64)
        v = np.array([e[3] for e in ents], dtype=float)
        off = i != j
        rr = np.concatenate([r, r[off]])
        cc = np.concatenate([i * size + j, (j * size + i)[off]])
        vv = np.concatenate([v, v[off]])
        A.append(sps.csr_matrix((vv, (rr, cc)), shape=(m, size * size)))
    F = sps.csr_matrix((Fvals, (Frows, Fcols)), shape=(m, prog.n_free))
    return SdpProblem([len(bs) for bs, _, _ in blocks], [lab for _, lab, _ in blocks], A, F,
                      np.array(bvec, dtype=float), rows_acc, list(prog.free_names),
                      constraint_blocks, constraint_rows, [bs for bs, _, _ in blocks])


# ---------------------------------------------------------------------------
# extraction


@dataclass
class GramCheck:
    """Re-substitution check of one SOS constraint at a solver point."""

    name: str
    residual: float   # max |coef(expr - sum lambda g - m^T Q m)|
    min_eig: float    # smallest eigenvalue over the constraint's blocks

    def passed(self, residual_tol: float = 1e-9, margin: float = 1e-8) -> bool:
        return self.residual <= residual_tol and self.min_eig >= -margin


def gram_polynomial(space: VariableSpace, basis: Sequence[Monomial], Q: np.ndarray) -> Polynomial:
    """Expand m^T Q m for monomial vector m."""
    out: dict = {}
    for i, bi in enumerate(basis):
        for j, bj in enumerate(basis):
            m = tuple(a + c for a, c in zip(bi, bj))
            out[m] = out.get(m, 0.0) + Q[i, j]
    return Polynomial(space, out)


def _constraint_parts(prog: SosProgram, sdp: SdpProblem, blocks, w, ci: int):
    con = prog.constraints[ci]
    by_label = {sdp.block_labels[b]: b for b in sdp.constraint_blocks[ci]}
    value = con.expr.value(w)
    mults = []
    for tmpl, g in con.multipliers:
        b = by_label.get(tmpl.name)
        lam = Polynomial.zero(prog.space) if b is None else gram_polynomial(prog.space, sdp.block_bases[b], blocks[b])
        mults.append((tmpl.name, lam, g))
    gb = by_label.get(f"{con.name}.gram")
    gram = Polynomial.zero(prog.space) if gb is None else gram_polynomial(prog.space, sdp.block_bases[gb], blocks[gb])
    eigs = [float(np.linalg.eigvalsh(blocks[b])[0]) for b in sdp.constraint_blocks[ci] if blocks[b].size]
    return value, mults, gram, min(eigs, default=math.inf)


def gram_checks(prog: SosProgram, sdp: SdpProblem, blocks, w) -> list[GramCheck]:
    out = []
    for ci, con in enumerate(prog.constraints):
        value, mults, gram, lam = _constraint_parts(prog, sdp, blocks, w, ci)
        rest = value
        for _, lm, g in mults:
            rest = rest - lm * g
        diff = rest - gram
        res = max((abs(c) for c in diff.terms.values()), default=0.0)
        out.append(GramCheck(con.name, res, lam))
    return out


def extract_certificate(prog: SosProgram, sdp: SdpProblem, solution):
    """Materialise B or V, the policy and all multipliers from a feasible point."""
    from .certvalidate import Certificate

    if getattr(solution, "status", None) != "feasible":
        raise ValueError(f"cannot extract a certificate from status {getattr(solution, 'status', None)!r}")
    w = np.asarray(solution.w, dtype=float)
    blocks = solution.blocks
    checks = gram_checks(prog, sdp, blocks, w)
    sc = prog.scaling
    if prog.kind == "plain":
        cert_poly = Polynomial.zero(prog.space)
    elif prog.fixed_certificate is not None:
        cert_poly = prog.fixed_certificate.embed(prog.space)
    else:
        cert_poly = sc.to_original(prog.certificate.affine(prog.space).value(w))
    if prog.fixed_policy is not None:
        policy = tuple(p.embed(prog.space) for p in prog.fixed_policy)
    else:
        names = prog.aug.uh_names if prog.kind == "safety" else (prog.aug.u_names if prog.aug else ())
        policy = tuple(sc.output_to_original(t.affine(prog.space).value(w), v)
                       for t, v in zip(prog.policies, names))
    multipliers = {}
    for ci, con in enumerate(prog.constraints):
        _, mults, _, _ = _constraint_parts(prog, sdp, blocks, w, ci)
        for name, lm, g in mults:
            multipliers[name] = (sc.to_original(lm), sc.to_original(g))
    consts = {k: v for k, v in prog.constants.items() if k != "tighten"}
    kind = prog.kind if prog.kind in ("safety", "reach") else "plain"
    return Certificate(kind, prog.space, _clean(cert_poly), tuple(_clean(p) for p in policy), consts,
                       "synthesized", multipliers, checks)


def _clean(p: Polynomial, rel: float = 1e-13) -> Polynomial:
    """Drop coefficients that are pure rounding noise relative to the largest one."""
    big = max((abs(c) for c in p.terms.values()), default=0.0)
    return Polynomial(p.space, {m: c for m, c in p.terms.items() if abs(c) > rel * big})
