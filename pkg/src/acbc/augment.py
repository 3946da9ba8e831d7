"""Product system Sigma x Sigma and its regions of interest.

Safety regions (opacity):
    R0 = (X0 & Xs) x (X0 \\ Xs) with |h(x) - h(xh)|^2 <= delta^2
    Ru = X x X with |h(x) - h(xh)|^2 >= delta^2 + margin
Reach regions (lack of opacity) add the closure of R \\ Ru and the
boundary faces of R that lie outside Ru.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .polyalg import Polynomial, VariableSpace
from .sysmodel import (
    ControlSystem,
    SemiAlgebraicSet,
    UnsampleableSetError,
    box_boundary_regions,
    box_is_empty,
    intersect,
    sample_set,
)

log = logging.getLogger(__name__)


class UnsupportedSetError(ValueError):
    pass


def partner_name(name: str) -> str:
    """``x1 -> xh1``, ``T2 -> Th2``, ``v -> vh``."""
    m = re.fullmatch(r"(.*?)(\d*)", name)
    return f"{m.group(1)}h{m.group(2)}"


@dataclass(frozen=True)
class AugmentedSystem:
    base: ControlSystem
    pair_space: VariableSpace     # (x, xh)
    full_space: VariableSpace     # (x, xh, u, uh)
    rename: dict                  # base name -> partner name
    dynamics: tuple[Polynomial, ...]   # 2n components over full_space
    output: tuple[Polynomial, ...]     # 2p components over pair_space
    R: SemiAlgebraicSet
    U: SemiAlgebraicSet           # over (u) embedded in full_space names
    Uh: SemiAlgebraicSet          # over (uh)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def m(self) -> int:
        return self.base.m

    @property
    def x_names(self) -> tuple[str, ...]:
        return self.base.state_space.names

    @property
    def xh_names(self) -> tuple[str, ...]:
        return tuple(self.rename[x] for x in self.x_names)

    @property
    def u_names(self) -> tuple[str, ...]:
        return self.base.input_space.names

    @property
    def uh_names(self) -> tuple[str, ...]:
        return tuple(self.rename[u] for u in self.u_names)

    def gap_polynomial(self, states: tuple[str, ...] | None = None) -> Polynomial:
        """Squared output gap over the pair space (or over chosen states)."""
        sp = self.pair_space
        total = Polynomial.zero(sp)
        if states is None:
            p = len(self.base.output)
            for i in range(p):
                d = self.output[i] - self.output[p + i]
                total = total + d * d
        else:
            for s in states:
                d = Polynomial.variable(sp, s) - Polynomial.variable(sp, self.rename[s])
                total = total + d * d
        return total

    def lift_state_set(self, s: SemiAlgebraicSet, partner: bool) -> SemiAlgebraicSet:
        """Embed a set over x into the pair space on the x or xh copy."""
        return _lift(s, self.pair_space, self.rename if partner else {})


def _lift(s: SemiAlgebraicSet, space: VariableSpace, rn: dict) -> SemiAlgebraicSet:
    cons = tuple(g.embed(space, rn) for g in s.constraints)
    box = None
    if s.box is not None:
        box = [(-math.inf, math.inf)] * len(space)
        for name, iv in zip(s.space.names, s.box):
            box[space.index(rn.get(name, name))] = iv
        box = tuple(box)
    return SemiAlgebraicSet(space, cons, box, tuple(_lift(u, space, rn) for u in s.union))


def build_product(sys: ControlSystem, *, check_points: int = 100, seed: int = 0) -> AugmentedSystem:
    xs, us = sys.state_space.names, sys.input_space.names
    rename = {v: partner_name(v) for v in xs + us}
    hats = set(rename.values())
    if hats & set(xs + us) or len(hats) != len(rename):
        raise ValueError("partner variable names collide with existing names")
    pair = VariableSpace(xs + tuple(rename[x] for x in xs),
                         ("state",) * len(xs) + ("partner-state",) * len(xs))
    full = VariableSpace(pair.names + us + tuple(rename[u] for u in us),
                         pair.roles + ("input",) * len(us) + ("partner-input",) * len(us))
    dyn = tuple(f.embed(full) for f in sys.dynamics)
    dyn_h = tuple(f.embed(full, rename) for f in sys.dynamics)
    out = tuple(h.embed(pair) for h in sys.output)
    out_h = tuple(h.embed(pair, rename) for h in sys.output)
    R = intersect(_lift(sys.X, pair, {}), _lift(sys.X, pair, rename))
    inp = VariableSpace(us, ("input",) * len(us))
    inp_h = VariableSpace(tuple(rename[u] for u in us), ("partner-input",) * len(us))
    Uh = SemiAlgebraicSet(inp_h, tuple(g.embed(inp_h, rename) for g in sys.U.constraints),
                          sys.U.box, tuple(_rename_set(u, inp_h, rename) for u in sys.U.union))
    U = SemiAlgebraicSet(inp, tuple(g.embed(inp) for g in sys.U.constraints), sys.U.box,
                         tuple(_rename_set(u, inp, {}) for u in sys.U.union))
    aug = AugmentedSystem(sys, pair, full, rename, dyn + dyn_h, out + out_h, R, U, Uh)
    _verify_renaming(aug, check_points, seed)
    return aug


def _rename_set(s: SemiAlgebraicSet, space: VariableSpace, rename) -> SemiAlgebraicSet:
    return SemiAlgebraicSet(space, tuple(g.embed(space, rename) for g in s.constraints), s.box,
                            tuple(_rename_set(u, space, rename) for u in s.union))


def _verify_renaming(aug: AugmentedSystem, count: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    n, m = aug.n, aug.m
    for _ in range(count):
        v = rng.uniform(-2, 2, n)
        w = rng.uniform(-2, 2, m)
        base = aug.base.step(v, w)
        z = np.concatenate([v, v, w, w])
        paired = np.array([f.evaluate(z) for f in aug.dynamics])
        if not (np.array_equal(paired[:n], base) and np.array_equal(paired[n:], base)):
            raise AssertionError("paired dynamics disagree with base dynamics")


@dataclass(frozen=True)
class RegionBundle:
    R0: SemiAlgebraicSet
    Ru: SemiAlgebraicSet
    R: SemiAlgebraicSet
    margin: float
    delta: float
    gap: Polynomial
    closure: SemiAlgebraicSet | None = None
    boundary: SemiAlgebraicSet | None = None
    warnings: tuple[str, ...] = field(default=())


def complement_pieces(X0: SemiAlgebraicSet, Xs: SemiAlgebraicSet) -> list[SemiAlgebraicSet]:
    """Pieces whose union is the closure of ``X0 \\ Xs``.

    Boxes are complemented face by face and intersected with X0; faces that
    cannot contain points of X0 outside Xs are dropped.
    """
    sp = X0.space
    if Xs.union:
        raise UnsupportedSetError("secret set given as a union has no supported complement")
    if Xs.is_box:
        pieces = []
        for i, (lo, hi) in enumerate(Xs.box):
            for side, bound in (("low", lo), ("high", hi)):
                if not math.isfinite(bound):
                    continue
                box = [(-math.inf, math.inf)] * len(sp)
                box[i] = (-math.inf, bound) if side == "low" else (bound, math.inf)
                piece = intersect(X0, SemiAlgebraicSet(sp, (), tuple(box)))
                if X0.box is not None:
                    a, b = X0.box[i]
                    # X0 must reach strictly beyond the face, else only Xs points remain
                    if (side == "low" and a >= bound) or (side == "high" and b <= bound):
                        continue
                if box_is_empty(piece.box):
                    continue
                pieces.append(piece)
        return pieces
    if Xs.box is None and len(Xs.constraints) == 1:
        return [intersect(X0, SemiAlgebraicSet(sp, (-Xs.constraints[0],)))]
    raise UnsupportedSetError("secret set must be a box or a single inequality for X0 \\ Xs")


def _secret_initial(sys: ControlSystem) -> SemiAlgebraicSet:
    return intersect(sys.X0, sys.Xs)


def build_safety_regions(aug: AugmentedSystem, margin: float = 0.01) -> RegionBundle:
    if not margin > 0:
        raise ValueError("margin must be positive")
    sys = aug.base
    delta = sys.delta
    gap = aug.gap_polynomial()
    R0 = _initial_region(aug, gap)
    Ru = SemiAlgebraicSet(aug.pair_space, aug.R.constraints + (gap - (delta ** 2 + margin),),
                          aug.R.box, aug.R.union)
    return RegionBundle(R0, Ru, aug.R, margin, delta, gap)


def _initial_region(aug: AugmentedSystem, gap: Polynomial) -> SemiAlgebraicSet:
    sys = aug.base
    secret = aug.lift_state_set(_secret_initial(sys), False)
    pieces = [aug.lift_state_set(p, True) for p in complement_pieces(sys.X0, sys.Xs)]
    gap_con = (sys.delta ** 2) - gap
    if not pieces:
        empty = SemiAlgebraicSet(aug.pair_space, (Polynomial.constant(aug.pair_space, -1.0),))
        return intersect(secret, empty)
    combined = [intersect(secret, p) for p in pieces]
    if len(combined) == 1:
        c = combined[0]
        return SemiAlgebraicSet(aug.pair_space, c.constraints + (gap_con,), c.box, c.union)
    return SemiAlgebraicSet(aug.pair_space, (gap_con,), None, tuple(combined))


def build_reach_regions(aug: AugmentedSystem, margin: float = 0.01) -> RegionBundle:
    """Regions for the reachability-type certificate; X must be a bounded box."""
    sys = aug.base
    X = sys.X
    if not X.is_box:
        raise UnsupportedSetError("reach regions need the state set to be a box")
    if not all(math.isfinite(v) for iv in X.box for v in iv):
        raise UnsupportedSetError("unbounded state set rejected")
    delta = sys.delta
    warn = []
    if sys.gap_states is not None:
        monitored = sys.gap_states
        gap = aug.gap_polynomial(monitored)
        if gap != aug.gap_polynomial():
            warn.append(f"reach regions use the gap on {', '.join(monitored)} instead of the output map")
    else:
        monitored = _projected_states(aug)
        gap = aug.gap_polynomial()
    R0 = _initial_region(aug, gap)
    Ru = SemiAlgebraicSet(aug.pair_space, aug.R.constraints + (gap - (delta ** 2 + margin),),
                          aug.R.box)
    gap_con = (delta ** 2) - gap
    closure = SemiAlgebraicSet(aug.pair_space, (gap_con,), aug.R.box)
    pairs = [(s, aug.rename[s]) for s in monitored]
    boundary = box_boundary_regions(SemiAlgebraicSet(aug.pair_space, (), aug.R.box), delta, pairs,
                                    (gap_con,))
    if any(lo == hi for lo, hi in X.box):
        warn.append("degenerate state box: boundary faces collapse")
    for w in warn:
        log.warning(w)
    return RegionBundle(R0, Ru, aug.R, margin, delta, gap, closure, boundary, tuple(warn))


def _projected_states(aug: AugmentedSystem) -> tuple[str, ...]:
    """State names when every output component is a single state coordinate."""
    names = []
    for h in aug.base.output:
        items = list(h.terms.items())
        if len(items) != 1 or items[0][1] != 1.0 or sum(items[0][0]) != 1:
            raise UnsupportedSetError("boundary faces need outputs that are state coordinates")
        names.append(h.space.names[items[0][0].index(1)])
    return tuple(names)


@dataclass
class AssumptionReport:
    holds: bool
    witness: tuple[float, ...] | None
    worst_gap: float
    checked: int
    vacuous: bool = False


def check_initial_assumption(sys: ControlSystem, samples: int = 1000, seed: int = 0) -> AssumptionReport:
    """Sampled check that no secret initial state is revealed at time zero.

    For each sampled secret initial state x0 the closest non-secret initial
    output is searched for: first over a sample pool and box corners, then by
    a bounded local minimisation on each complement piece.
    """
    secret = _secret_initial(sys)
    if box_is_empty(secret.box):
        return AssumptionReport(True, None, 0.0, 0, vacuous=True)
    pieces = complement_pieces(sys.X0, sys.Xs)
    try:
        x0s = sample_set(secret, count=samples, seed=seed)
    except UnsampleableSetError:
        raise
    delta = sys.delta
    tol = delta * 1e-9 + 1e-12
    outs = sys.output

    def hvec(pts):
        return np.stack([h.evaluate_many(pts) for h in outs], axis=1)

    if not pieces:
        return AssumptionReport(False, tuple(x0s[0]), math.inf, len(x0s))
    pool = []
    for k, piece in enumerate(pieces):
        try:
            pool.append(sample_set(piece, count=2000, seed=seed + 1 + k))
        except UnsampleableSetError:
            pass
        corners = piece.box_corners()
        if len(corners):
            pool.append(corners[piece.contains_many(corners)])
    pool = np.concatenate(pool) if pool else np.zeros((0, sys.n))
    hx0 = hvec(x0s)
    best = np.full(len(x0s), math.inf)
    if len(pool):
        hp = hvec(pool)
        for i in range(0, len(x0s), 256):
            d = np.linalg.norm(hx0[i:i + 256, None, :] - hp[None, :, :], axis=2)
            best[i:i + 256] = d.min(axis=1)
    for i in np.nonzero(best > delta + tol)[0]:
        best[i] = min(best[i], _local_min_gap(sys, x0s[i], pieces, pool))
    fails = np.nonzero(best > delta + tol)[0]
    if len(fails):
        worst = fails[np.argmax(best[fails])]
        return AssumptionReport(False, tuple(float(v) for v in x0s[worst]), float(best[worst]), len(x0s))
    return AssumptionReport(True, None, float(best.max()), len(x0s))


def _local_min_gap(sys: ControlSystem, x0, pieces, pool) -> float:
    h0 = np.array([h.evaluate(x0) for h in sys.output])
    best = math.inf
    for piece in pieces:
        bbox = piece.bounding_box()
        if bbox is None:
            continue
        bounds = [(lo if math.isfinite(lo) else None, hi if math.isfinite(hi) else None) for lo, hi in bbox]
        cons = piece.constraints

        def obj(z):
            d = np.array([h.evaluate(z) for h in sys.output]) - h0
            pen = sum(min(0.0, g.evaluate(z)) ** 2 for g in cons)
            return float(d @ d) + 1e6 * pen

        inside = pool[piece.contains_many(pool)] if len(pool) else pool
        if len(inside):
            start = inside[np.argmin(np.linalg.norm(
                np.stack([h.evaluate_many(inside) for h in sys.output], axis=1) - h0, axis=1))]
        else:
            start = np.array([(lo + hi) / 2 if math.isfinite(lo + hi) else 0.0 for lo, hi in bbox])
        res = minimize(obj, start, method="L-BFGS-B", bounds=bounds,
                       options={"ftol": 1e-15, "gtol": 1e-12})
        z = np.clip(res.x, [b[0] for b in bbox], [b[1] for b in bbox])
        if piece.contains(z):
            best = min(best, float(np.linalg.norm(np.array([h.evaluate(z) for h in sys.output]) - h0)))
    return best
