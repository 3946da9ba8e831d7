"""Control system definitions, semialgebraic sets and point sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .polyalg import (
    Polynomial,
    PolynomialSyntaxError,
    UnknownVariableError,
    VariableSpace,
    parse_polynomial,
)


class SpecError(ValueError):
    """Malformed or inconsistent system description."""


class UnsampleableSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SemiAlgebraicSet:
    """Conjunction ``g_i(z) >= 0`` with optional box and disjunctive members.

    Membership requires the box, every constraint and (when ``union`` is
    non-empty) at least one union member.
    """

    space: VariableSpace
    constraints: tuple[Polynomial, ...] = ()
    box: tuple[tuple[float, float], ...] | None = None
    union: tuple["SemiAlgebraicSet", ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "union", tuple(self.union))
        if self.box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
            if len(box) != len(self.space):
                raise ValueError(f"box has {len(box)} intervals, space has {len(self.space)}")
            object.__setattr__(self, "box", box)
        for g in self.constraints:
            if g.space != self.space:
                raise ValueError("constraint polynomial outside the set's variable space")
        for s in self.union:
            if s.space != self.space:
                raise ValueError("union member outside the set's variable space")

    @property
    def is_box(self) -> bool:
        return self.box is not None and not self.constraints and not self.union

    def box_constraints(self) -> list[Polynomial]:
        if self.box is None:
            return []
        out = []
        for name, (lo, hi) in zip(self.space.names, self.box):
            z = Polynomial.variable(self.space, name)
            if math.isfinite(lo):
                out.append(z - lo)
            if math.isfinite(hi):
                out.append(hi - z)
        return out

    def expanded_constraints(self) -> list[Polynomial]:
        """Box shorthand expanded, followed by the explicit constraints."""
        return self.box_constraints() + list(self.constraints)

    def pieces(self) -> list["SemiAlgebraicSet"]:
        """Flatten into basic (union-free) sets whose union is this set."""
        if not self.union:
            return [self]
        out = []
        for member in self.union:
            for piece in member.pieces():
                out.append(intersect(SemiAlgebraicSet(self.space, self.constraints, self.box), piece))
        return out

    def contains(self, point: Sequence[float]) -> bool:
        return bool(self.contains_many(np.asarray(point, dtype=float)[None, :])[0])

    def contains_many(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != len(self.space):
            raise ValueError(f"points must have {len(self.space)} columns")
        ok = np.ones(pts.shape[0], dtype=bool)
        if self.box is not None:
            lo = np.array([b[0] for b in self.box])
            hi = np.array([b[1] for b in self.box])
            ok &= np.all((pts >= lo) & (pts <= hi), axis=1)
        for g in self.constraints:
            ok &= g.evaluate_many(pts) >= 0.0
        if self.union:
            any_ok = np.zeros(pts.shape[0], dtype=bool)
            for member in self.union:
                any_ok |= member.contains_many(pts)
            ok &= any_ok
        return ok

    def bounding_box(self) -> tuple[tuple[float, float], ...] | None:
        """Box enclosing the set, derived from box data only."""
        if not self.union:
            return self.box
        member_boxes = [m.bounding_box() for m in self.union]
        if any(b is None for b in member_boxes):
            return self.box
        hull = tuple((min(b[i][0] for b in member_boxes), max(b[i][1] for b in member_boxes))
                     for i in range(len(self.space)))
        if self.box is None:
            return hull
        return tuple((max(a[0], h[0]), min(a[1], h[1])) for a, h in zip(self.box, hull))

    def box_corners(self) -> np.ndarray:
        """Corners of every piece's box (finite boxes only)."""
        rows = []
        for piece in self.pieces():
            if piece.box is None or not all(math.isfinite(v) for b in piece.box for v in b):
                continue
            choices = [sorted({lo, hi}) for lo, hi in piece.box]
            grids = np.meshgrid(*choices, indexing="ij")
            rows.append(np.stack([g.ravel() for g in grids], axis=1))
        if not rows:
            return np.zeros((0, len(self.space)))
        return np.unique(np.concatenate(rows), axis=0)


def box_set(space: VariableSpace, box) -> SemiAlgebraicSet:
    return SemiAlgebraicSet(space, (), tuple(box))


def intersect(a: SemiAlgebraicSet, b: SemiAlgebraicSet) -> SemiAlgebraicSet:
    if a.space != b.space:
        raise ValueError("cannot intersect sets over different spaces")
    if a.union and b.union:
        raise ValueError("intersection of two unions is not supported")
    if a.box is None:
        box = b.box
    elif b.box is None:
        box = a.box
    else:
        box = tuple((max(x[0], y[0]), min(x[1], y[1])) for x, y in zip(a.box, b.box))
    return SemiAlgebraicSet(a.space, a.constraints + b.constraints, box, a.union or b.union)


def box_is_empty(box) -> bool:
    return box is not None and any(lo > hi for lo, hi in box)


def membership(s: SemiAlgebraicSet, point: Sequence[float]) -> bool:
    if len(point) != len(s.space):
        raise ValueError(f"point has {len(point)} entries, set has {len(s.space)} variables")
    return s.contains(point)


def _sample_basic(s: SemiAlgebraicSet, bbox, count: int, rng: np.random.Generator,
                  min_rate: float, stratified: bool) -> np.ndarray:
    if count == 0:
        return np.zeros((0, len(s.space)))
    if bbox is None:
        raise UnsampleableSetError("no bounding box available for sampling")
    lo = np.array([b[0] for b in bbox], dtype=float)
    hi = np.array([b[1] for b in bbox], dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnsampleableSetError("bounding box must be finite")
    if np.any(lo > hi):
        raise UnsampleableSetError("empty bounding box")
    free = hi > lo
    accepted = []
    n_acc = 0
    drawn = 0
    batch = max(256, 2 * count)
    sampler = qmc.LatinHypercube(d=max(int(free.sum()), 1), seed=rng) if stratified else None
    while n_acc < count:
        if stratified:
            u = sampler.random(batch)
        else:
            u = rng.random((batch, max(int(free.sum()), 1)))
        cand = np.tile(lo, (batch, 1))
        if free.any():
            cand[:, free] = lo[free] + u[:, : int(free.sum())] * (hi[free] - lo[free])
        keep = s.contains_many(cand)
        drawn += batch
        if keep.any():
            accepted.append(cand[keep])
            n_acc += int(keep.sum())
        if drawn >= 100_000 and n_acc / drawn < min_rate:
            raise UnsampleableSetError(
                f"acceptance rate {n_acc / drawn:.2e} below {min_rate:.0e} after {drawn} draws")
        if drawn >= 20_000_000:
            raise UnsampleableSetError(f"only {n_acc} of {count} points after {drawn} draws")
        rate = max(n_acc / drawn, min_rate)
        batch = int(min(max(256, 1.2 * (count - n_acc) / rate), 2_000_000))
    return np.concatenate(accepted)[:count]


def sample_set(s: SemiAlgebraicSet, bounding_box=None, count: int = 1000, seed: int = 0,
               *, min_rate: float = 1e-4, stratified: bool = False) -> np.ndarray:
    """Draw ``count`` points of ``s`` by rejection sampling, deterministically.

    Union members are sampled separately (so thin faces with pinned
    coordinates are reachable) with counts split as evenly as possible.
    Degenerate intervals ``lo == hi`` are pinned, not rejected.
    """
    rng = np.random.default_rng(seed)
    pieces = s.pieces()
    base, extra = divmod(count, len(pieces))
    out = []
    for k, piece in enumerate(pieces):
        n = base + (1 if k < extra else 0)
        bbox = bounding_box if bounding_box is not None else piece.bounding_box()
        if bbox is not None and piece.box is not None:
            bbox = tuple((max(a[0], p[0]), min(a[1], p[1])) for a, p in zip(bbox, piece.box))
        out.append(_sample_basic(piece, bbox, n, rng, min_rate, stratified))
    pts = np.concatenate(out) if out else np.zeros((0, len(s.space)))
    return pts


def box_boundary_regions(box: SemiAlgebraicSet, delta: float,
                         pairs: Sequence[tuple[str, str]],
                         extra_constraints: Sequence[Polynomial] = ()) -> SemiAlgebraicSet:
    """Faces of a paired box lying within ``delta`` of the diagonal.

    For each coordinate pair ``(a, b)`` four faces are produced, in the
    order: ``b`` pinned low, ``a`` pinned low, ``a`` pinned high, ``b``
    pinned high.  The partner coordinate of each face is narrowed to the
    ``delta`` band.  Empty faces are dropped.
    """
    if box.box is None or box.constraints or box.union:
        raise ValueError("box_boundary_regions needs a plain box")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    bounds = list(box.box)
    if not all(math.isfinite(v) for b in bounds for v in b):
        raise ValueError("box must be bounded")
    faces = []
    for a, b in pairs:
        ia, ib = box.space.index(a), box.space.index(b)
        (alo, ahi), (blo, bhi) = bounds[ia], bounds[ib]
        specs = [
            (ib, blo, ia, max(alo, blo - delta), min(ahi, blo + delta)),
            (ia, alo, ib, max(blo, alo - delta), min(bhi, alo + delta)),
            (ia, ahi, ib, max(blo, ahi - delta), min(bhi, ahi + delta)),
            (ib, bhi, ia, max(alo, bhi - delta), min(ahi, bhi + delta)),
        ]
        for pin, val, partner, plo, phi in specs:
            if plo > phi:
                continue
            fb = list(bounds)
            fb[pin] = (val, val)
            fb[partner] = (plo, phi)
            faces.append(SemiAlgebraicSet(box.space, tuple(extra_constraints), tuple(fb)))
    return SemiAlgebraicSet(box.space, (), None, tuple(faces))


@dataclass(frozen=True)
class ControlSystem:
    """The tuple (X, X0, Xs, U, f, Y, h) plus the intruder precision delta."""

    name: str
    state_space: VariableSpace
    input_space: VariableSpace
    dyn_space: VariableSpace
    dynamics: tuple[Polynomial, ...]
    output: tuple[Polynomial, ...]
    X: SemiAlgebraicSet
    X0: SemiAlgebraicSet
    Xs: SemiAlgebraicSet
    U: SemiAlgebraicSet
    delta: float
    gap_states: tuple[str, ...] | None = None
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self) -> int:
        return len(self.state_space)

    @property
    def m(self) -> int:
        return len(self.input_space)

    def step(self, x, u) -> np.ndarray:
        z = np.concatenate([np.asarray(x, float), np.asarray(u, float)])
        return np.array([f.evaluate(z) for f in self.dynamics])

    def with_delta(self, delta: float) -> "ControlSystem":
        if delta < 0:
            raise SpecError("delta must be non-negative")
        src = dict(self.source)
        src["delta"] = delta
        return system_from_dict(src, check_inclusion=False)


_SPEC_FIELDS = {"name", "state_vars", "input_vars", "dynamics", "output", "state_set",
                "initial_set", "secret_set", "input_set", "delta", "reach_gap_states"}
_REQUIRED = _SPEC_FIELDS - {"reach_gap_states"}


def _parse_set(doc, space: VariableSpace, label: str) -> SemiAlgebraicSet:
    if not isinstance(doc, dict) or len(doc) != 1:
        raise SpecError(f"{label}: expected one of box / inequalities / union")
    (kind, body), = doc.items()
    if kind == "box":
        if not isinstance(body, list) or len(body) != len(space):
            raise SpecError(f"{label}: box needs {len(space)} intervals")
        box = []
        for iv in body:
            if not (isinstance(iv, list) and len(iv) == 2 and all(isinstance(v, (int, float)) for v in iv)):
                raise SpecError(f"{label}: malformed interval {iv!r}")
            if iv[0] > iv[1]:
                raise SpecError(f"{label}: interval {iv!r} has lo > hi")
            box.append((float(iv[0]), float(iv[1])))
        return SemiAlgebraicSet(space, (), tuple(box))
    if kind == "inequalities":
        if not isinstance(body, list):
            raise SpecError(f"{label}: inequalities must be a list")
        return SemiAlgebraicSet(space, tuple(_parse_poly(t, space, label) for t in body))
    if kind == "union":
        if not isinstance(body, list) or not body:
            raise SpecError(f"{label}: union must be a non-empty list")
        return SemiAlgebraicSet(space, (), None, tuple(_parse_set(s, space, label) for s in body))
    raise SpecError(f"{label}: unknown set kind {kind!r}")


def _parse_poly(text, space: VariableSpace, label: str) -> Polynomial:
    if not isinstance(text, str):
        raise SpecError(f"{label}: polynomial must be a string, got {text!r}")
    try:
        return parse_polynomial(text, space)
    except (PolynomialSyntaxError, UnknownVariableError) as exc:
        raise SpecError(f"{label}: {exc}") from exc


def _names(doc, label) -> tuple[str, ...]:
    if not isinstance(doc, list) or not all(isinstance(v, str) for v in doc):
        raise SpecError(f"{label} must be a list of identifiers")
    return tuple(doc)


def system_from_dict(doc: dict, *, check_inclusion: bool = True) -> ControlSystem:
    if not isinstance(doc, dict):
        raise SpecError("system spec must be a JSON object")
    unknown = set(doc) - _SPEC_FIELDS
    if unknown:
        raise SpecError(f"unknown fields: {sorted(unknown)}")
    missing = _REQUIRED - set(doc)
    if missing:
        raise SpecError(f"missing fields: {sorted(missing)}")
    xs = _names(doc["state_vars"], "state_vars")
    us = _names(doc["input_vars"], "input_vars")
    try:
        state_space = VariableSpace(xs, ("state",) * len(xs))
        input_space = VariableSpace(us, ("input",) * len(us))
        dyn_space = VariableSpace(xs + us, ("state",) * len(xs) + ("input",) * len(us))
    except ValueError as exc:
        raise SpecError(str(exc)) from exc
    if not isinstance(doc["dynamics"], list):
        raise SpecError("dynamics must be a list")
    if len(doc["dynamics"]) != len(xs):
        raise SpecError(f"dimension mismatch: {len(doc['dynamics'])} dynamics for {len(xs)} states")
    dynamics = tuple(_parse_poly(t, dyn_space, f"dynamics[{i}]") for i, t in enumerate(doc["dynamics"]))
    if not isinstance(doc["output"], list) or not doc["output"]:
        raise SpecError("output must be a non-empty list")
    output = tuple(_parse_poly(t, state_space, f"output[{i}]") for i, t in enumerate(doc["output"]))
    X = _parse_set(doc["state_set"], state_space, "state_set")
    X0 = _parse_set(doc["initial_set"], state_space, "initial_set")
    Xs = _parse_set(doc["secret_set"], state_space, "secret_set")
    U = _parse_set(doc["input_set"], input_space, "input_set")
    delta = doc["delta"]
    if isinstance(delta, bool) or not isinstance(delta, (int, float)) or not math.isfinite(delta):
        raise SpecError("delta must be a number")
    if delta < 0:
        raise SpecError("delta must be non-negative")
    gap_states = None
    if "reach_gap_states" in doc:
        gap_states = _names(doc["reach_gap_states"], "reach_gap_states")
        for g in gap_states:
            if g not in state_space:
                raise SpecError(f"reach_gap_states: unknown state {g!r}")
    name = doc["name"]
    if not isinstance(name, str):
        raise SpecError("name must be a string")
    sys = ControlSystem(name, state_space, input_space, dyn_space, dynamics, output,
                        X, X0, Xs, U, float(delta), gap_states, dict(doc))
    if check_inclusion:
        for label, sub in (("initial_set", X0), ("secret_set", Xs)):
            try:
                pts = sample_set(sub, X.bounding_box() if sub.bounding_box() is None else None,
                                 1000, seed=0)
            except UnsampleableSetError:
                continue
            if not X.contains_many(pts).all():
                raise SpecError(f"{label} is not contained in state_set (sampled point outside)")
    return sys


def load_spec(path: str | Path) -> ControlSystem:
    """Load and validate a JSON system description."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed document: {exc}") from exc
    return system_from_dict(doc)
