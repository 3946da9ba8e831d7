"""Sparse multivariate polynomials over named variables.

A :class:`Polynomial` maps exponent tuples (aligned with a
:class:`VariableSpace`) to float coefficients.  Polynomials are immutable;
every operation returns a new object with zero coefficients dropped.

Monomials are ordered graded-lexicographically everywhere (total degree
first, then larger exponents of earlier variables first), so printed
polynomials and Gram bases come out byte-identical across runs.

    >>> sp = VariableSpace(("x1", "x2"))
    >>> p = parse_polynomial("x1^2 - 2*x1*x2 + 1", sp)
    >>> p.evaluate([1.0, 1.0])
    0.0
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

Monomial = tuple[int, ...]

ROLES = ("state", "partner-state", "input", "partner-input")
_ROLE_RANK = {r: i for i, r in enumerate(ROLES)}


class PolynomialSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownVariableError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown variable {name!r}")
        self.name = name


class SpaceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpace:
    """Ordered variable names; the order fixes exponent-vector positions."""

    names: tuple[str, ...]
    roles: tuple[str, ...] | None = None

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        roles = ("state",) * len(names) if self.roles is None else tuple(self.roles)
        if len(roles) != len(names):
            raise ValueError("one role per variable required")
        for r in roles:
            if r not in _ROLE_RANK:
                raise ValueError(f"unknown role {r!r}")
        ranks = [_ROLE_RANK[r] for r in roles]
        if ranks != sorted(ranks):
            raise ValueError("roles must be contiguous in the order x, xh, u, uh")
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariableError(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def with_role(self, role: str) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.names, self.roles) if r == role)


def monomial_key(mono: Monomial) -> tuple:
    """Sort key realising graded-lex order."""
    return (sum(mono), tuple(-e for e in mono))


def monomial_basis(space: VariableSpace, degree: int,
                   variables: Iterable[str] | None = None) -> list[Monomial]:
    """All monomials of total degree <= ``degree`` in graded-lex order.

    ``variables`` restricts the basis to a subset of the space; exponents of
    the remaining variables are zero.
    """
    if degree < 0:
        return []
    n = len(space)
    idx = list(range(n)) if variables is None else sorted(space.index(v) for v in variables)
    k = len(idx)
    out = []
    for d in range(degree + 1):
        # combinations_with_replacement yields lex order with earlier variables first
        for combo in itertools.combinations_with_replacement(range(k), d):
            e = [0] * n
            for c in combo:
                e[idx[c]] += 1
            out.append(tuple(e))
    out.sort(key=monomial_key)
    return out


class Polynomial:
    """Immutable sparse polynomial with float coefficients."""

    __slots__ = ("space", "_terms", "_hash")

    def __init__(self, space: VariableSpace, terms: Mapping[Monomial, float] | None = None):
        self.space = space
        n = len(space)
        clean: dict[Monomial, float] = {}
        for mono, c in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != n:
                raise ValueError(f"monomial {mono} does not match {n} variables")
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            c = float(c)
            if c != 0.0:
                clean[mono] = c
        self._terms = clean
        self._hash = None

    # construction helpers
    @classmethod
    def _raw(cls, space: VariableSpace, terms: dict) -> "Polynomial":
        p = cls.__new__(cls)
        p.space = space
        p._terms = {m: c for m, c in terms.items() if c != 0.0}
        p._hash = None
        return p

    @classmethod
    def constant(cls, space: VariableSpace, c: float) -> "Polynomial":
        return cls._raw(space, {(0,) * len(space): float(c)})

    @classmethod
    def variable(cls, space: VariableSpace, name: str) -> "Polynomial":
        e = [0] * len(space)
        e[space.index(name)] = 1
        return cls._raw(space, {tuple(e): 1.0})

    @classmethod
    def zero(cls, space: VariableSpace) -> "Polynomial":
        return cls._raw(space, {})

    @property
    def terms(self) -> Mapping[Monomial, float]:
        return MappingProxyType(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self._terms), default=-1)

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def constant_term(self) -> float:
        return self._terms.get((0,) * len(self.space), 0.0)

    def monomials(self) -> list[Monomial]:
        return sorted(self._terms, key=monomial_key)

    def variables_used(self) -> tuple[str, ...]:
        used = set()
        for m in self._terms:
            used.update(i for i, e in enumerate(m) if e)
        return tuple(self.space.names[i] for i in sorted(used))

    def degree_in(self, names: Iterable[str]) -> int:
        idx = [self.space.index(n) for n in names]
        return max((sum(m[i] for i in idx) for m in self._terms), default=-1)

    # arithmetic
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.space != self.space:
                raise SpaceMismatchError("polynomials live in different variable spaces")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.space, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw(self.space, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial._raw(self.space, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only non-negative integer powers")
        result = Polynomial.constant(self.space, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def scale(self, c: float) -> "Polynomial":
        c = float(c)
        return Polynomial._raw(self.space, {m: c * v for m, v in self._terms.items()})

    # evaluation
    def evaluate(self, point: Sequence[float]) -> float:
        if len(point) != len(self.space):
            raise ValueError(f"point has {len(point)} entries, space has {len(self.space)}")
        total = 0.0
        for mono, c in self._terms.items():
            v = c
            for x, e in zip(point, mono):
                if e:
                    v *= float(x) ** e
            total += v
        return total

    def evaluate_many(self, points) -> np.ndarray:
        """Evaluate at each row of a ``(k, n)`` array."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.shape[1] != len(self.space):
            raise ValueError(f"points have {pts.shape[1]} columns, space has {len(self.space)}")
        out = np.zeros(pts.shape[0])
        if not self._terms:
            return out
        maxdeg = max(max(m) for m in self._terms)
        powers = [[np.ones(pts.shape[0])] for _ in range(pts.shape[1])]
        for j in range(pts.shape[1]):
            for _ in range(maxdeg):
                powers[j].append(powers[j][-1] * pts[:, j])
        for mono, c in self._terms.items():
            v = np.full(pts.shape[0], c)
            for j, e in enumerate(mono):
                if e:
                    v = v * powers[j][e]
            out += v
        return out

    # composition
    def substitute(self, images: Mapping[str, "Polynomial"] | Sequence["Polynomial"],
                   target: VariableSpace | None = None) -> "Polynomial":
        """Compose: replace each variable by its image polynomial.

        Variables absent from a mapping are an error when they occur in
        ``self``; a sequence must list one image per variable.
        """
        if isinstance(images, Mapping):
            seq = []
            for i, name in enumerate(self.space.names):
                seq.append(images.get(name))
        else:
            seq = list(images)
            if len(seq) != len(self.space):
                raise ValueError("one image per variable required")
        spaces = {img.space for img in seq if img is not None}
        if target is None:
            if len(spaces) != 1:
                raise SpaceMismatchError("images must share one target space")
            target = spaces.pop()
        elif any(s != target for s in spaces):
            raise SpaceMismatchError("images must share the target space")
        used = set()
        for m in self._terms:
            used.update(i for i, e in enumerate(m) if e)
        for i in used:
            if seq[i] is None:
                raise KeyError(f"no image for variable {self.space.names[i]!r}")
        cache: dict[tuple[int, int], Polynomial] = {}

        def power(i: int, e: int) -> Polynomial:
            key = (i, e)
            if key not in cache:
                if e == 1:
                    cache[key] = seq[i]
                else:
                    half = power(i, e // 2)
                    sq = half * half
                    cache[key] = sq * seq[i] if e % 2 else sq
            return cache[key]

        out: dict[Monomial, float] = {}
        zero = (0,) * len(target)
        for mono, c in self._terms.items():
            term = None
            for i, e in enumerate(mono):
                if e:
                    pw = power(i, e)
                    term = pw if term is None else term * pw
            if term is None:
                out[zero] = out.get(zero, 0.0) + c
            else:
                for m, v in term._terms.items():
                    out[m] = out.get(m, 0.0) + c * v
        return Polynomial._raw(target, out)

    def embed(self, target: VariableSpace, rename: Mapping[str, str] | None = None) -> "Polynomial":
        """Re-express in ``target`` by (optionally renamed) variable names."""
        rename = rename or {}
        pos = [target.index(rename.get(n, n)) for n in self.space.names]
        out = {}
        n = len(target)
        for mono, c in self._terms.items():
            e = [0] * n
            for i, k in enumerate(mono):
                if k:
                    e[pos[i]] += k
            out[tuple(e)] = c
        return Polynomial._raw(target, out)

    # comparison / printing
    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.space, frozenset(self._terms.items())))
        return self._hash

    def __str__(self):
        return format_polynomial(self)

    def __repr__(self):
        return f"Polynomial({format_polynomial(self)!r})"


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    return p + q


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    return p * q


def scale(c: float, p: Polynomial) -> Polynomial:
    return p.scale(c)


def evaluate(p: Polynomial, point: Sequence[float]) -> float:
    return p.evaluate(point)


def substitute(p: Polynomial, images, target: VariableSpace | None = None) -> Polynomial:
    return p.substitute(images, target)


# printing

def _fmt_number(c: float) -> str:
    if not math.isfinite(c):
        raise ValueError(f"non-finite coefficient {c}")
    return repr(float(c))


def _fmt_monomial(mono: Monomial, names: Sequence[str]) -> str:
    parts = []
    for name, e in zip(names, mono):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts)


def format_polynomial(p: Polynomial) -> str:
    """Print in graded-lex order using shortest round-trip coefficients."""
    if p.is_zero():
        return "0"
    chunks = []
    for k, mono in enumerate(p.monomials()):
        c = p._terms[mono]
        mtxt = _fmt_monomial(mono, p.space.names)
        neg = c < 0
        a = -c if neg else c
        if mtxt and a == 1.0:
            body = mtxt
        elif mtxt:
            body = f"{_fmt_number(a)}*{mtxt}"
        else:
            body = _fmt_number(a)
        if k == 0:
            chunks.append(("-" if neg else "") + body)
        else:
            chunks.append((" - " if neg else " + ") + body)
    return "".join(chunks)


# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*^()])"
    r")"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise PolynomialSyntaxError(f"unexpected character {text[start]!r}",
                                        len(text[:start].encode()))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(text[:start].encode())))
        pos = m.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


class _Parser:
    def __init__(self, text: str, space: VariableSpace):
        self.toks = _tokenize(text)
        self.i = 0
        self.space = space

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, off = self.take()
        if kind != "op" or val != op:
            raise PolynomialSyntaxError(f"expected {op!r}, found {val or 'end of input'!r}", off)

    def expr(self) -> Polynomial:
        kind, val, _ = self.peek()
        neg = False
        if kind == "op" and val == "-":
            self.take()
            neg = True
        acc = self.term()
        if neg:
            acc = -acc
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                t = self.term()
                acc = acc + t if val == "+" else acc - t
            else:
                return acc

    def term(self) -> Polynomial:
        acc = self.factor()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "*":
                self.take()
                acc = acc * self.factor()
            else:
                return acc

    def _exponent(self) -> int | None:
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val, off = self.take()
            if kind != "num" or not val.isdigit():
                raise PolynomialSyntaxError("exponent must be a non-negative integer", off)
            return int(val)
        return None

    def factor(self) -> Polynomial:
        kind, val, off = self.take()
        if kind == "num":
            return Polynomial.constant(self.space, float(val))
        if kind == "ident":
            if val not in self.space:
                raise UnknownVariableError(val)
            base = Polynomial.variable(self.space, val)
            e = self._exponent()
            return base if e is None else base ** e
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect_op(")")
            e = self._exponent()
            return inner if e is None else inner ** e
        raise PolynomialSyntaxError(f"unexpected {val or 'end of input'!r}", off)


def parse_polynomial(text: str, space: VariableSpace) -> Polynomial:
    """Parse the ASCII polynomial grammar into a :class:`Polynomial`.

    Raises :class:`PolynomialSyntaxError` (with byte offset) or
    :class:`UnknownVariableError`.
    """
    parser = _Parser(text, space)
    result = parser.expr()
    kind, val, off = parser.peek()
    if kind != "end":
        raise PolynomialSyntaxError(f"unexpected {val!r}", off)
    return result


def exponent_matrix(p: Polynomial) -> tuple[np.ndarray, np.ndarray]:
    """(terms x vars) exponent array and coefficient vector, graded-lex order."""
    monos = p.monomials()
    if not monos:
        return np.zeros((0, len(p.space)), dtype=int), np.zeros(0)
    return np.array(monos, dtype=int), np.array([p._terms[m] for m in monos])
