"""Candidate functions over generalized coordinates.

Expressions are kept in a canonical sum-of-monomials form over the atom set
``{q_i, qd_i, sin(q_i), cos(q_i)}``.  That form is closed under products,
integer powers and partial differentiation, which is all a candidate library
needs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from numbers import Real
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

# canonical factor order inside a monomial
KINDS = ("q", "qd", "sin", "cos")
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}

_SUPERSCRIPTS = str.maketrans("0123456789-", "⁰¹²³⁴⁵⁶⁷⁸⁹⁻")
_COMBINING_DOT = "̇"


class Atom(NamedTuple):
    kind: str
    index: int


# a monomial is a sorted tuple of (atom, power) pairs; () is the constant 1
Monomial = tuple


def _atom_key(atom: Atom) -> tuple[int, int]:
    return (_KIND_RANK[atom.kind], atom.index)


def _mono_mul(a: Monomial, b: Monomial) -> Monomial:
    powers = dict(a)
    for atom, p in b:
        powers[atom] = powers.get(atom, 0) + p
    return tuple(sorted(((k, v) for k, v in powers.items() if v), key=lambda kv: _atom_key(kv[0])))


def _mono_key(m: Monomial):
    return (sum(p for _, p in m), tuple((_atom_key(a), p) for a, p in m))


@dataclass(frozen=True)
class CoordinateSpace:
    """Labels for q_1..q_n.  ``names`` are ASCII identifiers, ``symbols`` are
    the pretty (unicode) versions used when rendering."""

    names: tuple[str, ...]
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) < 1:
            raise ValueError("a coordinate space needs at least one coordinate")
        if len(set(names)) != len(names):
            raise ValueError(f"coordinate labels must be unique, got {names}")
        symbols = tuple(self.symbols) if self.symbols else names
        if len(symbols) != len(names):
            raise ValueError("symbols and names must have the same length")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "symbols", symbols)

    @property
    def n(self) -> int:
        return len(self.names)

    def _atom(self, kind: str, i: int) -> "CandidateExpr":
        if not 0 <= i < self.n:
            raise IndexError(f"coordinate index {i} out of range for n={self.n}")
        return CandidateExpr(self, (((( Atom(kind, i), 1),), 1),))

    def q(self, i: int = 0) -> "CandidateExpr":
        return self._atom("q", i)

    def qd(self, i: int = 0) -> "CandidateExpr":
        return self._atom("qd", i)

    def sin(self, i: int = 0) -> "CandidateExpr":
        return self._atom("sin", i)

    def cos(self, i: int = 0) -> "CandidateExpr":
        return self._atom("cos", i)

    def constant(self, value: Real) -> "CandidateExpr":
        return CandidateExpr(self, (((), value),))

    def atom(self, name: str) -> "CandidateExpr":
        """Parse an atom label: ``theta``, ``theta_dot``, ``sin(theta)``, ``cos(theta)``."""
        name = name.strip()
        for kind in ("sin", "cos"):
            if name.startswith(kind + "(") and name.endswith(")"):
                return self._atom(kind, self._index(name[len(kind) + 1 : -1]))
        if name.endswith("_dot"):
            return self.qd(self._index(name[: -len("_dot")]))
        return self.q(self._index(name))

    def _index(self, label: str) -> int:
        try:
            return self.names.index(label)
        except ValueError:
            raise KeyError(f"unknown coordinate {label!r}; known: {self.names}") from None

    def variable(self, name: str) -> Atom:
        """Differentiation variable from a label (``theta`` or ``theta_dot``)."""
        if name.endswith("_dot"):
            return Atom("qd", self._index(name[: -len("_dot")]))
        return Atom("q", self._index(name))

    # -- labels -----------------------------------------------------------
    def atom_name(self, atom: Atom) -> str:
        base = self.names[atom.index]
        return {"q": base, "qd": base + "_dot", "sin": f"sin({base})", "cos": f"cos({base})"}[atom.kind]

    def atom_symbol(self, atom: Atom) -> str:
        base = self.symbols[atom.index]
        if atom.kind == "qd":
            # dot goes over the base letter, before any subscript
            return base[0] + _COMBINING_DOT + base[1:]
        if atom.kind in ("sin", "cos"):
            return f"{atom.kind}({base})"
        return base


@dataclass(frozen=True, eq=False)
class CandidateExpr:
    """Immutable polynomial in the atoms of a coordinate space."""

    space: CoordinateSpace
    terms: tuple = field(default=())  # ((monomial, coefficient), ...)

    def __post_init__(self):
        merged: dict = {}
        for mono, coef in self.terms:
            merged[mono] = merged.get(mono, 0) + coef
        canon = tuple(sorted(((m, c) for m, c in merged.items() if c != 0), key=lambda mc: _mono_key(mc[0])))
        object.__setattr__(self, "terms", canon)

    # -- algebra ----------------------------------------------------------
    def _coerce(self, other) -> "CandidateExpr":
        if isinstance(other, CandidateExpr):
            if other.space != self.space:
                raise ValueError("cannot combine expressions from different coordinate spaces")
            return other
        if isinstance(other, Real):
            return self.space.constant(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return CandidateExpr(self.space, self.terms + other.terms)

    __radd__ = __add__

    def __neg__(self):
        return CandidateExpr(self.space, tuple((m, -c) for m, c in self.terms))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return CandidateExpr(
            self.space,
            tuple((_mono_mul(m1, m2), c1 * c2) for m1, c1 in self.terms for m2, c2 in other.terms),
        )

    __rmul__ = __mul__

    def __pow__(self, power: int):
        if not isinstance(power, int) or power < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = self.space.constant(1)
        for _ in range(power):
            out = out * self
        return out

    def __eq__(self, other):
        return isinstance(other, CandidateExpr) and self.space == other.space and self.terms == other.terms

    def __hash__(self):
        return hash((self.space, self.terms))

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def atoms(self) -> set[Atom]:
        return {a for mono, _ in self.terms for a, _ in mono}

    # -- naming -----------------------------------------------------------
    def _format(self, atom_label, pow_fmt, mul: str) -> str:
        if not self.terms:
            return "0"
        parts = []
        for mono, coef in self.terms:
            factors = [atom_label(a) + (pow_fmt(p) if p != 1 else "") for a, p in mono]
            if not factors:
                parts.append(_fmt_num(coef))
                continue
            body = mul.join(factors)
            if coef == 1:
                parts.append(body)
            elif coef == -1:
                parts.append("-" + body)
            else:
                parts.append(_fmt_num(coef) + mul + body)
        return " + ".join(parts).replace("+ -", "- ")

    @property
    def name(self) -> str:
        """ASCII label, e.g. ``theta_dot^2*cos(theta)``."""
        return self._format(self.space.atom_name, lambda p: f"^{p}", "*")

    @property
    def symbol(self) -> str:
        """Unicode label, e.g. ``θ̇²cos(θ)``."""
        return self._format(self.space.atom_symbol, lambda p: str(p).translate(_SUPERSCRIPTS), "")

    def __str__(self):
        return self.symbol

    def __repr__(self):
        return f"CandidateExpr({self.name!r})"


def _fmt_num(x) -> str:
    if isinstance(x, int) or float(x).is_integer():
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# evaluation and differentiation
# ---------------------------------------------------------------------------

def _atom_value(atom: Atom, q, qd, cache: dict):
    if atom not in cache:
        if atom.kind == "q":
            cache[atom] = q[..., atom.index]
        elif atom.kind == "qd":
            cache[atom] = qd[..., atom.index]
        elif atom.kind == "sin":
            cache[atom] = np.sin(q[..., atom.index])
        else:
            cache[atom] = np.cos(q[..., atom.index])
    return cache[atom]


def _check_sample(space: CoordinateSpace, q, qd):
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if q.shape[-1:] != (space.n,) or qd.shape != q.shape:
        raise ValueError(
            f"sample dimension mismatch: expected q and qd with trailing size {space.n}, "
            f"got {q.shape} and {qd.shape}"
        )
    return q, qd


def evaluate(expr: CandidateExpr, q, qd, _cache: dict | None = None):
    """Value of ``expr`` at ``(q, qd)``.  Arrays with leading batch axes are
    evaluated elementwise; scalars come back as Python floats."""
    q, qd = _check_sample(expr.space, q, qd)
    cache = {} if _cache is None else _cache
    out = np.zeros(q.shape[:-1])
    for mono, coef in expr.terms:
        val = np.full(q.shape[:-1], float(coef))
        for atom, p in mono:
            val = val * _atom_value(atom, q, qd, cache) ** p
        out = out + val
    return float(out) if out.ndim == 0 else out


def evaluate_many(exprs: Sequence[CandidateExpr], q, qd) -> np.ndarray:
    """Stack of evaluations, shape ``(len(exprs),) + batch_shape``; atoms are
    computed once and shared."""
    if not exprs:
        raise ValueError("no expressions to evaluate")
    cache: dict = {}
    q, qd = _check_sample(exprs[0].space, q, qd)
    return np.stack([np.asarray(evaluate(e, q, qd, cache)) for e in exprs])


_ATOM_CODE = {"q": "q[..., {i}]", "qd": "qd[..., {i}]", "sin": "_sin(q[..., {i}])", "cos": "_cos(q[..., {i}])"}


def lambdify(exprs: Sequence[CandidateExpr]):
    """Compile expressions into ``f(q, qd) -> list of arrays``.

    Generated numpy code, one arithmetic expression per input, with every
    atom computed once.  Much faster than :func:`evaluate` for repeated calls
    on small batches (rollouts).
    """
    exprs = list(exprs)
    if not exprs:
        raise ValueError("no expressions to compile")
    space = exprs[0].space
    atoms = sorted({a for e in exprs for a in e.atoms}, key=_atom_key)
    local = {a: f"a{k}" for k, a in enumerate(atoms)}
    lines = ["def _f(q, qd):"]
    lines += [f"    {local[a]} = " + _ATOM_CODE[a.kind].format(i=a.index) for a in atoms]
    lines.append("    z = _zeros(q.shape[:-1])")
    outs = []
    for e in exprs:
        parts = []
        for mono, coef in e.terms:
            factors = [repr(float(coef))] + [local[a] + (f"**{p}" if p != 1 else "") for a, p in mono]
            parts.append("*".join(factors))
        outs.append("(" + " + ".join(parts) + ") + z" if parts else "z")
    lines.append("    return [" + ", ".join(outs) + "]")
    namespace = {"_sin": np.sin, "_cos": np.cos, "_zeros": np.zeros}
    exec(compile("\n".join(lines), "<lambdify>", "exec"), namespace)
    inner = namespace["_f"]

    def f(q, qd):
        q, qd = _check_sample(space, q, qd)
        return inner(q, qd)

    f.source = "\n".join(lines)
    return f


def _d_atom(atom: Atom, var: Atom):
    """(coefficient, replacement atom or None) for d atom / d var."""
    if atom.index != var.index:
        return None
    if var.kind == "qd":
        return (1, None) if atom.kind == "qd" else None
    if atom.kind == "q":
        return (1, None)
    if atom.kind == "sin":
        return (1, Atom("cos", atom.index))
    if atom.kind == "cos":
        return (-1, Atom("sin", atom.index))
    return None


def diff(expr: CandidateExpr, var) -> CandidateExpr:
    """Exact partial derivative with respect to a coordinate or velocity.

    ``var`` is an :class:`Atom` of kind ``q``/``qd``, a bare coordinate or
    velocity expression, or an ASCII label such as ``"theta_dot"``.
    """
    var = _as_variable(expr.space, var)
    out = []
    for mono, coef in expr.terms:
        for pos, (atom, p) in enumerate(mono):
            d = _d_atom(atom, var)
            if d is None:
                continue
            dcoef, repl = d
            rest = list(mono)
            if p == 1:
                rest.pop(pos)
            else:
                rest[pos] = (atom, p - 1)
            new = _mono_mul(tuple(sorted(rest, key=lambda kv: _atom_key(kv[0]))), ((repl, 1),) if repl else ())
            out.append((new, coef * p * dcoef))
    return CandidateExpr(expr.space, tuple(out))


def _as_variable(space: CoordinateSpace, var) -> Atom:
    if isinstance(var, str):
        return space.variable(var)
    if isinstance(var, CandidateExpr):
        if len(var.terms) == 1:
            mono, coef = var.terms[0]
            if coef == 1 and len(mono) == 1 and mono[0][1] == 1 and mono[0][0].kind in ("q", "qd"):
                var = mono[0][0]
    if isinstance(var, tuple) and len(var) == 2 and var[0] in ("q", "qd"):
        var = Atom(*var)
        if not 0 <= var.index < space.n:
            raise KeyError(f"variable index {var.index} out of range for n={space.n}")
        return var
    raise KeyError(f"{var!r} is not a coordinate or velocity of this space")


@dataclass(frozen=True)
class SecondPartials:
    """Symbolic pieces of the Euler-Lagrange operator for one candidate.

    ``M[i][j] = d2 phi / dqd_i dqd_j``, ``N[i][j] = d2 phi / dqd_i dq_j``,
    ``O[i] = d phi / dq_i``.
    """

    M: tuple
    N: tuple
    O: tuple


def second_partials(expr: CandidateExpr) -> SecondPartials:
    n = expr.space.n
    dqd = [diff(expr, Atom("qd", i)) for i in range(n)]
    M = tuple(tuple(diff(dqd[i], Atom("qd", j)) for j in range(n)) for i in range(n))
    N = tuple(tuple(diff(dqd[i], Atom("q", j)) for j in range(n)) for i in range(n))
    O = tuple(diff(expr, Atom("q", i)) for i in range(n))
    return SecondPartials(M, N, O)


def euler_lagrange(expr: CandidateExpr, q, qd, qdd) -> np.ndarray:
    """``d/dt dphi/dqd - dphi/dq`` evaluated numerically, shape ``(..., n)``."""
    q, qd = _check_sample(expr.space, q, qd)
    qdd = np.asarray(qdd, dtype=float)
    sp = second_partials(expr)
    n = expr.space.n
    cache: dict = {}
    ev = lambda e: np.asarray(evaluate(e, q, qd, cache)) if not e.is_zero else np.zeros(q.shape[:-1])
    out = []
    for i in range(n):
        r = -ev(sp.O[i])
        for j in range(n):
            r = r + ev(sp.M[i][j]) * qdd[..., j] + ev(sp.N[i][j]) * qd[..., j]
        out.append(r)
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# library construction
# ---------------------------------------------------------------------------

def polynomial_combinations(atoms: Sequence[CandidateExpr], max_order: int) -> list[CandidateExpr]:
    """All distinct monomials of total degree 1..max_order, graded lexicographic
    in atom position."""
    atoms = list(atoms)
    if not atoms:
        raise ValueError("atom list is empty")
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    out, seen = [], set()
    for degree in range(1, max_order + 1):
        for combo in itertools.combinations_with_replacement(range(len(atoms)), degree):
            term = atoms[combo[0]]
            for k in combo[1:]:
                term = term * atoms[k]
            if term not in seen:
                seen.add(term)
                out.append(term)
    return out


def cross_terms(set_a: Sequence[CandidateExpr], set_b: Sequence[CandidateExpr]) -> list[CandidateExpr]:
    if not set_a or not set_b:
        raise ValueError("cross_terms needs two nonempty sets")
    return [a * b for a in set_a for b in set_b]


TRIVIAL_SAMPLES = 64
TRIVIAL_TOL = 1e-9


def is_trivial_term(expr: CandidateExpr, space: CoordinateSpace | None = None, seed: int = 0) -> bool:
    """True when the Euler-Lagrange residual of ``expr`` vanishes for any
    motion (total time derivatives such as ``q**k * qd``)."""
    if space is not None and space != expr.space:
        raise ValueError("expression does not belong to the given coordinate space")
    rng = np.random.default_rng(seed)
    n = expr.space.n
    q, qd, qdd = rng.uniform(-2.0, 2.0, size=(3, TRIVIAL_SAMPLES, n))
    res = euler_lagrange(expr, q, qd, qdd)
    return bool(np.max(np.abs(res), initial=0.0) < TRIVIAL_TOL)


@dataclass(frozen=True)
class CandidateLibrary:
    """Ordered candidate terms plus per-term L1 mask and scales.

    ``penalty_mask[k]`` is False for declared known terms (exempt from the
    L1 proximal step).
    """

    terms: tuple
    penalty_mask: tuple = ()
    scales: tuple = ()
    known: tuple = ()

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("empty library")
        spaces = {t.space for t in terms}
        if len(spaces) != 1:
            raise ValueError("library terms must share one coordinate space")
        names = [t.name for t in terms]
        if len(set(names)) != len(names):
            dup = sorted({x for x in names if names.count(x) > 1})
            raise ValueError(f"duplicate library terms: {dup}")
        known = tuple(self.known)
        for k in known:
            if not 0 <= k < len(terms):
                raise IndexError(f"known term index {k} out of range")
        mask = tuple(self.penalty_mask) if self.penalty_mask else tuple(k not in known for k in range(len(terms)))
        if len(mask) != len(terms):
            raise ValueError("penalty_mask length does not match library size")
        for k, m in enumerate(mask):
            if not m and k not in known:
                raise ValueError(f"term {names[k]} is exempt from the penalty but not a declared known term")
        scales = tuple(float(s) for s in self.scales) if self.scales else (1.0,) * len(terms)
        if len(scales) != len(terms) or any(not s > 0 for s in scales):
            raise ValueError("scales must be positive, one per term")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "penalty_mask", mask)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "known", known)

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __getitem__(self, k):
        return self.terms[k]

    @property
    def space(self) -> CoordinateSpace:
        return self.terms[0].space

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def index(self, term) -> int:
        """Position of a term given as expression, ASCII name or unicode symbol."""
        for k, t in enumerate(self.terms):
            if term == t or term == t.name or term == t.symbol:
                return k
        raise KeyError(f"{term!s} is not in the library")

    def with_known(self, terms: Iterable) -> "CandidateLibrary":
        """Copy where the given terms are declared known (no L1 penalty)."""
        idx = tuple(sorted({self.index(t) for t in terms}))
        return CandidateLibrary(self.terms, (), self.scales, idx)

    def with_scales(self, scales: Sequence[float]) -> "CandidateLibrary":
        return CandidateLibrary(self.terms, self.penalty_mask, tuple(scales), self.known)


# ---------------------------------------------------------------------------
# library specs used by the run configuration
# ---------------------------------------------------------------------------

@dataclass
class LibraryGroup:
    atoms: list[str]
    max_order: int


@dataclass
class LibrarySpec:
    """Recipe for a library: per-group polynomial expansion, optional cross
    terms between the first two groups, then exclusions."""

    groups: list[LibraryGroup]
    cross: bool = False
    exclude: list[str] = field(default_factory=list)
    drop_trivial: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "LibrarySpec":
        groups = [g if isinstance(g, LibraryGroup) else LibraryGroup(list(g["atoms"]), int(g["max_order"])) for g in d["groups"]]
        return cls(groups, bool(d.get("cross", False)), list(d.get("exclude", [])), bool(d.get("drop_trivial", False)))

    def to_dict(self) -> dict:
        return {
            "groups": [{"atoms": list(g.atoms), "max_order": g.max_order} for g in self.groups],
            "cross": self.cross,
            "exclude": list(self.exclude),
            "drop_trivial": self.drop_trivial,
        }


def build_library(space: CoordinateSpace, spec: LibrarySpec) -> CandidateLibrary:
    if not spec.groups:
        raise ValueError("library spec has no atom groups")
    expanded = [polynomial_combinations([space.atom(a) for a in g.atoms], g.max_order) for g in spec.groups]
    terms = [t for group in expanded for t in group]
    if spec.cross:
        if len(expanded) < 2:
            raise ValueError("cross terms need two atom groups")
        terms += cross_terms(expanded[0], expanded[1])
    dropped = set()
    for label in spec.exclude:
        matches = [t for t in terms if label in (t.name, t.symbol)]
        if not matches:
            raise KeyError(f"excluded term {label!r} is not generated by this spec")
        dropped.update(matches)
    out, seen = [], set()
    for t in terms:
        if t in dropped or t in seen:
            continue
        if spec.drop_trivial and is_trivial_term(t):
            continue
        seen.add(t)
        out.append(t)
    return CandidateLibrary(tuple(out))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render(model, precision: int = 3, ascii: bool = False) -> str:
    """``c1·term1 + c2·term2 ...`` over nonzero coefficients in library order.

    ``model`` needs ``library`` and ``full_coefficients()``.
    """
    coefs = np.asarray(model.full_coefficients(), dtype=float)
    if not np.all(np.isfinite(coefs)):
        raise ValueError("cannot render non-finite coefficients")
    dot = "*" if ascii else "·"
    parts = []
    for term, c in zip(model.library.terms, coefs):
        if c == 0:
            continue
        label = term.name if ascii else term.symbol
        body = f"{abs(c):.{precision}f}{dot}{label}"
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append(("- " if c < 0 else "+ ") + body)
    return " ".join(parts)

