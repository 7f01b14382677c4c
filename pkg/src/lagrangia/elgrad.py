"""Euler-Lagrange residuals for a linear-in-coefficients Lagrangian.

For ``L = sum_k c_k phi_k`` the Euler-Lagrange operator is

    sum_k c_k (M_k qdd + N_k qd - O_k)

with ``M_k = d2phi_k/dqd dqd``, ``N_k = d2phi_k/dqd dq`` and
``O_k = dphi_k/dq``.  The per-sample, per-term arrays are assembled once and
all three training costs are evaluated from them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from . import symlib
from .symlib import CandidateLibrary


class DegenerateModelError(ValueError):
    """All coefficients are zero, so the model has no dynamics."""


class TensorEvaluationError(ArithmeticError):
    pass


@lru_cache(maxsize=None)
def _partials(term: symlib.CandidateExpr) -> symlib.SecondPartials:
    return symlib.second_partials(term)


@dataclass
class ELTensors:
    """Sample-major arrays: ``M``, ``N`` are ``(S, p, n, n)``, ``O`` is
    ``(S, p, n)``.  ``qd`` and ``qdd`` are the measurements they were paired
    with."""

    M: np.ndarray
    N: np.ndarray
    O: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.M.shape[0]

    @property
    def p(self) -> int:
        return self.M.shape[1]

    @cached_property
    def F(self) -> np.ndarray:
        """``N_k qd - O_k`` per sample and term."""
        return np.einsum("spij,sj->spi", self.N, self.qd) - self.O

    @cached_property
    def E(self) -> np.ndarray:
        """Euler-Lagrange column of each term, ``M_k qdd + N_k qd - O_k``."""
        return np.einsum("spij,sj->spi", self.M, self.qdd) + self.F

    def columns(self, index) -> "ELTensors":
        """Tensors restricted to a subset of terms (copies)."""
        index = np.asarray(index)
        return ELTensors(self.M[:, index], self.N[:, index], self.O[:, index], self.qd, self.qdd)

    def scaled(self, scales) -> "ELTensors":
        s = np.asarray(scales, dtype=float)
        return ELTensors(self.M * s[:, None, None], self.N * s[:, None, None], self.O * s[:, None], self.qd, self.qdd)


def assemble_tensors(library: CandidateLibrary, dataset) -> ELTensors:
    space = library.space
    if dataset.n != space.n:
        raise ValueError(f"dataset has n={dataset.n} coordinates, library has n={space.n}")
    q, qd, qdd = dataset.q, dataset.qd, dataset.qdd
    S, p, n = len(dataset), len(library), space.n
    M = np.zeros((S, p, n, n))
    N = np.zeros((S, p, n, n))
    O = np.zeros((S, p, n))
    cache: dict = {}

    def ev(expr):
        return symlib.evaluate(expr, q, qd, cache)

    for k, term in enumerate(library.terms):
        sp = _partials(term)
        for i in range(n):
            if not sp.O[i].is_zero:
                O[:, k, i] = ev(sp.O[i])
            for j in range(n):
                if not sp.M[i][j].is_zero:
                    M[:, k, i, j] = ev(sp.M[i][j])
                if not sp.N[i][j].is_zero:
                    N[:, k, i, j] = ev(sp.N[i][j])
        for name, arr in (("M", M), ("N", N), ("O", O)):
            bad = ~np.isfinite(arr[:, k].reshape(S, -1)).all(axis=1)
            if bad.any():
                raise TensorEvaluationError(f"non-finite {name} for term {term.name} at sample {int(np.argmax(bad))}")
    return ELTensors(M, N, O, qd, qdd)


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------

def _rows(idx, S):
    return slice(None) if idx is None else np.asarray(idx)


def tau_pred(tensors: ELTensors, c, idx=None) -> np.ndarray:
    """Predicted generalized forces ``sum_k c_k E_k`` for the selected samples."""
    c = np.asarray(c, dtype=float)
    if c.shape != (tensors.p,):
        raise ValueError(f"expected {tensors.p} coefficients, got {c.shape}")
    return np.einsum("spi,p->si", tensors.E[_rows(idx, tensors.n_samples)], c)


def _pinv(A: np.ndarray) -> np.ndarray:
    """Batched Moore-Penrose inverse of symmetric matrices.

    Singular values of a symmetric matrix are the absolute eigenvalues, so
    the SVD cutoff ``n * eps * sigma_max`` is applied to the spectrum of
    ``eigh``, which is much cheaper than a batched SVD for tiny matrices.
    """
    n = A.shape[-1]
    eps = n * np.finfo(float).eps
    if n == 1:
        a = A[..., 0, 0]
        with np.errstate(divide="ignore"):
            inv = np.where(a != 0.0, 1.0 / np.where(a != 0.0, a, 1.0), 0.0)
        return inv[..., None, None]
    w, V = np.linalg.eigh(A)
    cutoff = eps * np.max(np.abs(w), axis=-1, keepdims=True)
    big = np.abs(w) > cutoff
    winv = np.where(big, 1.0 / np.where(big, w, 1.0), 0.0)
    return (V * winv[..., None, :]) @ np.swapaxes(V, -1, -2)


def _accel_parts(tensors: ELTensors, c, idx):
    c = np.asarray(c, dtype=float)
    if c.shape != (tensors.p,):
        raise ValueError(f"expected {tensors.p} coefficients, got {c.shape}")
    if not np.any(c):
        raise DegenerateModelError("all coefficients are zero")
    rows = _rows(idx, tensors.n_samples)
    M, F = tensors.M[rows], tensors.F[rows]
    A = -np.tensordot(M, c, axes=([1], [0]))
    b = np.tensordot(F, c, axes=([1], [0]))
    Ainv = _pinv(A)
    return M, F, Ainv, (Ainv @ b[..., None])[..., 0]


def predict_qddot(tensors: ELTensors, c, idx=None) -> np.ndarray:
    """Accelerations implied by the model, ``pinv(-sum c_k M_k) sum c_k F_k``."""
    return _accel_parts(tensors, c, idx)[3]


class ModelDynamics:
    """Equations of motion of a fixed model, ``A(q, qd) qdd = tau - f(q, qd)``
    with ``A = sum c_k M_k`` and ``f = sum c_k (N_k qd - O_k)`` collapsed into
    single compiled expressions for fast repeated evaluation in rollouts."""

    def __init__(self, A, f):
        self.A = tuple(tuple(row) for row in A)
        self.f = tuple(f)
        n = len(self.f)
        self._upper = [(i, j) for i in range(n) for j in range(i, n)]
        self._fn = symlib.lambdify([self.A[i][j] for i, j in self._upper] + list(self.f))

    @property
    def n(self) -> int:
        return len(self.f)

    def __call__(self, q, qd, tau=None) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        n = self.n
        vals = self._fn(q, qd)
        A = np.empty(q.shape[:-1] + (n, n))
        for (i, j), v in zip(self._upper, vals):
            A[..., i, j] = A[..., j, i] = v
        rhs = -np.stack(vals[len(self._upper):], axis=-1)
        if tau is not None:
            rhs = rhs + tau
        return (_pinv(A) @ rhs[..., None])[..., 0]


def model_dynamics(library: CandidateLibrary, c) -> ModelDynamics:
    c = np.asarray(c, dtype=float)
    active = np.flatnonzero(c)
    if active.size == 0:
        raise DegenerateModelError("all coefficients are zero")
    space = library.space
    n = space.n
    A = [[space.constant(0) for _ in range(n)] for _ in range(n)]
    f = [space.constant(0) for _ in range(n)]
    for k in active:
        sp = _partials(library.terms[k])
        w = float(c[k])
        for i in range(n):
            f[i] = f[i] - w * sp.O[i]
            for j in range(n):
                A[i][j] = A[i][j] + w * sp.M[i][j]
                f[i] = f[i] + w * sp.N[i][j] * space.qd(j)
    return ModelDynamics(A, f)


def model_acceleration(library: CandidateLibrary, c, q, qd, tau=None) -> np.ndarray:
    """Accelerations of a model at arbitrary states (used for rollouts)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    qd = np.atleast_2d(np.asarray(qd, dtype=float))
    return model_dynamics(library, c)(q, qd, tau)


# ---------------------------------------------------------------------------
# costs: each returns (mean cost, gradient)
# ---------------------------------------------------------------------------

def _linear_cost(E, y, c):
    r = y - np.einsum("spi,p->si", E, c)
    J = float(np.mean(np.sum(r * r, axis=1)))
    grad = -2.0 / E.shape[0] * np.einsum("spi,si->p", E, r)
    return J, grad


def cost_case1(tensors: ELTensors, dataset, c, idx=None):
    """Mean ``||tau_ext - tau_pred(c)||^2`` and its gradient."""
    if getattr(dataset, "tau", None) is None:
        raise ValueError("case I needs external forces in the dataset")
    rows = _rows(idx, tensors.n_samples)
    return _linear_cost(tensors.E[rows], np.asarray(dataset.tau)[rows], np.asarray(c, dtype=float))


def cost_case2(tensors: ELTensors, dataset, c, idx=None):
    """Mean ``||qdd - qdd_pred(c)||^2``; non-convex in ``c``."""
    rows = _rows(idx, tensors.n_samples)
    M, F, Ainv, pred = _accel_parts(tensors, c, idx)
    e = np.asarray(dataset.qdd)[rows] - pred
    B = e.shape[0]
    J = float(np.mean(np.sum(e * e, axis=1)))
    # d pred / d c_k = Ainv (F_k + M_k pred)
    w = (np.swapaxes(Ainv, -1, -2) @ e[..., None])[..., 0]
    D = F + (M @ pred[:, None, :, None])[..., 0]
    grad = -2.0 / B * np.einsum("si,spi->p", w, D)
    return J, grad


def prior_weights(prior, p: int | None = None) -> dict[int, float]:
    """Normalize a case III prior to ``{index: coefficient}``.

    A bare index means that term with unit coefficient.  A mapping fixes
    several terms at once, e.g. a previously learned sub-Lagrangian.
    """
    if isinstance(prior, (int, np.integer)):
        weights = {int(prior): 1.0}
    else:
        weights = {int(k): float(v) for k, v in dict(prior).items()}
    if not weights:
        raise ValueError("empty prior")
    if p is not None:
        for k in weights:
            if not 0 <= k < p:
                raise IndexError(f"prior term index {k} out of range for p={p}")
    return weights


def upsilon_right(tensors: ELTensors, r, idx=None) -> np.ndarray:
    """``-M_r qdd - N_r qd + O_r`` for the known prior term (or the weighted
    sum over several known terms)."""
    E = tensors.E[_rows(idx, tensors.n_samples)]
    return -sum(w * E[:, k] for k, w in prior_weights(r, tensors.p).items())


def upsilon_residual(tensors: ELTensors, dataset, c, r, idx=None):
    """Case III cost with the prior fixed; ``c`` holds the coefficients of
    the remaining terms in library order."""
    weights = prior_weights(r, tensors.p)
    rows = _rows(idx, tensors.n_samples)
    others = np.array([k for k in range(tensors.p) if k not in weights], dtype=int)
    return _linear_cost(tensors.E[rows][:, others], upsilon_right(tensors, weights, idx), np.asarray(c, dtype=float))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class LagrangianModel:
    """Coefficients over a library.

    With ``prior`` set (case III) the prior terms carry fixed coefficients and
    ``coefficients`` excludes them.  ``prior`` is an index (unit coefficient)
    or a mapping ``{index: coefficient}``; after construction it holds the
    anchor index and ``prior_terms`` the full mapping.
    """

    library: CandidateLibrary
    coefficients: np.ndarray
    prior: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.prior is None:
            self.prior_terms = {}
        else:
            self.prior_terms = prior_weights(self.prior, len(self.library))
            self.prior = next(iter(self.prior_terms))
        expected = len(self.library) - len(self.prior_terms)
        if self.coefficients.shape != (expected,):
            raise ValueError(f"expected {expected} coefficients, got {self.coefficients.shape}")

    def _free(self) -> np.ndarray:
        return np.array([k for k in range(len(self.library)) if k not in self.prior_terms], dtype=int)

    def full_coefficients(self) -> np.ndarray:
        full = np.zeros(len(self.library))
        full[self._free()] = self.coefficients
        for k, w in self.prior_terms.items():
            full[k] = w
        return full

    @classmethod
    def from_full(cls, library, full, prior=None, meta=None) -> "LagrangianModel":
        """Build from a full-length vector.  In case III the vector is first
        divided by the anchor coefficient so the anchor reads 1."""
        full = np.asarray(full, dtype=float)
        if prior is None:
            return cls(library, full.copy(), None, dict(meta or {}))
        keys = list(prior_weights(prior, len(library)))
        if full[keys[0]] == 0:
            raise DegenerateModelError("anchor term has zero coefficient")
        full = full / full[keys[0]]
        weights = {k: float(full[k]) for k in keys}
        free = [k for k in range(len(library)) if k not in weights]
        return cls(library, full[free], weights, dict(meta or {}))

    def support(self, tol: float = 0.0) -> list[str]:
        c = self.full_coefficients()
        return [t.name for t, v in zip(self.library.terms, c) if abs(v) > tol]

    def normalized(self, term) -> np.ndarray:
        """Full coefficient vector divided by the coefficient of ``term``."""
        c = self.full_coefficients()
        return c / c[self.library.index(term)]

    def render(self, precision: int = 3, ascii: bool = False) -> str:
        return symlib.render(self, precision, ascii)

    def acceleration(self, q, qd, tau=None) -> np.ndarray:
        return model_acceleration(self.library, self.full_coefficients(), q, qd, tau)

    def dynamics(self) -> ModelDynamics:
        return model_dynamics(self.library, self.full_coefficients())

    def to_dict(self) -> dict:
        names = self.library.names
        return {
            "terms": names,
            "coefficients": [float(x) for x in self.full_coefficients()],
            "prior": {names[k]: w for k, w in self.prior_terms.items()} or None,
            "rendered": self.render(),
            "meta": self.meta,
        }
