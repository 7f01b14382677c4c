"""Staged accelerated proximal-gradient training of sparse Lagrangians.

Each stage runs FISTA on the L1-regularized cost, then hard-thresholds the
surviving coefficients.  Between stages the step size grows and the penalty
shrinks.  Two solvers share the schedule:

``minibatch``
    shuffled batches of ``batch_size`` samples, one proximal step per batch.
``fullbatch``
    one proximal step per epoch on the full-data gradient.  For the linear
    cases (I and III) this runs on the precomputed Gram matrix, so an epoch
    costs O(p^2) regardless of the number of samples.

With ``batch_reduction="sum"`` the smooth part of the objective is the sum
of squared residuals over a batch, which for the full-batch solver means
``batch_size`` times the mean.  The penalty ``lam`` therefore has the same
meaning under both solvers.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import elgrad
from .elgrad import ELTensors, LagrangianModel
from .symlib import CandidateLibrary, evaluate_many

log = logging.getLogger(__name__)

SOLVERS = ("minibatch", "fullbatch")
STEP_RULES = ("fixed", "lipschitz")


class EmptyModelError(RuntimeError):
    def __init__(self, message, survivors=()):
        super().__init__(message)
        self.survivors = list(survivors)


class NonFiniteGradientError(FloatingPointError):
    pass


class PriorSelectionError(RuntimeError):
    """Every candidate prior term failed to train."""

    def __init__(self, failures: dict):
        lines = "; ".join(f"{k}: {v}" for k, v in failures.items())
        super().__init__(f"all prior candidates failed ({lines})")
        self.failures = failures


@dataclass
class StageSchedule:
    alpha: float = 1e-5
    lam: float = 1.0
    alpha_growth: float = 2.0
    lam_decay: float = 10.0
    epochs_per_stage: int = 100
    batch_size: int = 128
    threshold_stage1: float = 1e-2
    threshold_later: float = 1e-1
    tolerance: float = 1e-3
    max_stages: int = 4
    relaxed_tolerance_factor: float = 10.0
    solver: str = "minibatch"
    # "fixed": alpha * alpha_growth**(stage - 1); "lipschitz": 1/L of the
    # active smooth objective, recomputed after every hard threshold
    step_rule: str = "fixed"
    # "alpha": shrink by alpha*lam per step; "literal": shrink by lam
    prox_scale: str = "alpha"
    # smooth objective per batch: "sum" of squared residuals or "mean"
    batch_reduction: str = "sum"
    restart_momentum: bool = False
    # per-term scaling before optimization: "none", "term" (1 / RMS of the
    # candidate value) or "residual" (1 / RMS of its Euler-Lagrange column)
    scale_terms: str = "none"
    exempt_known_from_threshold: bool = True
    # case III: drop phi_r*sin(q)^2 when phi_r*cos(q)^2 is also a candidate
    prune_prior_aliases: bool = True
    # case II: rescale c to max |c_k| = 1 before each hard threshold and
    # threshold the optimizer's (scaled) variables; the cost is invariant
    # under c -> k c, so there is no physical scale to threshold against
    renormalize_case2: bool = True
    init_scale: float = 0.1  # case II: c0 ~ U(-init_scale, init_scale)
    seed: int = 0

    def __post_init__(self):
        choices = {
            "solver": SOLVERS,
            "step_rule": STEP_RULES,
            "prox_scale": ("alpha", "literal"),
            "batch_reduction": ("sum", "mean"),
            "scale_terms": ("none", "term", "residual"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.alpha <= 0 or self.lam < 0:
            raise ValueError("need alpha > 0 and lam >= 0")
        if self.epochs_per_stage < 1 or self.batch_size < 1 or self.max_stages < 1:
            raise ValueError("epochs_per_stage, batch_size and max_stages must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")

    def threshold(self, stage: int) -> float:
        return self.threshold_stage1 if stage == 1 else self.threshold_later

    def objective_scale(self, n_samples: int) -> float:
        """Factor from the mean cost to the per-batch objective that ``lam``
        is weighted against."""
        return float(min(self.batch_size, n_samples)) if self.batch_reduction == "sum" else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "StageSchedule":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    active: np.ndarray  # indices (into the problem's columns) still in the model
    c: np.ndarray
    c_prev: np.ndarray
    alpha: float
    lam: float
    i: int = 0
    stage: int = 0
    history: list = field(default_factory=list)  # per-epoch full-data cost
    seed: int = 0


def soft_threshold(beta, lam: float, mask=None) -> np.ndarray:
    """L1 proximal map; entries with ``mask`` False pass through unchanged."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    beta = np.asarray(beta, dtype=float)
    out = np.sign(beta) * np.maximum(np.abs(beta) - lam, 0.0)
    if mask is not None:
        out = np.where(np.asarray(mask, dtype=bool), out, beta)
    return out


# ---------------------------------------------------------------------------
# cost problems over the active columns
# ---------------------------------------------------------------------------

class _LinearProblem:
    """Mean ``||y - sum_k c_k E_k||^2`` (cases I and III).

    Full-data values and gradients come from the Gram matrix; mini-batches
    go through the sample arrays.
    """

    def __init__(self, E, y, gram=None):
        self.E = E
        self.y = y
        if gram is None:
            S = E.shape[0]
            G = np.einsum("spi,sqi->pq", E, E) / S
            b = np.einsum("spi,si->p", E, y) / S
            yy = float(np.mean(np.sum(y * y, axis=1)))
            gram = (G, b, yy)
        self.G, self.b, self.yy = gram

    @property
    def n_samples(self):
        return self.E.shape[0]

    def restrict(self, keep):
        keep = np.asarray(keep)
        return _LinearProblem(self.E[:, keep], self.y, (self.G[np.ix_(keep, keep)], self.b[keep], self.yy))

    def value_and_grad(self, c, idx=None):
        if idx is None:
            Gc = self.G @ c
            J = self.yy - 2.0 * self.b @ c + c @ Gc
            return max(float(J), 0.0), 2.0 * (Gc - self.b)
        return elgrad._linear_cost(self.E[idx], self.y[idx], c)

    def lipschitz(self) -> float:
        """Largest eigenvalue of the full-data Hessian of the mean cost."""
        if self.G.size == 0:
            return 0.0
        return 2.0 * float(np.linalg.eigvalsh(self.G)[-1])


class _AccelProblem:
    """Mean ``||qdd - qdd_pred(c)||^2`` (case II)."""

    def __init__(self, tensors: ELTensors, qdd):
        self.t = tensors
        self.qdd = _Acc(np.asarray(qdd))

    @property
    def n_samples(self):
        return self.t.n_samples

    def restrict(self, keep):
        return _AccelProblem(self.t.columns(keep), self.qdd.qdd)

    def value_and_grad(self, c, idx=None):
        return elgrad.cost_case2(self.t, self.qdd, c, idx)

    def lipschitz(self):
        return None


@dataclass
class _Acc:
    qdd: np.ndarray


def fista_step(state: TrainState, cost_fn, alpha: float, lam: float, mask=None, prox_scale="alpha", grad_scale=1.0):
    """One accelerated proximal step; ``cost_fn(v) -> (J, grad)``.

    Returns the new state and the cost at the extrapolated point.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    i = state.i + 1
    v = state.c + (i - 2) / (i + 1) * (state.c - state.c_prev) if i > 2 else state.c.copy()
    J, grad = cost_fn(v)
    grad = grad * grad_scale
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient at iteration {i}, stage {state.stage}: v={v}")
    shrink = alpha * lam if prox_scale == "alpha" else lam
    c_new = soft_threshold(v - alpha * grad, shrink, mask)
    return replace(state, c=c_new, c_prev=state.c, i=i), J


def _stage_alpha(state, problem, schedule, gscale):
    if schedule.step_rule == "lipschitz":
        L = problem.lipschitz()
        if L:
            return 1.0 / (gscale * L)
    return state.alpha


def run_stage(
    state: TrainState, problem, schedule: StageSchedule, stage_index: int, mask=None, exempt=None, scales=None,
    renormalize: bool = False,
):
    """FISTA epochs followed by hard thresholding.

    ``scales`` maps the optimizer's variables back to physical coefficients
    (``c * scales``); thresholds apply to the physical values.  With
    ``renormalize`` the iterate is first divided by its largest entry and the
    thresholds apply to the optimizer's variables instead, which is only
    legitimate for scale-invariant costs.  Returns
    ``(state, problem, mask, exempt, scales)`` restricted to the survivors,
    with ``alpha`` and ``lam`` already moved on for the next stage.
    """
    if stage_index < 1:
        raise ValueError("stage_index must be >= 1")
    p = state.c.shape[0]
    mask = np.ones(p, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    exempt = np.zeros(p, dtype=bool) if exempt is None else np.asarray(exempt, dtype=bool)
    scales = np.ones(p) if scales is None else np.asarray(scales, dtype=float)
    state = replace(state, stage=stage_index)
    if schedule.restart_momentum:
        state = replace(state, c_prev=state.c.copy(), i=0)
    S = problem.n_samples
    bs = schedule.batch_size
    sum_scale = schedule.batch_reduction == "sum"
    full_scale = schedule.objective_scale(S)
    alpha = _stage_alpha(state, problem, schedule, full_scale)

    if schedule.solver == "fullbatch":
        step = lambda v: problem.value_and_grad(v)  # noqa: E731
        for _ in range(schedule.epochs_per_stage):
            state, J = fista_step(state, step, alpha, state.lam, mask, schedule.prox_scale, full_scale)
            state.history.append(J)
    else:
        for epoch in range(schedule.epochs_per_stage):
            rng = np.random.default_rng([schedule.seed, stage_index, epoch])
            perm = rng.permutation(S)
            for start in range(0, S, bs):
                idx = np.sort(perm[start : start + bs])
                gscale = len(idx) if sum_scale else 1.0
                state, _ = fista_step(
                    state, lambda v: problem.value_and_grad(v, idx), alpha, state.lam, mask,
                    schedule.prox_scale, gscale,
                )
            state.history.append(problem.value_and_grad(state.c)[0])

    magnitude = np.abs(state.c * scales)
    if renormalize:
        peak = np.max(np.abs(state.c))
        if peak > 0 and np.isfinite(peak):
            state = replace(state, c=state.c / peak, c_prev=state.c_prev / peak)
        magnitude = np.abs(state.c)
    threshold = schedule.threshold(stage_index)
    keep = (magnitude >= threshold) | exempt
    if not keep.any():
        raise EmptyModelError(
            f"stage {stage_index}: every coefficient fell below threshold {threshold}",
            survivors=state.active.tolist(),
        )
    state = replace(
        state,
        active=state.active[keep],
        c=state.c[keep],
        c_prev=state.c_prev[keep],
        alpha=state.alpha * schedule.alpha_growth,
        lam=state.lam / schedule.lam_decay,
    )
    return state, problem.restrict(np.flatnonzero(keep)), mask[keep], exempt[keep], scales[keep]


@dataclass
class TrainReport:
    case: int
    prior: dict | None
    converged: bool
    relaxed: bool
    stages: int
    final_cost: float
    tolerance: float
    objective_scale: float
    survivors: list  # per stage, term names
    stage_costs: list  # per stage, per-epoch cost
    coefficients: list
    terms: list
    schedule: dict
    wall_time: float
    pruned: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def term_scales(library: CandidateLibrary, dataset, tensors: ELTensors, mode: str) -> np.ndarray:
    """Multipliers s_k that bring every candidate to unit RMS magnitude."""
    if mode == "none":
        return np.ones(len(library))
    if mode == "term":
        vals = evaluate_many(list(library.terms), dataset.q, dataset.qd)
        rms = np.sqrt(np.mean(vals**2, axis=1))
    else:
        rms = np.sqrt(np.mean(np.sum(tensors.E**2, axis=2), axis=0))
    return np.where(rms > 1e-12, 1.0 / np.maximum(rms, 1e-12), 1.0)


def prior_aliases(library: CandidateLibrary, prior) -> list[int]:
    """Candidates that let a fixed prior term cancel itself.

    If ``phi_r cos(q)^2`` and ``phi_r sin(q)^2`` are both candidates then
    ``phi_r - phi_r cos^2 - phi_r sin^2`` is identically zero, which gives the
    case III cost a zero-Lagrangian minimizer.  Dropping the ``sin^2`` variant
    removes that without shrinking the set of representable Lagrangians.
    """
    space = library.space
    terms = library.terms
    drop = []
    for r in elgrad.prior_weights(prior, len(library)):
        m = terms[r]
        for i in range(space.n):
            c2, s2 = m * space.cos(i) ** 2, m * space.sin(i) ** 2
            if c2 in terms and s2 in terms:
                drop.append(library.index(s2))
    return sorted(set(drop))


def _resolve_prior(library: CandidateLibrary, prior) -> dict[int, float]:
    if isinstance(prior, (int, np.integer)):
        return elgrad.prior_weights(int(prior), len(library))
    if isinstance(prior, str):
        return {library.index(prior): 1.0}
    if isinstance(prior, dict):
        return elgrad.prior_weights({library.index(k): v for k, v in prior.items()}, len(library))
    # sequence of names: all at unit coefficient
    return {library.index(k): 1.0 for k in prior}


def train(
    library: CandidateLibrary,
    dataset,
    case: int,
    prior=None,
    schedule: StageSchedule | None = None,
    tensors: ELTensors | None = None,
    known=(),
):
    """Fit a sparse Lagrangian.  Returns ``(LagrangianModel, TrainReport)``.

    ``prior`` (case III) is a term (index or name) whose coefficient is fixed
    to one, or a mapping ``{term: coefficient}`` fixing several terms.
    ``known`` lists further terms that are exempt from the L1 penalty.
    """
    schedule = schedule or StageSchedule()
    if case not in (1, 2, 3):
        raise ValueError(f"case must be 1, 2 or 3, got {case}")
    if case == 1 and getattr(dataset, "tau", None) is None:
        raise ValueError("case I needs a dataset with external forces (tau columns)")
    if case == 3 and prior is None:
        raise ValueError("case III needs a prior term")
    weights = _resolve_prior(library, prior) if case == 3 else {}
    known_idx = {library.index(k) for k in known} | set(library.known)
    t0 = time.perf_counter()

    tensors = tensors if tensors is not None else elgrad.assemble_tensors(library, dataset)
    p = len(library)
    pruned = prior_aliases(library, weights) if (weights and schedule.prune_prior_aliases) else []
    active = np.array([k for k in range(p) if k not in weights and k not in pruned], dtype=int)
    if active.size == 0:
        raise EmptyModelError("no free candidate terms")
    scales = np.asarray(library.scales, dtype=float) * term_scales(library, dataset, tensors, schedule.scale_terms)
    sub = tensors.columns(active)
    if not np.all(scales[active] == 1.0):
        sub = sub.scaled(scales[active])

    if case == 1:
        problem = _LinearProblem(sub.E, np.asarray(dataset.tau, dtype=float))
    elif case == 3:
        problem = _LinearProblem(sub.E, elgrad.upsilon_right(tensors, weights))
    else:
        problem = _AccelProblem(sub, dataset.qdd)
    exempt_all = np.array([k in known_idx for k in active], dtype=bool)
    mask = ~exempt_all
    exempt = exempt_all if schedule.exempt_known_from_threshold else np.zeros_like(exempt_all)

    if case == 2:
        rng = np.random.default_rng([schedule.seed, 2])
        c0 = rng.uniform(-schedule.init_scale, schedule.init_scale, size=active.size)
    else:
        c0 = np.zeros(active.size)
    state = TrainState(np.arange(active.size), c0, c0.copy(), schedule.alpha, schedule.lam, seed=schedule.seed)

    names = library.names
    survivors, stage_costs = [], []
    converged = relaxed = False
    error = None
    cost = float("nan")
    best = None  # (cost, state, scales) of the last completed stage
    col_scales = scales[active]
    for stage in range(1, schedule.max_stages + 1):
        n_hist = len(state.history)
        n_before = state.active.size
        try:
            state, problem, mask, exempt, col_scales = run_stage(
                state, problem, schedule, stage, mask, exempt, col_scales,
                renormalize=case == 2 and schedule.renormalize_case2,
            )
        except (EmptyModelError, NonFiniteGradientError, elgrad.DegenerateModelError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            log.warning("stage %d failed: %s", stage, error)
            if isinstance(exc, EmptyModelError) and best is None:
                raise
            break
        cost = problem.value_and_grad(state.c)[0]
        best = (cost, state)
        stage_costs.append([float(x) for x in state.history[n_hist:]])
        survivors.append([names[active[k]] for k in state.active])
        log.info("stage %d: cost %.3e, %d terms", stage, cost, state.active.size)
        # stop once the cost is small and thresholding has stopped pruning
        if cost <= schedule.tolerance and state.active.size == n_before:
            converged = True
            break
    if best is None:
        raise RuntimeError(error or "training produced no stage")
    cost, state = best
    if not converged and cost <= schedule.tolerance * schedule.relaxed_tolerance_factor:
        converged = relaxed = True

    full = np.zeros(p)
    cols = active[state.active]
    full[cols] = state.c * scales[cols]
    for k, w in weights.items():
        full[k] = w
    model = LagrangianModel.from_full(library, full, weights or None, {"case": case})
    report = TrainReport(
        case=case,
        prior={names[k]: w for k, w in weights.items()} or None,
        converged=converged,
        relaxed=relaxed,
        stages=len(survivors),
        final_cost=float(cost),
        tolerance=schedule.tolerance * (schedule.relaxed_tolerance_factor if relaxed else 1.0),
        objective_scale=schedule.objective_scale(len(dataset)),
        survivors=survivors,
        stage_costs=stage_costs,
        coefficients=[float(x) for x in model.full_coefficients()],
        terms=names,
        schedule=schedule.to_dict(),
        wall_time=time.perf_counter() - t0,
        pruned=[names[k] for k in pruned],
        error=error,
    )
    return model, report


def _default_score(model, report) -> float:
    return report.final_cost if report.converged else np.inf


def select_prior_term(
    library: CandidateLibrary,
    dataset,
    candidates,
    schedule: StageSchedule | None = None,
    score=None,
    tensors: ELTensors | None = None,
    known=(),
):
    """Train case III once per candidate prior and keep the best model.

    ``score(model, report) -> float`` ranks candidates (lower is better); the
    pipeline passes held-out rollout RMSE.  Without it, converged runs are
    ranked by final cost.  Returns ``(candidate, model, report, scores)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no prior candidates given")
    score = score or _default_score
    tensors = tensors if tensors is not None else elgrad.assemble_tensors(library, dataset)
    results, failures, scores = [], {}, {}
    for cand in candidates:
        key = cand if isinstance(cand, str) else repr(cand)
        try:
            model, report = train(library, dataset, 3, cand, schedule, tensors, known)
        except (EmptyModelError, RuntimeError, ValueError, ArithmeticError) as exc:
            failures[key] = f"{type(exc).__name__}: {exc}"
            continue
        s = float(score(model, report))
        scores[key] = s
        log.info("prior %s: score %.4g, %d terms", key, s, len(model.support()))
        results.append((s, len(results), cand, model, report))
    if not results:
        raise PriorSelectionError(failures)
    s, _, cand, model, report = min(results, key=lambda x: (np.nan_to_num(x[0], nan=np.inf), x[1]))
    return cand, model, report, scores
