"""Ground-truth simulators for the benchmark pendulum systems.

Equations of motion are written out by hand from each system's Lagrangian so
that they stay independent of the regression machinery in :mod:`elgrad`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .symlib import CandidateExpr, CoordinateSpace, LibraryGroup, LibrarySpec

KINDS = ("single_pendulum", "cart_pendulum", "double_pendulum", "spherical_pendulum")

SPACES = {
    "single_pendulum": CoordinateSpace(("theta",), ("θ",)),
    "cart_pendulum": CoordinateSpace(("theta", "x"), ("θ", "x")),
    "double_pendulum": CoordinateSpace(("theta1", "theta2"), ("θ₁", "θ₂")),
    "spherical_pendulum": CoordinateSpace(("theta", "phi"), ("θ", "φ")),
}

SINGULAR_SIN = 1e-6


class SingularConfigurationError(ArithmeticError):
    """Spherical pendulum too close to the pole of its coordinates."""


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    mass: float = 1.0  # pendulum bob (first link for the double pendulum)
    mass2: float = 1.0  # second link, double pendulum only
    length: float = 1.0
    g: float = 9.81
    cart_mass: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system {self.kind!r}; expected one of {KINDS}")

    @property
    def space(self) -> CoordinateSpace:
        return SPACES[self.kind]

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def parameters(self) -> dict:
        d = asdict(self)
        d.pop("kind")
        return d

    # ------------------------------------------------------------------
    def true_terms(self) -> list[tuple[CandidateExpr, float]]:
        """Terms of the true Lagrangian with their coefficients.

        The cart pendulum treats the pole as having its centre of mass at L/2
        and pivot inertia m L^2 / 2, which gives 0.25, 0.75, 0.5, 4.905 at the
        default parameters.
        """
        s = self.space
        m, L, g = self.mass, self.length, self.g
        if self.kind == "single_pendulum":
            return [(s.qd(0) ** 2, 0.5 * m * L**2), (s.cos(0), m * g * L)]
        if self.kind == "cart_pendulum":
            return [
                (s.qd(0) ** 2, m * L**2 / 4),
                (s.qd(1) ** 2, 0.5 * (m + self.cart_mass)),
                (s.qd(0) * s.qd(1) * s.cos(0), m * L / 2),
                (s.cos(0), m * g * L / 2),
            ]
        if self.kind == "double_pendulum":
            m2 = self.mass2
            return [
                (s.cos(0), (m + m2) * g * L),
                (s.cos(1), m2 * g * L),
                (s.qd(0) * s.qd(1) * s.cos(0) * s.cos(1), m2 * L**2),
                (s.qd(0) * s.qd(1) * s.sin(0) * s.sin(1), m2 * L**2),
                (s.qd(0) ** 2, 0.5 * (m + m2) * L**2),
                (s.qd(1) ** 2, 0.5 * m2 * L**2),
            ]
        return [
            (s.qd(1) ** 2 * s.sin(0) ** 2, 0.5 * m * L**2),
            (s.qd(0) ** 2, 0.5 * m * L**2),
            (s.cos(0), m * g * L),
        ]

    def true_coefficients(self, library) -> np.ndarray:
        c = np.zeros(len(library))
        for term, coef in self.true_terms():
            c[library.index(term)] = coef
        return c

    # ------------------------------------------------------------------
    def eom(self, q, qd, tau=None, check: bool = True) -> np.ndarray:
        """Accelerations from the hand-derived equations of motion.  Batched
        over leading axes.  With ``check=False`` a singular spherical state
        yields non-finite values instead of raising."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        tau = np.zeros_like(q) if tau is None else np.broadcast_to(np.asarray(tau, dtype=float), q.shape)
        m, L, g = self.mass, self.length, self.g
        if self.kind == "single_pendulum":
            th = q[..., 0]
            return ((tau[..., 0] - m * g * L * np.sin(th)) / (m * L**2))[..., None]

        if self.kind == "cart_pendulum":
            M, mc = m + self.cart_mass, m
            a, b, c, d = mc * L**2 / 4, 0.5 * M, mc * L / 2, mc * g * L / 2  # as in true_terms
            th, thd = q[..., 0], qd[..., 0]
            cth, sth = np.cos(th), np.sin(th)
            # [2a, c cos][thdd]   [tau_th - d sin          ]
            # [c cos, 2b][xdd ] = [tau_x + c thd^2 sin     ]
            r1 = tau[..., 0] - d * sth
            r2 = tau[..., 1] + c * thd**2 * sth
            m11, m12, m22 = 2 * a, c * cth, 2 * b
            det = m11 * m22 - m12**2
            return np.stack([(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det], axis=-1)

        if self.kind == "double_pendulum":
            m2 = self.mass2
            t1, t2 = q[..., 0], q[..., 1]
            w1, w2 = qd[..., 0], qd[..., 1]
            delta = t1 - t2
            cd, sd = np.cos(delta), np.sin(delta)
            m11 = (m + m2) * L**2
            m12 = m2 * L**2 * cd
            m22 = m2 * L**2
            r1 = tau[..., 0] - m2 * L**2 * sd * w2**2 - (m + m2) * g * L * np.sin(t1)
            r2 = tau[..., 1] + m2 * L**2 * sd * w1**2 - m2 * g * L * np.sin(t2)
            det = m11 * m22 - m12**2
            return np.stack([(m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det], axis=-1)

        th, thd, phd = q[..., 0], qd[..., 0], qd[..., 1]
        sth, cth = np.sin(th), np.cos(th)
        if check and np.any(np.abs(sth) < SINGULAR_SIN):
            raise SingularConfigurationError(f"|sin(theta)| < {SINGULAR_SIN}: theta={np.asarray(th).ravel()[np.argmin(np.abs(np.asarray(sth).ravel()))]}")
        mL2 = m * L**2
        thdd = (tau[..., 0] + mL2 * sth * cth * phd**2 - m * g * L * sth) / mL2
        with np.errstate(divide="ignore", invalid="ignore"):
            phdd = (tau[..., 1] - 2 * mL2 * sth * cth * thd * phd) / (mL2 * sth**2)
        return np.stack([thdd, phdd], axis=-1)

    def singular(self, q) -> np.ndarray:
        """Per-state flag for configurations the equations cannot handle."""
        q = np.asarray(q, dtype=float)
        if self.kind != "spherical_pendulum":
            return np.zeros(q.shape[:-1], dtype=bool)
        return np.abs(np.sin(q[..., 0])) < SINGULAR_SIN

    def energy(self, q, qd) -> tuple[np.ndarray, np.ndarray]:
        """(kinetic, potential) energy."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        m, L, g = self.mass, self.length, self.g
        if self.kind == "single_pendulum":
            return 0.5 * m * L**2 * qd[..., 0] ** 2, -m * g * L * np.cos(q[..., 0])
        if self.kind == "cart_pendulum":
            M, mc = m + self.cart_mass, m
            a, b, c, d = mc * L**2 / 4, 0.5 * M, mc * L / 2, mc * g * L / 2  # as in true_terms
            th, thd, xd = q[..., 0], qd[..., 0], qd[..., 1]
            return a * thd**2 + b * xd**2 + c * xd * thd * np.cos(th), -d * np.cos(th)
        if self.kind == "double_pendulum":
            m2 = self.mass2
            t1, t2 = q[..., 0], q[..., 1]
            w1, w2 = qd[..., 0], qd[..., 1]
            T = 0.5 * (m + m2) * L**2 * w1**2 + 0.5 * m2 * L**2 * w2**2 + m2 * L**2 * w1 * w2 * np.cos(t1 - t2)
            return T, -(m + m2) * g * L * np.cos(t1) - m2 * g * L * np.cos(t2)
        th = q[..., 0]
        T = 0.5 * m * L**2 * (qd[..., 0] ** 2 + np.sin(th) ** 2 * qd[..., 1] ** 2)
        return T, -m * g * L * np.cos(th)

    def library_spec(self, variant: str = "full") -> LibrarySpec:
        return library_spec(self.kind, variant)


def library_spec(kind: str, variant: str = "full") -> LibrarySpec:
    """Candidate library recipe for a benchmark system.

    ``variant="reduced"`` for the double pendulum drops the two linear
    velocity terms, giving 87 candidates instead of 89.
    """
    if kind == "single_pendulum":
        return LibrarySpec(
            [LibraryGroup(["theta", "theta_dot", "cos(theta)", "sin(theta)"], 2)],
            exclude=["theta_dot", "theta*theta_dot"],
        )
    if kind == "cart_pendulum":
        return LibrarySpec([LibraryGroup(["theta_dot", "cos(theta)", "sin(theta)", "x", "x_dot"], 3)])
    if kind == "double_pendulum":
        return LibrarySpec(
            [
                LibraryGroup(["cos(theta1)", "sin(theta1)", "cos(theta2)", "sin(theta2)"], 2),
                LibraryGroup(["theta1_dot", "theta2_dot"], 2),
            ],
            cross=True,
            exclude=["theta1_dot", "theta2_dot"] if variant == "reduced" else [],
        )
    if kind == "spherical_pendulum":
        return LibrarySpec(
            [LibraryGroup(["cos(theta)", "sin(theta)"], 2), LibraryGroup(["theta_dot", "phi", "phi_dot"], 2)],
            cross=True,
        )
    raise ValueError(f"unknown system {kind!r}")


# ---------------------------------------------------------------------------
# forcing and initial conditions
# ---------------------------------------------------------------------------

@dataclass
class ForcingSpec:
    """tau_i(t) = A_i sin(w_i t), A_i and w_i drawn per trajectory."""

    active: bool = True
    amplitude: tuple[float, float] = (0.5, 2.0)
    frequency: tuple[float, float] = (0.5 * math.pi, 2.0 * math.pi)

    def draw(self, n: int, rng: np.random.Generator) -> "Forcing":
        amp = rng.uniform(*self.amplitude, size=n)
        omega = rng.uniform(*self.frequency, size=n)
        if not self.active:
            amp = np.zeros(n)
        return Forcing(amp, omega)


@dataclass(frozen=True)
class Forcing:
    amplitude: np.ndarray
    omega: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return self.amplitude * np.sin(self.omega * t)

    @classmethod
    def zero(cls, n: int) -> "Forcing":
        return cls(np.zeros(n), np.zeros(n))


def _draw_initial(kind: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if kind == "single_pendulum":
        return np.array([rng.uniform(-math.pi, math.pi)]), np.zeros(1)
    if kind == "cart_pendulum":
        return np.array([rng.uniform(-math.pi, math.pi), 0.0]), np.zeros(2)
    if kind == "double_pendulum":
        return rng.uniform(-math.pi, math.pi, size=2), np.zeros(2)
    return np.array([rng.uniform(math.pi / 3, math.pi / 2), 0.0]), np.array([0.0, math.pi])


def _trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_initial_conditions(system: SystemSpec, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """First-attempt initial states of trajectories ``0..count-1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [_draw_initial(system.kind, _trajectory_rng(seed, i)) for i in range(count)]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau: np.ndarray | None
    traj_id: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.traj_id = np.asarray(self.traj_id, dtype=np.int64)
        for name in ("q", "qd", "qdd") + (("tau",) if self.tau is not None else ()):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape[0] != self.t.shape[0]:
                raise ValueError(f"column {name} has {arr.shape[0]} rows, expected {self.t.shape[0]}")
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return self.q.shape[1]

    def __len__(self):
        return self.t.shape[0]

    @property
    def has_tau(self) -> bool:
        return self.tau is not None

    @property
    def trajectory_ids(self) -> np.ndarray:
        return np.unique(self.traj_id)

    def subset(self, mask_or_index) -> "TrajectoryDataset":
        idx = np.asarray(mask_or_index)
        return TrajectoryDataset(
            self.t[idx], self.q[idx], self.qd[idx], self.qdd[idx],
            None if self.tau is None else self.tau[idx], self.traj_id[idx], dict(self.meta),
        )

    def trajectory(self, tid: int) -> "TrajectoryDataset":
        return self.subset(self.traj_id == tid)

    def copy(self) -> "TrajectoryDataset":
        return self.subset(np.arange(len(self)))

    def equals(self, other: "TrajectoryDataset") -> bool:
        same = lambda a, b: (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        return all(same(getattr(self, k), getattr(other, k)) for k in ("t", "q", "qd", "qdd", "tau", "traj_id"))

    @classmethod
    def concat(cls, parts: Sequence["TrajectoryDataset"]) -> "TrajectoryDataset":
        tau = None if parts[0].tau is None else np.concatenate([p.tau for p in parts])
        return cls(
            np.concatenate([p.t for p in parts]), np.concatenate([p.q for p in parts]),
            np.concatenate([p.qd for p in parts]), np.concatenate([p.qdd for p in parts]),
            tau, np.concatenate([p.traj_id for p in parts]), dict(parts[0].meta),
        )


def _rk4_batch(accel: Callable, q0, qd0, duration: float, dt: float, substeps: int, bad_fn=None):
    """Fixed-step RK4 on (q, qd); returns states at every multiple of dt.

    Without ``bad_fn`` a non-finite state raises.  With it, states are
    batched along axis 0 and the third return value flags the batch members
    that went non-finite or that ``bad_fn`` rejected at some substep.
    """
    steps = int(round(duration / dt))
    h = dt / substeps
    q, qd = np.array(q0, dtype=float), np.array(qd0, dtype=float)
    qs = np.empty((steps + 1,) + q.shape)
    qds = np.empty_like(qs)
    qs[0], qds[0] = q, qd
    bad = np.zeros(q.shape[:-1], dtype=bool)
    if bad_fn is not None:
        bad |= bad_fn(q)
    for k in range(steps):
        t = k * dt
        for s in range(substeps):
            ts = t + s * h
            a1 = accel(ts, q, qd)
            q2, v2 = q + 0.5 * h * qd, qd + 0.5 * h * a1
            a2 = accel(ts + 0.5 * h, q2, v2)
            q3, v3 = q + 0.5 * h * v2, qd + 0.5 * h * a2
            a3 = accel(ts + 0.5 * h, q3, v3)
            q4, v4 = q + h * v3, qd + h * a3
            a4 = accel(ts + h, q4, v4)
            q = q + h / 6 * (qd + 2 * v2 + 2 * v3 + v4)
            qd = qd + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            if bad_fn is not None:
                bad |= bad_fn(q)
        finite = np.isfinite(q).all(axis=-1) & np.isfinite(qd).all(axis=-1)
        if bad_fn is None and not np.all(finite):
            raise IntegrationError(f"non-finite state at t={(k + 1) * dt:.4f}: q={q}, qd={qd}")
        bad |= ~finite
        qs[k + 1], qds[k + 1] = q, qd
    return qs, qds, bad


def rk4_integrate(
    system: SystemSpec,
    forcing: Forcing | None,
    init,
    duration: float = 5.0,
    dt: float = 0.01,
    substeps: int = 10,
    traj_id: int = 0,
) -> TrajectoryDataset:
    """One clean trajectory.  ``qdd`` and ``tau`` are taken from the equations
    of motion and the forcing at the stored times."""
    if dt <= 0 or duration < dt:
        raise ValueError("need dt > 0 and duration >= dt")
    n = system.n
    forcing = forcing or Forcing.zero(n)
    q0, qd0 = (np.asarray(x, dtype=float).reshape(n) for x in init)
    qs, qds, _ = _rk4_batch(lambda t, q, qd: system.eom(q, qd, forcing(t)), q0, qd0, duration, dt, substeps)
    t = np.arange(qs.shape[0]) * dt
    tau = forcing(t)
    qdd = system.eom(qs, qds, tau)
    return TrajectoryDataset(t, qs, qds, qdd, tau, np.full(t.shape, traj_id), {})


def simulate(
    system: SystemSpec,
    n_trajectories: int = 100,
    duration: float = 5.0,
    dt: float = 0.01,
    seed: int = 0,
    forcing: ForcingSpec | None = None,
    substeps: int = 10,
    max_attempts: int = 20,
    first_id: int = 0,
) -> TrajectoryDataset:
    """Clean dataset of many trajectories.

    Trajectory ``i`` uses its own generator seeded by ``(seed, first_id + i)``,
    so the result does not depend on how trajectories are scheduled.  A
    trajectory that hits the spherical coordinate singularity is redrawn.
    """
    forcing = forcing or ForcingSpec(active=False)
    if dt <= 0 or duration < dt:
        raise ValueError("need dt > 0 and duration >= dt")
    n = system.n
    rngs = {i: _trajectory_rng(seed, i) for i in range(first_id, first_id + n_trajectories)}
    pending = list(rngs)
    done: dict[int, TrajectoryDataset] = {}
    drawn: dict[int, Forcing] = {}
    for _ in range(max_attempts):
        if not pending:
            break
        draws = []
        for i in pending:
            init = _draw_initial(system.kind, rngs[i])
            draws.append((init, forcing.draw(n, rngs[i])))
        q0 = np.stack([d[0][0] for d in draws])
        qd0 = np.stack([d[0][1] for d in draws])
        batch = Forcing(np.stack([d[1].amplitude for d in draws]), np.stack([d[1].omega for d in draws]))
        accel = lambda t, q, qd: system.eom(q, qd, batch(t), check=False)
        qs, qds, bad = _rk4_batch(accel, q0, qd0, duration, dt, substeps, bad_fn=system.singular)
        t = np.arange(qs.shape[0]) * dt
        retry = []
        for j, i in enumerate(pending):
            if bad[j]:
                retry.append(i)
                continue
            tau = draws[j][1](t)
            done[i] = TrajectoryDataset(t, qs[:, j], qds[:, j], system.eom(qs[:, j], qds[:, j], tau), tau, np.full(t.shape, i))
            drawn[i] = draws[j][1]
        pending = retry
    if pending:
        raise IntegrationError(f"trajectories {pending}: no regular trajectory after {max_attempts} attempts")
    parts = [done[i] for i in sorted(done)]
    ds = TrajectoryDataset.concat(parts)
    if not forcing.active:
        ds.tau = None
    ds.meta = {
        "system": system.kind,
        "parameters": system.parameters,
        "forced": bool(forcing.active),
        "forcing": {"amplitude": list(forcing.amplitude), "frequency": list(forcing.frequency)},
        # per-trajectory draws, in trajectory order, so rollouts can replay them
        "forcing_draws": {
            "amplitude": [drawn[i].amplitude.tolist() for i in sorted(done)],
            "omega": [drawn[i].omega.tolist() for i in sorted(done)],
        },
        "sigma": 0.0,
        "noise_channels": [],
        "noise_seed": None,
        "seed": seed,
        "dt": dt,
        "duration": duration,
        "n_trajectories": n_trajectories,
        "n": system.n,
    }
    return ds


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

CHANNELS = ("q", "qd", "qdd", "tau")


@dataclass
class NoiseSpec:
    sigma: float = 0.0
    channels: tuple[str, ...] = ("q", "qd", "qdd")
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        bad = set(self.channels) - set(CHANNELS)
        if bad:
            raise ValueError(f"unknown noise channels {sorted(bad)}")


def add_noise(dataset: TrajectoryDataset, noise: NoiseSpec) -> TrajectoryDataset:
    """Zero-mean Gaussian noise on the selected channels; ``t`` untouched."""
    out = dataset.copy()
    if noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        for ch in CHANNELS:
            if ch in noise.channels and getattr(out, ch) is not None:
                arr = getattr(out, ch)
                setattr(out, ch, arr + rng.normal(0.0, noise.sigma, size=arr.shape))
    out.meta.update(sigma=float(noise.sigma), noise_channels=list(noise.channels), noise_seed=noise.seed)
    return out


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def dataset_columns(n: int, forced: bool) -> list[str]:
    cols = ["t"]
    for prefix in ("q", "qd", "qdd") + (("tau",) if forced else ()):
        cols += [f"{prefix}_{i + 1}" for i in range(n)]
    return cols + ["traj_id"]


def metadata_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """CSV with header plus a JSON sidecar holding the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = [dataset.t[:, None], dataset.q, dataset.qd, dataset.qdd]
    if dataset.tau is not None:
        blocks.append(dataset.tau)
    data = np.hstack(blocks)
    cols = dataset_columns(dataset.n, dataset.tau is not None)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row, tid in zip(data, dataset.traj_id):
            fh.write(",".join(repr(float(x)) for x in row) + f",{int(tid)}\n")
    meta = dict(dataset.meta)
    meta.setdefault("n", dataset.n)
    meta["forced"] = dataset.tau is not None
    metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    meta_file = metadata_path(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        if "n" in meta:
            n = int(meta["n"])
        else:
            n = (len(header) - 2) // 4 if "tau_1" in header else (len(header) - 2) // 3
        forced = "tau_1" in header
        expected = dataset_columns(n, forced)
        if header != expected:
            raise DatasetFormatError(
                f"{path}, line 1: expected {len(expected)} columns for n={n} ({','.join(expected)}), "
                f"got {len(header)}"
            )
        rows, tids = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise DatasetFormatError(
                    f"{path}, line {lineno}: expected {len(expected)} columns for n={n}, got {len(rec)}"
                )
            try:
                rows.append([float(x) for x in rec[:-1]])
                tids.append(int(rec[-1]))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}, line {lineno}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(-1, len(expected) - 1)
    blocks = [data[:, 1 + k * n : 1 + (k + 1) * n] for k in range(4 if forced else 3)]
    return TrajectoryDataset(
        data[:, 0], blocks[0], blocks[1], blocks[2], blocks[3] if forced else None, np.array(tids), meta
    )
