"""Run configuration, validation by re-integration, reports and the CLI.

A run goes ``generate -> fit -> validate -> report``; every stage reads and
writes plain files under the run's output directory, so the stages can be
invoked separately from the command line.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dynamics, elgrad, optimizer
from .dynamics import ForcingSpec, NoiseSpec, SystemSpec, TrajectoryDataset
from .elgrad import LagrangianModel
from .optimizer import StageSchedule, TrainReport
from .symlib import CandidateLibrary, LibrarySpec, build_library

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4

# trajectory ids at and above this offset are never used for training, so
# validation draws are independent of the training set
VALIDATION_ID_OFFSET = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_trajectories: int = 100
    duration: float = 5.0
    dt: float = 0.01
    seed: int = 0
    substeps: int = 10


@dataclass
class ValidationConfig:
    n_trajectories: int = 20
    duration: float = 5.0
    # "held_out": fresh initial conditions; "extended": continue the first
    # training trajectories past the end of the training window
    mode: str = "held_out"
    structure_tol: float = 1e-3
    # candidates in select_prior_term are scored on this many trajectories
    selection_trajectories: int = 5


def _build(cls, d, where):
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) and k in ("amplitude", "frequency", "channels") else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    system: SystemSpec
    case: int = 3
    # case III prior candidates; each a term name or {term: coefficient}
    priors: list = field(default_factory=list)
    known: list = field(default_factory=list)
    library: LibrarySpec | None = None
    library_variant: str = "full"
    # None: active forcing exactly when case == 1
    forcing: ForcingSpec | None = None
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    # extra noise levels written by ``generate``
    sigmas: list = field(default_factory=list)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    out: str = "runs/default"
    name: str = ""

    def __post_init__(self):
        if self.case not in (1, 2, 3):
            raise ConfigError(f"case must be 1, 2 or 3, got {self.case!r}")
        if self.case == 3 and not self.priors:
            raise ConfigError("case 3 needs at least one prior candidate")
        if self.validation.mode not in ("held_out", "extended"):
            raise ConfigError(f"validation.mode must be 'held_out' or 'extended', got {self.validation.mode!r}")
        if self.case == 1 and not self.forcing_spec().active:
            raise ConfigError("case 1 needs active forcing")

    # -- derived ----------------------------------------------------------
    def forcing_spec(self) -> ForcingSpec:
        return self.forcing if self.forcing is not None else ForcingSpec(active=self.case == 1)

    def build_library(self) -> CandidateLibrary:
        spec = self.library or self.system.library_spec(self.library_variant)
        lib = build_library(self.system.space, spec)
        return lib.with_known(self.known) if self.known else lib

    def with_overrides(self, seed=None, sigma=None, case=None, out=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                data=replace(cfg.data, seed=seed),
                noise=replace(cfg.noise, seed=seed),
                schedule=replace(cfg.schedule, seed=seed),
            )
        if sigma is not None:
            cfg = replace(cfg, noise=replace(cfg.noise, sigma=sigma))
        if case is not None:
            cfg = replace(cfg, case=case)
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "system": asdict(self.system),
            "case": self.case,
            "priors": list(self.priors),
            "known": list(self.known),
            "library": None if self.library is None else self.library.to_dict(),
            "library_variant": self.library_variant,
            "forcing": None if self.forcing is None else asdict(self.forcing),
            "data": asdict(self.data),
            "noise": asdict(self.noise),
            "sigmas": list(self.sigmas),
            "schedule": self.schedule.to_dict(),
            "validation": asdict(self.validation),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known_keys = {f.name for f in fields(cls)}
        unknown = set(d) - known_keys
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "system" not in d:
            raise ConfigError("config needs a 'system' section")
        system = d["system"]
        if isinstance(system, str):
            system = {"kind": system}
        system = _build(SystemSpec, system, "system")
        try:
            library = None if d.get("library") is None else LibrarySpec.from_dict(d["library"])
            schedule = StageSchedule.from_dict(d.get("schedule") or {})
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        try:
            return cls(
                system=system,
                case=d.get("case", 3),
                priors=list(d.get("priors", [])),
                known=list(d.get("known", [])),
                library=library,
                library_variant=d.get("library_variant", "full"),
                forcing=None if d.get("forcing") is None else _build(ForcingSpec, d["forcing"], "forcing"),
                data=_build(DataConfig, d.get("data"), "data"),
                noise=_build(NoiseSpec, d.get("noise"), "noise"),
                sigmas=[float(s) for s in d.get("sigmas", [])],
                schedule=schedule,
                validation=_build(ValidationConfig, d.get("validation"), "validation"),
                out=d.get("out", "runs/default"),
                name=d.get("name", ""),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError:
            raise
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def dataset_path(config: RunConfig, sigma: float | None = None) -> Path:
    sigma = config.noise.sigma if sigma is None else sigma
    name = "dataset_clean.csv" if sigma == 0 else f"dataset_sigma{sigma:g}.csv"
    return Path(config.out) / name


def simulate_clean(config: RunConfig) -> TrajectoryDataset:
    d = config.data
    return dynamics.simulate(
        config.system, d.n_trajectories, d.duration, d.dt, seed=d.seed,
        forcing=config.forcing_spec(), substeps=d.substeps,
    )


def make_dataset(config: RunConfig, clean: TrajectoryDataset | None = None, sigma: float | None = None):
    clean = clean if clean is not None else simulate_clean(config)
    sigma = config.noise.sigma if sigma is None else sigma
    if sigma == 0:
        return clean
    return dynamics.add_noise(clean, replace(config.noise, sigma=sigma))


def generate(config: RunConfig) -> dict:
    """Write the clean dataset plus one noisy copy per configured sigma.
    Returns ``{sigma: path}``."""
    clean = simulate_clean(config)
    levels = sorted({0.0, float(config.noise.sigma), *map(float, config.sigmas)})
    paths = {}
    for sigma in levels:
        path = dataset_path(config, sigma)
        dynamics.save_dataset(make_dataset(config, clean, sigma), path)
        paths[sigma] = path
    return paths


def load_or_generate(config: RunConfig) -> TrajectoryDataset:
    path = dataset_path(config)
    if path.exists():
        return dynamics.load_dataset(path)
    ds = make_dataset(config)
    dynamics.save_dataset(ds, path)
    return ds


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class Rollouts:
    t: np.ndarray  # (T,)
    q_true: np.ndarray  # (T, V, n)
    q_pred: np.ndarray  # (T, V, n)
    traj_id: np.ndarray  # (V,)


@dataclass
class ValidationReport:
    system: str
    verdict: str  # "exact", "extra terms", "missing terms", "extra and missing terms"
    extra: list
    missing: list
    rmse: list  # per validation trajectory, rad/m; inf when divergent
    divergent: list
    mean_rmse: float
    reference: str | None  # term both coefficient columns are normalized by
    coefficients: list  # rows: term, learned, true, learned_normalized, true_normalized
    mode: str = "held_out"
    rollouts: Rollouts | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rollouts")
        d["rmse"] = [None if not math.isfinite(x) else x for x in self.rmse]
        if not math.isfinite(self.mean_rmse):
            d["mean_rmse"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationReport":
        d = dict(d)
        d["rmse"] = [math.inf if x is None else x for x in d["rmse"]]
        d["mean_rmse"] = math.inf if d["mean_rmse"] is None else d["mean_rmse"]
        return cls(**d)


def true_model(system: SystemSpec, library: CandidateLibrary) -> LagrangianModel:
    return LagrangianModel(library, system.true_coefficients(library), meta={"true": True})


def structure_verdict(model: LagrangianModel, system: SystemSpec, tol: float = 1e-3):
    """Compare the support of ``model`` (terms with ``|c_k| > tol`` in the
    model's output units) with the true Lagrangian.
    Returns ``(verdict, extra, missing)`` with term names."""
    c = model.full_coefficients()
    names = model.library.names
    learned = {names[k] for k in np.flatnonzero(np.abs(c) > tol)}
    true = {t.name for t, _ in system.true_terms()}
    extra = [n for n in names if n in learned - true]
    missing = sorted(true - learned, key=lambda n: names.index(n) if n in names else len(names))
    if extra and missing:
        verdict = "extra and missing terms"
    elif extra:
        verdict = "extra terms"
    elif missing:
        verdict = "missing terms"
    else:
        verdict = "exact"
    return verdict, extra, missing


def coefficient_table(model: LagrangianModel, system: SystemSpec, tol: float = 1e-3):
    """Learned vs true coefficients, both also normalized by a common term.

    The reference is the model's prior term when it has one, otherwise the
    first true term (library order) the model also contains.
    """
    lib = model.library
    c = model.full_coefficients()
    true_c = {t.name: v for t, v in system.true_terms()}
    names = lib.names
    ref = names[model.prior] if model.prior is not None else None
    if ref is None:
        for k, name in enumerate(names):
            if name in true_c and abs(c[k]) > tol:
                ref = name
                break
    learned_ref = c[names.index(ref)] if ref is not None else None
    true_ref = true_c.get(ref) if ref is not None else None
    rows = []
    for k, name in enumerate(names):
        if abs(c[k]) <= tol and name not in true_c:
            continue
        tv = true_c.get(name, 0.0)
        rows.append({
            "term": name,
            "learned": float(c[k]),
            "true": float(tv),
            "learned_normalized": None if not learned_ref else float(c[k] / learned_ref),
            "true_normalized": None if not true_ref else float(tv / true_ref),
        })
    return ref, rows


def _forcing_draws(ds: TrajectoryDataset, n: int):
    draws = ds.meta.get("forcing_draws")
    if not ds.meta.get("forced") or not draws:
        return None
    return dynamics.Forcing(np.asarray(draws["amplitude"], dtype=float), np.asarray(draws["omega"], dtype=float))


def _validation_truth(config: RunConfig):
    """Ground-truth trajectories plus the start time of the window."""
    v, d = config.validation, config.data
    forcing = config.forcing_spec()
    if v.mode == "held_out":
        ds = dynamics.simulate(
            config.system, v.n_trajectories, v.duration, d.dt, seed=d.seed, forcing=forcing,
            substeps=d.substeps, first_id=VALIDATION_ID_OFFSET,
        )
        return ds, 0.0
    ds = dynamics.simulate(
        config.system, v.n_trajectories, d.duration + v.duration, d.dt, seed=d.seed, forcing=forcing,
        substeps=d.substeps,
    )
    t0 = d.duration
    keep = ds.t >= t0 - 1e-9
    window = ds.subset(keep)
    return window, t0


def rollout(model: LagrangianModel, q0, qd0, duration: float, dt: float, substeps: int = 10, forcing=None, t0: float = 0.0):
    """Integrate the model's equations of motion from a batch of states.
    Returns ``(qs, bad)`` with ``qs`` of shape (T, batch, n)."""
    dyn = model.dynamics()

    def accel(t, q, qd):
        tau = None if forcing is None else forcing(t0 + t)
        return dyn(q, qd, tau)

    with np.errstate(all="ignore"):
        qs, _, bad = dynamics._rk4_batch(accel, q0, qd0, duration, dt, substeps, bad_fn=lambda q: ~np.isfinite(q).all(axis=-1))
    return qs, bad


def validate(model: LagrangianModel, config: RunConfig, truth=None) -> ValidationReport:
    """Roll the model out from validation initial conditions and compare
    with the true simulator; also check structure and coefficients."""
    if not np.any(model.full_coefficients()):
        raise elgrad.DegenerateModelError("cannot validate an all-zero model")
    system = config.system
    n = system.n
    ds, t0 = truth if truth is not None else _validation_truth(config)
    ids = ds.trajectory_ids
    T = int(round(config.validation.duration / config.data.dt)) + 1
    q_true = np.stack([ds.q[ds.traj_id == i][:T] for i in ids], axis=1)
    qd_true = np.stack([ds.qd[ds.traj_id == i][:T] for i in ids], axis=1)
    forcing = _forcing_draws(ds, n)
    qs, bad = rollout(
        model, q_true[0], qd_true[0], config.validation.duration, config.data.dt, config.data.substeps,
        forcing, t0,
    )
    err = qs - q_true
    with np.errstate(invalid="ignore", over="ignore"):
        rmse = np.sqrt(np.mean(err**2, axis=(0, 2)))
    rmse = np.where(bad | ~np.isfinite(rmse), np.inf, rmse)
    verdict, extra, missing = structure_verdict(model, system, config.validation.structure_tol)
    ref, rows = coefficient_table(model, system, config.validation.structure_tol)
    return ValidationReport(
        system=system.kind,
        verdict=verdict,
        extra=extra,
        missing=missing,
        rmse=[float(x) for x in rmse],
        divergent=[bool(b) for b in bad],
        mean_rmse=float(np.mean(rmse)),
        reference=ref,
        coefficients=rows,
        mode=config.validation.mode,
        rollouts=Rollouts(t0 + np.arange(T) * config.data.dt, q_true, qs, np.asarray(ids)),
    )


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _prior_key(prior):
    return prior if isinstance(prior, str) else json.dumps(prior, sort_keys=True)


def fit(config: RunConfig, dataset: TrajectoryDataset | None = None, write: bool = True):
    """Train the configured case.  Returns ``(model, report)``."""
    dataset = dataset if dataset is not None else load_or_generate(config)
    system = config.system
    kind = dataset.meta.get("system")
    if kind is not None and kind != system.kind:
        raise ConfigError(f"dataset is for {kind}, config is for {system.kind}")
    if dataset.n != system.n:
        raise ConfigError(f"dataset has n={dataset.n}, {system.kind} has n={system.n}")
    if config.case == 1 and dataset.tau is None:
        raise ConfigError("case 1 needs external forces but the dataset has no tau columns")
    library = config.build_library()
    for term in config.known:
        library.index(term)  # KeyError on unknown names
    schedule = config.schedule

    if config.case != 3:
        model, report = optimizer.train(library, dataset, config.case, None, schedule)
    elif len(config.priors) == 1:
        model, report = optimizer.train(library, dataset, 3, config.priors[0], schedule)
    else:
        sel_cfg = replace(config, validation=replace(config.validation, n_trajectories=config.validation.selection_trajectories))
        truth = _validation_truth(sel_cfg)

        def score(model, report):
            if not report.converged:
                return math.inf
            try:
                return validate(model, sel_cfg, truth).mean_rmse
            except (ArithmeticError, ValueError):
                return math.inf

        prior, model, report, scores = optimizer.select_prior_term(library, dataset, config.priors, schedule, score)
        model.meta["selection_scores"] = scores
        model.meta["selected_prior"] = _prior_key(prior)
    model.meta.update({"system": system.kind, "sigma": dataset.meta.get("sigma", 0.0)})
    if write:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / "model.json")
        (out / "train_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return model, report


def save_model(model: LagrangianModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path, library: CandidateLibrary) -> LagrangianModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if list(d["terms"]) != library.names:
        raise ConfigError(f"{path}: model terms do not match the configured library")
    prior = None
    if d.get("prior"):
        prior = {library.index(k): float(v) for k, v in d["prior"].items()}
    full = np.asarray(d["coefficients"], dtype=float)
    free = [k for k in range(len(library)) if prior is None or k not in prior]
    return LagrangianModel(library, full[free], prior, d.get("meta", {}))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report(model: LagrangianModel, validation: ValidationReport, out, train_report: TrainReport | dict | None = None) -> dict:
    """Write lagrangian.txt, coefficients.csv, rollout.csv and summary.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "lagrangian": out / "lagrangian.txt",
        "coefficients": out / "coefficients.csv",
        "rollout": out / "rollout.csv",
        "summary": out / "summary.json",
    }
    paths["lagrangian"].write_text(model.render() + "\n", encoding="utf-8")
    with open(paths["coefficients"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["term", "learned", "true", "learned_normalized", "true_normalized"])
        for row in validation.coefficients:
            w.writerow([row["term"], row["learned"], row["true"], row["learned_normalized"], row["true_normalized"]])
    if validation.rollouts is not None:
        r = validation.rollouts
        n = r.q_true.shape[2]
        with open(paths["rollout"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj_id", "t"] + [f"q_true_{i + 1}" for i in range(n)] + [f"q_pred_{i + 1}" for i in range(n)])
            for j, tid in enumerate(r.traj_id):
                for k, t in enumerate(r.t):
                    w.writerow([int(tid), repr(float(t))] + [repr(float(x)) for x in r.q_true[k, j]] + [repr(float(x)) for x in r.q_pred[k, j]])
    else:
        paths.pop("rollout")
    tr = train_report.to_dict() if isinstance(train_report, TrainReport) else train_report
    summary = {
        "model": model.to_dict(),
        "validation": validation.to_dict(),
        "train": tr,
    }
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return paths


def load_summary(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_rollouts(r: Rollouts, path) -> None:
    np.savez(path, t=r.t, q_true=r.q_true, q_pred=r.q_pred, traj_id=r.traj_id)


def load_rollouts(path) -> Rollouts:
    with np.load(path) as z:
        return Rollouts(z["t"], z["q_true"], z["q_pred"], z["traj_id"])


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagrangia", description="Sparse Lagrangian identification from trajectory data.")
    p.add_argument("command", choices=["generate", "fit", "validate", "report"])
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for data, noise and batch shuffling")
    p.add_argument("--sigma", type=float, help="noise standard deviation of the training data")
    p.add_argument("--case", type=int, choices=[1, 2, 3])
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_model_for(config: RunConfig) -> LagrangianModel:
    return load_model(Path(config.out) / "model.json", config.build_library())


def _cmd_validate(config: RunConfig) -> ValidationReport:
    model = _load_model_for(config)
    val = validate(model, config)
    out = Path(config.out)
    (out / "validation.json").write_text(json.dumps(val.to_dict(), indent=2) + "\n", encoding="utf-8")
    save_rollouts(val.rollouts, out / "rollouts.npz")
    return val


def run(command: str, config: RunConfig) -> int:
    out = Path(config.out)
    if command == "generate":
        for sigma, path in generate(config).items():
            print(f"sigma={sigma:g}: {path}")
        return EXIT_OK
    if command == "fit":
        t0 = time.perf_counter()
        model, rep = fit(config)
        print(model.render())
        print(f"stages={rep.stages} cost={rep.final_cost:.3e} converged={rep.converged} ({time.perf_counter() - t0:.1f}s)")
        return EXIT_OK if rep.converged else EXIT_NONCONVERGED
    if command == "validate":
        val = _cmd_validate(config)
        print(f"verdict: {val.verdict}; mean rollout RMSE {val.mean_rmse:.3e}")
        return EXIT_OK
    # report
    model = _load_model_for(config)
    if (out / "validation.json").exists() and (out / "rollouts.npz").exists():
        val = ValidationReport.from_dict(json.loads((out / "validation.json").read_text(encoding="utf-8")))
        val.rollouts = load_rollouts(out / "rollouts.npz")
    else:
        val = _cmd_validate(config)
    tr_path = out / "train_report.json"
    tr = json.loads(tr_path.read_text(encoding="utf-8")) if tr_path.exists() else None
    for name, path in report(model, val, out, tr).items():
        print(f"{name}: {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config).with_overrides(args.seed, args.sigma, args.case, args.out)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(args.command, config)
    except (ConfigError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (optimizer.EmptyModelError, optimizer.PriorSelectionError, elgrad.DegenerateModelError) as exc:
        print(f"no model: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (OSError, dynamics.DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
