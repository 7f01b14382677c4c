"""Acceptance criteria, each run at its stated tolerance.

Every test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion together with the recorded detail lines.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lagrangia import elgrad
from lagrangia.benchmarks import load_preset, run_benchmark
from lagrangia.dynamics import KINDS, SPACES, SystemSpec, TrajectoryDataset, library_spec, simulate
from lagrangia.optimizer import EmptyModelError, soft_threshold
from lagrangia.pipeline import true_model, validate
from lagrangia.symlib import Atom, build_library, diff, evaluate, second_partials

from conftest import EXPECTED_LIBRARY_SIZE

ROOT = Path(__file__).resolve().parents[1]

C1 = pytest.mark.criterion("1", "noise-free structure recovery, coefficients within 2%, <= 10 min per system")
C2 = pytest.mark.criterion("2", "sigma=1e-3 exact structure, coefficients within 5%")
C3 = pytest.mark.criterion("3", "passive single pendulum case II ratio cos:theta_dot^2 = 19.62 +/- 2%")
C4 = pytest.mark.criterion("4", "high-noise structure verdicts across 5 seeds (informational)")
C5 = pytest.mark.criterion("5", "property suite (a)-(j), < 1 min")
C6 = pytest.mark.criterion("6", "true-model rollout RMSE <= 1e-4 over 5 s")

CASE1_PRESETS = ["single_case1", "cart_case1", "double_case1", "spherical_case1"]
PASSIVE_PRESETS = ["single_case2", "cart_case3", "double_case3", "spherical_case3"]


# -- criterion 1 ---------------------------------------------------------------------------------

@C1
@pytest.mark.slow
@pytest.mark.parametrize("preset", ["single_case1", "cart_case3", "double_case3", "spherical_case3"])
def test_c1_noise_free_recovery(preset, record):
    t0 = time.perf_counter()
    row = run_benchmark(preset, 0.0)
    total = time.perf_counter() - t0
    record(f"{row.line()} total={total:.1f}s")
    assert row.converged
    assert row.verdict == "exact", (row.extra, row.missing)
    assert row.max_rel_err <= 0.02
    assert total <= 600.0


# -- criterion 2 -------------------------------------------------------------------------------------

@C2
@pytest.mark.slow
@pytest.mark.parametrize("preset", CASE1_PRESETS + PASSIVE_PRESETS)
def test_c2_low_noise_recovery(preset, record):
    row = run_benchmark(preset, 1e-3)
    record(row.line())
    assert row.converged
    assert row.verdict == "exact", (row.extra, row.missing)
    assert row.max_rel_err <= 0.05


# -- criterion 3 ---------------------------------------------------------------------------------------

@C3
@pytest.mark.slow
def test_c3_passive_single_pendulum_ratio(record):
    row = run_benchmark("single_case2", 0.0)
    ratio = row.learned[1] / row.learned[0]
    record(f"{row.rendered}  ratio={ratio:.3f}")
    assert row.verdict == "exact"
    assert abs(ratio / 19.62 - 1.0) <= 0.02


# -- criterion 4 ---------------------------------------------------------------------------------------

@C4
@pytest.mark.slow
@pytest.mark.parametrize("preset", CASE1_PRESETS + PASSIVE_PRESETS)
def test_c4_high_noise_verdicts(preset, record):
    verdicts = []
    for seed in range(1, 6):
        try:
            row = run_benchmark(preset, 2e-2, seed=seed)
        except EmptyModelError:
            record(f"{preset} sigma=0.02 seed={seed} empty model")
            verdicts.append("empty model")
            continue
        record(row.line() + (f" extra={row.extra}" if row.extra else "") + (f" missing={row.missing}" if row.missing else ""))
        verdicts.append(row.verdict)
    record(f"{preset}: {verdicts.count('exact')}/5 exact")
    assert len(verdicts) == 5


# -- criterion 5 ---------------------------------------------------------------------------------------

_C5_TIMES: dict = {}


@pytest.fixture
def c5_timer(request):
    t0 = time.perf_counter()
    yield
    _C5_TIMES[request.node.name] = time.perf_counter() - t0


def _fd5(f, x, i, h=1e-3):
    """Five-point central difference of ``f`` along column ``i`` of ``x``."""
    e = np.zeros_like(x)
    e[:, i] = h
    return (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * h)


def _rel(sym, fd):
    return float(np.linalg.norm(sym - fd) / np.linalg.norm(fd))


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5a_symbolic_derivatives_vs_finite_differences(kind, c5_timer, record):
    space = SPACES[kind]
    n = space.n
    lib = build_library(space, library_spec(kind))
    rng = np.random.default_rng(0)
    worst = zero_floor = 0.0
    for term in lib.terms:
        q, qd = rng.uniform(-2, 2, size=(2, 100, n))

        def ev(e):
            return lambda z: np.broadcast_to(evaluate(e, z[:, :n], z[:, n:]), (100,)) if not e.is_zero else np.zeros(100)

        z = np.hstack([q, qd])
        sp = second_partials(term)
        dqd = [diff(term, Atom("qd", i)) for i in range(n)]
        checks = []
        for i in range(n):
            checks.append((sp.O[i], _fd5(ev(term), z, i)))
            checks.append((dqd[i], _fd5(ev(term), z, n + i)))
            for j in range(n):
                checks.append((sp.M[i][j], _fd5(ev(dqd[i]), z, n + j)))
                checks.append((sp.N[i][j], _fd5(ev(dqd[i]), z, j)))
        for expr, fd in checks:
            if expr.is_zero:
                # the stencil leaves only roundoff where the variable is absent
                zero_floor = max(zero_floor, float(np.max(np.abs(fd))))
            else:
                worst = max(worst, _rel(ev(expr)(z), fd))
    record(f"{kind}: {len(lib)} terms x 100 samples, worst rel err {worst:.1e}, "
           f"largest stencil value on structural zeros {zero_floor:.1e}")
    assert worst <= 1e-5
    assert zero_floor <= 1e-10


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5b_mass_tensor_symmetry(kind, c5_timer, libraries, passive_tensors):
    M = passive_tensors[kind].M
    assert np.array_equal(M, np.swapaxes(M, -1, -2))


@pytest.fixture(scope="module")
def clean_passive():
    return {k: simulate(SystemSpec(k), 5, 5.0, 0.01, seed=3) for k in KINDS}


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5c_true_coefficients_predict_zero_force(kind, c5_timer, libraries, clean_passive, record):
    lib = libraries[kind]
    tensors = elgrad.assemble_tensors(lib, clean_passive[kind])
    worst = float(np.max(np.abs(elgrad.tau_pred(tensors, SystemSpec(kind).true_coefficients(lib)))))
    record(f"{kind}: max |tau_pred| = {worst:.1e}")
    assert worst <= 1e-6


def _random_states(kind, count, seed):
    s = SystemSpec(kind)
    rng = np.random.default_rng(seed)
    q = rng.uniform(-np.pi, np.pi, size=(count, s.n))
    if kind == "spherical_pendulum":
        q[:, 0] = rng.uniform(0.2, np.pi - 0.2, size=count)
    qd = rng.uniform(-3, 3, size=(count, s.n))
    qdd = s.eom(q, qd)
    return TrajectoryDataset(np.zeros(count), q, qd, qdd, None, np.arange(count), {"system": kind})


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5d_predicted_acceleration_matches_eom(kind, c5_timer, libraries, record):
    lib = libraries[kind]
    ds = _random_states(kind, 1000, 4)
    pred = elgrad.predict_qddot(elgrad.assemble_tensors(lib, ds), SystemSpec(kind).true_coefficients(lib))
    err = float(np.max(np.abs(pred - ds.qdd)))
    record(f"{kind}: 1000 states, max |error| = {err:.1e}")
    assert err <= 1e-6


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5e_predicted_acceleration_scale_invariance(kind, c5_timer, libraries):
    lib = libraries[kind]
    tensors = elgrad.assemble_tensors(lib, _random_states(kind, 200, 5))
    rng = np.random.default_rng(6)
    c = SystemSpec(kind).true_coefficients(lib)
    c = c + 0.01 * rng.normal(size=c.shape) * (c != 0)
    base = elgrad.predict_qddot(tensors, c)
    for k in (-2.0, 0.5, 10.0):
        got = elgrad.predict_qddot(tensors, k * c)
        assert np.max(np.abs(got - base)) <= 1e-9 * max(1.0, np.max(np.abs(base)))


@C5
@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0, 2.5])
def test_c5f_soft_threshold_subgradient_optimality(lam, c5_timer):
    beta = np.linspace(-5.0, 5.0, 1000)
    x = soft_threshold(beta, lam)
    nz = x != 0
    # 0 in x - beta + lam * d|x|
    assert np.allclose(x[nz] - beta[nz] + lam * np.sign(x[nz]), 0.0, atol=1e-12)
    assert np.all(np.abs(beta[~nz]) <= lam + 1e-12)


def _fd_grad(f, c, h):
    g = np.zeros_like(c)
    for k in range(c.size):
        e = np.zeros_like(c)
        e[k] = h
        g[k] = (f(c + e) - f(c - e)) / (2 * h)
    return g


@C5
@pytest.mark.parametrize("case", [1, 2, 3])
@pytest.mark.parametrize("kind", KINDS)
def test_c5g_cost_gradients_vs_finite_differences(kind, case, c5_timer, libraries, forced_data, forced_tensors,
                                                  passive_data, passive_tensors, record):
    lib = libraries[kind]
    rng = np.random.default_rng(8)
    c_true = SystemSpec(kind).true_coefficients(lib)
    if case == 1:
        ds, T = forced_data[kind], forced_tensors[kind]
        c = c_true + 0.05 * rng.normal(size=c_true.shape)

        def cost(x):
            return elgrad.cost_case1(T, ds, x)

        h, tol = 1e-6, 1e-6
    elif case == 2:
        ds, T = passive_data[kind], passive_tensors[kind]
        c = c_true + 0.01 * rng.normal(size=c_true.shape) * (c_true != 0)

        def cost(x):
            return elgrad.cost_case2(T, ds, x)

        h, tol = 1e-7, 1e-4
    else:
        ds, T = passive_data[kind], passive_tensors[kind]
        r = int(np.flatnonzero(c_true)[0])
        c = np.delete(c_true / c_true[r], r) + 0.05 * rng.normal(size=c_true.size - 1)

        def cost(x):
            return elgrad.upsilon_residual(T, ds, x, r)

        h, tol = 1e-6, 1e-6
    _, g = cost(c)
    fd = _fd_grad(lambda x: cost(x)[0], c, h)
    err = float(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    record(f"{kind} case {case}: rel err {err:.1e}")
    assert err <= tol


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5h_passive_energy_drift(kind, c5_timer, clean_passive, record):
    s = SystemSpec(kind)
    ds = clean_passive[kind]
    worst = 0.0
    for tid in ds.trajectory_ids:
        tr = ds.trajectory(tid)
        T, V = s.energy(tr.q, tr.qd)
        E = T + V
        worst = max(worst, float(np.max(np.abs(E - E[0])) / max(abs(E[0]), np.max(np.abs(T)), np.max(np.abs(V)))))
    record(f"{kind}: worst relative drift over 5 s {worst:.1e}")
    assert worst <= 1e-5


@C5
@pytest.mark.parametrize("kind", KINDS)
def test_c5i_library_term_counts(kind, c5_timer):
    assert len(build_library(SPACES[kind], library_spec(kind))) == EXPECTED_LIBRARY_SIZE[kind]


def _run_cli(out, threads):
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    cmd = [sys.executable, "-m", "lagrangia.pipeline", "fit", "--config", str(ROOT / "configs/desk/double_case3.json"),
           "--sigma", "0.001", "--seed", "11", "--out", str(out)]
    subprocess.run(cmd, env=env, check=True, capture_output=True)


@C5
def test_c5j_determinism_across_thread_counts(tmp_path, c5_timer, record):
    _run_cli(tmp_path / "t1", 1)
    _run_cli(tmp_path / "t4", 4)
    files = ["dataset_sigma0.001.csv", "model.json"]
    for name in files:
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t4" / name).read_bytes(), name
    reports = [json.loads((tmp_path / t / "train_report.json").read_text()) for t in ("t1", "t4")]
    for r in reports:
        r.pop("wall_time")
    assert reports[0] == reports[1]
    record(f"{len(files)} artifacts byte-identical and identical training history with 1 and 4 threads")


@C5
def test_c5_runtime_budget(record):
    total = sum(_C5_TIMES.values())
    record(f"property checks took {total:.1f}s over {len(_C5_TIMES)} runs")
    assert len(_C5_TIMES) > 0 and total < 60.0


# -- criterion 6 ---------------------------------------------------------------------------------------

@C6
@pytest.mark.parametrize("preset", CASE1_PRESETS + PASSIVE_PRESETS)
def test_c6_true_model_rollout(preset, record):
    cfg = load_preset(preset)
    val = validate(true_model(cfg.system, cfg.build_library()), cfg)
    record(f"{preset}: {len(val.rmse)} rollouts x {cfg.validation.duration:g} s, max RMSE {max(val.rmse):.1e}")
    assert val.verdict == "exact"
    assert cfg.validation.duration == 5.0 and max(val.rmse) <= 1e-4
