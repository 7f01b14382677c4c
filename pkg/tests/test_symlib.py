import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagrangia import symlib
from lagrangia.dynamics import KINDS, SPACES, library_spec
from lagrangia.elgrad import LagrangianModel
from lagrangia.symlib import (
    CandidateLibrary,
    CoordinateSpace,
    LibraryGroup,
    LibrarySpec,
    build_library,
    cross_terms,
    diff,
    evaluate,
    is_trivial_term,
    lambdify,
    polynomial_combinations,
    render,
)

from conftest import EXPECTED_LIBRARY_SIZE

ONE = CoordinateSpace(("theta",), ("θ",))
TWO = CoordinateSpace(("q1", "q2"))
CART = SPACES["cart_pendulum"]

finite = st.floats(-3.0, 3.0, allow_nan=False)


# -- coordinate space --------------------------------------------------------

def test_space_rejects_duplicate_labels():
    with pytest.raises(ValueError):
        CoordinateSpace(("a", "a"))


def test_space_rejects_empty():
    with pytest.raises(ValueError):
        CoordinateSpace(())


def test_atom_parsing_round_trips():
    for label in ("theta", "theta_dot", "sin(theta)", "cos(theta)"):
        assert ONE.atom(label).name == label


# -- evaluate ------------------------------------------------------------------

def test_evaluate_velocity_square():
    assert evaluate(ONE.qd() ** 2, [0.3], [2.0]) == 4.0


def test_evaluate_cos_at_zero():
    assert evaluate(ONE.cos(), [0.0], [0.0]) == 1.0


def test_evaluate_two_coordinate_product():
    e = TWO.qd(0) * TWO.qd(1) * TWO.cos(0) * TWO.cos(1)
    assert evaluate(e, [0.0, 0.0], [1.0, 2.0]) == 2.0


def test_evaluate_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        evaluate(TWO.q(0), [0.0], [0.0])


def test_evaluate_batched_matches_pointwise():
    e = CART.qd(0) * CART.qd(1) * CART.cos(0) + CART.sin(0) ** 2
    rng = np.random.default_rng(0)
    q, qd = rng.normal(size=(2, 7, 2))
    batch = evaluate(e, q, qd)
    assert np.allclose(batch, [evaluate(e, q[i], qd[i]) for i in range(7)], rtol=0, atol=1e-15)


# -- diff ------------------------------------------------------------------------

def test_diff_power_rule():
    assert diff(ONE.qd() ** 2, "theta_dot") == 2 * ONE.qd()


def test_diff_cos():
    assert diff(ONE.cos(), "theta") == -ONE.sin()


def test_diff_unknown_variable():
    with pytest.raises(KeyError):
        diff(ONE.cos(), "phi")


def test_diff_matches_finite_differences_on_cart_cross_term():
    e = CART.qd(1) * CART.qd(0) * CART.cos(0)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(100):
        q, qd = rng.uniform(-2, 2, size=(2, 2))
        for kind in ("q", "qd"):
            for i in range(2):
                d = evaluate(diff(e, (kind, i)), q, qd)
                step = np.zeros(2)
                step[i] = h
                if kind == "q":
                    fd = (evaluate(e, q + step, qd) - evaluate(e, q - step, qd)) / (2 * h)
                else:
                    fd = (evaluate(e, q, qd + step) - evaluate(e, q, qd - step)) / (2 * h)
                assert abs(d - fd) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 58), st.lists(finite, min_size=4, max_size=4), st.sampled_from(["theta", "phi", "theta_dot", "phi_dot"]))
def test_diff_product_rule_holds_for_library_products(k, x, var):
    lib = build_library(SPACES["spherical_pendulum"], library_spec("spherical_pendulum"))
    a, b = lib.terms[k], lib.terms[(k * 7 + 3) % len(lib)]
    lhs = diff(a * b, var)
    rhs = diff(a, var) * b + a * diff(b, var)
    q, qd = np.array(x[:2]), np.array(x[2:])
    assert math.isclose(evaluate(lhs, q, qd), evaluate(rhs, q, qd), rel_tol=1e-9, abs_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 88), st.lists(finite, min_size=4, max_size=4))
def test_derivatives_stay_finite(kind, k, x):
    space = SPACES[kind]
    lib = build_library(space, library_spec(kind))
    term = lib.terms[k % len(lib)]
    n = space.n
    q, qd = np.array(x[:n]), np.array(x[n : 2 * n])
    for i in range(n):
        for kind_ in ("q", "qd"):
            assert math.isfinite(evaluate(diff(term, (kind_, i)), q, qd))


# -- library construction -------------------------------------------------------

def test_polynomial_combinations_single_pendulum_atoms():
    atoms = [ONE.q(), ONE.qd(), ONE.cos(), ONE.sin()]
    assert len(polynomial_combinations(atoms, 2)) == 14


def test_polynomial_combinations_cart_atoms():
    atoms = [CART.atom(a) for a in ("theta_dot", "cos(theta)", "sin(theta)", "x", "x_dot")]
    assert len(polynomial_combinations(atoms, 3)) == 55


def test_polynomial_combinations_velocity_pair():
    sp = SPACES["double_pendulum"]
    out = polynomial_combinations([sp.qd(0), sp.qd(1)], 2)
    assert [t.name for t in out] == ["theta1_dot", "theta2_dot", "theta1_dot^2", "theta1_dot*theta2_dot", "theta2_dot^2"]


def test_polynomial_combinations_is_graded():
    out = polynomial_combinations([ONE.q(), ONE.qd(), ONE.cos(), ONE.sin()], 2)
    degrees = [sum(p for _, p in t.terms[0][0]) for t in out]
    assert degrees == sorted(degrees)


def test_polynomial_combinations_rejects_empty():
    with pytest.raises(ValueError):
        polynomial_combinations([], 2)


def test_cross_terms_double_pendulum_counts():
    sp = SPACES["double_pendulum"]
    trig = polynomial_combinations([sp.cos(0), sp.sin(0), sp.cos(1), sp.sin(1)], 2)
    vel = polynomial_combinations([sp.qd(0), sp.qd(1)], 2)
    assert len(trig) == 14 and len(vel) == 5
    assert len(cross_terms(trig, vel)) == 70
    assert len(trig) + len(vel) + len(cross_terms(trig, vel)) == 89


def test_cross_terms_single_product():
    assert cross_terms([ONE.cos()], [ONE.qd() ** 2]) == [ONE.qd() ** 2 * ONE.cos()]


@pytest.mark.parametrize("kind", KINDS)
def test_library_sizes(kind):
    assert len(build_library(SPACES[kind], library_spec(kind))) == EXPECTED_LIBRARY_SIZE[kind]


def test_reduced_double_pendulum_library_has_87_terms():
    lib = build_library(SPACES["double_pendulum"], library_spec("double_pendulum", "reduced"))
    assert len(lib) == 87
    assert "theta1_dot" not in lib.names and "theta2_dot" not in lib.names


@pytest.mark.parametrize("kind", KINDS)
def test_library_build_is_deterministic(kind):
    a = build_library(SPACES[kind], library_spec(kind))
    b = build_library(SPACES[kind], library_spec(kind))
    assert a.names == b.names


@pytest.mark.parametrize("kind", KINDS)
def test_library_contains_true_terms(kind, systems):
    lib = build_library(SPACES[kind], library_spec(kind))
    for term, _ in systems[kind].true_terms():
        lib.index(term)


def test_library_spec_round_trip():
    spec = library_spec("double_pendulum", "reduced")
    assert LibrarySpec.from_dict(spec.to_dict()) == spec


def test_library_spec_unknown_exclusion():
    spec = LibrarySpec([LibraryGroup(["theta"], 1)], exclude=["theta_dot"])
    with pytest.raises(KeyError):
        build_library(ONE, spec)


def test_drop_trivial_removes_total_derivatives():
    spec = LibrarySpec([LibraryGroup(["theta", "theta_dot", "cos(theta)", "sin(theta)"], 2)], drop_trivial=True)
    names = build_library(ONE, spec).names
    assert "theta_dot" not in names and "theta*theta_dot" not in names
    assert "theta_dot^2" in names


# -- trivial terms --------------------------------------------------------------

def test_trivial_theta_theta_dot():
    assert is_trivial_term(ONE.q() * ONE.qd(), ONE)


def test_trivial_theta_dot():
    assert is_trivial_term(ONE.qd(), ONE)


def test_velocity_square_is_not_trivial():
    assert not is_trivial_term(ONE.qd() ** 2, ONE)


def test_higher_power_total_derivative_is_trivial():
    assert is_trivial_term(ONE.q() ** 3 * ONE.qd(), ONE)


# -- library bookkeeping ---------------------------------------------------------

def test_library_known_terms_are_unpenalized():
    lib = CandidateLibrary((ONE.qd() ** 2, ONE.cos())).with_known(["cos(theta)"])
    assert lib.penalty_mask == (True, False)


def test_library_rejects_undeclared_mask():
    with pytest.raises(ValueError):
        CandidateLibrary((ONE.qd() ** 2, ONE.cos()), penalty_mask=(True, False))


def test_library_rejects_duplicates():
    with pytest.raises(ValueError):
        CandidateLibrary((ONE.cos(), ONE.cos()))


def test_library_index_by_symbol():
    lib = CandidateLibrary((ONE.qd() ** 2, ONE.cos()))
    assert lib.index("θ̇²") == 0 and lib.index("cos(θ)") == 1


# -- lambdify ---------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 10_000))
def test_lambdify_matches_evaluate(kind, seed):
    space = SPACES[kind]
    lib = build_library(space, library_spec(kind))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(lib), size=5, replace=False)
    exprs = [lib.terms[k] * float(rng.normal()) + lib.terms[(k + 1) % len(lib)] for k in picks] + [space.constant(0)]
    q, qd = rng.uniform(-2, 2, size=(2, 9, space.n))
    got = lambdify(exprs)(q, qd)
    for e, g in zip(exprs, got):
        assert np.allclose(g, evaluate(e, q, qd), rtol=1e-12, atol=1e-12)
        assert np.shape(g) == (9,)


# -- render ----------------------------------------------------------------------

def _model(terms, coefs):
    return LagrangianModel(CandidateLibrary(tuple(terms)), np.array(coefs, dtype=float))


def test_render_table_style():
    m = _model([ONE.qd() ** 2, ONE.cos()], [0.5, 9.78])
    assert render(m, 2) == "0.50·θ̇² + 9.78·cos(θ)"


def test_render_all_zero_is_empty():
    assert render(_model([ONE.qd() ** 2, ONE.cos()], [0.0, 0.0])) == ""


def test_render_negative_leading_and_inner():
    m = _model([ONE.qd() ** 2, ONE.cos()], [-0.06, -1.94])
    assert render(m, 2) == "-0.06·θ̇² - 1.94·cos(θ)"


def test_render_ascii():
    m = _model([ONE.qd() ** 2, ONE.cos()], [0.5, 9.81])
    assert render(m, 3, ascii=True) == "0.500*theta_dot^2 + 9.810*cos(theta)"


def test_render_skips_zero_terms_in_library_order():
    m = _model([ONE.cos(), ONE.q(), ONE.qd() ** 2], [9.81, 0.0, 0.5])
    assert symlib.render(m, 1) == "9.8·cos(θ) + 0.5·θ̇²"
