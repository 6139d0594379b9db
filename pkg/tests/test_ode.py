import math

import numpy as np
import pytest

from src.errors import DomainError, NonFiniteError
from src.ode import (
    PROBE_PRODUCTS,
    DampedOdeSpec,
    EulerVariant,
    ProbeVerdict,
    RhoKind,
    Scheme,
    constant_forcing_solution,
    convergence_study,
    euler_stability_probe,
    integral_form_residual,
    integrate_damped_euler,
    integrate_exponential,
    integrate_rk4,
    interpolation_limit_check,
    linear_dynamics,
    ode_check,
    oracle_terminal,
    phi,
)

A_SMALL = np.array([[-0.05, 0.02], [-0.03, -0.04]])
B_SMALL = np.array([0.01, -0.02])


def zero(x, t):
    return np.zeros_like(x)


def test_rho_kinds():
    assert RhoKind.ONE(0.7) == 1.0
    assert RhoKind.LAMBDA_PLUS_ONE(0.7) == pytest.approx(1.7)
    assert EulerVariant.NET2.rho is RhoKind.LAMBDA_PLUS_ONE


def test_phi_small_argument_series_matches_closed_form():
    assert phi(0.0, 0.1) == 0.1
    lam, dt = 1e-8, 0.5
    assert phi(lam, dt) == pytest.approx(-math.expm1(-lam * dt) / lam, rel=1e-14)


def test_spec_validation():
    with pytest.raises(DomainError):
        DampedOdeSpec(-0.1, RhoKind.ONE, zero, [1.0])
    with pytest.raises(DomainError):
        DampedOdeSpec(0.1, RhoKind.ONE, zero, [1.0], steps=0)


def test_exponential_at_zero_lambda_is_forward_euler(rng):
    A = rng.normal(size=(3, 3)) * 0.3
    f = linear_dynamics(A)
    spec = DampedOdeSpec(0.0, RhoKind.ONE, f, rng.normal(size=3), T=1.0, steps=50)
    exp = integrate_exponential(spec)
    euler = integrate_damped_euler(spec, EulerVariant.NET1)
    assert np.allclose(exp.states, euler.states, rtol=0, atol=1e-14)


@pytest.mark.parametrize("dt_steps", [1, 3, 40])
def test_exponential_is_exact_for_constant_forcing(dt_steps):
    c, x0, lam = np.array([0.3, -1.2]), np.array([2.0, 0.5]), 0.9
    spec = DampedOdeSpec(lam, RhoKind.LAMBDA_PLUS_ONE, lambda x, t: c, x0, T=2.0, steps=dt_steps)
    traj = integrate_exponential(spec)
    for t, x in zip(traj.times, traj.states, strict=True):
        assert np.max(np.abs(x - constant_forcing_solution(lam, RhoKind.LAMBDA_PLUS_ONE, c, x0, t))) < 1e-10


def test_exponential_reaches_constant_fixed_point():
    c, lam = np.array([0.6]), 0.8
    spec = DampedOdeSpec(lam, RhoKind.ONE, lambda x, t: c, [5.0], T=80.0, steps=400)
    assert abs(integrate_exponential(spec).terminal[0] - c[0] / lam) < 1e-12


def test_exponential_matches_rk4_oracle_on_linear_system():
    f = linear_dynamics(A_SMALL, B_SMALL)
    x0 = np.array([1.0, -0.5])
    spec = DampedOdeSpec(0.7, RhoKind.ONE, f, x0, T=1.0, steps=10_000)
    oracle = integrate_rk4(spec.with_steps(1_000)).terminal
    assert np.max(np.abs(integrate_exponential(spec).terminal - oracle)) < 1e-6


def test_damped_euler_variants_reduce_to_forward_euler_at_zero_lambda(rng):
    f = linear_dynamics(rng.normal(size=(2, 2)))
    spec = DampedOdeSpec(0.0, RhoKind.ONE, f, [1.0, 2.0], steps=20)
    a = integrate_damped_euler(spec, EulerVariant.NET1)
    b = integrate_damped_euler(spec, EulerVariant.NET2)
    assert np.array_equal(a.states, b.states)
    x = np.array([1.0, 2.0])
    for _ in range(20):
        x = x + 0.05 * f(x, 0.0)
    assert np.allclose(a.terminal, x, rtol=0, atol=1e-14)


def test_damped_euler_geometric_decay():
    spec = DampedOdeSpec(0.5, RhoKind.ONE, zero, [1.0], T=10.0, steps=10)
    traj = integrate_damped_euler(spec, EulerVariant.NET1)
    assert np.array_equal(traj.states[:, 0], 0.5 ** np.arange(11))


ROTATING = linear_dynamics(np.array([[-0.5, 1.0], [-1.0, -0.5]]))


@pytest.mark.parametrize("scheme", [Scheme.NET1, Scheme.NET2, Scheme.EXPONENTIAL])
def test_first_order_convergence(scheme):
    spec = DampedOdeSpec(0.3, RhoKind.ONE, ROTATING, [1.0, 0.5], T=1.0)
    study = convergence_study(spec, scheme, (1e-2, 5e-3, 2.5e-3))
    assert 0.9 <= study.slope <= 1.1
    assert study.errors[0] > study.errors[-1]


@pytest.mark.slow
@pytest.mark.parametrize("scheme", [Scheme.NET1, Scheme.NET2, Scheme.EXPONENTIAL])
def test_first_order_convergence_over_three_decades(scheme):
    spec = DampedOdeSpec(0.3, RhoKind.ONE, ROTATING, [1.0, 0.5], T=1.0)
    study = convergence_study(spec, scheme)
    assert study.dts == [1e-2, 1e-3, 1e-4]
    assert 0.9 <= study.slope <= 1.1


def test_oracle_is_refined_from_the_finest_step():
    spec = DampedOdeSpec(0.3, RhoKind.ONE, ROTATING, [1.0, 0.5], T=1.0)
    dts = (1e-2, 5e-3, 2.5e-3)
    expected = integrate_rk4(spec.with_steps(400 * 100)).terminal
    assert np.array_equal(oracle_terminal(spec, RhoKind.ONE, min(dts)), expected)
    study = convergence_study(spec, Scheme.NET1, dts)
    assert np.array_equal(study.errors, convergence_study(spec, Scheme.NET1, dts, reference=expected).errors)


def test_integral_form_homogeneous():
    spec = DampedOdeSpec(0.6, RhoKind.ONE, zero, [2.0, -1.0], T=1.5, steps=100)
    assert integral_form_residual(spec, integrate_exponential(spec)) < 1e-10


def test_integral_form_at_zero_lambda_is_fundamental_theorem():
    f = linear_dynamics(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    spec = DampedOdeSpec(0.0, RhoKind.ONE, f, [1.0, 0.0], T=1.0, steps=10_000)
    assert integral_form_residual(spec, integrate_rk4(spec)) < 1e-6


@pytest.mark.parametrize("rho", list(RhoKind))
def test_integral_form_linear_system(rho):
    f = linear_dynamics(np.array([[-0.5, 1.0], [-1.0, -0.5]]), np.array([0.2, -0.1]))
    spec = DampedOdeSpec(1.0, rho, f, [1.0, 0.5], T=1.0, steps=100_000)
    assert integral_form_residual(spec, integrate_rk4(spec)) < 1e-6


def test_interpolation_limits(rng):
    f = linear_dynamics(rng.normal(size=(3, 3)), rng.normal(size=3))
    res_gap, nonres_gap = interpolation_limit_check(f, rng.normal(size=3))
    assert res_gap < 1e-6
    assert nonres_gap < 1e-3


def test_large_lambda_step_approaches_the_map():
    _, gap = interpolation_limit_check(lambda x, t: 2.0 * x, [1.0, -1.0])
    assert gap < 1e-3


def test_limit_check_is_pinned_to_unit_step():
    with pytest.raises(DomainError):
        interpolation_limit_check(zero, [1.0], dt=0.5)


@pytest.mark.parametrize(
    ("product", "verdict"),
    [
        (0.5, ProbeVerdict.DECAYS),
        (1.0, ProbeVerdict.DECAYS),
        (1.9, ProbeVerdict.DECAYS),
        (2.0, ProbeVerdict.BOUNDARY),
        (2.1, ProbeVerdict.DIVERGES),
        (2.5, ProbeVerdict.DIVERGES),
    ],
)
def test_euler_stability_window(product, verdict):
    assert euler_stability_probe(product, 1.0) is verdict


def test_non_finite_dynamics_names_the_step():
    def blow_up(x, t):
        return np.array([np.inf]) if t > 0.25 else x

    spec = DampedOdeSpec(0.1, RhoKind.ONE, blow_up, [1.0], T=1.0, steps=10)
    with pytest.raises(NonFiniteError) as info:
        integrate_exponential(spec)
    assert info.value.step == 3


def test_trajectory_csv(tmp_path):
    spec = DampedOdeSpec(0.5, RhoKind.ONE, zero, [1.0, 2.0], T=1.0, steps=2)
    path = tmp_path / "trajectory.csv"
    integrate_exponential(spec).write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x0,x1"
    assert len(lines) == 4


def test_ode_check_report():
    report = ode_check(0.7, RhoKind.ONE, dt=1e-3)
    assert report.convergence[0].dts == [1e-2, 1e-3]
    assert report.integral_residual < 1e-5
    assert report.res_limit_gap < 1e-6
    assert report.nonres_limit_gap < 1e-3
    assert {s.scheme for s in report.convergence} == set(Scheme)
    assert all(0.9 <= s.slope <= 1.1 for s in report.convergence)
    assert set(report.probes) == set(PROBE_PRODUCTS)
    assert report.to_dict()["euler_probe"]["2.1"] == "diverges"
