"""Integrators for the damped ODE dx/dt = -λx + ρ(λ) f(x, t)."""

import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DomainError, NonFiniteError

logger = logging.getLogger(__name__)

Dynamics = Callable[[np.ndarray, float], np.ndarray]

SERIES_THRESHOLD = 1e-6
RES_LIMIT_LAMBDA = 1e-9
NONRES_LIMIT_LAMBDA = 1e6
ORACLE_REFINEMENT = 100


class RhoKind(Enum):
    ONE = "one"
    LAMBDA_PLUS_ONE = "lambda_plus_one"

    def __call__(self, lam: float) -> float:
        return 1.0 if self is RhoKind.ONE else lam + 1.0


class EulerVariant(Enum):
    NET1 = "net1"
    NET2 = "net2"

    @property
    def rho(self) -> RhoKind:
        return RhoKind.ONE if self is EulerVariant.NET1 else RhoKind.LAMBDA_PLUS_ONE


class Scheme(Enum):
    EXPONENTIAL = "exponential"
    NET1 = "net1"
    NET2 = "net2"


class ProbeVerdict(Enum):
    DECAYS = "decays"
    DIVERGES = "diverges"
    BOUNDARY = "boundary"


def phi(lam: float, dt: float) -> float:
    """(1 - exp(-λΔt)) / λ, with its limit Δt at λ = 0."""
    z = lam * dt
    if z < SERIES_THRESHOLD:
        return dt * (1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0)
    return -math.expm1(-z) / lam


@dataclass(frozen=True)
class DampedOdeSpec:
    lam: float
    rho: RhoKind
    dynamics: Dynamics = field(compare=False, repr=False)
    x0: np.ndarray = field(compare=False)
    T: float = 1.0
    steps: int = 1000

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError(f"λ must be >= 0, got {self.lam}")
        if not self.T > 0:
            raise DomainError(f"horizon T must be > 0, got {self.T}")
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=np.float64)).copy())

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def rho_value(self) -> float:
        return self.rho(self.lam)

    def with_steps(self, steps: int) -> "DampedOdeSpec":
        return DampedOdeSpec(self.lam, self.rho, self.dynamics, self.x0, self.T, steps)

    def with_rho(self, rho: RhoKind) -> "DampedOdeSpec":
        return DampedOdeSpec(self.lam, rho, self.dynamics, self.x0, self.T, self.steps)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *(f"x{i}" for i in range(self.states.shape[1]))])
            for t, x in zip(self.times, self.states, strict=True):
                writer.writerow([repr(float(t)), *(repr(float(v)) for v in x)])
        logger.info("wrote %s", path)


def _evaluate(f: Dynamics, x: np.ndarray, t: float, step: int) -> np.ndarray:
    value = np.asarray(f(x, t), dtype=np.float64)
    if value.shape != x.shape:
        raise DomainError(f"dynamics returned shape {value.shape} for state shape {x.shape}")
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"dynamics produced a non-finite value at step {step}", step=step)
    return value


def _run(spec: DampedOdeSpec, step: Callable[[np.ndarray, float, int], np.ndarray]) -> Trajectory:
    dt, n = spec.dt, spec.steps
    times = np.arange(n + 1) * dt
    states = np.empty((n + 1, spec.x0.size))
    states[0] = spec.x0
    x = spec.x0
    for k in range(n):
        x = step(x, times[k], k)
        states[k + 1] = x
    return Trajectory(times, states)


def integrate_exponential(spec: DampedOdeSpec) -> Trajectory:
    decay = math.exp(-spec.lam * spec.dt)
    weight = phi(spec.lam, spec.dt) * spec.rho_value

    def step(x, t, k):
        return decay * x + weight * _evaluate(spec.dynamics, x, t, k)

    return _run(spec, step)


def integrate_damped_euler(spec: DampedOdeSpec, variant: EulerVariant) -> Trajectory:
    """Forward Euler on the damped ODE; the variant fixes ρ, so ``spec.rho`` is not read."""
    dt = spec.dt
    shrink = 1.0 - spec.lam * dt
    weight = dt * variant.rho(spec.lam)

    def step(x, t, k):
        return shrink * x + weight * _evaluate(spec.dynamics, x, t, k)

    return _run(spec, step)


def integrate_rk4(spec: DampedOdeSpec) -> Trajectory:
    dt = spec.dt

    def rhs(x, t, k):
        return -spec.lam * x + spec.rho_value * _evaluate(spec.dynamics, x, t, k)

    def step(x, t, k):
        k1 = rhs(x, t, k)
        k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt, k)
        k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt, k)
        k4 = rhs(x + dt * k3, t + dt, k)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return _run(spec, step)


def integrate(spec: DampedOdeSpec, scheme: Scheme) -> Trajectory:
    match scheme:
        case Scheme.EXPONENTIAL:
            return integrate_exponential(spec)
        case Scheme.NET1:
            return integrate_damped_euler(spec, EulerVariant.NET1)
        case Scheme.NET2:
            return integrate_damped_euler(spec, EulerVariant.NET2)


def constant_forcing_solution(lam: float, rho: RhoKind, c, x0, t: float) -> np.ndarray:
    """Closed form for f ≡ c: e^{-λt} x0 + (1 - e^{-λt}) ρ c / λ."""
    return math.exp(-lam * t) * np.asarray(x0, dtype=np.float64) + phi(lam, t) * rho(lam) * np.asarray(c, dtype=np.float64)


def integral_form_residual(spec: DampedOdeSpec, trajectory: Trajectory) -> float:
    """Residual of e^{λT} x(T) = x0 + ρ ∫ e^{λt} f(x(t), t) dt, integral by composite trapezoid."""
    t, states = trajectory.times, trajectory.states
    forcing = np.stack([_evaluate(spec.dynamics, x, float(ti), k) for k, (ti, x) in enumerate(zip(t, states, strict=True))])
    integrand = np.exp(spec.lam * t)[:, None] * forcing
    integral = np.trapezoid(integrand, t, axis=0)
    lhs = math.exp(spec.lam * t[-1]) * states[-1]
    return float(np.max(np.abs(lhs - states[0] - spec.rho_value * integral)))


def _exponential_step(f: Dynamics, x: np.ndarray, lam: float, rho: RhoKind, dt: float) -> np.ndarray:
    return math.exp(-lam * dt) * x + phi(lam, dt) * rho(lam) * _evaluate(f, x, 0.0, 0)


def interpolation_limit_check(f: Dynamics, x, dt: float = 1.0) -> tuple[float, float]:
    """One exponential step near both ends of λ: (gap to x + f(x), gap to f(x)).

    Only meaningful at Δt = 1, where the large-λ limit of the scheme and the
    non-residual layer coincide.
    """
    if dt != 1.0:
        raise DomainError(f"limit check is pinned to Δt = 1, got {dt}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    fx = _evaluate(f, x, 0.0, 0)
    res_gap = max(
        float(np.max(np.abs(_exponential_step(f, x, RES_LIMIT_LAMBDA, rho, dt) - (x + fx)))) for rho in RhoKind
    )
    nonres_gap = float(
        np.max(np.abs(_exponential_step(f, x, NONRES_LIMIT_LAMBDA, RhoKind.LAMBDA_PLUS_ONE, dt) - fx))
    )
    return res_gap, nonres_gap


def euler_stability_probe(lam: float, dt: float, steps: int = 100) -> ProbeVerdict:
    """Forward Euler on dx/dt = -λx from x0 = 1; compares |x_N| with |x0|."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    factor = 1.0 - lam * dt
    x = 1.0
    for _ in range(steps):
        x = factor * x
    if abs(x) < 1.0:
        return ProbeVerdict.DECAYS
    if abs(x) > 1.0:
        return ProbeVerdict.DIVERGES
    return ProbeVerdict.BOUNDARY


@dataclass
class ConvergenceStudy:
    scheme: Scheme
    dts: list[float]
    errors: list[float]
    slope: float

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dt", "error"])
            for dt, err in zip(self.dts, self.errors, strict=True):
                writer.writerow([repr(dt), repr(err)])
        logger.info("wrote %s", path)


def _steps_for(T: float, dt: float) -> int:
    steps = round(T / dt)
    if steps < 1 or abs(steps * dt - T) > 1e-12:
        raise DomainError(f"Δt = {dt} does not divide T = {T}")
    return steps


def scheme_rho(spec: DampedOdeSpec, scheme: Scheme) -> RhoKind:
    return {Scheme.EXPONENTIAL: spec.rho, Scheme.NET1: RhoKind.ONE, Scheme.NET2: RhoKind.LAMBDA_PLUS_ONE}[scheme]


def oracle_terminal(spec: DampedOdeSpec, rho: RhoKind, finest_dt: float) -> np.ndarray:
    """RK4 terminal state at ``ORACLE_REFINEMENT``× finer than ``finest_dt``."""
    return integrate_rk4(spec.with_rho(rho).with_steps(_steps_for(spec.T, finest_dt) * ORACLE_REFINEMENT)).terminal


def convergence_study(
    spec: DampedOdeSpec,
    scheme: Scheme,
    dts: Sequence[float] = (1e-2, 1e-3, 1e-4),
    *,
    reference: np.ndarray | None = None,
) -> ConvergenceStudy:
    """Terminal error per Δt with the fitted log-log slope.

    ``reference`` defaults to ``oracle_terminal`` for the scheme's ρ at the finest Δt.
    """
    if len(dts) < 2:
        raise DomainError("a convergence study needs at least two step sizes")
    if reference is None:
        reference = oracle_terminal(spec, scheme_rho(spec, scheme), min(dts))

    errors = []
    for dt in dts:
        terminal = integrate(spec.with_steps(_steps_for(spec.T, dt)), scheme).terminal
        errors.append(float(np.max(np.abs(terminal - reference))))
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    logger.debug("%s convergence: errors=%s slope=%.4f", scheme.value, errors, slope)
    return ConvergenceStudy(scheme, [float(d) for d in dts], errors, slope)


def linear_dynamics(A, b=None) -> Dynamics:
    A = np.asarray(A, dtype=np.float64)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def f(x, t):
        return A @ x + b

    return f


# fixed system for the command-line check report
REFERENCE_A = np.array([[-0.5, 1.0], [-1.0, -0.5]])
REFERENCE_B = np.array([0.2, -0.1])
REFERENCE_X0 = np.array([1.0, 0.5])
PROBE_PRODUCTS = (0.5, 1.0, 1.9, 2.0, 2.1, 2.5)


@dataclass
class OdeCheckReport:
    lam: float
    rho: RhoKind
    dt: float
    T: float
    integral_residual: float
    res_limit_gap: float
    nonres_limit_gap: float
    convergence: list[ConvergenceStudy]
    probes: dict[float, ProbeVerdict]

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "rho": self.rho.value,
            "dt": self.dt,
            "T": self.T,
            "integral_residual": self.integral_residual,
            "res_limit_gap": self.res_limit_gap,
            "nonres_limit_gap": self.nonres_limit_gap,
            "convergence": {
                study.scheme.value: {"dt": study.dts, "error": study.errors, "slope": study.slope}
                for study in self.convergence
            },
            "euler_probe": {str(k): v.value for k, v in self.probes.items()},
        }


def ode_check(lam: float, rho: RhoKind, dt: float = 1e-4, T: float = 1.0) -> OdeCheckReport:
    f = linear_dynamics(REFERENCE_A, REFERENCE_B)
    spec = DampedOdeSpec(lam, rho, f, REFERENCE_X0, T, _steps_for(T, dt))
    residual = integral_form_residual(spec, integrate_rk4(spec))
    res_gap, nonres_gap = interpolation_limit_check(f, REFERENCE_X0, 1.0)
    dts = [d for d in (1e-2, 1e-3, 1e-4) if dt <= d <= T]
    if len(dts) < 2:
        raise DomainError(f"ode check needs Δt <= 1e-3 for a convergence study, got {dt}")
    references: dict[RhoKind, np.ndarray] = {}
    studies = []
    for scheme in Scheme:
        rho_s = scheme_rho(spec, scheme)
        if rho_s not in references:
            references[rho_s] = oracle_terminal(spec, rho_s, min(dts))
        studies.append(convergence_study(spec, scheme, dts, reference=references[rho_s]))
    probes = {product: euler_stability_probe(product, 1.0) for product in PROBE_PRODUCTS}
    logger.info("ode check λ=%g ρ=%s: residual %.3e", lam, rho.value, residual)
    return OdeCheckReport(lam, rho, dt, T, residual, res_gap, nonres_gap, studies, probes)
