"""Local stability of autonomous dynamics and the spectrum shift caused by damping.

An equilibrium x* of dx/dt = f(x) is asymptotically stable when every
eigenvalue ν of ∂f/∂x(x*) has Re(ν) < 0. Adding the damping term turns the
Jacobian into ρ(λ)J - λI, whose eigenvalues are ν̂ = ρ(λ)ν - λ.
"""

import json
import logging
import math
import re
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    ArtifactError,
    ConfigError,
    ConvergenceError,
    DomainError,
    NonFiniteError,
    ShapeError,
    SingularJacobianError,
)
from .ode import RhoKind
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 200
SINGULAR_CONDITION = 1e14
MAX_EIGEN_DIM = 128


@dataclass(frozen=True)
class DynamicsHandle:
    """Autonomous dynamics f: R^dim -> R^dim, optionally also written on tensors."""

    dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    tensor_fn: Callable[[Tensor], Tensor] | None = field(default=None, repr=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(self.dim)
        value = np.asarray(self.fn(x), dtype=np.float64).reshape(-1)
        if value.size != self.dim:
            raise ShapeError(f"dynamics maps R^{self.dim} to R^{value.size}")
        return value

    @classmethod
    def linear(cls, A) -> "DynamicsHandle":
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError(f"linear dynamics need a square matrix, got {A.shape}")
        n = A.shape[0]

        def tensor_fn(x: Tensor) -> Tensor:
            return T.reshape(T.matmul(A, T.reshape(x, (n, 1))), (n,))

        return cls(n, lambda x: A @ x, tensor_fn)


# equilibria and jacobians


def find_equilibrium(f: DynamicsHandle, x_init) -> np.ndarray:
    """Damped Newton on f(x) = 0 with a central-difference Jacobian."""
    x = np.asarray(x_init, dtype=np.float64).reshape(f.dim).copy()
    fx = f(x)
    for iteration in range(NEWTON_MAX_ITER):
        residual = float(np.max(np.abs(fx)))
        if residual < NEWTON_TOL:
            logger.debug("newton converged in %d iterations (|f|=%.3e)", iteration, residual)
            return x
        J = T.numerical_jacobian(f, x)
        condition = float(np.linalg.cond(J))
        if not math.isfinite(condition) or condition > SINGULAR_CONDITION:
            raise SingularJacobianError("singular Jacobian in Newton step", condition=condition, iterations=iteration)
        step = np.linalg.solve(J, -fx)

        # backtrack until the residual norm decreases
        t = 1.0
        norm = float(np.linalg.norm(fx))
        while True:
            candidate = x + t * step
            f_candidate = f(candidate)
            if np.all(np.isfinite(f_candidate)) and np.linalg.norm(f_candidate) < norm or t < 1e-8:
                break
            t *= 0.5
        x, fx = candidate, f_candidate
    raise ConvergenceError(
        f"newton did not reach |f| < {NEWTON_TOL} in {NEWTON_MAX_ITER} iterations", iterations=NEWTON_MAX_ITER
    )


def _autodiff_jacobian(f: DynamicsHandle, x: np.ndarray) -> np.ndarray:
    rows = []
    for i in range(f.dim):
        with Graph() as graph:
            xt = graph.leaf(x)
            out = f.tensor_fn(xt)
            if out.data.size != f.dim:
                raise ShapeError(f"dynamics maps R^{f.dim} to R^{out.data.size}")
            rows.append(graph.backward(T.take(out, i))[xt].reshape(-1))
    return np.stack(rows)


def jacobian(f: DynamicsHandle, x, *, method: str = "auto") -> np.ndarray:
    """∂f/∂x at x: reverse-mode rows when a tensor form exists, else central differences."""
    x = np.asarray(x, dtype=np.float64).reshape(f.dim)
    match method:
        case "auto":
            J = _autodiff_jacobian(f, x) if f.tensor_fn is not None else T.numerical_jacobian(f, x)
        case "autodiff":
            if f.tensor_fn is None:
                raise DomainError("dynamics have no tensor form; autodiff Jacobian unavailable")
            J = _autodiff_jacobian(f, x)
        case "fd":
            J = T.numerical_jacobian(f, x)
        case _:
            raise DomainError(f"unknown Jacobian method {method!r}")
    if not np.all(np.isfinite(J)):
        raise NonFiniteError(f"Jacobian has non-finite entries at x={x}")
    return J


# eigenvalues


def hessenberg(m: np.ndarray) -> np.ndarray:
    """Householder reduction to upper Hessenberg form (similar to ``m``)."""
    h = np.array(m, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1 :, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        alpha = -math.copysign(norm_x, x[0])
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        h[k + 1 :, k:] -= 2.0 * np.outer(v, v @ h[k + 1 :, k:])
        h[:, k + 1 :] -= 2.0 * np.outer(h[:, k + 1 :] @ v, v)
        h[k + 2 :, k] = 0.0
    return h


def _francis_eigenvalues(h: np.ndarray) -> list[complex]:
    """Francis double-shift QR on an upper Hessenberg matrix, eigenvalues only.

    Works on the active window [l, nn], deflating one real root or one 2×2
    block at a time. Exceptional shifts every 10 stalled iterations.
    """
    n = h.shape[0]
    roots: list[complex] = [0j] * n
    anorm = float(np.sum(np.abs(h)))
    budget = 30 * n * n
    total = 0
    shift = 0.0
    nn = n - 1
    its = 0
    while nn >= 0:
        l = nn  # noqa: E741
        while l >= 1:
            s = abs(h[l - 1, l - 1]) + abs(h[l, l])
            if s == 0.0:
                s = anorm
            if abs(h[l, l - 1]) + s == s:
                h[l, l - 1] = 0.0
                break
            l -= 1  # noqa: E741

        x = h[nn, nn]
        if l == nn:
            roots[nn] = complex(x + shift, 0.0)
            nn -= 1
            its = 0
            continue

        y = h[nn - 1, nn - 1]
        w = h[nn, nn - 1] * h[nn - 1, nn]
        if l == nn - 1:
            p = 0.5 * (y - x)
            q = p * p + w
            z = math.sqrt(abs(q))
            x += shift
            if q >= 0.0:
                z = p + math.copysign(z, p)
                roots[nn - 1] = complex(x + z, 0.0)
                roots[nn] = complex(x - w / z if z != 0.0 else x + z, 0.0)
            else:
                roots[nn - 1] = complex(x + p, z)
                roots[nn] = complex(x + p, -z)
            nn -= 2
            its = 0
            continue

        if total >= budget:
            raise ConvergenceError(f"QR iteration did not converge within {budget} sweeps", iterations=total)
        if its > 0 and its % 10 == 0:
            shift += x
            for i in range(nn + 1):
                h[i, i] -= x
            s = abs(h[nn, nn - 1]) + abs(h[nn - 1, nn - 2])
            x = y = 0.75 * s
            w = -0.4375 * s * s
        its += 1
        total += 1

        # look for two consecutive small subdiagonals
        m = nn - 2
        while True:
            z = h[m, m]
            r = x - z
            s = y - z
            p = (r * s - w) / h[m + 1, m] + h[m, m + 1]
            q = h[m + 1, m + 1] - z - r - s
            r = h[m + 2, m + 1]
            s = abs(p) + abs(q) + abs(r)
            p, q, r = p / s, q / s, r / s
            if m == l:
                break
            u = abs(h[m, m - 1]) * (abs(q) + abs(r))
            v = abs(p) * (abs(h[m - 1, m - 1]) + abs(z) + abs(h[m + 1, m + 1]))
            if u + v == v:
                break
            m -= 1

        for i in range(m + 2, nn + 1):
            h[i, i - 2] = 0.0
            if i != m + 2:
                h[i, i - 3] = 0.0

        # chase the bulge down the window
        for k in range(m, nn):
            if k != m:
                p = h[k, k - 1]
                q = h[k + 1, k - 1]
                r = h[k + 2, k - 1] if k != nn - 1 else 0.0
                x = abs(p) + abs(q) + abs(r)
                if x != 0.0:
                    p, q, r = p / x, q / x, r / x
            s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
            if s == 0.0:
                continue
            if k == m:
                if l != m:
                    h[k, k - 1] = -h[k, k - 1]
            else:
                h[k, k - 1] = -s * x
            p += s
            x, y, z = p / s, q / s, r / s
            q, r = q / p, r / p

            cols = slice(k, nn + 1)
            row = h[k, cols] + q * h[k + 1, cols]
            if k != nn - 1:
                row = row + r * h[k + 2, cols]
                h[k + 2, cols] -= row * z
            h[k + 1, cols] -= row * y
            h[k, cols] -= row * x

            rows = slice(l, min(nn, k + 3) + 1)
            col = x * h[rows, k] + y * h[rows, k + 1]
            if k != nn - 1:
                col = col + z * h[rows, k + 2]
                h[rows, k + 2] -= col * r
            h[rows, k + 1] -= col * q
            h[rows, k] -= col

    logger.debug("QR converged after %d iterations (n=%d)", total, n)
    return roots


def sort_spectrum(values) -> list[complex]:
    return sorted((complex(v) for v in values), key=lambda c: (c.real, c.imag))


def eigenvalues(m) -> list[complex]:
    """Eigenvalues of a real square matrix, sorted by (Re, Im)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"eigenvalues need a square matrix, got {m.shape}")
    n = m.shape[0]
    if n > MAX_EIGEN_DIM:
        raise DomainError(f"dense eigenvalue solver supports dimension <= {MAX_EIGEN_DIM}, got {n}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix has non-finite entries")
    if n == 0:
        return []
    return sort_spectrum(_francis_eigenvalues(hessenberg(m)))


def damped_spectrum(J, lam: float, rho: RhoKind) -> list[complex]:
    """{ρ(λ)ν - λ : ν eigenvalue of J}."""
    if not lam >= 0:
        raise DomainError(f"λ must be >= 0, got {lam}")
    r = rho(lam)
    return sort_spectrum(r * nu - lam for nu in eigenvalues(J))


@dataclass(frozen=True)
class Frontier:
    bound: float
    satisfied: bool
    rho_below_bound: bool


def rho_stability_frontier(nu: complex, lam: float, rho_value: float) -> Frontier:
    """Whether damping moves ν left: Re(ρν - λ) < Re(ν), alongside the divided form ρ < 1 + λ/Re(ν).

    The two forms disagree when Re(ν) < 0 because dividing flips the
    inequality; ``satisfied`` is the undivided one.
    """
    re_nu = complex(nu).real
    if re_nu == 0.0:
        raise DomainError("frontier undefined for Re(ν) = 0")
    bound = 1.0 + lam / re_nu
    satisfied = (rho_value * complex(nu) - lam).real < re_nu
    return Frontier(bound, satisfied, rho_value < bound)


# reports


def _pairs(values: list[complex]) -> list[list[float]]:
    return [[v.real, v.imag] for v in values]


@dataclass
class StabilityReport:
    equilibrium: np.ndarray
    jacobian: np.ndarray
    raw_spectrum: list[complex]
    damped_spectrum: list[complex]
    lam: float
    rho: RhoKind

    @property
    def max_re_raw(self) -> float:
        return max(v.real for v in self.raw_spectrum)

    @property
    def max_re_damped(self) -> float:
        return max(v.real for v in self.damped_spectrum)

    @property
    def stable_raw(self) -> bool:
        return self.max_re_raw < 0.0

    @property
    def stable_damped(self) -> bool:
        return self.max_re_damped < 0.0

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "rho": self.rho.value,
            "equilibrium": self.equilibrium.tolist(),
            "jacobian": self.jacobian.tolist(),
            "raw_spectrum": _pairs(self.raw_spectrum),
            "damped_spectrum": _pairs(self.damped_spectrum),
            "max_re_raw": self.max_re_raw,
            "max_re_damped": self.max_re_damped,
            "stable_raw": self.stable_raw,
            "stable_damped": self.stable_damped,
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        logger.info("wrote %s", path)


def spectrum_report(J, lam: float, rho: RhoKind, equilibrium=None) -> StabilityReport:
    """Raw and damped spectra of a given Jacobian; a bare matrix is read as linear dynamics about 0."""
    J = np.asarray(J, dtype=np.float64)
    x_star = np.zeros(len(J)) if equilibrium is None else np.asarray(equilibrium, dtype=np.float64)
    return StabilityReport(x_star, J, eigenvalues(J), damped_spectrum(J, lam, rho), lam, rho)


def analyze(f: DynamicsHandle, start, lam: float, rho: RhoKind) -> StabilityReport:
    x_star = find_equilibrium(f, start)
    return spectrum_report(jacobian(f, x_star), lam, rho, x_star)


# named dynamics and matrix specs


def _cubic_tensor(x: Tensor) -> Tensor:
    x0, x1 = T.take(x, 0), T.take(x, 1)
    return T.stack([T.sub(x1, T.mul(T.mul(x0, x0), x0)), T.sub(T.neg(x0), x1)])


def _pendulum_tensor(x: Tensor) -> Tensor:
    # small-angle damped oscillator: x0' = x1, x1' = -x0 - 0.2 x1
    x0, x1 = T.take(x, 0), T.take(x, 1)
    return T.stack([x1, T.sub(T.neg(x0), T.mul(0.2, x1))])


def _numeric(tensor_fn: Callable[[Tensor], Tensor]) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: tensor_fn(Tensor(x)).data


DYNAMICS: dict[str, DynamicsHandle] = {
    "cubic": DynamicsHandle(2, _numeric(_cubic_tensor), _cubic_tensor),
    "oscillator": DynamicsHandle(2, _numeric(_pendulum_tensor), _pendulum_tensor),
    "quadratic": DynamicsHandle(1, lambda x: x * x - 4.0),
}

_TERM = re.compile(r"^(\d+(?:\.\d*)?|\.\d+)?\*?(z(?:\^(\d+))?)?$")


def parse_polynomial(text: str) -> np.ndarray:
    """Coefficients (highest degree first) of e.g. ``z^3-6z^2+11z-6``."""
    source = text.replace(" ", "")
    if not source:
        raise ConfigError(f"empty polynomial {text!r}")
    terms: dict[int, float] = {}
    for sign, body in re.findall(r"([+-]?)([^+-]+)", source):
        match = _TERM.match(body)
        if match is None or (match.group(1) is None and match.group(2) is None):
            raise ConfigError(f"cannot parse polynomial term {sign}{body!r} in {text!r}")
        coef = float(match.group(1)) if match.group(1) is not None else 1.0
        degree = (int(match.group(3)) if match.group(3) else 1) if match.group(2) else 0
        terms[degree] = terms.get(degree, 0.0) + (-coef if sign == "-" else coef)
    degree = max(terms)
    coefficients = np.array([terms.get(d, 0.0) for d in range(degree, -1, -1)])
    if degree < 1 or coefficients[0] == 0.0:
        raise ConfigError(f"polynomial {text!r} must have a nonzero term of degree >= 1")
    return coefficients


def companion(coefficients) -> np.ndarray:
    c = np.asarray(coefficients, dtype=np.float64)
    c = c[1:] / c[0]
    n = c.size
    m = np.zeros((n, n))
    m[0, :] = -c
    m[np.arange(1, n), np.arange(n - 1)] = 1.0
    return m


def parse_matrix_spec(spec: str) -> np.ndarray:
    """``companion:<poly>``, ``diag:a,b,c`` or ``file:<path to JSON nested list>``."""
    kind, _, body = spec.partition(":")
    match kind:
        case "companion":
            return companion(parse_polynomial(body))
        case "diag":
            try:
                return np.diag([float(v) for v in body.split(",")])
            except ValueError as e:
                raise ConfigError(f"bad diagonal {body!r}") from e
        case "file":
            path = Path(body)
            if not path.exists():
                raise ArtifactError(f"matrix file not found: {path}")
            m = np.asarray(json.loads(path.read_text()), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ConfigError(f"{path}: expected a square matrix, got shape {m.shape}")
            return m
    raise ConfigError(f"unknown matrix spec {spec!r}; expected companion:, diag: or file:")
