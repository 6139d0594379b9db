import numpy as np

from src import tensor as T
from src.tensor import Graph, Tensor


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def component_err(ad, fd, floor: float = 1e-3) -> float:
    """Largest per-component error |ad - fd| / |fd|; components below ``floor`` (relative to the largest) are held to it."""
    ad, fd = np.asarray(ad, dtype=np.float64), np.asarray(fd, dtype=np.float64)
    if fd.size == 0:
        return 0.0
    scale = np.maximum(np.abs(fd), floor * max(1.0, float(np.max(np.abs(fd)))))
    return float(np.max(np.abs(ad - fd) / scale))


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar reduction of a tensor output: sum(out * weights)."""
    return T.sum(T.mul(out, weights))


def gradient_pairs(fn, inputs: list[np.ndarray], step: float = 1e-6) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode and central-difference gradients of a scalar fn, per input."""
    with Graph() as graph:
        leaves = [graph.leaf(a) for a in inputs]
        grads = graph.backward(fn(*leaves))
    pairs = []
    for i, a in enumerate(inputs):

        def scalar(v, i=i):
            args = [Tensor(v) if j == i else Tensor(b) for j, b in enumerate(inputs)]
            return fn(*args).item()

        pairs.append((grads[leaves[i]], T.numerical_gradient(scalar, a, step)))
    return pairs


def autodiff_vs_fd(fn, inputs: list[np.ndarray], step: float = 1e-6) -> list[float]:
    """Norm-wise relative error between reverse-mode and central-difference gradients, per input."""
    return [rel_err(ad, fd) for ad, fd in gradient_pairs(fn, inputs, step)]


def componentwise_vs_fd(fn, inputs: list[np.ndarray], step: float = 1e-6) -> list[float]:
    return [component_err(ad, fd) for ad, fd in gradient_pairs(fn, inputs, step)]


def away_from_zero(rng: np.random.Generator, shape, low: float = 0.1) -> np.ndarray:
    """Random values with |v| >= low, so ReLU kinks stay out of reach of a finite-difference step."""
    return rng.uniform(low, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def match_spectra(a, b) -> float:
    """Largest distance after pairing each value of ``a`` with its nearest unused value of ``b``."""
    remaining = [complex(v) for v in b]
    worst = 0.0
    for v in a:
        k = min(range(len(remaining)), key=lambda i: abs(remaining[i] - v))
        worst = max(worst, abs(remaining.pop(k) - v))
    return worst
