"""Dense linear algebra primitives, Adam, and the finite-difference gradient checker.

All training arithmetic is float64. Every stochastic routine takes an explicit
seed and derives its generator through ``rng_stream`` so that runs are
reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgumentError, NumericalError

Params = dict[str, np.ndarray]


def _path_entropy(key: int | str) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=4).digest(), "little")
    return int(key) & 0xFFFFFFFF


def rng_stream(seed: int, *path: int | str) -> np.random.Generator:
    """Named substream of the root seed: same (seed, path) always yields the same generator."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_path_entropy(k) for k in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def ensure_finite(name: str, arr: np.ndarray | float) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")


def xavier_init(rows: int, cols: int, seed: int) -> np.ndarray:
    """Uniform init on [-b, b] with b = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"xavier_init needs positive dimensions, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    rng = rng_stream(seed, "xavier", rows, cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow; equals -softplus(-x)."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def softplus_scalar(x: float) -> float:
    """log(1 + exp(x)) without overflow."""
    return float(np.logaddexp(0.0, x))


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise InvalidArgumentError("softmax_rows requires a non-empty matrix")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AdamState:
    """Per-parameter optimizer state; moments share the parameter's shape."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(first_moment=np.zeros_like(param), second_moment=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state`` and returns the new parameter."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise InvalidArgumentError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}")
    ensure_finite("adam_step gradient", grad)
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    ensure_finite("adam_step parameter", new_param)
    return new_param


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    probe_count: int
    per_parameter: dict[str, float] = field(default_factory=dict)


def finite_diff_check(loss_fn: Callable[[Params], tuple[float, Params]],
                      params: Mapping[str, np.ndarray],
                      seed: int,
                      probes_per_param: int = 20,
                      step_scale: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients from ``loss_fn`` against central differences.

    ``loss_fn`` maps a parameter dict to ``(loss, grads)`` where ``grads`` has
    one array per parameter, same shapes. For each parameter at least
    ``probes_per_param`` coordinates are probed with h = step_scale * max(1, |value|).
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    base = {name: np.array(p, dtype=np.float64) for name, p in params.items()}
    loss, grads = loss_fn(base)
    if not np.isfinite(loss):
        raise NumericalError(f"loss is not finite at the probe point: {loss}")
    for name in base:
        if name not in grads:
            raise InvalidArgumentError(f"loss_fn returned no gradient for {name!r}")
        ensure_finite(f"analytic gradient of {name}", grads[name])

    rng = rng_stream(seed, "gradcheck")
    worst = 0.0
    worst_name = ""
    per_parameter: dict[str, float] = {}
    probe_count = 0
    for name in sorted(base):
        p = base[name]
        n = p.size
        if n == 0:
            continue
        if n <= probes_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=probes_per_param, replace=False)
        param_worst = 0.0
        for flat_idx in coords:
            idx = np.unravel_index(int(flat_idx), p.shape)
            value = p[idx]
            h = step_scale * max(1.0, abs(value))
            p[idx] = value + h
            loss_plus, _ = loss_fn(base)
            p[idx] = value - h
            loss_minus, _ = loss_fn(base)
            p[idx] = value
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise NumericalError(f"non-finite loss while probing {name}{list(idx)}")
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = grads[name][idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            probe_count += 1
            param_worst = max(param_worst, rel)
        per_parameter[name] = param_worst
        if param_worst >= worst:
            worst = param_worst
            worst_name = name
    return GradCheckReport(max_relative_error=worst, worst_parameter=worst_name,
                           probe_count=probe_count, per_parameter=per_parameter)
