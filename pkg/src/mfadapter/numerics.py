"""Dense tensor primitives: matrix products, row normalization, the
cross-entropy loss with its analytic gradient, and a bias-corrected Adam
update.

Arrays are float32 row-major by convention; every operation preserves the
input dtype so the same code can be driven at float64 when a wider check is
wanted. Reductions accumulate at float64 internally where it matters for
the stated tolerances. Any NaN/Inf in a result raises instead of
propagating silently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, NonFiniteError

# Guard against division by zero when normalizing degenerate (all-zero) rows.
NORM_EPS = 1e-12

ADAM_LR = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_f32(x) -> np.ndarray:
    """Coerce to a contiguous float32 array (the package's storage dtype)."""
    return np.ascontiguousarray(x, dtype=np.float32)


def require_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two rank-2 arrays, [m x k] @ [k x n] -> [m x n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return require_finite("matmul", out)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Divide each row by max(||row||, eps); zero rows pass through as zero.

    Norms accumulate at float64 so normalized rows stay unit within 1e-6
    even for wide float32 rows.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a rank-2 array, got rank {x.ndim}")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x, dtype=np.float64))
    scale = 1.0 / np.maximum(norms, NORM_EPS)
    out = (x * scale[:, None]).astype(x.dtype, copy=False)
    return require_finite("l2_normalize_rows", out)


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the target class, plus its gradient.

    The softmax is computed with max subtraction at float64, so tiny losses
    (well below float32 resolution around 1.0) come out accurately. The
    gradient is returned in the dtype of `logits`.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be rank-2 [batch x classes], got rank {logits.ndim}")
    n_batch, n_classes = logits.shape
    if n_batch == 0:
        raise DimensionError("empty batch")
    targets = np.asarray(targets)
    if targets.shape != (n_batch,):
        raise DimensionError(f"targets shape {targets.shape} does not match batch {n_batch}")
    if targets.dtype.kind not in "iu":
        raise IndexError(f"targets must be integer class indices, got dtype {targets.dtype}")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise IndexError(f"target out of range [0, {n_classes})")

    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    exp_z = np.exp(z)
    sum_exp = exp_z.sum(axis=1, keepdims=True)
    rows = np.arange(n_batch)
    log_p_target = z[rows, targets] - np.log(sum_exp[:, 0])
    loss = float(np.mean(-log_p_target))

    grad = exp_z / sum_exp
    grad[rows, targets] -= 1.0
    grad = (grad / n_batch).astype(logits.dtype)
    if not np.isfinite(loss):
        raise NonFiniteError("softmax_cross_entropy produced a non-finite loss")
    return loss, require_finite("softmax_cross_entropy", grad)


@dataclass
class AdamState:
    """Optimizer state for one parameter tensor."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adam_state(param: np.ndarray, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
                    beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AdamState:
    return AdamState(
        first_moment=np.zeros_like(param),
        second_moment=np.zeros_like(param),
        step_count=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns (new_param, new_state); inputs
    are not mutated."""
    if param.shape != grad.shape:
        raise DimensionError(f"grad shape {grad.shape} does not match param {param.shape}")
    if state.first_moment.shape != param.shape or state.second_moment.shape != param.shape:
        raise DimensionError("optimizer moment shapes do not match the parameter")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    require_finite("adam_step", new_param)
    return new_param, replace(state, first_moment=m, second_moment=v, step_count=t)
