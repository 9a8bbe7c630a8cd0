"""
QuantumLeak Lab - Optimization Module

This module contains the training maths shared by the victim and the substitute
models: the NLL and Huber losses, exact parameter-shift gradients of the circuit
outputs chained through the loss, and the Adam optimizer with decoupled weight decay.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from qnn_model import CompiledCircuit, Noise, QnnModel, amplitude_encode_batch, compile_model, forward_batch
from quantum_sim import Circuit, GateOp

LOSS_VARIANTS = ("nll", "huber")
TARGET_MODES = ("hard", "soft")

_C_PLUS = (np.sqrt(2) + 1) / (4 * np.sqrt(2))
_C_MINUS = (np.sqrt(2) - 1) / (4 * np.sqrt(2))

# (coefficient, shift) pairs: df/dtheta = sum coeff * f(theta + shift)
_TWO_TERM_RULE = ((0.5, np.pi / 2), (-0.5, -np.pi / 2))
_CONTROLLED_RULE = (
    (_C_PLUS, np.pi / 2),
    (-_C_PLUS, -np.pi / 2),
    (-_C_MINUS, 3 * np.pi / 2),
    (_C_MINUS, -3 * np.pi / 2),
)
SHIFT_RULES = {
    "RX": _TWO_TERM_RULE,
    "RY": _TWO_TERM_RULE,
    "RZ": _TWO_TERM_RULE,
    "ROT": _TWO_TERM_RULE,
    "CRX": _CONTROLLED_RULE,
}


@dataclass(frozen=True)
class LossKind:
    """
    Loss selection.

    variant: 'nll' or 'huber'
    delta: Huber threshold
    target: 'hard' trains on argmax labels of the oracle output, 'soft' on the raw
        vectors themselves; defaults to hard for NLL and soft for Huber
    """
    variant: str = "nll"
    delta: float = 1.0
    target: Optional[str] = None

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"Unknown loss '{self.variant}'. Available: {', '.join(LOSS_VARIANTS)}")
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValueError(f"Huber delta must be positive, got {self.delta}")
        if self.target is None:
            object.__setattr__(self, "target", "hard" if self.variant == "nll" else "soft")
        if self.target not in TARGET_MODES:
            raise ValueError(f"Unknown target mode '{self.target}'. Available: {', '.join(TARGET_MODES)}")

    @property
    def tag(self) -> str:
        """Single-letter scheme suffix: N for NLL, H for Huber."""
        return "N" if self.variant == "nll" else "H"


def huber(a, delta: float = 1.0):
    """
    Huber loss of a residual (scalar or array).

    Quadratic a^2/2 inside |a| <= delta and linear delta * (|a| - delta/2) outside.
    """
    if delta <= 0:
        raise ValueError(f"Huber delta must be positive, got {delta}")
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("Huber residual must be finite")
    abs_a = np.abs(a)
    out = np.where(abs_a <= delta, 0.5 * a ** 2, delta * (abs_a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_derivative(a, delta: float = 1.0):
    a = np.asarray(a, dtype=float)
    out = np.clip(a, -delta, delta)
    return float(out) if out.ndim == 0 else out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def target_matrix(targets, n_classes: int, kind: LossKind) -> np.ndarray:
    """
    Turn oracle responses or labels into a (B, K) target matrix.

    Args:
        targets: Integer labels of shape (B,) or raw probability vectors of shape (B, K)
        n_classes: Output width K of the model
        kind: Loss selection; hard targets become one-hot rows of the argmax label

    Raises:
        ValueError: on labels out of range or width mismatch
    """
    t = np.asarray(targets)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if np.any(t < 0) or np.any(t >= n_classes):
            raise ValueError(f"Hard labels must be in 0..{n_classes - 1}, got {sorted(set(t.tolist()))}")
        return np.eye(n_classes)[t]
    t = np.atleast_2d(t.astype(float))
    if t.shape[1] != n_classes:
        raise ValueError(f"Target length {t.shape[1]} does not match prediction length {n_classes}")
    if not np.all(np.isfinite(t)):
        raise ValueError("Targets must be finite")
    if kind.target == "hard":
        return np.eye(n_classes)[np.argmax(t, axis=1)]
    return t


def batch_loss(predictions: np.ndarray, targets: np.ndarray, kind: LossKind) -> np.ndarray:
    """Per-sample losses for (B, K) predictions against a (B, K) target matrix."""
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    if p.shape != t.shape:
        raise ValueError(f"Prediction shape {p.shape} does not match target shape {t.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("Predictions must be finite")
    if kind.variant == "nll":
        return -np.sum(t * _log_softmax(p), axis=1)
    return np.mean(huber(p - t, kind.delta), axis=1)


def loss(prediction: Sequence[float], target, kind: LossKind) -> float:
    """
    Loss of one raw probability vector.

    Args:
        prediction: Raw probability vector
        target: Hard label (int) or soft raw vector
        kind: Loss selection

    Returns:
        NLL: -sum_i t_i log softmax(prediction)_i (= -log softmax[label] for hard labels);
        Huber: mean over components of huber(prediction_i - target_i, delta)
    """
    p = np.asarray(prediction, dtype=float)
    if isinstance(target, (int, np.integer)):
        t = target_matrix(np.array([target]), p.shape[0], kind)
    else:
        t = target_matrix(np.atleast_2d(target), p.shape[0], kind)
    return float(batch_loss(p[None, :], t, kind)[0])


def loss_gradient(predictions: np.ndarray, targets: np.ndarray, kind: LossKind) -> np.ndarray:
    """d(mean batch loss)/d(predictions), shape (B, K)."""
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    batch = p.shape[0]
    if kind.variant == "nll":
        sm = np.exp(_log_softmax(p))
        return (sm * np.sum(t, axis=1, keepdims=True) - t) / batch
    return huber_derivative(p - t, kind.delta) / (batch * p.shape[1])


# ---------------------------------------------------------------------------
# Parameter-shift gradients
# ---------------------------------------------------------------------------

def _shifted(op: GateOp, slot: int, shift: float) -> GateOp:
    params = list(op.params)
    params[slot] += shift
    return replace(op, params=tuple(params))


def probs_jacobian(compiled: CompiledCircuit, states: np.ndarray,
                   readout_qubits: Sequence[int]) -> np.ndarray:
    """
    Exact Jacobian of the readout probabilities with respect to every trainable
    parameter of the compiled circuit.

    Returns:
        Array of shape (P, B, 2^k)
    """
    circuit = compiled.circuit
    index = circuit.trainable_index
    jac = []
    for i, j in index:
        op = circuit.ops[i]
        if op.kind not in SHIFT_RULES:
            raise ValueError(f"No shift rule for gate {op.kind}")
        d = 0.0
        for coeff, shift in SHIFT_RULES[op.kind]:
            total = compiled.with_op(i, _shifted(op, j, shift))
            d = d + coeff * compiled.probs(states, readout_qubits, total=total)
        jac.append(d)
    if not jac:
        raise ValueError("Circuit has no trainable parameters")
    return np.stack(jac)


def circuit_probs_jacobian(circuit: Circuit, states: np.ndarray, readout_qubits: Sequence[int],
                           noise: Noise = None) -> np.ndarray:
    return probs_jacobian(CompiledCircuit(circuit, noise), states, readout_qubits)


def loss_and_grad(model: QnnModel, features: np.ndarray, targets, kind: LossKind,
                  noise: Noise = None) -> Tuple[float, np.ndarray]:
    """
    Mean batch loss and its parameter-shift gradient.

    Args:
        model: Model being trained
        features: Array of shape (B, F)
        targets: Labels (B,) or raw oracle vectors (B, K)
        kind: Loss selection
        noise: Optional (profile, t); gradients are then taken against the noisy output

    Returns:
        Tuple of (loss, gradient vector of length P)

    Raises:
        ValueError: when the loss or any shifted evaluation is non-finite
    """
    states = amplitude_encode_batch(features, model.n_qubits)
    compiled = compile_model(model, noise)
    preds = compiled.probs(states, model.readout_qubits)
    t = target_matrix(targets, preds.shape[1], kind)
    value = float(np.mean(batch_loss(preds, t, kind)))
    if not np.isfinite(value):
        raise ValueError(f"Non-finite loss {value}")
    jac = probs_jacobian(compiled, states, model.readout_qubits)
    if not np.all(np.isfinite(jac)):
        raise ValueError("Non-finite output during parameter shifts")
    dl_dp = loss_gradient(preds, t, kind)
    grad = np.einsum("pbk,bk->p", jac, dl_dp)
    return value, grad


def param_shift_grad(model: QnnModel, features: np.ndarray, targets, kind: LossKind,
                     noise: Noise = None) -> np.ndarray:
    return loss_and_grad(model, features, targets, kind, noise)[1]


def finite_difference_grad(model: QnnModel, features: np.ndarray, targets, kind: LossKind,
                           noise: Noise = None, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the mean batch loss, for checking gradients."""
    def value(theta):
        preds = forward_batch(model.with_theta(theta), features, noise)
        t = target_matrix(targets, preds.shape[1], kind)
        return float(np.mean(batch_loss(preds, t, kind)))

    grad = np.zeros(len(model.theta))
    for k in range(len(model.theta)):
        step = np.zeros(len(model.theta))
        step[k] = h
        grad[k] = (value(model.theta + step) - value(model.theta - step)) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-3, weight_decay: float = 1e-4) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, weight_decay)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """
    One Adam update with decoupled weight decay.

    theta <- theta - lr * wd * theta is applied first, then the bias-corrected
    moment update. Inputs are not modified.

    Raises:
        ValueError: on length mismatch or non-finite gradients
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"Shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise ValueError("Non-finite gradient passed to adam_step")
    step = state.step + 1
    decayed = params - state.lr * state.weight_decay * params
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    new_params = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)
