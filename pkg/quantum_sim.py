"""
QuantumLeak Lab - Quantum Simulation Module

This module contains the pure-state and density-matrix simulator used by every
other part of the lab: quantum states, gate definitions, circuits, measurement
and finite-shot sampling, plus the line-oriented circuit text format.

Qubit 0 is the most significant bit of every basis-state index, so the basis
state |q0 q1 ... q(n-1)> sits at index q0*2^(n-1) + ... + q(n-1).
"""

from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

MAX_QUBITS = 6

GATE_PARAM_COUNTS = {"RX": 1, "RY": 1, "RZ": 1, "ROT": 3, "CRX": 1, "CNOT": 0}
GATE_QUBIT_COUNTS = {"RX": 1, "RY": 1, "RZ": 1, "ROT": 1, "CRX": 2, "CNOT": 2}
ROTATION_KINDS = ("RX", "RY", "RZ", "ROT", "CRX")

PURE = "pure"
MIXED = "mixed"

_I2 = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_P0 = np.array([[1, 0], [0, 0]], dtype=complex)
_P1 = np.array([[0, 0], [0, 1]], dtype=complex)

PAULIS = (_I2, _X, _Y, _Z)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class QuantumState:
    """
    A statevector (pure mode) or density matrix (mixed mode) over n qubits.

    The underlying array is copied and made read-only on construction.
    """
    mode: str
    n_qubits: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.mode not in (PURE, MIXED):
            raise ValueError(f"Unknown state mode: {self.mode}")
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in 1..{MAX_QUBITS}, got {self.n_qubits}")
        dim = 2 ** self.n_qubits
        data = np.asarray(self.data, dtype=complex)
        expected = (dim,) if self.mode == PURE else (dim, dim)
        if data.shape != expected:
            raise ValueError(f"{self.mode} state on {self.n_qubits} qubits needs shape {expected}, got {data.shape}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits


def zero_state(n_qubits: int, mode: str = PURE) -> QuantumState:
    """Return |0...0> in the requested mode."""
    dim = 2 ** n_qubits
    if mode == PURE:
        data = np.zeros(dim, dtype=complex)
        data[0] = 1.0
    else:
        data = np.zeros((dim, dim), dtype=complex)
        data[0, 0] = 1.0
    return QuantumState(mode, n_qubits, data)


def basis_state(bits: str, mode: str = PURE) -> QuantumState:
    """Return the computational basis state written as a bit string, qubit 0 first."""
    n_qubits = len(bits)
    index = int(bits, 2)
    state = np.zeros(2 ** n_qubits, dtype=complex)
    state[index] = 1.0
    pure = QuantumState(PURE, n_qubits, state)
    return pure if mode == PURE else to_density(pure)


def to_density(state: QuantumState) -> QuantumState:
    """Convert a pure state to its density matrix; mixed states pass through."""
    if state.mode == MIXED:
        return state
    psi = state.data
    return QuantumState(MIXED, state.n_qubits, np.outer(psi, psi.conj()))


def check_state(state: QuantumState, atol: float = 1e-10, eig_tol: float = 1e-9) -> None:
    """
    Validate the normalisation invariants of a state.

    Raises:
        ValueError: when the norm, trace, hermiticity or positivity check fails
    """
    if state.mode == PURE:
        norm = float(np.sum(np.abs(state.data) ** 2))
        if abs(norm - 1.0) > atol:
            raise ValueError(f"Pure state norm is {norm}, expected 1")
        return
    rho = state.data
    trace = np.trace(rho)
    if abs(trace - 1.0) > atol:
        raise ValueError(f"Density matrix trace is {trace}, expected 1")
    if np.max(np.abs(rho - rho.conj().T)) > atol:
        raise ValueError("Density matrix is not Hermitian")
    min_eig = float(np.min(np.linalg.eigvalsh((rho + rho.conj().T) / 2)))
    if min_eig < -eig_tol:
        raise ValueError(f"Density matrix has negative eigenvalue {min_eig}")


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateOp:
    kind: str
    qubits: Tuple[int, ...]
    params: Tuple[float, ...] = ()
    trainable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def validate(self, n_qubits: int) -> None:
        """
        Check the gate against a register size.

        Raises:
            ValueError: unknown kind, wrong qubit/param count, out-of-range or repeated qubits
        """
        if self.kind not in GATE_PARAM_COUNTS:
            raise ValueError(f"Unknown gate kind: {self.kind}")
        if len(self.qubits) != GATE_QUBIT_COUNTS[self.kind]:
            raise ValueError(f"{self.kind} acts on {GATE_QUBIT_COUNTS[self.kind]} qubit(s), got {self.qubits}")
        if len(self.params) != GATE_PARAM_COUNTS[self.kind]:
            raise ValueError(f"{self.kind} takes {GATE_PARAM_COUNTS[self.kind]} parameter(s), got {len(self.params)}")
        if len(set(self.qubits)) != len(self.qubits):
            raise ValueError(f"{self.kind} qubit indices must be distinct, got {self.qubits}")
        for q in self.qubits:
            if not 0 <= q < n_qubits:
                raise ValueError(f"Qubit index {q} out of range for {n_qubits} qubits")


def rx(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(theta: float) -> np.ndarray:
    return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=complex)


def rot(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """ROT(alpha, beta, gamma) = RZ(gamma) . RY(beta) . RZ(alpha)."""
    return rz(gamma) @ ry(beta) @ rz(alpha)


_SINGLE_QUBIT = {"RX": rx, "RY": ry, "RZ": rz}


def embed(n_qubits: int, local_ops: Dict[int, np.ndarray]) -> np.ndarray:
    """Tensor 2x2 operators placed on the given qubits with identity elsewhere."""
    factors = [local_ops.get(q, _I2) for q in range(n_qubits)]
    return reduce(np.kron, factors)


def gate_matrix(gate: GateOp, n_qubits: int) -> np.ndarray:
    """Full 2^n x 2^n unitary of a gate on an n-qubit register."""
    gate.validate(n_qubits)
    if gate.kind in _SINGLE_QUBIT:
        return embed(n_qubits, {gate.qubits[0]: _SINGLE_QUBIT[gate.kind](gate.params[0])})
    if gate.kind == "ROT":
        return embed(n_qubits, {gate.qubits[0]: rot(*gate.params)})
    control, target = gate.qubits
    active = rx(gate.params[0]) if gate.kind == "CRX" else _X
    return embed(n_qubits, {control: _P0}) + embed(n_qubits, {control: _P1, target: active})


def apply_gate(state: QuantumState, gate: GateOp) -> QuantumState:
    """
    Apply one gate: U|phi> in pure mode, U rho U^dagger in mixed mode.

    Args:
        state: Input state
        gate: Gate to apply

    Returns:
        New state of the same mode
    """
    u = gate_matrix(gate, state.n_qubits)
    if state.mode == PURE:
        return QuantumState(PURE, state.n_qubits, u @ state.data)
    return QuantumState(MIXED, state.n_qubits, u @ state.data @ u.conj().T)


# ---------------------------------------------------------------------------
# Circuits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Circuit:
    n_qubits: int
    ops: Tuple[GateOp, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            op.validate(self.n_qubits)

    @property
    def trainable_index(self) -> List[Tuple[int, int]]:
        """Map trainable slot -> (op position, param position), in circuit order."""
        return [(i, j) for i, op in enumerate(self.ops) if op.trainable for j in range(len(op.params))]

    @property
    def n_trainable(self) -> int:
        return len(self.trainable_index)


def trainable_values(circuit: Circuit) -> np.ndarray:
    return np.array([circuit.ops[i].params[j] for i, j in circuit.trainable_index], dtype=float)


def bind_parameters(circuit: Circuit, theta: Sequence[float]) -> Circuit:
    """
    Return a copy of the circuit with its trainable parameters replaced by theta.

    Raises:
        ValueError: when len(theta) differs from the trainable parameter count
    """
    index = circuit.trainable_index
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(index),):
        raise ValueError(f"Circuit has {len(index)} trainable parameters, got theta of shape {theta.shape}")
    params = [list(op.params) for op in circuit.ops]
    for slot, (i, j) in enumerate(index):
        params[i][j] = float(theta[slot])
    ops = tuple(replace(op, params=tuple(p)) for op, p in zip(circuit.ops, params))
    return Circuit(circuit.n_qubits, ops)


def run(circuit: Circuit, initial: QuantumState) -> QuantumState:
    """Apply every op of the circuit left to right."""
    if circuit.n_qubits != initial.n_qubits:
        raise ValueError(f"Circuit has {circuit.n_qubits} qubits but state has {initial.n_qubits}")
    state = initial
    for op in circuit.ops:
        state = apply_gate(state, op)
    return state


def circuit_unitary(circuit: Circuit) -> np.ndarray:
    """Product of all gate unitaries (last op leftmost)."""
    u = np.eye(2 ** circuit.n_qubits, dtype=complex)
    for op in circuit.ops:
        u = gate_matrix(op, circuit.n_qubits) @ u
    return u


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

def _check_readout(readout_qubits: Sequence[int], n_qubits: int) -> Tuple[int, ...]:
    readout = tuple(int(q) for q in readout_qubits)
    if not readout:
        raise ValueError("readout_qubits must be non-empty")
    if len(set(readout)) != len(readout):
        raise ValueError(f"readout_qubits must be distinct, got {readout}")
    for q in readout:
        if not 0 <= q < n_qubits:
            raise ValueError(f"Readout qubit {q} out of range for {n_qubits} qubits")
    return readout


def marginal_probs(probs: np.ndarray, n_qubits: int, readout_qubits: Sequence[int]) -> np.ndarray:
    """
    Marginalise full basis probabilities onto the listed qubits.

    Works on a single vector of length 2^n or on a batch with leading dimensions.
    The first listed qubit is the most significant bit of the output index.
    """
    readout = _check_readout(readout_qubits, n_qubits)
    probs = np.asarray(probs, dtype=float)
    lead = probs.shape[:-1]
    offset = len(lead)
    tensor = probs.reshape(lead + (2,) * n_qubits)
    dropped = tuple(offset + q for q in range(n_qubits) if q not in readout)
    reduced = tensor.sum(axis=dropped) if dropped else tensor
    kept = sorted(readout)
    order = tuple(range(offset)) + tuple(offset + kept.index(q) for q in readout)
    reduced = np.transpose(reduced, order)
    return reduced.reshape(lead + (2 ** len(readout),))


def basis_probs(state: QuantumState) -> np.ndarray:
    if state.mode == PURE:
        probs = np.abs(state.data) ** 2
    else:
        probs = np.real(np.diag(state.data))
    return np.clip(probs, 0.0, None)


def measure_probs(state: QuantumState, readout_qubits: Sequence[int]) -> np.ndarray:
    """
    Computational-basis probabilities over the listed qubits.

    Args:
        state: State to measure (not modified)
        readout_qubits: Ordered, distinct qubit indices

    Returns:
        Probability vector of length 2^k
    """
    return marginal_probs(basis_probs(state), state.n_qubits, readout_qubits)


def sample_counts(probs: Sequence[float], shots: int, seed: int) -> np.ndarray:
    """
    Draw a finite-shot count vector from a probability vector.

    Raises:
        ValueError: on non-finite or negative entries, a sum away from 1, or shots < 1
    """
    probs = np.asarray(probs, dtype=float)
    if not np.all(np.isfinite(probs)):
        raise ValueError("Probabilities must be finite")
    if np.any(probs < 0):
        raise ValueError("Probabilities must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"Probabilities sum to {probs.sum()}, expected 1")
    if shots < 1:
        raise ValueError(f"shots must be positive, got {shots}")
    rng = np.random.default_rng(seed)
    return rng.multinomial(int(shots), probs / probs.sum())


# ---------------------------------------------------------------------------
# Circuit text format
#
#   QUBITS 4
#   RZ 0 0.5 trainable
#   CRX 0,1 1.25 trainable
#   CNOT 2,3
# ---------------------------------------------------------------------------

def _format_param(value: float) -> str:
    return format(value, ".17g")


def circuit_to_text(circuit: Circuit) -> str:
    lines = [f"QUBITS {circuit.n_qubits}"]
    for op in circuit.ops:
        parts = [op.kind, ",".join(str(q) for q in op.qubits)]
        if op.params:
            parts.append(",".join(_format_param(p) for p in op.params))
        if op.trainable:
            parts.append("trainable")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def circuit_from_text(text: str) -> Circuit:
    """
    Parse the line-oriented circuit format.

    Raises:
        ValueError: with the offending line number
    """
    n_qubits: Optional[int] = None
    ops = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        try:
            if tokens[0] == "QUBITS":
                n_qubits = int(tokens[1])
                continue
            if n_qubits is None:
                raise ValueError("missing QUBITS header")
            kind = tokens[0]
            qubits = tuple(int(q) for q in tokens[1].split(","))
            rest = tokens[2:]
            trainable = bool(rest) and rest[-1] == "trainable"
            if trainable:
                rest = rest[:-1]
            if len(rest) > 1:
                raise ValueError(f"unexpected tokens {rest[1:]}")
            params = tuple(float(p) for p in rest[0].split(",")) if rest else ()
            op = GateOp(kind, qubits, params, trainable)
            op.validate(n_qubits)
        except (IndexError, ValueError) as e:
            raise ValueError(f"line {lineno}: {e}") from e
        ops.append(op)
    if n_qubits is None:
        raise ValueError("line 1: missing QUBITS header")
    return Circuit(n_qubits, tuple(ops))
