"""
QuantumLeak Lab - QNN Model Module

This module assembles quantum neural networks as encoder -> ansatz -> measurement:
amplitude encoding, the ansatz zoo (L1/L2/L3, A1, A2), ideal and noisy forward
passes, prediction, the Meyer-Wallach entanglement metric and checkpoint files.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from noise_model import (
    NoiseProfile,
    apply_readout_error,
    noisy_gate_superop,
    profile_at,
)
from quantum_sim import (
    PURE,
    Circuit,
    GateOp,
    QuantumState,
    bind_parameters,
    circuit_unitary,
    gate_matrix,
    marginal_probs,
)

ANSATZ_FAMILIES = ("L", "A1", "A2")
DEFAULT_N_QUBITS = 4
DEFAULT_BLOCKS = 2
CHECKPOINT_HEADER = "qnn-checkpoint v1"

Noise = Optional[Tuple[NoiseProfile, float]]


@dataclass(frozen=True)
class AnsatzSpec:
    family: str = "L"
    layers: int = 2
    n_qubits: int = DEFAULT_N_QUBITS

    def __post_init__(self):
        if self.family not in ANSATZ_FAMILIES:
            raise ValueError(f"Unknown ansatz family '{self.family}'. Available: {', '.join(ANSATZ_FAMILIES)}")
        if self.family == "L" and self.layers not in (1, 2, 3):
            raise ValueError(f"L family supports 1-3 layers, got {self.layers}")
        if self.layers < 1:
            raise ValueError(f"layers must be positive, got {self.layers}")
        if not 2 <= self.n_qubits <= 6:
            raise ValueError(f"n_qubits must be in 2..6, got {self.n_qubits}")

    @property
    def name(self) -> str:
        return f"L{self.layers}" if self.family == "L" else self.family


def parse_ansatz(name: str, n_qubits: int = DEFAULT_N_QUBITS) -> AnsatzSpec:
    """Parse a zoo name such as 'L2', 'A1' or 'A2'."""
    key = name.strip().upper()
    if key in ("A1", "A2"):
        return AnsatzSpec(key, DEFAULT_BLOCKS, n_qubits)
    if len(key) == 2 and key[0] == "L" and key[1].isdigit():
        return AnsatzSpec("L", int(key[1]), n_qubits)
    raise ValueError(f"Unknown ansatz '{name}'. Available: L1, L2, L3, A1, A2")


def _rotation_layer(kind: str, n: int) -> List[GateOp]:
    return [GateOp(kind, (q,), (0.0,), True) for q in range(n)]


def _ring(kind: str, n: int) -> List[GateOp]:
    params = (0.0,) if kind == "CRX" else ()
    return [GateOp(kind, (i, (i + 1) % n), params, kind == "CRX") for i in range(n)]


@lru_cache(maxsize=32)
def build_ansatz(spec: AnsatzSpec) -> Circuit:
    """
    Build the gate template of an ansatz with every trainable angle at 0.

    L family, per layer: RZ, RY, RZ on every qubit, then a CRX ring i -> (i+1) mod n.
    A1, per block: RX, RZ, RY on every qubit, then a CNOT ring.
    A2, per block: RY on every qubit, then a CRX ring.
    """
    n = spec.n_qubits
    ops: List[GateOp] = []
    for _ in range(spec.layers):
        if spec.family == "L":
            ops += _rotation_layer("RZ", n) + _rotation_layer("RY", n) + _rotation_layer("RZ", n)
            ops += _ring("CRX", n)
        elif spec.family == "A1":
            ops += _rotation_layer("RX", n) + _rotation_layer("RZ", n) + _rotation_layer("RY", n)
            ops += _ring("CNOT", n)
        else:
            ops += _rotation_layer("RY", n) + _ring("CRX", n)
    return Circuit(n, tuple(ops))


def parameter_count(spec: AnsatzSpec) -> int:
    return build_ansatz(spec).n_trainable


@dataclass(frozen=True)
class QnnModel:
    ansatz: AnsatzSpec
    theta: np.ndarray = field(repr=False)
    readout_qubits: Tuple[int, ...] = (0,)
    encoder: str = "amplitude"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        expected = parameter_count(self.ansatz)
        if theta.shape != (expected,):
            raise ValueError(f"{self.ansatz.name} needs {expected} parameters, got shape {theta.shape}")
        if self.encoder != "amplitude":
            raise ValueError(f"Unsupported encoder '{self.encoder}'")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "readout_qubits", tuple(int(q) for q in self.readout_qubits))

    @property
    def n_qubits(self) -> int:
        return self.ansatz.n_qubits

    def with_theta(self, theta: np.ndarray) -> "QnnModel":
        return replace(self, theta=theta)

    def circuit(self) -> Circuit:
        return bind_parameters(build_ansatz(self.ansatz), self.theta)


def init_model(spec: AnsatzSpec, seed: int, sigma: float = 0.1,
               readout_qubits: Sequence[int] = (0,)) -> QnnModel:
    """Gaussian initialisation N(0, sigma^2) of every trainable angle."""
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, sigma, size=parameter_count(spec))
    return QnnModel(spec, theta, tuple(readout_qubits))


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def amplitude_encode_batch(features: np.ndarray, n_qubits: int) -> np.ndarray:
    """
    Zero-pad each row to 2^n entries and L2-normalise it.

    Raises:
        ValueError: on oversized rows, all-zero rows or non-finite values
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    dim = 2 ** n_qubits
    if x.shape[1] < 1 or x.shape[1] > dim:
        raise ValueError(f"Feature length {x.shape[1]} does not fit {n_qubits} qubits (max {dim})")
    if not np.all(np.isfinite(x)):
        raise ValueError("Features must be finite")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("Cannot amplitude-encode an all-zero feature vector")
    states = np.zeros((x.shape[0], dim), dtype=complex)
    states[:, :x.shape[1]] = x / norms[:, None]
    return states


def amplitude_encode(features: Sequence[float], n_qubits: int) -> QuantumState:
    return QuantumState(PURE, n_qubits, amplitude_encode_batch(features, n_qubits)[0])


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

class CompiledCircuit:
    """
    Per-gate linear maps of a bound circuit with cached prefix/suffix products.

    Ideal circuits use 2^n x 2^n unitaries acting on statevectors; noisy circuits
    use 4^n x 4^n superoperators acting on row-major vec(rho). Replacing a single
    gate (as the parameter-shift rule does) then costs one gate map and two
    matrix products.
    """

    def __init__(self, circuit: Circuit, noise: Noise = None, cache_products: bool = True):
        self.circuit = circuit
        self.n_qubits = circuit.n_qubits
        self.noise = noise
        if noise is not None:
            profile, t = noise
            self.readout, self.spec = profile_at(profile, t)
            self.drift, self.t = profile.drift, t
        dim = 2 ** self.n_qubits if noise is None else 4 ** self.n_qubits
        self.prefix: List[np.ndarray] = []
        self.suffix: List[np.ndarray] = []
        total = np.eye(dim, dtype=complex)
        maps = []
        for op in circuit.ops:
            m = self.op_map(op)
            if cache_products:
                maps.append(m)
                self.prefix.append(total)
            total = m @ total
        self.total = total
        if cache_products:
            self.suffix = [np.eye(dim, dtype=complex)] * len(maps)
            for i in range(len(maps) - 2, -1, -1):
                self.suffix[i] = self.suffix[i + 1] @ maps[i + 1]

    def op_map(self, op: GateOp) -> np.ndarray:
        if self.noise is None:
            return gate_matrix(op, self.n_qubits)
        return noisy_gate_superop(op, self.n_qubits, self.spec, self.t, self.drift)

    def with_op(self, position: int, op: GateOp) -> np.ndarray:
        """Whole-circuit map with the op at the given position replaced."""
        return self.suffix[position] @ self.op_map(op) @ self.prefix[position]

    def probs(self, states: np.ndarray, readout_qubits: Sequence[int],
              total: Optional[np.ndarray] = None) -> np.ndarray:
        """Readout probabilities for a batch of encoded statevectors."""
        total = self.total if total is None else total
        if self.noise is None:
            out = states @ total.T
            full = np.abs(out) ** 2
        else:
            rhos = np.einsum("bi,bj->bij", states, states.conj()).reshape(states.shape[0], -1)
            out = rhos @ total.T
            dim = 2 ** self.n_qubits
            full = np.real(out.reshape(-1, dim, dim).diagonal(axis1=1, axis2=2))
        probs = marginal_probs(np.clip(full, 0.0, None), self.n_qubits, readout_qubits)
        if self.noise is not None:
            probs = apply_readout_error(probs, self.readout, readout_qubits)
        return probs


def compile_model(model: QnnModel, noise: Noise = None, cache_products: bool = True) -> CompiledCircuit:
    return CompiledCircuit(model.circuit(), noise, cache_products)


def forward_batch(model: QnnModel, features: np.ndarray, noise: Noise = None) -> np.ndarray:
    """
    Raw probability vectors for a batch of feature rows.

    Args:
        model: QNN to evaluate
        features: Array of shape (B, F) with F <= 2^n
        noise: Optional (profile, t); when given the circuit runs noisily and
            readout error is applied

    Returns:
        Array of shape (B, 2^k) for k readout qubits
    """
    states = amplitude_encode_batch(features, model.n_qubits)
    return compile_model(model, noise, cache_products=False).probs(states, model.readout_qubits)


def forward(model: QnnModel, features: Sequence[float], noise: Noise = None) -> np.ndarray:
    return forward_batch(model, np.atleast_2d(features), noise)[0]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def predict(raw: Sequence[float]) -> int:
    """argmax of softmax(raw); ties go to the lowest index."""
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("Raw output must be finite")
    return int(np.argmax(softmax(raw)))


def predict_batch(raw: np.ndarray) -> np.ndarray:
    return np.argmax(softmax(np.atleast_2d(raw), axis=1), axis=1)


# ---------------------------------------------------------------------------
# Entanglement
# ---------------------------------------------------------------------------

def single_qubit_purities(psi: np.ndarray, n_qubits: int) -> np.ndarray:
    tensor = np.asarray(psi).reshape((2,) * n_qubits)
    purities = np.empty(n_qubits)
    for k in range(n_qubits):
        m = np.moveaxis(tensor, k, 0).reshape(2, -1)
        rho_k = m @ m.conj().T
        purities[k] = float(np.real(np.sum(np.abs(rho_k) ** 2)))
    return purities


def meyer_wallach_circuit(circuit: Circuit, n_samples: int, seed: int) -> float:
    """
    Mean Meyer-Wallach measure (2/n) * sum_k (1 - tr rho_k^2) of the circuit
    output on |0...0>, with trainable angles drawn from Uniform(0, 2 pi).
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    n = circuit.n_qubits
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_samples):
        theta = rng.uniform(0.0, 2 * np.pi, size=circuit.n_trainable)
        bound = bind_parameters(circuit, theta)
        psi = circuit_unitary(bound)[:, 0]
        total += (2.0 / n) * float(np.sum(1.0 - single_qubit_purities(psi, n)))
    return float(min(max(total / n_samples, 0.0), 1.0))


def meyer_wallach(spec: AnsatzSpec, n_samples: int = 2000, seed: int = 0) -> float:
    return meyer_wallach_circuit(build_ansatz(spec), n_samples, seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_text(model: QnnModel, config_hash: str = "") -> str:
    lines = [
        CHECKPOINT_HEADER,
        f"ansatz {model.ansatz.name}",
        f"n_qubits {model.n_qubits}",
        f"encoder {model.encoder}",
        f"readout {','.join(str(q) for q in model.readout_qubits)}",
        f"config_hash {config_hash or '-'}",
        "theta " + ",".join(format(float(v), ".17g") for v in model.theta),
    ]
    return "\n".join(lines) + "\n"


def checkpoint_from_text(text: str) -> Tuple[QnnModel, str]:
    """
    Parse a checkpoint.

    Returns:
        Tuple of (model, training config hash)
    """
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"Not a checkpoint file (expected header '{CHECKPOINT_HEADER}')")
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        key, _, value = line.partition(" ")
        if not value:
            raise ValueError(f"line {lineno}: missing value for '{key}'")
        fields[key] = value
    for key in ("ansatz", "n_qubits", "readout", "theta"):
        if key not in fields:
            raise ValueError(f"Checkpoint is missing '{key}'")
    spec = parse_ansatz(fields["ansatz"], int(fields["n_qubits"]))
    theta = np.array([float(v) for v in fields["theta"].split(",")])
    readout = tuple(int(q) for q in fields["readout"].split(","))
    model = QnnModel(spec, theta, readout, fields.get("encoder", "amplitude"))
    config_hash = fields.get("config_hash", "-")
    return model, "" if config_hash == "-" else config_hash


def save_checkpoint(model: QnnModel, path: str, config_hash: str = "") -> str:
    with open(path, "w") as f:
        f.write(checkpoint_to_text(model, config_hash))
    return path


def load_checkpoint(path: str) -> Tuple[QnnModel, str]:
    with open(path) as f:
        return checkpoint_from_text(f.read())
