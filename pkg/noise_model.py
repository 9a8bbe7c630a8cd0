"""
QuantumLeak Lab - Noise Model Module

This module contains the NISQ noise channels (depolarizing gate noise, readout
confusion, coherent over-rotation) and the time-varying noise profile that the
cloud oracle is driven by. Rates are anchored on published device calibrations:

    preset     SPAM     1Q-gate   2Q-gate
    ionq       0.50%    0.020%    0.40%
    auckland   0.34%    0.197%    2.44%
    kolkata    0.35%    0.177%    2.87%

Virtual time is measured in hours. A profile's drift schedule turns a time t
into a multiplicative rate scale s(t) and an additive coherent offset eps(t).
"""

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from quantum_sim import (
    MIXED,
    PAULIS,
    Circuit,
    GateOp,
    QuantumState,
    apply_gate,
    embed,
    gate_matrix,
    to_density,
)

MAX_SCALE = 4.0
MAX_EPSILON0 = np.pi / 8

DEVICE_RATES = {
    "ionq": {"spam": 0.0050, "p1": 0.00020, "p2": 0.0040},
    "auckland": {"spam": 0.0034, "p1": 0.00197, "p2": 0.0244},
    "kolkata": {"spam": 0.0035, "p1": 0.00177, "p2": 0.0287},
}
NOISE_PRESETS = ("auckland", "kolkata", "ionq", "none")

DEFAULT_EPSILON0 = 0.01
DEFAULT_DRIFT_AMPLITUDE = 0.5
DEFAULT_DRIFT_JITTER = 0.1
DEFAULT_COHERENT_DRIFT = 0.005

REQUIRED_PROFILE_KEYS = (
    "readout.p01", "readout.p10", "gate.p1", "gate.p2",
    "coherent.eps0", "drift.amplitude", "drift.seed",
)


@dataclass(frozen=True)
class ReadoutConfusion:
    """
    Per-qubit readout confusion.

    p01[q] = P(read 1 | prepared 0) and p10[q] = P(read 0 | prepared 1). A
    length-1 tuple applies the same rates to every qubit.
    """
    p01: Tuple[float, ...] = (0.0,)
    p10: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        p01 = tuple(float(p) for p in self.p01)
        p10 = tuple(float(p) for p in self.p10)
        if len(p01) != len(p10) or not p01:
            raise ValueError("p01 and p10 must be non-empty and of equal length")
        for p in p01 + p10:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"Readout error rate {p} outside [0, 1]")
        object.__setattr__(self, "p01", p01)
        object.__setattr__(self, "p10", p10)

    @classmethod
    def uniform(cls, p01: float, p10: float) -> "ReadoutConfusion":
        return cls((p01,), (p10,))

    @classmethod
    def from_matrices(cls, matrices: Sequence[Sequence[Sequence[float]]]) -> "ReadoutConfusion":
        """Build from row-stochastic 2x2 matrices with entry [i][j] = P(read j | prepared i)."""
        p01, p10 = [], []
        for m in matrices:
            m = np.asarray(m, dtype=float)
            if m.shape != (2, 2):
                raise ValueError(f"Confusion matrix must be 2x2, got {m.shape}")
            if np.any(m < 0) or np.any(m > 1):
                raise ValueError("Confusion matrix entries must lie in [0, 1]")
            if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError("Confusion matrix rows must sum to 1")
            p01.append(m[0, 1])
            p10.append(m[1, 0])
        return cls(tuple(p01), tuple(p10))

    def matrix(self, qubit: int) -> np.ndarray:
        if len(self.p01) == 1:
            a, b = self.p01[0], self.p10[0]
        elif 0 <= qubit < len(self.p01):
            a, b = self.p01[qubit], self.p10[qubit]
        else:
            raise ValueError(f"No readout confusion configured for qubit {qubit}")
        return np.array([[1.0 - a, a], [b, 1.0 - b]])

    def scaled(self, s: float) -> "ReadoutConfusion":
        return ReadoutConfusion(
            tuple(min(max(s * p, 0.0), 1.0) for p in self.p01),
            tuple(min(max(s * p, 0.0), 1.0) for p in self.p10),
        )


@dataclass(frozen=True)
class GateNoiseSpec:
    p1: float = 0.0
    p2: float = 0.0
    epsilon0: float = 0.0

    def __post_init__(self):
        for name in ("p1", "p2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if abs(self.epsilon0) >= MAX_EPSILON0:
            raise ValueError(f"|epsilon0| must be below pi/8, got {self.epsilon0}")


@dataclass(frozen=True)
class DriftSchedule:
    """
    s(t) = base + amplitude*sin(2 pi t / period) + jitter_block(t), clamped to [0, 4]
    eps(t) = coherent_amplitude*sin(2 pi t / period)

    jitter_block(t) is uniform in [-jitter, jitter], constant on each block of
    block_hours and reproducible from the profile seed.
    """
    base: float = 1.0
    amplitude: float = DEFAULT_DRIFT_AMPLITUDE
    jitter: float = DEFAULT_DRIFT_JITTER
    coherent_amplitude: float = DEFAULT_COHERENT_DRIFT
    period_hours: float = 24.0
    block_hours: float = 6.0

    @classmethod
    def constant(cls, scale: float) -> "DriftSchedule":
        return cls(base=scale, amplitude=0.0, jitter=0.0, coherent_amplitude=0.0)

    def block_jitter(self, t: float, seed: int) -> float:
        if self.jitter == 0.0:
            return 0.0
        block = int(np.floor(t / self.block_hours))
        rng = np.random.default_rng([abs(int(seed)), block])
        return float(rng.uniform(-self.jitter, self.jitter))

    def scale(self, t: float, seed: int = 0) -> float:
        value = self.base + self.amplitude * np.sin(2 * np.pi * t / self.period_hours)
        value += self.block_jitter(t, seed)
        return float(min(max(value, 0.0), MAX_SCALE))

    def coherent(self, t: float) -> float:
        return float(self.coherent_amplitude * np.sin(2 * np.pi * t / self.period_hours))


@dataclass(frozen=True)
class NoiseProfile:
    readout: ReadoutConfusion = field(default_factory=ReadoutConfusion)
    gate: GateNoiseSpec = field(default_factory=GateNoiseSpec)
    drift: DriftSchedule = field(default_factory=lambda: DriftSchedule.constant(0.0))
    seed: int = 0
    name: str = "custom"


@dataclass
class NoiseClock:
    """Virtual time in hours; it only ever moves forward."""
    t: float = 0.0

    def advance_to(self, t: float) -> float:
        if t < self.t:
            raise ValueError(f"Clock cannot move backwards from {self.t} to {t}")
        self.t = float(t)
        return self.t

    def advance(self, hours: float) -> float:
        if hours < 0:
            raise ValueError(f"Clock cannot advance by a negative amount: {hours}")
        return self.advance_to(self.t + hours)


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def noise_preset(name: str, seed: int = 0) -> NoiseProfile:
    """
    Return one of the shipped profiles: auckland, kolkata, ionq or none.

    Raises:
        ValueError: for an unknown preset name
    """
    key = name.lower()
    if key == "none":
        return NoiseProfile(seed=seed, name="none")
    if key not in DEVICE_RATES:
        raise ValueError(f"Unknown noise preset '{name}'. Available: {', '.join(NOISE_PRESETS)}")
    rates = DEVICE_RATES[key]
    return NoiseProfile(
        readout=ReadoutConfusion.uniform(rates["spam"], rates["spam"]),
        gate=GateNoiseSpec(rates["p1"], rates["p2"], DEFAULT_EPSILON0),
        drift=DriftSchedule(),
        seed=seed,
        name=key,
    )


def load_noise_profile(path: str) -> NoiseProfile:
    """
    Load a profile from a key=value file.

    Required keys: readout.p01, readout.p10, gate.p1, gate.p2, coherent.eps0,
    drift.amplitude, drift.seed. Optional: drift.base, drift.jitter,
    coherent.drift, name.

    Raises:
        ValueError: on a missing key or an unparsable value
    """
    values = dotenv_values(path)
    missing = [k for k in REQUIRED_PROFILE_KEYS if values.get(k) in (None, "")]
    if missing:
        raise ValueError(f"{path}: missing noise profile keys: {', '.join(missing)}")

    def number(key: str, default: Optional[float] = None) -> float:
        raw = values.get(key)
        if raw in (None, ""):
            return default
        try:
            return float(raw)
        except ValueError as e:
            raise ValueError(f"{path}: {key}: not a number: {raw!r}") from e

    return NoiseProfile(
        readout=ReadoutConfusion.uniform(number("readout.p01"), number("readout.p10")),
        gate=GateNoiseSpec(number("gate.p1"), number("gate.p2"), number("coherent.eps0")),
        drift=DriftSchedule(
            base=number("drift.base", 1.0),
            amplitude=number("drift.amplitude"),
            jitter=number("drift.jitter", DEFAULT_DRIFT_JITTER),
            coherent_amplitude=number("coherent.drift", DEFAULT_COHERENT_DRIFT),
        ),
        seed=int(number("drift.seed")),
        name=values.get("name") or "custom",
    )


def profile_at(profile: NoiseProfile, t: float) -> Tuple[ReadoutConfusion, GateNoiseSpec]:
    """
    Instantiate the rates of a profile at virtual time t.

    Returns:
        Tuple of (readout confusion, gate noise spec) with p1, p2 and readout
        rates scaled by s(t) and clamped to [0, 1]
    """
    if t < 0:
        raise ValueError(f"Virtual time must be non-negative, got {t}")
    s = profile.drift.scale(t, profile.seed)
    gate = GateNoiseSpec(
        min(s * profile.gate.p1, 1.0),
        min(s * profile.gate.p2, 1.0),
        profile.gate.epsilon0,
    )
    return profile.readout.scaled(s), gate


def coherent_offset(spec: GateNoiseSpec, t: float, drift: Optional[DriftSchedule] = None) -> float:
    return spec.epsilon0 + (drift.coherent(t) if drift is not None else 0.0)


def noise_schedule_table(profile: NoiseProfile, hours: Iterable[float]) -> pd.DataFrame:
    """Instantiated rates of a profile at each requested hour."""
    rows = []
    for t in hours:
        readout, gate = profile_at(profile, t)
        rows.append({
            "hour": float(t),
            "scale": profile.drift.scale(t, profile.seed),
            "readout_p01": readout.p01[0],
            "readout_p10": readout.p10[0],
            "gate_p1": gate.p1,
            "gate_p2": gate.p2,
            "coherent_offset": coherent_offset(gate, t, profile.drift),
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------

def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Probability must lie in [0, 1], got {p}")


@lru_cache(maxsize=64)
def _pauli_strings(n_qubits: int, qubits: Tuple[int, ...]) -> Tuple[np.ndarray, ...]:
    strings = []
    for paulis in product(PAULIS, repeat=len(qubits)):
        strings.append(embed(n_qubits, dict(zip(qubits, paulis))))
    return tuple(strings)


@lru_cache(maxsize=64)
def _twirl_superop(n_qubits: int, qubits: Tuple[int, ...]) -> np.ndarray:
    strings = _pauli_strings(n_qubits, qubits)
    total = sum(np.kron(p, p.conj()) for p in strings)
    twirl = total / len(strings)
    twirl.flags.writeable = False
    return twirl


def _check_depolarize_target(n_qubits: int, qubits: Sequence[int]) -> Tuple[int, ...]:
    qubits = tuple(int(q) for q in qubits)
    if len(qubits) not in (1, 2) or len(set(qubits)) != len(qubits):
        raise ValueError(f"Depolarizing acts on 1 or 2 distinct qubits, got {qubits}")
    for q in qubits:
        if not 0 <= q < n_qubits:
            raise ValueError(f"Qubit index {q} out of range for {n_qubits} qubits")
    return qubits


def depolarize(state: QuantumState, qubits: Sequence[int], p: float) -> QuantumState:
    """
    Depolarize the targeted subsystem: rho -> (1-p) rho + p (I_d/d (x) tr_qubits rho).

    Raises:
        ValueError: on a pure-mode input, p outside [0, 1] or a bad qubit list
    """
    if state.mode != MIXED:
        raise ValueError("depolarize needs a mixed-mode state")
    _check_probability(p)
    qubits = _check_depolarize_target(state.n_qubits, qubits)
    if p == 0.0:
        return state
    rho = state.data
    strings = _pauli_strings(state.n_qubits, qubits)
    twirled = sum(s @ rho @ s.conj().T for s in strings) / len(strings)
    return QuantumState(MIXED, state.n_qubits, (1.0 - p) * rho + p * twirled)


def depolarizing_superop(n_qubits: int, qubits: Sequence[int], p: float) -> np.ndarray:
    """Superoperator of depolarize() acting on row-major vec(rho)."""
    _check_probability(p)
    qubits = _check_depolarize_target(n_qubits, qubits)
    identity = np.eye(4 ** n_qubits, dtype=complex)
    if p == 0.0:
        return identity
    return (1.0 - p) * identity + p * _twirl_superop(n_qubits, qubits)


def unitary_superop(u: np.ndarray) -> np.ndarray:
    """vec(U rho U^dagger) = (U (x) U*) vec(rho) for row-major vectorisation."""
    return np.kron(u, u.conj())


def apply_readout_error(probs: np.ndarray, confusion: ReadoutConfusion,
                        readout_qubits: Sequence[int]) -> np.ndarray:
    """
    Push measured probabilities through the per-qubit confusion matrices.

    Args:
        probs: Probability vector of length 2^k (or a batch of them)
        confusion: Readout confusion rates
        readout_qubits: The k qubits the vector was measured on, in order

    Returns:
        Corrupted probabilities, same shape as probs
    """
    probs = np.asarray(probs, dtype=float)
    k = len(readout_qubits)
    if k == 0 or probs.shape[-1] != 2 ** k:
        raise ValueError(f"Probability length {probs.shape[-1]} does not match {k} readout qubit(s)")
    full = np.array([[1.0]])
    for q in readout_qubits:
        full = np.kron(full, confusion.matrix(q))
    return probs @ full


def perturb_gate(gate: GateOp, spec: GateNoiseSpec, t: float,
                 drift: Optional[DriftSchedule] = None) -> GateOp:
    """
    Add the coherent over-rotation epsilon0 + eps(t) to every angle of a gate.

    Parameterless gates pass through unchanged.
    """
    if not gate.params:
        return gate
    offset = coherent_offset(spec, t, drift)
    if offset == 0.0:
        return gate
    return GateOp(gate.kind, gate.qubits, tuple(p + offset for p in gate.params), gate.trainable)


def _gate_depolarizing_rate(gate: GateOp, spec: GateNoiseSpec) -> float:
    return spec.p1 if len(gate.qubits) == 1 else spec.p2


def run_noisy(circuit: Circuit, initial: QuantumState, profile: NoiseProfile, t: float) -> QuantumState:
    """
    Run a circuit under the profile instantiated at time t.

    Each gate is perturbed coherently, applied, then its qubits are depolarized
    with p1 or p2. Readout error is left to measurement time.
    """
    if circuit.n_qubits != initial.n_qubits:
        raise ValueError(f"Circuit has {circuit.n_qubits} qubits but state has {initial.n_qubits}")
    _, spec = profile_at(profile, t)
    state = to_density(initial)
    for op in circuit.ops:
        state = apply_gate(state, perturb_gate(op, spec, t, profile.drift))
        p = _gate_depolarizing_rate(op, spec)
        if p > 0.0:
            state = depolarize(state, op.qubits, p)
    return state


def noisy_gate_superop(op: GateOp, n_qubits: int, spec: GateNoiseSpec, t: float,
                       drift: Optional[DriftSchedule] = None) -> np.ndarray:
    """Superoperator of one noisy gate: depolarize . (U (x) U*)."""
    u = gate_matrix(perturb_gate(op, spec, t, drift), n_qubits)
    superop = unitary_superop(u)
    p = _gate_depolarizing_rate(op, spec)
    if p > 0.0:
        superop = depolarizing_superop(n_qubits, op.qubits, p) @ superop
    return superop


def noisy_channel(circuit: Circuit, profile: NoiseProfile, t: float) -> np.ndarray:
    """Superoperator of the whole circuit as run_noisy would execute it at time t."""
    _, spec = profile_at(profile, t)
    channel = np.eye(4 ** circuit.n_qubits, dtype=complex)
    for op in circuit.ops:
        channel = noisy_gate_superop(op, circuit.n_qubits, spec, t, profile.drift) @ channel
    return channel


def apply_channel(superop: np.ndarray, rhos: np.ndarray) -> np.ndarray:
    """Apply a superoperator to a batch of density matrices of shape (B, d, d)."""
    rhos = np.asarray(rhos, dtype=complex)
    batch, dim = rhos.shape[0], rhos.shape[-1]
    out = rhos.reshape(batch, dim * dim) @ superop.T
    return out.reshape(batch, dim, dim)
