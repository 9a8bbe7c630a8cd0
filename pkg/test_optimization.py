import numpy as np
import pytest

from noise_model import noise_preset
from optimization import (
    AdamState,
    LossKind,
    adam_step,
    circuit_probs_jacobian,
    finite_difference_grad,
    huber,
    huber_derivative,
    loss,
    loss_and_grad,
    param_shift_grad,
    target_matrix,
)
from qnn_model import CompiledCircuit, amplitude_encode_batch, init_model, parse_ansatz
from quantum_sim import Circuit, GateOp, bind_parameters, zero_state


def test_huber_identities():
    assert huber(0.0, 1.0) == 0.0
    assert huber(1.0, 1.0) == 0.5
    assert huber(2.0, 1.0) == 1.5
    grid = np.linspace(-5, 5, 10 ** 4)
    assert np.array_equal(huber(grid, 1.0), huber(-grid, 1.0))
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_huber_is_continuously_differentiable_at_delta(delta):
    eps = 1e-9
    for edge in (delta, -delta):
        assert abs(huber(edge + eps, delta) - huber(edge - eps, delta)) < 1e-8
        assert abs(huber_derivative(edge + eps, delta) - huber_derivative(edge - eps, delta)) < 1e-8
    grid = np.linspace(-3 * delta, 3 * delta, 10 ** 4)
    numeric = np.gradient(huber(grid, delta), grid)
    assert np.max(np.abs(numeric[1:-1] - huber_derivative(grid, delta)[1:-1])) < 1e-3


def test_loss_examples():
    assert loss([10.0, -10.0], 0, LossKind("nll")) == pytest.approx(2.06e-9, rel=1e-2)
    assert loss([0.3, 0.7], [0.3, 0.7], LossKind("huber")) == 0.0
    assert loss([1.0, 0.0], [0.0, 1.0], LossKind("huber", delta=1.0)) == pytest.approx(0.5)


def test_loss_kind_defaults():
    assert LossKind("nll").target == "hard"
    assert LossKind("huber").target == "soft"
    assert LossKind("nll").tag == "N" and LossKind("huber").tag == "H"
    with pytest.raises(ValueError):
        LossKind("mse")
    with pytest.raises(ValueError):
        LossKind("huber", delta=-1.0)


def test_target_matrix():
    kind = LossKind("nll")
    assert np.array_equal(target_matrix(np.array([1, 0]), 2, kind), [[0, 1], [1, 0]])
    assert np.array_equal(target_matrix(np.array([[0.4, 0.6]]), 2, kind), [[0, 1]])
    assert np.allclose(target_matrix(np.array([[0.4, 0.6]]), 2, LossKind("huber")), [[0.4, 0.6]])
    with pytest.raises(ValueError):
        target_matrix(np.array([2]), 2, kind)
    with pytest.raises(ValueError):
        target_matrix(np.array([[0.2, 0.3, 0.5]]), 2, kind)


@pytest.mark.parametrize("ansatz", ["L1", "L2", "A1", "A2"])
@pytest.mark.parametrize("variant", ["nll", "huber"])
def test_param_shift_matches_finite_differences(ansatz, variant):
    rng = np.random.default_rng(sum(map(ord, ansatz + variant)))
    model = init_model(parse_ansatz(ansatz), seed=int(rng.integers(1000)), sigma=1.0)
    features = rng.uniform(0.1, 1.0, size=(4, 8))
    targets = rng.dirichlet([1.0, 1.0], size=4)
    kind = LossKind(variant)
    exact = param_shift_grad(model, features, targets, kind)
    numeric = finite_difference_grad(model, features, targets, kind, h=1e-4)
    scale = max(np.max(np.abs(exact)), 1e-3)
    assert np.max(np.abs(exact - numeric)) / scale <= 1e-4


@pytest.mark.parametrize("ansatz", ["L1", "L2", "A1", "A2"])
@pytest.mark.parametrize("case", range(25))
def test_param_shift_on_random_triples(ansatz, case):
    rng = np.random.default_rng([case, len(ansatz), ord(ansatz[0]), ord(ansatz[1])])
    model = init_model(parse_ansatz(ansatz), seed=int(rng.integers(10 ** 6)), sigma=np.pi)
    features = rng.uniform(0.05, 1.0, size=(1, 8))
    if case % 2:
        kind, targets = LossKind("huber"), rng.dirichlet([1.0, 1.0], size=1)
    else:
        kind, targets = LossKind("nll"), rng.integers(0, 2, size=1)
    exact = param_shift_grad(model, features, targets, kind)
    numeric = finite_difference_grad(model, features, targets, kind, h=1e-4)
    scale = max(np.max(np.abs(exact)), 1e-3)
    assert np.max(np.abs(exact - numeric)) / scale <= 1e-4


def test_param_shift_is_exact_for_noisy_outputs():
    model = init_model(parse_ansatz("L1"), seed=3, sigma=1.0)
    rng = np.random.default_rng(4)
    features = rng.uniform(0.1, 1.0, size=(3, 8))
    labels = np.array([0, 1, 1])
    noise = (noise_preset("auckland", seed=2), 6.0)
    kind = LossKind("nll")
    exact = param_shift_grad(model, features, labels, kind, noise)
    numeric = finite_difference_grad(model, features, labels, kind, noise, h=1e-4)
    scale = max(np.max(np.abs(exact)), 1e-3)
    assert np.max(np.abs(exact - numeric)) / scale <= 1e-4


def test_rot_jacobian_matches_finite_differences():
    circuit = Circuit(2, (
        GateOp("ROT", (0,), (0.3, -1.1, 0.7), True),
        GateOp("CRX", (0, 1), (0.9,), True),
        GateOp("ROT", (1,), (1.2, 0.4, -0.5), True),
    ))
    states = amplitude_encode_batch(np.array([[1.0, 0.5, 0.2, 0.1], [0.2, 0.3, 1.0, 0.4]]), 2)
    jac = circuit_probs_jacobian(circuit, states, [1])
    theta = np.array([0.3, -1.1, 0.7, 0.9, 1.2, 0.4, -0.5])
    h = 1e-5
    for k in range(len(theta)):
        step = np.zeros(len(theta))
        step[k] = h
        plus = CompiledCircuit(bind_parameters(circuit, theta + step)).probs(states, [1])
        minus = CompiledCircuit(bind_parameters(circuit, theta - step)).probs(states, [1])
        assert np.allclose(jac[k], (plus - minus) / (2 * h), atol=1e-8)


def test_constant_output_has_zero_gradient():
    circuit = Circuit(2, (GateOp("RZ", (0,), (0.4,), True), GateOp("RZ", (1,), (1.3,), True)))
    states = zero_state(2).data[None, :]
    jac = circuit_probs_jacobian(circuit, states, [0, 1])
    assert np.max(np.abs(jac)) < 1e-10


def test_gradient_vanishes_at_loss_minimum():
    # one RY on the readout qubit: p(1) = sin^2(theta/2) for input |0>
    circuit = Circuit(1, (GateOp("RY", (0,), (0.0,), True),))
    states = zero_state(1).data[None, :]
    grid = np.linspace(0.0, 2 * np.pi, 2001)
    kind = LossKind("nll")

    def nll(theta):
        p = CompiledCircuit(bind_parameters(circuit, [theta])).probs(states, [0])
        return loss(p[0], 1, kind)

    best = grid[np.argmin([nll(t) for t in grid])]
    p = CompiledCircuit(bind_parameters(circuit, [best])).probs(states, [0])
    jac = circuit_probs_jacobian(bind_parameters(circuit, [best]), states, [0])
    sm = np.exp(p[0]) / np.sum(np.exp(p[0]))
    grad = float(jac[0, 0] @ (sm - [0.0, 1.0]))
    assert best == pytest.approx(np.pi, abs=1e-2)
    assert abs(grad) <= 1e-6


def test_loss_and_grad_rejects_non_finite_targets():
    model = init_model(parse_ansatz("L1"), seed=0)
    with pytest.raises(ValueError):
        loss_and_grad(model, np.ones((2, 8)), np.full((2, 2), np.nan), LossKind("huber"))


def test_adam_zero_gradient():
    params = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros(3, lr=1e-3, weight_decay=0.0)
    out, new_state = adam_step(params, np.zeros(3), state)
    assert np.array_equal(out, params)
    assert new_state.step == 1 and state.step == 0

    state = AdamState.zeros(3, lr=1e-3, weight_decay=1e-4)
    out, _ = adam_step(params, np.zeros(3), state)
    assert np.allclose(out, params * (1 - 1e-7), rtol=0, atol=1e-15)


def test_adam_converges_on_quadratic():
    theta = np.array([0.0])
    state = AdamState.zeros(1, lr=0.1, weight_decay=0.0)
    distances = []
    for _ in range(500):
        theta, state = adam_step(theta, 2 * (theta - 3.0), state)
        distances.append(abs(theta[0] - 3.0))
    assert distances[-1] < 0.1
    assert distances[-1] < distances[20]


def test_adam_rejects_bad_input():
    state = AdamState.zeros(2)
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.array([np.inf, 0.0]), state)
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), state)
