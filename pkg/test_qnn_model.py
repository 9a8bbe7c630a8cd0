import numpy as np
import pytest

from noise_model import apply_readout_error, noise_preset, profile_at, run_noisy
from qnn_model import (
    AnsatzSpec,
    QnnModel,
    amplitude_encode,
    build_ansatz,
    checkpoint_from_text,
    checkpoint_to_text,
    forward,
    forward_batch,
    init_model,
    load_checkpoint,
    meyer_wallach,
    meyer_wallach_circuit,
    parameter_count,
    parse_ansatz,
    predict,
    predict_batch,
    save_checkpoint,
    softmax,
)
from quantum_sim import GATE_QUBIT_COUNTS, Circuit, GateOp, measure_probs
from test_quantum_sim import bell_circuit
from training import evaluate_accuracy


def test_amplitude_encoding():
    e1 = [1, 0, 0, 0, 0, 0, 0, 0]
    assert np.allclose(amplitude_encode(e1, 4).data, np.eye(16)[0])
    pair = amplitude_encode([1, 1, 0, 0, 0, 0, 0, 0], 4).data
    assert np.allclose(pair, (np.eye(16)[0] + np.eye(16)[1]) / np.sqrt(2))
    assert np.allclose(amplitude_encode([2] + [0] * 7, 4).data, amplitude_encode(e1, 4).data)
    with pytest.raises(ValueError):
        amplitude_encode([0.0] * 8, 4)
    with pytest.raises(ValueError):
        amplitude_encode([1.0] * 17, 4)
    with pytest.raises(ValueError):
        amplitude_encode([np.nan] + [1.0] * 7, 4)


def test_parameter_counts():
    assert parameter_count(parse_ansatz("L1")) == 16
    assert parameter_count(parse_ansatz("L2")) == 32
    assert parameter_count(parse_ansatz("L3")) == 48


@pytest.mark.parametrize("name,one_qubit,two_qubit", [("A1", 24, 8), ("A2", 8, 8), ("L2", 24, 8)])
def test_gate_counts(name, one_qubit, two_qubit):
    ops = build_ansatz(parse_ansatz(name)).ops
    assert sum(GATE_QUBIT_COUNTS[op.kind] == 1 for op in ops) == one_qubit
    assert sum(GATE_QUBIT_COUNTS[op.kind] == 2 for op in ops) == two_qubit


def test_l_family_layout():
    ops = build_ansatz(parse_ansatz("L1")).ops
    assert [op.kind for op in ops[:12]] == ["RZ"] * 4 + ["RY"] * 4 + ["RZ"] * 4
    assert [op.qubits for op in ops[12:]] == [(0, 1), (1, 2), (2, 3), (3, 0)]
    assert all(op.kind == "CRX" and op.trainable for op in ops[12:])


def test_parse_ansatz():
    assert parse_ansatz("l3") == AnsatzSpec("L", 3)
    assert parse_ansatz("A1").name == "A1"
    for bad in ("L4", "B2", ""):
        with pytest.raises(ValueError):
            parse_ansatz(bad)


def test_zero_angles_keep_first_basis_state():
    model = QnnModel(parse_ansatz("L2"), np.zeros(32))
    assert np.allclose(forward(model, [1, 0, 0, 0, 0, 0, 0, 0]), [1.0, 0.0], atol=1e-12)


def test_forward_outputs_are_distributions():
    model = init_model(parse_ansatz("L2"), seed=1, sigma=1.0)
    x = np.random.default_rng(2).uniform(0.0, 1.0, size=(16, 8))
    probs = forward_batch(model, x)
    assert probs.shape == (16, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    noisy = forward_batch(model, x, (noise_preset("auckland"), 3.0))
    assert np.allclose(noisy.sum(axis=1), 1.0, atol=1e-9)


def test_zero_noise_forward_equals_ideal():
    model = init_model(parse_ansatz("A2"), seed=5, sigma=1.0)
    x = np.random.default_rng(6).uniform(0.0, 1.0, size=(5, 8))
    assert np.allclose(forward_batch(model, x, (noise_preset("none"), 12.0)), forward_batch(model, x), atol=1e-10)


def test_batched_noisy_forward_matches_gate_by_gate_simulation():
    model = init_model(parse_ansatz("L1"), seed=8, sigma=1.0)
    profile = noise_preset("kolkata", seed=1)
    x = np.random.default_rng(9).uniform(0.0, 1.0, size=8)
    state = run_noisy(model.circuit(), amplitude_encode(x, 4), profile, 9.0)
    readout, _ = profile_at(profile, 9.0)
    expected = apply_readout_error(measure_probs(state, [0]), readout, [0])
    assert np.allclose(forward(model, x, (profile, 9.0)), expected, atol=1e-10)


def test_noise_changes_output():
    model = init_model(parse_ansatz("L2"), seed=3, sigma=1.0)
    x = np.linspace(0.1, 0.8, 8)
    assert not np.allclose(forward(model, x), forward(model, x, (noise_preset("auckland"), 0.0)), atol=1e-6)


def test_predict():
    assert predict([0.9, 0.1]) == 0
    assert predict([0.5, 0.5]) == 0
    assert predict([0.2, 0.8]) == 1
    assert np.allclose(softmax(np.array([0.3, 0.7])).sum(), 1.0)
    assert list(predict_batch(np.array([[0.1, 0.9], [0.6, 0.4]]))) == [1, 0]
    with pytest.raises(ValueError):
        predict([np.nan, 0.1])


def test_predict_ignores_constant_shift():
    rng = np.random.default_rng(4)
    raw = rng.dirichlet([1.0, 1.0, 1.0, 1.0], size=30)
    for c in (-3.0, 0.25, 100.0):
        assert np.array_equal(predict_batch(raw + c), predict_batch(raw))
        assert predict(raw[0] + c) == predict(raw[0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noise_does_not_raise_accuracy(seed):
    model = init_model(parse_ansatz("L2"), seed=seed, sigma=1.0)
    x = np.random.default_rng(seed).uniform(0.1, 1.0, size=(60, 8))
    labels = predict_batch(forward_batch(model, x))
    ideal = evaluate_accuracy(model, x, labels)
    for t in (0.0, 6.0, 12.0, 18.0):
        noisy = evaluate_accuracy(model, x, labels, (noise_preset("auckland", seed=seed), t))
        assert noisy <= ideal + 0.02


def test_model_validation():
    with pytest.raises(ValueError):
        QnnModel(parse_ansatz("L1"), np.zeros(5))
    model = init_model(parse_ansatz("L1"), seed=0)
    with pytest.raises(ValueError):
        model.theta[0] = 1.0


def test_init_model_is_seeded():
    a = init_model(parse_ansatz("L2"), seed=4)
    b = init_model(parse_ansatz("L2"), seed=4)
    c = init_model(parse_ansatz("L2"), seed=5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)


def test_meyer_wallach_reference_states():
    assert meyer_wallach_circuit(bell_circuit(), n_samples=3, seed=0) == pytest.approx(1.0, abs=1e-9)
    product = Circuit(2, (GateOp("RY", (0,), (0.0,), True), GateOp("RX", (1,), (0.0,), True)))
    assert meyer_wallach_circuit(product, n_samples=20, seed=0) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        meyer_wallach_circuit(product, n_samples=0, seed=0)


def test_meyer_wallach_is_bounded_and_seeded():
    spec = parse_ansatz("L2")
    value = meyer_wallach(spec, n_samples=50, seed=7)
    assert 0.0 <= value <= 1.0
    assert value == meyer_wallach(spec, n_samples=50, seed=7)


# reference values: 2000 uniformly drawn parameter sets per ansatz, seed 0
MEASURED_ENTANGLEMENT = {"L1": 0.418, "L2": 0.614, "L3": 0.710, "A1": 0.830, "A2": 0.567}


@pytest.mark.parametrize("name", sorted(MEASURED_ENTANGLEMENT))
def test_meyer_wallach_of_ansatz_zoo(name):
    value = meyer_wallach(parse_ansatz(name), n_samples=2000, seed=0)
    assert value == pytest.approx(MEASURED_ENTANGLEMENT[name], abs=0.01)
    # none exceeds the four-qubit Haar average (2^4 - 2) / (2^4 + 1) by more than sampling noise
    assert value < 14 / 17 + 0.02


def test_checkpoint_text(tmp_path):
    model = init_model(parse_ansatz("A1"), seed=2, sigma=1.0)
    restored, config_hash = checkpoint_from_text(checkpoint_to_text(model, "abc123"))
    assert config_hash == "abc123"
    assert restored.ansatz == model.ansatz
    assert np.array_equal(restored.theta, model.theta)

    path = save_checkpoint(model, str(tmp_path / "victim.ckpt"))
    restored, config_hash = load_checkpoint(path)
    assert config_hash == ""
    assert np.array_equal(restored.theta, model.theta)

    with pytest.raises(ValueError):
        checkpoint_from_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        checkpoint_from_text("qnn-checkpoint v1\nansatz L1\nn_qubits 4\nreadout 0\n")
