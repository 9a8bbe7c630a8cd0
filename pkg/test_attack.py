import os

import numpy as np
import pytest

import attack
from attack import (
    AttackConfig,
    Ensemble,
    adversarial_samples,
    bootstrap_bag,
    fuse,
    fuse_outputs,
    input_gradient,
    run_cloudleak_baseline,
    run_quantumleak,
    train_ensemble,
)
from noise_model import NoiseClock, noise_preset
from optimization import LossKind
from oracle import InProcessOracle, QueryDataset, VictimDeployment
from qnn_model import QnnModel, forward_batch, init_model, parse_ansatz, predict_batch
from run_records import append_query_log, read_query_log, read_report


def random_dataset(n: int, seed: int = 0) -> QueryDataset:
    rng = np.random.default_rng(seed)
    raw = rng.dirichlet([1.0, 1.0], size=n)
    return QueryDataset(rng.uniform(0.1, 1.0, size=(n, 8)), raw, np.zeros(n), np.zeros(n, dtype=int))


@pytest.fixture
def victim():
    return init_model(parse_ansatz("L1"), seed=21, sigma=1.0)


@pytest.fixture
def task(victim):
    rng = np.random.default_rng(3)
    pool = rng.uniform(0.1, 1.0, size=(60, 8))
    test_x = rng.uniform(0.1, 1.0, size=(20, 8))
    test_y = predict_batch(forward_batch(victim, test_x))
    return pool, (test_x, test_y)


def deployment(model) -> VictimDeployment:
    return VictimDeployment(model, noise_preset("auckland", seed=2), NoiseClock())


def small_config(**kwargs) -> AttackConfig:
    base = dict(n_q=30, n_c=3, rounds=3, ansatz=parse_ansatz("L1"), loss=LossKind("huber"),
                epochs=2, batch_size=8, lr=0.05, seed=0)
    base.update(kwargs)
    return AttackConfig(**base)


def test_bootstrap_bag_sizes():
    data = random_dataset(6000)
    splits = bootstrap_bag(data, 6000, 5, seed=0)
    assert len(splits) == 5
    assert all(len(s.in_bag) == 1200 for s in splits)
    for s in splits:
        assert not set(s.in_bag.tolist()) & set(s.out_of_bag.tolist())
        assert len(set(s.in_bag.tolist())) + len(s.out_of_bag) == 6000


def test_single_bag_covers_about_two_thirds():
    data = random_dataset(6000)
    (split,) = bootstrap_bag(data, 6000, 1, seed=1)
    assert len(split.in_bag) == 6000
    assert len(np.unique(split.in_bag)) / 6000 == pytest.approx(0.632, abs=0.02)


def test_bootstrap_bag_is_seeded_and_validated():
    data = random_dataset(100)
    a = bootstrap_bag(data, 90, 3, seed=4)
    b = bootstrap_bag(data, 90, 3, seed=4)
    assert all(np.array_equal(x.in_bag, y.in_bag) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        bootstrap_bag(data, 101, 3, seed=0)
    with pytest.raises(ValueError):
        bootstrap_bag(data, 90, 0, seed=0)


def test_majority_fusion():
    raw = np.array([[[0.9, 0.1]], [[0.8, 0.2]], [[0.2, 0.8]]])
    assert list(fuse_outputs(raw)) == [0]


def test_majority_ties_use_confidence_then_lowest_label():
    confident = np.array([[[0.6, 0.4]], [[0.1, 0.9]]])
    assert list(fuse_outputs(confident)) == [1]
    mirrored = np.array([[[0.6, 0.4]], [[0.4, 0.6]]])
    assert list(fuse_outputs(mirrored)) == [0]


def test_average_fusion_differs_from_majority():
    raw = np.array([[[0.9, 0.1]], [[0.4, 0.6]], [[0.45, 0.55]]])
    assert list(fuse_outputs(raw, "majority")) == [1]
    assert list(fuse_outputs(raw, "average")) == [0]
    with pytest.raises(ValueError):
        fuse_outputs(raw, "median")
    with pytest.raises(ValueError):
        fuse_outputs(raw[0])


def test_fuse_single_sample():
    members = [init_model(parse_ansatz("L1"), seed=s, sigma=1.0) for s in range(3)]
    ensemble = Ensemble(members, [1.0, 1.0, 1.0])
    x = np.linspace(0.1, 0.8, 8)
    assert fuse(ensemble, x) in (0, 1)
    with pytest.raises(ValueError):
        Ensemble([], [])
    with pytest.raises(ValueError):
        Ensemble([members[0], init_model(parse_ansatz("L2"), seed=0)], [1.0, 1.0])


def test_attack_config():
    cfg = AttackConfig(n_q=100, n_c=5, rounds=3)
    assert cfg.per_round == 33 and cfg.budget == 99 and cfg.bag_size == 19
    assert cfg.scheme == "Ens-H"
    assert AttackConfig(n_c=1, loss=LossKind("nll")).scheme == "Single-N"
    assert cfg.tag() == "Ens-H-q100-c5-L2-majority-m3-e100-s0"
    assert AttackConfig(n_c=2, fusion="average").n_c == 2
    with pytest.raises(ValueError):
        AttackConfig(n_c=4)
    with pytest.raises(ValueError):
        AttackConfig(fusion="vote")
    with pytest.raises(ValueError):
        AttackConfig(n_q=2, n_c=3)
    with pytest.raises(ValueError):
        AttackConfig(rounds=0)


def test_quantumleak_end_to_end(victim, task, tmp_path):
    pool, test = task
    dep = deployment(victim)
    cfg = small_config()
    ensemble, report = run_quantumleak(cfg, InProcessOracle(dep), pool, test, out_dir=str(tmp_path))
    assert len(ensemble.members) == 3
    assert report["queries"]["total"] == dep.query_counter == 30
    assert report["queries"]["non_domain"] == 0
    assert report["query_times"] == [0.0, 8.0, 16.0]
    assert len(report["oob_accuracies"]) == 3
    assert 0.0 <= report["accuracy"] <= 1.0
    saved = read_report(os.path.join(str(tmp_path), f"report-{cfg.tag()}.ndjson"))
    assert saved["report_hash"] == report["report_hash"]

    with pytest.raises(FileExistsError):
        run_quantumleak(cfg, InProcessOracle(dep), pool, test, out_dir=str(tmp_path))
    assert dep.query_counter == 30


def test_quantumleak_is_deterministic(victim, task):
    pool, test = task
    _, a = run_quantumleak(small_config(), InProcessOracle(deployment(victim)), pool, test)
    _, b = run_quantumleak(small_config(), InProcessOracle(deployment(victim)), pool, test)
    assert a["report_hash"] == b["report_hash"]
    _, c = run_quantumleak(small_config(seed=1), InProcessOracle(deployment(victim)), pool, test)
    assert a["report_hash"] != c["report_hash"]


def test_parallel_members_match_sequential(victim, task):
    pool, test = task
    seq, a = run_quantumleak(small_config(), InProcessOracle(deployment(victim)), pool, test)
    par, b = run_quantumleak(small_config(n_jobs=2), InProcessOracle(deployment(victim)), pool, test)
    assert a["report_hash"] == b["report_hash"]
    for x, y in zip(seq.members, par.members):
        assert np.array_equal(x.theta, y.theta)


def test_cloudleak_baseline_accounting(victim, task, tmp_path):
    pool, test = task
    rng = np.random.default_rng(8)
    pretrain = (rng.uniform(0.1, 1.0, size=(16, 8)), rng.integers(0, 2, size=16))
    dep = deployment(victim)
    cfg = small_config(n_c=5)
    model, report = run_cloudleak_baseline(cfg, InProcessOracle(dep), pool, test, pretrain,
                                           out_dir=str(tmp_path), n_adversarial=10, epsilon=0.2)
    queries = report["queries"]
    assert report["scheme"] == "Single-H"
    assert report["config"]["n_c"] == 1
    assert queries["domain"] == 30
    assert 0 <= queries["non_domain"] <= 10
    assert queries["total"] == queries["domain"] + queries["non_domain"] == dep.query_counter
    tag = small_config(n_c=1).tag()
    assert os.path.exists(os.path.join(str(tmp_path), f"report-{tag}-baseline.ndjson"))


def boundary_model() -> QnnModel:
    """Label 1 exactly when the odd-index amplitudes carry most of the mass."""
    theta = np.zeros(16)
    theta[15] = np.pi
    return QnnModel(parse_ansatz("L1"), theta)


def test_adversarial_samples_flip_labels():
    model = boundary_model()
    x = np.full((3, 8), 0.1)
    x[:, 0] = [1.0, 2.0, 3.0]
    adv = adversarial_samples(model, x, epsilon=0.2, max_iterations=20)
    assert len(adv) == 3
    assert np.all(predict_batch(forward_batch(model, x)) == 0)
    assert np.all(predict_batch(forward_batch(model, adv)) == 1)
    assert np.allclose(np.linalg.norm(adv, axis=1), np.linalg.norm(x, axis=1))


def test_input_gradient_points_toward_the_other_class():
    model = boundary_model()
    x = np.full((1, 8), 0.1)
    x[0, 0] = 1.0
    grad = input_gradient(model, x, np.array([0]))
    assert grad.shape == (1, 8)
    assert np.all(grad[0, 1::2] > 0)
    assert grad[0, 0] < 0


def test_majority_fusion_ignores_positive_scaling():
    rng = np.random.default_rng(5)
    raw = rng.dirichlet([1.0, 1.0], size=(3, 40))
    labels = fuse_outputs(raw, "majority")
    for c in (0.5, 3.0, 40.0):
        assert np.array_equal(fuse_outputs(raw * c, "majority"), labels)


@pytest.mark.parametrize("mode", ["majority", "average"])
def test_single_member_fusion_is_its_argmax(mode):
    rng = np.random.default_rng(6)
    raw = rng.dirichlet([1.0, 1.0, 1.0], size=(1, 25))
    assert np.array_equal(fuse_outputs(raw, mode), np.argmax(raw[0], axis=1))


def scripted_member(accuracies):
    """Stand-in for member training that hands out accuracies in call order."""
    queue = list(accuracies)
    seeds = []

    def fake(job):
        seeds.append(job[5])
        return init_model(parse_ansatz("L1"), seed=len(seeds)), queue.pop(0)

    return fake, seeds


def test_worse_member_is_retrained_and_better_attempt_kept(monkeypatch):
    data = random_dataset(30)
    splits = bootstrap_bag(data, 30, 3, seed=0)
    fake, seeds = scripted_member([0.8, 0.6, 0.9, 0.7])
    monkeypatch.setattr(attack, "_train_member", fake)

    ensemble = train_ensemble(splits, data, small_config())
    assert ensemble.retrained == [False, True, False]
    assert ensemble.oob_accuracies == [0.8, 0.7, 0.9]
    assert len(seeds) == 4 and seeds[3] != seeds[1]
    assert np.array_equal(ensemble.members[1].theta, init_model(parse_ansatz("L1"), seed=4).theta)


def test_worse_retry_keeps_first_attempt(monkeypatch):
    data = random_dataset(30)
    splits = bootstrap_bag(data, 30, 3, seed=0)
    fake, _ = scripted_member([0.8, 0.6, 0.5, 0.9])
    monkeypatch.setattr(attack, "_train_member", fake)

    ensemble = train_ensemble(splits, data, small_config())
    assert ensemble.retrained == [False, True, False]
    assert ensemble.oob_accuracies == [0.8, 0.6, 0.9]
    assert np.array_equal(ensemble.members[1].theta, init_model(parse_ansatz("L1"), seed=2).theta)


def test_resume_after_interrupted_first_round(victim, task, tmp_path):
    pool, test = task
    cfg = small_config()
    _, fresh = run_quantumleak(cfg, InProcessOracle(deployment(victim)), pool, test)

    log_path = os.path.join(str(tmp_path), f"queries-{cfg.tag()}.ndjson")
    partial = random_dataset(6, seed=9)
    append_query_log(log_path, partial)

    dep = deployment(victim)
    _, report = run_quantumleak(cfg, InProcessOracle(dep), pool, test, out_dir=str(tmp_path))
    assert report["queries"]["total"] == dep.query_counter == 30
    assert report["report_hash"] == fresh["report_hash"]
    logged = read_query_log(log_path, cfg.per_round)
    assert len(logged) == 30
    assert list(np.unique(logged.round)) == [0, 1, 2]
