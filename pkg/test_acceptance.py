"""
Long-running experiments against the real datasets.

Run with QLEAK_ACCEPTANCE=1 and the IDX files under QLEAK_MNIST_DIR / QLEAK_FMNIST_DIR.
The victim and attack runs take hours on a desktop.
"""

import os

import numpy as np
import pytest

import main
from attack import run_quantumleak
from calculate_stats import aggregate_results, read_results
from data_processing import DATASET_FILES, FMNIST_DIR, MNIST_DIR
from experiment_config import default_config
from noise_model import NoiseClock
from oracle import InProcessOracle, VictimDeployment
from qnn_model import meyer_wallach, parse_ansatz
from training import evaluate_accuracy

ACCEPTANCE = os.environ.get("QLEAK_ACCEPTANCE") == "1"

pytestmark = [
    pytest.mark.acceptance,
    pytest.mark.skipif(not ACCEPTANCE, reason="set QLEAK_ACCEPTANCE=1 to run acceptance experiments"),
]

VICTIM_BANDS = {
    "mnist-01": (0.85, 0.95),
    "mnist-23": (0.78, 0.90),
    "fmnist-01": (0.72, 0.85),
}


def require_dataset(task: str) -> None:
    directory = FMNIST_DIR if task.startswith("fmnist") else MNIST_DIR
    for stem in DATASET_FILES.values():
        if not any(os.path.exists(os.path.join(directory, stem + ext)) for ext in ("", ".gz")):
            pytest.skip(f"dataset for {task} not found in {directory}")


def mean_accuracy(agg, **cell) -> float:
    rows = agg
    for k, v in cell.items():
        rows = rows[rows[k] == v]
    assert len(rows) == 1, f"expected one cell for {cell}, found {len(rows)}"
    return float(rows["mean"].iloc[0])


def test_entanglement_grows_with_depth():
    values = [meyer_wallach(parse_ansatz(name), n_samples=2000, seed=0) for name in ("L1", "L2", "L3")]
    assert values[0] < values[1] < values[2]


@pytest.mark.parametrize("task", sorted(VICTIM_BANDS))
def test_victim_accuracy_band(task, tmp_path):
    require_dataset(task)
    cfg = default_config({"task": task, "output_dir": str(tmp_path)})
    accuracies = []
    for seed in (0, 1, 2):
        split = main.task_split(cfg, seed)
        model = main.train_victim(cfg, split, seed)
        accuracies.append(evaluate_accuracy(model, split.test.features, split.test.labels))
    low, high = VICTIM_BANDS[task]
    assert low <= np.mean(accuracies) <= high


def test_noise_lowers_victim_accuracy(tmp_path):
    require_dataset("mnist-01")
    cfg = default_config({"task": "mnist-01", "noise_preset": "auckland", "output_dir": str(tmp_path)})
    gaps = []
    for seed in (0, 1, 2):
        split = main.task_split(cfg, seed)
        model = main.ensure_victim(cfg, split, seed)
        ideal = evaluate_accuracy(model, split.test.features, split.test.labels)
        noisy = evaluate_accuracy(model, split.test.features, split.test.labels, (cfg.noise_profile(), 0.0))
        gaps.append(ideal - noisy)
    assert np.mean(gaps) >= 0.02


def test_flagship_scheme_ordering(tmp_path):
    require_dataset("mnist-01")
    cfg = default_config({"output_dir": str(tmp_path)})
    assert main.run_grid(cfg, "attack", main.OracleTarget()) == 0
    agg = aggregate_results(read_results(os.path.join(str(tmp_path), "results.csv")))
    ens_h = mean_accuracy(agg, scheme="Ens-H")
    assert ens_h > mean_accuracy(agg, scheme="Ens-N")
    assert ens_h > mean_accuracy(agg, scheme="Single-H")
    assert ens_h >= mean_accuracy(agg, scheme="Single-N") + 0.02


def test_larger_committee_does_not_degrade(tmp_path):
    require_dataset("mnist-01")
    cfg = default_config({"output_dir": str(tmp_path)})
    assert main.run_grid(cfg, "committee", main.OracleTarget()) == 0
    agg = aggregate_results(read_results(os.path.join(str(tmp_path), "results.csv")))
    assert mean_accuracy(agg, n_c=5) >= mean_accuracy(agg, n_c=3) - 0.01


def test_shot_sampled_oracle(tmp_path):
    require_dataset("mnist-01")
    cfg = default_config({"output_dir": str(tmp_path), "seeds": [0]}, express=True)
    split = main.task_split(cfg, 0)
    victim = main.ensure_victim(cfg, split, 0)
    dep = VictimDeployment(victim, cfg.noise_profile(), NoiseClock(), shots=4096, seed=0)
    attack_cfg = cfg.attack_config(0, 1500, 5, "L2", "huber", "majority")
    _, report = run_quantumleak(attack_cfg, InProcessOracle(dep), split.query.features,
                                (split.test.features, split.test.labels))
    assert report["queries"]["total"] == dep.query_counter
    assert report["accuracy"] > 0.5
