"""
QuantumLeak Lab - Attack Module

This module implements the two model-extraction attacks against a QNN oracle:
1. QuantumLeak: query the oracle over several rounds, bootstrap the pooled
   responses into N_C bags, train a committee of substitute QNNs validated on
   their out-of-bag records, and fuse their predictions
2. A CloudLeak-style single substitute: pretrain on held-out classes, query the
   task samples plus adversarial samples near the local decision boundary,
   then fine-tune one model
"""

import hashlib
import json
import multiprocessing
import os
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from optimization import LossKind, batch_loss, target_matrix
from oracle import Oracle, QueryDataset, query_rounds
from qnn_model import AnsatzSpec, QnnModel, forward_batch, init_model, predict_batch, softmax
from run_records import append_query_log, trim_query_log, write_report
from training import TrainConfig, evaluate_accuracy, train

FUSION_MODES = ("majority", "average")
DEFAULT_ADV_EPSILON = 0.1
DEFAULT_ADV_ITERATIONS = 10
DEFAULT_ADV_SAMPLES = 512

Split = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class AttackConfig:
    """
    Hyperparameters of one attack run.

    n_q is the total query budget across all rounds, so each round sends
    n_q // rounds samples; budgets that do not divide evenly are truncated, and
    each bootstrap bag holds n_q // n_c records.
    """
    n_q: int = 6000
    n_c: int = 5
    rounds: int = 3
    ansatz: AnsatzSpec = field(default_factory=AnsatzSpec)
    loss: LossKind = field(default_factory=lambda: LossKind("huber"))
    fusion: str = "majority"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    init_sigma: float = 0.1
    day_offset: float = 0.0
    resample: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError(f"Committee size must be at least 1, got {self.n_c}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"Unknown fusion '{self.fusion}'. Available: {', '.join(FUSION_MODES)}")
        if self.fusion == "majority" and self.n_c % 2 == 0:
            raise ValueError(f"Majority fusion needs an odd committee size, got {self.n_c}")
        if self.rounds < 1:
            raise ValueError(f"Number of query rounds must be at least 1, got {self.rounds}")
        if self.n_q < max(self.n_c, self.rounds):
            raise ValueError(f"Query budget {self.n_q} is smaller than the committee or round count")

    @property
    def per_round(self) -> int:
        return self.n_q // self.rounds

    @property
    def budget(self) -> int:
        """Effective query budget after truncation to whole rounds."""
        return self.per_round * self.rounds

    @property
    def bag_size(self) -> int:
        return self.budget // self.n_c

    @property
    def scheme(self) -> str:
        return f"{'Ens' if self.n_c > 1 else 'Single'}-{self.loss.tag}"

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.loss, self.lr, self.weight_decay, seed, self.init_sigma)

    def describe(self) -> Dict:
        return {
            "n_q": self.n_q,
            "n_c": self.n_c,
            "rounds": self.rounds,
            "ansatz": self.ansatz.name,
            "loss": self.loss.variant,
            "loss_delta": self.loss.delta,
            "loss_target": self.loss.target,
            "fusion": self.fusion,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "init_sigma": self.init_sigma,
            "resample": self.resample,
        }

    def tag(self) -> str:
        return (f"{self.scheme}-q{self.n_q}-c{self.n_c}-{self.ansatz.name}-{self.fusion}"
                f"-m{self.rounds}-e{self.epochs}-s{self.seed}")


# ---------------------------------------------------------------------------
# Bagging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapSplit:
    in_bag: np.ndarray = field(repr=False)
    out_of_bag: np.ndarray = field(repr=False)


def bootstrap_bag(data: QueryDataset, n_q: int, n_c: int, seed: int) -> List[BootstrapSplit]:
    """
    Draw n_c bags of n_q // n_c records i.i.d. with replacement from D.

    Raises:
        ValueError: when D holds fewer than n_q records
    """
    if n_c < 1:
        raise ValueError(f"Committee size must be at least 1, got {n_c}")
    if n_q > len(data):
        raise ValueError(f"Query budget {n_q} exceeds the {len(data)} records in D")
    size = n_q // n_c
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_c):
        in_bag = rng.integers(0, len(data), size=size)
        out_of_bag = np.setdiff1d(np.arange(len(data)), in_bag)
        splits.append(BootstrapSplit(in_bag, out_of_bag))
    return splits


@dataclass
class Ensemble:
    members: List[QnnModel]
    oob_accuracies: List[float]
    fusion: str = "majority"
    retrained: List[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("An ensemble needs at least one member")
        if len({m.ansatz for m in self.members}) != 1:
            raise ValueError("All committee members must share one ansatz")


def _member_seeds(seed: int, n_c: int) -> List[Tuple[int, int]]:
    children = np.random.SeedSequence([seed, n_c]).spawn(n_c)
    return [tuple(int(v) for v in child.generate_state(2)) for child in children]


def _train_member(args) -> Tuple[QnnModel, float]:
    features, targets, oob_features, oob_labels, cfg, seed = args
    model = init_model(cfg.ansatz, seed, cfg.init_sigma)
    model, _ = train(model, features, targets, cfg.train_config(seed))
    return model, evaluate_accuracy(model, oob_features, oob_labels)


def train_ensemble(splits: List[BootstrapSplit], data: QueryDataset, cfg: AttackConfig,
                   verbose: bool = False) -> Ensemble:
    """
    Train one committee member per bootstrap split.

    Member i trains on its bag and is validated on its out-of-bag records against
    the oracle labels. When its accuracy falls below the kept accuracy of member
    i-1 it is retrained once from a fresh initialization and the better attempt
    is kept. First attempts run on cfg.n_jobs processes; retraining is sequential.
    """
    seeds = _member_seeds(cfg.seed, len(splits))
    labels = data.labels
    jobs = []
    for i, split in enumerate(splits):
        oob = split.out_of_bag
        if len(oob) == 0:
            print(f"⚠️ Member {i + 1} has no out-of-bag records; validating on all of D")
            oob = np.arange(len(data))
        jobs.append((data.features[split.in_bag], data.raw[split.in_bag],
                     data.features[oob], labels[oob], cfg, seeds[i][0]))

    if cfg.n_jobs > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(cfg.n_jobs, len(jobs))) as pool:
            first = pool.map(_train_member, jobs)
    else:
        first = [_train_member(job) for job in jobs]

    members, accuracies, retrained = [], [], []
    previous = 0.0
    for i, (model, acc) in enumerate(first):
        again = False
        if acc < previous:
            again = True
            if verbose:
                print(f"🔄 Member {i + 1}: OOB accuracy {acc:.4f} < {previous:.4f}, retraining")
            retry_job = jobs[i][:5] + (seeds[i][1],)
            retry_model, retry_acc = _train_member(retry_job)
            if retry_acc > acc:
                model, acc = retry_model, retry_acc
        members.append(model)
        accuracies.append(acc)
        retrained.append(again)
        previous = acc
        if verbose:
            print(f"✅ Member {i + 1}/{len(splits)}: OOB accuracy {acc:.4f}")
    return Ensemble(members, accuracies, cfg.fusion, retrained)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fuse_outputs(raw: np.ndarray, mode: str = "majority") -> np.ndarray:
    """
    Fuse member outputs of shape (N_C, B, K) into B labels.

    majority: modal member label; ties go to the label with the highest summed
    softmax confidence, then to the lowest label.
    average: argmax of the mean member softmax vector.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3 or raw.shape[0] == 0:
        raise ValueError(f"Expected member outputs of shape (N_C, B, K), got {raw.shape}")
    if mode not in FUSION_MODES:
        raise ValueError(f"Unknown fusion '{mode}'. Available: {', '.join(FUSION_MODES)}")
    probs = softmax(raw, axis=2)
    if mode == "average":
        return np.argmax(probs.mean(axis=0), axis=1)
    votes = np.argmax(probs, axis=2)
    confidence = probs.sum(axis=0)
    labels = np.empty(raw.shape[1], dtype=int)
    for b in range(raw.shape[1]):
        counts = Counter(votes[:, b].tolist())
        top = max(counts.values())
        tied = sorted(label for label, c in counts.items() if c == top)
        labels[b] = max(tied, key=lambda label: (confidence[b, label], -label))
    return labels


def fuse_batch(ensemble: Ensemble, features: np.ndarray, mode: Optional[str] = None) -> np.ndarray:
    raw = np.stack([forward_batch(m, features) for m in ensemble.members])
    return fuse_outputs(raw, mode or ensemble.fusion)


def fuse(ensemble: Ensemble, features, mode: Optional[str] = None) -> int:
    return int(fuse_batch(ensemble, np.atleast_2d(features), mode)[0])


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def report_hash(report: Dict) -> str:
    """Hash of a report without its wall-clock fields."""
    stable = {k: v for k, v in report.items() if k != "wall_time"}
    return hashlib.sha256(json.dumps(stable, sort_keys=True, default=float).encode()).hexdigest()


def _choose_samples(pool: np.ndarray, n: int, seed: int) -> np.ndarray:
    if n > len(pool):
        raise ValueError(f"Need {n} query samples per round but the pool holds {len(pool)}")
    rng = np.random.default_rng([seed, n])
    return pool[np.sort(rng.choice(len(pool), size=n, replace=False))]


def collect_queries(cfg: AttackConfig, oracle: Oracle, samples: np.ndarray, pool: np.ndarray,
                    log_path: Optional[str] = None) -> QueryDataset:
    """Run the query rounds, appending each round to log_path and resuming from it."""
    done = trim_query_log(log_path, cfg.per_round) if log_path else None
    if done is not None and not cfg.resample:
        first = int(done.round.min())
        if not np.allclose(done.features[done.round == first], samples):
            raise ValueError(f"{log_path} was recorded for a different query set")
    if done is not None:
        print(f"ℹ️ Resuming from {log_path}: {len(np.unique(done.round))}/{cfg.rounds} rounds already queried")
    on_round = (lambda part: append_query_log(log_path, part)) if log_path else None
    return query_rounds(oracle, samples, cfg.rounds, cfg.day_offset,
                        pool if cfg.resample else None, cfg.seed, done, on_round)


def run_quantumleak(cfg: AttackConfig, oracle: Oracle, query_pool: np.ndarray, test: Split,
                    out_dir: Optional[str] = None, verbose: bool = False) -> Tuple[Ensemble, Dict]:
    """
    Run the QuantumLeak pipeline end to end.

    Args:
        cfg: Attack configuration
        oracle: Client of the victim deployment
        query_pool: Candidate query samples (the task's query set)
        test: (features, labels) used to score the fused substitute
        out_dir: When given, the query log and the write-once report go here
        verbose: Print progress per member

    Returns:
        Tuple of (ensemble, report)
    """
    start = time.time()
    print(f"🔄 {cfg.scheme}: N_Q={cfg.budget}, N_C={cfg.n_c}, {cfg.ansatz.name}, {cfg.rounds} rounds")
    log_path = os.path.join(out_dir, f"queries-{cfg.tag()}.ndjson") if out_dir else None
    samples = _choose_samples(query_pool, cfg.per_round, cfg.seed)
    data = collect_queries(cfg, oracle, samples, query_pool, log_path)

    splits = bootstrap_bag(data, cfg.budget, cfg.n_c, cfg.seed)
    ensemble = train_ensemble(splits, data, cfg, verbose)
    accuracy = float(np.mean(fuse_batch(ensemble, test[0]) == np.asarray(test[1])))
    report = {
        "scheme": cfg.scheme,
        "config": cfg.describe(),
        "oob_accuracies": [float(a) for a in ensemble.oob_accuracies],
        "retrained": ensemble.retrained,
        "accuracy": accuracy,
        "queries": {"domain": len(data), "non_domain": 0, "rounds": cfg.rounds, "total": len(data)},
        "query_times": sorted(float(t) for t in np.unique(data.t)),
        "wall_time": time.time() - start,
    }
    report["report_hash"] = report_hash(report)
    if out_dir:
        write_report(os.path.join(out_dir, f"report-{cfg.tag()}.ndjson"), report)
    print(f"✅ {cfg.scheme} test accuracy: {accuracy:.4f}")
    return ensemble, report


def input_gradient(model: QnnModel, features: np.ndarray, labels: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the NLL loss with respect to the input features."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    n, f = x.shape
    steps = np.eye(f) * h
    shifted = np.concatenate([(x[:, None, :] + steps).reshape(-1, f), (x[:, None, :] - steps).reshape(-1, f)])
    preds = forward_batch(model, shifted)
    kind = LossKind("nll")
    targets = target_matrix(np.repeat(np.asarray(labels, dtype=int), f), preds.shape[1], kind)
    losses = batch_loss(preds, np.concatenate([targets, targets]), kind)
    plus, minus = losses[:n * f].reshape(n, f), losses[n * f:].reshape(n, f)
    return (plus - minus) / (2 * h)


def adversarial_samples(model: QnnModel, features: np.ndarray, epsilon: float = DEFAULT_ADV_EPSILON,
                        max_iterations: int = DEFAULT_ADV_ITERATIONS) -> np.ndarray:
    """
    FGSM-style samples that flip the local model's label.

    Each sample is normalized to unit length, stepped by epsilon * sign(gradient)
    of the loss of its current label, re-normalized and rescaled to its original
    length, until the label flips or max_iterations is reached. Only flipped
    samples are returned.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    u = x / norms
    original = predict_batch(forward_batch(model, u))
    active = np.ones(len(u), dtype=bool)
    flipped = np.zeros(len(u), dtype=bool)
    for _ in range(max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        grad = input_gradient(model, u[idx], original[idx])
        stepped = u[idx] + epsilon * np.sign(grad)
        lengths = np.linalg.norm(stepped, axis=1, keepdims=True)
        lengths[lengths == 0] = 1.0
        u[idx] = stepped / lengths
        now = predict_batch(forward_batch(model, u[idx]))
        changed = now != original[idx]
        flipped[idx[changed]] = True
        active[idx[changed]] = False
    return (u * norms)[flipped]


def run_cloudleak_baseline(cfg: AttackConfig, oracle: Oracle, query_pool: np.ndarray, test: Split,
                           pretrain: Split, out_dir: Optional[str] = None,
                           n_adversarial: int = DEFAULT_ADV_SAMPLES,
                           epsilon: float = DEFAULT_ADV_EPSILON, verbose: bool = False) -> Tuple[QnnModel, Dict]:
    """
    Run the single-substitute baseline.

    The local model is pretrained with NLL on the held-out-class corpus, the
    task samples are queried over cfg.rounds rounds, up to n_adversarial
    adversarial samples crafted against the pretrained model are queried in the
    last round, and the model is fine-tuned on all responses with cfg.loss.

    Returns:
        Tuple of (model, report)
    """
    start = time.time()
    cfg = replace(cfg, n_c=1, fusion="majority")
    print(f"🔄 {cfg.scheme} baseline: N_Q={cfg.budget}, {cfg.ansatz.name}, {cfg.rounds} rounds")
    model = init_model(cfg.ansatz, cfg.seed, cfg.init_sigma)
    pre_cfg = replace(cfg.train_config(cfg.seed), loss=LossKind("nll"))
    model, _ = train(model, pretrain[0], np.asarray(pretrain[1], dtype=int), pre_cfg)
    if verbose:
        print(f"ℹ️ Pretrained on {len(pretrain[1])} held-out samples")

    log_path = os.path.join(out_dir, f"queries-{cfg.tag()}-baseline.ndjson") if out_dir else None
    samples = _choose_samples(query_pool, cfg.per_round, cfg.seed)
    data = collect_queries(cfg, oracle, samples, query_pool, log_path)

    adversarial = adversarial_samples(model, samples[:n_adversarial], epsilon)
    if len(adversarial):
        adv_raw = oracle.query(adversarial)
        last = int(data.round.max())
        adv = QueryDataset(adversarial, adv_raw, np.full(len(adversarial), float(data.t.max())),
                           np.full(len(adversarial), last, dtype=int))
        training_set = QueryDataset.concat([data, adv])
    else:
        print("⚠️ No adversarial sample flipped the local model")
        training_set = data
    if verbose:
        print(f"ℹ️ {len(adversarial)} adversarial queries")

    model, _ = train(model, training_set.features, training_set.raw, cfg.train_config(cfg.seed))
    accuracy = evaluate_accuracy(model, test[0], test[1])
    report = {
        "scheme": cfg.scheme,
        "baseline": "cloudleak",
        "config": cfg.describe(),
        "oob_accuracies": [],
        "retrained": [],
        "accuracy": accuracy,
        "queries": {"domain": len(data), "non_domain": int(len(adversarial)), "rounds": cfg.rounds,
                    "total": len(data) + int(len(adversarial))},
        "query_times": sorted(float(t) for t in np.unique(data.t)),
        "wall_time": time.time() - start,
    }
    report["report_hash"] = report_hash(report)
    if out_dir:
        write_report(os.path.join(out_dir, f"report-{cfg.tag()}-baseline.ndjson"), report)
    print(f"✅ {cfg.scheme} baseline test accuracy: {accuracy:.4f}")
    return model, report
