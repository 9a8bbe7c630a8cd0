"""
QuantumLeak Lab - Experiment Configuration Module

This module reads declarative experiment files: key=value lines in dotenv syntax
with comma-separated lists for grid axes. Values are validated with pydantic and
every error is reported as `<file>:<line>: <key>: <message>`.
"""

import os
from typing import Dict, List, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from attack import FUSION_MODES, AttackConfig
from data_processing import TASK_PRESETS, TaskSpec, task_preset
from noise_model import NOISE_PRESETS, NoiseProfile, load_noise_profile, noise_preset
from optimization import LOSS_VARIANTS, LossKind
from qnn_model import AnsatzSpec, parse_ansatz
from training import TrainConfig

# Load environment variables from .env file
load_dotenv()

RESULTS_DIR = os.environ.get("QLEAK_RESULTS_DIR", "results")
DEFAULT_NOISE_PRESET = os.environ.get("QLEAK_NOISE_PRESET", "auckland")

SCHEMES = ("Ens-H", "Ens-N", "Single-H", "Single-N")
EXPRESS_EPOCHS = 30
EXPRESS_N_Q = [1500]

# dotted file key -> model field
KEY_MAP = {
    "task": "task",
    "task.n_query": "n_query",
    "task.n_test": "n_test",
    "task.n_victim": "n_victim",
    "task.n_pretrain": "n_pretrain",
    "data.mnist_dir": "mnist_dir",
    "data.fmnist_dir": "fmnist_dir",
    "noise.preset": "noise_preset",
    "noise.seed": "noise_seed",
    "victim.ansatz": "victim_ansatz",
    "victim.epochs": "victim_epochs",
    "victim.batch_size": "victim_batch_size",
    "loss.kind": "loss_kind",
    "loss.delta": "loss_delta",
    "optim.lr": "lr",
    "optim.weight_decay": "weight_decay",
    "attack.n_q": "attack_n_q",
    "attack.n_c": "attack_n_c",
    "attack.rounds": "attack_rounds",
    "attack.ansatz": "attack_ansatz",
    "attack.loss": "attack_loss",
    "attack.fusion": "attack_fusion",
    "attack.schemes": "attack_schemes",
    "attack.epochs": "attack_epochs",
    "attack.shots": "attack_shots",
    "attack.resample": "attack_resample",
    "seeds": "seeds",
    "output_dir": "output_dir",
    "jobs": "jobs",
}
FIELD_TO_KEY = {v: k for k, v in KEY_MAP.items()}
LIST_FIELDS = {"attack_n_q", "attack_n_c", "attack_ansatz", "attack_loss", "attack_fusion", "attack_schemes", "seeds"}


class ConfigError(ValueError):
    """Invalid experiment configuration, with file and line diagnostics."""


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: str = "mnist-01"
    n_query: int = 3000
    n_test: int = 500
    n_victim: int = 3000
    n_pretrain: int = 3000
    mnist_dir: Optional[str] = None
    fmnist_dir: Optional[str] = None
    noise_preset: str = DEFAULT_NOISE_PRESET
    noise_seed: int = 0
    victim_ansatz: str = "L2"
    victim_epochs: int = 100
    victim_batch_size: int = 32
    loss_kind: str = "nll"
    loss_delta: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    attack_n_q: List[int] = [6000]
    attack_n_c: List[int] = [5]
    attack_rounds: int = 3
    attack_ansatz: List[str] = ["L2"]
    attack_loss: List[str] = ["nll", "huber"]
    attack_fusion: List[str] = ["majority"]
    attack_schemes: List[str] = list(SCHEMES)
    attack_epochs: int = 100
    attack_shots: int = 0
    attack_resample: bool = False
    seeds: List[int] = [0, 1, 2]
    output_dir: str = RESULTS_DIR
    jobs: int = 1

    @field_validator("attack_n_q", "attack_n_c", "attack_ansatz", "attack_loss", "attack_fusion",
                     "attack_schemes", "seeds")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grid axis must not be empty")
        return v

    @field_validator("task")
    @classmethod
    def _known_task(cls, v):
        if v not in TASK_PRESETS:
            raise ValueError(f"unknown task '{v}' (available: {', '.join(TASK_PRESETS)})")
        return v

    @field_validator("noise_preset")
    @classmethod
    def _known_preset(cls, v):
        if v.lower() not in NOISE_PRESETS and not os.path.exists(v):
            raise ValueError(f"unknown noise preset '{v}' (available: {', '.join(NOISE_PRESETS)} or a profile file)")
        return v

    @field_validator("victim_ansatz")
    @classmethod
    def _victim_ansatz(cls, v):
        parse_ansatz(v)
        return v

    @field_validator("attack_ansatz")
    @classmethod
    def _attack_ansatz(cls, v):
        for name in v:
            parse_ansatz(name)
        return v

    @field_validator("loss_kind")
    @classmethod
    def _loss_kind(cls, v):
        if v not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss '{v}' (available: {', '.join(LOSS_VARIANTS)})")
        return v

    @field_validator("attack_loss")
    @classmethod
    def _attack_loss(cls, v):
        for name in v:
            if name not in LOSS_VARIANTS:
                raise ValueError(f"unknown loss '{name}' (available: {', '.join(LOSS_VARIANTS)})")
        return v

    @field_validator("attack_fusion")
    @classmethod
    def _fusion(cls, v):
        for name in v:
            if name not in FUSION_MODES:
                raise ValueError(f"unknown fusion '{name}' (available: {', '.join(FUSION_MODES)})")
        return v

    @field_validator("attack_schemes")
    @classmethod
    def _schemes(cls, v):
        for name in v:
            if name not in SCHEMES:
                raise ValueError(f"unknown scheme '{name}' (available: {', '.join(SCHEMES)})")
        return v

    @field_validator("loss_delta", "lr")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("victim_epochs", "victim_batch_size", "attack_rounds", "attack_epochs", "jobs",
                     "n_query", "n_test", "n_victim", "n_pretrain")
    @classmethod
    def _positive_int(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @model_validator(mode="after")
    def _committee_sizes(self):
        if "majority" in self.attack_fusion:
            even = [n for n in self.attack_n_c if n % 2 == 0]
            if even:
                raise ValueError(f"attack.n_c: majority fusion needs odd committee sizes, got {even}")
        if any(n < 1 for n in self.attack_n_c):
            raise ValueError("attack.n_c: committee sizes must be at least 1")
        if any(n < 1 for n in self.attack_n_q):
            raise ValueError("attack.n_q: query budgets must be positive")
        return self

    # -- derived objects ---------------------------------------------------

    def task_spec(self) -> TaskSpec:
        base = task_preset(self.task)
        return TaskSpec(base.dataset, base.class_pair, self.n_query, self.n_test, self.n_pretrain, self.n_victim)

    def data_dir(self) -> Optional[str]:
        return self.mnist_dir if self.task_spec().dataset == "mnist" else self.fmnist_dir

    def noise_profile(self) -> NoiseProfile:
        if os.path.exists(self.noise_preset):
            return load_noise_profile(self.noise_preset)
        return noise_preset(self.noise_preset, self.noise_seed)

    def noise_name(self) -> str:
        return self.noise_profile().name

    def victim_spec(self) -> AnsatzSpec:
        return parse_ansatz(self.victim_ansatz)

    def victim_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.victim_epochs, self.victim_batch_size, LossKind(self.loss_kind, self.loss_delta),
                           self.lr, self.weight_decay, seed)

    def attack_config(self, seed: int, n_q: int, n_c: int, ansatz: str, loss: str, fusion: str,
                      rounds: Optional[int] = None) -> AttackConfig:
        return AttackConfig(
            n_q=n_q, n_c=n_c, rounds=rounds or self.attack_rounds, ansatz=parse_ansatz(ansatz),
            loss=LossKind(loss, self.loss_delta), fusion=fusion, seed=seed, epochs=self.attack_epochs,
            batch_size=self.victim_batch_size, lr=self.lr, weight_decay=self.weight_decay,
            resample=self.attack_resample, n_jobs=self.jobs,
        )


def _line_numbers(path: str) -> Dict[str, int]:
    lines = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if stripped.startswith("export "):
                stripped = stripped[len("export "):]
            if not stripped or stripped.startswith("#") or "=" not in stripped:
                continue
            key = stripped.split("=", 1)[0].strip()
            lines.setdefault(key, lineno)
    return lines


def _parse_value(field: str, raw: str):
    if field in LIST_FIELDS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw.strip()


def load_config(path: str, overrides: Optional[Dict[str, object]] = None, express: bool = False) -> ExperimentConfig:
    """
    Load and validate an experiment file.

    Args:
        path: key=value file
        overrides: Field values that replace the file's (from CLI flags)
        express: Apply the express profile (30 epochs, N_Q grid {1500})

    Raises:
        ConfigError: `<file>:<line>: <key>: <message>` for the first invalid key
    """
    if not os.path.exists(path):
        raise ConfigError(f"{path}: file not found")
    values = dotenv_values(path)
    lines = _line_numbers(path)
    data = {}
    for key, raw in values.items():
        if key not in KEY_MAP:
            raise ConfigError(f"{path}:{lines.get(key, 0)}: {key}: unknown key")
        if raw is None:
            raise ConfigError(f"{path}:{lines.get(key, 0)}: {key}: missing value")
        data[KEY_MAP[key]] = _parse_value(KEY_MAP[key], raw)
    if express:
        data.update(victim_epochs=EXPRESS_EPOCHS, attack_epochs=EXPRESS_EPOCHS, attack_n_q=list(EXPRESS_N_Q))
    data.update(overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = err.get("loc", ())
        msg = err.get("msg", "invalid value")
        if loc:
            key = FIELD_TO_KEY.get(str(loc[0]), str(loc[0]))
        else:
            key, _, msg = msg.removeprefix("Value error, ").partition(": ")
        raise ConfigError(f"{path}:{lines.get(key, 0)}: {key}: {msg.removeprefix('Value error, ')}") from e


def default_config(overrides: Optional[Dict[str, object]] = None, express: bool = False) -> ExperimentConfig:
    """Configuration used when no file is given."""
    data = dict(overrides or {})
    if express:
        data.update(victim_epochs=EXPRESS_EPOCHS, attack_epochs=EXPRESS_EPOCHS, attack_n_q=list(EXPRESS_N_Q))
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        field = str(err["loc"][0]) if err.get("loc") else "config"
        raise ConfigError(f"<defaults>:0: {FIELD_TO_KEY.get(field, field)}: {err.get('msg')}") from e
