"""
QuantumLeak Lab - Command Line Runner

Subcommands:
  train-victim   train the victim QNN and record its ideal/noisy test accuracy
  deploy-oracle  serve a victim checkpoint over stdio, a TCP socket or HTTP
  attack         run the four-scheme attack grid against the victim
  ablate         run one of the ablation grids (query-layers, committee, ansatz, fusion)
  report         aggregate results.csv into summary tables
  noise-table    print the instantiated noise rates of a profile over a day

Exit code is 0 only when every requested grid cell completed.
"""

import argparse
import multiprocessing
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional

import pandas as pd

from attack import run_cloudleak_baseline, run_quantumleak
from calculate_stats import CELL_KEYS, RESULT_COLUMNS, build_report, read_results, result_row
from data_processing import TaskSplit, cached_task
from experiment_config import ConfigError, ExperimentConfig, default_config, load_config
from noise_model import NoiseClock, noise_schedule_table
from oracle import (
    DEFAULT_SHOTS,
    HttpOracle,
    InProcessOracle,
    SocketOracle,
    VictimDeployment,
    serve_socket,
    serve_stream,
)
from qnn_model import QnnModel, init_model, load_checkpoint, save_checkpoint
from run_records import append_records, append_result_row, read_report
from training import evaluate_accuracy, train

VICTIM_SCHEMA = "quantumleak-victim"
STUDIES = ("query-layers", "committee", "ansatz", "fusion", "rounds")
ABLATION_N_Q = [1500, 3000, 6000]
ABLATION_LAYERS = ["L1", "L2", "L3"]
ABLATION_COMMITTEE = [3, 5, 7]
ABLATION_ANSATZ = ["L2", "A1", "A2"]
ABLATION_ROUNDS = [1, 2, 3, 4]


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def build_config(args) -> ExperimentConfig:
    overrides: Dict[str, object] = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.noise_preset is not None:
        overrides["noise_preset"] = args.noise_preset
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.config:
        return load_config(args.config, overrides, args.express)
    return default_config(overrides, args.express)


def task_split(cfg: ExperimentConfig, seed: int) -> TaskSplit:
    return cached_task(cfg.task_spec(), seed, os.path.join(cfg.output_dir, "cache"), cfg.data_dir())


def victim_path(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(cfg.output_dir, "victims", f"{cfg.task}-v{cfg.n_victim}-{cfg.victim_ansatz}-s{seed}.ckpt")


def train_victim(cfg: ExperimentConfig, split: TaskSplit, seed: int, verbose: bool = False) -> QnnModel:
    """Train the victim on the task's victim set, write its checkpoint and accuracy record."""
    train_cfg = cfg.victim_train_config(seed)
    print(f"🔄 Training victim {cfg.victim_ansatz} on {cfg.task} (seed {seed}, {train_cfg.epochs} epochs)...")
    model = init_model(cfg.victim_spec(), seed, train_cfg.init_sigma)
    model, history = train(model, split.victim.features, split.victim.labels, train_cfg, verbose=verbose)
    path = victim_path(cfg, seed)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_checkpoint(model, path, train_cfg.config_hash())

    profile = cfg.noise_profile()
    ideal = evaluate_accuracy(model, split.test.features, split.test.labels)
    noisy = evaluate_accuracy(model, split.test.features, split.test.labels, (profile, 0.0))
    append_records(os.path.join(cfg.output_dir, "victims.ndjson"), VICTIM_SCHEMA, [{
        "task": cfg.task,
        "ansatz": cfg.victim_ansatz,
        "seed": seed,
        "noise": profile.name,
        "epochs": train_cfg.epochs,
        "config_hash": train_cfg.config_hash(),
        "final_train_loss": float(history["train_loss"].iloc[-1]),
        "ideal_accuracy": ideal,
        "noisy_accuracy": noisy,
    }])
    print(f"✅ Victim saved to {path}")
    print(f"📊 Test accuracy: ideal {ideal:.4f}, noisy ({profile.name}) {noisy:.4f}")
    return model


def ensure_victim(cfg: ExperimentConfig, split: TaskSplit, seed: int) -> QnnModel:
    path = victim_path(cfg, seed)
    if os.path.exists(path):
        model, config_hash = load_checkpoint(path)
        if config_hash == cfg.victim_train_config(seed).config_hash():
            return model
        print(f"⚠️ {path} was trained with a different configuration; retraining")
    return train_victim(cfg, split, seed)


# ---------------------------------------------------------------------------
# Grid cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    study: str
    scheme: str
    n_q: int
    n_c: int
    ansatz: str
    fusion: str
    seed: int
    rounds: int = 3

    @staticmethod
    def loss_of(scheme: str) -> str:
        return "huber" if scheme.endswith("-H") else "nll"

    @property
    def loss(self) -> str:
        return self.loss_of(self.scheme)

    @property
    def baseline(self) -> bool:
        return self.scheme.startswith("Single")


def grid_cells(cfg: ExperimentConfig, study: str = "attack") -> List[Cell]:
    """Expand a study into its cells, in a fixed order."""
    cells = []
    n_c0 = cfg.attack_n_c[0]
    fusion0 = cfg.attack_fusion[0]
    ansatz0 = cfg.attack_ansatz[0]
    m0 = cfg.attack_rounds
    for seed in cfg.seeds:
        if study == "attack":
            for n_q in cfg.attack_n_q:
                for ansatz in cfg.attack_ansatz:
                    for scheme in cfg.attack_schemes:
                        if Cell.loss_of(scheme) not in cfg.attack_loss:
                            continue
                        if scheme.startswith("Single"):
                            cells.append(Cell(study, scheme, n_q, 1, ansatz, "majority", seed, m0))
                            continue
                        for n_c in cfg.attack_n_c:
                            for fusion in cfg.attack_fusion:
                                cells.append(Cell(study, scheme, n_q, n_c, ansatz, fusion, seed, m0))
        elif study == "query-layers":
            n_q_grid = [n for n in ABLATION_N_Q if n <= max(cfg.attack_n_q)] or cfg.attack_n_q
            for n_q in n_q_grid:
                for ansatz in ABLATION_LAYERS:
                    cells.append(Cell(study, "Ens-H", n_q, n_c0, ansatz, fusion0, seed, m0))
        elif study == "committee":
            for n_c in ABLATION_COMMITTEE:
                cells.append(Cell(study, "Ens-H", cfg.attack_n_q[0], n_c, ansatz0, fusion0, seed, m0))
        elif study == "ansatz":
            for ansatz in ABLATION_ANSATZ:
                cells.append(Cell(study, "Ens-H", cfg.attack_n_q[0], n_c0, ansatz, fusion0, seed, m0))
        elif study == "fusion":
            for fusion in ("majority", "average"):
                cells.append(Cell(study, "Ens-H", cfg.attack_n_q[0], n_c0, ansatz0, fusion, seed, m0))
        elif study == "rounds":
            # one budget every round count can draw from the query set
            n_q = min(cfg.attack_n_q[0], cfg.n_query)
            for m in ABLATION_ROUNDS:
                cells.append(Cell(study, "Ens-H", n_q, n_c0, ansatz0, fusion0, seed, m))
        else:
            raise ValueError(f"Unknown study '{study}'. Available: attack, {', '.join(STUDIES)}")
    if not cells:
        raise ConfigError("Experiment grid is empty")
    return cells


def expected_frame(cfg: ExperimentConfig, cells: List[Cell]) -> pd.DataFrame:
    noise = cfg.noise_name()
    rows = [{
        "study": c.study, "task": cfg.task, "noise": noise, "scheme": c.scheme, "n_q": c.n_q,
        "n_c": c.n_c, "ansatz": c.ansatz, "loss": c.loss, "fusion": c.fusion, "rounds": c.rounds,
    } for c in cells]
    return pd.DataFrame(rows, columns=CELL_KEYS).drop_duplicates().reset_index(drop=True)


@dataclass
class OracleTarget:
    """Where cells send their queries: a fresh in-process deployment or a remote server."""
    url: Optional[str] = None
    socket: Optional[str] = None


def _open_oracle(cfg: ExperimentConfig, target: OracleTarget, victim: Optional[QnnModel], seed: int):
    if target.url:
        return HttpOracle(target.url), None
    if target.socket:
        host, _, port = target.socket.rpartition(":")
        return SocketOracle(host or "127.0.0.1", int(port)), None
    shots = cfg.attack_shots or None
    dep = VictimDeployment(victim, cfg.noise_profile(), NoiseClock(), shots, seed=seed)
    return InProcessOracle(dep), dep


def run_cell(job) -> Dict:
    """Run one grid cell and return its report. Used directly and by the process pool."""
    cfg, cell, split, victim, target, out_dir = job
    attack_cfg = cfg.attack_config(cell.seed, cell.n_q, cell.n_c, cell.ansatz, cell.loss, cell.fusion, cell.rounds)
    oracle, dep = _open_oracle(cfg, target, victim, cell.seed)
    test = (split.test.features, split.test.labels)
    try:
        if cell.baseline:
            pretrain = (split.pretrain.features, split.pretrain.labels)
            _, report = run_cloudleak_baseline(attack_cfg, oracle, split.query.features, test, pretrain, out_dir)
        else:
            _, report = run_quantumleak(attack_cfg, oracle, split.query.features, test, out_dir)
    finally:
        oracle.close()
    if dep is not None and dep.query_counter != report["queries"]["total"]:
        print(f"⚠️ Oracle served {dep.query_counter} queries, report declares {report['queries']['total']}")
    return report


def _report_path(out_dir: str, cell: Cell, cfg: ExperimentConfig) -> str:
    attack_cfg = cfg.attack_config(cell.seed, cell.n_q, cell.n_c, cell.ansatz, cell.loss, cell.fusion, cell.rounds)
    if cell.baseline:
        return os.path.join(out_dir, f"report-{attack_cfg.tag()}-baseline.ndjson")
    return os.path.join(out_dir, f"report-{attack_cfg.tag()}.ndjson")


def run_grid(cfg: ExperimentConfig, study: str, target: OracleTarget) -> int:
    """Run every cell of a study, appending one CSV row per finished cell."""
    cells = grid_cells(cfg, study)
    noise = cfg.noise_name()
    out_dir = os.path.join(cfg.output_dir, "runs", cfg.task, noise)
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(cfg.output_dir, "results.csv")
    recorded = set()
    if os.path.exists(results_path):
        existing = read_results(results_path)
        recorded = {tuple(str(v) for v in row) for row in existing[CELL_KEYS + ["seed"]].itertuples(index=False)}

    def key(row: Dict) -> tuple:
        return tuple(str(row[k]) for k in CELL_KEYS + ["seed"])

    pending = []
    for cell in cells:
        path = _report_path(out_dir, cell, cfg)
        if os.path.exists(path):
            row = result_row(study, cfg.task, noise, read_report(path))
            if key(row) not in recorded:
                append_result_row(results_path, row, RESULT_COLUMNS)
                recorded.add(key(row))
            print(f"ℹ️ Skipping finished cell {cell.scheme} N_Q={cell.n_q} N_C={cell.n_c} {cell.ansatz} seed {cell.seed}")
            continue
        pending.append(cell)

    print(f"📊 {study}: {len(cells)} cells, {len(pending)} to run")
    splits, victims = {}, {}
    for seed in sorted({c.seed for c in pending}):
        splits[seed] = task_split(cfg, seed)
        victims[seed] = None if (target.url or target.socket) else ensure_victim(cfg, splits[seed], seed)

    pool_cfg = cfg.model_copy(update={"jobs": 1}) if cfg.jobs > 1 else cfg
    jobs = [(pool_cfg, c, splits[c.seed], victims[c.seed], target, out_dir) for c in pending]
    failures = 0

    def record(cell: Cell, outcome) -> None:
        nonlocal failures
        if isinstance(outcome, Exception):
            failures += 1
            print(f"❌ Cell {cell.scheme} N_Q={cell.n_q} N_C={cell.n_c} {cell.ansatz} seed {cell.seed} failed: {outcome}")
            return
        row = result_row(study, cfg.task, noise, outcome)
        append_result_row(results_path, row, RESULT_COLUMNS)

    if cfg.jobs > 1 and len(jobs) > 1 and not target.socket:
        with multiprocessing.Pool(cfg.jobs) as pool:
            for cell, outcome in zip(pending, pool.imap(_safe_run_cell, jobs)):
                record(cell, outcome)
    else:
        for cell, job in zip(pending, jobs):
            record(cell, _safe_run_cell(job))

    if failures:
        print(f"❌ {failures} of {len(cells)} cells failed")
        return 1
    print(f"✅ All {len(cells)} cells complete; rows in {results_path}")
    return 0


def _safe_run_cell(job):
    try:
        return run_cell(job)
    except Exception as e:
        return e


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train_victim(args) -> int:
    cfg = build_config(args)
    for seed in cfg.seeds:
        train_victim(cfg, task_split(cfg, seed), seed, verbose=args.verbose)
    return 0


def cmd_deploy_oracle(args) -> int:
    cfg = build_config(args)
    seed = cfg.seeds[0]
    path = args.checkpoint or os.environ.get("QLEAK_VICTIM_CHECKPOINT") or victim_path(cfg, seed)
    model, _ = load_checkpoint(path)
    shots = args.shots if args.shots is not None else (cfg.attack_shots or None)
    dep = VictimDeployment(model, cfg.noise_profile(), NoiseClock(), shots, seed=seed)
    if args.mode == "stdio":
        print(f"✅ Serving {path} on stdio", file=sys.stderr)
        serve_stream(dep)
    elif args.mode == "socket":
        serve_socket(dep, args.host, args.port)
    else:
        import uvicorn

        import app as oracle_app
        oracle_app.configure(dep)
        print(f"🚀 Starting QuantumLeak Oracle Server on {args.host}:{args.port}...")
        uvicorn.run(oracle_app.app, host=args.host, port=args.port)
    return 0


def _target(args) -> OracleTarget:
    return OracleTarget(url=args.oracle_url, socket=args.oracle_socket)


def cmd_attack(args) -> int:
    cfg = build_config(args)
    return run_grid(cfg, "attack", _target(args))


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    return run_grid(cfg, args.study, _target(args))


def cmd_report(args) -> int:
    cfg = build_config(args)
    results_dir = args.results_dir or cfg.output_dir
    results_path = os.path.join(results_dir, "results.csv")
    if not os.path.exists(results_path):
        print(f"❌ No results at {results_path}")
        return 1
    expected = expected_frame(cfg, grid_cells(cfg, "attack")) if args.config else None
    agg, comparison, missing = build_report(results_path, results_dir, cfg.seeds, expected)
    with open(os.path.join(results_dir, "summary.txt")) as f:
        print(f.read(), end="")
    if not missing.empty:
        print(f"⚠️ {len(missing)} cells are incomplete")
        return 1
    return 0


def cmd_noise_table(args) -> int:
    cfg = build_config(args)
    hours = [float(h) for h in args.hours.split(",") if h.strip()]
    table = noise_schedule_table(cfg.noise_profile(), hours)
    print(f"📊 Noise profile '{cfg.noise_name()}'")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    if args.output:
        table.to_csv(args.output, index=False, float_format="%.6f")
        print(f"✅ Saved to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment file (key=value lines)")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    common.add_argument("--noise-preset", help="auckland, kolkata, ionq, none or a profile file")
    common.add_argument("--express", action="store_true", help="30 epochs and an N_Q grid of {1500}")
    common.add_argument("--jobs", type=int, help="Worker processes")

    parser = argparse.ArgumentParser(description="QuantumLeak QNN model-extraction lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-victim", parents=[common], help="Train the victim QNN")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("deploy-oracle", parents=[common], help="Serve a victim checkpoint")
    p.add_argument("--mode", choices=["stdio", "socket", "http"], default="stdio")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default=os.environ.get("QLEAK_ORACLE_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=int(os.environ.get("QLEAK_ORACLE_PORT", "8765")))
    p.add_argument("--shots", type=int, help=f"Shot-sampled responses (e.g. {DEFAULT_SHOTS}); exact when omitted")
    p.set_defaults(func=cmd_deploy_oracle)

    for name, func, help_text in (("attack", cmd_attack, "Run the four-scheme attack grid"),
                                  ("ablate", cmd_ablate, "Run an ablation grid")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablate":
            p.add_argument("--study", choices=STUDIES, required=True)
        p.add_argument("--oracle-url", help="Query a remote HTTP oracle instead of an in-process one")
        p.add_argument("--oracle-socket", help="Query a remote socket oracle at host:port")
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="Aggregate results into summary tables")
    p.add_argument("--results-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("noise-table", parents=[common], help="Print noise rates over a day")
    p.add_argument("--hours", default="0,6,12,18")
    p.add_argument("--output")
    p.set_defaults(func=cmd_noise_table)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ {e}")
        return 2
    except (OSError, ValueError) as e:
        print(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
