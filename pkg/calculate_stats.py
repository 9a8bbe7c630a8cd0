"""
QuantumLeak Lab - Statistics Calculation Module

This module turns persisted attack result rows into summary tables: mean and
standard deviation of test accuracy across seeds for every grid cell, the
four-scheme comparison (Ens-H, Ens-N, Single-H, Single-N) with the gain over the
Single-N baseline, and flags for cells that are missing or incomplete.
"""

import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

RESULT_SCHEMA = "v1"
RESULT_COLUMNS = [
    "schema", "study", "task", "noise", "scheme", "n_q", "n_c", "ansatz", "loss", "fusion",
    "rounds", "seed", "accuracy", "oob_accuracies", "domain_queries", "non_domain_queries", "wall_time",
]
CELL_KEYS = ["study", "task", "noise", "scheme", "n_q", "n_c", "ansatz", "loss", "fusion", "rounds"]
SCHEME_ORDER = ["Ens-H", "Ens-N", "Single-H", "Single-N"]


def result_row(study: str, task: str, noise: str, report: Dict) -> Dict:
    """Flatten an attack report into one CSV row."""
    cfg = report["config"]
    return {
        "schema": RESULT_SCHEMA,
        "study": study,
        "task": task,
        "noise": noise,
        "scheme": report["scheme"],
        "n_q": cfg["n_q"],
        "n_c": cfg["n_c"],
        "ansatz": cfg["ansatz"],
        "loss": cfg["loss"],
        "fusion": cfg["fusion"],
        "rounds": cfg["rounds"],
        "seed": cfg["seed"],
        "accuracy": round(float(report["accuracy"]), 6),
        "oob_accuracies": ";".join(f"{a:.6f}" for a in report["oob_accuracies"]),
        "domain_queries": report["queries"]["domain"],
        "non_domain_queries": report["queries"]["non_domain"],
        "wall_time": round(float(report["wall_time"]), 3),
    }


def read_results(path: str) -> pd.DataFrame:
    """
    Read a results CSV.

    Raises:
        ValueError: on unknown or missing columns, or rows of another schema version
    """
    df = pd.read_csv(path, dtype={"oob_accuracies": str})
    unknown = [c for c in df.columns if c not in RESULT_COLUMNS]
    if unknown:
        raise ValueError(f"{path}: unknown result columns: {', '.join(unknown)}")
    missing = [c for c in RESULT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing result columns: {', '.join(missing)}")
    bad = df[df["schema"].astype(str) != RESULT_SCHEMA]
    if not bad.empty:
        raise ValueError(f"{path}: rows with unsupported schema {sorted(set(bad['schema'].astype(str)))}")
    df["oob_accuracies"] = df["oob_accuracies"].fillna("")
    return df


def aggregate_results(df: pd.DataFrame) -> pd.DataFrame:
    """Mean, sample standard deviation and seed count of accuracy for every cell."""
    if df.empty:
        return pd.DataFrame(columns=CELL_KEYS + ["mean", "std", "n", "seeds"])
    deduped = df.drop_duplicates(subset=CELL_KEYS + ["seed"], keep="last")
    grouped = deduped.groupby(CELL_KEYS, sort=True)
    agg = grouped["accuracy"].agg(["mean", "std", "count"]).reset_index()
    agg = agg.rename(columns={"count": "n"})
    agg["std"] = agg["std"].fillna(0.0)
    seeds = grouped["seed"].apply(lambda s: ",".join(str(v) for v in sorted(s))).reset_index(drop=True)
    agg["seeds"] = seeds.values
    return agg.sort_values(CELL_KEYS).reset_index(drop=True)


def incomplete_cells(agg: pd.DataFrame, expected_seeds: List[int],
                     expected_cells: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """
    Cells with fewer seeds than expected, plus expected cells with no rows at all.

    Returns:
        DataFrame of CELL_KEYS with columns n and expected
    """
    want = len(expected_seeds)
    partial = agg[agg["n"] < want][CELL_KEYS + ["n"]].copy()
    if expected_cells is not None and not expected_cells.empty:
        merged = expected_cells[CELL_KEYS].merge(agg[CELL_KEYS + ["n"]], on=CELL_KEYS, how="left")
        absent = merged[merged["n"].isna()].copy()
        absent["n"] = 0
        partial = pd.concat([partial, absent], ignore_index=True)
    partial["n"] = partial["n"].astype(int)
    partial["expected"] = want
    return partial.drop_duplicates(subset=CELL_KEYS).sort_values(CELL_KEYS).reset_index(drop=True)


def scheme_comparison(agg: pd.DataFrame) -> pd.DataFrame:
    """
    Four-scheme comparison: mean accuracy per scheme for every (task, noise, n_q,
    ansatz) of the 'attack' study, with Ens-H minus Single-N as gain_over_single_n.
    Schemes with no results stay empty rather than being filled in.
    """
    cells = agg[agg["study"] == "attack"]
    index = ["task", "noise", "n_q", "ansatz"]
    if cells.empty:
        return pd.DataFrame(columns=index + SCHEME_ORDER + ["gain_over_single_n"])
    table = cells.pivot_table(index=index, columns="scheme", values="mean", aggfunc="mean")
    for scheme in SCHEME_ORDER:
        if scheme not in table.columns:
            table[scheme] = np.nan
    table = table[SCHEME_ORDER]
    table["gain_over_single_n"] = table["Ens-H"] - table["Single-N"]
    table.columns.name = None
    return table.reset_index().sort_values(index).reset_index(drop=True)


def format_report(agg: pd.DataFrame, comparison: pd.DataFrame, missing: pd.DataFrame) -> str:
    """Deterministic plain-text summary."""
    lines = ["QuantumLeak results", "=" * 19, ""]
    lines.append("Per-cell accuracy (mean ± std over seeds)")
    if agg.empty:
        lines.append("  (no results)")
    else:
        for _, row in agg.iterrows():
            lines.append(
                f"  {row['study']:<12} {row['task']:<10} {row['noise']:<9} {row['scheme']:<9} "
                f"N_Q={int(row['n_q']):<5} N_C={int(row['n_c']):<2} {row['ansatz']:<3} {row['fusion']:<8} "
                f"{row['mean']:.4f} ± {row['std']:.4f} (n={int(row['n'])})"
            )
    lines += ["", "Scheme comparison"]
    if comparison.empty:
        lines.append("  (no attack study results)")
    else:
        lines.append(comparison.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="-"))
    lines += ["", "Incomplete cells"]
    if missing.empty:
        lines.append("  none")
    else:
        for _, row in missing.iterrows():
            lines.append(
                f"  ⚠️ {row['study']} {row['task']} {row['noise']} {row['scheme']} N_Q={int(row['n_q'])} "
                f"N_C={int(row['n_c'])} {row['ansatz']} {row['fusion']}: {int(row['n'])}/{int(row['expected'])} seeds"
            )
    return "\n".join(lines) + "\n"


def build_report(results_path: str, out_dir: str, expected_seeds: List[int],
                 expected_cells: Optional[pd.DataFrame] = None) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """
    Aggregate a results CSV and write summary.txt, summary.csv and comparison.csv.

    Returns:
        Tuple of (aggregate, comparison, incomplete cells)
    """
    df = read_results(results_path)
    agg = aggregate_results(df)
    comparison = scheme_comparison(agg)
    missing = incomplete_cells(agg, expected_seeds, expected_cells)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(format_report(agg, comparison, missing))
    agg.to_csv(os.path.join(out_dir, "summary.csv"), index=False, float_format="%.6f")
    comparison.to_csv(os.path.join(out_dir, "comparison.csv"), index=False, float_format="%.6f")
    return agg, comparison, missing
