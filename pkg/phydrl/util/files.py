import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_SCHEMA_VERSION = 1

TRAJECTORY_COLUMNS = [
    "step", "x", "v", "theta", "omega",
    "a_phy", "a_drl", "a_total", "reward", "V", "r_term",
]
TRAINING_COLUMNS = ["step", "episode", "return", "critic_loss", "actor_loss"]
EVAL_COLUMNS = ["step", "eval_return", "eval_safe_fraction"]
METRICS_COLUMNS = [
    "controller", "episode", "steps", "safety_exit", "exit_step",
    "final_abs_x", "final_abs_theta", "return",
]
COMPARE_COLUMNS = ["configuration", "seed", "steps_to_threshold"]


def save_matrix(path, matrix) -> Path:
    """Write a matrix row-major as decimal text with 17 significant digits."""
    path = Path(path)
    arr = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    np.savetxt(path, arr, fmt="%.17g")
    return path


def load_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(Path(path), dtype=np.float64, ndmin=2))


def format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """
    Write rows under a header line. Floats are written with `repr` so two runs
    producing the same numbers produce byte-identical files.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"Row has {len(row)} cells, expected {len(columns)}")
            writer.writerow([format_cell(v) for v in row])
    return path


def read_csv(path) -> list:
    with open(Path(path), "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command: str, artifacts: Sequence) -> Path:
    """List every artifact of a run with its SHA-256 hash."""
    out_dir = Path(out_dir)
    entries = []
    for artifact in artifacts:
        artifact = Path(artifact)
        if artifact.exists():
            entries.append(
                {
                    "path": os.path.relpath(artifact, out_dir),
                    "sha256": file_sha256(artifact),
                }
            )
    manifest = {
        "command": command,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "artifacts": entries,
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=4)
    return path
