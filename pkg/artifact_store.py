#!/usr/bin/env python3
"""
Artifact Store for fevolve runs
Writes summary JSON, CSV tables and matrix triplets under one output directory
and keeps a sqlite ledger of every run
"""

import csv
import json
import logging
import math
import sqlite3
import threading
import time
import uuid
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.17g}"


def _plain(value: Any) -> Any:
    """Convert numpy and non-finite values into JSON-safe Python objects"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [_plain(float(value.real)), _plain(float(value.imag))]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    if isinstance(value, (np.floating, float)):
        return FLOAT_FORMAT.format(float(value))
    return str(value)


class ArtifactStore:
    """Manages run artifacts and the run ledger under a base directory"""

    def __init__(self, base_dir: str = "./fevolve_out"):
        self.base_dir = Path(base_dir)
        self.db_path = self.base_dir / "runs.db"
        self._lock = threading.Lock()

        self.base_dir.mkdir(parents=True, exist_ok=True)
        self._init_database()
        logger.debug(f"💾 Artifact store initialized at {self.base_dir}")

    def _init_database(self):
        """Initialize SQLite database for tracking runs"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                preset TEXT,
                exit_code INTEGER,
                started REAL NOT NULL,
                finished REAL,
                artifacts TEXT
            )
        ''')
        conn.commit()
        conn.close()

    def path(self, name: str) -> Path:
        return self.base_dir / name

    def write_json(self, name: str, payload: Dict) -> Path:
        target = self.path(name)
        target.write_text(json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.info(f"💾 Wrote {target}")
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """CSV with a header row, '.' decimals, 17 significant digits and '\\n' line ends"""
        target = self.path(name)
        with open(target, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(cell) for cell in row])
        logger.info(f"💾 Wrote {target}")
        return target

    def write_triplets(self, name: str, matrix) -> Path:
        """Coordinate triplets 'row col value' in row-major order"""
        coo = sp.coo_matrix(matrix)
        order = np.lexsort((coo.col, coo.row))
        target = self.path(name)
        with open(target, "w", encoding="utf-8") as handle:
            handle.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for i in order:
                handle.write(f"{coo.row[i]} {coo.col[i]} {format_cell(float(coo.data[i]))}\n")
        logger.info(f"💾 Wrote {target} ({coo.nnz} entries)")
        return target

    def start_run(self, command: str, preset: Optional[str] = None) -> str:
        run_id = str(uuid.uuid4())
        with self._lock:
            conn = sqlite3.connect(self.db_path)
            conn.execute('''
                INSERT INTO runs (id, command, preset, started)
                VALUES (?, ?, ?, ?)
            ''', (run_id, command, preset, time.time()))
            conn.commit()
            conn.close()
        return run_id

    def finish_run(self, run_id: str, exit_code: int, artifacts: Sequence[str]):
        with self._lock:
            conn = sqlite3.connect(self.db_path)
            conn.execute('''
                UPDATE runs SET exit_code = ?, finished = ?, artifacts = ?
                WHERE id = ?
            ''', (exit_code, time.time(), json.dumps(list(artifacts)), run_id))
            conn.commit()
            conn.close()

    def get_run(self, run_id: str) -> Optional[Dict]:
        conn = sqlite3.connect(self.db_path)
        row = conn.execute('''
            SELECT id, command, preset, exit_code, started, finished, artifacts
            FROM runs WHERE id = ?
        ''', (run_id,)).fetchone()
        conn.close()
        if row is None:
            return None
        return {
            "id": row[0],
            "command": row[1],
            "preset": row[2],
            "exit_code": row[3],
            "started": row[4],
            "finished": row[5],
            "artifacts": json.loads(row[6]) if row[6] else [],
        }

    def list_runs(self) -> List[Dict]:
        conn = sqlite3.connect(self.db_path)
        ids = [row[0] for row in conn.execute("SELECT id FROM runs ORDER BY started")]
        conn.close()
        return [self.get_run(run_id) for run_id in ids]

    def get_ledger_stats(self) -> Dict:
        conn = sqlite3.connect(self.db_path)
        stats = conn.execute('''
            SELECT
                COUNT(*) as total,
                SUM(CASE WHEN exit_code = 0 THEN 1 ELSE 0 END) as passed,
                SUM(CASE WHEN exit_code = 2 THEN 1 ELSE 0 END) as certificate_failures,
                SUM(CASE WHEN exit_code = 1 THEN 1 ELSE 0 END) as errors
            FROM runs
        ''').fetchone()
        conn.close()
        return {
            "total_runs": stats[0],
            "passed": stats[1] or 0,
            "certificate_failures": stats[2] or 0,
            "errors": stats[3] or 0,
            "storage_path": str(self.base_dir),
        }


# Global instances keyed by resolved directory
_global_stores: Dict[str, ArtifactStore] = {}
_global_lock = threading.Lock()


def get_artifact_store(base_dir: str = "./fevolve_out") -> ArtifactStore:
    """Get or create the process-wide store for a directory"""
    key = str(Path(base_dir).resolve())
    with _global_lock:
        if key not in _global_stores:
            _global_stores[key] = ArtifactStore(base_dir)
        return _global_stores[key]
