#!/usr/bin/env python3
"""
List all runs recorded in a fevolve output directory
Shows the ledger statistics and the artifacts of each run
"""

import os
import sys
from datetime import datetime
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from artifact_store import get_artifact_store  # noqa: E402

# Configuration
OUT_DIR = os.getenv("FEVOLVE_OUT_DIR", "./fevolve_out")

EXIT_LABELS = {0: "✅ passed", 1: "❌ error", 2: "⚠️ certificate failure", None: "🔁 running"}


def list_all_runs(out_dir: str = OUT_DIR):
    """Print every ledger entry, oldest first"""
    store = get_artifact_store(out_dir)
    stats = store.get_ledger_stats()
    print(f"📊 Run ledger at {stats['storage_path']}")
    print("=" * 60)
    print(f"   Total runs: {stats['total_runs']}")
    print(f"   Passed: {stats['passed']}")
    print(f"   Certificate failures: {stats['certificate_failures']}")
    print(f"   Errors: {stats['errors']}")
    print()

    runs = store.list_runs()
    for i, run in enumerate(runs, 1):
        started = datetime.fromtimestamp(run["started"]).isoformat(timespec="seconds")
        print(f"   {i}. {run['command']} [{run['preset'] or '-'}] {EXIT_LABELS.get(run['exit_code'], run['exit_code'])}")
        print(f"      Started: {started}")
        for artifact in run["artifacts"]:
            print(f"      📄 {artifact}")
        print()
    return runs


if __name__ == "__main__":
    list_all_runs(sys.argv[1] if len(sys.argv) > 1 else OUT_DIR)
