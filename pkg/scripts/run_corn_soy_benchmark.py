#!/usr/bin/env python3
"""Run the corn/soybean benchmark end to end and print the headline numbers.

Usage: python3 scripts/run_corn_soy_benchmark.py [out_dir]
"""

import json
import sys
import time
from pathlib import Path

from croptopo.pipeline import ExperimentConfig, Workspace, run_all

HERE = Path(__file__).parent


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/corn_soy")
    cfg = ExperimentConfig.load(HERE / "corn_soy.json")
    ws = Workspace(cfg, out)
    t0 = time.time()
    results = run_all(ws)
    summary = results["evaluate"]
    print(json.dumps({
        "minutes": round((time.time() - t0) / 60, 1),
        "best_oa_main": round(summary["best_oa_main"], 4),
        "best_oa_boundary": round(summary.get("best_oa_boundary", 0.0), 4),
        "best_oa_postseason": round(summary.get("best_oa_postseason", 0.0), 4),
        "best_oa_harmonic": round(summary.get("best_oa_harmonic", 0.0), 4),
        "earliest_step_oa_085": summary["earliest_step_085"],
        "report": str(ws.out / "reports" / "report.txt"),
    }, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
