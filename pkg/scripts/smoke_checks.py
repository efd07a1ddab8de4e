#!/usr/bin/env python3
"""Smoke run: a fast check battery on the small presets, without pytest."""
import sys
from pathlib import Path
repo_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(repo_root))

import numpy as np

from orliczflow.modular_core import luxemburg_norm, uniform_grid_1d
from orliczflow.phi_library import Family, PhiSpec, check_delta2
from orliczflow.run_config import load_run_config
from main import ExperimentRunner


def main():
    grid = uniform_grid_1d(101)
    v = np.sin(3.0 * grid.nodes[:, 0]) + 0.5
    for p in (1.5, 2.0, 3.0, 5.0):
        expected = float(np.dot(grid.weights, np.abs(v) ** p)) ** (1.0 / p)
        got = luxemburg_norm(grid, PhiSpec(Family.POWER, p=p), v)
        print(f"{'✅' if abs(got - expected) <= 1e-8 * expected else '❌'} Luxemburg norm p={p:g}: {got:.12f}")

    print("Δ₂ on exp|z| - 1:", check_delta2(PhiSpec(Family.ORLICZ_EXP, p=1.0)).summary())

    failures = 0
    for name in ("zero_data", "heat"):
        config = load_run_config(str(repo_root / "presets" / f"{name}.yaml"))
        code, report = ExperimentRunner(config).run_checks()
        failures += int(code != 0)
        print(f"{'✅' if code == 0 else '❌'} {name}: {len(report.residuals)} residuals")
    return 1 if failures else 0


if __name__ == '__main__':
    sys.exit(main())
