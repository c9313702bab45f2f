#!/usr/bin/env python3
"""Smoke test for the trajclust_py extension module.

Builds nothing itself: expects the cdylib to exist already, e.g.

    cargo build -p trajclust-py --release
    python3 python/smoke_test.py
"""

import importlib.util
import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libtrajclust_py.so", "trajclust_py.dll", "libtrajclust_py.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p trajclust-py")
    # CPython wants the module's own name on the file.
    staging = Path(tempfile.mkdtemp(prefix="trajclust_py_"))
    target = staging / "trajclust_py.so"
    shutil.copy2(built, target)
    spec = importlib.util.spec_from_file_location("trajclust_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    tc = load_module()

    scenario = tc.two_cluster_scenario(40, 2, 3)
    cohort, truth = tc.simulate(scenario)
    assert len(cohort) == 40, cohort
    assert cohort.variable_names == ["var_1", "var_2"]
    assert len(cohort.times(0)) == len(cohort.values(0))
    assert len(cohort.survival(0)) == 40
    print(f"simulated: {cohort!r}")

    result = tc.fit(cohort, seed=11)
    ari = tc.adjusted_rand_index(result.labels, truth)
    count, fraction = tc.membership_diff(result.labels, truth)
    print(f"fit: {result!r}, ari={ari:.3f}, diff={count} ({fraction:.3f})")
    assert result.n_clusters == 2, result.n_clusters
    assert ari >= 0.9, ari
    assert len(result.alpha_trace) == 16

    params = json.loads(result.cluster_params(0))
    assert {"b", "g", "sigma2", "omega", "survival"} <= params.keys()
    assert params["survival"][0]["model"] == "piecewise"

    dropped = cohort.drop_variable("var_2")
    assert dropped.variable_names == ["var_1"]

    steps = tc.kaplan_meier([1.0, 2.0, 3.0], [1, 0, 1])
    assert steps[0][0] == 1.0 and abs(steps[0][1] - 2.0 / 3.0) < 1e-12, steps
    assert steps[0][2:] == (3, 1), steps
    assert steps[1] == (3.0, 0.0, 1, 1), steps

    print("smoke test passed")


if __name__ == "__main__":
    main()
