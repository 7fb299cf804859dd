#!/usr/bin/env python3
"""Smoke test for the gpalm_py extension module.

Builds nothing itself: expects `cargo build -p gpalm-py` (or --release) to
have produced libgpalm_py.so under target/. Copies the library next to a
temp directory under the import name and exercises the main surface.
"""

import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_module() -> Path:
    candidates = []
    for profile in ("release", "debug"):
        for name in ("libgpalm_py.so", "gpalm_py.so", "libgpalm_py.dylib"):
            p = ROOT / "target" / profile / name
            if p.exists():
                candidates.append(p)
    if not candidates:
        sys.exit("build first: cargo build -p gpalm-py [--release]")
    return max(candidates, key=lambda p: p.stat().st_mtime)


def main() -> None:
    lib = locate_module()
    tmp = Path(tempfile.mkdtemp(prefix="gpalm-py-"))
    shutil.copy(lib, tmp / "gpalm_py.so")
    sys.path.insert(0, str(tmp))
    import gpalm_py  # noqa: E402

    # --- spline basis: partition of unity, knot layout -------------------
    samples = [i / 199 for i in range(200)]
    basis = gpalm_py.SplineBasis(samples, degree=3, n_interior=3, rule="uniform")
    assert basis.dim == 7
    assert basis.boundary == (0.0, 1.0)
    for t in (0.0, 0.123, 0.5, 0.999, 1.0, 1.7):
        vals = basis.eval(t)
        assert all(v >= 0.0 for v in vals)
        assert abs(sum(vals) - 1.0) < 1e-12, (t, sum(vals))

    # --- dataset from rows, identity fit recovers the truth --------------
    rng = random.Random(7)
    ids, y, x_rows, t_rows = [], [], [], []
    beta_true = 1.25
    for c in range(60):
        shared = rng.gauss(0.0, 0.3)
        for _ in range(4):
            x = rng.uniform(-1.0, 1.0)
            t1 = rng.random()
            mean = 0.5 + beta_true * x + math.sin(2.0 * math.pi * (t1 - 0.5))
            ids.append(f"c{c}")
            y.append(mean + shared + rng.gauss(0.0, 0.2))
            x_rows.append([x])
            t_rows.append([t1])
    data = gpalm_py.Dataset.from_long(ids, y, x_rows, t_rows)
    assert data.n_clusters == 60
    assert data.n_obs == 240
    assert data.k == 2 and data.d == 1
    assert data.validate() == []

    result = gpalm_py.fit(data, link="identity", corr="ex", knots=[2])
    assert result.converged
    assert abs(result.beta[1] - beta_true) < 0.1, result.beta
    assert all(se > 0.0 for se in result.se)
    assert 0.0 < result.rho < 1.0, result.rho
    rows = result.wald()
    assert [r[0] for r in rows] == ["intercept", "x1"]

    # the fitted smooth component tracks the centered sine
    grid = [g / 99 for g in range(100)]
    est = result.component(0, grid)
    truth = [math.sin(2.0 * math.pi * (t - 0.5)) for t in grid]
    mean_truth = sum(truth) / len(truth)
    ise = sum((e - (f - mean_truth)) ** 2 for e, f in zip(est, truth)) / len(grid)
    assert ise < 0.05, ise

    # cross-validated knot choice runs end to end
    cv_result = gpalm_py.fit(data, corr="ex", cv=True, knot_grid=[0, 1, 2], folds=4, seed=3)
    assert len(cv_result.knots) == 1

    # --- a tiny simulation study -----------------------------------------
    study = gpalm_py.simulate(
        setup="s1", n=25, rho=0.6, reps=3, seed=5,
        structures=["wi", "ar1"], fixed_knots=2,
    )
    assert study.failures == 0
    header, *rows = study.aggregate_csv.strip().splitlines()
    assert header.startswith("structure,target,")
    assert any(r.startswith("ar1,beta1,") for r in rows)
    assert len(study.replications_csv.strip().splitlines()) == 1 + 3 * 2

    print("smoke test passed")


if __name__ == "__main__":
    main()
