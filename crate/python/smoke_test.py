"""Smoke test for the pylowrank extension.

Build first:
    cargo build --release -p lowrank-rl-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libpylowrank.so]
"""

import importlib.util
import json
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    if len(sys.argv) > 1:
        return pathlib.Path(sys.argv[1])
    for profile in ("release", "debug"):
        for name in ("libpylowrank.so", "libpylowrank.dylib", "pylowrank.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                return path
    sys.exit("pylowrank library not found; build it with cargo first")


def load():
    spec = importlib.util.spec_from_file_location("pylowrank", find_library())
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    lr = load()

    mdp = lr.gen_tucker_mdp(12, 10, 3, 2, seed=7)
    assert (mdp.n_states, mdp.n_actions, mdp.horizon) == (12, 10, 3)
    assert abs(sum(mdp.transition(1, 0, 0)) - 1.0) < 1e-12
    again = lr.Mdp.from_json(mdp.to_json())
    assert again.to_json() == mdp.to_json()

    q_star, v_star, actions = mdp.solve()
    assert len(q_star) == 3 and len(q_star[0]) == 12 and len(q_star[0][0]) == 10
    assert all(abs(max(row) - v) < 1e-12 for row, v in zip(q_star[0], v_star[0]))

    report = lr.svd_report(q_star[0], 2)
    assert report["rank_numerical"] <= 2 and report["sigma_1"] > 0

    completed = lr.anchor_completion(q_star[0], [0, 3, 5], [1, 2, 7], 2)
    assert max_abs_diff(completed, q_star[0]) < 1e-9

    run = lr.lr_evi(mdp, 2, 1.0, 1, mode="exact", seed=3)
    assert max(max_abs_diff(a, b) for a, b in zip(run["q_bar"], q_star)) < 1e-8
    assert run["samples_used"] == 0

    sampled = lr.lr_evi(mdp, 2, 0.5, 200, seed=3)
    assert sampled["samples_used"] == 200 * sum(sampled["omega_sizes"])

    eps = lr.recursion(25, 0.01)
    assert len(eps) == 25
    assert all(math.isclose(b, a + a * a, rel_tol=1e-12) for a, b in zip(eps, eps[1:]))

    csv = lr.run_experiment(json.dumps({"experiment": "eps_rank_example", "m": 6, "replicates": 3}))
    lines = csv.strip().splitlines()
    assert lines[0] == lr.CSV_HEADER and len(lines) == 4
    assert all(line.split(",")[11] == "true" for line in lines[1:])

    try:
        lr.run_experiment('{"experiment": "bogus"}')
    except ValueError as err:
        assert "experiment" in str(err)
    else:
        raise AssertionError("bogus experiment accepted")

    print("pylowrank smoke test passed")


if __name__ == "__main__":
    main()
