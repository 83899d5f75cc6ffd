"""Smoke test for the hilab_py extension.

Build and run:

    cargo build -p hilab-py --release --features extension-module
    python crates/py/python/smoke_test.py target/release/libhilab_py.so
"""

import importlib.machinery
import importlib.util
import math
import sys
import tempfile
from pathlib import Path


def load(so_path):
    loader = importlib.machinery.ExtensionFileLoader("hilab_py", str(so_path))
    spec = importlib.util.spec_from_file_location("hilab_py", so_path, loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    so = Path(sys.argv[1] if len(sys.argv) > 1 else "target/release/libhilab_py.so")
    h = load(so)

    rows = h.horizon_schedule(4, 4, 1.0)
    assert len(rows) == 5 and rows[0] == [0.0] * 4 and rows[-1] == [1.0] * 4, rows
    assert all(0.0 <= x <= 1.0 for r in rows for x in r)
    pyr = h.pyramidal_schedule(4, 6)
    assert pyr[-1] == [1.0] * 4

    p = [0.5, 0.3, 0.2]
    assert h.alpha_thresholds(p, [0, 1, 2])[0] == 0.5
    assert h.sample_stable(p, [0.1, 0.9], [0, 1, 2]) == 0
    assert h.sample_stable(p, [0.7, 0.1], [0, 1, 2]) == 1
    assert abs(h.total_variation(p, [0.2, 0.3, 0.5]) - 0.3) < 1e-12
    try:
        h.sample_stable([0.5, 0.6], [0.1], [0, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("unnormalised distribution accepted")

    assert abs(h.symexp(h.symlog(123.0)) - 123.0) < 1e-9
    g = h.lambda_returns([0.0, 1.0, 0.0], [False, False, False], [0.0, 0.0, 0.0], 0.99, 0.95)
    assert len(g) == 3 and math.isfinite(g[0])

    study = h.pairs_study([4], 20, 500, 3)
    assert len(study) == 20
    assert all(r[2] - 0.05 <= r[4] <= r[3] + 0.05 for r in study[1:])

    env = h.RingWorld(ring_size=8, goal=4, obs_noise=0.0)
    env.reset()
    total = 0.0
    for _ in range(4):
        _, r, term, _ = env.step(1)
        total += r
    assert term and env.position == 4 and total > 0

    with tempfile.TemporaryDirectory() as d:
        cfg = "train.epochs = 1\ntrain.collect_steps = 40\ntrain.wm_steps = 2\ntrain.ac_steps = 1\n" \
              "train.wm_warmup = 0\ntrain.ac_warmup = 0\ntrain.eval_episodes = 1\n"
        curve = h.train(cfg, d)
        assert len(curve) == 1
        ckpts = sorted(Path(d).glob("*.hilm"))
        assert ckpts, "no checkpoint written"
        agent = h.Agent.load(str(ckpts[-1]))
        lat, acts, changes = agent.imagine(horizon=8, budget=4, nu=2.0, batch=2, seed=1)
        assert len(lat) == 2 and len(acts) == 2
        assert all(c >= 0 for c in changes)

    print("hilab_py smoke test OK")


if __name__ == "__main__":
    main()
