"""Rebuild the packaged planar walker gait.

Seed (inverted-pendulum hip, smooth swing arcs) -> settle the single-agent
return map -> shooting refinement with knot resampling.  Writes
src/coopgait/data/planar_walker_gait.yaml unless --out is given.

    python3 scripts/build_fixture_gait.py [--knots 17] [--dt 2e-3] [--out PATH]
"""

import argparse
import time
from pathlib import Path

from coopgait import fixtures
from coopgait.gait import refine_periodic, save_gait
from coopgait.hybrid import ExecutorConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--knots", type=int, default=17)
    ap.add_argument("--dt", type=float, default=fixtures.REFINE_DT)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src/coopgait/data/planar_walker_gait.yaml"))
    args = ap.parse_args()

    model = fixtures.walker_model()
    graph = fixtures.walker_graph()
    spec = fixtures.walker_outputs()
    cfg = ExecutorConfig(dt=args.dt, record=False)
    seed = fixtures.seed_gait(model)
    t0 = time.time()
    x0 = fixtures.settle(seed, model, graph, spec, cfg=cfg, tol=1e-6)
    print(f"settled in {time.time() - t0:.1f}s")
    res = refine_periodic(seed, model, graph, spec, knots=args.knots, cfg=cfg, x_init=x0,
                          log=lambda h: print(h, f"{time.time() - t0:.1f}s", flush=True))
    print(f"fixed-point residual {res.residual:.3e}, {res.rounds} rounds, "
          f"{res.newton_steps} Newton steps, {time.time() - t0:.1f}s")
    save_gait(res.gait, args.out)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
