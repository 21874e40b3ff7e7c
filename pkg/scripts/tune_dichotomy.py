"""Screen coupling coefficients for the distributed controller and confirm
the stable/unstable split with full central-difference Jacobians.

Each candidate is a comma list of ControllerParams overrides, e.g.
"alpha=0.5,gamma=0.75".  Screening uses a short Arnoldi run; --full computes
the complete quotiented Jacobian for the untuned (all zero) setting and for
the best candidate.  --write stores the winner as the packaged parameters.

    python3 scripts/tune_dichotomy.py [--arnoldi 12] [--full] [--write] CANDIDATE...
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import yaml

from coopgait import fixtures
from coopgait.analysis import leading_moduli, stability_report
from coopgait.control import ControllerParams, params_to_dict
from coopgait.hybrid import ExecutorConfig

DEFAULT_CANDIDATES = ["alpha=0.5,beta=0.5,gamma=0.5", "alpha=0.5,gamma=0.75",
                      "alpha=0.75,gamma=0.5", "alpha=0.5,gamma=0.5,kp=50,kd=14"]


def parse(text: str) -> ControllerParams:
    kw = {}
    for item in filter(None, text.split(",")):
        k, v = item.split("=")
        kw[k.strip()] = float(v)
    return replace(ControllerParams(), **kw)


def scenario(params):
    return fixtures.coupled_scenario(params=params)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("candidates", nargs="*", default=DEFAULT_CANDIDATES)
    ap.add_argument("--arnoldi", type=int, default=12)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--write", action="store_true")
    ap.add_argument("--dt", type=float, default=fixtures.REFINE_DT)
    ap.add_argument("--basis", choices=("tangent", "coordinate"), default="tangent")
    args = ap.parse_args()
    cfg = ExecutorConfig(dt=args.dt, record=False)

    screened = []
    for text in args.candidates:
        sc = scenario(parse(text))
        t0 = time.time()
        mods = leading_moduli(sc.system, sc.x_star, sc.section, sc.removed, k=args.arnoldi,
                              cfg=cfg, period_hint=sc.gait.period, project=sc.project)
        print(f"{text:40s} ritz {[round(float(m), 3) for m in mods[:4]]} "
              f"{time.time() - t0:.0f}s", flush=True)
        screened.append((float(mods[0]), text))
    best_rho, best = min(screened)
    print("best:", best, round(best_rho, 3))

    summary = {"screen": {t: r for r, t in screened}, "best": best}
    if args.full:
        for label, text in (("zero", "alpha=0,beta=0,gamma=0"), ("tuned", best)):
            sc = scenario(parse(text))
            t0 = time.time()
            rep = stability_report(sc.system, sc.x_star, sc.section, sc.removed, cfg=cfg,
                                   period_hint=sc.gait.period, project=sc.project,
                                   basis=args.basis)
            summary[label] = {"params": text, "rho": rep.spectral_radius,
                              "moduli": [float(m) for m in rep.moduli[:6]],
                              "seconds": time.time() - t0}
            print(label, text, f"rho={rep.spectral_radius:.4f}", f"{time.time() - t0:.0f}s", flush=True)
    print(json.dumps(summary, indent=2))

    if args.write:
        doc = {"format": "coopgait-params", "version": 1,
               "notes": f"selected by tune_dichotomy from {len(screened)} candidates"}
        doc.update(params_to_dict(parse(best)))
        out = Path(__file__).resolve().parents[1] / "src/coopgait/data/planar_walker_params.yaml"
        out.write_text(yaml.safe_dump(doc, sort_keys=False))
        print("wrote", out)


if __name__ == "__main__":
    main()
