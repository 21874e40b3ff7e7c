"""Scenario runner.

    coopgait --mode product-graph --cycle 8
    coopgait --mode single --strides 2 --out run1
    coopgait --mode coupled --alpha 0.5 --beta 0.5 --gamma 0.5 --strides 1 --out run2
    coopgait --mode refine --out refined
    coopgait --mode stability --out stab

Outputs are deterministic for identical arguments: no timestamps, fixed
column order, seeded randomness.  Failures print one JSON error record on
stderr (and to <out>/error.json when an output directory is in use) and exit
nonzero.  Set COOPGAIT_LOG=DEBUG|INFO|WARNING for log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import fixtures
from .analysis import Section, ReturnMapError, audits, poincare_map, stability_report
from .control import (ControllerParams, NominalController, load_params, params_to_dict)
from .gait import ShootingError, load_gait, refine_periodic, save_gait
from .hybrid import AgentSystem, ExecutorConfig, GaitGraph, HybridError, Mode, step_hybrid, \
    strong_product
from .model import ModelError, load_model

log = logging.getLogger("coopgait.cli")

MODES = ("single", "coupled", "refine", "stability", "product-graph")
EXIT_USAGE, EXIT_INPUT, EXIT_SIMULATION, EXIT_NUMERICS = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ----------------------------------------------------------------- parsing

def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}")
    return a, b


def _perturb(text: str) -> tuple[str, float]:
    coord, sep, mag = text.rpartition(":")
    if not sep or not coord:
        raise argparse.ArgumentTypeError(f"expected 'coord:magnitude', got {text!r}")
    try:
        return coord, float(mag)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad magnitude in {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopgait", description="Cooperative locomotion scenarios.")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--model", help="robot model YAML (default: packaged planar walker)")
    p.add_argument("--model2", help="second agent's model (default: same as --model)")
    p.add_argument("--gait", help="gait YAML (default: packaged refined gait)")
    p.add_argument("--params", help="controller parameter YAML (default: packaged tuned set)")
    p.add_argument("--d", type=_pair, default=fixtures.DEFAULT_D,
                   help="nominal offset of agent 2: along-track, lateral")
    p.add_argument("--bar-length", type=float, default=fixtures.DEFAULT_BAR_LENGTH)
    p.add_argument("--strides", type=int, default=1)
    p.add_argument("--dt", type=float, help="RK4 step (default: the step the gait was refined at)")
    p.add_argument("--perturb", type=_perturb,
                   help="initial perturbation 'coord:mag'; coord is a state index, a log "
                        "column name such as v1_2, or 'random'")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--qp-weight", type=float)
    p.add_argument("--controller", choices=("distributed", "nominal"), default="distributed")
    p.add_argument("--stability", action="store_true",
                   help="coupled mode: also compute the Poincare stability report")
    p.add_argument("--basis", choices=("tangent", "coordinate"), default="tangent",
                   help="perturbation directions for the coupled stability Jacobian")
    p.add_argument("--noise", type=float, default=0.0,
                   help="std of Gaussian noise on the shared measurements (default off)")
    p.add_argument("--cycle", type=int, default=8, help="product-graph mode: cycle length")
    p.add_argument("--knots", type=int, default=17, help="refine mode: knots per domain")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------- helpers

def _load(fn, path, what):
    try:
        return fn(path)
    except FileNotFoundError:
        raise CliError("file-error", f"{what} not found: {path}", EXIT_INPUT)
    except (ModelError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise CliError("file-error", f"cannot parse {what} {path}: {exc}", EXIT_INPUT)


def _params(args) -> ControllerParams:
    if args.params:
        params = _load(load_params, args.params, "parameter file")
    else:
        params = fixtures.walker_params()
    over = {k: getattr(args, k) for k in ("alpha", "beta", "gamma", "qp_weight")
            if getattr(args, k) is not None}
    try:
        return dataclasses.replace(params, **over)
    except ValueError as exc:
        raise CliError("usage", str(exc), EXIT_USAGE)


def _model(path):
    return _load(load_model, path, "model") if path else fixtures.walker_model()


def _gait(args):
    return _load(load_gait, args.gait, "gait") if args.gait else fixtures.walker_gait()


def _cfg(args, gait, record=True) -> ExecutorConfig:
    dt = args.dt if args.dt is not None else float(gait.meta.get("dt") or 1e-3)
    if not dt > 0:
        raise CliError("usage", "--dt must be positive", EXIT_USAGE)
    return ExecutorConfig(dt=dt, record=record)


def _columns(n_agents, n):
    return [f"{w}{a + 1}_{i}" for a in range(n_agents) for w in ("q", "v") for i in range(n)]


def _apply_perturbation(x, spec, rng, n_agents, n, removed):
    if spec is None:
        return x, None
    coord, mag = spec
    x = x.copy()
    if coord == "random":
        direction = rng.standard_normal(x.size)
        direction[removed] = 0.0
        direction /= np.max(np.abs(direction))
        x += mag * direction
        return x, {"coordinate": "random", "magnitude": mag}
    cols = _columns(n_agents, n)
    if coord in cols:
        k = cols.index(coord)
    else:
        try:
            k = int(coord)
        except ValueError:
            raise CliError("usage", f"unknown perturbation coordinate {coord!r}", EXIT_USAGE)
    if not 0 <= k < x.size:
        raise CliError("usage", f"perturbation index {k} out of range", EXIT_USAGE)
    x[k] += mag
    return x, {"coordinate": cols[k], "magnitude": mag}


def _run(system, x0, section_domains, strides, period, cfg):
    seen = [0]

    def stop(ev, mode):
        if mode.domains == section_domains:
            seen[0] += 1
        return seen[0] >= strides

    mode = Mode(section_domains, tuple(0.0 for _ in section_domains))
    out = step_hybrid(cfg, system, x0, mode, 0.0, (strides + 0.5) * period, stop=stop)
    if out.status != "stopped":
        raise CliError("simulation-" + out.status, out.message or out.status, EXIT_SIMULATION)
    return out


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _clean(obj):
    """JSON-safe copy with floats rounded to 12 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(f"{float(obj):.12g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write_log(out: Path, tlog, meta) -> None:
    tlog.meta.update(meta)
    tlog.to_csv(out / "trajectory.csv")
    tlog.meta = _clean(tlog.meta)
    tlog.to_json(out / "events.json")


# ------------------------------------------------------------------ modes

def mode_product_graph(args, out):
    if args.cycle < 1:
        raise CliError("usage", "--cycle must be positive", EXIT_USAGE)
    P = strong_product(GaitGraph.cycle(args.cycle))
    line = f"{len(P.vertices)} vertices, {len(P.edges)} edges"
    print(line)
    if out is not None:
        _dump(out / "product_graph.json",
              {"format": "coopgait-product-graph", "version": 1, "cycle": args.cycle,
               "vertices": [list(v) for v in P.vertices],
               "edges": [[list(a), list(b), c] for a, b, c in P.edges]})


def mode_single(args, out):
    model = _model(args.model)
    gait = _gait(args)
    params = _params(args)
    graph = fixtures.walker_graph()
    spec = fixtures.walker_outputs()
    try:
        spec.validate(model)
    except ValueError as exc:
        raise CliError("file-error", f"model does not fit the walker outputs: {exc}", EXIT_INPUT)
    system = AgentSystem(model, graph, NominalController(model, graph, gait, spec, params),
                         gait.durations)
    x0 = np.array(gait.meta.get("fixed_point") or gait.state(0.0)[2].x, dtype=float)
    rng = np.random.default_rng(args.seed)
    x0, pert = _apply_perturbation(x0, args.perturb, rng, 1, model.n,
                                   list(model.horizontal_indices))
    tlog = _run(system, x0, (gait.order[0],), args.strides, gait.period, _cfg(args, gait))
    report = _clean(audits(tlog, model, graph=graph))
    meta = {"mode": "single", "seed": args.seed, "strides": args.strides,
            "perturbation": pert, "params": params_to_dict(params)}
    if out is not None:
        _write_log(out, tlog, meta)
        _dump(out / "audit.json", report)
    print(f"single: {args.strides} stride(s), {len(tlog.events)} events, status {tlog.status}")


def _scenario(args, rng):
    model = _model(args.model)
    model2 = _model(args.model2) if args.model2 else model
    gait = _gait(args)
    params = _params(args)
    try:
        sc = fixtures.coupled_scenario(gait, params, args.d, args.bar_length, args.controller,
                                       model, model2, theta_noise=args.noise, rng=rng)
    except ValueError as exc:
        raise CliError("usage", str(exc), EXIT_USAGE)
    if sc.geometry_mismatch > 1e-6:
        log.warning("bar length %.6f does not match the lifted-orbit geometry "
                    "(mismatch %.3e m)", args.bar_length, sc.geometry_mismatch)
    return sc, params


def _stability(sc, args, gait):
    cfg = _cfg(args, gait, record=False)
    try:
        res = stability_report(sc.system, sc.x_star, sc.section, sc.removed, cfg,
                               period_hint=gait.period, project=sc.project, basis=args.basis)
    except (ReturnMapError, HybridError, np.linalg.LinAlgError) as exc:
        raise CliError("stability-failed", str(exc), EXIT_NUMERICS)
    return res


def mode_coupled(args, out):
    rng = np.random.default_rng(args.seed)
    sc, params = _scenario(args, rng)
    x0, pert = _apply_perturbation(sc.x_star, args.perturb, rng, 2, sc.model.n, sc.removed)
    if pert is not None:
        x0 = sc.project(x0)
    tlog = _run(sc.system, x0, sc.section.domains, args.strides, sc.gait.period,
                _cfg(args, sc.gait))
    report = audits(tlog, sc.model, bar=sc.bar, graph=sc.graph)
    q = np.setdiff1d(np.arange(x0.size), sc.removed)
    report["return_error"] = float(np.max(np.abs(tlog.final_state[q] - sc.x_star[q])))
    meta = {"mode": "coupled", "seed": args.seed, "strides": args.strides,
            "controller": args.controller, "d": list(sc.d), "bar_length": sc.bar.length,
            "noise": args.noise, "perturbation": pert, "params": params_to_dict(params)}
    line = f"coupled: {args.strides} stride(s), {len(tlog.events)} events, " \
           f"return error {report['return_error']:.3e}"
    if args.stability:
        res = _stability(sc, args, sc.gait)
        report["spectral_radius"] = res.spectral_radius
        res.meta = {**res.meta, **_clean(meta)}
        if out is not None:
            res.to_json(out / "stability.json")
        line += f", spectral radius {res.spectral_radius:.6f}"
    if out is not None:
        _write_log(out, tlog, meta)
        _dump(out / "audit.json", _clean(report))
    print(line)


def mode_stability(args, out):
    rng = np.random.default_rng(args.seed)
    sc, params = _scenario(args, rng)
    res = _stability(sc, args, sc.gait)
    res.meta = {**res.meta, **_clean({"controller": args.controller, "d": list(sc.d),
                       "bar_length": sc.bar.length, "seed": args.seed,
                       "dt": _cfg(args, sc.gait).dt, "params": params_to_dict(params)})}
    if out is not None:
        res.to_json(out / "stability.json")
    verdict = "stable" if res.spectral_radius < 1 else "unstable"
    print(f"spectral radius {res.spectral_radius:.6f} ({verdict})")


def mode_refine(args, out):
    model = _model(args.model)
    params = _params(args) if args.params else ControllerParams()
    graph = fixtures.walker_graph()
    spec = fixtures.walker_outputs()
    seed = fixtures.seed_gait(model)
    dt = args.dt if args.dt is not None else fixtures.REFINE_DT
    cfg = ExecutorConfig(dt=dt, record=False)
    try:
        x0 = fixtures.settle(seed, model, graph, spec, params, cfg)
        res = refine_periodic(seed, model, graph, spec, params, knots=args.knots, cfg=cfg,
                              x_init=x0, log=lambda h: log.info("refine %s", h))
    except (ShootingError, ReturnMapError, HybridError, np.linalg.LinAlgError) as exc:
        raise CliError("refine-failed", str(exc), EXIT_NUMERICS)
    if out is not None:
        save_gait(res.gait, out / "gait.yaml")
        _dump(out / "refine.json", _clean({"residual": res.residual, "rounds": res.rounds,
                                           "newton_steps": res.newton_steps,
                                           "history": res.history}))
    print(f"refined: residual {res.residual:.3e} after {res.rounds} round(s)")


DISPATCH = {"product-graph": mode_product_graph, "single": mode_single,
            "coupled": mode_coupled, "stability": mode_stability, "refine": mode_refine}


def _setup_logging():
    level = os.environ.get("COOPGAIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING) if not level.isdigit()
                        else int(level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Path(args.out) if args.out else None
    try:
        if args.strides < 1:
            raise CliError("usage", "--strides must be at least 1", EXIT_USAGE)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        DISPATCH[args.mode](args, out)
    except CliError as exc:
        record = {"format": "coopgait-error", "version": 1, "mode": args.mode,
                  "error": exc.kind, "message": str(exc), "exit_code": exc.code}
        text = json.dumps(record, sort_keys=True)
        print(text, file=sys.stderr)
        if out is not None and out.is_dir():
            (out / "error.json").write_text(text + "\n")
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
