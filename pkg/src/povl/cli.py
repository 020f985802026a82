"""``povl`` command line: ingest, generate, train, predict, plan, simulate, report.

Every command writes into a fresh output directory holding its artifacts and
one ``manifest.json`` (command, config hash, seed, input digests, version,
timings).  All randomness comes from the config seed, so equal inputs give
byte-identical CSVs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .features import FeatureError, FeatureTable, T_MAX, T_MIN
from .geometry import GeometryError
from .metrics import BUCKETS, PlanningSample, planning_table, relative_improvement
from .potential import Environment, field_grid
from .predictor import PredictionError, predict_cv, predict_gt, predict_povl_batch
from .scene import (DT, GenerationError, IngestionError, RoadMap, ScenarioError,
                    extract_merging_scenarios, ingest_tracks, load_scenario, load_scenarios,
                    read_tracks, save_scenario, write_tracks)
from .simulate import SimulationConfig, plan_once, simulate_many
from .synthetic import generate_synthetic
from .training import Dataset, evaluate, make_samples, train
from .transformer import load_checkpoint, save_checkpoint

log = logging.getLogger("povl")

PREDICTORS = ("cv", "povl", "gt")
MANIFEST = "manifest.json"


class CLIError(RuntimeError):
    pass


# -- artifacts ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: dict                       # path -> sha256
    tool_version: str = __version__
    timings: dict = field(default_factory=dict)
    arguments: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def write(self, directory: Path):
        self.outputs = sorted(p.relative_to(directory).as_posix()
                              for p in directory.rglob("*") if p.is_file() and p.name != MANIFEST)
        (directory / MANIFEST).write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str))


def read_manifest(directory) -> dict:
    p = Path(directory) / MANIFEST
    if not p.is_file():
        raise CLIError(f"{directory} has no {MANIFEST}; is it an output directory?")
    return json.loads(p.read_text())


def digest(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST)
    for f in files:
        h.update(f.relative_to(p).as_posix().encode() if f != p else b"")
        h.update(f.read_bytes())
    return h.hexdigest()


def fresh_dir(path) -> Path:
    p = Path(path)
    if p.exists() and (not p.is_dir() or any(p.iterdir())):
        raise CLIError(f"output directory {p} already exists and is not empty")
    p.mkdir(parents=True, exist_ok=True)
    return p


def need_file(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} {p} not found")
    return p


def _cell(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r[k]) for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _manifest(args, cfg: RunConfig, inputs) -> RunManifest:
    argd = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func", "out")}
    return RunManifest(args.command, cfg.digest(), cfg.seed,
                       {str(p): digest(p) for p in inputs if p is not None}, arguments=argd)


def _load_model(path):
    if path is None:
        raise CLIError("the povl predictor needs --model")
    model, _ = load_checkpoint(need_file(path, "model checkpoint"))
    return model


def _sim_config(cfg: RunConfig, predictor: str) -> SimulationConfig:
    s = cfg.simulation
    return SimulationConfig(predictor, cfg.planner_config(), s.perception_range, s.ttc_radius,
                            s.ttc_floor, s.bucket_mode)


def _recordings(directory):
    """One scenario per recording directory (scenarios in a directory share its tracks)."""
    root = need_file(directory, "data directory")
    first = {}
    for f in sorted(Path(root).rglob("*.scenario.json")):
        first.setdefault(f.parent, f)
    if not first:
        raise CLIError(f"no *.scenario.json files under {root}")
    return [load_scenario(first[k]) for k in sorted(first)]


# -- commands -------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _config(args)
    tracks_path, map_path = need_file(args.tracks, "tracks file"), need_file(args.map, "map file")
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [tracks_path, map_path])
    t0 = time.perf_counter()
    road = RoadMap.load(map_path)
    tracks = ingest_tracks(tracks_path, args.fps_in)
    scns = extract_merging_scenarios(tracks, road, every=args.every, prefix=args.prefix)
    for scn in scns:
        save_scenario(scn, out, share_files=True)
    if not scns:
        road.save(out / "map.json")
        write_tracks(tracks, out / "tracks.csv")
    m.timings["ingest"] = time.perf_counter() - t0
    m.notes = {"n_tracks": len(tracks), "n_scenarios": len(scns)}
    m.write(out)
    print(f"{len(tracks)} tracks, {len(scns)} merging scenarios -> {out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.data.n_recordings
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [args.config])
    t0 = time.perf_counter()
    made, skipped, seed = 0, [], cfg.seed
    while made < n:
        if seed - cfg.seed > 10 * n + 100:
            raise CLIError(f"generator produced only {made} of {n} recordings")
        try:
            scn = generate_synthetic(cfg.generator, seed=seed, scenario_id=f"rec{seed:05d}")
        except GenerationError as e:
            skipped.append({"seed": seed, "reason": str(e)})
        else:
            save_scenario(scn, out / f"rec{seed:05d}")
            made += 1
        seed += 1
    m.timings["generate"] = time.perf_counter() - t0
    m.notes = {"n_recordings": made, "skipped_seeds": skipped}
    m.write(out)
    print(f"{made} synthetic recordings -> {out}")
    return 0


def _split(recs, fraction):
    n_test = max(1, int(math.ceil(fraction * len(recs)))) if len(recs) > 1 else 0
    return recs[:len(recs) - n_test], recs[len(recs) - n_test:]


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = cfg.training
    if args.max_batches is not None:
        tcfg = replace(tcfg, max_batches=args.max_batches)
    data = need_file(args.data, "data directory")
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [data, args.config])
    t0 = time.perf_counter()
    recs = _recordings(data)
    train_recs, test_recs = _split(recs, cfg.data.test_fraction)
    parts = []
    for i, scn in enumerate(train_recs):
        table = FeatureTable(scn.tracks, scn.map)
        parts.append(make_samples(scn.tracks, scn.map, seed=cfg.seed + i, stride=cfg.data.stride,
                                  table=table, recording=scn.scenario_id))
    dataset = Dataset.concat(parts)
    m.timings["samples"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    result = train(dataset, replace(cfg.model, seed=cfg.seed), replace(tcfg, seed=cfg.seed))
    m.timings["train"] = time.perf_counter() - t1
    save_checkpoint(out / "model.npz", result.model, result.meta)
    write_csv(out / "loss_curve.csv", ({"step": i, "nll": v} for i, v in enumerate(result.losses)),
              ["step", "nll"])
    notes = {"n_train_samples": len(dataset), "status": result.status,
             "train_recordings": [s.scenario_id for s in train_recs],
             "test_recordings": [s.scenario_id for s in test_recs]}
    if test_recs:
        t2 = time.perf_counter()
        tests = [make_samples(s.tracks, s.map, t_obs=T_MAX, stride=cfg.data.eval_stride,
                              recording=s.scenario_id) for s in test_recs]
        test = Dataset.concat(tests)
        if len(test):
            rep = evaluate(result.model, test, test_recs[0].map)
            write_csv(out / "rmse_horizon.csv", rep.rows_horizon())
            write_csv(out / "rmse_obslength.csv", rep.rows_obslength())
            notes["n_test_samples"] = len(test)
        m.timings["evaluate"] = time.perf_counter() - t2
    m.notes = notes
    m.write(out)
    print(f"trained on {len(dataset)} samples ({result.status}) -> {out / 'model.npz'}")
    return 0 if result.status == "ok" else 1


def cmd_predict(args) -> int:
    cfg = _config(args)
    tracks_path, map_path = need_file(args.tracks, "tracks file"), need_file(args.map, "map file")
    if not T_MIN <= args.t_obs <= T_MAX:
        raise CLIError(f"--t-obs must lie in [{T_MIN}, {T_MAX}]")
    model = _load_model(args.model) if args.predictor == "povl" else None
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [tracks_path, map_path, args.model])
    t0 = time.perf_counter()
    road = RoadMap.load(map_path)
    tracks = read_tracks(tracks_path, fps_in=args.fps_in)
    table = FeatureTable(tracks, road) if model is not None else None
    rows, skipped = [], 0
    for vid in sorted(tracks):
        tr = tracks[vid]
        frames = [int(f) for f in tr.frames[args.t_obs - 1::args.stride]]
        preds = []
        if model is not None:
            windows = [table.window(vid, f, args.t_obs) for f in frames]
            try:
                preds = predict_povl_batch(windows, model, road, clamp=True)
            except (GeometryError, FeatureError) as e:
                log.warning("vehicle %d: %s", vid, e)
                skipped += len(frames)
                continue
        else:
            for f in frames:
                try:
                    preds.append(predict_gt(tr, f) if args.predictor == "gt" else predict_cv(tr, f))
                except PredictionError:
                    skipped += 1
        for p in preds:
            for k in range(len(p.positions)):
                c = p.covariance[k]
                rows.append({"vehicle_id": vid, "frame": p.frame, "t_obs": args.t_obs,
                             "step": k + 1, "t": round((k + 1) * DT, 6),
                             "x": p.positions[k, 0], "y": p.positions[k, 1],
                             "var_x": c[0, 0], "cov_xy": c[0, 1], "var_y": c[1, 1]})
    cols = ["vehicle_id", "frame", "t_obs", "step", "t", "x", "y", "var_x", "cov_xy", "var_y"]
    write_csv(out / "predictions.csv", rows, cols)
    m.timings["predict"] = time.perf_counter() - t0
    m.notes = {"n_rows": len(rows), "skipped_anchors": skipped}
    m.write(out)
    print(f"{len(rows)} prediction rows -> {out / 'predictions.csv'}")
    return 0


def cmd_plan(args) -> int:
    cfg = _config(args)
    scn_path = need_file(args.scenario, "scenario file")
    model = _load_model(args.model) if args.predictor == "povl" else None
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [scn_path, args.model, args.config])
    t0 = time.perf_counter()
    scn = load_scenario(scn_path)
    plan, preds = plan_once(scn, _sim_config(cfg, args.predictor), model)
    rows = []
    for k, x in enumerate(plan.states):
        r = {"step": k, "t": round(k * cfg.planner.dt, 6), "X": x[0], "u": x[1], "Y": x[2],
             "v": x[3], "psi": x[4], "r": x[5]}
        if k < len(plan.controls):
            r.update(F_u=plan.controls[k, 0], delta_f=plan.controls[k, 1])
        else:
            r.update(F_u="", delta_f="")
        for key in ("U_ev", "U_env", "U_ref"):
            r[key] = plan.breakdown[key][k - 1] if k > 0 else ""
        rows.append(r)
    write_csv(out / "plan.csv", rows)
    from .plotting import plot_plan
    plot_plan(rows, out / "plan.png")
    m.timings["plan"] = time.perf_counter() - t0
    m.notes = {"status": plan.status, "iterations": plan.iterations, "cost": plan.cost,
               "n_predicted": len(preds)}
    m.write(out)
    print(f"plan {plan.status} after {plan.iterations} iterations, cost {plan.cost:.4f} -> {out}")
    return 0


STEP_COLUMNS = ["scenario", "predictor", "step", "t", "X", "u", "Y", "v", "psi", "r", "F_u",
                "delta_f", "plan_cost", "status", "gap", "inv_ttc_max", "jerk", "n_predicted"]


def _planning_rows(table: dict):
    return [{"bucket_m": D, "ittc_x100": v["ittc"], "jerk": v["jerk"], "force_kN": v["force"],
             "n_steps": v["n_steps"]} for D, v in table.items()]


def cmd_simulate(args) -> int:
    cfg = _config(args)
    scen = need_file(args.scenarios, "scenario directory")
    model = _load_model(args.model) if args.predictor == "povl" else None
    workers = args.workers if args.workers is not None else cfg.simulation.workers
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, [scen, args.model, args.config])
    t0 = time.perf_counter()
    scns = load_scenarios(scen) if scen.is_dir() else [load_scenario(scen)]
    if not scns:
        raise CLIError(f"no scenarios under {scen}")
    results = simulate_many(scns, _sim_config(cfg, args.predictor), model, workers)
    m.timings["simulate"] = time.perf_counter() - t0
    steps, inv, summary = [], [], []
    for r in results:
        steps.extend(r.rows())
        s = r.sample
        for k, arr in enumerate(s.inv_ttc):
            for j, v in enumerate(np.asarray(arr)):
                inv.append({"scenario": r.scenario_id, "step": k + 1, "pair": j, "inv_ttc": v})
        pooled = np.concatenate([np.asarray(a) for a in s.inv_ttc]) if s.inv_ttc else np.zeros(0)
        jerk = s.jerk[np.isfinite(s.jerk)]
        summary.append({"scenario": r.scenario_id, "predictor": r.predictor,
                        "ittc_x100": 100 * float(pooled.mean()) if pooled.size else 0.0,
                        "jerk": float(jerk.mean()) if jerk.size else float("nan"),
                        "force_kN": float(s.force.mean()) / 1000,
                        "min_gap": float(np.min(s.distance)),
                        "solver_failures": sum(st == "failed" for st in r.status)})
    write_csv(out / "steps.csv", steps, STEP_COLUMNS)
    write_csv(out / "inv_ttc.csv", inv, ["scenario", "step", "pair", "inv_ttc"])
    write_csv(out / "summary.csv", summary)
    write_csv(out / "planning.csv", _planning_rows(planning_table([r.sample for r in results])))
    m.notes = {"predictor": args.predictor, "n_scenarios": len(results), "workers": workers}
    m.write(out)
    print(f"{len(results)} scenarios with {args.predictor} predictions -> {out}")
    return 0


def load_samples(run_dir) -> tuple[str, list[PlanningSample]]:
    """Rebuild per-scenario planning samples from a simulate output directory."""
    run = Path(run_dir)
    man = read_manifest(run)
    if man["command"] != "simulate":
        raise CLIError(f"{run} is a {man['command']} run, not simulate")
    pred = man["arguments"]["predictor"]
    steps = read_csv(run / "steps.csv")
    inv = read_csv(run / "inv_ttc.csv")
    by_scn: dict[str, dict] = {}
    for r in steps:
        d = by_scn.setdefault(r["scenario"], {"rows": [], "inv": {}})
        d["rows"].append(r)
    for r in inv:
        by_scn[r["scenario"]]["inv"].setdefault(int(r["step"]), []).append(float(r["inv_ttc"]))
    out = []
    for sid in sorted(by_scn):
        d = by_scn[sid]
        rows = sorted(d["rows"], key=lambda r: int(r["step"]))
        out.append(PlanningSample(
            sid, pred,
            [np.array(d["inv"].get(int(r["step"]), [])) for r in rows],
            np.array([float(r["jerk"]) for r in rows]),
            np.array([abs(float(r["F_u"])) for r in rows]),
            np.array([float(r["gap"]) for r in rows])))
    return pred, out


def comparison_rows(tables: dict, thresholds=BUCKETS):
    """Comparison layout: one row per (metric, predictor) plus (CV-X)/CV rows, buckets as columns."""
    rows = []
    for key, name in (("ittc", "iTTC_x100"), ("jerk", "jerk_m_s3"), ("force", "force_kN")):
        for pred in tables:
            rows.append({"metric": name, "row": pred,
                         **{f"<{D:g}": tables[pred][D][key] for D in thresholds}})
        if "cv" in tables:
            for pred in tables:
                if pred == "cv":
                    continue
                rows.append({"metric": name, "row": f"(CV-{pred.upper()})/CV",
                             **{f"<{D:g}": relative_improvement(tables["cv"][D][key],
                                                                tables[pred][D][key])
                                for D in thresholds}})
    rows.append({"metric": "n_steps", "row": "all",
                 **{f"<{D:g}": next(iter(tables.values()))[D]["n_steps"] for D in thresholds}})
    return rows


def cmd_report(args) -> int:
    from . import plotting

    cfg = _config(args)
    runs = [need_file(r, "run directory") for r in args.runs]
    out = fresh_dir(args.out)
    m = _manifest(args, cfg, runs + [Path(args.field_slice)] if args.field_slice else runs)
    t0 = time.perf_counter()
    tables, written = {}, []
    order = {p: i for i, p in enumerate(("gt", "povl", "cv"))}
    for run in runs:
        man = read_manifest(run)
        if man["command"] == "simulate":
            pred, samples = load_samples(run)
            if pred in tables:
                raise CLIError(f"two simulate runs for predictor {pred}")
            tables[pred] = planning_table(samples)
        elif man["command"] == "train":
            for name, plot in (("rmse_horizon.csv", plotting.plot_rmse_horizon),
                               ("rmse_obslength.csv", plotting.plot_rmse_obslength)):
                if (run / name).is_file():
                    rows = read_csv(run / name)
                    write_csv(out / name, rows)
                    plot(rows, out / name.replace(".csv", ".png"))
                    written.append(name)
        else:
            raise CLIError(f"cannot report on a {man['command']} run ({run})")
    if tables:
        tables = {k: tables[k] for k in sorted(tables, key=lambda p: order.get(p, 9))}
        write_csv(out / "planning_comparison.csv", comparison_rows(tables))
        plotting.plot_planning(tables, out / "planning_comparison.png")
        written.append("planning_comparison.csv")
    if args.field_slice:
        scn = load_scenario(need_file(args.field_slice, "scenario file"))
        ego = scn.ego.pos[scn.ego.index(scn.start_frame)]
        obs = [t.pos[t.index(scn.start_frame)] for t in scn.others() if t.has_frame(scn.start_frame)]
        X, Y, U = field_grid(Environment.from_map(scn.map), np.array(obs).reshape(-1, 2),
                             cfg.potential, xlim=(ego[0] - 60, ego[0] + 60),
                             ylim=(ego[1] - 5, ego[1] + 12), nx=args.nx, ny=args.ny)
        write_csv(out / "field_slice.csv",
                  ({"X": x, "Y": y, "U": u} for x, y, u in zip(X.ravel(), Y.ravel(), U.ravel())),
                  ["X", "Y", "U"])
        plotting.plot_field(X, Y, U, out / "field_slice.png")
        written.append("field_slice.csv")
    if not written:
        raise CLIError("nothing to report: pass simulate or train run directories, or --field-slice")
    m.timings["report"] = time.perf_counter() - t0
    m.write(out)
    print(f"report ({', '.join(written)}) -> {out}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="povl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"povl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_, out_help="fresh output directory"):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", type=Path, help="INI run configuration (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, required=True, help=out_help)
        sp.set_defaults(func=func)
        return sp

    sp = add("ingest", cmd_ingest, "Downsample a track CSV to 5 fps and extract merging scenarios.")
    sp.add_argument("--tracks", type=Path, required=True, help="track CSV (frame,id,x,y,vx,vy,ax,ay,lane_id,width,length)")
    sp.add_argument("--map", type=Path, required=True, help="road map JSON")
    sp.add_argument("--fps-in", type=float, default=25.0, help="frame rate of the CSV (default 25)")
    sp.add_argument("--every", type=int, default=5, help="scenario start every k-th merge frame")
    sp.add_argument("--prefix", default="scn", help="scenario id prefix")

    sp = add("generate", cmd_generate, "Generate synthetic merge recordings, one scenario each.")
    sp.add_argument("--n", type=int, help="number of recordings (default: [data] n_recordings)")

    sp = add("train", cmd_train, "Train the prediction model on recordings and evaluate on held-out ones.")
    sp.add_argument("--data", type=Path, required=True, help="directory of recordings (generate/ingest output)")
    sp.add_argument("--max-batches", type=int, help="override [training] max_batches")

    sp = add("predict", cmd_predict, "Predict 5 s trajectories for every vehicle of a track CSV.")
    sp.add_argument("--tracks", type=Path, required=True)
    sp.add_argument("--map", type=Path, required=True)
    sp.add_argument("--t-obs", type=int, default=T_MAX, help=f"observation length {T_MIN}..{T_MAX}")
    sp.add_argument("--predictor", choices=PREDICTORS, default="povl")
    sp.add_argument("--model", type=Path, help="checkpoint (povl only)")
    sp.add_argument("--fps-in", type=float, default=5.0, help="frame rate of the CSV (default 5)")
    sp.add_argument("--stride", type=int, default=1, help="predict every k-th frame")

    sp = add("plan", cmd_plan, "Solve one open-loop plan at a scenario's start.")
    sp.add_argument("--scenario", type=Path, required=True, help="*.scenario.json file")
    sp.add_argument("--predictor", choices=PREDICTORS, default="cv")
    sp.add_argument("--model", type=Path, help="checkpoint (povl only)")

    sp = add("simulate", cmd_simulate, "Closed-loop MPC over scenarios with one predictor.")
    sp.add_argument("--scenarios", type=Path, required=True, help="directory of *.scenario.json (searched recursively) or one file")
    sp.add_argument("--predictor", choices=PREDICTORS, default="cv")
    sp.add_argument("--model", type=Path, help="checkpoint (povl only)")
    sp.add_argument("--workers", type=int, help="process pool size (default: [simulation] workers)")

    sp = add("report", cmd_report, "Tables and PNG plots from train/simulate runs.")
    sp.add_argument("runs", nargs="*", type=Path, help="train or simulate output directories")
    sp.add_argument("--field-slice", metavar="SCENARIO", help="also sample U_env around a scenario's start")
    sp.add_argument("--nx", type=int, default=241)
    sp.add_argument("--ny", type=int, default=69)
    return p


ERRORS = (CLIError, ConfigError, IngestionError, GenerationError, ScenarioError, GeometryError,
          FeatureError, PredictionError, ValueError, OSError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:   # --help, --version and usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ERRORS as e:
        print(f"povl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
