"""Command-line entry point: register, evaluate, perturb, interpolate, synth and sweep.

Exit codes: 0 success, 1 bad input (usage, parse or I/O error), 2 numerical
abort during optimization. Every flag may also come from ``--config`` (a
JSON object keyed by flag name, or a previous run's manifest.json); flags
given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import neuralfield as nf
from .errors import NonFiniteLoss, OARError, ParseError
from .evaluation import DEFAULT_THRESHOLDS, evaluate, write_errors_csv
from .objective import MatchPairs
from .perturbation import PerturbSpec, occlude, perturb, spec_from_manifest
from .pointcloud_io import NormalizationTransform, PointCloud, load_cloud, normalize, save_cloud
from .registration import (
    RegistrationConfig,
    interpolate_from_params,
    register,
    save_result,
    write_history_csv,
)
from .synthetic import make_benchmark

log = logging.getLogger("oar")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

REGISTER_DEFAULTS = {
    "gt": None, "pairs": None, "epochs": 200, "lr": 1e-4, "sigma2": 1.0, "k": 30,
    "alpha1": 1e4, "alpha2": 1e2, "beta": None, "seed": 0, "omega0": 30.0,
    "kernel": "per_coordinate", "loss": "mcc", "eps": 1e-6, "no_plot": False,
}
CONFIG_FIELDS = ("epochs", "lr", "sigma2", "k", "alpha1", "alpha2", "beta", "seed",
                 "omega0", "kernel", "loss", "eps")

DEFAULTS = {
    "register": REGISTER_DEFAULTS,
    "evaluate": {"raw": False, "thresholds": None, "out": None},
    "perturb": {"occlude": 0.0, "noise": 0.0, "outliers": 0, "seed": 0, "seed_point": None,
                "manifest": None, "replay": None},
    "interpolate": {"run_manifest": None, "format": "ply"},
    "synth": {"n_points": 3000, "shape": "sphere", "warp": "radial", "amplitude": 0.15,
              "frequency": 2.0, "occlude": 0.2, "noise": 0.0, "outliers": 0, "seed": 0},
    "sweep": {**{k: v for k, v in REGISTER_DEFAULTS.items() if k in CONFIG_FIELDS},
              "target": None, "losses": "mcc,cd", "regs": "llr,none", "occlusions": "0,0.2",
              "occlusion_seed": 0, "jobs": 1, "no_plot": False},
}
REQUIRED = {
    "register": ("source", "target", "out_dir"),
    "evaluate": ("pred", "gt"),
    "perturb": ("input", "out"),
    "interpolate": ("source", "checkpoint", "t_list", "out_dir"),
    "synth": ("out_dir",),
    "sweep": ("source", "gt", "out_dir"),
}


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the input-error code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_hyper(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sigma2", type=float, help="kernel variance (default 1.0)")
    p.add_argument("--k", type=int, help="LLR neighbourhood size (default 30)")
    p.add_argument("--alpha1", type=float, help="data term weight (default 1e4)")
    p.add_argument("--alpha2", type=float, help="LLR weight (default 1e2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--omega0", type=float)
    p.add_argument("--kernel", choices=["per_coordinate", "euclidean"])
    p.add_argument("--eps", type=float, help="relative Gram regularization (default 1e-6)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oar", description="Occlusion-aware non-rigid point cloud registration.")
    parser.add_argument("--version", action="version", version=f"oar {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file supplying any flag")
        return p

    p = command("register", "fit a deformation of --source onto --target")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out-dir")
    p.add_argument("--gt", help="ground-truth deformed source, index-aligned, for metrics")
    p.add_argument("--pairs", help="CSV of external correspondences: source_idx,x,y,z")
    _add_hyper(p)
    p.add_argument("--beta", type=float, help="matching weight (default 1 with --pairs, else 0)")
    p.add_argument("--loss", choices=["mcc", "cd"])
    p.add_argument("--no-plot", action="store_const", const=True)

    p = command("evaluate", "print registration metrics as JSON")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--raw", action="store_const", const=True, help="skip ground-truth normalization")
    p.add_argument("--thresholds", type=_floats, help="strict,relaxed,outlier")
    p.add_argument("--out", help="also write the JSON here")

    p = command("perturb", "occlude, jitter and pad a cloud with outliers")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--occlude", type=float, help="fraction removed by a spherical crop")
    p.add_argument("--noise", type=float, help="noise std in percent of the bbox diagonal")
    p.add_argument("--outliers", type=int, help="number of uniform outliers appended")
    p.add_argument("--seed", type=int)
    p.add_argument("--seed-point", type=int, help="fix the crop centre index")
    p.add_argument("--manifest", help="manifest path (default OUT.json)")
    p.add_argument("--replay", help="take the perturbation from an earlier manifest")

    p = command("interpolate", "clouds along the learned displacement field")
    p.add_argument("--source")
    p.add_argument("--checkpoint")
    p.add_argument("--t-list", type=_floats)
    p.add_argument("--out-dir")
    p.add_argument("--run-manifest", help="register manifest providing the frame transforms")
    p.add_argument("--format", choices=["ply", "obj", "xyz"])

    p = command("synth", "write a synthetic source / ground truth / target triple")
    p.add_argument("--out-dir")
    p.add_argument("--n-points", type=int)
    p.add_argument("--shape", choices=["sphere", "cylinder"])
    p.add_argument("--warp", choices=["radial", "sinusoidal"])
    p.add_argument("--amplitude", type=float)
    p.add_argument("--frequency", type=float)
    p.add_argument("--occlude", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--outliers", type=int)
    p.add_argument("--seed", type=int)

    p = command("sweep", "loss x regularizer x occlusion ablation")
    p.add_argument("--source")
    p.add_argument("--gt", help="complete deformed source, index-aligned")
    p.add_argument("--target", help="cloud to occlude (default: --gt)")
    p.add_argument("--out-dir")
    p.add_argument("--losses", help="comma list of mcc,cd")
    p.add_argument("--regs", help="comma list of llr,none")
    p.add_argument("--occlusions", help="comma list of fractions")
    p.add_argument("--occlusion-seed", type=int)
    p.add_argument("--jobs", type=int)
    _add_hyper(p)
    p.add_argument("--no-plot", action="store_const", const=True)
    return parser


def resolve_options(command: str, given: dict, parser) -> dict:
    """Defaults, then --config, then command-line flags."""
    opts = dict(DEFAULTS[command])
    config_path = given.pop("config", None)
    if config_path:
        with open(config_path) as fh:
            loaded = json.load(fh)
        if isinstance(loaded, dict) and isinstance(loaded.get("args"), dict):
            loaded = loaded["args"]
        if not isinstance(loaded, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = set(loaded) - set(opts) - set(REQUIRED[command])
        if unknown:
            raise ValueError(f"{config_path}: unknown option(s) {sorted(unknown)} for {command}")
        opts.update(loaded)
    opts.update(given)
    missing = [k for k in REQUIRED[command] if opts.get(k) in (None, "")]
    if missing:
        parser.error("the following arguments are required: "
                     + ", ".join("--" + ("in" if m == "input" else m.replace("_", "-")) for m in missing))
    return opts


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _versions() -> dict:
    import scipy
    return {"oar": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "platform": platform.platform()}


def _inputs(**paths) -> dict:
    return {name: {"path": str(p), "sha256": sha256(p)} for name, p in paths.items() if p}


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_pairs(path) -> MatchPairs:
    """CSV rows ``source_idx,x,y,z``; an optional header row is skipped."""
    idx, pts = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                i, x, y, z = int(row[0]), float(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError):
                if lineno == 1 and not row[0].strip().lstrip("+-").isdigit():
                    continue  # header
                raise ParseError("expected source_idx,x,y,z", lineno, path)
            idx.append(i)
            pts.append((x, y, z))
    return MatchPairs(np.asarray(idx, dtype=np.int64), np.asarray(pts, dtype=np.float64).reshape(-1, 3))


def _registration_config(opts: dict) -> RegistrationConfig:
    return RegistrationConfig(**{k: opts[k] for k in CONFIG_FIELDS})


# --- subcommands -------------------------------------------------------------

def cmd_register(opts: dict) -> int:
    started, t0 = _now(), time.perf_counter()
    source, target = load_cloud(opts["source"]), load_cloud(opts["target"])
    gt = load_cloud(opts["gt"]) if opts["gt"] else None
    pairs = read_pairs(opts["pairs"]) if opts["pairs"] else None
    cfg = _registration_config(opts)
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    status, code = "ok", EXIT_OK
    try:
        result = register(source, target, pairs, cfg)
    except NonFiniteLoss as exc:
        log.error("%s; writing the last finite state", exc)
        result, status, code = exc.result, f"non_finite_loss at epoch {exc.epoch}", EXIT_NUMERIC

    outputs = save_result(result, out)
    if gt is not None:
        metrics = evaluate(result.deformed, gt)
        _write_json(metrics.to_dict(), out / "metrics.json")
        write_errors_csv(metrics, out / "errors.csv")
        outputs.update(metrics=str(out / "metrics.json"), errors=str(out / "errors.csv"))
    if not opts["no_plot"] and result.history:
        from .plotting import plot_error_histogram, plot_loss_history
        outputs["loss_plot"] = plot_loss_history(result.history, out / "loss.png",
                                                 f"{cfg.loss} loss, {len(source)} -> {len(target)} points")
        if gt is not None:
            outputs["error_plot"] = plot_error_histogram(metrics.per_point_errors, metrics.thresholds,
                                                         out / "errors.png")

    manifest = {
        "subcommand": "register",
        "status": status,
        "args": {**opts},
        "config": cfg.to_dict() | {"beta_resolved": cfg.resolved_beta(pairs is not None and len(pairs) > 0)},
        "inputs": _inputs(source=opts["source"], target=opts["target"], gt=opts["gt"], pairs=opts["pairs"]),
        "outputs": outputs,
        "transforms": {"source": result.source_transform.to_dict(),
                       "target": result.target_transform.to_dict()},
        "epochs_run": len(result.history),
        "started": started,
        "finished": _now(),
        "seconds": time.perf_counter() - t0,
        "versions": _versions(),
    }
    _write_json(manifest, out / "manifest.json")
    if gt is not None:
        print(metrics.to_json())
    return code


def cmd_evaluate(opts: dict) -> int:
    thresholds = tuple(opts["thresholds"]) if opts["thresholds"] else DEFAULT_THRESHOLDS
    if len(thresholds) != 3:
        raise ValueError("--thresholds needs three values: strict,relaxed,outlier")
    metrics = evaluate(load_cloud(opts["pred"]), load_cloud(opts["gt"]),
                       frame="raw" if opts["raw"] else "normalized_by_gt", thresholds=thresholds)
    text = metrics.to_json()
    if opts["out"]:
        Path(opts["out"]).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_perturb(opts: dict) -> int:
    cloud = load_cloud(opts["input"])
    if opts["replay"]:
        with open(opts["replay"]) as fh:
            spec = spec_from_manifest(json.load(fh))
    else:
        spec = PerturbSpec(occlusion_fraction=opts["occlude"], noise_intensity_pct=opts["noise"],
                           outlier_count=opts["outliers"], seed=opts["seed"],
                           seed_point=opts["seed_point"])
    out_cloud, manifest = perturb(cloud, spec)
    save_cloud(out_cloud, opts["out"])
    manifest.update(subcommand="perturb", args={**opts}, inputs=_inputs(input=opts["input"]),
                    output=str(opts["out"]), created=_now())
    _write_json(manifest, opts["manifest"] or str(opts["out"]) + ".json")
    return EXIT_OK


def _t_name(t: float) -> str:
    return f"interp_t{t:.4f}".rstrip("0").rstrip(".")


def cmd_interpolate(opts: dict) -> int:
    source = load_cloud(opts["source"])
    params = nf.load_checkpoint(opts["checkpoint"])
    src_tf = tgt_tf = None
    if opts["run_manifest"]:
        with open(opts["run_manifest"]) as fh:
            tfs = json.load(fh)["transforms"]
        src_tf = NormalizationTransform.from_dict(tfs["source"])
        tgt_tf = NormalizationTransform.from_dict(tfs["target"])
    else:
        _, src_tf = normalize(source)
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in opts["t_list"]:
        cloud = interpolate_from_params(source, params, t, tgt_tf, src_tf)
        path = out / f"{_t_name(t)}.{opts['format']}"
        save_cloud(cloud, path)
        written.append({"t": t, "path": str(path)})
    _write_json({"subcommand": "interpolate", "args": {**opts}, "created": _now(),
                 "inputs": _inputs(source=opts["source"], checkpoint=opts["checkpoint"]),
                 "frame": "target" if tgt_tf is not None else "source",
                 "outputs": written}, out / "manifest.json")
    return EXIT_OK


def cmd_synth(opts: dict) -> int:
    spec = PerturbSpec(occlusion_fraction=opts["occlude"], noise_intensity_pct=opts["noise"],
                       outlier_count=opts["outliers"], seed=opts["seed"])
    case = make_benchmark(opts["n_points"], opts["shape"], opts["warp"], opts["amplitude"],
                          opts["frequency"], spec, opts["seed"])
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for name, cloud in (("source", case.source), ("gt", case.ground_truth), ("target", case.target)):
        save_cloud(cloud, out / f"{name}.ply")
    _write_json({"subcommand": "synth", "args": {**opts}, "created": _now(), **case.manifest},
                out / "manifest.json")
    return EXIT_OK


SWEEP_FIELDS = ("loss", "reg", "occlusion", "target_points", "status", "epe", "acc_s", "acc_r",
                "outlier", "epe_mean_norm", "final_total", "seconds")


def _sweep_job(job: dict) -> dict:
    row = {"loss": job["cfg"]["loss"], "reg": job["reg"], "occlusion": job["occlusion"],
           "target_points": len(job["target"])}
    try:
        result = register(PointCloud(job["source"]), PointCloud(job["target"]),
                          cfg=RegistrationConfig(**job["cfg"]))
        row["status"] = "ok"
    except NonFiniteLoss as exc:
        result, row["status"] = exc.result, f"non_finite_loss@{exc.epoch}"
    m = evaluate(result.deformed, PointCloud(job["gt"]))
    row.update(epe=m.epe, acc_s=m.acc_s, acc_r=m.acc_r, outlier=m.outlier,
               epe_mean_norm=m.epe_mean_norm,
               final_total=result.history[-1]["total"] if result.history else float("nan"),
               seconds=result.seconds)
    run_dir = Path(job["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    write_history_csv(result.history, run_dir / "loss.csv")
    save_cloud(result.deformed, run_dir / "deformed.ply")
    return row


def cmd_sweep(opts: dict) -> int:
    source, gt = load_cloud(opts["source"]), load_cloud(opts["gt"])
    base = load_cloud(opts["target"]) if opts["target"] else gt
    losses = [s.strip() for s in opts["losses"].split(",") if s.strip()]
    regs = [s.strip() for s in opts["regs"].split(",") if s.strip()]
    levels = _floats(opts["occlusions"])
    if set(losses) - {"mcc", "cd"} or set(regs) - {"llr", "none"}:
        raise ValueError("--losses takes mcc,cd and --regs takes llr,none")
    base_cfg = _registration_config({**opts, "beta": None, "loss": "mcc"}).to_dict()
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for occ in levels:
        target, _ = occlude(base, occ, opts["occlusion_seed"])
        for loss in losses:
            for reg_name in regs:
                cfg = {k: base_cfg[k] for k in CONFIG_FIELDS} | {"loss": loss}
                if reg_name == "none":
                    cfg["alpha2"] = 0.0
                jobs.append({"cfg": cfg, "reg": reg_name, "occlusion": occ,
                             "source": source.points, "target": target.points, "gt": gt.points,
                             "run_dir": str(out / "runs" / f"{loss}_{reg_name}_occ{occ:g}")})
    n_jobs = max(1, int(opts["jobs"]))
    log.info("sweep: %d runs on %d worker(s)", len(jobs), n_jobs)
    if n_jobs == 1:
        rows = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))

    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    outputs = {"table": str(out / "sweep.csv")}
    if not opts["no_plot"]:
        from .plotting import plot_sweep
        outputs["plot"] = plot_sweep(rows, out / "sweep.png")
    _write_json({"subcommand": "sweep", "args": {**opts}, "config": base_cfg, "created": _now(),
                 "inputs": _inputs(source=opts["source"], gt=opts["gt"], target=opts["target"]),
                 "outputs": outputs, "versions": _versions()}, out / "manifest.json")
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in rows) else EXIT_OK


COMMANDS = {"register": cmd_register, "evaluate": cmd_evaluate, "perturb": cmd_perturb,
            "interpolate": cmd_interpolate, "synth": cmd_synth, "sweep": cmd_sweep}


def setup_logging() -> None:
    level = os.environ.get("OAR_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    ns = parser.parse_args(argv)
    given = vars(ns)
    command = given.pop("command")
    sub = parser._subparsers._group_actions[0].choices[command]
    try:
        opts = resolve_options(command, given, sub)
        return COMMANDS[command](opts)
    except (OARError, OSError, ValueError) as exc:
        print(f"oar {command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
