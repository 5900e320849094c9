"""Command-line entry point: ``syncsampler --task ... [--preset ...]``.

Exit codes: 0 ok, 2 usage, 3 invalid configuration, 4 runtime failure,
5 file-system failure.  Each run writes into ``<out>/<NNNN>-<hash8>/`` and
finishes with a MANIFEST of checksums whose first line says whether the
run completed.
"""

import argparse
import json
import logging
import os
import re
import sys

import numpy as np

from . import artifacts, plotting
from .config import EMIT_FLAGS, PRESETS, TASKS, load_config_file, resolve
from .denoisers import GMMDenoiser, PatchDenoiser, load_gmm, patch_mixture, ring_mixture
from .diffusion import make_schedule
from .errors import InvalidArgument, InvalidConfiguration, SyncSamplerError
from .experiments import (
    ExperimentReport,
    MetricSeries,
    panorama_nll,
    run_ablation_grid,
    run_divergence_sweep,
    run_inpainting_experiment,
    seam_score,
)
from .projections import EquirectProjector, RingProjector, load_views
from .remote import RemoteDenoiser
from .samplers import Trace, run_sampler

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4, 5
_RUN_DIR = re.compile(r"^(\d{4,})-[0-9a-f]{8}$")

log = logging.getLogger("syncsampler")


def build_parser():
    p = argparse.ArgumentParser(
        prog="syncsampler",
        description="Synchronized diffusion sampling on analytic denoisers.",
    )
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--config", metavar="FILE", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR", help="parent directory for run folders")
    p.add_argument("--emit", metavar="FLAGS", help=f"comma list from {','.join(EMIT_FLAGS)}")
    p.add_argument("--gmm", metavar="FILE", help="mixture JSON replacing the built-in one")
    p.add_argument("--views", metavar="FILE", help="camera list JSON (panorama task)")
    p.add_argument("--algorithm", help="sampler algorithm override")
    p.add_argument("--steps", type=int, help="number of outer steps")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any sampler field (value parsed as JSON when possible)")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="override a task parameter (value parsed as JSON when possible)")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _pairs(items):
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InvalidConfiguration(f"expected KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except ValueError:
            out[key] = raw
    return out


def config_from_args(args):
    file_doc = load_config_file(args.config) if args.config else None
    overrides = _pairs(args.set)
    if args.algorithm is not None:
        overrides["algorithm"] = args.algorithm
    if args.steps is not None:
        overrides["n_outer_steps"] = args.steps
    return resolve(task=args.task, file_doc=file_doc, preset=args.preset,
                   sampler_overrides=overrides, param_overrides=_pairs(args.param),
                   seed=args.seed, out_dir=args.out, emit=args.emit,
                   gmm=args.gmm, views=args.views)


def make_run_dir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    taken = [int(m.group(1)) for m in map(_RUN_DIR.match, os.listdir(cfg.out_dir)) if m]
    n = max(taken, default=0) + 1
    while True:
        run_id = f"{n:04d}-{cfg.config_hash()[:8]}"
        path = os.path.join(cfg.out_dir, run_id)
        try:
            os.mkdir(path)
            return run_id, path
        except FileExistsError:
            n += 1


# --- tasks ------------------------------------------------------------------------

def _trace_report(task, cfg, trace):
    report = ExperimentReport(task, cfg.to_dict())
    report.series.append(MetricSeries(
        "residual", cfg.sampler.algorithm, cfg.seed,
        [(r.step, float(r.t), float(sum(r.residuals))) for r in trace]))
    return report


def _task_panorama(cfg, sched):
    p = cfg.params
    views = load_views(cfg.views) if cfg.views else None
    proj = EquirectProjector(p["height"], view_size=p["view_size"], n_views=p["n_views"],
                             solver=p["solver"], views=views)
    gmm = load_gmm(cfg.gmm) if cfg.gmm else patch_mixture()
    den = PatchDenoiser(gmm)
    sampler_den = RemoteDenoiser(p["denoiser_url"]) if p["denoiser_url"] else den
    trace = Trace()
    z = run_sampler(sampler_den, proj, cfg.sampler, sched, trace)
    report = _trace_report("panorama", cfg, trace)
    try:
        report.summary["seam_score"] = seam_score(z, proj)
    except InvalidArgument as exc:
        log.warning("no seam score for this view layout: %s", exc)
    if views is None:
        report.summary["nll"] = panorama_nll(den, proj, z)
    report.images["panorama"] = z
    return report, trace


def _task_ring(cfg, sched):
    n, w = cfg.params["n"], cfg.params["w"]
    proj = RingProjector(n, w)
    den = GMMDenoiser(load_gmm(cfg.gmm) if cfg.gmm else ring_mixture(w))
    trace = Trace()
    z = run_sampler(den, proj, cfg.sampler, sched, trace)
    report = _trace_report("ring", cfg, trace)
    windows = np.stack([proj.project(z, v) for v in proj.fixed_views()])
    report.summary["nll"] = den.nll(windows)
    report.summary["seam_score"] = seam_score(z, proj, proj.view_set(0))
    report.images["ring"] = z
    return report, trace


def _task_inpaint(cfg, sched):
    p = cfg.params
    gmm = load_gmm(cfg.gmm) if cfg.gmm else None
    report = run_inpainting_experiment(
        seeds=range(cfg.seed, cfg.seed + p["n_seeds"]), gmm=gmm, mask=p["mask"], sched=sched,
        base=cfg.sampler, probe_steps=p["probe_steps"])
    for row in report.table:
        if "win_rate_vs_zero" in row:
            report.summary[f"{row['variant']}_win_rate"] = row["win_rate_vs_zero"]
    return report, None


def _task_divergence(cfg, sched):
    p = cfg.params
    gmm = load_gmm(cfg.gmm) if cfg.gmm else None
    report = run_divergence_sweep(p["counts"], n_chains=p["n_chains"], seed=cfg.seed,
                                  gmm=gmm, sched=sched, t_start=cfg.sampler.t_start)
    report.summary = {k: v for k, v in report.summary["nll"].items()}
    return report, None


def _task_ablation(cfg, sched):
    p = cfg.params
    proj = EquirectProjector(p["height"], view_size=p["view_size"], n_views=p["n_views"])
    den = PatchDenoiser(load_gmm(cfg.gmm) if cfg.gmm else patch_mixture())
    report = run_ablation_grid(cfg.sampler, seeds=range(cfg.seed, cfg.seed + p["n_seeds"]),
                               proj=proj, den=den, sched=sched)
    for row in report.table:
        report.summary[f"row{row['id']}_seam"] = row["median_seam_score"]
        report.summary[f"row{row['id']}_nll"] = row["mean_nll"]
    return report, None


TASK_RUNNERS = {
    "panorama": _task_panorama,
    "ring": _task_ring,
    "inpaint": _task_inpaint,
    "divergence": _task_divergence,
    "ablation": _task_ablation,
}

FIGURES = {
    "inpaint": plotting.plot_inpainting_curves,
    "divergence": plotting.plot_divergence,
    "ablation": plotting.plot_ablation,
}


def _scalar_summary(summary):
    return {k: v for k, v in summary.items() if isinstance(v, (int, float, np.floating))}


def write_outputs(cfg, report, trace, run_dir):
    emit = set(cfg.emit)
    paths = {}
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.canonical_json() + "\n")
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(report.summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if "csv" in emit:
        paths["metrics"] = artifacts.write_metrics_csv(report, os.path.join(run_dir, "metrics.csv"))
        if report.table:
            paths["table"] = artifacts.write_table_csv(report.table, os.path.join(run_dir, "table.csv"))
    if "trace" in emit and trace is not None:
        paths["trace"] = artifacts.write_trace_csv(trace, os.path.join(run_dir, "trace.csv"))
    if "images" in emit:
        img_dir = os.path.join(run_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        for name, arr in report.images.items():
            paths[f"image:{name}"] = artifacts.write_image(os.path.join(img_dir, name), arr)[0]
        fig = FIGURES.get(cfg.task)
        if fig is not None:
            paths["figure"] = fig(report, os.path.join(run_dir, f"{cfg.task}.png"))
        else:
            for name, arr in report.images.items():
                paths[f"figure:{name}"] = plotting.plot_canonical(
                    arr, os.path.join(run_dir, f"{name}.png"))
    report.artifacts = paths
    return paths


def run(cfg, stream=None):
    """Execute a resolved configuration; returns the process exit code."""
    stream = sys.stdout if stream is None else stream
    try:
        run_id, run_dir = make_run_dir(cfg)
    except OSError as exc:
        print(f"error: cannot create run directory: {exc}", file=sys.stderr)
        return EXIT_IO
    sched = make_schedule()
    code, error = EXIT_OK, None
    try:
        report, trace = TASK_RUNNERS[cfg.task](cfg, sched)
        write_outputs(cfg, report, trace, run_dir)
    except OSError as exc:
        code, error = EXIT_IO, f"{type(exc).__name__}: {exc}"
    except (SyncSamplerError, ArithmeticError, ValueError) as exc:
        code, error = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    try:
        artifacts.write_manifest(run_dir, complete=code == EXIT_OK, error=error)
    except OSError as exc:
        print(f"error: cannot write MANIFEST: {exc}", file=sys.stderr)
        return EXIT_IO
    if code != EXIT_OK:
        print(f"error: {error} (partial artifacts in {run_dir})", file=sys.stderr)
        return code
    scalars = ", ".join(f"{k}={v:.6g}" for k, v in sorted(_scalar_summary(report.summary).items()))
    print(f"{cfg.task} {run_id}: {scalars or 'done'} -> {run_dir}", file=stream)
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        print("error: no arguments given; try --help", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)  # exits with status 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (InvalidConfiguration, InvalidArgument) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.print_config:
        print(cfg.canonical_json())
        return EXIT_OK
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
