"""Command line entry points: ``synth``, ``solve`` and ``eval``.

Exit codes: 0 success, 2 bad input or validation failure, 3 numerical
failure (the loss trace is written before exiting).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import __version__
from .elasticity import EprField, StrainField, epr, strain_from_displacement
from .metrics import MetricError, WindowSpec, cnr, rmse_field, sr
from .phantom import PhantomSpec, PhantomSpecError, make_pair
from .raster_io import (
    RasterFormatError,
    atomic_write_bytes,
    atomic_write_text,
    dumps,
    git_blob_hash,
    read_raster,
    write_raster,
)
from .signal_proc import RfFrame
from .solver import DivergenceError, SolveReport, SolverConfig, solve

log = logging.getLogger("picture")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

# fixed grey-level bounds for rendered images, so renders compare across runs
DISPLAY_BOUNDS = {"e11": (-0.02, 0.0), "e22": (0.0, 0.01), "epr": (0.0, 1.0)}
METRIC_COLUMNS = ("method", "field", "metric", "mean", "std", "n_patches")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _ensure_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise InputError(f"output directory {out} is not writable")
    return out


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc}") from exc


def _load(path, what: str):
    try:
        return read_raster(path)
    except FileNotFoundError as exc:
        raise InputError(f"{what} not found: {exc.filename}") from exc


def _file_hashes(stem) -> dict:
    stem = Path(stem)
    stem = stem.with_suffix("") if stem.suffix in (".f32", ".json") else stem
    return {
        "payload": git_blob_hash(stem.with_suffix(".f32").read_bytes()),
        "sidecar": git_blob_hash(stem.with_suffix(".json").read_bytes()),
    }


def _epr_raster(v: EprField) -> np.ndarray:
    # invalid pixels (|e11| below the floor) carry NaN
    return np.where(v.valid, v.ve, np.nan)


# -- synth ---------------------------------------------------------------------


def cmd_synth(spec_path, out_dir, seed=None) -> dict:
    raw = _read_json(spec_path, "phantom spec")
    if seed is not None:
        raw = dict(raw, seed=int(seed))
    spec = PhantomSpec.from_dict(raw)
    out = _ensure_dir(out_dir)
    i1, i2, gt = make_pair(spec)
    freqs = {"sampling_freq": spec.psf.sampling_freq, "center_freq": spec.psf.center_freq}
    rasters = {
        "i1": (i1.samples, "rf", freqs),
        "i2": (i2.samples, "rf", freqs),
        "gt_w1": (gt.displacement.w1, "disp_axial", None),
        "gt_w2": (gt.displacement.w2, "disp_lateral", None),
        "gt_e11": (gt.strain.e11, "strain", None),
        "gt_e22": (gt.strain.e22, "strain", None),
        "gt_epr": (_epr_raster(gt.epr_true), "epr", None),
    }
    for name, (data, semantic, fr) in rasters.items():
        write_raster(out / name, data, semantic, frequencies=fr)
    manifest = {
        "command": "synth",
        "version": __version__,
        "spec": spec.to_dict(),
        "outputs": {name: _file_hashes(out / name) for name in rasters},
    }
    atomic_write_text(out / "manifest.json", dumps(manifest))
    return manifest


# -- solve ---------------------------------------------------------------------


def _frame(raster) -> RfFrame:
    fr = raster.frequencies or {}
    try:
        return RfFrame(raster.data.astype(np.float64), **fr)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad RF raster: {exc}") from exc


def _method_name(cfg: SolverConfig) -> str:
    return "picture" if cfg.weights.lambda_v > 0 else "no-epr"


def _write_solution(out: Path, report: SolveReport, cfg: SolverConfig) -> dict:
    d = report.displacement
    s = strain_from_displacement(d, cfg.stencil)
    v = epr(s, cfg.epr_floor)
    rasters = {
        "w1": (d.w1, "disp_axial"),
        "w2": (d.w2, "disp_lateral"),
        "e11": (s.e11, "strain"),
        "e22": (s.e22, "strain"),
        "epr": (_epr_raster(v), "epr"),
    }
    for name, (data, semantic) in rasters.items():
        write_raster(out / name, data, semantic)
    return {name: _file_hashes(out / name) for name in rasters}


def cmd_solve(i1_path, i2_path, config_path, out_dir, lambda_v=None, lambda_s=None,
              levels=None) -> dict:
    r1 = _load(i1_path, "i1 raster")
    r2 = _load(i2_path, "i2 raster")
    if r1.data.shape != r2.data.shape:
        raise InputError(f"frame shapes differ: {r1.data.shape} vs {r2.data.shape}")
    raw = _read_json(config_path, "solver config") if config_path else {}
    cfg = SolverConfig.from_dict(raw)
    if lambda_v is not None:
        cfg = cfg.with_weights(lambda_v=float(lambda_v))
    if lambda_s is not None:
        cfg = cfg.with_weights(lambda_s=float(lambda_s))
    if levels is not None:
        cfg = cfg.replace(pyramid_levels=int(levels))
    cfg.validate(r1.data.shape)
    out = _ensure_dir(out_dir)
    manifest = {
        "command": "solve",
        "version": __version__,
        "method": _method_name(cfg),
        "config": cfg.to_dict(),
        "inputs": {
            "i1": _file_hashes(i1_path),
            "i2": _file_hashes(i2_path),
            "config": git_blob_hash(Path(config_path).read_bytes()) if config_path else None,
        },
    }
    try:
        report = solve(_frame(r1), _frame(r2), cfg)
    except DivergenceError as exc:
        if exc.report is not None:
            atomic_write_text(out / "trace.csv", exc.report.trace_csv())
        manifest["status"] = "diverged"
        manifest["error"] = str(exc)
        atomic_write_text(out / "manifest.json", dumps(manifest))
        raise
    log.info("solved in %.1f s, %d iterations", report.wall_time, len(report.trace))
    atomic_write_text(out / "trace.csv", report.trace_csv())
    manifest["status"] = "ok"
    manifest["converged"] = bool(report.converged)
    manifest["iterations"] = len(report.trace)
    manifest["outputs"] = _write_solution(out, report, cfg)
    manifest["outputs"]["trace.csv"] = git_blob_hash((out / "trace.csv").read_bytes())
    atomic_write_text(out / "manifest.json", dumps(manifest))
    return manifest


# -- eval ----------------------------------------------------------------------


def render_png(data: np.ndarray, bounds) -> bytes:
    """8-bit greyscale render clipped to ``bounds``; NaN renders black."""
    lo, hi = bounds
    x = np.nan_to_num((np.asarray(data, dtype=np.float64) - lo) / (hi - lo), nan=0.0)
    grey = np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(grey, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _finite_rmse(est, truth, margin=2) -> float:
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise MetricError(f"shape mismatch: {est.shape} vs {truth.shape}")
    both = np.isfinite(est) & np.isfinite(truth)
    if both.all():
        return rmse_field(est, truth, margin)
    inner = (slice(margin, est.shape[0] - margin), slice(margin, est.shape[1] - margin))
    keep = both[inner]
    if not keep.any():
        return float("nan")
    diff = (est[inner] - truth[inner])[keep]
    return float(np.sqrt(np.mean(diff * diff)))


def cmd_eval(est_dir, out_dir, truth_dir=None, windows_path=None) -> dict:
    est_dir = Path(est_dir)
    fields_ = {name: _load(est_dir / name, f"estimate {name}").data for name in ("e11", "e22", "epr")}
    shape = fields_["e11"].shape
    for name, arr in fields_.items():
        if arr.shape != shape:
            raise InputError(f"estimate {name} has shape {arr.shape}, expected {shape}")
    est_manifest = est_dir / "manifest.json"
    method = "estimate"
    if est_manifest.exists():
        method = _read_json(est_manifest, "estimate manifest").get("method", method)

    rows = []
    if truth_dir is not None:
        truth_dir = Path(truth_dir)
        for name, arr in fields_.items():
            tru = _load(truth_dir / f"gt_{name}", f"truth {name}").data
            if tru.shape != shape:
                raise InputError(f"truth {name} has shape {tru.shape}, estimate has {shape}")
            rows.append((method, name, "rmse", _finite_rmse(arr, tru), 0.0, 0))
    windows = None
    if windows_path is not None:
        try:
            windows = WindowSpec.from_dict(_read_json(windows_path, "windows file")).validate(shape)
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad windows file: {exc}") from exc
        for name in ("e11", "e22"):
            for metric, fn in (("cnr", cnr), ("sr", sr)):
                try:
                    res = fn(fields_[name], windows)
                except MetricError as exc:
                    log.warning("%s %s skipped: %s", name, metric, exc)
                    continue
                rows.append((method, name, metric, res.mean, res.std, res.n_patches))

    out = _ensure_dir(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4])), r[5]])
    atomic_write_text(out / "metrics.csv", buf.getvalue())
    for name, arr in fields_.items():
        atomic_write_bytes(out / f"{name}.png", render_png(arr, DISPLAY_BOUNDS[name]))
    manifest = {
        "command": "eval",
        "version": __version__,
        "method": method,
        "display_bounds": {k: list(v) for k, v in DISPLAY_BOUNDS.items()},
        "windows": windows.to_dict() if windows else None,
        "inputs": {name: _file_hashes(est_dir / name) for name in fields_},
        "outputs": {
            "metrics.csv": git_blob_hash((out / "metrics.csv").read_bytes()),
            **{f"{n}.png": git_blob_hash((out / f"{n}.png").read_bytes()) for n in fields_},
        },
    }
    atomic_write_text(out / "manifest.json", dumps(manifest))
    return manifest


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picture", description="Simulate, solve and evaluate strain elastography.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="simulate a pre/post-compression RF pair")
    s.add_argument("--spec", required=True, help="phantom spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the seed in the phantom file")

    s = sub.add_parser("solve", help="estimate displacement and strain from an RF pair")
    s.add_argument("--i1", required=True, help="pre-compression raster (.f32 or stem)")
    s.add_argument("--i2", required=True, help="post-compression raster")
    s.add_argument("--config", default=None, help="solver config JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--lambda-v", type=float, default=None)
    s.add_argument("--lambda-s", type=float, default=None)
    s.add_argument("--levels", type=int, default=None)

    s = sub.add_parser("eval", help="metrics and images for a solve output")
    s.add_argument("--est", required=True, help="solve output directory")
    s.add_argument("--truth", default=None, help="synth output directory")
    s.add_argument("--windows", default=None, help="CNR/SR window JSON")
    s.add_argument("--out", required=True)
    return p


def _threads():
    raw = os.environ.get("PICTURE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"PICTURE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError("PICTURE_THREADS must be >= 1")
    return n


def _dispatch(args):
    if args.command == "synth":
        return cmd_synth(args.spec, args.out, args.seed)
    if args.command == "solve":
        return cmd_solve(args.i1, args.i2, args.config, args.out,
                         args.lambda_v, args.lambda_s, args.levels)
    return cmd_eval(args.est, args.out, args.truth, args.windows)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            _dispatch(args)
    except DivergenceError as exc:
        print(f"picture: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, RasterFormatError, PhantomSpecError, MetricError, OSError, ValueError) as exc:
        print(f"picture: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
