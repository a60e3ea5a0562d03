"""Command-line interface for batch experiments and figure-data export.

Commands: space-info, phantom, noise, denoise, eval, w1, tv, check-norms,
export-plot.  All outputs are files or stdout JSON/CSV; progress goes to
stderr.  Exit codes: 0 success, 2 argument errors, 3 non-convergence,
4 I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .image_grid import GridSpec
from .io import MviError, read_gt, read_mvi, write_gt, write_mvi
from .metric_space import build_circle, build_finite, build_icosphere
from .metrics import angular_error, image_peaks, w1_error_map
from .models import MeasureImage, build_l2tv, build_w1tv, tv_kr_bracket
from .proximal import check_product_norm_conditions
from .solver import SolverConfig, solve
from .synth import PhantomSpec, add_noise, make_phantom
from .transport import w1_lp

DEFAULT_LEVEL = 2

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_NOCONV = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_ARGS):
        super().__init__(message)
        self.code = code


def _threads_default():
    env = os.environ.get("MVTV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _space_from_args(args):
    if args.kind == "icosphere":
        return build_icosphere(args.level)
    if args.kind == "circle":
        return build_circle(args.l)
    raise CliError(f"unknown space kind {args.kind!r}")


def _add_space_args(sub, with_kind=True):
    if with_kind:
        sub.add_argument("--kind", default="icosphere",
                         choices=["icosphere", "circle"])
    sub.add_argument("--level", type=int, default=DEFAULT_LEVEL,
                     help="icosphere subdivision level")
    sub.add_argument("--l", type=int, default=16, help="circle cell count")


def cmd_space_info(args):
    sp = _space_from_args(args)
    info = {
        "kind": sp.kind,
        "params": sp.params if sp.kind != "finite" else {"l": sp.l},
        "l": sp.l,
        "m": sp.m,
        "r": sp.r,
        "tangent_dim": sp.tangent_dim,
        "total_volume": sp.total_volume,
        "max_edge_arc": sp.max_edge_arc(),
    }
    json.dump(info, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_phantom(args):
    if args.kind == "twopoint":
        space = build_finite([[0.0, 1.0], [1.0, 0.0]], [(0, 1)])
        spec = PhantomSpec("twopoint", grid_shape=tuple(args.shape),
                           region=args.region, seed=args.seed)
    else:
        space = build_icosphere(args.level)
        if args.kind == "rotating":
            spec = PhantomSpec("rotating", n=args.n,
                               angle_range=args.angle_range,
                               kappa=args.kappa, seed=args.seed)
        else:
            spec = PhantomSpec("crossing", kappa=args.kappa, seed=args.seed)
    img, gt, info = make_phantom(spec, space)
    if args.snr is not None:
        img = add_noise(img, args.snr, seed=args.seed)
        info = dict(info, snr=args.snr, seed=args.seed)
    write_mvi(img, args.out)
    write_gt(gt, info, _gt_path(args.out))
    print(f"wrote {args.out} and {_gt_path(args.out)}", file=sys.stderr)
    return EXIT_OK


def _gt_path(out):
    base = out[:-4] if str(out).endswith(".mvi") else str(out)
    return base + ".gt.json"


def cmd_noise(args):
    img = read_mvi(args.input)
    out = add_noise(img, args.snr, seed=args.seed)
    write_mvi(out, args.out)
    return EXIT_OK


def cmd_denoise(args):
    if args.lam <= 0:
        raise CliError("--lambda must be positive")
    img = read_mvi(args.input)
    build = build_w1tv if args.model == "w1tv" else build_l2tv
    problem = build(img, args.lam, norm=args.norm)
    cfg = SolverConfig(
        max_iter=args.max_iter,
        gap_tol=args.gap_tol,
        check_every=args.check_every,
        seed=args.seed,
        verbose=not args.quiet,
    )
    report = solve(problem, cfg)
    write_mvi(report.u, args.out)
    doc = {
        "model": args.model,
        "lambda": args.lam,
        "norm": args.norm,
        "termination": report.termination,
        "iterations": report.iterations,
        "wall_time_s": report.wall_time,
        "operator_norm": report.operator_norm,
        "simplex_violation": report.simplex_violation,
        "equality_residual_rel": report.equality_residual_rel,
        "gap_trace": report.trace_dicts(),
        "threads": args.threads,
    }
    rep_path = args.report or (str(args.out) + ".report.json")
    try:
        with open(rep_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise CliError(f"{rep_path}: {exc}", EXIT_IO) from exc
    print(f"{report.termination} after {report.iterations} iterations "
          f"(gap_rel={report.trace[-1].gap_rel:.3e})", file=sys.stderr)
    return EXIT_OK if report.converged else EXIT_NOCONV


def cmd_eval(args):
    img = read_mvi(args.input)
    out = {}
    if args.gt:
        gt, _info = read_gt(args.gt)
        if len(gt) != img.grid.n:
            raise CliError("ground truth does not match the image grid")
        peaks = image_peaks(img, rel_threshold=args.rel_threshold)
        rep = angular_error(peaks, gt)
        out["angular_error"] = rep.as_dict()
    if args.ref:
        ref = read_mvi(args.ref)
        emap = w1_error_map(img, ref, threads=args.threads)
        out["w1_error"] = {
            "total": float(emap.sum()),
            "mean": float(emap.mean()),
            "per_voxel": emap.ravel().tolist(),
        }
    if not out:
        raise CliError("eval needs --gt and/or --ref")
    _dump_json(out, args.out)
    return EXIT_OK


def cmd_w1(args):
    a = read_mvi(args.first)
    b = read_mvi(args.second)
    emap = w1_error_map(a, b, threads=args.threads)
    _dump_json({"total": float(emap.sum()),
                "per_voxel": emap.ravel().tolist()}, args.out)
    return EXIT_OK


def cmd_tv(args):
    img = read_mvi(args.input)
    lo, hi = tv_kr_bracket(img, norm=args.norm, tol=args.tol)
    _dump_json({"tv": hi, "lower": lo, "upper": hi, "norm": args.norm}, args.out)
    return EXIT_OK


def cmd_check_norms(args):
    rep = check_product_norm_conditions(args.norm, samples=args.samples,
                                        seed=args.seed, s=args.s)
    _dump_json(rep.as_dict(), args.out)
    return EXIT_OK


def cmd_export_plot(args):
    rows = []
    if args.what == "distance-curve":
        img = read_mvi(args.input)
        gt, info = read_gt(_gt_path(args.input)) if args.gt is None else read_gt(args.gt)
        angles = info.get("angles_deg")
        if angles is None:
            raise CliError("distance-curve needs a rotating-row ground truth sidecar")
        flat = img.values.reshape(img.grid.n, img.space.l)
        ref = flat[0]
        header = ["angle_deg", "l1", "w1"]
        for i in range(img.grid.n):
            l1 = float(img.space.volumes @ np.abs(flat[i] - ref))
            w1 = w1_lp(flat[i], ref, img.space)
            rows.append([angles[i], l1, w1])
    elif args.what == "gap-trace":
        try:
            with open(args.input, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise CliError(f"{args.input}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.input}: not a report file: {exc}") from exc
        header = ["iteration", "primal", "dual", "gap_rel"]
        for row in doc.get("gap_trace", []):
            rows.append([row["iteration"], row["primal"], row["dual"],
                         row["gap_rel"]])
        if not rows:
            raise CliError("report has an empty gap trace")
    elif args.what == "odf-profile":
        img = read_mvi(args.input)
        if img.space.kind != "icosphere":
            raise CliError("odf-profile needs a sphere image")
        flat = img.values.reshape(img.grid.n, img.space.l)
        if not 0 <= args.voxel < img.grid.n:
            raise CliError(f"voxel index {args.voxel} out of range")
        header = ["cell", "x", "y", "z", "density"]
        for k in range(img.space.l):
            z = img.space.points[k]
            rows.append([k, z[0], z[1], z[2], flat[args.voxel, k]])
    else:
        raise CliError(f"unknown --what {args.what!r}")

    try:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise CliError(f"{args.out}: {exc}", EXIT_IO) from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvtv",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="worker count for per-voxel W1 evaluations "
                         "(default: MVTV_THREADS or logical cores); results "
                         "are identical for any value")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("space-info", help="print discretization metadata")
    _add_space_args(sp)
    sp.set_defaults(func=cmd_space_info)

    sp = sub.add_parser("phantom", help="generate a synthetic phantom")
    sp.add_argument("--kind", required=True,
                    choices=["rotating", "crossing", "twopoint"])
    sp.add_argument("--level", type=int, default=DEFAULT_LEVEL)
    sp.add_argument("--n", type=int, default=12, help="rotating-row length")
    sp.add_argument("--angle-range", type=float, default=90.0)
    sp.add_argument("--kappa", type=float, default=20.0)
    sp.add_argument("--shape", type=int, nargs=2, default=[16, 16],
                    help="twopoint grid shape")
    sp.add_argument("--region", default="left", choices=["left", "middle"])
    sp.add_argument("--snr", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("noise", help="add multiplicative noise to an image")
    sp.add_argument("input")
    sp.add_argument("--snr", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_noise)

    sp = sub.add_parser("denoise", help="run the W1-TV or L2-TV model")
    sp.add_argument("input")
    sp.add_argument("--model", default="w1tv", choices=["w1tv", "l2tv"])
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.add_argument("--norm", default="spectral",
                    choices=["spectral", "frobenius"])
    sp.add_argument("--gap-tol", type=float, default=1e-5)
    sp.add_argument("--max-iter", type=int, default=100_000)
    sp.add_argument("--check-every", type=int, default=5000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None,
                    help="report path (default: <out>.report.json)")
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("eval", help="angular error and W1 error maps")
    sp.add_argument("input")
    sp.add_argument("--gt", default=None, help="ground-truth sidecar")
    sp.add_argument("--ref", default=None, help="reference .mvi for W1 errors")
    sp.add_argument("--rel-threshold", type=float, default=0.5)
    sp.add_argument("--out", default=None, help="output JSON (default stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("w1", help="per-voxel W1 distances of two images")
    sp.add_argument("first")
    sp.add_argument("second")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_w1)

    sp = sub.add_parser("tv", help="certified TV_KR value of an image")
    sp.add_argument("input")
    sp.add_argument("--norm", default="spectral",
                    choices=["spectral", "frobenius"])
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_tv)

    sp = sub.add_parser("check-norms", help="product-norm condition checks")
    sp.add_argument("--norm", default="spectral",
                    choices=["spectral", "frobenius", "s-norm"])
    sp.add_argument("--s", type=float, default=None)
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_check_norms)

    sp = sub.add_parser("export-plot", help="tidy CSV export of figure data")
    sp.add_argument("input")
    sp.add_argument("--what", required=True,
                    choices=["odf-profile", "distance-curve", "gap-trace"])
    sp.add_argument("--gt", default=None)
    sp.add_argument("--voxel", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.threads is None:
        args.threads = _threads_default()
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except MviError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


def _dump_json(doc, out_path):
    if out_path:
        try:
            with open(out_path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
        except OSError as exc:
            raise CliError(f"{out_path}: {exc}", EXIT_IO) from exc
    else:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
