"""Command line interface: ``aortacascade <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend failure.
Reports go to ``--out`` (or stdout); diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backends import detection_backend_from_spec, segmentation_backend_from_spec
from .cascade import OVERLAP, PATCH_SIZE, ROI_SIZE, StageError, detect_box, detect_roi, run_cascade, segment_roi
from .detect_head import gradient_check
from .exceptions import AortaCascadeError, BackendError
from .geometry import BoundingBox, iou
from .metrics import complete_containment, dsc, hd95, summarize
from .phantom import PhantomSpec, analytic_roi, generate_phantom
from .preprocess import CANONICAL_SIZE, WORKING_SPACING, preprocess
from .roi_label import DEFAULT_AXIAL_EXTENT, DEFAULT_GAMMA, DEFAULT_MARGIN_MM, DEFAULT_TAU, generate_roi_box
from .validation import check_grid, check_pair
from .volume import read_nifti, write_nifti

log = logging.getLogger("aortacascade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
HEAD_CHECK_TOL = 1e-4
GIOU_CHECK_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _error(message):
    print(f"aortacascade: error: {message}", file=sys.stderr)


def _emit(report: dict, out):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out in (None, "-"):
        sys.stdout.write(text + "\n")
    else:
        Path(out).write_text(text + "\n")


def _read_box(path) -> BoundingBox:
    return BoundingBox.from_dict(json.loads(Path(path).read_text()))


# --- subcommands -------------------------------------------------------------

def cmd_preprocess(args):
    grid = read_nifti(args.input, kind=None if args.kind == "auto" else args.kind)
    out, offsets = preprocess(grid, args.spacing, args.size, shift=not args.no_shift)
    write_nifti(out, args.output)
    _emit({"output": str(args.output), "shape": list(out.shape), "spacing": list(out.spacing),
           "offsets": list(offsets)}, args.report)


def cmd_label_roi(args):
    mask = read_nifti(args.mask, kind="mask")
    box = generate_roi_box(mask, args.axial_extent, args.margin_mm, args.gamma, args.tau)
    _emit(box.to_dict(), args.out)


def cmd_detect(args):
    volume = check_grid(read_nifti(args.volume, kind="volume"), shape=CANONICAL_SIZE, name=str(args.volume))
    backend = detection_backend_from_spec(args.backend)
    box = detect_box(volume, backend) if args.raw else detect_roi(volume, backend, args.roi_size)
    _emit(box.to_dict(), args.out)


def cmd_segment(args):
    volume = read_nifti(args.volume, kind="volume")
    backend = segmentation_backend_from_spec(args.backend)
    mask = segment_roi(volume, backend, args.patch, args.overlap, args.jobs)
    write_nifti(mask, args.output)


def _load_cases(args):
    if args.cases:
        cases = json.loads(Path(args.cases).read_text())
        if not isinstance(cases, list):
            raise ValueError("case file must hold a JSON list")
        return cases
    if not args.volume:
        raise UsageError("cascade: give a VOLUME or --cases FILE")
    return [{"volume": args.volume, "gt": args.gt, "out_mask": args.out_mask}]


def _run_case(case, args):
    volume = check_grid(read_nifti(case["volume"], kind="volume"), shape=CANONICAL_SIZE, name=case["volume"])
    gt = read_nifti(case["gt"], kind="mask") if case.get("gt") else None
    if gt is not None:
        check_pair(volume, gt)
    detector = detection_backend_from_spec(case.get("detector") or args.detector,
                                           margin=args.margin_mm, axial_extent=args.roi_size)
    segmenter = segmentation_backend_from_spec(case.get("segmenter") or args.segmenter)
    mask, report = run_cascade(volume, detector, segmenter, gt, args.roi_size, args.patch,
                               args.overlap, args.margin_mm)
    if case.get("out_mask"):
        write_nifti(mask, case["out_mask"])
    entry = report.to_dict()
    entry["volume"] = str(case["volume"])
    log.info("%s: %.2f s", case["volume"], report.timings["total"])
    return entry


def cmd_cascade(args):
    if not args.detector or not args.segmenter:
        raise UsageError("cascade: --detector and --segmenter are required")
    cases = _load_cases(args)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(lambda c: _run_case(c, args), cases))
    else:
        entries = [_run_case(c, args) for c in cases]
    _emit(_aggregate(entries, "cascade"), args.report)


def _eval_case(case, margin):
    pred = read_nifti(case["pred"], kind="mask")
    gt = read_nifti(case["gt"], kind="mask")
    check_pair(pred, gt)
    both = pred.count > 0 and gt.count > 0
    metrics = {
        "dsc": dsc(pred, gt),
        "hd95_mm": hd95(pred, gt, gt.spacing) if both else None,
    }
    if case.get("box"):
        box = _read_box(case["box"])
        gt_box = generate_roi_box(gt, margin=margin, axial_extent=case.get("axial_extent", DEFAULT_AXIAL_EXTENT))
        metrics["iou"] = iou(box, gt_box)
        metrics["complete_containment"] = complete_containment(box, gt_box, margin, gt.spacing)
        metrics["gt_box"] = gt_box.to_dict()
    return {"pred": str(case["pred"]), "gt": str(case["gt"]), "metrics": metrics}


def cmd_eval(args):
    if args.cases:
        cases = json.loads(Path(args.cases).read_text())
    elif args.pred and args.gt:
        cases = [{"pred": args.pred, "gt": args.gt, "box": args.box}]
    else:
        raise UsageError("eval: give --pred and --gt, or --cases FILE")
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(lambda c: _eval_case(c, args.margin_mm), cases))
    else:
        entries = [_eval_case(c, args.margin_mm) for c in cases]
    _emit(_aggregate(entries, "eval"), args.out)


def _aggregate(entries, kind):
    metric_rows = [e["metrics"] for e in entries if e.get("metrics")]
    aggregate = {}
    for key in ("dsc", "dsc_roi", "hd95_mm", "iou"):
        values = [row[key] for row in metric_rows if key in row]
        if values:
            aggregate[key] = summarize(values)
    cc = [row["complete_containment"] for row in metric_rows if "complete_containment" in row]
    if cc:
        aggregate["complete_containment_rate"] = float(np.mean(cc))
    report = {"kind": kind, "version": __version__, "cases": entries, "aggregate": aggregate}
    if kind == "cascade":
        report["wall_time_s"] = summarize([e["timings_s"]["total"] for e in entries])
    return report


def cmd_phantom(args):
    spec = PhantomSpec.from_json(Path(args.spec).read_text()) if args.spec else PhantomSpec()
    volume, mask = generate_phantom(spec, args.shape, args.spacing)
    write_nifti(volume, args.out_volume)
    write_nifti(mask, args.out_mask)
    box = analytic_roi(spec, args.shape, args.spacing, margin=args.margin_mm, axial_extent=args.axial_extent)
    _emit(box.to_dict(), args.out_box)


def cmd_head_check(args):
    worst = gradient_check(seed=args.seed, n_instances=args.instances)
    passed = worst["head"] < HEAD_CHECK_TOL and worst["dice_ce"] < HEAD_CHECK_TOL and worst["giou"] < GIOU_CHECK_TOL
    report = {"seed": args.seed, "instances": args.instances, "max_relative_error": worst,
              "tolerance": {"head": HEAD_CHECK_TOL, "dice_ce": HEAD_CHECK_TOL, "giou": GIOU_CHECK_TOL},
              "passed": passed}
    _emit(report, args.out)
    if not passed:
        raise AortaCascadeError("finite-difference gradient check failed")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aortacascade", description="Cascade ROI detection and focused segmentation for thoracic aorta CT.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("preprocess", help="resample, crop/pad and HU-shift one image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--spacing", type=float, default=WORKING_SPACING)
    s.add_argument("--size", type=int, default=CANONICAL_SIZE)
    s.add_argument("--kind", choices=("auto", "volume", "mask"), default="auto")
    s.add_argument("--no-shift", action="store_true", help="skip the HU shift")
    s.add_argument("--report", help="JSON report path (default stdout)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("label-roi", help="ground-truth ROI box from a mask")
    s.add_argument("mask")
    s.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    s.add_argument("--tau", type=float, default=DEFAULT_TAU)
    s.add_argument("--margin-mm", type=float, default=DEFAULT_MARGIN_MM)
    s.add_argument("--axial-extent", type=int, default=DEFAULT_AXIAL_EXTENT)
    s.add_argument("--out")
    s.set_defaults(func=cmd_label_roi)

    s = sub.add_parser("detect", help="ROI box for a canonical 256³ volume")
    s.add_argument("volume")
    s.add_argument("--backend", required=True, help="oracle:<gt.nii> or cmd:<command>")
    s.add_argument("--roi-size", type=int, default=ROI_SIZE)
    s.add_argument("--raw", action="store_true", help="emit the decoded box before expansion to --roi-size")
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("segment", help="sliding-window segmentation of an ROI volume")
    s.add_argument("volume")
    s.add_argument("output")
    s.add_argument("--backend", required=True, help="oracle:<gt.nii>, threshold:<value> or cmd:<command>")
    s.add_argument("--patch", type=int, default=PATCH_SIZE)
    s.add_argument("--overlap", type=float, default=OVERLAP)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("cascade", help="full detection + segmentation cascade")
    s.add_argument("volume", nargs="?")
    s.add_argument("--cases", help="JSON list of {volume, gt?, out_mask?, detector?, segmenter?}")
    s.add_argument("--detector")
    s.add_argument("--segmenter")
    s.add_argument("--gt")
    s.add_argument("--out-mask")
    s.add_argument("--report")
    s.add_argument("--roi-size", type=int, default=ROI_SIZE)
    s.add_argument("--patch", type=int, default=PATCH_SIZE)
    s.add_argument("--overlap", type=float, default=OVERLAP)
    s.add_argument("--margin-mm", type=float, default=DEFAULT_MARGIN_MM)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_cascade)

    s = sub.add_parser("eval", help="metrics for prediction/ground-truth pairs")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--box", help="predicted ROI box JSON")
    s.add_argument("--cases", help="JSON list of {pred, gt, box?}")
    s.add_argument("--margin-mm", type=float, default=DEFAULT_MARGIN_MM)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("phantom", help="synthetic aorta volume, mask and analytic ROI box")
    s.add_argument("--spec", help="phantom spec JSON (defaults otherwise)")
    s.add_argument("--shape", type=int, default=CANONICAL_SIZE)
    s.add_argument("--spacing", type=float, default=WORKING_SPACING)
    s.add_argument("--margin-mm", type=float, default=DEFAULT_MARGIN_MM)
    s.add_argument("--axial-extent", type=int, default=DEFAULT_AXIAL_EXTENT)
    s.add_argument("--out-volume", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-box")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("head-check", help="finite-difference check of the detection head and losses")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(func=cmd_head_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        _error(f"backend failure: {exc}")
        return EXIT_BACKEND
    except StageError as exc:
        _error(exc)
        return EXIT_DATA
    except (AortaCascadeError, ValueError, TypeError, KeyError, OSError) as exc:
        _error(f"{type(exc).__name__}: {exc}")
        return EXIT_DATA
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
