"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line with its elapsed time; the lines are
printed in the terminal summary (and directly when run as a script).
"""
import itertools
import time

import numpy as np
import pytest

from aortacascade.backends import OracleDetectionBackend, OracleSegmentationBackend
from aortacascade.cascade import run_cascade, sliding_window_positions
from aortacascade.detect_head import HeadConfig, gradient_check, hidden_layer_sizes
from aortacascade.geometry import BoundingBox, contains, enclosing_box, giou, iou
from aortacascade.metrics import dsc, hd95, patch_coverage, wilcoxon_signed_rank
from aortacascade.phantom import analytic_roi, generate_phantom, phantom_mask, random_spec
from aortacascade.preprocess import crop_pad_canonical, hu_shift, resample_isotropic
from aortacascade.roi_label import generate_roi_box, trim_roi_margins
from aortacascade.volume import Mask, Volume

from oracles import dsc_bruteforce, hd95_bruteforce, wilcoxon_enumeration

RESULTS = []


def _record(name, ok, elapsed, limit, detail=""):
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'}  {name:<28s} {elapsed:7.2f} s (limit {limit:g} s)  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_fcn_sizing():
    with Timer() as t:
        cfg = HeadConfig(embed_dim=12)
        shapes = cfg.param_shapes()
        ok = (
            hidden_layer_sizes(384, 6, 2) == [96, 24]
            and cfg.fcn_sizes == [384, 96, 24, 6]
            and cfg.condensed_features == 2 * 16 * 12
            and shapes["conv.weight"] == (384, 192, 4, 4, 4)
            and [shapes[f"fcn.{k}.weight"] for k in range(3)] == [(96, 384), (24, 96), (6, 24)]
        )
    assert _record("FCN sizing", ok, t.elapsed, 1.0, f"fcn={cfg.fcn_sizes}")


def test_patch_coverage():
    with Timer() as t:
        value = patch_coverage((96,) * 3, (128,) * 3)
    assert _record("Patch coverage", abs(value - 0.4219) <= 1e-4, t.elapsed, 1.0, f"{value:.6f}")


def test_gradient_verification():
    with Timer() as t:
        worst = gradient_check(seed=0, n_instances=20)
    ok = worst["head"] < 1e-4 and worst["dice_ce"] < 1e-4 and worst["giou"] < 1e-3
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    assert _record("Gradient verification", ok, t.elapsed, 30.0, detail)


def test_giou_algebra():
    rng = np.random.default_rng(2024)
    grid = (32, 32, 32)
    violations = 0
    with Timer() as t:
        for _ in range(10_000):
            boxes = []
            for _ in range(2):
                lo = rng.integers(0, 31, size=3)
                hi = [int(rng.integers(l + 1, 33)) for l in lo]
                boxes.append(BoundingBox.from_bounds(lo, hi, grid))
            a, b = boxes
            i, g = iou(a, b), giou(a, b)
            violations += not (g <= i + 1e-12)
            violations += not (-1 < g <= 1)
            violations += giou(a, a) != 1.0
            violations += giou(b, a) != g or iou(b, a) != i
    assert _record("GIoU algebra", violations == 0, t.elapsed, 10.0, f"violations={violations}")


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(99)
    mismatches = 0
    with Timer() as t:
        for _ in range(200):
            shape = tuple(int(n) for n in rng.integers(2, 13, size=3))
            density = rng.uniform(0.05, 0.6)
            a = rng.random(shape) < density
            b = rng.random(shape) < density
            a.flat[rng.integers(a.size)] = True
            b.flat[rng.integers(b.size)] = True
            spacing = tuple(rng.uniform(0.5, 3.0, size=3))
            mismatches += dsc(a, b) != dsc_bruteforce(a, b)
            mismatches += abs(hd95(a, b, spacing) - hd95_bruteforce(a, b, spacing)) > 1e-12
    assert _record("Metric oracle equivalence", mismatches == 0, t.elapsed, 60.0, f"mismatches={mismatches}")


def test_roi_labeling():
    rng = np.random.default_rng(7)
    n, worst, cc = 60, 0, 0
    with Timer() as t:
        for _ in range(n):
            spec = random_spec(rng)
            mask = Mask(phantom_mask(spec, (256,) * 3, 2.0), 2.0)
            box = generate_roi_box(mask)
            ref = analytic_roi(spec)
            worst = max(worst, max(abs(p - q) for p, q in zip(box.origin + box.end, ref.origin + ref.end)))
            cc += contains(box, trim_roi_margins(ref, 20, 2.0))
    ok = worst <= 2 and cc == n
    assert _record("ROI labeling", ok, t.elapsed, 120.0, f"max face diff={worst}, CC={cc}/{n}")


def test_end_to_end_cascade():
    rng = np.random.default_rng(11)
    n, good, identical = 10, 0, 0
    with Timer() as t:
        for _ in range(n):
            volume, mask = generate_phantom(random_spec(rng, noise_sigma=20.0))
            det, seg = OracleDetectionBackend(mask), OracleSegmentationBackend(mask)
            out1, rep1 = run_cascade(volume, det, seg, gt=mask)
            out2, rep2 = run_cascade(volume, det, seg, gt=mask)
            inside = rep1.roi_box.slices
            good += dsc(out1.data[inside], mask.data[inside]) == 1.0 and rep1.metrics["complete_containment"]
            identical += out1.data.tobytes() == out2.data.tobytes() and rep1.roi_box == rep2.roi_box
    ok = good == n and identical == n
    assert _record("End-to-end cascade", ok, t.elapsed, 120.0, f"DSC_roi=1 & CC: {good}/{n}, bit-identical: {identical}/{n}")


def test_preprocessing_contracts():
    rng = np.random.default_rng(5)
    with Timer() as t:
        shifted = hu_shift(Volume(np.full((2, 2, 2), -1024.0)))
        v = Volume(rng.normal(size=(30, 20, 40)), 2.0)
        identity = resample_isotropic(v, 2.0, mode="nearest") == v
        once, _ = crop_pad_canonical(Volume(rng.normal(size=(300, 200, 280))))
        twice, _ = crop_pad_canonical(once)
        ok = (
            np.all(shifted.data == 0)
            and identity
            and twice == once
            and sliding_window_positions(128, 96) == [0, 32]
        )
    assert _record("Preprocessing contracts", ok, t.elapsed, 5.0)


def test_wilcoxon_exact():
    rng = np.random.default_rng(3)
    worst = 0.0
    with Timer() as t:
        done = 0
        while done < 50:
            n = int(rng.integers(5, 11))
            x = np.round(rng.normal(size=n), 1)
            y = np.round(rng.normal(size=n), 1)
            if np.count_nonzero(x - y) < 5:
                continue
            worst = max(worst, abs(wilcoxon_signed_rank(x, y).pvalue - wilcoxon_enumeration(x - y)))
            done += 1
    assert _record("Wilcoxon exact p-values", worst < 1e-12, t.elapsed, 10.0, f"max |dp|={worst:.1e}")


def test_wall_time():
    volume, mask = generate_phantom(random_spec(21, noise_sigma=20.0))
    with Timer() as t:
        _, report = run_cascade(volume, OracleDetectionBackend(mask), OracleSegmentationBackend(mask), jobs=1)
    assert _record("Wall-time report", report.timings["total"] < 60.0, t.elapsed, 60.0,
                   f"cascade total={report.timings['total']:.2f} s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
