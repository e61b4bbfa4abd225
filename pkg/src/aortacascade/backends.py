"""Model backends for the cascade: protocols, oracle/threshold backends, subprocess bridge.

A detection backend maps the 128³ / 4 mm detection volume to
:class:`AnchorParams`; a segmentation backend maps a patch volume to a logit
grid of the same shape. Backends receive grids carrying their world origin, so
oracles can look up ground truth at the right location.
"""
from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .exceptions import BackendError
from .geometry import ANCHOR_RATIO, AnchorParams, BoundingBox, encode_box
from .roi_label import generate_roi_box
from .volume import Mask, Volume, read_nifti, write_nifti

TMPDIR_ENV = "AORTACASCADE_TMPDIR"
ORACLE_LOGIT = 50.0


@runtime_checkable
class DetectionBackend(Protocol):
    def detect(self, volume: Volume) -> AnchorParams: ...


@runtime_checkable
class SegmentationBackend(Protocol):
    def segment(self, patch: Volume) -> np.ndarray: ...


def coarse_cover_box(box: BoundingBox, factor: int, anchor_ratio: float = ANCHOR_RATIO) -> BoundingBox:
    """Smallest ``factor``-coarser box covering ``box``, trimmed superiorly to fit the anchor.

    Low bounds floor and high bounds ceil, so nothing is lost; if that exceeds
    the anchor extent the excess is removed from the high side, which on the
    axial axis carries the labelling margin.
    """
    grid = tuple(-(-g // factor) for g in box.grid)
    lo = [o // factor for o in box.origin]
    hi = [-(-e // factor) for e in box.end]
    for i, g in enumerate(grid):
        cap = int(np.floor(anchor_ratio * g))
        hi[i] = min(hi[i], lo[i] + cap, g)
    return BoundingBox.from_bounds(lo, hi, grid)


class OracleDetectionBackend:
    """Emits the anchor of the automatically labelled ground-truth ROI."""

    def __init__(self, gt_mask: Mask, margin: float = 20.0, axial_extent: int = 128, **label_kwargs):
        self.gt_mask = gt_mask
        self.box = generate_roi_box(gt_mask, axial_extent=axial_extent, margin=margin, **label_kwargs)

    def detect(self, volume: Volume) -> AnchorParams:
        factor = self.gt_mask.shape[0] // volume.shape[0]
        if factor < 1 or any(g != v * factor for g, v in zip(self.gt_mask.shape, volume.shape)):
            raise BackendError(f"detection grid {volume.shape} is not a divisor of the ground truth grid {self.gt_mask.shape}")
        return encode_box(coarse_cover_box(self.box, factor))


class OracleSegmentationBackend:
    """Returns ±50 logits copied from the ground-truth mask at the patch location."""

    def __init__(self, gt_mask: Mask, logit: float = ORACLE_LOGIT):
        self.gt_mask = gt_mask
        self.logit = float(logit)

    def segment(self, patch: Volume) -> np.ndarray:
        offset = [
            int(round((po - go) / s))
            for po, go, s in zip(patch.origin, self.gt_mask.origin, self.gt_mask.spacing)
        ]
        sl = tuple(slice(o, o + n) for o, n in zip(offset, patch.shape))
        if any(o < 0 or o + n > g for o, n, g in zip(offset, patch.shape, self.gt_mask.shape)):
            raise BackendError(f"patch at voxel offset {offset} falls outside the ground truth grid")
        gt = self.gt_mask.data[sl]
        return np.where(gt > 0, self.logit, -self.logit).astype(np.float32)


class ThresholdSegmentationBackend:
    """Intensity threshold as a logit (``intensity - value``); smoke tests only."""

    def __init__(self, value: float):
        self.value = float(value)

    def segment(self, patch: Volume) -> np.ndarray:
        return (patch.data - np.float32(self.value)).astype(np.float32)


class SubprocessBackend:
    """Runs an external model command on NIfTI files in a temporary directory.

    The command is invoked as ``<command> --input IN --output OUT`` (detection
    also gets ``--params-out JSON`` and must write six floats there). A
    non-zero exit status raises :class:`BackendError`.
    """

    def __init__(self, command, timeout: float = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty backend command")
        self.timeout = timeout

    def _run(self, args, stage):
        try:
            proc = subprocess.run(self.command + args, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"cannot run {self.command[0]}: {exc}", stage) from exc
        if proc.returncode != 0:
            raise BackendError(f"{self.command[0]} exited with status {proc.returncode}: {proc.stderr.strip()}", stage)

    def _tmpdir(self):
        return tempfile.TemporaryDirectory(prefix="aortacascade-", dir=os.environ.get(TMPDIR_ENV))

    def detect(self, volume: Volume) -> AnchorParams:
        with self._tmpdir() as tmp:
            src, dst, params = Path(tmp, "input.nii.gz"), Path(tmp, "output.nii.gz"), Path(tmp, "params.json")
            write_nifti(volume, src)
            self._run(["--input", str(src), "--output", str(dst), "--params-out", str(params)], "detect")
            try:
                values = json.loads(params.read_text())
                if isinstance(values, dict):
                    values = list(values["position"]) + list(values["scale"])
                return AnchorParams.from_array(values)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"invalid detection parameters from {self.command[0]}: {exc}", "detect") from exc

    def segment(self, patch: Volume) -> np.ndarray:
        with self._tmpdir() as tmp:
            src, dst = Path(tmp, "input.nii.gz"), Path(tmp, "output.nii.gz")
            write_nifti(patch, src)
            self._run(["--input", str(src), "--output", str(dst)], "segment")
            try:
                logits = read_nifti(dst, kind="volume").data
            except Exception as exc:
                raise BackendError(f"unreadable segmentation output from {self.command[0]}: {exc}", "segment") from exc
            if logits.shape != patch.shape:
                raise BackendError(f"segmentation output shape {logits.shape} != patch shape {patch.shape}", "segment")
            return logits


def _load_gt(path_or_mask):
    if isinstance(path_or_mask, Mask):
        return path_or_mask
    return read_nifti(path_or_mask, kind="mask")


def detection_backend_from_spec(spec: str, **label_kwargs) -> DetectionBackend:
    """Parse ``oracle:<gt.nii>`` or ``cmd:<command line>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle" and arg:
        return OracleDetectionBackend(_load_gt(arg), **label_kwargs)
    if kind == "cmd" and arg:
        return SubprocessBackend(arg)
    raise ValueError(f"unknown detection backend {spec!r} (expected oracle:<path> or cmd:<command>)")


def segmentation_backend_from_spec(spec: str) -> SegmentationBackend:
    """Parse ``oracle:<gt.nii>``, ``threshold:<value>`` or ``cmd:<command line>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle" and arg:
        return OracleSegmentationBackend(_load_gt(arg))
    if kind == "threshold" and arg:
        return ThresholdSegmentationBackend(float(arg))
    if kind == "cmd" and arg:
        return SubprocessBackend(arg)
    raise ValueError(f"unknown segmentation backend {spec!r} (expected oracle:, threshold: or cmd:)")
