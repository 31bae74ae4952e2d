"""One-pass evaluation: metrics, sequence ingestion and report files.

Threshold conventions (fixed so boundary values are reproducible):

* success point k counts frames with IoU strictly above k/20, k = 0..20,
  so a perfect tracker scores S = 20/21;
* precision counts centre errors of at most 20 px;
* normalized precision counts normalized errors strictly below k/40, k = 0..20;
* SR_t counts IoU strictly above t.

Frames flagged absent (full occlusion or out of view) never enter a denominator.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import DegenerateInputError, SequenceFormatError
from .geometry import BBox, center_error, iou
from .persist import write_atomic

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.arange(21) / 20.0
NP_THRESHOLDS = np.arange(21) / 40.0
PRECISION_RADIUS = 20.0
PRECISION_CURVE_RADII = np.arange(51, dtype=np.float64)
ABSENT_FILES = ("full_occlusion.txt", "out_of_view.txt")
METRIC_KEYS = ("S", "NP", "P", "AO", "SR_050", "SR_075")


def _nonempty(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    return arr


def success_curve(ious) -> tuple[np.ndarray, float]:
    """21 success points and their plain mean."""
    v = _nonempty(ious, "IoU list")
    points = np.array([np.count_nonzero(v > t) for t in SUCCESS_THRESHOLDS]) / v.size
    return points, math.fsum(points) / len(points)


def precision_at(center_errors, radius: float = PRECISION_RADIUS) -> float:
    e = _nonempty(center_errors, "centre-error list")
    return np.count_nonzero(e <= radius) / e.size


def normalized_errors(preds: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    """Centre offset divided component-wise by the ground-truth width and height."""
    out = np.empty(len(gts))
    for i, (p, g) in enumerate(zip(preds, gts)):
        (px, py), (gx, gy) = p.center, g.center
        out[i] = math.hypot((px - gx) / g.w, (py - gy) / g.h)
    return out


def normalized_precision_curve(norm_errors) -> tuple[np.ndarray, float]:
    e = _nonempty(norm_errors, "normalized-error list")
    points = np.array([np.count_nonzero(e < t) for t in NP_THRESHOLDS]) / e.size
    return points, math.fsum(points) / len(points)


def normalized_precision(preds: Sequence[BBox], gts: Sequence[BBox]) -> float:
    if len(preds) != len(gts):
        raise DegenerateInputError("prediction and ground-truth counts differ")
    return normalized_precision_curve(normalized_errors(preds, gts))[1]


def ao_sr(ious) -> tuple[float, float, float]:
    v = _nonempty(ious, "IoU list")
    return (math.fsum(v) / v.size, np.count_nonzero(v > 0.5) / v.size, np.count_nonzero(v > 0.75) / v.size)


@dataclass
class MetricReport:
    name: str
    n_frames: int
    success_curve: list[float]
    S: float
    P: float
    NP: float
    AO: float
    SR_050: float
    SR_075: float
    precision_curve: list[float] = field(default_factory=list)
    np_curve: list[float] = field(default_factory=list)
    per_attribute: dict[str, dict[str, float]] = field(default_factory=dict)
    valid: bool = True
    error: str | None = None

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {
            "name": self.name, "n_frames": self.n_frames, "valid": self.valid, "error": self.error,
            **self.metrics(),
            "success_curve": self.success_curve, "precision_curve": self.precision_curve,
            "np_curve": self.np_curve, "per_attribute": self.per_attribute,
        }


def compute_metrics(preds: Sequence[BBox], gts: Sequence[BBox | None], name: str = "sequence",
                    mask: Sequence[bool] | None = None,
                    attributes: dict[str, Sequence[bool]] | None = None) -> MetricReport:
    """Metrics over frames whose ground truth is present (and ``mask`` allows)."""
    if len(preds) != len(gts):
        raise DegenerateInputError(f"{len(preds)} predictions for {len(gts)} ground-truth boxes")
    keep = [g is not None and (mask is None or bool(mask[i])) for i, g in enumerate(gts)]
    p = [b for b, k in zip(preds, keep) if k]
    g = [b for b, k in zip(gts, keep) if k]
    if not g:
        raise DegenerateInputError(f"{name}: no frames with a visible target to evaluate")
    ious = [iou(a, b) for a, b in zip(p, g)]
    errs = np.array([center_error(a, b) for a, b in zip(p, g)])
    curve, s = success_curve(ious)
    np_points, np_val = normalized_precision_curve(normalized_errors(p, g))
    ao, sr50, sr75 = ao_sr(ious)
    report = MetricReport(
        name=name, n_frames=len(g), success_curve=curve.tolist(), S=s,
        P=precision_at(errs), NP=np_val, AO=ao, SR_050=sr50, SR_075=sr75,
        precision_curve=[np.count_nonzero(errs <= r) / errs.size for r in PRECISION_CURVE_RADII],
        np_curve=np_points.tolist(),
    )
    for attr, flags in sorted((attributes or {}).items()):
        sub = [bool(f) and k for f, k in zip(flags, keep)]
        if any(sub):
            report.per_attribute[attr] = compute_metrics(preds, gts, name, mask=sub).metrics()
    return report


# ---------------------------------------------------------------- sequences

@dataclass
class SequenceDataset:
    name: str
    frames: list            # file paths or in-memory H x W x C arrays
    gt_boxes: list          # BBox per frame, None where the target is absent
    language: str | None = None
    attributes: dict[str, list[bool]] = field(default_factory=dict)
    absent: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise SequenceFormatError(f"{self.name}: {len(self.frames)} frames but {len(self.gt_boxes)} boxes")
        if not self.absent:
            self.absent = [b is None for b in self.gt_boxes]
        if self.gt_boxes and self.gt_boxes[0] is None:
            raise SequenceFormatError(f"{self.name}: target must be visible in the first frame", line=1)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        return load_frame(self.frames[i])


def load_frame(ref) -> np.ndarray:
    """``H x W x C`` float image in [0, 1] from an array, ``.npy`` or an image file."""
    if isinstance(ref, np.ndarray):
        return np.asarray(ref, dtype=np.float64)
    path = Path(ref)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def parse_box_line(line: str, lineno: int) -> tuple[float, ...]:
    parts = [p for p in line.replace("\t", ",").replace(" ", ",").split(",") if p != ""]
    if len(parts) != 4:
        raise SequenceFormatError(f"expected 4 comma-separated values, got {len(parts)}", line=lineno)
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise SequenceFormatError(f"non-numeric value ({exc})", line=lineno) from exc
    if not all(math.isfinite(v) for v in vals):
        raise SequenceFormatError("non-finite value", line=lineno)
    return vals


def read_boxes(path: str | Path, absent: Sequence[bool] | None = None) -> list[BBox | None]:
    """Parse a groundtruth/predictions file; absent frames may carry any extents."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    out: list[BBox | None] = []
    for i, line in enumerate(lines, start=1):
        x, y, w, h = parse_box_line(line, i)
        gone = absent is not None and i - 1 < len(absent) and absent[i - 1]
        if gone:
            out.append(None)
        elif w > 0 and h > 0:
            out.append(BBox(x, y, w, h))
        else:
            raise SequenceFormatError(f"non-positive extents {w}x{h} on a frame not flagged absent", line=i)
    return out


def read_flags(path: str | Path) -> list[bool]:
    """0/1 flags separated by commas and/or newlines."""
    text = Path(path).read_text(encoding="utf-8")
    tokens = [t for t in text.replace("\n", ",").split(",") if t.strip()]
    try:
        return [bool(int(t)) for t in tokens]
    except ValueError as exc:
        raise SequenceFormatError(f"{path}: flags must be 0 or 1 ({exc})") from exc


def load_sequence(directory: str | Path) -> SequenceDataset:
    """LaSOT-style folder: ``groundtruth.txt``, ``img/`` frames, optional
    ``nlp.txt``, absence flag files and ``attr_<name>.txt`` flag files."""
    d = Path(directory)
    gt_path = d / "groundtruth.txt"
    if not gt_path.is_file():
        raise SequenceFormatError(f"{d}: missing groundtruth.txt")
    absent: list[bool] | None = None
    for fname in ABSENT_FILES:
        if (d / fname).is_file():
            flags = read_flags(d / fname)
            absent = flags if absent is None else [a or b for a, b in zip(absent, flags)]
    boxes = read_boxes(gt_path, absent)
    img_dir = d / "img"
    frames = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".npy")) \
        if img_dir.is_dir() else []
    if len(frames) != len(boxes):
        raise SequenceFormatError(f"{d}: {len(frames)} frames but {len(boxes)} groundtruth lines")
    if absent is not None and len(absent) != len(boxes):
        raise SequenceFormatError(f"{d}: absence flags cover {len(absent)} of {len(boxes)} frames")
    lang = (d / "nlp.txt").read_text(encoding="utf-8") if (d / "nlp.txt").is_file() else None
    attrs = {}
    for p in sorted(d.glob("attr_*.txt")):
        flags = read_flags(p)
        if len(flags) != len(boxes):
            raise SequenceFormatError(f"{p.name}: {len(flags)} flags for {len(boxes)} frames")
        attrs[p.stem[len("attr_"):]] = flags
    return SequenceDataset(d.name, frames, boxes, lang, attrs, list(absent or []))


def write_boxes(path: str | Path, boxes: Sequence[BBox | None]) -> None:
    write_atomic(path, "".join(("0,0,0,0" if b is None else b.to_line()) + "\n" for b in boxes))


def write_sequence(directory: str | Path, frames: Sequence[np.ndarray], boxes: Sequence[BBox],
                   language: str | None = None, fmt: str = "png") -> SequenceDataset:
    """Write frames and annotations in the layout ``load_sequence`` reads."""
    d = Path(directory)
    img = d / "img"
    img.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames, start=1):
        if fmt == "npy":
            buf = io.BytesIO()
            np.save(buf, np.asarray(fr, dtype=np.float64))
            write_atomic(img / f"{i:08d}.npy", buf.getvalue())
        else:
            arr = np.clip(np.asarray(fr) * 255.0 + 0.5, 0, 255).astype(np.uint8)
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            write_atomic(img / f"{i:08d}.png", buf.getvalue())
    write_boxes(d / "groundtruth.txt", boxes)
    if language is not None:
        write_atomic(d / "nlp.txt", language)
    return load_sequence(d)


# ---------------------------------------------------------------- one-pass runs

def run_ope(session_factory: Callable[[], object], dataset: SequenceDataset,
            predictions_out: str | Path | None = None) -> tuple[MetricReport, list[BBox]]:
    """Initialize on frame 1, track every later frame once, score the result.

    A tracker exception stops the run; metrics cover the frames reached and the
    report is flagged invalid with the failing frame index.
    """
    session = session_factory()
    first = dataset.gt_boxes[0]
    session.initialize(dataset.frame(0), first)
    preds: list[BBox] = [first]
    error = None
    for t in range(1, len(dataset)):
        try:
            preds.append(session.track(dataset.frame(t)))
        except Exception as exc:  # noqa: BLE001 - any tracker failure ends the sequence
            error = f"frame {t + 1}: {type(exc).__name__}: {exc}"
            log.warning("%s: tracking aborted at %s", dataset.name, error)
            break
    n = len(preds)
    report = compute_metrics(preds, dataset.gt_boxes[:n], dataset.name,
                             attributes={k: v[:n] for k, v in dataset.attributes.items()})
    if error is not None:
        report.valid, report.error = False, error
    if predictions_out is not None:
        write_boxes(predictions_out, preds)
    return report, preds


def evaluate_predictions(preds: Sequence[BBox], dataset: SequenceDataset) -> MetricReport:
    if len(preds) != len(dataset):
        raise SequenceFormatError(f"{dataset.name}: {len(preds)} predictions for {len(dataset)} frames")
    return compute_metrics(preds, dataset.gt_boxes, dataset.name, attributes=dataset.attributes)


def evaluate_many(jobs: Sequence[Callable[[], MetricReport]], workers: int = 1) -> list[MetricReport]:
    """Run independent per-sequence jobs, returning reports in job order."""
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def aggregate(reports: Sequence[MetricReport], name: str = "ALL") -> MetricReport:
    """Sequence-averaged metrics and curves, summed in report order."""
    if not reports:
        raise DegenerateInputError("no reports to aggregate")

    def mean(vals):
        return math.fsum(vals) / len(vals)

    def mean_curve(curves):
        return [mean(col) for col in zip(*curves)]

    return MetricReport(
        name=name, n_frames=sum(r.n_frames for r in reports),
        success_curve=mean_curve([r.success_curve for r in reports]),
        **{k: mean([getattr(r, k) for r in reports]) for k in METRIC_KEYS},
        precision_curve=mean_curve([r.precision_curve for r in reports]),
        np_curve=mean_curve([r.np_curve for r in reports]),
        valid=all(r.valid for r in reports),
    )


def write_report_csv(path: str | Path, reports: Sequence[MetricReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sequence", *METRIC_KEYS, "n_frames", "valid"))
    rows = list(reports) + ([aggregate(reports)] if reports else [])
    for r in rows:
        w.writerow((r.name, *(repr(float(getattr(r, k))) for k in METRIC_KEYS), r.n_frames, int(r.valid)))
    write_atomic(path, buf.getvalue())


def write_report_json(path: str | Path, reports: Sequence[MetricReport]) -> None:
    doc = {
        "success_thresholds": SUCCESS_THRESHOLDS.tolist(),
        "np_thresholds": NP_THRESHOLDS.tolist(),
        "precision_radii": PRECISION_CURVE_RADII.tolist(),
        "sequences": [r.to_dict() for r in reports],
        "aggregate": aggregate(reports).to_dict() if reports else None,
    }
    write_atomic(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
