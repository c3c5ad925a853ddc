"""Evaluation: binarization at a rain-rate threshold, confusion counting,
ratio metrics, and report assembly.

Precipitation frames hold accumulation per frame interval in hundredths of a
millimeter, so the rain rate of a pixel is ``value * 0.01 * (60 / interval)``
mm/h; normalized values are rescaled by the dataset scale first. The rate
threshold uses the >= convention. Binary cloud data is thresholded at 0.5
directly. Confusion counts accumulate over a whole split before ratios are
taken (micro-averaging); zero-denominator metrics report 0.0 with a flag
instead of NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import WindowDataset
from .errors import UsageError
from .model import Model, persistence_forward
from .tensor import Tensor4

__all__ = [
    "ConfusionCounts", "MetricReport", "EvalSetup", "binarize", "confusion",
    "metrics", "evaluate_setup", "report_rows_sorted", "write_report_csv",
    "render_report_table", "REPORT_COLUMNS", "MODEL_ORDER",
]

REPORT_COLUMNS = ("model", "mse", "precision", "recall", "accuracy", "f1")
MODEL_ORDER = {"persistence": 0, "smaat-config": 1, "sar-unet": 2}

_MM_PER_RAW_UNIT = 0.01


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def add(self, other: "ConfusionCounts") -> None:
        self.tp += other.tp
        self.tn += other.tn
        self.fp += other.fp
        self.fn += other.fn


@dataclass
class MetricValues:
    precision: float
    recall: float
    accuracy: float
    f1: float
    zero_division: tuple[str, ...] = ()


@dataclass
class LeadStats:
    lead_minutes: int
    mse: float
    values: MetricValues


@dataclass
class EvalSetup:
    """Descriptor of one evaluated configuration."""

    model_name: str
    input_minutes: int
    lead_minutes: tuple[int, ...]
    unit: str
    scale: float
    interval_minutes: int
    threshold_mm_per_h: float = 0.5


@dataclass
class MetricReport:
    setup: EvalSetup
    mse: float                       # normalized units (headline)
    mse_physical: float              # raw units: mse * scale^2
    values: MetricValues
    per_lead: list[LeadStats] = field(default_factory=list)


def binarize(image, unit: Optional[str] = None, *, scale: float = 1.0,
             threshold_mm_per_h: float = 0.5, interval_minutes: int = 5,
             normalized: bool = True) -> np.ndarray:
    """Map pixels to {0,1}. ``unit`` metadata is mandatory.

    raw/norm data: rain rate ``value * scale_if_normalized * 0.01 *
    (60/interval)`` mm/h, >= threshold. Binary data: >= 0.5 directly.
    """
    arr = image.data if isinstance(image, Tensor4) else np.asarray(image)
    if unit is None or unit not in ("raw", "binary", "norm"):
        raise UsageError(f"binarize needs unit metadata ('raw'|'binary'|'norm'), got {unit!r}")
    if unit == "binary":
        return (arr >= 0.5).astype(np.uint8)
    values = arr * np.float64(scale) if normalized else arr.astype(np.float64)
    rate = values * _MM_PER_RAW_UNIT * (60.0 / interval_minutes)
    return (rate >= threshold_mm_per_h).astype(np.uint8)


def confusion(pred_bin: np.ndarray, target_bin: np.ndarray) -> ConfusionCounts:
    """Count TP/TN/FP/FN over binary arrays of equal shape; positive class 1."""
    p = np.asarray(pred_bin)
    t = np.asarray(target_bin)
    if p.shape != t.shape:
        raise UsageError(f"confusion needs equal shapes, got {p.shape} vs {t.shape}")
    for name, a in (("pred", p), ("target", t)):
        if not np.isin(a, (0, 1)).all():
            raise UsageError(f"confusion needs binary {name} values in {{0,1}}")
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def metrics(counts: ConfusionCounts) -> MetricValues:
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp, "precision")
    recall = ratio(counts.tp, counts.tp + counts.fn, "recall")
    accuracy = ratio(counts.tp + counts.tn, counts.total, "accuracy")
    f1 = ratio(2.0 * precision * recall, precision + recall, "f1")
    return MetricValues(precision, recall, accuracy, f1, tuple(flags))


PredictFn = Callable[[Tensor4], Tensor4]


def _model_predictor(model: Model) -> PredictFn:
    return lambda inputs: model.forward(inputs, train=False)[0]


def _persistence_predictor(out_ch: int) -> PredictFn:
    return lambda inputs: persistence_forward(inputs, out_ch)


def evaluate_setup(predictor, data: WindowDataset, setup: EvalSetup,
                   batch_size: int = 6) -> MetricReport:
    """Evaluate one model over one split.

    ``predictor`` is a Model, the string ``"persistence"``, or a callable
    mapping normalized inputs to normalized predictions. MSE is averaged over
    all pixels and samples in normalized units (per-sample squared-error sums
    in float64, combined with exact summation); confusion counts accumulate
    over the whole split before ratios (micro-averaging). Per-lead-time rows
    are reported alongside the overall figures.
    """
    if len(data) == 0:
        raise UsageError("evaluate_setup needs a non-empty split")
    n_leads = len(setup.lead_minutes)
    if predictor == "persistence":
        fn = _persistence_predictor(n_leads)
    elif isinstance(predictor, Model):
        fn = _model_predictor(predictor)
    else:
        fn = predictor

    sse_parts: list[float] = []
    lead_sse = [[] for _ in range(n_leads)]
    counts = ConfusionCounts()
    lead_counts = [ConfusionCounts() for _ in range(n_leads)]
    total = 0
    lead_total = [0] * n_leads
    bin_kw = dict(scale=setup.scale, threshold_mm_per_h=setup.threshold_mm_per_h,
                  interval_minutes=setup.interval_minutes)

    for lo in range(0, len(data), batch_size):
        batch = data.batch(range(lo, min(lo + batch_size, len(data))))
        pred = fn(batch.inputs)
        if pred.shape != batch.targets.shape:
            raise UsageError(f"predictor produced shape {pred.shape}, "
                             f"targets have {batch.targets.shape}")
        diff = pred.data.astype(np.float64) - batch.targets.data.astype(np.float64)
        sq = diff * diff
        for s in range(sq.shape[0]):
            sse_parts.append(float(sq[s].sum()))
        total += sq.size
        pbin = binarize(pred.data, setup.unit, **bin_kw)
        tbin = binarize(batch.targets.data, setup.unit, **bin_kw)
        counts.add(confusion(pbin, tbin))
        for k in range(n_leads):
            for s in range(sq.shape[0]):
                lead_sse[k].append(float(sq[s, k].sum()))
            lead_total[k] += sq[:, k].size
            lead_counts[k].add(confusion(pbin[:, k], tbin[:, k]))

    mse = math.fsum(sse_parts) / total
    per_lead = [LeadStats(setup.lead_minutes[k],
                          math.fsum(lead_sse[k]) / lead_total[k],
                          metrics(lead_counts[k]))
                for k in range(n_leads)]
    return MetricReport(setup=setup, mse=mse,
                        mse_physical=mse * setup.scale * setup.scale,
                        values=metrics(counts), per_lead=per_lead)


# -- report rendering -----------------------------------------------------------

def report_rows_sorted(reports: Sequence[MetricReport]) -> list[MetricReport]:
    """Fixed comparison-table ordering: input amount, then lead time, then
    the persistence / smaat-config / sar-unet model order."""
    def key(r: MetricReport):
        return (r.setup.input_minutes, r.setup.lead_minutes,
                MODEL_ORDER.get(r.setup.model_name, 99), r.setup.model_name)

    return sorted(reports, key=key)


def write_report_csv(path, reports: Sequence[MetricReport]) -> None:
    rows = report_rows_sorted(reports)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            v = r.values
            f.write(f"{r.setup.model_name},{r.mse!r},{v.precision!r},"
                    f"{v.recall!r},{v.accuracy!r},{v.f1!r}\n")


def write_per_lead_csv(path, reports: Sequence[MetricReport]) -> None:
    """Plot-ready per-lead-time averages."""
    rows = report_rows_sorted(reports)
    with open(path, "w", encoding="utf-8") as f:
        f.write("model,lead_minutes,mse,precision,recall,accuracy,f1\n")
        for r in rows:
            for ls in r.per_lead:
                v = ls.values
                f.write(f"{r.setup.model_name},{ls.lead_minutes},{ls.mse!r},"
                        f"{v.precision!r},{v.recall!r},{v.accuracy!r},{v.f1!r}\n")


def render_report_table(reports: Sequence[MetricReport]) -> str:
    """Aligned text table (MSE, Precision, Recall, Accuracy, F1 score) with a
    ``*`` marker on the best value per column within each setup group; lowest
    MSE wins, highest wins elsewhere. A footer states the normalization scale
    and the physical-unit MSE per model."""
    rows = report_rows_sorted(reports)
    groups: dict[tuple, list[MetricReport]] = {}
    for r in rows:
        groups.setdefault((r.setup.input_minutes, r.setup.lead_minutes), []).append(r)

    header = ["Input", "Lead", "Model", "MSE", "Precision", "Recall",
              "Accuracy", "F1 score"]
    lines = []
    for (inp, leads), members in groups.items():
        best = {
            "mse": min(m.mse for m in members),
            "precision": max(m.values.precision for m in members),
            "recall": max(m.values.recall for m in members),
            "accuracy": max(m.values.accuracy for m in members),
            "f1": max(m.values.f1 for m in members),
        }
        for m in members:
            def cell(value, name):
                mark = "*" if value == best[name] and len(members) > 1 else " "
                return f"{value:.4f}{mark}"

            lead_txt = "/".join(str(x) for x in leads)
            lines.append([f"{inp} min", f"{lead_txt} min", m.setup.model_name,
                          cell(m.mse, "mse"), cell(m.values.precision, "precision"),
                          cell(m.values.recall, "recall"),
                          cell(m.values.accuracy, "accuracy"),
                          cell(m.values.f1, "f1")])
    widths = [max(len(header[i]), *(len(row[i]) for row in lines)) if lines else len(header[i])
              for i in range(len(header))]
    out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    out.append("  ".join("-" * w for w in widths))
    for row in lines:
        out.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)))
    if rows:
        scale = rows[0].setup.scale
        out.append("")
        out.append(f"normalization scale s = {scale!r}; physical-unit MSE = normalized * s^2:")
        for r in rows:
            out.append(f"  {r.setup.model_name}: {r.mse_physical!r}")
    return "\n".join(out) + "\n"
