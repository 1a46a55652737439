"""Decoding, per-slice metrics, the confusion matrix with an "Others" column,
and the CSV report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .losses import CLASS_NAMES, WEAK_OFFSET, ClassId
from .stats import TTestResult, paired_t_test

OTHERS = len(ClassId)
CONFUSION_COLUMNS = CLASS_NAMES + ["OTHERS"]
REFERENCE_METHOD = "proposed_0.1"
TABLE2_ORDER = ("supervised_only", "proposed_0.1", "proposed_1", "semi_supervised")
SUMMARY_HEADER = [
    "method",
    "recall_mean",
    "recall_sd",
    "precision_mean",
    "precision_sd",
    "dice_mean",
    "dice_sd",
]


def fmt(x: float) -> str:
    return f"{x:.6g}"


def decode_argmax(probabilities) -> np.ndarray:
    """Class map from a ``(1, H, W, 5)`` (or ``(H, W, 5)``) probability tensor."""
    p = np.asarray(getattr(probabilities, "data", probabilities))
    if p.ndim == 4:
        if p.shape[0] != 1:
            raise DimensionError(f"expected a single slice, got shape {p.shape}")
        p = p[0]
    return p.argmax(axis=-1).astype(np.uint8)


@dataclass(frozen=True)
class SliceMetrics:
    slice_id: str
    chosen_class: ClassId
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    dice: float
    fold: int = -1


def _ratio(num: int, den: int, vacuous: bool) -> float:
    if den == 0:
        return 1.0 if vacuous else 0.0
    return num / den


def metrics_from_counts(slice_id: str, chosen_class, tp: int, fp: int, fn: int, fold: int = -1) -> SliceMetrics:
    vacuous = tp == fp == fn == 0
    return SliceMetrics(
        slice_id=slice_id,
        chosen_class=ClassId(chosen_class),
        tp=tp,
        fp=fp,
        fn=fn,
        recall=_ratio(tp, tp + fn, vacuous),
        precision=_ratio(tp, tp + fp, vacuous),
        dice=_ratio(2 * tp, 2 * tp + fp + fn, vacuous),
        fold=fold,
    )


def slice_metrics(pred, annotation, fold: int = -1) -> SliceMetrics:
    """Recall, precision and dice of the chosen class on one annotated slice.

    TP, FN come from Strong pixels, FP from Weak pixels predicted as the chosen
    class.  A zero denominator gives 0, except when TP = FP = FN = 0, which
    scores 1 for every metric.
    """
    pred = np.asarray(pred)
    labels = np.asarray(annotation.labels)
    if pred.shape != labels.shape:
        raise DimensionError(f"prediction {pred.shape} does not match annotation {labels.shape}")
    c = int(annotation.chosen_class)
    lung = np.asarray(annotation.lung_mask, dtype=bool)
    strong = lung & (labels == c)
    weak = lung & (labels == WEAK_OFFSET + c)
    hit = pred == c
    tp = int(np.count_nonzero(strong & hit))
    fn = int(np.count_nonzero(strong & ~hit))
    fp = int(np.count_nonzero(weak & hit))
    return metrics_from_counts(annotation.slice_id, c, tp, fp, fn, fold)


@dataclass
class ConfusionMatrix:
    """Pixel counts indexed ``[predicted class, truth]``; truth column 5 is "Others"."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((len(ClassId), len(ClassId) + 1), dtype=np.int64))

    def add(self, pred, annotation) -> None:
        pred = np.asarray(pred)
        labels = np.asarray(annotation.labels)
        if pred.shape != labels.shape:
            raise DimensionError(f"prediction {pred.shape} does not match annotation {labels.shape}")
        lung = np.asarray(annotation.lung_mask, dtype=bool)
        strong = lung & (labels >= 0) & (labels < WEAK_OFFSET)
        np.add.at(self.counts, (pred[strong].astype(int), labels[strong].astype(int)), 1)
        weak = lung & (labels >= WEAK_OFFSET)
        forbidden = labels - WEAK_OFFSET
        wrong = weak & (pred == forbidden)
        np.add.at(self.counts, (pred[wrong].astype(int), OTHERS), 1)

    def normalized(self) -> np.ndarray:
        """Each predicted-class row divided by its total; empty rows stay zero."""
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    def precision(self) -> np.ndarray:
        """Pixel-pooled precision per class: the diagonal of :meth:`normalized`."""
        return np.diag(self.normalized()[:, : len(ClassId)])


def confusion_matrix(results) -> ConfusionMatrix:
    """Accumulate ``(pred_map, annotation)`` pairs."""
    cm = ConfusionMatrix()
    for pred, annotation in results:
        cm.add(pred, annotation)
    return cm


# --------------------------------------------------------------------------
# reports


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def method_order(names) -> list[str]:
    names = list(names)
    known = [m for m in TABLE2_ORDER if m in names]
    return known + [m for m in names if m not in TABLE2_ORDER]


def summary_rows(per_method: dict[str, list[SliceMetrics]]) -> list[list[str]]:
    rows = []
    for m in method_order(per_method):
        row = [m]
        for attr in ("recall", "precision", "dice"):
            mean, sd = _mean_sd([getattr(s, attr) for s in per_method[m]])
            row += [fmt(mean), fmt(sd)]
        rows.append(row)
    return rows


def align_methods(per_method: dict[str, list[SliceMetrics]]) -> dict[str, dict[str, SliceMetrics]]:
    keyed = {m: {s.slice_id: s for s in v} for m, v in per_method.items()}
    ids = None
    for m, d in keyed.items():
        if len(d) != len(per_method[m]):
            raise ContractError(f"duplicate slice ids in results of {m!r}")
        if ids is None:
            ids = set(d)
        elif set(d) != ids:
            raise ContractError(f"method {m!r} was evaluated on a different slice set")
    return keyed


def dice_ttests(per_method: dict[str, list[SliceMetrics]], reference: str = REFERENCE_METHOD) -> list[tuple[str, str, TTestResult, int]]:
    keyed = align_methods(per_method)
    if reference not in keyed:
        return []
    ids = sorted(keyed[reference])
    ref = [keyed[reference][i].dice for i in ids]
    out = []
    for m in method_order(keyed):
        if m == reference:
            continue
        other = [keyed[m][i].dice for i in ids]
        out.append((reference, m, paired_t_test(ref, other), len(ids)))
    return out


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def aggregate_report(
    per_method: dict[str, list[SliceMetrics]],
    confusion: dict[str, ConfusionMatrix],
    out_dir,
    reference: str = REFERENCE_METHOD,
) -> dict[str, Path]:
    """Write ``summary.csv``, ``per_slice.csv``, ``confusion.csv`` and ``ttests.csv``."""
    if not per_method:
        raise ContractError("no method results to aggregate")
    keyed = align_methods(per_method)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = method_order(per_method)
    files = {}

    files["summary"] = out / "summary.csv"
    files["summary"].write_text(csv_text(SUMMARY_HEADER, summary_rows(per_method)))

    rows = []
    for m in methods:
        for sid in sorted(keyed[m]):
            s = keyed[m][sid]
            rows.append([m, sid, s.fold, s.chosen_class.name, s.tp, s.fp, s.fn, fmt(s.recall), fmt(s.precision), fmt(s.dice)])
    files["per_slice"] = out / "per_slice.csv"
    files["per_slice"].write_text(
        csv_text(["method", "slice_id", "fold", "chosen_class", "tp", "fp", "fn", "recall", "precision", "dice"], rows)
    )

    rows = []
    for m in methods:
        cm = confusion.get(m)
        if cm is None:
            continue
        norm = cm.normalized()
        for i, name in enumerate(CLASS_NAMES):
            rows.append([m, "count", name] + [str(int(x)) for x in cm.counts[i]])
        for i, name in enumerate(CLASS_NAMES):
            rows.append([m, "normalized", name] + [fmt(x) for x in norm[i]])
    files["confusion"] = out / "confusion.csv"
    files["confusion"].write_text(csv_text(["method", "kind", "pred"] + CONFUSION_COLUMNS, rows))

    rows = [
        [ref, m, "dice", n, fmt(r.t), r.df, fmt(r.p)] for ref, m, r, n in dice_ttests(per_method, reference)
    ]
    files["ttests"] = out / "ttests.csv"
    files["ttests"].write_text(csv_text(["reference", "method", "metric", "n", "t", "df", "p"], rows))
    return files


def read_per_slice(path) -> dict[str, list[SliceMetrics]]:
    """Inverse of the ``per_slice.csv`` writer; metrics are recomputed from the counts."""
    out: dict[str, list[SliceMetrics]] = {}
    try:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.setdefault(r["method"], []).append(
                    metrics_from_counts(
                        r["slice_id"], ClassId[r["chosen_class"]], int(r["tp"]), int(r["fp"]), int(r["fn"]), int(r["fold"])
                    )
                )
    except (KeyError, ValueError) as exc:
        raise OSError(f"{path}: malformed per-slice row ({exc})") from exc
    return out


def read_confusion_counts(path) -> dict[str, ConfusionMatrix]:
    """The ``count`` rows of a ``confusion.csv`` file, keyed by method."""
    out: dict[str, ConfusionMatrix] = {}
    try:
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                if r["kind"] != "count":
                    continue
                cm = out.setdefault(r["method"], ConfusionMatrix())
                cm.counts[CLASS_NAMES.index(r["pred"])] = [int(r[c]) for c in CONFUSION_COLUMNS]
    except (KeyError, ValueError) as exc:
        raise OSError(f"{path}: malformed confusion row ({exc})") from exc
    return out
