"""AUC, group-wise AUC, equity-scaled AUC, DPD and DEOdds.

Everything is computed in fractions; :func:`report_to_csv` renders percentages.

Definitions (binarized prediction ``yhat = score >= threshold``):

* DPD    = max_g P(yhat=1 | g) - min_g P(yhat=1 | g)
* DEOdds = max(TPR gap across groups, FPR gap across groups)
* ES-AUC = AUC / (1 + sum_g |AUC - AUC_g|)
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_FORMAT_VERSION = 1


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Predictions:
    scores: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray
    threshold: float = 0.5
    levels: tuple[int, ...] | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).astype(np.int64).reshape(-1)
        g = np.asarray(self.group_ids).astype(np.int64).reshape(-1)
        if not (s.size == y.size == g.size) or s.size < 1:
            raise MetricError("scores, labels and group_ids must have equal length >= 1")
        if not np.all(np.isin(y, (0, 1))):
            raise MetricError("labels must be 0/1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "group_ids", g)

    def group_levels(self) -> list[int]:
        if self.levels is not None:
            return list(self.levels)
        return sorted(int(x) for x in np.unique(self.group_ids))

    def binarized(self) -> np.ndarray:
        return (self.scores >= self.threshold).astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant pairs + 0.5 * ties) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def es_auc(overall_auc: float, group_aucs: Mapping[int, float]) -> float:
    disparity = sum(abs(overall_auc - g) for g in group_aucs.values())
    return float(overall_auc / (1.0 + disparity))


def groupwise_auc(preds: Predictions) -> dict[int, float]:
    out = {}
    for level in preds.group_levels():
        mask = preds.group_ids == level
        y = preds.labels[mask]
        if y.size == 0 or y.min() == y.max():
            warnings.warn(f"group {level} lacks both classes; group AUC omitted", stacklevel=2)
            continue
        out[level] = auc(preds.scores[mask], y)
    return out


def _group_masks(preds: Predictions) -> dict[int, np.ndarray]:
    masks = {}
    for level in preds.group_levels():
        mask = preds.group_ids == level
        if not mask.any():
            raise MetricError(f"group {level} has no samples")
        masks[level] = mask
    return masks


def dpd(preds: Predictions) -> float:
    yhat = preds.binarized()
    rates = [yhat[m].mean() for m in _group_masks(preds).values()]
    return float(max(rates) - min(rates))


def deodds(preds: Predictions) -> float:
    yhat = preds.binarized()
    tprs, fprs = [], []
    for level, m in _group_masks(preds).items():
        pos = m & (preds.labels == 1)
        neg = m & (preds.labels == 0)
        if not pos.any() or not neg.any():
            raise MetricError(f"group {level} needs both a positive and a negative sample")
        tprs.append(yhat[pos].mean())
        fprs.append(yhat[neg].mean())
    return float(max(max(tprs) - min(tprs), max(fprs) - min(fprs)))


@dataclass
class EvaluationReport:
    attribute_name: str
    auc: float
    group_auc: dict[int, float]
    es_auc: float
    dpd: float
    deodds: float
    sample_counts: dict[int, int] = field(default_factory=dict)
    level_names: dict[int, str] = field(default_factory=dict)
    model: str = ""

    def to_record(self, config_hash: str = "") -> dict:
        rec = asdict(self)
        # JSON object keys must be strings
        for key in ("group_auc", "sample_counts", "level_names"):
            rec[key] = {str(k): v for k, v in rec[key].items()}
        rec["format_version"] = REPORT_FORMAT_VERSION
        rec["config_hash"] = config_hash
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvaluationReport":
        if rec.get("format_version") != REPORT_FORMAT_VERSION:
            raise MetricError(f"unsupported report format_version {rec.get('format_version')!r}")
        ints = lambda d: {int(k): v for k, v in d.items()}  # noqa: E731
        return cls(
            attribute_name=rec["attribute_name"], auc=rec["auc"], group_auc=ints(rec["group_auc"]),
            es_auc=rec["es_auc"], dpd=rec["dpd"], deodds=rec["deodds"],
            sample_counts=ints(rec["sample_counts"]), level_names=ints(rec["level_names"]),
            model=rec.get("model", ""),
        )


def assemble_report(attribute_name: str, overall_auc: float, group_auc: Mapping[int, float],
                    dpd_value: float, deodds_value: float, sample_counts=None, level_names=None,
                    model: str = "") -> EvaluationReport:
    group_auc = dict(sorted(group_auc.items()))
    return EvaluationReport(
        attribute_name=attribute_name, auc=overall_auc, group_auc=group_auc,
        es_auc=es_auc(overall_auc, group_auc), dpd=dpd_value, deodds=deodds_value,
        sample_counts=dict(sample_counts or {}), level_names=dict(level_names or {}), model=model,
    )


def evaluate(preds: Predictions, attribute_name: str, level_names: Sequence[str] | None = None,
             model: str = "") -> EvaluationReport:
    counts = {lv: int(np.sum(preds.group_ids == lv)) for lv in preds.group_levels()}
    names = {lv: level_names[lv] for lv in counts} if level_names is not None else {}
    return assemble_report(
        attribute_name, auc(preds.scores, preds.labels), groupwise_auc(preds),
        dpd(preds), deodds(preds), counts, names, model,
    )


def _group_column(report: EvaluationReport, level: int) -> str:
    return f"auc_{report.level_names.get(level, level)}"


def report_to_csv(reports: Sequence[EvaluationReport], config_hash: str = "") -> str:
    """Flat table in percent: attribute,model,dpd,deodds,auc,es_auc,<group AUC columns>."""
    group_cols: list[str] = []
    for r in reports:
        for lv in sorted(set(r.group_auc) | set(r.sample_counts)):
            col = _group_column(r, lv)
            if col not in group_cols:
                group_cols.append(col)
    buf = io.StringIO()
    buf.write(f"# format_version={REPORT_FORMAT_VERSION} config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attribute", "model", "dpd", "deodds", "auc", "es_auc", *group_cols])
    pct = lambda x: f"{100.0 * x:.4f}"  # noqa: E731
    for r in reports:
        by_col = {_group_column(r, lv): pct(v) for lv, v in r.group_auc.items()}
        w.writerow([r.attribute_name, r.model, pct(r.dpd), pct(r.deodds), pct(r.auc),
                    pct(r.es_auc), *[by_col.get(c, "") for c in group_cols]])
    return buf.getvalue()


def write_report(report: EvaluationReport, directory, config_hash: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report.to_record(config_hash), indent=2, sort_keys=True) + "\n")
    (d / "report.csv").write_text(report_to_csv([report], config_hash))


def read_report(directory) -> EvaluationReport:
    path = Path(directory) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report.json in {directory}")
    return EvaluationReport.from_record(json.loads(path.read_text()))
