"""ROI rankings from gated-attention scores and hyperedge patterns from learned weights."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SubjectRecord
from .errors import ParameterError
from .hypergraph import Hypergraph
from .metrics import THRESHOLD
from .model import HyperParams, ModelParams, forward_graph
from .training import prepare

GROUP_LABELS = {
    "prediction": {1: "ASD-predicted", 0: "TD-predicted"},
    "label": {1: "ASD-label", 0: "TD-label"},
}


@dataclass(frozen=True)
class RoiEntry:
    roi_index: int
    roi_name: str
    mean_attention: float


@dataclass(frozen=True)
class RoiRanking:
    group: str
    n_subjects: int
    entries: tuple[RoiEntry, ...]

    def to_dict(self) -> dict:
        return {"group": self.group, "n_subjects": self.n_subjects, "entries": [asdict(e) for e in self.entries]}


@dataclass(frozen=True)
class HyperedgeReport:
    roi_index: int
    effective_weight: float
    members: tuple[int, ...]
    label: str = ""

    def edge_list(self) -> list[tuple[int, int, float]]:
        """Undirected member pairs, each carrying the hyperedge weight."""
        return [(a, b, self.effective_weight) for a, b in itertools.combinations(self.members, 2)]

    def to_dict(self) -> dict:
        return {"roi_index": self.roi_index, "effective_weight": self.effective_weight,
                "members": list(self.members), "label": self.label}


@dataclass
class InterpretResult:
    rankings: list[RoiRanking]
    warnings: list[str] = field(default_factory=list)


def default_names(n: int) -> list[str]:
    return [f"roi_{i}" for i in range(n)]


def rank_rois(mean_alpha: np.ndarray, names: Sequence[str], top_n: int) -> tuple[RoiEntry, ...]:
    """Descending by attention; equal attention falls back to ascending ROI index."""
    order = np.lexsort((np.arange(mean_alpha.size), -mean_alpha))[:top_n]
    return tuple(RoiEntry(int(i), names[i], float(mean_alpha[i])) for i in order)


def subject_attention(params: ModelParams, hyper: HyperParams, records: Sequence[SubjectRecord]):
    """Per-subject ``(probability, alpha)`` with alpha of length N."""
    k = hyper.resolve_k(params.raw_edge_weights.size)
    leaves = params.leaves()
    out = []
    for p in prepare(records, k):
        prob, alpha = forward_graph(leaves, hyper, p.hg, p.record.fc)
        out.append((float(prob.value[0, 0]), alpha.value.reshape(-1).copy()))
    return out


def roi_importance(
    params: ModelParams,
    hyper: HyperParams,
    records: Sequence[SubjectRecord],
    group_by: str | None = "prediction",
    top_n: int = 20,
    names: Sequence[str] | None = None,
) -> InterpretResult:
    """Mean attention per ROI, overall (``group_by=None``) or per predicted/true class."""
    if not records:
        raise ParameterError("roi_importance needs at least one record")
    if group_by not in (None, "prediction", "label"):
        raise ParameterError(f"group_by must be None, 'prediction' or 'label', got {group_by!r}")
    n = records[0].n_rois
    names = list(names) if names is not None else default_names(n)
    top_n = min(top_n, n)
    att = subject_attention(params, hyper, records)
    alphas = np.array([a for _, a in att])
    if group_by is None:
        return InterpretResult([RoiRanking("all", len(records), rank_rois(alphas.mean(axis=0), names, top_n))])

    if group_by == "prediction":
        cls = np.array([int(p > THRESHOLD) for p, _ in att])
    else:
        cls = np.array([r.label for r in records])
    result = InterpretResult([])
    for c in (1, 0):
        group = GROUP_LABELS[group_by][c]
        mask = cls == c
        if not mask.any():
            result.warnings.append(f"group {group} is empty; omitted")
            continue
        result.rankings.append(RoiRanking(group, int(mask.sum()), rank_rois(alphas[mask].mean(axis=0), names, top_n)))
    return result


def hyperedge_pattern(params: ModelParams, hg: Hypergraph, roi_index: int, label: str = "") -> HyperedgeReport:
    """The hyperedge centred on ``roi_index`` with its learned weight."""
    if not 0 <= roi_index < hg.n_nodes:
        raise ParameterError(f"roi_index {roi_index} out of range [0, {hg.n_nodes})")
    w = params.effective_edge_weights()
    return HyperedgeReport(int(roi_index), float(w[roi_index]), tuple(hg.members[roi_index]), label)


def dominant_roi(params: ModelParams) -> int:
    """ROI whose hyperedge carries the largest learned weight (lowest index on ties)."""
    return int(np.argmax(params.effective_edge_weights()))


def report_dict(result: InterpretResult, patterns: Sequence[HyperedgeReport], header: dict | None = None) -> dict:
    out = {
        "rankings": [r.to_dict() for r in result.rankings],
        "hyperedges": [p.to_dict() for p in patterns],
        "warnings": list(result.warnings),
    }
    if header is not None:
        out = {"header": header, **out}
    return out


def _csv_text(rows, header_comment: str | None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def export_report(result: InterpretResult, patterns: Sequence[HyperedgeReport], path, header: dict | None = None) -> dict[str, Path]:
    """Write ``interpret.json``, ``roi_ranking.csv`` and one ``hyperedge_<tag>.csv`` per pattern."""
    root = Path(path)
    comment = f"config_hash={header['config_hash']}" if header else None
    rank_rows = [("roi_index", "name", "group", "mean_attention")]
    for r in result.rankings:
        rank_rows += [(e.roi_index, e.roi_name, r.group, repr(e.mean_attention)) for e in r.entries]
    texts = {
        "json": ("interpret.json", json.dumps(report_dict(result, patterns, header), indent=2, sort_keys=True) + "\n"),
        "ranking_csv": ("roi_ranking.csv", _csv_text(rank_rows, comment)),
    }
    for p in patterns:
        tag = p.label or f"roi_{p.roi_index}"
        rows = [("source_roi", "target_roi", "weight")] + [(a, b, repr(w)) for a, b, w in p.edge_list()]
        texts[f"edges:{tag}"] = (f"hyperedge_{tag}.csv", _csv_text(rows, comment))
    files = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for key, (name, text) in texts.items():
            files[key] = root / name
            files[key].write_text(text)
    except OSError as exc:
        raise OSError(f"{exc.filename or root}: {exc.strerror}") from exc
    return files
