import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from hypergale.data import SubjectRecord, SynthSpec, generate_synthetic
from hypergale.errors import ParameterError
from hypergale.hypergraph import build_knn_hyperedges
from hypergale.interpret import (
    HyperedgeReport, dominant_roi, export_report, hyperedge_pattern, rank_rois, roi_importance,
    subject_attention,
)
from hypergale.model import HyperParams, ModelParams, init_params

SPEC = SynthSpec(n_subjects=16, n_rois=8, n_timepoints=50, n_sites=2, block_size=3, seed=1)
HYPER = HyperParams(k=3, hidden_dims=(6,), att_hidden=4, readout_dim=5)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic(SPEC)


@pytest.fixture(scope="module")
def params():
    return init_params(HYPER, SPEC.n_rois, 3)


def test_rank_ties_fall_back_to_index():
    entries = rank_rois(np.full(5, 0.2), [f"r{i}" for i in range(5)], 3)
    assert [e.roi_index for e in entries] == [0, 1, 2]
    entries = rank_rois(np.array([0.1, 0.3, 0.3, 0.05]), list("abcd"), 4)
    assert [e.roi_index for e in entries] == [1, 2, 0, 3]


def test_uniform_attention_without_gates(cohort, params):
    hyper = replace(HYPER, gated_attention=False)
    for _, alpha in subject_attention(params, hyper, cohort):
        np.testing.assert_allclose(alpha, 1 / SPEC.n_rois, rtol=0, atol=1e-15)
    res = roi_importance(params, hyper, cohort, group_by=None, top_n=4)
    assert [e.roi_index for e in res.rankings[0].entries] == [0, 1, 2, 3]


def test_groups_and_empty_group_warning(cohort, params):
    res = roi_importance(params, HYPER, cohort, group_by="label", top_n=3)
    assert [r.group for r in res.rankings] == ["ASD-label", "TD-label"]
    assert sum(r.n_subjects for r in res.rankings) == len(cohort)
    positives = [r for r in cohort if r.label == 1]
    res = roi_importance(params, HYPER, positives, group_by="label")
    assert [r.group for r in res.rankings] == ["ASD-label"]
    assert res.warnings and "TD-label" in res.warnings[0]
    res = roi_importance(params, HYPER, cohort, group_by="prediction")
    assert {r.group for r in res.rankings} <= {"ASD-predicted", "TD-predicted"}
    with pytest.raises(ParameterError):
        roi_importance(params, HYPER, cohort, group_by="site")


def test_mean_attention_is_average_of_subjects(cohort, params):
    alphas = np.array([a for _, a in subject_attention(params, HYPER, cohort)])
    res = roi_importance(params, HYPER, cohort, group_by=None, top_n=SPEC.n_rois)
    got = {e.roi_index: e.mean_attention for e in res.rankings[0].entries}
    np.testing.assert_allclose([got[i] for i in range(SPEC.n_rois)], alphas.mean(axis=0), rtol=1e-15)


def test_complete_hyperedge_pattern(cohort, params):
    hg = build_knn_hyperedges(cohort[0].fc, SPEC.n_rois)
    rep = hyperedge_pattern(params, hg, 2)
    assert rep.members == tuple(range(SPEC.n_rois))
    assert rep.effective_weight == pytest.approx(1.0, abs=1e-12)
    assert len(rep.edge_list()) == SPEC.n_rois * (SPEC.n_rois - 1) // 2
    with pytest.raises(ParameterError):
        hyperedge_pattern(params, hg, SPEC.n_rois)


def test_dominant_roi(params):
    arrays = dict(params.arrays)
    raw = arrays["raw_edge_weights"].copy()
    raw[5, 0] += 1.0
    arrays["raw_edge_weights"] = raw
    assert dominant_roi(ModelParams(arrays)) == 5
    assert dominant_roi(params) == 0  # all weights equal


def _export(tmp_path, cohort, params, top_n=3):
    res = roi_importance(params, HYPER, cohort, group_by="label", top_n=top_n)
    hg = build_knn_hyperedges(cohort[0].fc, HYPER.k)
    patterns = [hyperedge_pattern(params, hg, 1, "asd"), hyperedge_pattern(params, hg, 4, "td")]
    header = {"config_hash": "abc123", "seed": 0}
    return res, export_report(res, patterns, tmp_path, header)


def test_export_files(tmp_path, cohort, params):
    res, files = _export(tmp_path, cohort, params)
    doc = json.loads(files["json"].read_text())
    assert doc["header"]["config_hash"] == "abc123"
    assert doc["rankings"] == [r.to_dict() for r in res.rankings]
    lines = files["ranking_csv"].read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["roi_index", "name", "group", "mean_attention"]
    assert len(rows) - 1 == len(res.rankings) * 3
    edges = list(csv.reader(files["edges:asd"].read_text().splitlines()[1:]))
    assert len(edges) - 1 == HYPER.k * (HYPER.k - 1) // 2
    assert all(float(r[2]) == pytest.approx(1.0, abs=1e-12) for r in edges[1:])


def test_export_deterministic(tmp_path, cohort, params):
    _, a = _export(tmp_path / "a", cohort, params)
    _, b = _export(tmp_path / "b", cohort, params)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_edge_list_pairs():
    rep = HyperedgeReport(0, 1.5, (0, 2, 5))
    assert rep.edge_list() == [(0, 2, 1.5), (0, 5, 1.5), (2, 5, 1.5)]


@pytest.mark.parametrize("seed", range(3))
def test_attention_follows_roi_relabelling(cohort, seed):
    # with a pooled readout the model has no fixed ROI order once the input
    # weights and hyperedge weights are permuted along with the FC
    hyper = replace(HYPER, readout_kind="mean")
    rng = np.random.default_rng(seed)
    base = init_params(hyper, SPEC.n_rois, seed)
    arrays = dict(base.arrays)
    arrays["raw_edge_weights"] = rng.normal(0.5, 0.3, size=(SPEC.n_rois, 1))
    base = ModelParams(arrays)
    perm = rng.permutation(SPEC.n_rois)
    permuted = dict(arrays)
    permuted["theta_0"] = arrays["theta_0"][perm]
    permuted["raw_edge_weights"] = arrays["raw_edge_weights"][perm]
    moved = [SubjectRecord(r.subject_id, r.site_id, r.label, r.fc[np.ix_(perm, perm)]) for r in cohort]
    for (p0, a0), (p1, a1) in zip(subject_attention(base, hyper, cohort), subject_attention(ModelParams(permuted), hyper, moved)):
        assert p1 == pytest.approx(p0, abs=1e-12)
        np.testing.assert_allclose(a1, a0[perm], rtol=0, atol=1e-12)
