"""FC estimation, planted-structure synthetic cohorts, dataset files and splits."""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateSignalError, FormatError, SpecError, SplitError, ValidationError
from .hypergraph import validate_fc

FC_MAGIC = b"FCM1"
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    site_id: str
    label: int  # 0 = TD, 1 = ASD
    fc: np.ndarray

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"{self.subject_id}: label must be 0 or 1, got {self.label!r}")

    @property
    def n_rois(self) -> int:
        return self.fc.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (
            (self.subject_id, self.site_id, self.label) == (other.subject_id, other.site_id, other.label)
            and self.fc.shape == other.fc.shape
            and self.fc.tobytes() == other.fc.tobytes()
        )

    __hash__ = None


def _check_timeseries(ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2:
        raise ValidationError(f"time series must be T x N, got shape {ts.shape}")
    if ts.shape[0] < 3:
        raise ValidationError(f"need at least 3 time points, got {ts.shape[0]}")
    if not np.all(np.isfinite(ts)):
        raise ValidationError("time series contains non-finite values")
    flat = np.ptp(ts, axis=0) == 0
    if flat.any():
        raise DegenerateSignalError(int(np.flatnonzero(flat)[0]))
    return ts


def _cov_to_corr(cov: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(cov))
    corr = np.clip(cov / np.outer(sd, sd), -1.0, 1.0)
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return corr


def pearson_fc(timeseries) -> np.ndarray:
    """Full (Pearson) correlation between the columns of a ``T x N`` series."""
    ts = _check_timeseries(timeseries)
    centered = ts - ts.mean(axis=0)
    return _cov_to_corr(centered.T @ centered)


def ledoit_wolf_shrinkage(timeseries) -> tuple[np.ndarray, float]:
    """Ledoit-Wolf covariance shrunk towards ``mu I``; returns ``(cov, delta)``."""
    x = _check_timeseries(timeseries)
    t, n = x.shape
    x = x - x.mean(axis=0)
    s = x.T @ x / t
    mu = np.trace(s) / n
    target_dist = np.sum((s - mu * np.eye(n)) ** 2)
    # Mean squared Frobenius distance of the per-sample outer products from S.
    x2 = x**2
    dispersion = (np.sum(x2.T @ x2) / t - np.sum(s**2)) / t
    dispersion = min(dispersion, target_dist)
    delta = 0.0 if target_dist == 0 else float(np.clip(dispersion / target_dist, 0.0, 1.0))
    return (1.0 - delta) * s + delta * mu * np.eye(n), delta


def ledoit_wolf_fc(timeseries) -> np.ndarray:
    cov, _ = ledoit_wolf_shrinkage(timeseries)
    return _cov_to_corr(cov)


ESTIMATORS = {"pearson": pearson_fc, "ledoit_wolf": ledoit_wolf_fc}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 200
    n_rois: int = 40
    n_timepoints: int = 150
    n_sites: int = 4
    class_balance: float = 0.5
    block_size: int = 10
    effect_strength: float = 0.4
    site_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2 or self.n_rois < 2 or self.n_timepoints < 3 or self.n_sites < 1:
            raise SpecError("n_subjects, n_rois >= 2, n_timepoints >= 3, n_sites >= 1 required")
        if not 0.0 < self.class_balance < 1.0:
            raise SpecError(f"class_balance must be in (0, 1), got {self.class_balance}")
        if not 2 <= self.block_size <= self.n_rois:
            raise SpecError(f"block_size must be in [2, n_rois], got {self.block_size}")
        if not 0.0 <= self.effect_strength < 1.0:
            raise SpecError(f"effect_strength must be in [0, 1), got {self.effect_strength}")
        if self.site_noise < 0:
            raise SpecError("site_noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def planted_block(spec: SynthSpec) -> np.ndarray:
    """Sorted ROI indices carrying the class-1 effect (seeded, not contiguous)."""
    rng = np.random.default_rng([spec.seed, 1])
    return np.sort(rng.choice(spec.n_rois, size=spec.block_size, replace=False))


def class_templates(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Correlation templates for class 0 and class 1."""
    n = spec.n_rois
    rng = np.random.default_rng([spec.seed, 0])
    loadings = rng.normal(scale=0.2, size=(n, 2))
    base = _cov_to_corr(np.eye(n) + loadings @ loadings.T)
    block = planted_block(spec)
    plus = base.copy()
    sub = np.ix_(block, block)
    plus[sub] += spec.effect_strength
    np.fill_diagonal(plus, 1.0)
    for name, m in (("class 0", base), ("class 1", plus)):
        if np.linalg.eigvalsh(m).min() <= 1e-10:
            raise SpecError(f"{name} template is not positive-definite; use a smaller effect_strength")
    return base, plus


def generate_synthetic(spec: SynthSpec) -> list[SubjectRecord]:
    templates = [np.linalg.cholesky(t) for t in class_templates(spec)]
    rng = np.random.default_rng([spec.seed, 2])
    n1 = int(round(spec.n_subjects * spec.class_balance))
    labels = np.array([1] * n1 + [0] * (spec.n_subjects - n1))
    rng.shuffle(labels)
    gains = np.exp(spec.site_noise * rng.normal(size=(spec.n_sites, spec.n_rois)))
    noise_sd = spec.site_noise * (1.0 + rng.uniform(size=spec.n_sites))
    width = max(2, len(str(spec.n_sites - 1)))
    records = []
    for i, label in enumerate(labels):
        site = i % spec.n_sites
        z = rng.standard_normal((spec.n_timepoints, spec.n_rois)) @ templates[label].T
        ts = gains[site] * z + noise_sd[site] * rng.standard_normal(z.shape)
        records.append(SubjectRecord(f"sub-{i:04d}", f"site-{site:0{width}d}", int(label), pearson_fc(ts)))
    return records


# --- FCM1 binary: b"FCM1" | u32 N (LE) | N*N float64 (LE, row-major) ---

def write_fc(path, fc: np.ndarray) -> None:
    fc = np.ascontiguousarray(fc, dtype="<f8")
    Path(path).write_bytes(FC_MAGIC + struct.pack("<I", fc.shape[0]) + fc.tobytes())


def read_fc(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8:
        raise FormatError("truncated header", path, len(buf))
    if buf[:4] != FC_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {FC_MAGIC!r}", path, 0)
    (n,) = struct.unpack("<I", buf[4:8])
    need = 8 + 8 * n * n
    if len(buf) != need:
        raise FormatError(f"payload size mismatch for N={n}: expected {need} bytes, got {len(buf)}", path, min(len(buf), need))
    fc = np.frombuffer(buf, dtype="<f8", offset=8).reshape(n, n).astype(np.float64)
    try:
        return validate_fc(fc, name=str(path))
    except ValidationError as exc:
        raise FormatError(f"invariant violation: {exc}", path, 8) from exc


def save_dataset(path, records: Sequence[SubjectRecord], names: Sequence[str] | None = None) -> Path:
    """Write ``<path>/manifest.jsonl`` plus one FCM1 file per subject; returns the manifest path."""
    root = Path(path)
    (root / "fc").mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = []
    for rec in records:
        if rec.subject_id in seen:
            raise ValidationError(f"duplicate subject_id {rec.subject_id}")
        seen.add(rec.subject_id)
        rel = f"fc/{rec.subject_id}.fcm"
        write_fc(root / rel, rec.fc)
        entry = {"subject_id": rec.subject_id, "site_id": rec.site_id, "label": rec.label, "fc_path": rel}
        lines.append(json.dumps(entry, sort_keys=True))
    if names is not None:
        (root / "names.txt").write_text("".join(f"{n}\n" for n in names))
    manifest = root / MANIFEST_NAME
    tmp = manifest.with_suffix(".jsonl.tmp")
    tmp.write_text("".join(f"{line}\n" for line in lines))
    os.replace(tmp, manifest)
    return manifest


def load_dataset(path) -> list[SubjectRecord]:
    """Load from a manifest file or a directory containing ``manifest.jsonl``."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    try:
        text = manifest.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read manifest ({exc.strerror})", manifest) from exc
    records, seen = [], set()
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        at, offset = offset, offset + len(line.encode())
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            sid, site, label, rel = (entry[k] for k in ("subject_id", "site_id", "label", "fc_path"))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"line {lineno}: malformed manifest entry ({exc})", manifest, at) from exc
        if sid in seen:
            raise FormatError(f"line {lineno}: duplicate subject_id {sid}", manifest, at)
        seen.add(sid)
        fc_file = manifest.parent / rel
        if not fc_file.is_file():
            raise FormatError(f"subject {sid}: FC file {rel} not found", manifest, at)
        if label not in (0, 1) or isinstance(label, bool):
            raise FormatError(f"subject {sid}: label must be 0 or 1", manifest, at)
        records.append(SubjectRecord(str(sid), str(site), int(label), read_fc(fc_file)))
    return records


def load_names(path, n_rois: int) -> list[str]:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if len(names) != n_rois:
        raise FormatError(f"names file has {len(names)} entries, expected {n_rois}", path)
    return names


def read_timeseries_csv(path) -> tuple[list[str], np.ndarray]:
    """T rows x N columns with a header row of ROI names."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError("CSV needs a header row and at least one data row", path)
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"non-numeric value ({exc})", path) from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise FormatError(f"rows do not all have {len(header)} columns", path)
    return header, data


# --- splits -----------------------------------------------------------------

def _by_label(records) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {0: [], 1: []}
    for i, r in enumerate(records):
        groups[r.label].append(i)
    return groups


def split_stratified(records, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups = _by_label(records)
    for label, idx in groups.items():
        if len(idx) < 2:
            raise SplitError(f"label {label} has {len(idx)} member(s); need at least 2")
    rng = np.random.default_rng(seed)
    test_idx = set()
    for label in (0, 1):
        idx = np.array(groups[label])
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        n_test = min(max(n_test, 1), len(idx) - 1)
        test_idx.update(idx[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


def kfold_splits(records, n_folds: int, seed: int):
    """Stratified k-fold: returns ``[(fold_id, train, test), ...]``."""
    if n_folds < 2:
        raise SplitError(f"n_folds must be >= 2, got {n_folds}")
    groups = _by_label(records)
    for label, idx in groups.items():
        if len(idx) < n_folds:
            raise SplitError(f"label {label} has {len(idx)} members, fewer than {n_folds} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(records), dtype=int)
    offset = 0
    for label in (0, 1):
        idx = np.array(groups[label])
        rng.shuffle(idx)
        fold_of[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return [
        (
            f"fold-{f}",
            [r for i, r in enumerate(records) if fold_of[i] != f],
            [r for i, r in enumerate(records) if fold_of[i] == f],
        )
        for f in range(n_folds)
    ]


def loso_splits(records):
    """One fold per site (lexicographic site order), holding that site out."""
    sites = sorted({r.site_id for r in records})
    if len(sites) < 2:
        raise SplitError(f"leave-one-site-out needs at least 2 sites, found {len(sites)}")
    return [
        (site, [r for r in records if r.site_id != site], [r for r in records if r.site_id == site])
        for site in sites
    ]
