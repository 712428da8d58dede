"""Mini-batch Adam training, evaluation, cross-validation and ablation sweeps."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import SubjectRecord, kfold_splits, loso_splits, split_stratified
from .errors import ContractError, ParameterError, SplitError, TrainingDivergedError
from .hypergraph import Hypergraph, build_knn_hyperedges
from .metrics import MetricsReport, metrics_from_scores, summarize
from .model import HyperParams, ModelParams, forward_graph, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0
    hyper: HyperParams = field(default_factory=HyperParams)
    early_stop_patience: int | None = None
    val_fraction: float = 0.1  # inner validation split used by run_cv

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ParameterError("adam betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = self.hyper.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "hyper" in d:
            d["hyper"] = HyperParams.from_dict(d["hyper"])
        return cls(**d)


def bce_loss(probabilities, labels) -> float:
    p = ad.Tensor(np.asarray(probabilities, dtype=np.float64).reshape(1, -1))
    y = ad.Tensor(np.asarray(labels, dtype=np.float64).reshape(1, -1))
    return float(ad.bce(p, y).value[0, 0])


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, frozen=()) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Names in ``frozen`` are copied through untouched.
    """
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        if name in frozen:
            new_params[name] = p.copy()
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ContractError(f"adam_step: moment shape mismatch for {name}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updated = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        if config.weight_decay:
            updated = updated - lr * config.weight_decay * p
        new_params[name], m_out[name], v_out[name] = updated, m, v
    return new_params, AdamState(m_out, v_out, t)


@dataclass(frozen=True)
class Prepared:
    record: SubjectRecord
    hg: Hypergraph


def prepare(records: Sequence[SubjectRecord], k: int) -> list[Prepared]:
    return [Prepared(r, build_knn_hyperedges(r.fc, k)) for r in records]


def _check_dims(records, n_nodes: int) -> None:
    for r in records:
        if r.n_rois != n_nodes:
            raise ContractError(f"{r.subject_id}: FC has {r.n_rois} ROIs, model expects {n_nodes}")


def predict(params: ModelParams, hyper: HyperParams, records: Sequence[SubjectRecord], prepared=None) -> np.ndarray:
    n_nodes = params.raw_edge_weights.size
    _check_dims(records, n_nodes)
    prepared = prepared or prepare(records, hyper.resolve_k(n_nodes))
    leaves = params.leaves()
    return np.array([float(forward_graph(leaves, hyper, p.hg, p.record.fc)[0].value[0, 0]) for p in prepared])


def evaluate(params: ModelParams, hyper: HyperParams, records: Sequence[SubjectRecord]) -> MetricsReport:
    scores = predict(params, hyper, records)
    return metrics_from_scores(scores, [r.label for r in records])


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float | None
    val_auc: float | None
    val_loss: float | None


@dataclass
class TrainResult:
    params: ModelParams
    hyper: HyperParams
    history: list[EpochRecord]
    best_epoch: int

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_accuracy,val_auc"]
        for h in self.history:
            cells = [h.epoch, repr(h.train_loss), h.val_accuracy, h.val_auc]
            lines.append(",".join("" if c is None else (c if isinstance(c, str) else repr(c)) for c in cells))
        return "\n".join(lines) + "\n"


def _subject_grads(leaves, hyper, prep: Prepared):
    prob, _ = forward_graph(leaves, hyper, prep.hg, prep.record.fc)
    loss = ad.bce(prob, ad.constant([[float(prep.record.label)]]))
    grads = ad.backward(loss, leaves.values())
    return float(loss.value[0, 0]), grads


def train(
    config: TrainConfig,
    train_records: Sequence[SubjectRecord],
    val_records: Sequence[SubjectRecord] | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Train on ``train_records``; keeps the parameters with the best validation AUC.

    Ties in validation AUC go to the lower validation loss, then the earlier
    epoch. Without a validation set the final parameters are kept.
    """
    if not train_records or len({r.label for r in train_records}) < 2:
        raise SplitError("training set must be nonempty and contain both classes")
    n_nodes = train_records[0].n_rois
    _check_dims(train_records, n_nodes)
    hyper = replace(config.hyper, k=config.hyper.resolve_k(n_nodes))
    params = init_params(hyper, n_nodes, config.seed)
    frozen = () if hyper.learn_edges else ("raw_edge_weights",)
    train_prep = prepare(train_records, hyper.k)
    val_prep = prepare(val_records, hyper.k) if val_records else None
    val_labels = [r.label for r in val_records] if val_records else None

    rng = np.random.default_rng([config.seed, 7])
    state = AdamState()
    history: list[EpochRecord] = []
    best_key, best_params, best_epoch, stale = None, params.copy(), 0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_prep))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            leaves = params.leaves(requires_grad=True)
            total = {name: np.zeros_like(v) for name, v in params.arrays.items()}
            # fixed subject order keeps the reduction deterministic
            for i in batch:
                loss, grads = _subject_grads(leaves, hyper, train_prep[i])
                losses.append(loss)
                for name, leaf in leaves.items():
                    total[name] += grads[leaf]
            mean_grads = {name: g / len(batch) for name, g in total.items()}
            arrays, state = adam_step(params.arrays, mean_grads, state, config, frozen)
            params = ModelParams(arrays)
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(epoch)

        val_acc = val_auc = val_loss = None
        if val_prep:
            scores = predict(params, hyper, val_records, val_prep)
            report = metrics_from_scores(scores, val_labels)
            val_acc, val_auc = report.accuracy, report.auc
            val_loss = bce_loss(scores, val_labels)
        history.append(EpochRecord(epoch, train_loss, val_acc, val_auc, val_loss))
        log.debug("epoch %d loss %.4f val_auc %s", epoch, train_loss, val_auc)
        if on_epoch is not None:
            on_epoch(epoch, params)

        if val_prep:
            key = (-1.0 if val_auc is None else val_auc, -val_loss)
            if best_key is None or key > best_key:
                best_key, best_params, best_epoch, stale = key, params.copy(), epoch, 0
            else:
                stale += 1
            if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                break
        else:
            best_params, best_epoch = params, epoch
    return TrainResult(best_params, hyper, history, best_epoch)


# --- cross-validation -------------------------------------------------------

@dataclass
class FoldResult:
    fold_id: str
    metrics: MetricsReport
    per_subject: list[dict]
    best_epoch: int

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "metrics": self.metrics.to_dict(),
            "per_subject": self.per_subject,
            "best_epoch": self.best_epoch,
        }


@dataclass
class CVResult:
    folds: list[FoldResult]
    config: TrainConfig
    protocol: str

    @property
    def reports(self) -> list[MetricsReport]:
        return [f.metrics for f in self.folds]

    def summary(self) -> dict:
        return summarize(self.reports)

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "summary": self.summary(),
            "config": {**self.config.to_dict(), "protocol": self.protocol},
        }


def _run_fold(args) -> FoldResult:
    fold_index, fold_id, config, train_records, test_records = args
    fold_config = replace(config, seed=config.seed + fold_index)
    try:
        inner_train, val = split_stratified(train_records, config.val_fraction, fold_config.seed)
    except SplitError:
        inner_train, val = train_records, None
    result = train(fold_config, inner_train, val)
    scores = predict(result.params, result.hyper, test_records)
    labels = [r.label for r in test_records]
    per_subject = [
        {"subject_id": r.subject_id, "score": float(s), "label": r.label}
        for r, s in zip(test_records, scores)
    ]
    return FoldResult(fold_id, metrics_from_scores(scores, labels), per_subject, result.best_epoch)


def make_folds(records, folds: int | str, seed: int):
    if folds == "loso":
        return loso_splits(records)
    return kfold_splits(records, int(folds), seed)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_cv(config: TrainConfig, records: Sequence[SubjectRecord], folds: int | str = 5, jobs: int = 1) -> CVResult:
    """k-fold (stratified) or leave-one-site-out (``folds="loso"``) evaluation.

    Fold ``i`` trains with seed ``config.seed + i``.
    """
    splits = make_folds(records, folds, config.seed)
    tasks = [(i, fid, config, tr, te) for i, (fid, tr, te) in enumerate(splits)]
    results = _map(_run_fold, tasks, jobs)
    protocol = "loso" if folds == "loso" else f"{int(folds)}-fold"
    return CVResult(results, config, protocol)


# --- ablations --------------------------------------------------------------

ABLATION_AXES = ("k", "layers", "readout", "gated_attention", "learned_edges", "ga_he")
GA_HE_GRID = ((False, False), (False, True), (True, False), (True, True))  # (learned edges, GA)


def ablation_settings(axis: str, values, n_nodes: int) -> list[tuple[dict, HyperParams]]:
    """Expand an axis into ``(setting, hyper-overrides)`` pairs, validating each value."""
    if axis not in ABLATION_AXES:
        raise ParameterError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if axis == "ga_he" and values is None:
        values = GA_HE_GRID
    if not values:
        raise ParameterError(f"ablation axis {axis!r} needs at least one value")
    out = []
    for v in values:
        if axis == "k":
            if not 2 <= int(v) <= n_nodes:
                raise ParameterError(f"k={v} outside [2, N={n_nodes}]")
            out.append(({"k": int(v)}, {"k": int(v)}))
        elif axis == "layers":
            if int(v) < 1:
                raise ParameterError(f"layers={v} must be >= 1")
            out.append(({"layers": int(v)}, {"n_layers": int(v)}))
        elif axis == "readout":
            out.append(({"readout": v}, {"readout_kind": v}))
        elif axis == "gated_attention":
            out.append(({"gated_attention": bool(v)}, {"gated_attention": bool(v)}))
        elif axis == "learned_edges":
            out.append(({"learned_edges": bool(v)}, {"learn_edges": bool(v)}))
        else:
            he, ga = v
            out.append(({"learned_edges": bool(he), "gated_attention": bool(ga)},
                        {"learn_edges": bool(he), "gated_attention": bool(ga)}))
    return out


@dataclass
class AblationRow:
    setting: dict
    cv: CVResult

    def to_dict(self) -> dict:
        return {"setting": self.setting, **self.cv.to_dict()}


def _run_setting(args) -> CVResult:
    config, records, folds = args
    return run_cv(config, records, folds, jobs=1)


def ablation_sweep(config: TrainConfig, records, axis: str, values=None, folds: int | str = 5, jobs: int = 1) -> list[AblationRow]:
    settings = ablation_settings(axis, values, records[0].n_rois)
    configs = []
    for _, overrides in settings:
        hyper = replace(config.hyper, **overrides)
        if len(hyper.hidden_dims) not in (1, hyper.n_layers):
            hyper = replace(hyper, hidden_dims=hyper.hidden_dims[:1])
        configs.append(replace(config, hyper=hyper))
    results = _map(_run_setting, [(c, records, folds) for c in configs], jobs)
    return [AblationRow(s, r) for (s, _), r in zip(settings, results)]


def _fmt(mean, std) -> str:
    if mean is None:
        return "n/a"
    return f"{100 * mean:.2f} ± {100 * std:.2f}" if std is not None else f"{100 * mean:.2f}"


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """Plain-text table, one line per setting, metrics as percent mean ± std."""
    keys = list(rows[0].setting) if rows else []
    headers = [*keys, "Accuracy", "AUC", "Sensitivity", "Specificity"]
    body = []
    for row in rows:
        s = row.cv.summary()
        cells = [_cell(row.setting[k]) for k in keys]
        cells += [_fmt(s["mean"][m], s["std"][m]) for m in ("accuracy", "auc", "sensitivity", "specificity")]
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([line(headers), "-+-".join("-" * w for w in widths), *map(line, body)]) + "\n"


def _cell(v) -> str:
    if isinstance(v, bool):
        return "With" if v else "W/o"
    return str(v)
