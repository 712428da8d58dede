"""Command-line entry point: ``hypergale <command> --config run.json [overrides]``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure (divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import (
    ESTIMATORS, SubjectRecord, SynthSpec, generate_synthetic, load_dataset, load_names,
    pearson_fc, planted_block, read_timeseries_csv, save_dataset, split_stratified,
)
from .errors import ConfigError, DataError, HyperGaleError, NumericalError, OracleError
from .hypergraph import build_knn_hyperedges
from .interpret import default_names, dominant_roi, export_report, hyperedge_pattern, roi_importance
from .metrics import metrics_from_scores
from .model import HyperParams, forward_graph, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, ablation_sweep, ablation_table, predict, run_cv, train

log = logging.getLogger("hypergale")

COMMANDS = ("synth", "import-ts", "train", "eval", "cv", "ablate", "interpret", "gradcheck")

BLOCK_KEYS = {
    "synth": set(SynthSpec.__dataclass_fields__),
    "import_ts": {"subjects", "estimator"},
    "training": set(TrainConfig.__dataclass_fields__),
    "train": {"dataset", "val_fraction"},
    "eval": {"checkpoint", "dataset"},
    "cv": {"dataset", "folds"},
    "ablate": {"dataset", "axis", "values", "folds"},
    "interpret": {"checkpoint", "dataset", "top_n", "group_by", "names_file", "roi_index"},
    "gradcheck": {"n_nodes", "k", "n_layers", "hidden", "att_hidden", "readout_dim", "readout",
                  "step", "tolerance", "seed"},
}

DEFAULTS = {
    "train": {"val_fraction": 0.2},
    "cv": {"folds": 5},
    "ablate": {"values": None, "folds": 5},
    "interpret": {"top_n": 20, "group_by": "prediction", "names_file": None, "roi_index": None},
    "import_ts": {"estimator": "pearson"},
    "gradcheck": {"n_nodes": 8, "k": 3, "n_layers": 1, "hidden": 4, "att_hidden": 4, "readout_dim": 4,
                  "readout": "mlp", "step": 1e-5, "tolerance": 1e-4, "seed": 0},
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypergale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--readout", choices=("mlp", "mean", "max"))
        p.add_argument("--dataset", type=Path)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(BLOCK_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config blocks {sorted(unknown)}")
    for block, body in raw.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: block {block!r} must be an object")
        bad = set(body) - BLOCK_KEYS[block]
        if bad:
            raise ConfigError(f"{path}: unknown keys in {block!r}: {sorted(bad)}")
    return raw


def effective_config(command: str, raw: dict, args) -> tuple[dict, dict]:
    """Merge defaults, file and flag overrides; returns ``(config, overrides)``."""
    cfg = copy.deepcopy(raw)
    for block, defaults in DEFAULTS.items():
        cfg[block] = {**defaults, **cfg.get(block, {})}
    cfg.setdefault("synth", {})
    training = cfg.setdefault("training", {})
    hyper = training.setdefault("hyper", {})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        target = {"synth": "synth", "gradcheck": "gradcheck"}.get(command, "training")
        cfg[target]["seed"] = args.seed
    for flag, key in (("k", "k"), ("layers", "n_layers"), ("readout", "readout_kind")):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = value
            hyper[key] = value
    block = command.replace("-", "_")
    if args.dataset is not None:
        overrides["dataset"] = str(args.dataset)
        cfg.setdefault(block, {})["dataset"] = str(args.dataset)
    if args.checkpoint is not None:
        overrides["checkpoint"] = str(args.checkpoint)
        cfg.setdefault(block, {})["checkpoint"] = str(args.checkpoint)
    return cfg, overrides


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def make_header(command: str, cfg: dict, overrides: dict, seed) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(command, cfg),
        "seed": seed,
        "version": __version__,
        "overrides": overrides,
    }


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require_path(block: dict, key: str, command: str) -> Path:
    if not block.get(key):
        raise ConfigError(f"{command}: missing required setting {key!r}")
    path = Path(block[key])
    if not path.exists():
        raise ConfigError(f"{command}: {key} path {path} does not exist")
    return path


def _training_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["training"])
    except TypeError as exc:
        raise ConfigError(f"training: {exc}") from exc


# --- commands ---------------------------------------------------------------

def cmd_synth(cfg, header, args):
    try:
        spec = SynthSpec(**cfg["synth"])
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    records = generate_synthetic(spec)
    manifest = save_dataset(args.out / "dataset", records)
    write_json(args.out / "synth.json", {
        "header": header, "spec": spec.to_dict(), "planted_block": planted_block(spec).tolist(),
        "manifest": str(manifest), "n_subjects": len(records),
        "n_asd": sum(r.label for r in records),
    })
    print(manifest)


def cmd_import_ts(cfg, header, args):
    block = cfg["import_ts"]
    estimator = ESTIMATORS.get(block["estimator"])
    if estimator is None:
        raise ConfigError(f"import-ts: estimator must be one of {sorted(ESTIMATORS)}")
    subjects = block.get("subjects")
    if not subjects:
        raise ConfigError("import-ts: 'subjects' list is required")
    for s in subjects:
        missing = {"subject_id", "site_id", "label", "csv_path"} - set(s)
        if missing or set(s) - {"subject_id", "site_id", "label", "csv_path"}:
            raise ConfigError(f"import-ts: subject entries need exactly subject_id, site_id, label, csv_path: {s}")
        _require_path(s, "csv_path", "import-ts")
    records, names = [], None
    for s in subjects:
        header_names, ts = read_timeseries_csv(s["csv_path"])
        names = names or header_names
        if header_names != names:
            raise DataError(f"{s['csv_path']}: ROI header differs from the first CSV")
        records.append(SubjectRecord(str(s["subject_id"]), str(s["site_id"]), int(s["label"]), estimator(ts)))
    manifest = save_dataset(args.out / "dataset", records, names=names)
    write_json(args.out / "import.json", {"header": header, "manifest": str(manifest), "n_subjects": len(records)})
    print(manifest)


def cmd_train(cfg, header, args):
    block = cfg["train"]
    records = load_dataset(_require_path(block, "dataset", "train"))
    config = _training_config(cfg)
    tr, val = split_stratified(records, block["val_fraction"], config.seed)
    t0 = time.perf_counter()
    result = train(config, tr, val)
    log.info("trained %d epochs in %.1fs", len(result.history), time.perf_counter() - t0)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "model.hgal", result.params, result.hyper)
    (args.out / "history.csv").write_text(f"# config_hash={header['config_hash']}\n" + result.history_csv())
    scores = predict(result.params, result.hyper, val)
    report = metrics_from_scores(scores, [r.label for r in val])
    write_json(args.out / "train.json", {
        "header": header, "best_epoch": result.best_epoch, "val_metrics": report.to_dict(),
        "val_subjects": [r.subject_id for r in val], "config": config.to_dict(),
    })
    print(f"best epoch {result.best_epoch}: val accuracy {report.accuracy:.4f} auc {report.auc}")


def cmd_eval(cfg, header, args):
    block = cfg["eval"]
    ckpt = _require_path(block, "checkpoint", "eval")
    data = _require_path(block, "dataset", "eval")
    params, hyper = load_checkpoint(ckpt)
    records = load_dataset(data)
    scores = predict(params, hyper, records)
    report = metrics_from_scores(scores, [r.label for r in records])
    write_json(args.out / "eval.json", {
        "header": header, "metrics": report.to_dict(),
        "per_subject": [{"subject_id": r.subject_id, "score": float(s), "label": r.label}
                        for r, s in zip(records, scores)],
    })
    print(json.dumps(report.to_dict(), sort_keys=True))


def _folds(value):
    if value == "loso":
        return "loso"
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"folds must be an integer or 'loso', got {value!r}") from None


def cmd_cv(cfg, header, args):
    block = cfg["cv"]
    records = load_dataset(_require_path(block, "dataset", "cv"))
    result = run_cv(_training_config(cfg), records, _folds(block["folds"]), jobs=args.jobs)
    write_json(args.out / "cv_report.json", {"header": header, **result.to_dict()})
    print(json.dumps(result.summary(), sort_keys=True))


def cmd_ablate(cfg, header, args):
    block = cfg["ablate"]
    records = load_dataset(_require_path(block, "dataset", "ablate"))
    if "axis" not in block:
        raise ConfigError("ablate: 'axis' is required")
    rows = ablation_sweep(_training_config(cfg), records, block["axis"], block["values"],
                          _folds(block["folds"]), jobs=args.jobs)
    write_json(args.out / "ablation.json", {"header": header, "axis": block["axis"],
                                            "rows": [r.to_dict() for r in rows]})
    table = ablation_table(rows)
    (args.out / "ablation.txt").write_text(f"# config_hash={header['config_hash']}\n{table}")
    print(table, end="")


def cmd_interpret(cfg, header, args):
    block = cfg["interpret"]
    params, hyper = load_checkpoint(_require_path(block, "checkpoint", "interpret"))
    data_path = _require_path(block, "dataset", "interpret")
    records = load_dataset(data_path)
    n = records[0].n_rois
    names = default_names(n)
    if block["names_file"]:
        names = load_names(_require_path(block, "names_file", "interpret"), n)
    elif (Path(data_path) / "names.txt").is_file():
        names = load_names(Path(data_path) / "names.txt", n)
    group_by = block["group_by"]
    result = roi_importance(params, hyper, records, group_by=group_by, top_n=block["top_n"], names=names)
    roi = block["roi_index"] if block["roi_index"] is not None else dominant_roi(params)
    k = hyper.resolve_k(n)
    patterns = []
    probs = predict(params, hyper, records) if group_by == "prediction" else None
    for ranking in result.rankings:
        if ranking.group == "all":
            members = records
        elif group_by == "prediction":
            want = 1 if ranking.group.startswith("ASD") else 0
            members = [r for r, p in zip(records, probs) if int(p > 0.5) == want]
        else:
            want = 1 if ranking.group.startswith("ASD") else 0
            members = [r for r in records if r.label == want]
        mean_fc = np.mean([r.fc for r in members], axis=0)
        hg = build_knn_hyperedges(mean_fc, k)
        patterns.append(hyperedge_pattern(params, hg, roi, label=ranking.group))
    files = export_report(result, patterns, args.out, header)
    for w in result.warnings:
        log.warning(w)
    print("\n".join(str(f) for f in files.values()))


def cmd_gradcheck(cfg, header, args):
    g = cfg["gradcheck"]
    n = int(g["n_nodes"])
    hyper = HyperParams(k=int(g["k"]), n_layers=int(g["n_layers"]), hidden_dims=(int(g["hidden"]),),
                        att_hidden=int(g["att_hidden"]), readout_dim=int(g["readout_dim"]),
                        readout_kind=g["readout"])
    rng = np.random.default_rng(g["seed"])
    ts = rng.standard_normal((4 * n, n))
    fc = pearson_fc(ts)
    hg = build_knn_hyperedges(fc, hyper.k)
    params = init_params(hyper, n, g["seed"])
    # move edge weights off the uniform init so their gradient path is exercised
    params.arrays["raw_edge_weights"] = params.raw_edge_weights + rng.normal(scale=0.3, size=(n, 1))
    label = ad.constant([[1.0]])

    def loss_fn(leaves):
        prob, _ = forward_graph(leaves, hyper, hg, fc)
        return ad.bce(prob, label)

    t0 = time.perf_counter()
    res = ad.finite_diff_check(loss_fn, params.arrays, g["step"], g["tolerance"])
    log.info("gradcheck over %d entries in %.2fs", res.n_checked, time.perf_counter() - t0)
    write_json(args.out / "gradcheck.json", {
        "header": header, "max_rel_error": res.max_rel_error, "passed": res.passed,
        "worst": [res.worst[0], list(res.worst[1])] if res.worst else None,
        "n_checked": res.n_checked, "tolerance": g["tolerance"], "step": g["step"],
    })
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} entries "
          f"({'pass' if res.passed else 'FAIL'} at {g['tolerance']:g})")
    if not res.passed:
        raise OracleError(f"gradient check failed: {res.max_rel_error:.3e} >= {g['tolerance']:g}")


HANDLERS = {
    "synth": cmd_synth, "import-ts": cmd_import_ts, "train": cmd_train, "eval": cmd_eval,
    "cv": cmd_cv, "ablate": cmd_ablate, "interpret": cmd_interpret, "gradcheck": cmd_gradcheck,
}


def _seed_of(command: str, cfg: dict):
    block = {"synth": "synth", "gradcheck": "gradcheck"}.get(command, "training")
    default = 0 if block != "training" else TrainConfig.seed
    return cfg.get(block, {}).get("seed", default)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required\n{parser.format_usage().strip()}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        raw = load_config(args.config)
        cfg, overrides = effective_config(args.command, raw, args)
        _training_config(cfg)  # surface config mistakes before any data is read
        header = make_header(args.command, cfg, overrides, _seed_of(args.command, cfg))
        log.info("hypergale %s %s config_hash=%s seed=%s", __version__, args.command,
                 header["config_hash"][:12], header["seed"])
        HANDLERS[args.command](cfg, header, args)
        return 0
    except HyperGaleError as exc:
        print(f"hypergale: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hypergale: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"hypergale: numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code


def run() -> None:
    sys.exit(main())
