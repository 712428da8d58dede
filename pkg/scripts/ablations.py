"""Cross-validated ablation sweeps on a synthetic cohort (k, depth, readout, GA/HE grid).

    python scripts/ablations.py --axis ga_he
    python scripts/ablations.py --axis k --values 4 10 20 40
"""
import argparse
import json
from pathlib import Path

from hypergale.data import SynthSpec, generate_synthetic
from hypergale.training import ABLATION_AXES, TrainConfig, ablation_sweep, ablation_table


def parse_values(axis, raw):
    if raw is None:
        return None
    if axis in ("k", "layers"):
        return [int(v) for v in raw]
    if axis in ("gated_attention", "learned_edges"):
        return [v.lower() in ("1", "true", "with") for v in raw]
    return raw


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=ABLATION_AXES, required=True)
    ap.add_argument("--values", nargs="+")
    ap.add_argument("--folds", default="5")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    records = generate_synthetic(SynthSpec(seed=args.seed))
    folds = args.folds if args.folds == "loso" else int(args.folds)
    rows = ablation_sweep(TrainConfig(epochs=args.epochs, seed=args.seed), records, args.axis,
                          parse_values(args.axis, args.values), folds, jobs=args.jobs)
    print(ablation_table(rows), end="")
    if args.out:
        args.out.write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")


if __name__ == "__main__":
    main()
