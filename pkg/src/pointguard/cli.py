"""Command line entry point: ``pointguard <command> ...``.

Errors are reported as one JSON object on stderr with a nonzero exit code.
Output directories default to ``$POINTGUARD_OUT`` (or ``./runs``).
"""

import argparse
import json
import os
import sys

from . import data, harness, interactions, model
from .errors import ConfigError, PointGuardError

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _out_root():
    return os.environ.get(harness.OUT_ENV, "runs")


def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _defense_spec(args):
    spec = {"kind": args.defense}
    if args.defense == "srs" and args.srs_keep is not None:
        spec["keep_m"] = args.srs_keep
    if args.defense == "sor":
        spec.update(k=args.sor_k, alpha=args.sor_alpha)
    if args.defense == "it" and args.it_permute_predict:
        spec["permute_predict"] = True
    return spec


def _add_defense_args(p):
    p.add_argument("--defense", choices=["none", "it", "srs", "sor"], default="none")
    p.add_argument("--srs-keep", type=int, default=None, help="points kept by SRS")
    p.add_argument("--sor-k", type=int, default=2)
    p.add_argument("--sor-alpha", type=float, default=1.1)
    p.add_argument("--it-permute-predict", action="store_true",
                   help="also permute rows on prediction queries")


def _add_run_args(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int, default=None, help="use N samples of the split, classes taken in turn")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)


def _load_config(args):
    doc = {}
    if args.config:
        cfg = harness.ExperimentConfig.from_json(args.config)
        doc = cfg.to_dict()
    for key, value in (("dataset", args.dataset), ("checkpoint", args.checkpoint),
                       ("sample_limit", args.limit), ("repeats", args.repeats),
                       ("seed", args.seed), ("out_dir", args.out)):
        if value is not None:
            doc[key] = value
    doc.setdefault("out_dir", os.path.join(_out_root(), "eval"))
    return doc


def cmd_gen_data(args):
    spec = data.DatasetSpec()
    if args.spec:
        with open(args.spec) as f:
            spec = data.DatasetSpec.from_dict(json.load(f))
    if args.seed is not None:
        spec = data.DatasetSpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    out = args.out or os.path.join(_out_root(), "dataset")
    ds = data.build_dataset(spec, out)
    print(json.dumps({"out": out, "records": len(ds), "classes": list(ds.classes)}))


def cmd_train(args):
    ds = data.load_dataset(args.dataset)
    cfg = model.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        momentum=args.momentum, seed=args.seed, weight_init_scale=args.init_scale,
        augment_scale=args.augment_scale, augment_shift=args.augment_shift,
        augment_jitter=args.augment_jitter,
    )
    params = model.init_params(model.Architecture.default(ds.num_classes), args.seed, cfg.weight_init_scale)
    params, _ = model.train(params, ds.split("train"), cfg, eval_dataset=ds.split("test"),
                            log=lambda e: print(json.dumps(e), flush=True))
    out = args.out or os.path.join(_out_root(), "model.ckpt")
    model.save_checkpoint(params, out)
    print(json.dumps({"checkpoint": out, "test_accuracy": params.meta.get("final_test_accuracy")}))


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _print_report(report):
    for cell in report["cells"]:
        line = f"{cell['attack']:>12} vs {cell['defense']:<5} accuracy {cell['accuracy_mean']:6.2f}%"
        if cell["attack"] != "none":
            line += f"  success {cell['success_mean']:6.2f} +- {cell['success_std']:.2f}%"
        print(line)


def cmd_eval(args):
    doc = _load_config(args)
    if args.defense:
        doc["defenses"] = [{"kind": d} for d in args.defense.split(",")]
    if args.attack:
        doc["attacks"] = [{"kind": a} for a in args.attack.split(",")]
    report = harness.run_eval(harness.ExperimentConfig.from_dict(doc), log=_log)
    _print_report(report)


def cmd_attack(args):
    doc = _load_config(args)
    spec = {"kind": args.kind, "eot_n": args.eot}
    for key in ("epsilon", "steps", "step_size", "momentum", "iterations", "lr",
                "cw_c", "knn_lambda", "drop_count", "drop_rounds"):
        value = getattr(args, key)
        if value is not None:
            spec[key] = value
    if args.untargeted:
        spec["targeted"] = False
    doc["attacks"] = [spec]
    doc["defenses"] = [_defense_spec(args)]
    report = harness.run_eval(harness.ExperimentConfig.from_dict(doc), log=_log)
    _print_report(report)


def cmd_sweep(args):
    doc = _load_config(args)
    values = _ints(args.values) if args.axis in ("steps", "iterations", "eot_n") else _floats(args.values)
    rows = harness.sweep(harness.ExperimentConfig.from_dict(doc), args.axis, values, log=_log)
    for row in rows:
        print(f"{row['value']:>8} {row['attack']:>12} vs {row['defense']:<5} "
              f"{row['success_mean']:6.2f} +- {row['success_std']:.2f}%")


def cmd_interactions(args):
    doc = _load_config(args)
    doc.setdefault("out_dir", os.path.join(_out_root(), "interactions"))
    doc["attacks"] = [{"kind": args.attack}]
    result = harness.interactions_run(
        harness.ExperimentConfig.from_dict(doc), interactions.parse_grid(args.grid),
        pairs=args.pairs, subsets=args.subsets, n_samples=args.samples, n_points=args.points,
    )
    for cond, rows in result.items():
        print(cond, " ".join(f"{r['ratio']}:{r['mean']:.4g}" for r in rows))


def cmd_export(args):
    doc = _load_config(args)
    out = args.out or os.path.join(_out_root(), "export")
    manifest = harness.export_adv_samples(
        harness.ExperimentConfig.from_dict(doc), _ints(args.ids), out,
        epsilons=_floats(args.epsilons) if args.epsilons else None,
    )
    print(json.dumps({"out": out, "records": len(manifest)}))


def build_parser():
    parser = argparse.ArgumentParser(prog="pointguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--spec", help="JSON DatasetSpec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the victim classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--augment-scale", type=float, default=0.1)
    p.add_argument("--augment-shift", type=float, default=0.15)
    p.add_argument("--augment-jitter", type=float, default=0.15)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an experiment config")
    _add_run_args(p)
    p.add_argument("--defense", help="comma-separated defense kinds")
    p.add_argument("--attack", help="comma-separated attack kinds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="run one attack against one defense")
    _add_run_args(p)
    _add_defense_args(p)
    p.add_argument("--kind", choices=["fgm", "ifgm", "mifgm", "pgd", "cw", "knn", "drop"], default="ifgm")
    p.add_argument("--eot", type=int, default=1, help="EOT gradient samples per step")
    p.add_argument("--untargeted", action="store_true")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cw-c", type=float)
    p.add_argument("--knn-lambda", type=float)
    p.add_argument("--drop-count", type=int)
    p.add_argument("--drop-rounds", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="success rate as a function of one attack parameter")
    _add_run_args(p)
    p.add_argument("--axis", choices=sorted(harness.SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated, ascending")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("interactions", help="multi-order interaction profiles")
    _add_run_args(p)
    p.add_argument("--attack", default="ifgm")
    p.add_argument("--grid", default="0:0.1:1")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--subsets", type=int, default=8)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--points", type=int, default=32)
    p.set_defaults(func=cmd_interactions)

    p = sub.add_parser("export", help="export clean and adversarial clouds as a dataset")
    _add_run_args(p)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--epsilons", help="comma-separated budgets")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except PointGuardError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_FAILURE
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
