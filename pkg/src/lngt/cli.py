"""Command line entry point.

    lngt gen blobs --k 10 --n 100 --seed 1 -o d.json
    lngt gen rings --n 400 --nuisance-dims 32 --seed 0 -o rings.json
    lngt gen image --pattern checker -o latent.ppm
    lngt gen views --pattern checker --views 8 --fraction 0.2 -o scene/
    lngt noise --input d.json --kind symmetric --eta 0.4 --seed 0 -o noisy.json
    lngt losses check
    lngt train-classifier --data noisy.json --test test.json --regime vanilla -o run/
    lngt fit-field --viewset scene/viewset.json --regime masked -o field/
    lngt run --config experiment.json
    lngt report run_a run_b ... -o table.csv

Exit codes: 0 success, 1 verification failure, 2 usage or validation error.
Errors are written to stderr as ``{"error": "..."}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import datagen, experiment, field2d, losses, noise, trainer
from .errors import LngtError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not valid JSON: {text!r} ({exc})") from exc


def _hidden(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError as exc:
        raise UsageError(f"--hidden expects comma-separated integers, got {text!r}") from exc


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    if args.what == "blobs":
        ds = datagen.make_blobs(args.k, args.n, args.d, args.spread, seed=args.seed)
    elif args.what == "rings":
        ds = datagen.make_rings(args.n, args.noise_std, seed=args.seed,
                                nuisance_dims=args.nuisance_dims, nuisance_std=args.nuisance_std)
    elif args.what == "image":
        img = datagen.make_latent_image(args.pattern, args.width, args.height, seed=args.seed)
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        datagen.write_ppm(args.output, img.pixels)
        return EXIT_OK
    else:
        img = datagen.make_latent_image(args.pattern, args.width, args.height, seed=args.seed)
        vs = noise.make_views(img, args.views, args.fraction, (args.patch_min, args.patch_max),
                              seed=args.seed)
        noise.save_viewset(vs, args.output)
        return EXIT_OK
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    datagen.save_dataset(ds, args.output)
    return EXIT_OK


def cmd_noise(args) -> int:
    ds = datagen.load_dataset(args.input)
    if args.kind == "symmetric":
        Q = noise.build_symmetric(ds.num_classes, args.eta)
    else:
        pairs = None if args.pairs is None else [int(t) for t in args.pairs.split(",")]
        if pairs is None:
            pairs = [(i + 1) % ds.num_classes for i in range(ds.num_classes)]
        Q = noise.build_asymmetric(ds.num_classes, args.eta, pairs)
    out = noise.apply_label_noise(ds, Q, args.seed)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    datagen.save_dataset(out, args.output)
    matrix_path = args.matrix or str(Path(args.output).with_suffix("")) + "_matrix.json"
    _write_json(matrix_path, Q.to_json())
    return EXIT_OK


def cmd_losses(args) -> int:
    rep = losses.verification_report(seed=args.seed, n_points=args.points)
    text = json.dumps(rep, sort_keys=True, indent=2)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text + "\n")
    print(text)
    if rep["failures"]:
        print(json.dumps({"error": "verification failed", "failures": rep["failures"]}), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _train_overrides(args) -> dict:
    doc = {}
    for key in ("regime", "epochs", "batch_size", "learning_rate", "seed", "beta", "em_lambda",
                "mixup_alpha", "select_fraction", "warmup_epochs", "target_grad", "activation"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    if args.loss is not None:
        doc["loss"] = _json_arg(args.loss)
    if args.hidden is not None:
        doc["hidden"] = list(_hidden(args.hidden))
    return doc


def cmd_train(args) -> int:
    base = {}
    if args.train_config:
        base = json.loads(Path(args.train_config).read_text())
    cfg = trainer.TrainConfig.from_json({**base, **_train_overrides(args)})
    tr = datagen.load_dataset(args.data)
    te = datagen.load_dataset(args.test)
    _, history = trainer.train(tr, te, cfg)
    summary = trainer.write_outputs(history, cfg, args.output,
                                    {"data": str(args.data), "test": str(args.test)})
    print(json.dumps({k: summary[k] for k in ("best_epoch", "best_test_acc_clean",
                                               "final_test_acc_clean", "final_train_acc_noisy")},
                     sort_keys=True))
    return EXIT_OK


def cmd_fit_field(args) -> int:
    base = {}
    if args.field_config:
        base = json.loads(Path(args.field_config).read_text())
    for key in ("regime", "steps", "batch_size", "learning_rate", "lr_final_fraction", "eval_average", "optimizer", "warmup_steps",
                "mask_refresh_interval", "checkpoint_interval", "num_freqs", "seed"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.hard_mask:
        base["hard_mask"] = True
    if args.hidden is not None:
        base["hidden"] = list(_hidden(args.hidden))
    cfg = field2d.FieldConfig.from_json(base)
    vs = noise.load_viewset(args.viewset)
    _, trace = field2d.fit_field(vs, cfg)
    summary = field2d.write_outputs(trace, cfg, args.output, {"viewset": str(args.viewset)})
    print(json.dumps({"final_psnr_vs_latent": summary["final_psnr_vs_latent"]}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = experiment.ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
    if args.output:
        cfg.output_dir = args.output
    _, summary = experiment.run(cfg)
    keys = ("best_test_acc_clean", "final_test_acc_clean") if cfg.kind == "classifier" \
        else ("final_psnr_vs_latent",)
    print(json.dumps({k: summary[k] for k in keys}, sort_keys=True))
    return EXIT_OK


REPORT_COLUMNS = ["run", "kind", "regime", "seed", "best_epoch", "best_test_acc_clean",
                  "final_test_acc_clean", "final_train_acc_noisy", "final_psnr_vs_latent"]


def _summaries(paths):
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found += sorted(p.rglob("summary.json"))
        elif p.is_file():
            found.append(p)
        else:
            raise UsageError(f"no such input: {p}")
    return found


def report_rows(paths) -> list[dict]:
    rows = []
    for path in _summaries(paths):
        doc = json.loads(path.read_text())
        conf = doc.get("config", {})
        field_run = "final_psnr_vs_latent" in doc
        rows.append({
            "run": str(path.parent),
            "kind": "field" if field_run else "classifier",
            "regime": conf.get("regime", ""),
            "seed": conf.get("seed", ""),
            "best_epoch": doc.get("best_epoch", ""),
            "best_test_acc_clean": doc.get("best_test_acc_clean", ""),
            "final_test_acc_clean": doc.get("final_test_acc_clean", ""),
            "final_train_acc_noisy": doc.get("final_train_acc_noisy", ""),
            "final_psnr_vs_latent": doc.get("final_psnr_vs_latent", ""),
        })
    return rows


def cmd_report(args) -> int:
    rows = report_rows(args.inputs)
    if not rows:
        raise UsageError("report needs at least one summary.json")
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        wr = csv.DictWriter(out, REPORT_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lngt", description="Learning with noisy ground truth: data, losses, experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset, latent image or view set")
    g.add_argument("what", choices=["blobs", "rings", "image", "views"])
    g.add_argument("--k", type=int, default=2, help="number of classes (blobs)")
    g.add_argument("--n", type=int, default=100, help="samples per class")
    g.add_argument("--d", type=int, default=2, help="feature dimension (blobs)")
    g.add_argument("--spread", type=float, default=0.3, help="cluster std (blobs)")
    g.add_argument("--noise-std", type=float, default=0.05, help="radial jitter (rings)")
    g.add_argument("--nuisance-dims", type=int, default=0, help="extra Gaussian coordinates (rings)")
    g.add_argument("--nuisance-std", type=float, default=0.2)
    g.add_argument("--pattern", choices=datagen.PATTERNS, default="checker")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--fraction", type=float, default=0.2, help="distractor coverage per view")
    g.add_argument("--patch-min", type=int, default=4)
    g.add_argument("--patch-max", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True, help="file (or directory for views)")
    g.set_defaults(func=cmd_gen)

    n = sub.add_parser("noise", help="corrupt the labels of a dataset")
    n.add_argument("--input", required=True)
    n.add_argument("--kind", choices=["symmetric", "asymmetric"], default="symmetric")
    n.add_argument("--eta", type=float, required=True)
    n.add_argument("--pairs", help="comma-separated target class per class (asymmetric)")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("-o", "--output", required=True)
    n.add_argument("--matrix", help="where to write the transition matrix (default <output>_matrix.json)")
    n.set_defaults(func=cmd_noise)

    lo = sub.add_parser("losses", help="loss-zoo verification")
    lo_sub = lo.add_subparsers(dest="action", required=True, parser_class=_Parser)
    chk = lo_sub.add_parser("check", help="run gradient, symmetry and noise-tolerance checks")
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--points", type=int, default=100)
    chk.add_argument("-o", "--output")
    chk.set_defaults(func=cmd_losses)

    t = sub.add_parser("train-classifier", help="train one regime on a noisy dataset")
    t.add_argument("--data", required=True, help="noisy training set JSON")
    t.add_argument("--test", required=True, help="clean test set JSON")
    t.add_argument("--train-config", help="TrainConfig JSON file; flags override it")
    t.add_argument("--regime", choices=trainer.REGIMES)
    t.add_argument("--loss", help='loss spec JSON, e.g. \'{"family":"GCE","rho":0.7}\'')
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--em-lambda", type=float)
    t.add_argument("--mixup-alpha", type=float)
    t.add_argument("--select-fraction", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--target-grad", choices=["full", "detached"])
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 32,32")
    t.add_argument("--activation", choices=["relu", "tanh"])
    t.add_argument("-o", "--output", required=True)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-field", help="fit a coordinate field to a view set")
    f.add_argument("--viewset", required=True, help="view set sidecar JSON")
    f.add_argument("--field-config", help="FieldConfig JSON file; flags override it")
    f.add_argument("--regime", choices=field2d.FIELD_REGIMES)
    f.add_argument("--steps", type=int)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--lr", dest="learning_rate", type=float)
    f.add_argument("--lr-final-fraction", type=float, help="decay the step size to this fraction by the last step")
    f.add_argument("--eval-average", type=float, help="evaluate with an exponential moving average of the weights (decay in [0, 1))")
    f.add_argument("--optimizer", choices=["sgd", "adam"])
    f.add_argument("--warmup-steps", type=int)
    f.add_argument("--mask-refresh-interval", type=int)
    f.add_argument("--checkpoint-interval", type=int)
    f.add_argument("--num-freqs", type=int)
    f.add_argument("--hidden")
    f.add_argument("--hard-mask", action="store_true")
    f.add_argument("--seed", type=int)
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fit_field)

    r = sub.add_parser("run", help="run a complete experiment from one config file")
    r.add_argument("--config", required=True)
    r.add_argument("-o", "--output", help="override output_dir")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate summary.json files into one CSV")
    rep.add_argument("inputs", nargs="*", help="run directories or summary.json files")
    rep.add_argument("-o", "--output")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, LngtError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(json.dumps({"error": msg}), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
