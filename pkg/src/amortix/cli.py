"""Command-line entry points.

    amortix run           full experiment from a config file or flags
    amortix train         one (method, dataset, value, seed) training
    amortix evaluate      audit a finished run with an evaluator / oracle
    amortix oracle        build the per-subset model collection
    amortix table         merge table.csv files into one rendered table
    amortix demo-encoding constructive prediction-encoding demonstration
    amortix render        PGM images of selections on image datasets

Exit codes: 0 ok, 1 run failure, 2 config error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from .config import emit_config, load_config
from .data import gen_deterministic, deterministic_rule
from .encoding import build_encoder, encoding_pathology, jam_objective_gap
from .errors import FormatError
from .evaluation import (MetricReport, audit_with_evalx, build_subset_oracle,
                         c_auroc, SubsetOracle)
from .experiment import (ExperimentConfig, evaluate_explainer,
                         load_experiment_data, method_config, run_experiment,
                         run_key, summarize_table, _context, _save_run)
from .masking import load_masks_csv
from .methods import train_evalx, train_method, MethodConfig
from .nn import load_checkpoint
from .render import image_side, render_codewords, render_mask_images
from .rng import RngStream


def _add_common(p):
    p.add_argument("--profile", default="ci", choices=["ci", "full"])
    p.add_argument("--mnist-dir", default=None)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="amortix", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a full experiment")
    p.add_argument("--config", default=None, help="config file (flat typed sections)")
    p.add_argument("--dataset", default=None)
    p.add_argument("--methods", nargs="*", default=None)
    p.add_argument("--grid", nargs="*", type=float, default=None,
                   help="override every method's grid with these values")
    p.add_argument("--seeds", nargs="*", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    _add_common(p)

    p = sub.add_parser("train", help="train one method at one grid point")
    p.add_argument("--method", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--evaluator", default=None,
                   help="optional evaluator checkpoint for e-metrics")
    _add_common(p)

    p = sub.add_parser("evaluate", help="audit a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--evaluator", required=True)
    p.add_argument("--oracle", default=None, help="oracle directory for cAUROC")
    _add_common(p)

    p = sub.add_parser("oracle", help="train per-subset models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("table", help="merge and render result tables")
    p.add_argument("--runs", required=True, help="glob of table.csv files")
    p.add_argument("--out", default=None)

    p = sub.add_parser("demo-encoding", help="constructive encoding pathology")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--evalx-epochs", type=int, default=150)

    p = sub.add_parser("render", help="render selections as PGM images")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_common(p)
    return ap


def _experiment_config(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        base = load_config(args.config)
    if args.dataset:
        base["dataset"] = args.dataset
    if args.methods:
        base["methods"] = args.methods
    if args.seeds:
        base["seeds"] = args.seeds
    if args.out:
        base["out"] = args.out
    base.setdefault("profile", args.profile)
    base.setdefault("data_seed", args.data_seed)
    if args.mnist_dir:
        base["mnist_dir"] = args.mnist_dir
    if args.epochs is not None:
        base["epochs"] = args.epochs
    if getattr(args, "grid", None):
        base["grid"] = {m: list(args.grid) for m in base.get("methods", [])}
    for req in ("dataset", "methods", "out"):
        if req not in base:
            raise FormatError(f"missing required config field {req!r}")
    cfg = ExperimentConfig.from_dict(base)
    cfg.force = bool(getattr(args, "force", False))
    return cfg


def cmd_run(args):
    cfg = _experiment_config(args)
    # round-trip the effective config next to the results
    os.makedirs(cfg.out, exist_ok=True)
    flat = cfg.as_dict()
    grid = flat.pop("grid")
    flat = {k: v for k, v in flat.items() if v is not None}
    if grid:
        flat["grid"] = grid
    with open(os.path.join(cfg.out, "config.amx.toml"), "w") as f:
        f.write(emit_config(flat))
    manifest = run_experiment(cfg)
    if manifest.failed:
        print(f"{len(manifest.failed)} run(s) failed", file=sys.stderr)
        return 1
    print(f"wrote {os.path.join(cfg.out, 'table.csv')}")
    return 0


def cmd_train(args):
    cfg = ExperimentConfig(dataset=args.dataset, methods=[args.method],
                           out=args.out, profile=args.profile,
                           data_seed=args.data_seed, mnist_dir=args.mnist_dir,
                           epochs=args.epochs, seeds=[args.seed])
    train, val, test, tree = load_experiment_data(cfg)
    value = args.lam if args.lam is not None else args.k
    mcfg = method_config(cfg, args.method, value, args.seed)
    explainer = train_method(train, val, mcfg)
    evaluator = load_checkpoint(args.evaluator) if args.evaluator else None
    rep = evaluate_explainer(explainer, test, evaluator, tree)
    key = run_key(cfg, mcfg)
    masks = None if args.method in ("full", "evalx") else explainer.masks(test.X)
    _save_run(args.out, explainer, rep, masks, key, context=_context(cfg))
    print(json.dumps(rep.as_dict(), indent=1, sort_keys=True))
    return 0


def _rebuild_test(run_dir, args):
    with open(os.path.join(run_dir, "metrics.json")) as f:
        payload = json.load(f)
    ctx = payload.get("context") or {}
    cfg = ExperimentConfig(
        dataset=ctx.get("dataset") or args_dataset_required(payload),
        methods=["full"], out=run_dir,
        profile=ctx.get("profile", args.profile),
        data_seed=ctx.get("data_seed", args.data_seed),
        mnist_dir=args.mnist_dir or ctx.get("mnist_dir"))
    _, _, test, tree = load_experiment_data(cfg)
    return payload, test, tree


def args_dataset_required(payload):
    ds = payload.get("report", {}).get("dataset")
    if not ds:
        raise FormatError("run metadata lacks a dataset id")
    return ds


def cmd_evaluate(args):
    payload, test, tree = _rebuild_test(args.run, args)
    masks = load_masks_csv(os.path.join(args.run, "masks.csv"))
    evaluator = load_checkpoint(args.evaluator)
    rep = _report_from(payload)
    rep.e_acc, rep.e_auroc = audit_with_evalx(evaluator, test, masks)
    if args.oracle:
        oracle = load_oracle(args.oracle)
        rep.c_auroc, excluded = c_auroc(oracle, test, masks)
        if excluded:
            print(f"warning: {excluded} instances on uncovered subsets",
                  file=sys.stderr)
    with open(os.path.join(args.run, "report.json"), "w") as f:
        json.dump(rep.as_dict(), f, sort_keys=True, indent=1)
    with open(os.path.join(args.run, "report.csv"), "w") as f:
        f.write(",".join(MetricReport.FIELDS) + "\n" + rep.csv_row() + "\n")
    print(json.dumps(rep.as_dict(), indent=1, sort_keys=True))
    return 0


def _report_from(payload):
    d = payload["report"]
    rep = MetricReport(method=d["method"], dataset=d["dataset"],
                       seed=d["seed"], config=d.get("config", {}))
    for k in ("acc", "auroc", "cfsr", "tpr", "fdr", "mean_selected"):
        setattr(rep, k, d.get(k))
    return rep


def save_oracle(oracle: SubsetOracle, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    W1, b1, W2, b2, W3, b3 = oracle.params
    np.savez(os.path.join(out_dir, "oracle.npz"),
             masks=oracle.masks, covered=oracle.covered,
             ids=np.asarray(sorted(oracle.index, key=oracle.index.get)),
             W1=W1, b1=b1, W2=W2, b2=b2, W3=W3, b3=b3,
             d=oracle.d, k_classes=oracle.k_classes)


def load_oracle(out_dir) -> SubsetOracle:
    z = np.load(os.path.join(out_dir, "oracle.npz"))
    ids = z["ids"]
    return SubsetOracle(z["masks"], {int(b): i for i, b in enumerate(ids)},
                        (z["W1"], z["b1"], z["W2"], z["b2"], z["W3"], z["b3"]),
                        z["covered"], int(z["d"]), int(z["k_classes"]))


def cmd_oracle(args):
    cfg = ExperimentConfig(dataset=args.dataset, methods=["full"],
                           out=args.out, profile=args.profile,
                           data_seed=args.data_seed, mnist_dir=args.mnist_dir)
    train, _, _, _ = load_experiment_data(cfg)
    p = cfg.params()
    epochs = args.epochs or p["oracle_epochs"]
    hidden = args.hidden or p["oracle_hidden"]
    if not epochs or not hidden:
        raise FormatError("this dataset has no oracle profile; pass --epochs/--hidden")
    oracle = build_subset_oracle(train, epochs=epochs, hidden=hidden,
                                 batch=p["oracle_batch"], seed=args.seed)
    save_oracle(oracle, args.out)
    print(f"trained {int(oracle.covered.sum())} subset models -> {args.out}")
    return 0


def cmd_table(args):
    paths = sorted(glob.glob(args.runs))
    if not paths:
        raise FormatError(f"no tables match {args.runs!r}")
    text = summarize_table(paths)
    merged = []
    for i, path in enumerate(paths):
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        merged.extend(lines if i == 0 else lines[1:])
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(merged) + "\n")
    print(text)
    return 0


def cmd_demo_encoding(args):
    os.makedirs(args.out, exist_ok=True)
    pair = build_encoder(args.k, args.d)
    rng = RngStream(args.seed, "demo/data")
    ds = gen_deterministic(args.k, args.d, args.n, rng)
    rule = deterministic_rule(args.k, args.d, RngStream(args.seed, "demo/data"))
    acc, mean_sel, masks = encoding_pathology(pair, rule, ds)

    from .data import standard_split
    train, val, test = standard_split(ds, (0.8, 0.1, 0.1),
                                      RngStream(args.seed, "demo/split"))
    mcfg = MethodConfig("evalx", epochs=args.evalx_epochs, lr=1e-3, batch=256,
                        seed=args.seed, pred_hidden=(64, 64))
    evaluator = train_evalx(train, val, mcfg).predictor
    test_masks = pair.encode(rule(test.X))
    e_acc, e_auroc = audit_with_evalx(evaluator, test, test_masks)

    with open(os.path.join(args.out, "codebook.csv"), "w") as f:
        f.write("target," + ",".join(f"f{j}" for j in range(args.d)) + "\n")
        for t, row in enumerate(pair.codebook):
            f.write(f"{t}," + ",".join(str(int(v)) for v in row) + "\n")
    report = {"jam_acc": acc, "mean_selected": mean_sel, "capacity_J": pair.J,
              "evalx_acc": e_acc, "evalx_auroc": e_auroc,
              "chance": 1.0 / args.k}
    with open(os.path.join(args.out, "pathology.json"), "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    side = int(args.d ** 0.5)
    if side * side == args.d and side >= 8:
        render_codewords(pair.codebook, side, os.path.join(args.out, "codes"))
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_render(args):
    payload, test, _ = _rebuild_test(args.run, args)
    if image_side(test) is None:
        raise FormatError("run's dataset is not image-shaped; refusing to render")
    masks = load_masks_csv(os.path.join(args.run, "masks.csv"))
    out = args.out or os.path.join(args.run, "images")
    paths = render_mask_images(test, masks, args.n,
                               RngStream(args.seed, "render"), out,
                               prefix=payload["report"]["method"])
    print(f"wrote {len(paths)} images under {out}")
    return 0


_COMMANDS = {
    "run": cmd_run, "train": cmd_train, "evaluate": cmd_evaluate,
    "oracle": cmd_oracle, "table": cmd_table,
    "demo-encoding": cmd_demo_encoding, "render": cmd_render,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
