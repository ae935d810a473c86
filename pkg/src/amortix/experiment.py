"""Experiment orchestration: profiles, run directories, sweeps, tables.

A run is one (dataset, method, grid point, seed) training; its artifacts
live under <out>/runs/<hash>/ and the manifest records status per run.
Rerunning with an identical content hash is a no-op unless forced, which is
what lets the acceptance suite share expensive artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import (Dataset, SyntheticSpec, gen_deterministic, load_mnist,
                   load_synthetic, standard_split, synthetic_tree)
from .errors import FormatError
from .evaluation import (MetricReport, accuracy, audit_with_evalx, auroc,
                         selection_metrics)
from .masking import save_masks_bin, save_masks_csv
from .methods import (MethodConfig, TrainedExplainer, select_config,
                      train_method, validation_record)
from .nn import save_checkpoint
from .rng import RngStream

SYNTH_IDS = ("s1", "s2", "s3")

# Paper-scale and desk-scale knobs. The ci profile shrinks epochs (1000->300
# synthetic, 500->60 image), widens batches (100->400 / 128->200), raises the
# learning rate tenfold to keep the step budget honest, and narrows hidden
# layers (200->48 / 200->96). Seeds stay at five.
PROFILES = {
    ("full", "synthetic"): dict(epochs=1000, batch=100, lr=1e-4,
                                sel_hidden=(200, 200, 200), pred_hidden=(200, 200),
                                n_train=10000, n_test=10000,
                                oracle_epochs=200, oracle_hidden=200, oracle_batch=100,
                                evalx_epochs=1000),
    ("ci", "synthetic"): dict(epochs=300, batch=400, lr=1e-3,
                              sel_hidden=(48, 48, 48), pred_hidden=(48, 48),
                              n_train=10000, n_test=10000,
                              oracle_epochs=60, oracle_hidden=32, oracle_batch=400,
                              evalx_epochs=400),
    ("full", "image"): dict(epochs=500, batch=128, lr=1e-4,
                            sel_hidden=(200, 200, 200), pred_hidden=(200, 200),
                            n_train=60000, n_test=10000,
                            oracle_epochs=0, oracle_hidden=0, oracle_batch=0,
                            evalx_epochs=500),
    ("ci", "image"): dict(epochs=60, batch=200, lr=1e-3,
                          sel_hidden=(96, 96, 96), pred_hidden=(96, 96),
                          n_train=10000, n_test=2000,
                          oracle_epochs=0, oracle_hidden=0, oracle_batch=0,
                          evalx_epochs=120),
}

DEFAULT_GRIDS = {
    "synthetic": {
        "l2x": [1, 2, 3, 4, 5, 6, 7],
        "lambda": [0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.25],
    },
    "image": {
        "l2x": [1, 5, 15, 50, 100, 200],
        "lambda": [0.1, 1.0, 5.0, 10.0, 25.0, 50.0],
    },
}


@dataclass
class ExperimentConfig:
    dataset: str
    methods: list
    out: str
    grid: dict = field(default_factory=dict)      # method -> list of lam or k
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    profile: str = "ci"
    data_seed: int = 0
    mnist_dir: str | None = None
    rule: str | None = None
    epochs: int | None = None                      # profile override
    force: bool = False

    def kind(self):
        if self.dataset in SYNTH_IDS or self.dataset == "det":
            return "synthetic"
        if self.dataset in ("mnist", "digits"):
            return "image"
        raise FormatError(f"unknown dataset {self.dataset!r}")

    def selection_rule(self):
        if self.rule:
            return self.rule
        return "max-acc" if self.kind() == "synthetic" else "5pct"

    def params(self):
        p = dict(PROFILES[(self.profile, self.kind())])
        if self.epochs is not None:
            p["epochs"] = self.epochs
        return p

    def grid_for(self, method):
        if method in self.grid:
            return self.grid[method]
        defaults = DEFAULT_GRIDS[self.kind()]
        return defaults["l2x"] if method == "l2x" else defaults["lambda"]

    def as_dict(self):
        return {
            "dataset": self.dataset, "methods": list(self.methods),
            "out": self.out, "grid": dict(self.grid), "seeds": list(self.seeds),
            "profile": self.profile, "data_seed": self.data_seed,
            "mnist_dir": self.mnist_dir, "rule": self.rule,
            "epochs": self.epochs,
        }

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in (
            "dataset", "methods", "out", "grid", "seeds", "profile",
            "data_seed", "mnist_dir", "rule", "epochs") if k in d}
        if "methods" in known and isinstance(known["methods"], str):
            known["methods"] = [known["methods"]]
        return cls(**known)


def load_experiment_data(config: ExperimentConfig):
    """(train, val, test) splits plus the control-flow tree when one exists."""
    p = config.params()
    if config.dataset in SYNTH_IDS:
        spec = SyntheticSpec(config.dataset, p["n_train"], p["n_test"],
                             config.data_seed)
        full_train, test = load_synthetic(spec)
        train, val = standard_split(full_train, (0.9, 0.1),
                                    RngStream(config.data_seed, f"split/{config.dataset}"))
        return train, val, test, synthetic_tree(config.dataset)
    if config.dataset == "det":
        rng = RngStream(config.data_seed, "det/data")
        ds = gen_deterministic(10, 20, p["n_train"] + p["n_test"], rng)
        train, val, test = standard_split(
            ds, (0.8, 0.1, 0.1), RngStream(config.data_seed, "split/det"))
        return train, val, test, None
    if config.dataset == "mnist":
        root = config.mnist_dir or os.environ.get("AMORTIX_MNIST_DIR")
        if not root:
            raise FormatError("mnist needs --mnist-dir or AMORTIX_MNIST_DIR")
        train_full, test = load_mnist(root)
        rng = RngStream(config.data_seed, "split/mnist")
        if train_full.n > p["n_train"]:
            keep = rng.permutation(train_full.n)[:p["n_train"]]
            train_full = train_full.take(keep, split="train")
        if test.n > p["n_test"]:
            keep = rng.permutation(test.n)[:p["n_test"]]
            test = test.take(keep, split="test")
        train, val = standard_split(train_full, (0.9, 0.1), rng.child("val"))
        return train, val, test, None
    raise FormatError(f"unknown dataset {config.dataset!r}")


def method_config(config: ExperimentConfig, method, value, seed) -> MethodConfig:
    p = config.params()
    kwargs = dict(method=method, lr=p["lr"], batch=p["batch"], seed=seed,
                  sel_hidden=tuple(p["sel_hidden"]),
                  pred_hidden=tuple(p["pred_hidden"]))
    if method in ("evalx", "realx-step"):
        kwargs["epochs"] = p["evalx_epochs"] if method == "evalx" else p["epochs"]
    else:
        kwargs["epochs"] = p["epochs"]
    if method == "l2x":
        kwargs["k"] = int(value)
    elif method in ("realx", "realx-step", "invase", "notrealx"):
        kwargs["lam"] = float(value)
    return MethodConfig(**kwargs)


def run_key(config: ExperimentConfig, mcfg: MethodConfig) -> str:
    payload = {
        "dataset": config.dataset, "data_seed": config.data_seed,
        "profile": config.profile, "params": _jsonable(config.params()),
        "method": mcfg.as_dict(),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def evaluate_explainer(explainer: TrainedExplainer, test: Dataset,
                       evaluator=None, tree=None) -> MetricReport:
    masks = explainer.masks(test.X)
    probs = explainer.predict(test.X, masks)
    scores = probs[:, 1] if test.K == 2 else probs
    rep = MetricReport(
        method=explainer.method, dataset=test.name, seed=explainer.config.seed,
        config={"lam": explainer.config.lam, "k": explainer.config.k},
        acc=accuracy(probs, test.y), auroc=auroc(scores, test.y),
        mean_selected=float(masks.sum(axis=1).mean()))
    if evaluator is not None and explainer.method != "full":
        rep.e_acc, rep.e_auroc = audit_with_evalx(evaluator, test, masks)
    if test.ground_truth is not None and tree is not None and explainer.method != "full":
        rep.cfsr, rep.tpr, rep.fdr = selection_metrics(
            masks, test.ground_truth, tree.control_features())
    return rep


def _save_run(run_dir, explainer: TrainedExplainer, report: MetricReport,
              masks, key, context=None):
    os.makedirs(run_dir, exist_ok=True)
    save_checkpoint(explainer.predictor, os.path.join(run_dir, "predictor.amx"),
                    config_hash=key, seed=explainer.config.seed)
    if explainer.selector is not None:
        save_checkpoint(explainer.selector.net,
                        os.path.join(run_dir, "selector.amx"),
                        config_hash=key, seed=explainer.config.seed)
    if explainer.control is not None:
        save_checkpoint(explainer.control, os.path.join(run_dir, "control.amx"),
                        config_hash=key, seed=explainer.config.seed)
    if masks is not None:
        save_masks_csv(masks, os.path.join(run_dir, "masks.csv"))
        save_masks_bin(masks, os.path.join(run_dir, "masks.bin"))
    with open(os.path.join(run_dir, "curve.csv"), "w") as f:
        cols = sorted({c for row in explainer.curve for c in row})
        f.write(",".join(cols) + "\n")
        for row in explainer.curve:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    payload = {"key": key, "stats": _jsonable(explainer.stats),
               "report": _jsonable(report.as_dict()),
               "context": _jsonable(context or {})}
    with open(os.path.join(run_dir, "metrics.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def _load_cached(run_dir, key):
    path = os.path.join(run_dir, "metrics.json")
    if not os.path.exists(path):
        return None
    with open(path) as f:
        payload = json.load(f)
    if payload.get("key") != key:
        return None
    return payload


@dataclass
class RunManifest:
    root: str
    entries: dict = field(default_factory=dict)

    def record(self, key, status, **extra):
        self.entries[key] = {"status": status, **extra}

    def save(self):
        with open(os.path.join(self.root, "manifest.json"), "w") as f:
            json.dump(self.entries, f, sort_keys=True, indent=1)

    @property
    def failed(self):
        return [k for k, v in self.entries.items() if v["status"] == "failed"]


def run_experiment(config: ExperimentConfig, log=print) -> RunManifest:
    """Train the baseline, the evaluator, and every grid cell; emit tables.

    Per-cell failures are recorded in the manifest and do not stop the rest
    of the sweep; the caller decides what a nonzero failure count means.
    """
    os.makedirs(config.out, exist_ok=True)
    manifest = RunManifest(config.out)
    train, val, test, tree = load_experiment_data(config)

    shared, full_rep = _shared_models(config, train, val, test, tree, manifest, log)
    evaluator = shared["evalx"].predictor

    reports, records = [full_rep], {}
    for method in config.methods:
        if method in ("full", "evalx"):
            continue
        per_value = []
        for value in config.grid_for(method):
            runs = []
            for seed in config.seeds:
                mcfg = method_config(config, method, value, seed)
                key = run_key(config, mcfg)
                run_dir = os.path.join(config.out, "runs", key)
                cached = None if config.force else _load_cached(run_dir, key)
                if cached is not None:
                    rep = _report_from_payload(cached)
                    rec = cached.get("validation", {})
                    manifest.record(key, "cached", method=method, value=value,
                                    seed=seed, path=run_dir)
                else:
                    log(f"[train] {config.dataset} {method} value={value} seed={seed}")
                    try:
                        explainer = train_method(train, val, mcfg)
                    except Exception as exc:   # noqa: BLE001 - sweep keeps going
                        manifest.record(key, "failed", method=method,
                                        value=value, seed=seed, error=str(exc))
                        continue
                    rep = evaluate_explainer(explainer, test, evaluator, tree)
                    rec = validation_record(explainer, val)
                    masks = explainer.masks(test.X)
                    _save_run(run_dir, explainer, rep, masks, key,
                              context=_context(config))
                    with open(os.path.join(run_dir, "metrics.json")) as f:
                        payload = json.load(f)
                    payload["validation"] = _jsonable(rec)
                    with open(os.path.join(run_dir, "metrics.json"), "w") as f:
                        json.dump(payload, f, sort_keys=True, indent=1)
                    manifest.record(key, "done", method=method, value=value,
                                    seed=seed, path=run_dir)
                runs.append((rep, rec))
            if runs:
                per_value.append({
                    "config": method_config(config, method, value, config.seeds[0]),
                    "value": value,
                    "val_acc": float(np.mean([r["val_acc"] for _, r in runs])),
                    "val_loss": float(np.mean([r["val_loss"] for _, r in runs])),
                    "reports": [rep for rep, _ in runs],
                })
        if per_value:
            chosen, flagged = select_config(
                per_value, config.selection_rule(),
                full_val_acc=shared["full_val_acc"])
            records[method] = {"chosen": chosen["value"], "flagged": flagged,
                               "sweep": per_value}
            reports.extend(chosen["reports"])

    _write_tables(config, reports, records)
    manifest.save()
    return manifest


def _context(config: ExperimentConfig):
    return {"dataset": config.dataset, "profile": config.profile,
            "data_seed": config.data_seed, "mnist_dir": config.mnist_dir}


def _report_from_payload(payload):
    d = payload["report"]
    rep = MetricReport(method=d["method"], dataset=d["dataset"], seed=d["seed"],
                       config=d.get("config", {}))
    for k in ("acc", "auroc", "e_acc", "e_auroc", "c_auroc", "cfsr", "tpr",
              "fdr", "mean_selected"):
        setattr(rep, k, d.get(k))
    return rep


def _shared_models(config, train, val, test, tree, manifest, log):
    """FULL baseline and the evaluator, trained once per dataset."""
    shared = {}
    seed0 = config.seeds[0]
    for name in ("full", "evalx"):
        mcfg = method_config(config, name, None, seed0)
        key = run_key(config, mcfg)
        run_dir = os.path.join(config.out, "runs", key)
        cache_ok = (not config.force) and _load_cached(run_dir, key) is not None
        ckpt = os.path.join(run_dir, "predictor.amx")
        if cache_ok and os.path.exists(ckpt):
            from .nn import load_checkpoint
            explainer = TrainedExplainer(name, mcfg, load_checkpoint(ckpt))
            manifest.record(key, "cached", method=name, path=run_dir)
        else:
            log(f"[train] {config.dataset} {name} seed={seed0}")
            explainer = train_method(train, val, mcfg)
            rep = evaluate_explainer(explainer, test)
            _save_run(run_dir, explainer, rep, None, key,
                      context=_context(config))
            manifest.record(key, "done", method=name, path=run_dir)
        shared[name] = explainer
    full_probs = shared["full"].predict(val.X)
    shared["full_val_acc"] = accuracy(full_probs, val.y)
    full_rep = evaluate_explainer(shared["full"], test)
    return shared, full_rep


def _write_tables(config, reports, records):
    header = ",".join(MetricReport.FIELDS)
    with open(os.path.join(config.out, "runs.csv"), "w") as f:
        f.write(header + "\n")
        for rep in reports:
            f.write(rep.csv_row() + "\n")
    # Table-1/2 shape: one row per method at its chosen grid point, metrics
    # averaged over seeds.
    lines = [header]
    for rep in reports:
        if rep.method == "full":
            lines.append(rep.csv_row())
    for method, rec in records.items():
        chosen_reports = rec["sweep"][_chosen_index(rec)]["reports"]
        lines.append(_mean_row(method, config.dataset, chosen_reports,
                               rec["chosen"]))
    with open(os.path.join(config.out, "table.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(config.out, "selection.json"), "w") as f:
        json.dump({m: {"chosen": r["chosen"], "flagged": r["flagged"]}
                   for m, r in records.items()}, f, sort_keys=True, indent=1)


def _chosen_index(rec):
    for i, item in enumerate(rec["sweep"]):
        if item["value"] == rec["chosen"]:
            return i
    return 0


def _mean_row(method, dataset, reports, value):
    vals = {}
    for name in ("acc", "auroc", "e_acc", "e_auroc", "c_auroc", "cfsr", "tpr",
                 "fdr", "mean_selected"):
        xs = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        vals[name] = float(np.mean(xs)) if xs else None
    cells = [method, dataset, "mean", str(value)]
    for name in MetricReport.FIELDS[4:]:
        v = vals.get(name)
        cells.append("" if v is None else f"{v:.6f}")
    return ",".join(cells)


def summarize_table(paths):
    """Merge table.csv files and render a plain-text table."""
    rows = []
    header = None
    for path in paths:
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        header = lines[0].split(",")
        rows.extend(ln.split(",") for ln in lines[1:])
    if header is None:
        raise FormatError("no tables found")
    widths = [max(len(h), *(len(r[i]) if i < len(r) else 0 for r in rows))
              for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        out.append("  ".join((r[i] if i < len(r) else "").ljust(w)
                             for i, w in enumerate(widths)))
    return "\n".join(out)
