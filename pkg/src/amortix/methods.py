"""The training procedures.

Six trainers share one vocabulary: a selector proposes per-instance masks,
a predictor scores labels given masked inputs, and a regularizer (lambda on
the expected selection count, or a hard limit k) controls sparsity.

What separates them is where the predictor's training masks come from:

    full        no masking at all (reference classifier)
    evalx       uniformly random masks, patience-stopped (the evaluator)
    realx       random masks for the predictor; selector trained separately
    realx-step  same, but the predictor is fully trained before the selector
    notrealx    the selector's own samples feed the predictor (ablation)
    invase      selector samples feed the predictor; full-input control net
    l2x         joint reparameterized training through relaxed top-k masks

The predictor-update path of realx/realx-step consumes zero bytes of
selector output; every trainer counts those bytes so the disjointness is
checkable, not just intended.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import EstimatorError, NonFiniteGradientError
from .evaluation import accuracy, auroc
from .masking import masked_values, model_input_width
from .nn import MLP, AdamState, cross_entropy_loss, model_grads_for_loss
from .rng import RngStream
from .selection import (BernoulliSelector, ConcreteTopK, rebar_gradient,
                        sample_topk, score_cv_gradient, topk_backward)

METHODS = ("full", "evalx", "realx", "realx-step", "l2x", "invase", "notrealx")
_REG_BY_LAMBDA = ("realx", "realx-step", "invase", "notrealx")


@dataclass
class MethodConfig:
    method: str
    lam: float | None = None
    k: int | None = None
    lr: float = 1e-4
    batch: int = 100
    epochs: int = 1000
    patience: int = 20
    seed: int = 0
    sel_hidden: tuple = (200, 200, 200)
    pred_hidden: tuple = (200, 200)
    tau: float = 0.1
    eval_mode: str = "threshold"     # threshold | sample
    max_rejections: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in _REG_BY_LAMBDA:
            if self.lam is None or self.k is not None:
                raise ValueError(f"{self.method} takes lambda, not k")
        elif self.method == "l2x":
            if self.k is None or self.lam is not None:
                raise ValueError("l2x takes k, not lambda")
        elif self.lam is not None or self.k is not None:
            raise ValueError(f"{self.method} takes neither lambda nor k")

    @property
    def scheme(self):
        return "mult" if self.method == "l2x" else "hard"

    def as_dict(self):
        return {
            "method": self.method, "lam": self.lam, "k": self.k,
            "lr": self.lr, "batch": self.batch, "epochs": self.epochs,
            "patience": self.patience, "seed": self.seed,
            "sel_hidden": list(self.sel_hidden),
            "pred_hidden": list(self.pred_hidden), "tau": self.tau,
            "eval_mode": self.eval_mode,
        }


@dataclass
class TrainedExplainer:
    method: str
    config: MethodConfig
    predictor: MLP
    selector: object = None          # BernoulliSelector | ConcreteTopK | None
    control: MLP = None
    curve: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def masks(self, X, rng: RngStream | None = None):
        if self.selector is None:
            return np.ones_like(np.atleast_2d(X))
        if isinstance(self.selector, ConcreteTopK):
            return self.selector.hard_topk(X)
        if self.config.eval_mode == "sample":
            if rng is None:
                raise ValueError("sample-mode masks need an rng")
            return self.selector.sample(X, rng)
        return self.selector.threshold(X)

    def predict(self, X, masks=None):
        """Class probabilities from this method's own predictor."""
        X = np.atleast_2d(X)
        if self.method == "full":
            return self.predictor.forward(X)
        if masks is None:
            masks = self.masks(X)
        return self.predictor.forward(masked_values(X, masks, self.config.scheme))


def _streams(config, *names):
    root = RngStream(config.seed, f"{config.method}")
    return tuple(root.child(n) for n in names)


def _val_loss(model, X, y):
    probs = model.forward(X)
    loss, _, _ = cross_entropy_loss(probs, y)
    return loss


def _fit_classifier(model, ds_train: Dataset, ds_val: Dataset, config,
                    mask_stream: RngStream | None, val_masks, curve,
                    tag="pred"):
    """Mini-batch CE training with patience on the validation loss.

    mask_stream=None trains on raw inputs; otherwise every batch gets fresh
    Bernoulli(0.5) masks and validation uses the fixed val_masks. Returns the
    best-validation parameters (divergence restores the last good state).
    """
    adam = AdamState(lr=config.lr)
    shuffle = RngStream(config.seed, f"{config.method}/{tag}/shuffle")
    if mask_stream is None:
        val_in = ds_val.X
    else:
        val_in = masked_values(ds_val.X, val_masks, "hard")
    best, best_params, bad = np.inf, None, 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(ds_train.n)
        ep_loss = 0.0
        nb = 0
        for at in range(0, ds_train.n, config.batch):
            idx = order[at:at + config.batch]
            Xb, yb = ds_train.X[idx], ds_train.y[idx]
            if mask_stream is not None:
                r = mask_stream.bernoulli(0.5, *Xb.shape)
                Xb = masked_values(Xb, r, "hard")
            loss, grads = model_grads_for_loss(model, Xb, yb)
            ep_loss += loss
            nb += 1
            try:
                adam.step(model.params(), grads)
            except NonFiniteGradientError:
                _restore(model, best_params)
                curve.append({"epoch": epoch, "train_loss": float("nan"),
                              "val_loss": best, "event": "diverged"})
                return
        vl = _val_loss(model, val_in, ds_val.y)
        curve.append({"epoch": epoch, "train_loss": ep_loss / max(nb, 1),
                      "val_loss": vl})
        if not np.isfinite(vl):
            _restore(model, best_params)
            curve[-1]["event"] = "diverged"
            return
        if vl < best - 1e-7:
            best, best_params, bad = vl, _snapshot(model), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    _restore(model, best_params)


def _snapshot(model):
    return [W.copy() for W in model.W], [b.copy() for b in model.b]


def _restore(model, snap):
    if snap is None:
        return
    for W, src in zip(model.W, snap[0]):
        W[:] = src
    for b, src in zip(model.b, snap[1]):
        b[:] = src


def _neg(grads):
    return [(-dW, -db) for dW, db in grads]


def train_full(ds_train, ds_val, config) -> TrainedExplainer:
    model = MLP.init([ds_train.d, *config.pred_hidden, ds_train.K], "softmax",
                     RngStream(config.seed, "full/init"))
    curve = []
    _fit_classifier(model, ds_train, ds_val, config, None, None, curve)
    return TrainedExplainer("full", config, model, curve=curve,
                            stats={"pred_update_selector_bytes": 0})


def train_evalx(ds_train, ds_val, config) -> TrainedExplainer:
    """Evaluator: maximize log-likelihood under uniformly random masks."""
    model = MLP.init([2 * ds_train.d, *config.pred_hidden, ds_train.K],
                     "softmax", RngStream(config.seed, "evalx/init"))
    r_stream = RngStream(config.seed, "evalx/r")
    val_masks = RngStream(config.seed, "evalx/val-r").bernoulli(
        0.5, ds_val.n, ds_val.d)
    curve = []
    _fit_classifier(model, ds_train, ds_val, config, r_stream, val_masks, curve,
                    tag="evalx")
    return TrainedExplainer("evalx", config, model, curve=curve,
                            stats={"pred_update_selector_bytes": 0})


def _new_selector(ds, config, stream_name):
    net = MLP.init([ds.d, *config.sel_hidden, ds.d], "sigmoid",
                   RngStream(config.seed, stream_name))
    return BernoulliSelector(net, tau=config.tau)


def _selector_loop(ds_train, ds_val, config, predictor, selector,
                   update_predictor, theta_mask_source, estimator, curve,
                   stats):
    """Shared epoch loop for the Bernoulli-selector methods.

    theta_mask_source(Xb, step) -> (masks, selector_bytes) supplies the
    predictor-update masks; estimator(Xb, yb) -> GradientEstimate supplies
    the selector ascent direction.
    """
    adam_pred = AdamState(lr=config.lr)
    adam_sel = AdamState(lr=config.lr)
    shuffle = RngStream(config.seed, f"{config.method}/shuffle")
    log_every = max(1, config.epochs // 50)
    consecutive_rejects = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(ds_train.n)
        ep_loss, nb, ep_sel = 0.0, 0, 0.0
        for at in range(0, ds_train.n, config.batch):
            idx = order[at:at + config.batch]
            Xb, yb = ds_train.X[idx], ds_train.y[idx]
            if update_predictor:
                masks, sel_bytes = theta_mask_source(Xb)
                stats["pred_update_selector_bytes"] += sel_bytes
                loss, grads = model_grads_for_loss(
                    predictor, masked_values(Xb, masks, "hard"), yb)
                adam_pred.step(predictor.params(), grads)
                ep_loss += loss
            try:
                est = estimator(Xb, yb)
                adam_sel.step(selector.net.params(), _neg(est.grads))
                consecutive_rejects = 0
                ep_sel += est.diagnostics.get("mean_selected", 0.0)
            except (EstimatorError, NonFiniteGradientError):
                consecutive_rejects += 1
                stats["rejected_steps"] = stats.get("rejected_steps", 0) + 1
                if consecutive_rejects > config.max_rejections:
                    raise RuntimeError(
                        f"{config.method}: {consecutive_rejects} consecutive "
                        "rejected selector steps")
            nb += 1
        if epoch % log_every == 0 or epoch == config.epochs - 1:
            row = {"epoch": epoch, "train_loss": ep_loss / max(nb, 1),
                   "mean_selected": ep_sel / max(nb, 1)}
            probs = selector.probs(ds_val.X)
            row["val_mean_prob"] = float(probs.mean())
            curve.append(row)


def train_realx(ds_train, ds_val, config) -> TrainedExplainer:
    """Random masks train the predictor; the selector never feeds it."""
    selector = _new_selector(ds_train, config, "realx/init-sel")
    predictor = MLP.init([2 * ds_train.d, *config.pred_hidden, ds_train.K],
                         "softmax", RngStream(config.seed, "realx/init-pred"))
    r_stream = RngStream(config.seed, "realx/r")
    est_stream = RngStream(config.seed, "realx/est")
    curve, stats = [], {"pred_update_selector_bytes": 0}

    def theta_masks(Xb):
        return r_stream.bernoulli(0.5, *Xb.shape), 0

    def estimator(Xb, yb):
        return rebar_gradient(selector, predictor, Xb, yb, config.lam, est_stream)

    _selector_loop(ds_train, ds_val, config, predictor, selector, True,
                   theta_masks, estimator, curve, stats)
    return TrainedExplainer("realx", config, predictor, selector, curve=curve,
                            stats=stats)


def train_realx_step(ds_train, ds_val, config) -> TrainedExplainer:
    """Predictor first trained to convergence on random masks, then frozen."""
    pred_cfg = replace(config, method="evalx", lam=None)
    pre = train_evalx(ds_train, ds_val, pred_cfg)
    predictor = pre.predictor
    selector = _new_selector(ds_train, config, "realx-step/init-sel")
    est_stream = RngStream(config.seed, "realx-step/est")
    curve, stats = list(pre.curve), {"pred_update_selector_bytes": 0}

    def estimator(Xb, yb):
        return rebar_gradient(selector, predictor, Xb, yb, config.lam, est_stream)

    _selector_loop(ds_train, ds_val, config, predictor, selector, False,
                   lambda Xb: (None, 0), estimator, curve, stats)
    return TrainedExplainer("realx-step", config, predictor, selector,
                            curve=curve, stats=stats)


def train_notrealx(ds_train, ds_val, config) -> TrainedExplainer:
    """REAL-X's machinery, except the predictor trains on selector samples."""
    selector = _new_selector(ds_train, config, "notrealx/init-sel")
    predictor = MLP.init([2 * ds_train.d, *config.pred_hidden, ds_train.K],
                         "softmax", RngStream(config.seed, "notrealx/init-pred"))
    sel_stream = RngStream(config.seed, "notrealx/sel")
    est_stream = RngStream(config.seed, "notrealx/est")
    curve, stats = [], {"pred_update_selector_bytes": 0}

    def theta_masks(Xb):
        s = selector.sample(Xb, sel_stream)
        return s, s.nbytes

    def estimator(Xb, yb):
        return rebar_gradient(selector, predictor, Xb, yb, config.lam, est_stream)

    _selector_loop(ds_train, ds_val, config, predictor, selector, True,
                   theta_masks, estimator, curve, stats)
    return TrainedExplainer("notrealx", config, predictor, selector,
                            curve=curve, stats=stats)


def train_invase(ds_train, ds_val, config) -> TrainedExplainer:
    """Joint training with a full-input control net as score baseline."""
    selector = _new_selector(ds_train, config, "invase/init-sel")
    predictor = MLP.init([2 * ds_train.d, *config.pred_hidden, ds_train.K],
                         "softmax", RngStream(config.seed, "invase/init-pred"))
    control = MLP.init([ds_train.d, *config.pred_hidden, ds_train.K],
                       "softmax", RngStream(config.seed, "invase/init-ctrl"))
    sel_stream = RngStream(config.seed, "invase/sel")
    est_stream = RngStream(config.seed, "invase/est")
    adam_ctrl = AdamState(lr=config.lr)
    curve, stats = [], {"pred_update_selector_bytes": 0}

    def theta_masks(Xb):
        s = selector.sample(Xb, sel_stream)
        return s, s.nbytes

    def estimator(Xb, yb):
        loss, grads = model_grads_for_loss(control, Xb, yb)
        adam_ctrl.step(control.params(), grads)
        return score_cv_gradient(selector, predictor, control, Xb, yb,
                                 config.lam, est_stream)

    _selector_loop(ds_train, ds_val, config, predictor, selector, True,
                   theta_masks, estimator, curve, stats)
    return TrainedExplainer("invase", config, predictor, selector, control,
                            curve=curve, stats=stats)


def train_l2x(ds_train, ds_val, config) -> TrainedExplainer:
    """Joint reparameterized training through relaxed top-k selections."""
    net = MLP.init([ds_train.d, *config.sel_hidden, ds_train.d], "linear",
                   RngStream(config.seed, "l2x/init-sel"))
    selector = ConcreteTopK(net, k=config.k, tau=config.tau)
    predictor = MLP.init([ds_train.d, *config.pred_hidden, ds_train.K],
                         "softmax", RngStream(config.seed, "l2x/init-pred"))
    adam_pred = AdamState(lr=config.lr)
    adam_sel = AdamState(lr=config.lr)
    shuffle = RngStream(config.seed, "l2x/shuffle")
    est_stream = RngStream(config.seed, "l2x/est")
    curve, stats = [], {"pred_update_selector_bytes": 0}
    log_every = max(1, config.epochs // 50)
    for epoch in range(config.epochs):
        order = shuffle.permutation(ds_train.n)
        ep_loss, nb = 0.0, 0
        for at in range(0, ds_train.n, config.batch):
            idx = order[at:at + config.batch]
            Xb, yb = ds_train.X[idx], ds_train.y[idx]
            relaxed, _, aux = sample_topk(selector, Xb, est_stream)
            stats["pred_update_selector_bytes"] += relaxed.nbytes
            probs, cache = predictor.forward_cache(Xb * relaxed)
            loss, dlogits, _ = cross_entropy_loss(probs, yb)
            grads_pred, dinp = predictor.backward(cache, dlogits)
            adam_pred.step(predictor.params(), grads_pred)
            grads_sel = topk_backward(selector, aux, dinp * Xb)
            adam_sel.step(selector.net.params(), grads_sel)
            ep_loss += loss
            nb += 1
        if epoch % log_every == 0 or epoch == config.epochs - 1:
            curve.append({"epoch": epoch, "train_loss": ep_loss / max(nb, 1),
                          "mean_selected": float(config.k)})
    return TrainedExplainer("l2x", config, predictor, selector, curve=curve,
                            stats=stats)


_TRAINERS = {
    "full": train_full,
    "evalx": train_evalx,
    "realx": train_realx,
    "realx-step": train_realx_step,
    "l2x": train_l2x,
    "invase": train_invase,
    "notrealx": train_notrealx,
}


def train_method(ds_train, ds_val, config) -> TrainedExplainer:
    return _TRAINERS[config.method](ds_train, ds_val, config)


def validation_record(explainer: TrainedExplainer, ds_val: Dataset) -> dict:
    """Validation metrics used by configuration selection."""
    masks = explainer.masks(ds_val.X)
    probs = explainer.predict(ds_val.X, masks)
    loss, _, _ = cross_entropy_loss(probs, ds_val.y)
    return {
        "val_acc": accuracy(probs, ds_val.y),
        "val_loss": float(loss),
        "mean_selected": float(masks.sum(axis=1).mean()),
    }


def select_config(records, rule, full_val_acc=None):
    """Pick a grid point. records: [{config, val_acc, val_loss}, ...].

    rule 'max-acc': highest validation accuracy (tie: lower loss).
    rule '5pct': sparsest config (largest lambda / smallest k) whose
    validation accuracy is within 5 points of the full model; falls back to
    max-acc with a flag when nothing qualifies.
    """
    if not records:
        raise ValueError("empty sweep")

    def sparser_first(rec):
        cfg = rec["config"]
        sparsity = cfg.lam if cfg.lam is not None else -cfg.k
        return (-sparsity, rec["val_loss"])

    by_acc = max(records, key=lambda r: (r["val_acc"], -r["val_loss"]))
    if rule == "max-acc":
        return by_acc, False
    if rule != "5pct":
        raise ValueError(f"unknown selection rule {rule!r}")
    if full_val_acc is None:
        raise ValueError("5pct rule needs the full-model validation accuracy")
    ok = [r for r in records if r["val_acc"] >= full_val_acc - 0.05]
    if not ok:
        return by_acc, True
    return min(ok, key=sparser_first), False
