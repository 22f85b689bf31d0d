"""Pretraining, ablation matrix and layer-specific fine-tuning."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .grc import GrcConfig, GrcParams, gcn_layer_name, graph_operator, init_params, is_weight, layer_names
from .pipeline import make_windows

log = logging.getLogger(__name__)

COMPONENTS = ("Stat", "Temp", "Topo")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-3
    plateau_factor: float = 0.3
    plateau_patience: int = 5
    early_stop_patience: int = 10
    weight_decay: float = 1e-5
    seed: int = 0
    stride: int = 3
    val_stride: int = 7
    max_batches: int = None
    dtype: str = "float64"
    grad_clip: float = None

    def __post_init__(self):
        for name in ("epochs", "batch", "plateau_patience", "early_stop_patience", "stride", "val_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0 or not 0 < self.plateau_factor < 1 or self.weight_decay < 0:
            raise ValueError("lr must be > 0, plateau_factor in (0, 1), weight_decay >= 0")


def loss(pred, truth, params, weight_decay=0.0, weights=None):
    """Mean squared error plus ``weight_decay * sum(||W||^2)`` over weight matrices.

    ``weights`` optionally masks/weights individual prediction entries.
    """
    err = ad.mean_square(pred, truth, weights=weights)
    if weight_decay == 0.0:
        return err
    reg = None
    for name, t in params.items():
        if is_weight(name):
            term = ad.sum_all(ad.square(t))
            reg = term if reg is None else ad.add(reg, term)
    return ad.add(err, ad.mul(reg, weight_decay))


class Adam:
    """Adam with per-tensor learning-rate multipliers.

    Tensors absent from ``lr_scale`` (or mapped to 0) are never updated.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        names = list(params.tensors) if isinstance(params, GrcParams) else list(params)
        self.lr_scale = {n: 1.0 for n in names} if lr_scale is None else dict(lr_scale)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, tensor in params.items():
            scale = self.lr_scale.get(name, 0.0)
            if scale == 0.0 or tensor.grad is None:
                continue
            g = tensor.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.value)
                self.v[name] = np.zeros_like(tensor.value)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            step = self.lr * scale * (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.value = tensor.value - step.astype(tensor.value.dtype)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.3, patience=5, min_lr=1e-12):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience=10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def step(self, metric, epoch):
        """Record ``metric``; return True when training should stop."""
        if metric < self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    params: GrcParams
    cfg: GrcConfig
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    status: str = "completed"

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def _cast_params(params, dtype):
    return GrcParams({n: ad.Tensor(t.value.astype(dtype), requires_grad=True, name=n)
                      for n, t in params.items()})


def predict(cfg, params, dataset, windows, batch=64, graph=None, workers=1):
    """Normalised predictions and targets for ``windows``: two arrays (W, N, f, 3).

    ``workers > 1`` evaluates window chunks on a thread pool.
    """
    from .grc import forward_normalized

    graph = graph or dataset.graph
    adj = graph_operator(graph, cfg.ablate_topo)
    static = dataset.arrays()[2]

    def chunk(k):
        r, y, tgt = dataset.batch(windows[k:k + batch], cfg)
        return forward_normalized(cfg, params, adj, static, r, y).value, tgt

    starts = range(0, len(windows), batch)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(k) for k in starts]
    preds = [p for p, _ in parts]
    targets = [t for _, t in parts]
    if not preds:
        shape = (0, dataset.n_reaches, cfg.f_horizon, 3)
        return np.zeros(shape), np.zeros(shape)
    return np.concatenate(preds), np.concatenate(targets)


def _mask_weights(mask, shape):
    return None if mask is None else np.broadcast_to(mask, shape)


def evaluate_loss(cfg, params, dataset, windows, mask=None, batch=64):
    """Mean (optionally masked) squared error over ``windows``, without regularisation."""
    pred, tgt = predict(cfg, params, dataset, windows, batch)
    if pred.shape[0] == 0:
        return math.nan
    err = (pred - tgt) ** 2
    if mask is None:
        return float(err.mean())
    w = np.broadcast_to(mask, err.shape)
    return float((w * err).sum() / w.sum())


def fit(cfg, params, dataset, train_cfg, lr_scale=None, mask=None, val_mask=None, log_fn=None):
    """Generic training loop used by pretraining, fine-tuning and scratch models.

    Mini-batches of ``train_cfg.batch`` windows are drawn from the training
    partition (reshuffled every epoch with a seeded generator). After every
    epoch the validation loss drives the plateau scheduler and early stopping;
    the parameters with the lowest validation loss are returned.

    ``mask`` (broadcastable to (B, N, f, 3)) weights the training loss;
    ``val_mask`` the validation loss (defaults to ``mask``).
    """
    dtype = np.dtype(train_cfg.dtype)
    params = _cast_params(params, dtype)
    val_mask = mask if val_mask is None else val_mask
    train_w = make_windows(dataset.split, cfg, train_cfg.stride, "train")
    val_w = make_windows(dataset.split, cfg, train_cfg.val_stride, "val")
    if not train_w:
        raise ValueError("training partition yields no windows")
    adj = graph_operator(dataset.graph, cfg.ablate_topo)
    static = dataset.arrays()[2].astype(dtype)
    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(params, lr=train_cfg.lr, lr_scale=lr_scale)
    sched = PlateauScheduler(train_cfg.lr, train_cfg.plateau_factor, train_cfg.plateau_patience)
    stopper = EarlyStopping(train_cfg.early_stop_patience)
    best = {n: t.value.copy() for n, t in params.items()}
    result = TrainResult(params, cfg)
    from .grc import forward_normalized

    def val_loss():
        if not val_w:
            return math.nan
        return evaluate_loss(cfg, params, dataset, val_w, val_mask)

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(train_w))
        batches = [order[k:k + train_cfg.batch] for k in range(0, len(order), train_cfg.batch)]
        if train_cfg.max_batches:
            batches = batches[:train_cfg.max_batches]
        total = 0.0
        finite = True
        for idx in batches:
            r, y, tgt = dataset.batch([train_w[i] for i in idx], cfg)
            weights = _mask_weights(mask, tgt.shape)
            params.zero_grad()
            with ad.Tape() as tape:
                try:
                    pred = forward_normalized(cfg, params, adj, static, r.astype(dtype),
                                              None if y is None else y.astype(dtype))
                except FloatingPointError:
                    finite = False
                    break
                value = loss(pred, tgt.astype(dtype), params, train_cfg.weight_decay, weights)
                if not np.isfinite(value.value):
                    finite = False
                    break
                tape.backward(value, params.values())
            if train_cfg.grad_clip:
                _clip(params, train_cfg.grad_clip)
            opt.step(params)
            total += float(value.value)
        if not finite:
            log.warning("non-finite loss in epoch %d; restoring best parameters", epoch)
            result.status = "aborted_nonfinite"
            break
        train_loss = total / max(len(batches), 1)
        vl = val_loss()
        metric = train_loss if math.isnan(vl) else vl
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": vl, "lr": opt.lr}
        result.log.append(row)
        if log_fn:
            log_fn(row)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, vl, opt.lr)
        if metric < stopper.best:
            best = {n: t.value.copy() for n, t in params.items()}
        stop = stopper.step(metric, epoch)
        opt.lr = sched.step(metric)
        if stop:
            result.status = "early_stopped"
            break
    for n, t in params.items():
        t.value = best[n]
        t.grad = None
    result.best_epoch = stopper.best_epoch
    result.best_val = stopper.best
    return result


def _clip(params, max_norm):
    total = math.sqrt(sum(float((t.grad ** 2).sum()) for t in params.values() if t.grad is not None))
    if total > max_norm:
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * (max_norm / total)


def pretrain(cfg, train_cfg, dataset, init=None, log_fn=None):
    """Train a model on the routed truth of ``dataset``; returns :class:`TrainResult`."""
    params = init if init is not None else init_params(cfg, train_cfg.seed)
    return fit(cfg, params, dataset, train_cfg, log_fn=log_fn)


def variant_config(base, components):
    """Config with only ``components`` (subset of ``COMPONENTS``) switched on."""
    on = set(components)
    unknown = on - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    return replace(base, ablate_stat="Stat" not in on, ablate_temp="Temp" not in on,
                   ablate_topo="Topo" not in on)


def variant_key(components):
    return frozenset(components)


def all_variants():
    return [frozenset(c) for r in range(len(COMPONENTS) + 1) for c in itertools.combinations(COMPONENTS, r)]


def run_ablation_matrix(dataset, base_cfg, train_cfg, variants=None, log_fn=None):
    """Train every on/off combination of (Stat, Temp, Topo) under one budget.

    All cells share the seed, epochs and batch settings of ``train_cfg``.
    A failing cell is recorded with its exception and the rest continue.

    Returns
    -------
    dict
        ``frozenset(components) -> TrainResult`` (or the raised exception).
    """
    out = {}
    for key in (variants or all_variants()):
        cfg = variant_config(base_cfg, key)
        try:
            out[key] = pretrain(cfg, train_cfg, dataset,
                                log_fn=None if log_fn is None else (lambda row, k=key: log_fn(k, row)))
        except Exception as exc:  # noqa: BLE001 - one failing cell must not abort the matrix
            log.error("ablation cell %s failed: %s", sorted(key), exc)
            out[key] = exc
    return out


# -- fine-tuning ---------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    base_lr: float = 1e-5
    deep_lr_factor: float = 0.1
    epochs: int = 50
    batch: int = 16
    stride: int = 3
    val_stride: int = 7
    early_stop_patience: int = 10
    plateau_patience: int = 5
    weight_decay: float = 0.0
    seed: int = 0
    frozen: tuple = None
    tuned: dict = None
    dtype: str = None
    max_batches: int = None

    def layer_plan(self, cfg):
        """``(frozen layers, {tuned layer: lr multiplier})`` for ``cfg``."""
        names = layer_names(cfg)
        deep = gcn_layer_name(cfg.n_gcn_layers - 1)
        tuned = dict(self.tuned) if self.tuned is not None else {deep: self.deep_lr_factor, "readout": 1.0}
        frozen = set(self.frozen) if self.frozen is not None else set(names) - set(tuned)
        if frozen & set(tuned):
            raise ValueError(f"layers both frozen and tuned: {sorted(frozen & set(tuned))}")
        if frozen | set(tuned) != set(names):
            raise ValueError(f"frozen and tuned layers must cover {names}")
        return frozen, tuned

    def train_config(self):
        return TrainConfig(epochs=max(self.epochs, 1), batch=self.batch, lr=self.base_lr,
                           early_stop_patience=self.early_stop_patience,
                           plateau_patience=self.plateau_patience, weight_decay=self.weight_decay,
                           seed=self.seed, stride=self.stride, val_stride=self.val_stride,
                           dtype=self.dtype or "float64", max_batches=self.max_batches)


def gauge_mask(n_reaches, reaches, discharge_only=True):
    """(N, 1, 3) weights: ones at ``reaches`` (discharge channel only by default)."""
    mask = np.zeros((n_reaches, 1, 3))
    idx = sorted(int(r) for r in reaches)
    bad = [r for r in idx if not 0 <= r < n_reaches]
    if bad:
        raise ValueError(f"gauge reaches not in graph: {bad}")
    if discharge_only:
        mask[idx, :, 0] = 1.0
    else:
        mask[idx, :, :] = 1.0
    return mask


def finetune(cfg, params, obs_dataset, supervised, ft_cfg, log_fn=None):
    """Adapt a pretrained model to observed discharge at supervised gauges.

    Only the deepest graph-convolution layer and the readout are updated
    (at ``deep_lr_factor * base_lr`` and ``base_lr``); every other layer is
    left bit-identical. The loss covers supervised reaches and the discharge
    channel only.
    """
    if not supervised:
        raise ValueError("fine-tuning needs at least one supervised gauge")
    mask = gauge_mask(obs_dataset.n_reaches, supervised)
    frozen, tuned = ft_cfg.layer_plan(cfg)
    if ft_cfg.epochs == 0:
        return TrainResult(params.copy(), cfg, status="no_epochs")
    lr_scale = {}
    for name in params:
        layer = GrcParams.layer_of(name)
        lr_scale[name] = 0.0 if layer in frozen else tuned[layer]
    train_cfg = ft_cfg.train_config()
    if ft_cfg.dtype is None:
        train_cfg = replace(train_cfg, dtype=str(params["readout.w"].value.dtype))
    return fit(cfg, params, obs_dataset, train_cfg, lr_scale=lr_scale, mask=mask, log_fn=log_fn)


def train_scratch(cfg, obs_dataset, supervised, train_cfg, log_fn=None):
    """Randomly initialised model trained with every parameter free on gauge data only."""
    mask = gauge_mask(obs_dataset.n_reaches, supervised)
    params = init_params(cfg, train_cfg.seed)
    return fit(cfg, params, obs_dataset, train_cfg, mask=mask, log_fn=log_fn)


def frozen_unchanged(before, after, frozen_layers):
    """True when every tensor of ``frozen_layers`` is byte-equal in both parameter sets."""
    for name in before:
        if GrcParams.layer_of(name) in frozen_layers:
            if before[name].value.tobytes() != after[name].value.tobytes():
                return False
    return True


# -- supervision-ratio sweep ---------------------------------------------------

def gauge_skill(cfg, params, dataset, reaches, partition="test", stride=1):
    """Median lead-averaged discharge NSE over ``reaches`` (``None`` when empty)."""
    from .evaluation import evaluate

    reaches = sorted(reaches)
    if not reaches:
        return None
    curves, _, _ = evaluate(cfg, params, dataset, partition, stride)
    vals = curves.nse_avg[reaches, 0]
    vals = vals[~np.isnan(vals)]
    return float(np.median(vals)) if vals.size else None


@dataclass
class SweepResult:
    rows: list
    gauge_sets: list
    checkpoints: dict = field(default_factory=dict)

    def write_csv(self, path):
        cols = ["ratio", "n_supervised", "n_unsupervised", "pretrained_unsup_nse", "foundation_sup_nse",
                "foundation_unsup_nse", "foundation_all_nse", "scratch_sup_nse", "scratch_unsup_nse",
                "scratch_all_nse", "notice"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in cols})


def finetune_ratio_sweep(cfg, params, obs_dataset, candidates, ratios, ft_cfg, scratch_cfg=None,
                         seed=0, partition="test", log_fn=None):
    """Fine-tune (and optionally train from scratch) at nested supervision ratios.

    Gauge sets come from one seeded shuffle of ``candidates``, so each
    supervised set contains those of every smaller ratio. Skill is the median
    lead-averaged discharge NSE on ``partition`` over the supervised,
    unsupervised and all candidate gauges. At ratio 1.0 there are no
    unsupervised gauges and that evaluation is skipped with a notice.
    """
    from .network import split_gauges

    sets = split_gauges(obs_dataset.graph, candidates, ratios, seed)
    all_g = sorted(int(c) for c in candidates)
    rows, ckpts = [], {}
    for ratio, gs in zip(ratios, sets):
        sup, unsup = sorted(gs.supervised), sorted(gs.unsupervised)
        row = {"ratio": float(ratio), "n_supervised": len(sup), "n_unsupervised": len(unsup), "notice": ""}
        if not unsup:
            row["notice"] = "no unsupervised gauges; unsupervised evaluation skipped"
            log.warning("ratio %.2f: %s", ratio, row["notice"])
        row["pretrained_unsup_nse"] = gauge_skill(cfg, params, obs_dataset, unsup, partition)
        res = finetune(cfg, params, obs_dataset, sup, ft_cfg,
                       log_fn=None if log_fn is None else (lambda r, q=ratio: log_fn("foundation", q, r)))
        ckpts[("foundation", float(ratio))] = res.params
        for tag, reaches in (("sup", sup), ("unsup", unsup), ("all", all_g)):
            row[f"foundation_{tag}_nse"] = gauge_skill(cfg, res.params, obs_dataset, reaches, partition)
        if scratch_cfg is not None:
            res_s = train_scratch(cfg, obs_dataset, sup, scratch_cfg,
                                  log_fn=None if log_fn is None else (lambda r, q=ratio: log_fn("scratch", q, r)))
            ckpts[("scratch", float(ratio))] = res_s.params
            for tag, reaches in (("sup", sup), ("unsup", unsup), ("all", all_g)):
                row[f"scratch_{tag}_nse"] = gauge_skill(cfg, res_s.params, obs_dataset, reaches, partition)
        rows.append(row)
    return SweepResult(rows, sets, ckpts)
