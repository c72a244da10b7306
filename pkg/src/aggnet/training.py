"""SGD with momentum, reduce-on-plateau schedule, training loop and the
scheme ablation runner."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .losses import LossWeights, MetricReport, evaluate, total_loss
from .model import AGGNet, ModelConfig, SCHEMES, dumps_checkpoint
from .nn import dumps_params, loads_params
from .rng import SplitMix64, derive_seed
from .synth import Dataset

log = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step, seed, value):
        super().__init__(f"non-finite loss {value} at step {step} (seed {seed})")
        self.step = step
        self.seed = seed


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 8
    lr: float = 1e-2
    momentum: float = 0.95
    weight_decay: float = 1e-4
    patience: int = 5
    factor: float = 0.3
    min_lr: float = 1e-4
    threshold: float = 1e-4
    seed: int = 0
    val_every: int = 1
    crop_resize: bool = False
    max_steps: int = 0  # 0 = no cap


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    lr: float = 1e-2
    best_loss: float = float("inf")
    bad_epochs: int = 0
    seed: int = 0
    momentum: dict = field(default_factory=dict)

    def header(self):
        d = asdict(self)
        d.pop("momentum")
        return d


def dumps_train_state(state: TrainState):
    head = json.dumps(state.header(), sort_keys=True).encode() + b"\n"
    return head + dumps_params(dict(sorted(state.momentum.items())))


def loads_train_state(buf):
    nl = buf.index(b"\n")
    head = json.loads(buf[:nl])
    momentum, _ = loads_params(buf, nl + 1)
    return TrainState(momentum=dict(momentum), **head)


def _is_norm_param(name):
    return name.endswith(".gamma") or name.endswith(".beta")


def sgd_step(named_params, state: TrainState, lr, momentum=0.95, weight_decay=1e-4):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; grads cleared.

    Batch-norm gamma/beta are exempt from weight decay.
    """
    for name, p in named_params.items():
        if p.grad is None:
            raise T.GraphError(f"parameter {name} has no gradient")
    for name, p in named_params.items():
        g = p.grad.astype(p.dtype, copy=False)
        if weight_decay and not _is_norm_param(name):
            g = g + p.dtype.type(weight_decay) * p.data
        v = state.momentum.get(name)
        if v is None:
            v = g.copy()
        else:
            v = p.dtype.type(momentum) * v + g
        state.momentum[name] = v
        p.data -= p.dtype.type(lr) * v
        p.grad = None
    state.step += 1


def plateau_schedule(state: TrainState, val_loss, patience=5, factor=0.3, min_lr=1e-4,
                     threshold=1e-4):
    """Shrink lr by ``factor`` after ``patience`` epochs without a relative
    improvement of more than ``threshold``; never below ``min_lr``."""
    if val_loss < state.best_loss * (1.0 - threshold):
        state.best_loss = float(val_loss)
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= patience:
            state.lr = max(min_lr, state.lr * factor)
            state.bad_epochs = 0
    return state.lr


# --------------------------------------------------------------------------
# data plumbing


def split_train_val(dataset: Dataset):
    """Seed partition: samples whose seed is 0 mod 10 are held out."""
    held = (dataset.seeds % np.uint64(10)) == 0
    if held.all() or not held.any():
        return dataset, None
    return dataset.subset(np.nonzero(~held)[0]), dataset.subset(np.nonzero(held)[0])


def crop_resize(rgb, raw, gt, rng, min_scale=0.75):
    """Random crop, resized back with nearest-neighbour sampling so holes
    stay exact zeros."""
    n, _, h, w = rgb.shape
    out_rgb, out_raw, out_gt = rgb.copy(), raw.copy(), gt.copy()
    for i in range(n):
        s = rng.uniform(min_scale, 1.0)
        ch, cw = max(2, int(round(h * s))), max(2, int(round(w * s)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        ys = y0 + (np.arange(h) * ch) // h
        xs = x0 + (np.arange(w) * cw) // w
        out_rgb[i] = rgb[i][:, ys][:, :, xs]
        out_raw[i] = raw[i][ys][:, xs]
        out_gt[i] = gt[i][ys][:, xs]
    return out_rgb, out_raw, out_gt


def loss_weights(cfg: ModelConfig):
    return LossWeights(cfg.lambda_delta, cfg.lambda_p, cfg.huber_delta)


def predict_dataset(model: AGGNet, dataset: Dataset, batch=8):
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch):
        sl = slice(start, start + batch)
        preds.append(model.predict(dataset.raw[sl], dataset.rgb[sl]))
    model.train()
    return np.concatenate(preds)


def evaluate_model(model: AGGNet, dataset: Dataset, batch=8):
    pred = predict_dataset(model, dataset, batch)
    report = evaluate(pred, dataset.gt)
    loss = float(total_loss(pred.astype(np.float64), dataset.gt, loss_weights(model.cfg)).data)
    return report, loss


def format_log_line(epoch, step, lr, loss, report: MetricReport):
    return (f"epoch={epoch} step={step} lr={lr:.6g} loss={loss:.6f} "
            f"rmse={report.rmse:.6f} rel={report.rel:.6f} d110={report.delta[1.10]:.4f}")


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: AGGNet
    state: TrainState
    best_checkpoint: bytes
    log_lines: list
    losses: list


def train_step(model: AGGNet, rgb, raw, gt, state: TrainState, tcfg: TrainConfig):
    weights = loss_weights(model.cfg)
    params = dict(model.named_parameters())
    model.train()
    with T.Graph() as g:
        pred = model(raw, rgb)
        gt_t = T.Tensor(gt[:, None].astype(pred.dtype))
        loss = total_loss(pred, gt_t, weights)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLossError(state.step, state.seed, value)
    g.backward(loss)
    sgd_step(params, state, state.lr, tcfg.momentum, tcfg.weight_decay)
    return value


def train(cfg: ModelConfig, dataset: Dataset, tcfg: TrainConfig, val: Dataset | None = None,
          out_dir=None, model=None, state=None, use_val_split=True):
    """Train ``cfg`` on ``dataset``.

    Without an explicit ``val`` set the seed partition of ``dataset`` is used
    (when ``use_val_split``); with neither, the epoch's mean training loss
    drives the schedule and checkpoint selection. Passing ``model``/``state``
    resumes a previous run exactly.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if val is None and use_val_split:
        dataset, val = split_train_val(dataset)
    model = model or AGGNet(cfg)
    state = state or TrainState(lr=tcfg.lr, seed=tcfg.seed)
    log_lines, losses = [], []
    best = dumps_checkpoint(model)
    best_loss = state.best_loss
    log_fh = open(os.path.join(out_dir, "train.log"), "a") if out_dir else None
    n = len(dataset)
    steps_per_epoch = -(-n // tcfg.batch)
    try:
        while state.epoch < tcfg.epochs:
            order = SplitMix64(derive_seed(tcfg.seed, "epoch", state.epoch)).permutation(n)
            epoch_losses = []
            while state.step_in_epoch < steps_per_epoch:
                if tcfg.max_steps and state.step >= tcfg.max_steps:
                    return _finish(model, state, best, log_lines, losses, out_dir)
                idx = order[state.step_in_epoch * tcfg.batch:(state.step_in_epoch + 1) * tcfg.batch]
                rgb, raw, gt = dataset.rgb[idx], dataset.raw[idx], dataset.gt[idx]
                if tcfg.crop_resize:
                    crng = SplitMix64(derive_seed(tcfg.seed, "crop", state.step))
                    rgb, raw, gt = crop_resize(rgb, raw, gt, crng)
                value = train_step(model, rgb, raw, gt, state, tcfg)
                epoch_losses.append(value)
                losses.append(value)
                state.step_in_epoch += 1
            state.epoch += 1
            state.step_in_epoch = 0
            if state.epoch % tcfg.val_every and state.epoch != tcfg.epochs:
                continue
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            if val is not None:
                report, sel_loss = evaluate_model(model, val, tcfg.batch)
            else:
                report, _ = evaluate_model(model, dataset, tcfg.batch)
                sel_loss = train_loss
            if sel_loss < best_loss:
                best_loss = sel_loss
                best = dumps_checkpoint(model)
            plateau_schedule(state, sel_loss, tcfg.patience, tcfg.factor, tcfg.min_lr,
                             tcfg.threshold)
            line = format_log_line(state.epoch, state.step, state.lr, train_loss, report)
            log_lines.append(line)
            log.info(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return _finish(model, state, best, log_lines, losses, out_dir)


def _finish(model, state, best, log_lines, losses, out_dir):
    if out_dir:
        with open(os.path.join(out_dir, "best.ckpt"), "wb") as fh:
            fh.write(best)
        with open(os.path.join(out_dir, "last.ckpt"), "wb") as fh:
            fh.write(dumps_checkpoint(model))
        with open(os.path.join(out_dir, "state.bin"), "wb") as fh:
            fh.write(dumps_train_state(state))
    return TrainResult(model, state, best, log_lines, losses)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    scheme: str
    reports: list

    def median(self, attr):
        if attr.startswith("d"):
            t = {"d110": 1.10}[attr]
            return float(np.median([r.delta[t] for r in self.reports]))
        return float(np.median([getattr(r, attr) for r in self.reports]))


def run_ablation(schemes, train_set: Dataset, test_set: Dataset, seeds, cfg: ModelConfig,
                 tcfg: TrainConfig):
    """Train every scheme once per seed under the same budget and evaluate
    on ``test_set``."""
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for scheme in schemes:
        reports = []
        for seed in seeds:
            scfg = replace(cfg, scheme=scheme, init_seed=seed)
            result = train(scfg, train_set, replace(tcfg, seed=seed), use_val_split=False)
            report, _ = evaluate_model(result.model, test_set, tcfg.batch)
            log.info("scheme=%s seed=%s %s", scheme, seed, report.to_line())
            reports.append(report)
        rows.append(AblationRow(scheme, reports))
    return rows


def format_ablation_table(rows):
    mark = lambda b: "x" if b else "-"
    lines = ["Scheme | Fusion  | Pre. | GC. | AG-GC. | AG-SC |   RMSE   |   Rel    | d1.10",
             "-------+---------+------+-----+--------+-------+----------+----------+-------"]
    for row in rows:
        f = SCHEMES[row.scheme]
        fusion = {"none": "None", "concat": "Concat.", "guided": "Guided"}[f.fusion]
        lines.append(
            f"{row.scheme:^6} | {fusion:<7} | {mark(f.prefill):^4} | {mark(f.gconv):^3} | "
            f"{mark(f.ag_gconv):^6} | {mark(f.ag_sc):^5} | {row.median('rmse'):8.4f} | "
            f"{row.median('rel'):8.4f} | {row.median('d110'):5.1f}"
        )
    return "\n".join(lines)
