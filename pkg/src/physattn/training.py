"""Losses, decoupled-weight-decay Adam, and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .darcy import Dataset
from .errors import (ConfigError, ContractError, DataError, GeometryError,
                     NumericError, ShapeError)
from .model import ModelConfig, ParamStore, forward, init_params, save_checkpoint
from .tensor import Graph

CHECKPOINT_NAME = "checkpoint.tslv"
HISTORY_NAME = "history.csv"

NORM_GUARD = 1e-12  # added to the target norm in relative-L2 denominators


@dataclass
class TrainConfig:
    epochs: int = 100
    initial_lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    lr_schedule: str = "cosine"  # cosine-to-zero | constant
    grad_reg_weight: float = 0.1  # 0 disables the spatial-gradient term
    seed: int = 0
    eval_every: int = 10
    clip_norm: float | None = None  # None = off; 1.0 is the stability setting

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be cosine or constant, got '{self.lr_schedule}'")
        if self.weight_decay < 0 or self.grad_reg_weight < 0:
            raise ConfigError("weight_decay and grad_reg_weight must be >= 0")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        return self


# -- losses -------------------------------------------------------------------


def _per_sample_ratio(g: Graph, num_sq, den_sq):
    num = g.sqrt(num_sq)
    den = g.add(g.sqrt(den_sq), NORM_GUARD)
    ratio = g.div(num, den)
    return ratio if ratio.ndim == 0 else g.mean(ratio)


def relative_l2_loss(g: Graph, pred, target):
    """||u - u_hat|| / ||u|| over the whole field, averaged over any leading
    batch axes. Differentiable; scale-invariant under joint scaling."""
    pred, target = g.as_tensor(pred), g.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} disagree")
    if pred.ndim < 2:
        raise ShapeError(f"expected at least (points, channels), got {pred.shape}")
    axes = (pred.ndim - 2, pred.ndim - 1)
    diff = g.sub(pred, target)
    num_sq = g.sum(g.mul(diff, diff), axis=axes)
    den_sq = g.sum(g.mul(target, target), axis=axes)
    return _per_sample_ratio(g, num_sq, den_sq)


def gradient_reg_loss(g: Graph, pred, target, grid):
    """Relative L2 between central-difference spatial gradients of prediction
    and target, both components stacked. Grid-structured fields only."""
    if grid is None:
        raise GeometryError("gradient regularization requires a grid-structured sample")
    pred, target = g.as_tensor(pred), g.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} disagree")
    gh, gw = grid
    n, c = pred.shape[-2], pred.shape[-1]
    if n != gh * gw:
        raise ShapeError(f"grid {gh}x{gw} does not match {n} points")
    lead = pred.shape[:-2]
    inv2hx = (gw - 1) / 2.0
    inv2hy = (gh - 1) / 2.0

    def grad_sumsq(t):
        f = g.reshape(t, lead + (gh, gw, c))
        head = tuple(slice(None) for _ in lead)
        dx = g.mul(
            g.sub(
                g.slice(f, head + (slice(None), slice(2, gw), slice(None))),
                g.slice(f, head + (slice(None), slice(0, gw - 2), slice(None))),
            ),
            inv2hx,
        )
        dy = g.mul(
            g.sub(
                g.slice(f, head + (slice(2, gh), slice(None), slice(None))),
                g.slice(f, head + (slice(0, gh - 2), slice(None), slice(None))),
            ),
            inv2hy,
        )
        axes3 = tuple(range(len(lead), len(lead) + 3))
        return g.add(
            g.sum(g.mul(dx, dx), axis=axes3), g.sum(g.mul(dy, dy), axis=axes3)
        )

    diff = g.sub(pred, target)
    return _per_sample_ratio(g, grad_sumsq(diff), grad_sumsq(target))


# -- optimizer ----------------------------------------------------------------


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: ParamStore):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0


def adamw_step(params: ParamStore, state: AdamWState, lr,
               betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam update plus decoupled decay theta -= lr*wd*theta.

    Both terms are computed from the pre-update parameters; with zero
    gradients only the decay acts, and with weight_decay=0 this is exactly
    Adam.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter '{name}' has no gradient")
    state.step += 1
    beta1, beta2 = betas
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, t in params.items():
        grad = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        t.data -= lr * update + (lr * weight_decay) * t.data


def clip_gradients(params: ParamStore, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((t.grad * t.grad).sum()) for t in params.tensors()))
    if total > max_norm:
        factor = max_norm / total
        for t in params.tensors():
            t.grad *= factor
    return total


def learning_rate(cfg: TrainConfig, epoch):
    if cfg.lr_schedule == "constant":
        return cfg.initial_lr
    return cfg.initial_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


# -- history ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_rel_l2: float | None
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractError("epoch indices must be strictly increasing")
        self.records.append(rec)

    def csv_lines(self):
        lines = ["epoch,train_loss,test_rel_l2,lr,seconds"]
        for r in self.records:
            test = "" if r.test_rel_l2 is None else f"{r.test_rel_l2:.17g}"
            lines.append(
                f"{r.epoch},{r.train_loss:.17g},{test},{r.lr:.17g},{r.seconds:.6f}"
            )
        return lines

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")


# -- training loop ------------------------------------------------------------


def _stack(dataset: Dataset):
    coords = np.stack([s.coords for s in dataset.samples])
    observed = None
    if dataset.samples[0].observed is not None:
        observed = np.stack([s.observed for s in dataset.samples])
    target = np.stack([s.target for s in dataset.samples])
    return coords, observed, target


def train(model_config: ModelConfig, train_config: TrainConfig, train_ds: Dataset,
          test_ds: Dataset | None = None, out_dir=None, log=None):
    """Minibatch training with seeded shuffling and cosine decay to zero.

    Loss is relative L2 plus grad_reg_weight times the spatial-gradient term
    (grid data only). Returns the trained ParamStore and per-epoch history;
    writes checkpoint and history CSV into ``out_dir`` when given.
    """
    model_config.validate()
    train_config.validate()
    if len(train_ds) == 0:
        raise DataError("training dataset is empty")
    grid = train_ds.samples[0].grid
    use_reg = train_config.grad_reg_weight > 0.0
    if use_reg and grid is None:
        raise GeometryError(
            "grad_reg_weight > 0 requires grid-structured samples (set it to 0)"
        )

    coords, observed, target = _stack(train_ds)
    n_samples = coords.shape[0]
    params = init_params(model_config, train_config.seed)
    state = AdamWState(params)
    shuffle_rng = np.random.default_rng(train_config.seed + 1)
    history = TrainHistory()

    for epoch in range(train_config.epochs):
        start = time.perf_counter()
        lr = learning_rate(train_config, epoch)
        order = shuffle_rng.permutation(n_samples)
        loss_sum = 0.0
        for lo in range(0, n_samples, train_config.batch_size):
            batch = order[lo : lo + train_config.batch_size]
            g = Graph()
            pred = forward(
                g, coords[batch],
                None if observed is None else observed[batch],
                params, model_config, grid=grid,
            )
            loss = relative_l2_loss(g, pred, target[batch])
            if use_reg:
                reg = gradient_reg_loss(g, pred, target[batch], grid)
                loss = g.add(loss, g.mul(reg, train_config.grad_reg_weight))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, batch {lo // train_config.batch_size}"
                )
            loss_sum += value * len(batch)
            params.zero_grads()
            g.backward(loss)
            if train_config.clip_norm is not None:
                clip_gradients(params, train_config.clip_norm)
            adamw_step(
                params, state, lr, weight_decay=train_config.weight_decay
            )

        test_rel_l2 = None
        last = epoch == train_config.epochs - 1
        if test_ds is not None and ((epoch + 1) % train_config.eval_every == 0 or last):
            from .metrics import evaluate  # deferred: metrics imports this module

            test_rel_l2 = evaluate(params, model_config, test_ds).rel_l2_mean
        rec = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / n_samples,
            test_rel_l2=test_rel_l2,
            lr=lr,
            seconds=time.perf_counter() - start,
        )
        history.append(rec)
        if log is not None:
            msg = f"epoch {rec.epoch}/{train_config.epochs} loss {rec.train_loss:.5f}"
            if test_rel_l2 is not None:
                msg += f" test_rel_l2 {test_rel_l2:.5f}"
            log(msg)

    if out_dir is not None:
        import os

        save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), model_config, params)
        history.to_csv(os.path.join(out_dir, HISTORY_NAME))
    return params, history
