"""Training recipe: MSE loss, Adam, plateau learning-rate scheduler, early
stopping, and best-validation checkpointing.

Improvement semantics, fixed for reproducible traces: an epoch improves iff
its validation loss is strictly below the best seen so far; the first epoch
establishes the baseline and counts as a non-improving epoch for both the
plateau counter and the early-stopping counter. The two counters are
independent; dropping the learning rate resets only the plateau counter (a
config flag keeps it running instead). Ties never update the best epoch.

Training checkpoints are a SARv1 model section followed by an optimizer
section (magic "OPTv1") holding counters, the shuffle-rng state, and the Adam
moment tensors, which makes a resumed run reproduce the remaining history
bitwise.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .data import WindowDataset
from .errors import DataError, DimensionError, NumericError, UsageError
from .model import (Model, load_checkpoint, read_checkpoint_section,
                    write_checkpoint_section)
from .tensor import Tape, Tensor4, read_t4, write_t4

__all__ = [
    "TrainConfig", "TrainState", "EpochStats", "FitResult",
    "mse_loss", "adam_step", "scheduler_step", "fit", "load_best_into",
    "write_history_csv", "HISTORY_COLUMNS",
]

HISTORY_COLUMNS = ("epoch", "train_mse", "val_mse", "lr", "seconds")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    plateau_patience: int = 4
    lr_factor: float = 0.1
    early_stop_patience: int = 15
    max_epochs: int = 200
    batch_size: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    plateau_resets_on_drop: bool = True
    divergence_limit: float = 1e6

    def validate(self) -> None:
        if not (0.0 < self.lr_factor < 1.0):
            raise UsageError(f"lr_factor must lie in (0,1), got {self.lr_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise UsageError("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise UsageError("batch_size and max_epochs must be >= 1")
        if self.lr0 <= 0:
            raise UsageError("lr0 must be positive")


@dataclass
class TrainState:
    """Mutable optimizer/scheduler state carried across epochs."""

    current_lr: float
    epoch: int = 0
    best_val_loss: Optional[float] = None
    best_epoch: int = 0
    since_improve: int = 0          # early-stop counter
    since_improve_lr: int = 0       # plateau counter
    adam_step_count: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float                       # rate used during this epoch
    seconds: float


@dataclass
class FitResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    best_params: dict[str, np.ndarray]
    best_buffers: dict[str, np.ndarray]
    stopped_early: bool


def mse_loss(pred: Tensor4, target: Tensor4) -> Tensor4:
    """Mean over all elements of the squared difference; differentiable."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss needs equal shapes, got {pred.shape} vs {target.shape}")
    diff = ops.sub(pred, target)
    return ops.mean_all(ops.mul(diff, diff))


def adam_step(named_params, state: TrainState, lr: float, *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place; one shared step counter."""
    params = list(named_params)
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient buffer")
        if name not in state.adam_m:
            state.adam_m[name] = np.zeros_like(p.data)
            state.adam_v[name] = np.zeros_like(p.data)
    state.adam_step_count += 1
    t = state.adam_step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        g = p.grad
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def scheduler_step(state: TrainState, val_loss: float, config: TrainConfig) -> float:
    """Advance the plateau/early-stop bookkeeping after one validation pass.

    Returns the learning rate for the next epoch. Raises on NaN validation
    loss. Call exactly once per epoch.
    """
    if math.isnan(val_loss):
        raise NumericError(f"validation loss is NaN at epoch {state.epoch}")
    if state.best_val_loss is None:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        improved = False
    else:
        improved = val_loss < state.best_val_loss
        if improved:
            state.best_val_loss = val_loss
            state.best_epoch = state.epoch
    if improved:
        state.since_improve = 0
        state.since_improve_lr = 0
    else:
        state.since_improve += 1
        state.since_improve_lr += 1
    if state.since_improve_lr >= config.plateau_patience:
        state.current_lr *= config.lr_factor
        if config.plateau_resets_on_drop:
            state.since_improve_lr = 0
    return state.current_lr


def _split_mse(model: Model, data: WindowDataset, batch_size: int) -> float:
    """Eval-mode MSE over a whole split: f64 sum of squared errors / count."""
    sse = 0.0
    count = 0
    for lo in range(0, len(data), batch_size):
        idxs = range(lo, min(lo + batch_size, len(data)))
        batch = data.batch(idxs)
        pred, _ = model.forward(batch.inputs, train=False)
        d = pred.data.astype(np.float64) - batch.targets.data.astype(np.float64)
        sse += float((d * d).sum())
        count += d.size
    return sse / count


# -- optimizer-state section ("OPTv1") ------------------------------------------

_OPT_MAGIC = b"OPTv1"


def _write_opt_section(f, state: TrainState, rng: np.random.Generator) -> None:
    meta = {
        "epoch": str(state.epoch),
        "current_lr": repr(state.current_lr),
        "best_val_loss": "" if state.best_val_loss is None else repr(state.best_val_loss),
        "best_epoch": str(state.best_epoch),
        "since_improve": str(state.since_improve),
        "since_improve_lr": str(state.since_improve_lr),
        "adam_step_count": str(state.adam_step_count),
        "rng_state": json.dumps(rng.bit_generator.state),
    }
    f.write(_OPT_MAGIC)
    f.write(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        line = f"{k}={v}".encode("utf-8")
        f.write(struct.pack("<I", len(line)))
        f.write(line)
    moments = [(f"m.{n}", a) for n, a in state.adam_m.items()]
    moments += [(f"v.{n}", a) for n, a in state.adam_v.items()]
    f.write(struct.pack("<Q", len(moments)))
    for name, arr in moments:
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        write_t4(f, arr.reshape(arr.shape if arr.ndim == 4 else (1, -1, 1, 1)))


def _read_opt_section(f, lr0: float) -> tuple[TrainState, dict]:
    if f.read(5) != _OPT_MAGIC:
        raise UsageError("training checkpoint lacks an OPTv1 section")
    (n_meta,) = struct.unpack("<I", f.read(4))
    meta = {}
    for _ in range(n_meta):
        (ln,) = struct.unpack("<I", f.read(4))
        k, _, v = f.read(ln).decode("utf-8").partition("=")
        meta[k] = v
    state = TrainState(current_lr=float(meta["current_lr"]))
    state.epoch = int(meta["epoch"])
    state.best_val_loss = float(meta["best_val_loss"]) if meta["best_val_loss"] else None
    state.best_epoch = int(meta["best_epoch"])
    state.since_improve = int(meta["since_improve"])
    state.since_improve_lr = int(meta["since_improve_lr"])
    state.adam_step_count = int(meta["adam_step_count"])
    (n_tensors,) = struct.unpack("<Q", f.read(8))
    for _ in range(n_tensors):
        (ln,) = struct.unpack("<I", f.read(4))
        name = f.read(ln).decode("utf-8")
        arr = read_t4(f)
        kind, _, pname = name.partition(".")
        target = state.adam_m if kind == "m" else state.adam_v
        target[pname] = arr
    return state, json.loads(meta["rng_state"])


def _snapshot(model: Model) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {n: t.data.copy() for n, t in model.named_parameters()}
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    return params, buffers


def _restore_moment_shapes(model: Model, state: TrainState) -> None:
    for name, p in model.named_parameters():
        for store in (state.adam_m, state.adam_v):
            if name in store:
                store[name] = store[name].reshape(p.data.shape).astype(p.data.dtype)


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            f.write(f"{row.epoch},{row.train_mse!r},{row.val_mse!r},"
                    f"{row.lr!r},{row.seconds:.3f}\n")


def fit(model: Model, train_data: WindowDataset, val_data: WindowDataset,
        config: TrainConfig, out_dir: Optional[Path] = None,
        resume: bool = False) -> FitResult:
    """Train until the epoch cap or the early-stopping criterion.

    Deterministic under a fixed config seed: batch order comes from one
    persistent shuffle generator re-drawn each epoch. With ``out_dir`` set,
    writes ``history.csv``, ``best.ckpt`` (lowest validation loss) and
    ``last.ckpt`` (model + OPTv1 optimizer state, enabling ``resume=True``).
    Raises on empty splits, NaN validation loss, or divergence.
    """
    config.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("fit needs non-empty train and validation splits")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume:
        if out_path is None:
            raise UsageError("resume requires out_dir with an existing last.ckpt")
        last = out_path / "last.ckpt"
        if not last.exists():
            raise UsageError(f"cannot resume: {last} does not exist")
        with open(last, "rb") as f:
            loaded, _ = read_checkpoint_section(f, str(last))
            state, rng_state = _read_opt_section(f, config.lr0)
        if loaded.config != model.config:
            raise UsageError(f"resume checkpoint config {loaded.config} does not match "
                             f"the model being trained ({model.config})")
        for (name, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
            p.data[...] = q.data
        for (name, b), (_, c) in zip(model.named_buffers(), loaded.named_buffers()):
            b[...] = c
        _restore_moment_shapes(model, state)
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        best_params, best_buffers = _snapshot(model)
        best_file = out_path / "best.ckpt"
        if best_file.exists():
            best_model, _ = load_checkpoint(best_file)
            best_params = {n: t.data.copy() for n, t in best_model.named_parameters()}
            best_buffers = {n: b.copy() for n, b in best_model.named_buffers()}
    else:
        state = TrainState(current_lr=config.lr0)
        rng = np.random.default_rng(config.seed)
        best_params, best_buffers = _snapshot(model)

    history: list[EpochStats] = []
    stopped_early = False
    named = list(model.named_parameters())

    while state.epoch < config.max_epochs:
        t0 = time.perf_counter()
        state.epoch += 1
        lr_used = state.current_lr
        perm = rng.permutation(len(train_data))
        sse = 0.0
        count = 0
        for lo in range(0, len(perm), config.batch_size):
            idxs = perm[lo:lo + config.batch_size]
            batch = train_data.batch(idxs)
            model.zero_grad()
            with Tape() as tape:
                pred, _ = model.forward(batch.inputs, train=True)
                loss = mse_loss(pred, batch.targets)
            loss_val = loss.item()
            if not math.isfinite(loss_val) or loss_val > config.divergence_limit:
                raise NumericError(
                    f"training diverged at epoch {state.epoch}: batch loss {loss_val}")
            tape.backward(loss)
            adam_step(named, state, lr_used, beta1=config.beta1,
                      beta2=config.beta2, eps=config.adam_eps)
            sse += loss_val * batch.inputs.data.shape[0] * batch.targets.data[0].size
            count += batch.inputs.data.shape[0] * batch.targets.data[0].size
        train_mse = sse / count
        val_mse = _split_mse(model, val_data, config.batch_size)
        scheduler_step(state, val_mse, config)
        if state.best_epoch == state.epoch or state.epoch == 1:
            best_params, best_buffers = _snapshot(model)
            if out_path is not None:
                _save_best(out_path / "best.ckpt", model)
        history.append(EpochStats(state.epoch, train_mse, val_mse, lr_used,
                                  time.perf_counter() - t0))
        if out_path is not None:
            with open(out_path / "last.ckpt", "wb") as f:
                write_checkpoint_section(f, model)
                _write_opt_section(f, state, rng)
            write_history_csv(out_path / "history.csv", history)
        if state.since_improve >= config.early_stop_patience:
            stopped_early = True
            break

    assert state.best_val_loss is not None
    return FitResult(history=history, best_epoch=state.best_epoch,
                     best_val_loss=state.best_val_loss, best_params=best_params,
                     best_buffers=best_buffers, stopped_early=stopped_early)


def _save_best(path, model: Model) -> None:
    with open(path, "wb") as f:
        write_checkpoint_section(f, model)


def load_best_into(model: Model, result: FitResult) -> Model:
    """Copy the best-epoch snapshot back into ``model`` in place."""
    for name, p in model.named_parameters():
        p.data[...] = result.best_params[name]
    for name, b in model.named_buffers():
        b[...] = result.best_buffers[name]
    return model
