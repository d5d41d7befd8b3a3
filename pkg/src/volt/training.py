"""Mini-batch AdamW training loop with a per-epoch CSV log."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import iou
from .model import ModelConfig, VoltModel, bce_loss
from .tensor import AdamWState, adamw_step, make_rng

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss", "train_iou", "wallclock_s")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    # train each batch on a random subset of its views (sizes 1..M)
    random_views: bool = False
    threshold: float = 0.5
    # linear learning-rate ramp over the first steps; deep post-norm stacks stall without it
    warmup_steps: int = 0


@dataclass
class TrainResult:
    model: VoltModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict | None = None
    optimizer: AdamWState | None = None


def _as_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "views_array"):
        return dataset.views_array(), dataset.grids_array()
    views, grids = zip(*dataset)
    return np.stack(views).astype(np.float64), np.stack(grids).astype(np.float64)


def train(dataset, model_config: ModelConfig, config: TrainConfig, log_path: str | Path | None = None,
          model: VoltModel | None = None) -> TrainResult:
    """Fit a model to ``dataset``: a :class:`volt.data.Dataset` or a sequence of
    ``(views (M, d), grid (G, G, G))`` pairs sharing M.

    An epoch's loss and IoU are measured on the predictions made before each
    batch's update, so with one batch per epoch the logged values belong to
    the parameters snapshotted at the start of that epoch. The best epoch
    (lowest loss) is kept in ``best_state`` and restored into the returned
    model.
    """
    views, grids = _as_arrays(dataset)
    n = len(views)
    if n == 0:
        raise ValueError("empty dataset")
    if model is None:
        model = VoltModel(model_config, seed=config.seed)
    state = AdamWState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                       weight_decay=config.weight_decay)
    order_rng = make_rng(config.seed, "train/order")
    view_rng = make_rng(config.seed, "train/views")
    result = TrainResult(model=model, optimizer=state)
    best_loss = np.inf
    start = time.perf_counter()
    step, epoch = 0, 0
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        while step < config.steps:
            snapshot = model.params.state_dict()
            order = order_rng.permutation(n)
            loss_sum, iou_sum, seen = 0.0, 0.0, 0
            for lo in range(0, n, config.batch_size):
                if step >= config.steps:
                    break
                idx = order[lo:lo + config.batch_size]
                x = views[idx]
                if config.random_views and x.shape[1] > 1:
                    k = int(view_rng.integers(1, x.shape[1] + 1))
                    x = x[:, np.sort(view_rng.choice(x.shape[1], size=k, replace=False))]
                if config.warmup_steps:
                    state.lr = config.lr * min(1.0, (step + 1) / config.warmup_steps)
                model.params.zero_grad()
                pred = model.forward(x)
                loss = bce_loss(pred, grids[idx])
                loss.backward()
                adamw_step(model.params, model.params.grads(), state)
                step += 1
                loss_sum += float(loss) * len(idx)
                iou_sum += sum(iou(p, g, config.threshold) for p, g in zip(pred.value, grids[idx]))
                seen += len(idx)
            row = {
                "epoch": epoch,
                "step": step,
                "loss": loss_sum / seen,
                "train_iou": iou_sum / seen,
                "wallclock_s": round(time.perf_counter() - start, 3),
            }
            result.log.append(row)
            if writer is not None:
                writer.writerow(row)
            if row["loss"] < best_loss:
                best_loss = row["loss"]
                result.best_epoch = epoch
                result.best_state = snapshot
            if epoch % 50 == 0:
                log.info("epoch %d step %d loss %.5f iou %.4f", epoch, step, row["loss"], row["train_iou"])
            epoch += 1
    finally:
        if fh is not None:
            fh.close()
    model.params.load_state_dict(result.best_state)
    return result
