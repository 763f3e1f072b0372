"""Adam, mini-batch Chamfer training and Grad-CAM."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import EncoderDecoder, ModelError
from .tensor import AutodiffError, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, n_train: int | None = None) -> "TrainConfig":
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ModelError("learning_rate and weight_decay must be non-negative, eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ModelError("Adam moment coefficients must lie in [0, 1)")
        if n_train is not None and self.batch_size > n_train:
            raise ModelError(f"batch_size {self.batch_size} exceeds training-set size {n_train}")
        return self


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[Tensor], config: TrainConfig, state: AdamState) -> AdamState:
    """Decoupled weight decay, then a bias-corrected Adam update; clears gradients."""
    missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise AutodiffError(f"no gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p in params:
        key = id(p)
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if config.weight_decay:
            p.data = p.data - (lr * config.weight_decay) * p.data
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype, copy=False)
        p.grad = None
    return state


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, a, b in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([e, repr(float(a)), repr(float(b))])


def _stack(dataset):
    images, clouds = dataset
    images = np.asarray(images)
    clouds = np.asarray(clouds)
    if images.ndim != 3 or clouds.ndim != 3 or clouds.shape[2] != 3 or len(images) != len(clouds):
        raise ModelError("dataset must be (images (B, H, W), clouds (B, M, 3)) with matching B")
    if len(images) == 0:
        raise ModelError("dataset is empty")
    return images, clouds


def evaluate_loss(model: EncoderDecoder, dataset, batch_size: int = 50) -> float:
    """Mean training-loss value (squared Chamfer) over a dataset, no parameter updates."""
    images, clouds = _stack(dataset)
    total = 0.0
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        pred = model(images[sl])
        total += float(T.chamfer_loss(pred, clouds[sl]).data) * len(images[sl])
    return total / len(images)


def train(model: EncoderDecoder, train_set, val_set, config: TrainConfig | None = None,
          log=None) -> tuple[EncoderDecoder, History]:
    """Shuffled mini-batch training; the model keeps its best-validation weights."""
    config = config or TrainConfig()
    x_tr, y_tr = _stack(train_set)
    x_va, y_va = _stack(val_set)
    config.validate(len(x_tr))
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    adam = AdamState()
    history = History()
    best = math.inf
    best_state = model.state_dict()
    model.training = True
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_tr))
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = T.chamfer_loss(model(x_tr[idx]), y_tr[idx])
            loss.backward()
            adam_step(params, config, adam)
            running += float(loss.data) * len(idx)
        train_loss = running / len(order)
        val_loss = evaluate_loss(model, (x_va, y_va), config.batch_size)
        history.epochs.append(epoch)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        if val_loss < best:
            best = val_loss
            best_state = model.state_dict()
            history.best_epoch = epoch
        if log is not None:
            log(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f}")
    model.training = False
    model.load_state_dict(best_state)
    return model, history


@dataclass
class GradCamMap:
    heatmap: np.ndarray  # (H', W') in [0, 1]
    overlay: np.ndarray  # nearest-neighbour upsample to image size

    def marker_ratio(self, image, dilate: int = 2) -> float:
        """Mean heat over marker pixels (dilated) divided by mean heat over the rest."""
        from scipy.ndimage import binary_dilation

        mask = np.asarray(getattr(image, "pixels", image)) > 0
        if dilate:
            mask = binary_dilation(mask, iterations=dilate)
        if not mask.any() or mask.all():
            return math.nan
        bg = float(self.overlay[~mask].mean())
        fg = float(self.overlay[mask].mean())
        if bg == 0:
            return math.inf if fg > 0 else math.nan
        return fg / bg


def grad_cam(model: EncoderDecoder, image, gt, loss_scale: float = 1.0) -> GradCamMap:
    """Channel-weighted last-block activations under the Chamfer-loss gradient."""
    pixels = np.asarray(getattr(image, "pixels", image))
    gt_pts = np.asarray(getattr(gt, "points", gt), dtype=np.float64)
    pred = model(pixels[None])
    act = model.last_conv  # (1, h, w, C) after ReLU, before pooling
    loss = T.chamfer_loss(pred, gt_pts[None]) * np.float32(loss_scale)
    loss.backward()
    grads = act.grad if act.grad is not None else np.zeros_like(act.data)
    model_params = model.parameters()
    for p in model_params:
        p.grad = None
    alpha = grads[0].mean(axis=(0, 1), dtype=np.float64)  # (C,)
    cam = np.maximum(act.data[0].astype(np.float64) @ alpha, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    size = pixels.shape[0]
    factor = size // cam.shape[0]
    overlay = np.repeat(np.repeat(cam, factor, axis=0), factor, axis=1)
    return GradCamMap(cam, overlay)
