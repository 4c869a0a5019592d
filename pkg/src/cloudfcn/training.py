"""Soft Jaccard loss, Adam, geometric augmentation and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import unet
from .errors import ConfigError, DivergenceError, InputError, ShapeError
from .patches import resize_bilinear

log = logging.getLogger(__name__)


@dataclass
class LossValue:
    value: float
    grad_y: np.ndarray


def jaccard_values(h: np.ndarray, y: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    """Per-sample negative soft Jaccard, reducing over every axis but the first."""
    if h.shape != y.shape:
        raise ShapeError(f"truth {h.shape} and prediction {y.shape} differ in shape")
    if not eps > 0:
        raise ValueError("eps must be positive")
    axes = tuple(range(1, h.ndim))
    hd = h.astype(np.float64)
    yd = y.astype(np.float64)
    inter = (hd * yd).sum(axis=axes)
    return -(inter + eps) / (hd.sum(axis=axes) + yd.sum(axis=axes) - inter + eps)


def jaccard_loss(h: np.ndarray, y: np.ndarray, eps: float = 1e-7, reduction: str = "batch") -> LossValue:
    """Negative soft Jaccard index between a binary truth ``h`` and probabilities ``y``.

    ``-(sum(h*y) + eps) / (sum(h) + sum(y) - sum(h*y) + eps)``. With
    ``reduction="batch"`` the sums run over every pixel of the batch at once;
    ``"sample"`` evaluates the loss per leading-axis sample and averages.
    """
    if h.shape != y.shape:
        raise ShapeError(f"truth {h.shape} and prediction {y.shape} differ in shape")
    if not eps > 0:
        raise ValueError("eps must be positive")
    hd = h.astype(np.float64)
    yd = y.astype(np.float64)
    if reduction == "batch":
        axes = None
    elif reduction == "sample":
        axes = tuple(range(1, h.ndim))
    else:
        raise ConfigError(f"unknown loss reduction {reduction!r}")
    inter = (hd * yd).sum(axis=axes, keepdims=True)
    s = inter + eps
    u = hd.sum(axis=axes, keepdims=True) + yd.sum(axis=axes, keepdims=True) - inter + eps
    values = -s / u
    grad = -(hd * u - s * (1 - hd)) / u**2
    if reduction == "sample":
        grad = grad / h.shape[0]
    return LossValue(float(values.mean()), grad.astype(y.dtype if y.dtype.kind == "f" else np.float64))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: unet.ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params.tensors:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if g.shape != params.tensors[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params.tensors[name].shape}")
    state.t += 1
    bc1 = 1 - state.beta1**state.t
    bc2 = 1 - state.beta2**state.t
    for name, theta in params.tensors.items():
        g = grads[name].astype(theta.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.bump()


@dataclass
class AugmentConfig:
    hflip: bool = True
    rotate: bool = True
    zoom: bool = True
    zoom_max: float = 1.2
    rotation_mode: str = "right"  # "right": multiples of 90 degrees, "any": uniform angle

    def __post_init__(self):
        if self.zoom_max < 1:
            raise ConfigError("zoom_max must be >= 1")
        if self.rotation_mode not in ("right", "any"):
            raise ConfigError(f"unknown rotation_mode {self.rotation_mode!r}")


def zoom_center(img: np.ndarray, factor: float, mask: bool = False) -> np.ndarray:
    """Magnify the last two axes by ``factor`` about the centre, keeping the size."""
    h, w = img.shape[-2:]
    ch = min(h, max(1, round(h / factor)))
    cw = min(w, max(1, round(w / factor)))
    if (ch, cw) == (h, w):
        return img.copy()
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    crop = img[..., y0:y0 + ch, x0:x0 + cw]
    if mask:
        yi = np.floor((np.arange(h) + 0.5) * ch / h).astype(np.intp)
        xi = np.floor((np.arange(w) + 0.5) * cw / w).astype(np.intp)
        return crop[..., yi[:, None], xi[None, :]]
    return resize_bilinear(crop, w, h).astype(img.dtype, copy=False)


def augment(x: np.ndarray, h: np.ndarray, rng, cfg: AugmentConfig | None = None):
    """Apply one random flip / rotation / zoom identically to image and mask.

    ``x`` is (C, H, W), ``h`` is (H, W) or (1, H, W). ``rng`` is a numpy
    Generator or an integer seed. Random draws happen in a fixed order
    regardless of which transforms are enabled.
    """
    cfg = cfg or AugmentConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if x.shape[-2:] != h.shape[-2:]:
        raise ShapeError(f"image {x.shape} and mask {h.shape} differ spatially")
    flip = rng.random() < 0.5
    quarter = int(rng.integers(4))
    angle = rng.uniform(0, 360)
    factor = rng.uniform(1.0, cfg.zoom_max)
    if cfg.hflip and flip:
        x, h = x[..., ::-1], h[..., ::-1]
    if cfg.rotate:
        if cfg.rotation_mode == "right":
            x, h = np.rot90(x, quarter, axes=(-2, -1)), np.rot90(h, quarter, axes=(-2, -1))
        else:
            x = ndimage.rotate(x, angle, axes=(-1, -2), reshape=False, order=1, mode="reflect")
            hm = ndimage.rotate(h.astype(np.uint8), angle, axes=(-1, -2), reshape=False, order=0, mode="reflect")
            h = hm.astype(h.dtype)
    if cfg.zoom:
        x = zoom_center(x, factor)
        h = zoom_center(h, factor, mask=True)
    return np.ascontiguousarray(x), np.ascontiguousarray(h)


INIT_GAINS = {"he": 6.0, "fan_in": 1.0}


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_eps: float = 1e-7
    loss_reduction: str = "batch"
    seed: int = 0
    hflip: bool = True
    rotate: bool = True
    zoom: bool = True
    zoom_max: float = 1.2
    rotation_mode: str = "right"
    init: str = "he"  # "he": sqrt(6/fan_in), "fan_in": sqrt(1/fan_in), "uniform": [-init_scale, init_scale]
    init_scale: float = 1.0
    checkpoint_every: int = 0
    log_wall_time: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.loss_eps > 0:
            raise ConfigError("loss_eps must be > 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.init not in INIT_GAINS and self.init != "uniform":
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.loss_reduction not in ("batch", "sample"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        AugmentConfig(self.hflip, self.rotate, self.zoom, self.zoom_max, self.rotation_mode)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.hflip, self.rotate, self.zoom, self.zoom_max, self.rotation_mode)


@dataclass
class TrainResult:
    params: unet.ModelParams
    losses: list[float]
    state: AdamState
    epoch: int


def format_loss_log(losses: Sequence[float], walls: Sequence[float] | None = None) -> str:
    lines = []
    for i, loss in enumerate(losses):
        wall = walls[i] if walls is not None else 0.0
        lines.append(f"{i + 1},{loss!r},{wall:.3f}")
    return "".join(line + "\n" for line in lines)


def _save_checkpoint(path, result: TrainResult, cfg: TrainConfig, walls: list[float]) -> None:
    st = result.state
    extra = {f"adam.m/{k}": v for k, v in st.m.items()}
    extra.update({f"adam.v/{k}": v for k, v in st.v.items()})
    meta = {
        "epoch": result.epoch,
        "adam_t": st.t,
        "losses": result.losses,
        "walls": walls if cfg.log_wall_time else [0.0] * len(walls),
        "train": asdict(cfg),
    }
    unet.save_params(path, result.params, extra=extra, meta=meta)


def resume_state(path, cfg: TrainConfig):
    params, extra, meta = unet.read_checkpoint(path)
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, t=meta["adam_t"])
    for k, v in extra.items():
        kind, name = k.split("/", 1)
        (state.m if kind == "adam.m" else state.v)[name] = v
    return params, state, meta


def train(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    net_cfg: unet.NetworkConfig,
    checkpoint_path=None,
    log_path=None,
    resume=None,
    stop_after: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a network on ``(x, h)`` pairs with x (C, S, S) and h (S, S).

    Each epoch draws its shuffle and augmentation from a generator seeded by
    ``(seed, epoch)``, so a run resumed from a checkpoint replays exactly the
    same batches as an uninterrupted one.
    """
    if not dataset:
        raise InputError("training dataset is empty")
    size = net_cfg.input_size
    for i, (x, h) in enumerate(dataset):
        if x.shape != (net_cfg.in_channels, size, size) or h.shape[-2:] != (size, size):
            raise ShapeError(f"sample {i}: image {x.shape} / mask {h.shape} do not fit input size {size}")
    dtype = np.dtype(cfg.dtype)
    if resume is not None:
        params, state, meta = resume_state(resume, cfg)
        if params.config != net_cfg:
            raise ConfigError("checkpoint network config differs from the requested one")
        params = params.astype(dtype)
        losses = list(meta["losses"])
        walls = list(meta["walls"])
        start = meta["epoch"]
    else:
        if cfg.init == "uniform":
            params = unet.init_params(net_cfg, cfg.seed, scale=cfg.init_scale, dtype=dtype)
        else:
            params = unet.init_params(net_cfg, cfg.seed, gain=INIT_GAINS[cfg.init], dtype=dtype)
        state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses, walls, start = [], [], 0
    aug = cfg.augment
    n = len(dataset)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    result = TrainResult(params, losses, state, start)
    for epoch in range(start, end):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        batch_losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            xs, hs = [], []
            for idx in order[lo:lo + cfg.batch_size]:
                x, h = dataset[idx]
                x, h = augment(x, h.reshape(size, size), rng, aug)
                xs.append(x)
                hs.append(h)
            xb = np.stack(xs).astype(dtype)
            hb = np.stack(hs)[:, None].astype(dtype)
            prob, tape = unet.forward(params, xb)
            loss = jaccard_loss(hb, prob, cfg.loss_eps, cfg.loss_reduction)
            if not math.isfinite(loss.value):
                raise DivergenceError(epoch + 1, b, loss.value)
            grads = unet.backward(params, tape, loss.grad_y)
            adam_step(params, grads, state)
            batch_losses.append(loss.value)
        mean_loss = float(np.mean(batch_losses))
        if not math.isfinite(mean_loss):
            raise DivergenceError(epoch + 1, len(batch_losses) - 1, mean_loss)
        losses.append(mean_loss)
        walls.append(time.perf_counter() - t0 if cfg.log_wall_time else 0.0)
        result.epoch = epoch + 1
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
        if log_path is not None:
            Path(log_path).write_text(format_loss_log(losses, walls))
        if checkpoint_path is not None and (
            result.epoch == end or (cfg.checkpoint_every and result.epoch % cfg.checkpoint_every == 0)
        ):
            _save_checkpoint(checkpoint_path, result, cfg, walls)
    return result
