"""Optimization: Adam with a staircase learning-rate schedule, value clipping,
mini-batches of windows, checkpoints and an overfit harness."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import nn
from .errors import ConfigurationError, NumericError, UsageError
from .seeding import sub_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    clip: float = 10.0
    epochs: int = 20
    seed: int = 0
    t_obs: int = 5
    t_pred: int = 13
    decay: float = 0.95
    decay_every: int = 5        # epochs per learning-rate step
    checkpoint_every: int = 0   # epochs; 0 keeps only the final checkpoint

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigurationError("clip range must be symmetric and positive")
        if not 1 <= self.t_obs < self.t_pred:
            raise ConfigurationError(f"need 1 <= t_obs < t_pred, got {self.t_obs}, {self.t_pred}")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigurationError("batch_size and decay_every must be >= 1, epochs >= 0")
        if self.lr < 0 or not 0 < self.decay <= 1:
            raise ConfigurationError("lr must be >= 0 and decay in (0, 1]")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.001
    decay: float = 1.0
    decay_interval: int = 1     # optimizer steps per learning-rate step

    @classmethod
    def for_params(cls, params, **kw):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)

    def learning_rate(self, step=None):
        k = self.step if step is None else step
        return self.lr * self.decay ** (k // self.decay_interval)

    def to_arrays(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def hyper(self):
        return {k: getattr(self, k) for k in
                ("step", "beta1", "beta2", "eps", "lr", "decay", "decay_interval")}

    @classmethod
    def from_arrays(cls, arrays, hyper):
        m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in arrays.items() if k.startswith("adam.v.")}
        return cls(m, v, **hyper)


def clip_gradients(grads, lo=-10.0, hi=10.0):
    """Elementwise clamp of every gradient array."""
    return {k: np.clip(g, lo, hi) for k, g in grads.items()}


def adam_step(params, grads, opt):
    """One bias-corrected Adam update.

    Parameter arrays are replaced rather than modified, so arrays still held
    by an earlier tape keep their values.
    """
    if set(grads) != set(params.names()):
        raise UsageError("gradients do not cover the parameter set")
    lr = opt.learning_rate()
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name in params.names():
        g = grads[name]
        p = params[name]
        if g.shape != p.shape or opt.m[name].shape != p.shape:
            raise UsageError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params, opt


def window_gradients(window, params, config, t_obs, t_pred):
    """``(loss value, {name: grad})`` for one window, or ``(None, None)`` without loss terms."""
    frames = window.frames if hasattr(window, "frames") else window
    res = M.rollout(frames, params, config, t_obs, t_pred, "train")
    if res.loss is None:
        return None, None
    value = float(res.loss.value)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    res.loss.tape.backward(res.loss)
    return value, res.params.gradients()


class TrainingError(NumericError):
    """Non-finite loss during training; carries the offending window."""

    def __init__(self, message, window=None):
        super().__init__(message)
        self.window = window


def _describe(window):
    frames = window.frames if hasattr(window, "frames") else window
    lines = []
    start = getattr(window, "start_frame", 0)
    for k, fr in enumerate(frames):
        for a in fr.agents:
            lines.append(f"  frame {start + k} agent {a.agent_id} cat {a.category} "
                         f"x={a.x!r} y={a.y!r}")
    return "\n".join(lines)


@dataclass
class TrainResult:
    params: nn.ParamRegistry
    opt: OptimizerState
    curve: list = field(default_factory=list)       # (epoch, mean_nll, lr)
    checkpoints: list = field(default_factory=list)


def make_optimizer(params, tc, steps_per_epoch):
    return OptimizerState.for_params(params, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, lr=tc.lr,
                                     decay=tc.decay, decay_interval=max(1, tc.decay_every * steps_per_epoch))


def train_epochs(windows, model_config, tc, params=None, opt=None, checkpoint_dir=None,
                 name=None, start_epoch=0):
    """Train on ``windows`` for ``tc.epochs`` epochs.

    Windows are shuffled once per epoch with a generator derived from
    ``tc.seed``; each batch averages per-window gradients, clips them to
    ``[-clip, clip]`` and takes one Adam step.  Returns a :class:`TrainResult`
    whose ``curve`` holds ``(epoch, mean NLL, learning rate)`` per epoch.
    """
    windows = list(windows)
    if not windows:
        raise UsageError("no training windows")
    params = params if params is not None else M.init_model(model_config, sub_seed(tc.seed, "init"))
    M.check_params(params, model_config)
    steps_per_epoch = math.ceil(len(windows) / tc.batch_size)
    opt = opt or make_optimizer(params, tc, steps_per_epoch)
    result = TrainResult(params, opt)
    name = name or model_config.mode

    for epoch in range(start_epoch, start_epoch + tc.epochs):
        rng = np.random.default_rng(sub_seed(tc.seed, f"shuffle/{epoch}"))
        order = rng.permutation(len(windows))
        losses = []
        lr_used = opt.learning_rate()
        for lo in range(0, len(order), tc.batch_size):
            total, count = None, 0
            for idx in order[lo:lo + tc.batch_size]:
                try:
                    value, grads = window_gradients(windows[idx], params, model_config, tc.t_obs, tc.t_pred)
                except NumericError as exc:
                    raise TrainingError(f"epoch {epoch}, window {idx}: {exc}\n{_describe(windows[idx])}",
                                        windows[idx]) from exc
                if value is None:
                    continue
                losses.append(value)
                count += 1
                if total is None:
                    total = {k: g.copy() for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        total[k] += g
            if count == 0:
                continue
            mean = {k: g / count for k, g in total.items()}
            params, opt = adam_step(params, clip_gradients(mean, -tc.clip, tc.clip), opt)
        mean_nll = float(np.mean(losses)) if losses else float("nan")
        result.curve.append((epoch + 1, mean_nll, lr_used))
        log.info("%s epoch %d: mean NLL %.6f (lr %.6g)", name, epoch + 1, mean_nll, lr_used)
        last = epoch == start_epoch + tc.epochs - 1
        if checkpoint_dir and (last or (tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0)):
            suffix = "" if last else f"_epoch{epoch + 1:03d}"
            path = os.path.join(checkpoint_dir, f"{name}{suffix}.ckpt")
            save_training_checkpoint(path, params, opt, model_config, tc, epoch + 1)
            result.checkpoints.append(path)
    result.params, result.opt = params, opt
    return result


def save_training_checkpoint(path, params, opt, model_config, tc, epoch):
    meta = {"model": model_config.to_dict(), "train": asdict(tc), "epoch": epoch,
            "optimizer": opt.hyper()}
    nn.save_checkpoint(path, params, meta, opt.to_arrays())


def load_training_checkpoint(path):
    """``(params, model_config, optimizer_state, meta)`` from a training checkpoint."""
    params, meta, extra = nn.load_checkpoint(path)
    config = M.ModelConfig.from_dict(meta["model"])
    M.check_params(params, config)
    opt = OptimizerState.from_arrays(extra, meta["optimizer"]) if "optimizer" in meta else None
    return params, config, opt, meta


def write_loss_curve(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_nll", "lr"])
        for epoch, nll, lr in curve:
            w.writerow([epoch, repr(float(nll)), repr(float(lr))])


def overfit_window(window, model_config, steps, tc=None, params=None, eval_every=100, target_ade=None):
    """Repeated Adam steps on one window; returns ``(params, history)``.

    ``history`` rows are ``(step, loss, closed-loop ADE)`` in the window's
    normalized units.  Stops early once ``target_ade`` is reached.
    """
    from .eval import window_ade

    tc = tc or TrainConfig()
    params = params if params is not None else M.init_model(model_config, sub_seed(tc.seed, "init"))
    opt = make_optimizer(params, tc, 1)
    opt.decay = 1.0
    history = []
    for step in range(1, steps + 1):
        value, grads = window_gradients(window, params, model_config, tc.t_obs, tc.t_pred)
        params, opt = adam_step(params, clip_gradients(grads, -tc.clip, tc.clip), opt)
        if step % eval_every == 0 or step == steps:
            ade = window_ade(window, params, model_config, tc.t_obs, tc.t_pred)
            history.append((step, value, ade))
            if target_ade is not None and ade < target_ade:
                break
    return params, history
