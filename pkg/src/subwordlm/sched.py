"""Optimizers, learning-rate schedules, the LR range test, NT-ASGD and the training loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import neural
from ._util import config_hash, sub_seed
from .metrics import perplexity_from_nll
from .neural import NeuralLMConfig, Params


class TrainingError(RuntimeError):
    pass


class LRFinderError(ValueError):
    pass


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Params, lr: float = 1e-3, weight_decay: float = 0.0, **kw) -> OptimizerState:
    st = OptimizerState(lr=lr, weight_decay=weight_decay, **kw)
    st.m = {k: np.zeros_like(p) for k, p in params.items()}
    st.v = {k: np.zeros_like(p) for k, p in params.items()}
    return st


def adam_step(params: Params, grads: Params, state: OptimizerState, lr: float | None = None) -> Params:
    """In-place Adam update with bias correction and decoupled weight decay.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        if not np.isfinite(update).all():
            raise FloatingPointError(f"non-finite Adam update for {name}")
        p -= lr * update
    return params


def sgd_step(params: Params, grads: Params, lr: float, weight_decay: float = 0.0) -> Params:
    for name, p in params.items():
        update = grads[name] + weight_decay * p if weight_decay else grads[name]
        if not np.isfinite(update).all():
            raise FloatingPointError(f"non-finite SGD update for {name}")
        p -= lr * update
    return params


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "sgdr"  # constant | sgdr
    eta_max: float = 1e-3
    eta_min: float | None = None  # defaults to eta_max / 100
    cycle_length: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "sgdr"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.cycle_length < 1:
            raise ValueError("cycle_length must be >= 1")
        if self.floor > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")

    @property
    def floor(self) -> float:
        return self.eta_max / 100.0 if self.eta_min is None else self.eta_min


def sgdr_lr(schedule: LRSchedule, batch_in_cycle: int) -> float:
    """Cosine annealing from ``eta_max`` toward ``eta_min`` within one cycle."""
    if schedule.kind == "constant":
        return schedule.eta_max
    if not 0 <= batch_in_cycle < schedule.cycle_length:
        raise ValueError(f"batch_in_cycle {batch_in_cycle} outside [0, {schedule.cycle_length})")
    lo, hi = schedule.floor, schedule.eta_max
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * batch_in_cycle / schedule.cycle_length))


# --------------------------------------------------------------------------
# LR range test


@dataclass
class LRFinderResult:
    lrs: list[float]
    losses: list[float]
    smoothed: list[float]
    suggestion: float
    stopped_early: bool

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss", "smoothed_loss"])
            for k, (lr, loss, s) in enumerate(zip(self.lrs, self.losses, self.smoothed)):
                w.writerow([k, repr(lr), repr(loss), repr(s)])


def lr_range_test(
    step_fn: Callable[[float], float],
    lr_lo: float = 1e-5,
    lr_hi: float = 1.0,
    steps: int = 100,
    beta: float = 0.98,
    diverge_factor: float = 4.0,
) -> LRFinderResult:
    """Exponential LR sweep. ``step_fn(lr)`` trains one batch at ``lr`` and returns its loss.

    Learning rates are ``lr_lo * r**k`` for ``k = 0..steps`` with
    ``r = (lr_hi / lr_lo) ** (1 / steps)``. The suggestion is the learning
    rate at the minimum of the bias-corrected smoothed loss: the last point
    of the descending stretch before the loss turns upward.
    """
    if not 0 < lr_lo < lr_hi:
        raise ValueError("need 0 < lr_lo < lr_hi")
    if steps < 10:
        raise ValueError("steps must be >= 10")
    ratio = (lr_hi / lr_lo) ** (1.0 / steps)
    lrs, losses, smoothed = [], [], []
    avg = 0.0
    best = math.inf
    stopped = False
    for k in range(steps + 1):
        lr = lr_lo * ratio ** k
        loss = float(step_fn(lr))
        if not math.isfinite(loss):
            if k == 0:
                raise LRFinderError(f"loss diverged on the first step at lr={lr_lo:g}; lower lr_lo")
            stopped = True
            break
        avg = beta * avg + (1.0 - beta) * loss
        s = avg / (1.0 - beta ** (k + 1))
        lrs.append(lr)
        losses.append(loss)
        smoothed.append(s)
        best = min(best, s)
        if s > diverge_factor * best:
            stopped = True
            break
    k_best = int(np.argmin(smoothed))
    if k_best == 0:
        raise LRFinderError("smoothed loss never decreased; lower lr_lo")
    return LRFinderResult(lrs, losses, smoothed, lrs[k_best], stopped)


# --------------------------------------------------------------------------
# NT-ASGD


class NtAsgdController:
    """Switches to iterate averaging once validation stops improving.

    A report triggers when more than ``patience`` losses are already
    recorded and the new loss is not below the minimum of the last
    ``patience`` of them.
    """

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.history: list[float] = []
        self.mode = "warmup"
        self.trigger_report: int | None = None
        self._avg: Params | None = None
        self._n_avg = 0

    def update(self, val_loss: float) -> str:
        n = self.patience
        if self.mode == "warmup" and len(self.history) > n and val_loss >= min(self.history[-n:]):
            self.mode = "averaging"
            self.trigger_report = len(self.history) + 1
        self.history.append(float(val_loss))
        return self.mode

    def accumulate(self, params: Params) -> None:
        """Add the current iterate to the running mean (averaging mode only)."""
        if self.mode != "averaging":
            return
        self._n_avg += 1
        if self._avg is None:
            self._avg = {k: p.copy() for k, p in params.items()}
            return
        w = 1.0 / self._n_avg
        for k, p in params.items():
            self._avg[k] += w * (p - self._avg[k])

    def effective_params(self, params: Params) -> Params:
        if self.mode == "averaging" and self._avg is not None:
            return self._avg
        return params


def ntasgd_update(controller: NtAsgdController, val_loss: float) -> str:
    return controller.update(val_loss)


def ntasgd_params(controller: NtAsgdController, params: Params) -> Params:
    return controller.effective_params(params)


# --------------------------------------------------------------------------
# run log


@dataclass
class TrainRunLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)
    epochs: list[tuple[int, float, float, float]] = field(default_factory=list)

    def log_step(self, step: int, lr: float, loss: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("step indices must strictly increase")
        self.steps.append((step, lr, loss))

    def log_epoch(self, epoch: int, val_loss: float, val_ppl: float, seconds: float) -> None:
        self.epochs.append((epoch, val_loss, val_ppl, seconds))

    @property
    def losses(self) -> list[float]:
        return [s[2] for s in self.steps]

    def write(self, steps_path: str | Path, epochs_path: str | Path) -> None:
        with open(steps_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "train_loss"])
            for step, lr, loss in self.steps:
                w.writerow([step, repr(lr), repr(loss)])
        with open(epochs_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "val_loss", "val_ppl", "seconds"])
            for epoch, vl, vp, sec in self.epochs:
                w.writerow([epoch, repr(vl), repr(vp), f"{sec:.3f}"])


# --------------------------------------------------------------------------
# training driver


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    schedule: str = "sgdr"  # constant | sgdr
    optimizer: str = "adam"  # adam | sgd | ntasgd
    phases: tuple = ()  # ((epochs, lr), ...); overrides epochs/lr when set
    clip_norm: float = 0.25
    ntasgd_patience: int = 5
    eval_batch_size: int = 10

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd", "ntasgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "sgdr"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.phases = tuple(tuple(p) for p in self.phases)
        for n, lr in self.phases:
            if n < 1 or lr <= 0:
                raise ValueError(f"bad phase {(n, lr)}")
        if not self.phases and (self.epochs < 1 or self.lr <= 0):
            raise ValueError("epochs and lr must be positive")

    def epoch_lrs(self) -> list[float]:
        if self.phases:
            return [lr for n, lr in self.phases for _ in range(int(n))]
        return [self.lr] * self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = [list(p) for p in self.phases]
        return d


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))

PRESETS: dict[str, dict] = {
    "subword": {
        "epochs": 20, "lr": 1e-3, "schedule": "sgdr", "optimizer": "adam",
        "bptt_len": 70, "batch_size": 32, "vocab_size": 30000,
    },
    "word-baseline": {
        "vocab_size": 60000, "phases": ((4, 1e-2), (3, 1e-3)), "schedule": "constant", "optimizer": "adam",
        "bptt_len": 70, "batch_size": 32,
    },
    "simple-lstm": {
        "num_layers": 2, "hidden_dim": 200, "embed_dim": 200, "tie_weights": False,
        "dropout_multiplier": 0.0, "weight_decay": 0.0, "batch_size": 32,
        "lr": 1.0, "epochs": 10, "schedule": "constant", "optimizer": "sgd",
    },
}


@dataclass
class TrainResult:
    params: Params
    log: TrainRunLog
    best_val_loss: float
    best_epoch: int
    meta: dict


def _run_meta(config: NeuralLMConfig, tcfg: TrainConfig, seed: int, extra: dict | None) -> dict:
    meta = {
        "seed": seed,
        "seeds": {name: sub_seed(seed, name) for name in ("init", "masks", "bptt")},
        "train": tcfg.to_dict(),
        "config_hash": config_hash({"model": config.to_dict(), "train": tcfg.to_dict(), "seed": seed}),
    }
    meta.update(extra or {})
    return meta


def train(
    config: NeuralLMConfig,
    train_ids: np.ndarray,
    valid_ids: np.ndarray,
    tcfg: TrainConfig | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    bos_id: int | None = 0,
    meta: dict | None = None,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train from random initialization; writes checkpoints and logs to ``out_dir``.

    Positions whose target is ``bos_id`` are not scored.
    """
    from .evaluate import stream_nll

    tcfg = tcfg or TrainConfig()
    train_ids = np.asarray(train_ids)
    valid_ids = np.asarray(valid_ids)
    if train_ids.size < 2 or valid_ids.size < 2:
        raise TrainingError("train and valid streams must each hold at least two tokens")
    run_meta = _run_meta(config, tcfg, seed, meta)
    seeds = run_meta["seeds"]
    params = neural.init_params(config, seeds["init"])
    mask_rng = np.random.default_rng(seeds["masks"])
    bptt_rng = np.random.default_rng(seeds["bptt"]) if config.variable_bptt else None
    data = neural.batchify(train_ids, config.batch_size)
    use_adam = tcfg.optimizer == "adam"
    opt = adam_init(params, tcfg.epoch_lrs()[0], config.weight_decay) if use_adam else None
    controller = NtAsgdController(tcfg.ntasgd_patience) if tcfg.optimizer == "ntasgd" else None
    log = TrainRunLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best = (math.inf, 0)
    step = 0
    for epoch, epoch_lr in enumerate(tcfg.epoch_lrs(), start=1):
        t0 = time.perf_counter()
        windows = list(neural.iter_windows(data, config.bptt_len, bptt_rng))
        schedule = LRSchedule(tcfg.schedule, epoch_lr, None, len(windows))
        state = neural.zero_state(config, config.batch_size)
        for b, (x, y) in enumerate(windows):
            masks = neural.sample_masks(config, mask_rng, config.batch_size)
            try:
                loss, grads, state = neural.loss_and_grads(params, config, x, y, state, masks, bos_id)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch} batch {b} (step {step}): {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b} (step {step})")
            clip_grad_norm(grads, tcfg.clip_norm)
            lr = sgdr_lr(schedule, b)
            if config.variable_bptt:
                lr *= x.shape[1] / config.bptt_len
            if use_adam:
                adam_step(params, grads, opt, lr)
            else:
                sgd_step(params, grads, lr, config.weight_decay)
                if controller is not None:
                    controller.accumulate(params)
            log.log_step(step, lr, loss)
            step += 1
        eval_params = controller.effective_params(params) if controller else params
        nll, n = stream_nll(eval_params, config, valid_ids, tcfg.eval_batch_size, config.bptt_len, bos_id)
        val_loss = nll / n
        val_ppl = perplexity_from_nll(nll, n)
        if controller is not None:
            controller.update(val_loss)
        log.log_epoch(epoch, val_loss, val_ppl, time.perf_counter() - t0)
        if progress:
            progress(f"epoch {epoch}: train_loss={loss:.4f} val_loss={val_loss:.4f} val_ppl={val_ppl:.2f}")
        if val_loss < best[0]:
            best = (val_loss, epoch)
            if out is not None:
                neural.save_checkpoint(out / "best.ckpt", config, eval_params,
                                       {**run_meta, "epoch": epoch, "val_loss": val_loss})
    final = controller.effective_params(params) if controller else params
    final = {k: v.copy() for k, v in final.items()}
    if out is not None:
        neural.save_checkpoint(out / "final.ckpt", config, final,
                               {**run_meta, "epoch": len(tcfg.epoch_lrs()), "val_loss": val_loss})
        log.write(out / "train_log.csv", out / "epoch_log.csv")
    return TrainResult(final, log, best[0], best[1], run_meta)


def neural_step_fn(config: NeuralLMConfig, train_ids: np.ndarray, seed: int = 0, bos_id: int | None = 0,
                   clip_norm: float = 0.25) -> Callable[[float], float]:
    """A ``step_fn`` for :func:`lr_range_test` that trains a fresh model with Adam."""
    seeds = {name: sub_seed(seed, name) for name in ("init", "masks")}
    params = neural.init_params(config, seeds["init"])
    mask_rng = np.random.default_rng(seeds["masks"])
    data = neural.batchify(train_ids, config.batch_size)
    opt = adam_init(params, 1e-3, config.weight_decay)
    windows = list(neural.iter_windows(data, config.bptt_len))
    box = {"k": 0, "state": neural.zero_state(config, config.batch_size)}

    def step(lr: float) -> float:
        k = box["k"] % len(windows)
        if k == 0:
            box["state"] = neural.zero_state(config, config.batch_size)
        x, y = windows[k]
        masks = neural.sample_masks(config, mask_rng, config.batch_size)
        try:
            loss, grads, box["state"] = neural.loss_and_grads(params, config, x, y, box["state"], masks, bos_id)
        except FloatingPointError:
            return math.inf
        box["k"] += 1
        clip_grad_norm(grads, clip_norm)
        adam_step(params, grads, opt, lr)
        return loss

    return step
