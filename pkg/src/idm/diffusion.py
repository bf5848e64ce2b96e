"""Forward noising, training objectives, the optimisation loop and the sampler.

Images enter this module in [0, 1] and are mapped to the model range
[-1, 1] by :func:`to_model_range`; :func:`restore` maps results back.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch

from .degrade import DegradationRanges, degrade, sample_degradation_params
from .denoiser import (
    DenoiserCheckpoint,
    NumericError,
    ShapeError,
    check_input_shape,
    forward,
    module_parameters,
    save_checkpoint,
)
from .imaging import RngStream
from .schedule import InferencePlan, NoiseSchedule

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, dump_path: str | None = None):
        super().__init__(msg if dump_path is None else f"{msg} (state dumped to {dump_path})")
        self.dump_path = dump_path


def to_model_range(x: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def from_model_range(y: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(y, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


@dataclass(frozen=True)
class LossConfig:
    target: str = "x0"
    p_norm: int = 1

    def validate(self) -> None:
        if self.target not in ("x0", "epsilon"):
            raise ValueError(f"loss target must be 'x0' or 'epsilon', got {self.target!r}")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm must be 1 or 2, got {self.p_norm}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 2000
    gamma_sampling: str = "continuous_band"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gamma_sampling not in ("discrete_t", "continuous_band"):
            raise ValueError(f"unknown gamma_sampling {self.gamma_sampling!r}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass
class DiffusionState:
    t: int
    gamma: float
    x_t: np.ndarray


class Predictor(Protocol):
    """Anything usable as a denoiser: a checkpoint or a test oracle."""

    prediction_target: str

    def predict(self, x_cond: np.ndarray, x_noisy: np.ndarray, gamma: np.ndarray) -> np.ndarray: ...


class _CheckpointPredictor:
    def __init__(self, ckpt: DenoiserCheckpoint):
        self.ckpt = ckpt
        self.prediction_target = ckpt.config.prediction_target

    def predict(self, x_cond, x_noisy, gamma):
        return forward(self.ckpt, x_cond, x_noisy, gamma)


def as_predictor(model) -> Predictor:
    if isinstance(model, DenoiserCheckpoint):
        return _CheckpointPredictor(model)
    if hasattr(model, "predict") and hasattr(model, "prediction_target"):
        return model
    raise TypeError(f"not a denoiser: {type(model).__name__}")


# --------------------------------------------------------------------------
# forward process and loss
# --------------------------------------------------------------------------

def q_sample(x0, gamma, eps):
    """``sqrt(gamma) * x0 + sqrt(1 - gamma) * eps``; gamma may be per-sample (leading axis)."""
    if np.shape(x0) != np.shape(eps):
        raise ShapeError(f"x0 {np.shape(x0)} and eps {np.shape(eps)} differ")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")
    if g.ndim == 1:
        g = g.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps


def sample_gammas(schedule: NoiseSchedule, n: int, mode: str, g: np.random.Generator) -> np.ndarray:
    t = g.integers(1, schedule.T + 1, size=n)
    hi = np.where(t > 1, schedule.gammas[np.maximum(t - 2, 0)], 1.0)
    lo = schedule.gammas[t - 1]
    if mode == "discrete_t":
        return lo.copy()
    if mode == "continuous_band":
        return lo + g.uniform(size=n) * (hi - lo)
    raise ValueError(f"unknown gamma sampling mode {mode!r}")


def _lp(residual: torch.Tensor, p: int) -> torch.Tensor:
    return residual.abs().mean() if p == 1 else (residual * residual).mean()


def loss_from_arrays(net: torch.nn.Module, x0: torch.Tensor, xd: torch.Tensor, gammas: torch.Tensor,
                     eps: torch.Tensor, loss_config: LossConfig) -> torch.Tensor:
    """Differentiable loss for NCHW model-range tensors."""
    g = gammas.reshape(-1, 1, 1, 1)
    x_hat = g.sqrt() * x0 + (1.0 - g).sqrt() * eps
    pred = net(xd, x_hat, gammas)
    target = eps if loss_config.target == "epsilon" else x0
    return _lp(pred - target, loss_config.p_norm)


def _nchw(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """NHWC array to an NCHW tensor stored channels-last (no data movement)."""
    t = torch.from_numpy(np.ascontiguousarray(a)).to(dtype).permute(0, 3, 1, 2)
    return t.contiguous(memory_format=torch.channels_last)


def draw_noise_and_gammas(schedule: NoiseSchedule, shape: tuple, mode: str, rng: RngStream):
    g = rng.generator()
    gam = sample_gammas(schedule, shape[0], mode, g)
    eps = g.standard_normal(shape)
    return gam, eps


def loss(model, batch: Sequence[tuple[np.ndarray, np.ndarray]], schedule: NoiseSchedule,
         loss_config: LossConfig, rng: RngStream, gamma_sampling: str = "continuous_band") -> float:
    """Mean ``|f(x_d, x_hat, gamma) - target|^p`` over a batch of ``(x, x_d)`` pairs in [0, 1]."""
    loss_config.validate()
    if not batch:
        raise ValueError("empty batch")
    x = to_model_range(np.stack([b[0] for b in batch]))
    xd = to_model_range(np.stack([b[1] for b in batch]))
    if x.shape != xd.shape:
        raise ShapeError("clean and degraded images must share a shape")
    gam, eps = draw_noise_and_gammas(schedule, x.shape, gamma_sampling, rng)
    pred = as_predictor(model).predict(xd, q_sample(x, gam, eps), gam)
    if not np.all(np.isfinite(pred)):
        raise NumericError("non-finite forward output in loss")
    target = eps if loss_config.target == "epsilon" else x
    r = np.abs(pred - target)
    return float(np.mean(r if loss_config.p_norm == 1 else r * r))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class PairedCorpus:
    """Training pairs: ``targets[i]`` is learned, ``sources[i]`` is what gets degraded."""

    targets: np.ndarray
    sources: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.sources = np.asarray(self.sources, dtype=np.float64)
        if self.targets.shape != self.sources.shape:
            raise ShapeError("targets and sources must have identical shapes")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.targets))]

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def single(cls, images, ids=None) -> "PairedCorpus":
        images = np.asarray(images, dtype=np.float64)
        return cls(images, images, list(ids or []))


def synthesize_batch(corpus: PairedCorpus, ranges: DegradationRanges, batch_size: int, rng: RngStream):
    """Indices, clean targets and degraded conditions for one training step."""
    g = rng.child("indices").generator()
    idx = g.integers(0, len(corpus), size=batch_size)
    xd = np.empty((batch_size,) + corpus.sources.shape[1:])
    for j, i in enumerate(idx):
        r = rng.child("degrade", j)
        p = sample_degradation_params(ranges, r.child("params"))
        xd[j] = degrade(corpus.sources[i], p, r.child("noise"))
    return idx, corpus.targets[idx], xd


@dataclass
class TrainResult:
    checkpoint: DenoiserCheckpoint
    trace: list[dict]


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                            eps=cfg.adam_eps, foreach=False)


def _restore_optimizer(opt: torch.optim.Adam, net: torch.nn.Module, ckpt: DenoiserCheckpoint) -> None:
    if not ckpt.optimizer_state:
        return
    names = dict(net.named_parameters())
    for name, p in names.items():
        m = ckpt.optimizer_state.get(f"m/{name}")
        v = ckpt.optimizer_state.get(f"v/{name}")
        if m is None or v is None:
            return
        opt.state[p] = {
            "step": torch.tensor(float(ckpt.optimizer_step)),
            "exp_avg": torch.from_numpy(m.copy()),
            "exp_avg_sq": torch.from_numpy(v.copy()),
        }


def _optimizer_state(opt: torch.optim.Adam, net: torch.nn.Module) -> tuple[dict, int]:
    out: dict[str, np.ndarray] = {}
    step = 0
    for name, p in net.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"m/{name}"] = st["exp_avg"].detach().numpy().astype(np.float32).copy()
        out[f"v/{name}"] = st["exp_avg_sq"].detach().numpy().astype(np.float32).copy()
        step = int(st["step"])
    return out, step


def train(ckpt: DenoiserCheckpoint, corpus: PairedCorpus, ranges: DegradationRanges,
          schedule: NoiseSchedule, train_config: TrainConfig, loss_config: LossConfig,
          out_dir: str | None = None,
          batch_hook: Callable[[int, np.ndarray], None] | None = None) -> TrainResult:
    """Run ``total_steps`` Adam steps starting from ``ckpt.step_count``.

    Every step draws its batch, degradations, gammas and noise from a stream
    keyed by ``(seed, step)``, so a resumed run replays the same data. The
    returned checkpoint carries the Adam moments for exact resumption.
    """
    train_config.validate()
    loss_config.validate()
    if loss_config.target != ckpt.config.prediction_target:
        raise ValueError(f"loss target {loss_config.target!r} does not match network "
                         f"prediction_target {ckpt.config.prediction_target!r}")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    check_input_shape(ckpt.config, (1, corpus.targets.shape[3], corpus.targets.shape[1], corpus.targets.shape[2]))

    # channels-last runs the oneDNN convolutions without layout reorders
    net = ckpt.replace().module(torch.float32).to(memory_format=torch.channels_last)
    net.train()
    params = list(net.parameters())
    opt = _make_optimizer(params, train_config)
    _restore_optimizer(opt, net, ckpt)

    base = RngStream(train_config.seed, 0x7261696E)
    trace: list[dict] = []
    start = ckpt.step_count
    end = start + train_config.total_steps
    cur = ckpt
    trace_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "loss_trace.csv")
        new_file = not os.path.exists(trace_path) or start == 0
        trace_file = open(trace_path, "w" if new_file else "a", newline="")
        writer = csv.DictWriter(trace_file, fieldnames=["step", "loss", "learning_rate", "wall_ms"])
        if new_file:
            writer.writeheader()

    try:
        for step in range(start, end):
            t0 = time.perf_counter()
            srng = base.child(step)
            idx, x, xd = synthesize_batch(corpus, ranges, train_config.batch_size, srng.child("batch"))
            if batch_hook is not None:
                batch_hook(step, idx)
            gam, eps = draw_noise_and_gammas(schedule, x.shape, train_config.gamma_sampling, srng.child("noise"))
            x0_t = _nchw(to_model_range(x))
            xd_t = _nchw(to_model_range(xd))
            eps_t = _nchw(eps)
            g_t = torch.from_numpy(gam).to(torch.float32)

            opt.zero_grad(set_to_none=True)
            lval = loss_from_arrays(net, x0_t, xd_t, g_t, eps_t, loss_config)
            value = float(lval.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step}",
                                       _dump_state(out_dir, net, cur, step, trace))
            lval.backward()
            if train_config.learning_rate > 0:
                opt.step()
            if not all(torch.isfinite(p).all() for p in params):
                raise TrainingDiverged(f"non-finite parameters after step {step}",
                                       _dump_state(out_dir, net, cur, step, trace))
            row = {"step": step + 1, "loss": value, "learning_rate": train_config.learning_rate,
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            trace.append(row)
            if trace_file is not None:
                writer.writerow(row)
            if train_config.log_every and (step + 1) % train_config.log_every == 0:
                recent = [r["loss"] for r in trace[-train_config.log_every:]]
                log.info("step %d loss %.5f", step + 1, float(np.mean(recent)))
            if out_dir and train_config.checkpoint_every and (step + 1) % train_config.checkpoint_every == 0:
                snap = _snapshot(net, opt, ckpt, step + 1)
                save_checkpoint(snap, os.path.join(out_dir, f"ckpt_{step + 1:07d}.idmc"))
                save_checkpoint(snap, os.path.join(out_dir, "last.idmc"))
                trace_file.flush()
    finally:
        if trace_file is not None:
            trace_file.close()

    return TrainResult(_snapshot(net, opt, ckpt, end), trace)


def _snapshot(net, opt, ckpt: DenoiserCheckpoint, step: int) -> DenoiserCheckpoint:
    opt_state, opt_step = _optimizer_state(opt, net)
    if not opt_state:
        opt_state, opt_step = dict(ckpt.optimizer_state), ckpt.optimizer_step
    return ckpt.replace(parameters=module_parameters(net), step_count=step,
                        optimizer_state=opt_state, optimizer_step=opt_step)


def _dump_state(out_dir, net, ckpt, step, trace) -> str | None:
    if not out_dir:
        return None
    path = os.path.join(out_dir, f"diverged_step{step}")
    os.makedirs(path, exist_ok=True)
    bad = [n for n, p in net.named_parameters() if not torch.isfinite(p).all()]
    with open(os.path.join(path, "diagnostic.json"), "w") as fh:
        json.dump({"step": step, "nonfinite_parameters": bad, "recent_trace": trace[-20:]}, fh, indent=2)
    save_checkpoint(ckpt, os.path.join(path, "last_good.idmc"))
    return path


def write_trace_csv(trace: Iterable[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "learning_rate", "wall_ms"])
        w.writeheader()
        for row in trace:
            w.writerow(row)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _predict_x0_eps(pred: Predictor, x_cond, x_t, gamma):
    out = np.asarray(pred.predict(x_cond, x_t, gamma), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite denoiser output during sampling")
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape((-1,) + (1,) * (np.ndim(x_t) - 1))
    if pred.prediction_target == "epsilon":
        eps_hat = out
        x0_hat = np.clip((x_t - np.sqrt(1.0 - g) * eps_hat) / np.sqrt(g), -1.0, 1.0)
    else:
        if np.any(g >= 1.0):
            raise NumericError("gamma = 1 makes the epsilon conversion divide by zero")
        x0_hat = np.clip(out, -1.0, 1.0)
        eps_hat = (x_t - np.sqrt(g) * x0_hat) / np.sqrt(1.0 - g)
    return x0_hat, eps_hat


def langevin_update(x_t, eps_hat, alpha: float, gamma: float, noise=None):
    """One reverse step: ``(x_t - (1-a)/sqrt(1-g) * eps_hat) / sqrt(a) [+ sqrt(1-a) * noise]``."""
    if gamma >= 1.0:
        raise NumericError("gamma = 1 leaves the reverse step undefined")
    x = (x_t - ((1.0 - alpha) / math.sqrt(1.0 - gamma)) * eps_hat) / math.sqrt(alpha)
    if noise is not None:
        x = x + math.sqrt(1.0 - alpha) * noise
    return x


def ddpm_step(model, state: DiffusionState, x_cond, alpha_eff: float, gamma_eff: float,
              rng: RngStream | np.random.Generator | None, add_noise: bool = True,
              t_next: int | None = None) -> DiffusionState:
    if not 0.0 < alpha_eff <= 1.0:
        raise ValueError(f"alpha_eff must lie in (0, 1], got {alpha_eff}")
    if gamma_eff >= 1.0:
        raise NumericError("gamma_eff = 1 leaves the epsilon estimate undefined")
    pred = as_predictor(model)
    _, eps_hat = _predict_x0_eps(pred, x_cond, state.x_t, gamma_eff)
    noise = None
    if add_noise:
        g = rng if isinstance(rng, np.random.Generator) else rng.generator()
        noise = g.standard_normal(np.shape(state.x_t))
    x_next = langevin_update(state.x_t, eps_hat, alpha_eff, gamma_eff, noise)
    return DiffusionState(t=state.t - 1 if t_next is None else t_next,
                          gamma=min(1.0, gamma_eff / alpha_eff), x_t=x_next)


@dataclass
class RestoreTrace:
    step_deltas: list[float]
    final_delta: float


def restore_batch(model, x_d: np.ndarray, plan: InferencePlan, rngs: Sequence[RngStream],
                  trace: list | None = None) -> np.ndarray:
    """Restore an NHWC batch of [0, 1] images; image ``i`` draws noise from ``rngs[i]`` only."""
    pred = as_predictor(model)
    x_d = np.asarray(x_d, dtype=np.float64)
    if x_d.ndim != 4 or len(rngs) != x_d.shape[0]:
        raise ShapeError("x_d must be NHWC with one rng per image")
    cond = to_model_range(x_d)
    gens = [r.generator() for r in rngs]
    x_t = np.stack([g.standard_normal(x_d.shape[1:]) for g in gens])
    K = plan.K
    deltas = np.zeros((K, x_d.shape[0]))
    for k in range(K - 1, -1, -1):
        gam = float(plan.effective_gammas[k])
        x0_hat, eps_hat = _predict_x0_eps(pred, cond, x_t, np.full(x_d.shape[0], gam))
        if k == 0:
            x_next = x0_hat
        else:
            noise = np.stack([g.standard_normal(x_d.shape[1:]) for g in gens])
            x_next = langevin_update(x_t, eps_hat, float(plan.effective_alphas[k]), gam, noise)
        deltas[K - 1 - k] = np.sqrt(np.mean((x_next - x_t) ** 2, axis=(1, 2, 3)))
        x_t = x_next
    if trace is not None:
        trace.extend(deltas.T.tolist())
    return from_model_range(x_t)


def restore(model, x_d: np.ndarray, plan: InferencePlan, rng: RngStream) -> np.ndarray:
    """Restore one HWC image in [0, 1]; the last step emits the clipped x0 estimate."""
    return restore_batch(model, np.asarray(x_d)[None], plan, [rng])[0]


def restore_many(model, images: np.ndarray, plan: InferencePlan, rngs: Sequence[RngStream],
                 batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(restore_batch(model, images[i:i + batch_size], plan, rngs[i:i + batch_size]))
    return np.concatenate(out) if out else np.empty((0,) + np.shape(images)[1:])
