"""Rectified-flow training and ODE sampling.

Training pairs a standard-normal noise map X_0 with the ground-truth mask
X_1 along the straight-line interpolant X_t = t*X_1 + (1-t)*X_0. The network
predicts the mask directly (x-prediction); the Task Loss of Eq-style
half-BCE/half-IoU weighting is applied against the ground truth, and the
velocity needed for multi-step Euler sampling is derived from the prediction
as v = (X_hat - X_tau) / (1 - tau). Masks live in [0, 1] flow space, so no
rescaling happens anywhere.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .imaging import ImagingParams, Scene
from .net import Network
from .optim import AdamWState, adamw_step
from .priors import DEFAULT_STAGE_MAP, compute_priors, stage_inputs
from .rng import RngState
from .validation import check_binary, check_finite


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Straight-line interpolant; exact (bitwise) at the endpoints."""
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: dims {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"interpolation time must lie in [0, 1], got {t}")
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return x1.copy()
    return t * x1 + (1.0 - t) * x0


@dataclass
class LossTerms:
    total: ad.Tensor
    bce: ad.Tensor
    iou: ad.Tensor


BCE_CLAMP = 1e-7
IOU_EPS = 1.0


def task_loss(logits: ad.Tensor, G: np.ndarray) -> LossTerms:
    """Equal-weight BCE + IoU loss against a binary target, on the graph.

    BCE clamps probabilities to [1e-7, 1 - 1e-7]; the IoU term uses the raw
    probabilities with an epsilon of 1 in numerator and denominator. The IoU
    is computed jointly over whatever batch the logits carry.
    """
    check_finite(logits.data, "logits")
    G = np.asarray(G, dtype=np.float64)
    if G.shape != logits.data.shape:
        raise ShapeError(f"task_loss: target dims {G.shape} vs logits dims {logits.data.shape}")
    check_binary(G, "mask")

    p = ad.sigmoid(logits)
    pc = ad.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = ad.constant(G)
    g_inv = ad.constant(1.0 - G)
    bce = ad.neg(ad.mean_all(ad.add(ad.mul(g, ad.log(pc)),
                                    ad.mul(g_inv, ad.log(ad.add_scalar(ad.neg(pc), 1.0))))))
    inter = ad.sum_all(ad.mul(p, g))
    union = ad.add_scalar(ad.sub(ad.sum_all(p), inter), float(G.sum()))
    iou = ad.add_scalar(ad.neg(ad.div(ad.add_scalar(inter, IOU_EPS), ad.add_scalar(union, IOU_EPS))), 1.0)
    total = ad.add(ad.mul_scalar(bce, 0.5), ad.mul_scalar(iou, 0.5))
    return LossTerms(total=total, bce=bce, iou=iou)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainItem:
    """One training scene with its precomputed stage input groups."""

    I: np.ndarray                 # (3, H, W)
    G: np.ndarray                 # (H, W) in {0, 1}
    groups: list[np.ndarray]      # four stage input arrays at full resolution


def prepare_item(scene: Scene, params: ImagingParams | None = None, bins: int = 8,
                 stage_map=DEFAULT_STAGE_MAP) -> TrainItem:
    stack = compute_priors(scene.I, scene.z, params=params, bins=bins)
    return TrainItem(I=scene.I, G=scene.G, groups=stage_inputs(stack, stage_map))


@dataclass
class FlowSample:
    """One interpolant draw, mostly useful for inspection and tests."""

    X_0: np.ndarray
    X_1: np.ndarray
    t: float
    X_t: np.ndarray
    I: np.ndarray
    priors: list[np.ndarray] | None


def make_flow_sample(item: TrainItem, rng: RngState, t: float) -> FlowSample:
    noise = rng.generator().standard_normal((1, *item.G.shape))
    x1 = item.G[None].astype(np.float64)
    return FlowSample(X_0=noise, X_1=x1, t=t, X_t=interpolate(noise, x1, t), I=item.I, priors=item.groups)


@dataclass
class TrainConfig:
    lr: float = 2.5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    micro_batch: int = 2
    accum_steps: int = 4
    prior_dropout: float = 0.5

    def __post_init__(self):
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("micro_batch and accum_steps must be positive")
        if not 0.0 <= self.prior_dropout <= 1.0:
            raise ConfigError(f"prior_dropout must lie in [0, 1], got {self.prior_dropout}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")


class Trainer:
    """Owns the network, optimizer state, and the deterministic draw schedule.

    Every random decision is a pure function of (seed, step, micro index), so
    restarting from a checkpoint at step k reproduces the exact trajectory a
    single uninterrupted run would have taken.
    """

    def __init__(self, network: Network, items: list[TrainItem], rng: RngState,
                 config: TrainConfig | None = None, log_path=None):
        if not items:
            raise ContractError("trainer needs at least one training item")
        hw = items[0].G.shape
        for it in items:
            if it.G.shape != hw or it.I.shape != (3, *hw):
                raise ShapeError("all training items must share spatial dims")
        self.net = network
        self.items = items
        self.rng = rng
        self.config = config or TrainConfig()
        self.adam = AdamWState()
        self.step_index = 0
        self.log_path = log_path
        per_step = self.config.micro_batch * self.config.accum_steps
        self.steps_per_epoch = len(items) // per_step
        if self.steps_per_epoch == 0:
            raise ConfigError(
                f"{len(items)} items cannot fill one optimizer step of {per_step} samples; "
                "reduce micro_batch or accum_steps"
            )

    # -- deterministic schedule ---------------------------------------------

    def _step_indices(self, step: int) -> np.ndarray:
        """Dataset indices consumed by optimizer step `step` (drop-last order)."""
        epoch = step // self.steps_per_epoch
        slot = step % self.steps_per_epoch
        perm = self.rng.stream(rngmod.SHUFFLE, epoch % (1 << 28)).generator().permutation(len(self.items))
        per_step = self.config.micro_batch * self.config.accum_steps
        return perm[slot * per_step : (slot + 1) * per_step]

    def _micro_forward(self, step: int, micro: int, indices: np.ndarray):
        cfg = self.config
        batch = [self.items[i] for i in indices]
        I = np.stack([b.I for b in batch])
        G = np.stack([b.G for b in batch])[:, None]
        x1 = G.astype(np.float64)
        t = float(self.rng.stream(rngmod.TIME, step, micro).generator().uniform())
        noise = self.rng.stream(rngmod.NOISE, step, micro).generator().standard_normal(x1.shape)
        x_t = interpolate(noise, x1, t)
        drop = bool(self.rng.stream(rngmod.DROPOUT, step, micro).generator().uniform() < cfg.prior_dropout)
        staged = None
        if not drop:
            grouped = [ad.constant(np.stack([b.groups[k] for b in batch])) for k in range(4)]
            staged = self.net.encoder.encode(grouped)
        logits, _ = self.net.forward(I, x_t, t, staged)
        if not np.all(np.isfinite(logits.data)):
            return None  # diverged forward: the step aborts instead of raising
        return task_loss(logits, x1)

    # -- optimizer steps ----------------------------------------------------

    def train_step(self) -> dict:
        """One optimizer step: accum_steps forward/backward passes, then AdamW."""
        cfg = self.config
        step = self.step_index
        t0 = time.perf_counter()
        indices = self._step_indices(step)
        self.net.store.zero_grads()
        totals, bces, ious = [], [], []
        for micro in range(cfg.accum_steps):
            sel = indices[micro * cfg.micro_batch : (micro + 1) * cfg.micro_batch]
            loss = self._micro_forward(step, micro, sel)
            total = float(loss.total.data) if loss is not None else float("nan")
            if not np.isfinite(total):
                self.net.store.zero_grads()
                record = {
                    "step": step,
                    "aborted": True,
                    "micro": micro,
                    "data_indices": [int(i) for i in indices],
                    "noise_stream": [step, micro],
                }
                self._log(record)
                self.step_index += 1
                return record
            ad.backward(ad.mul_scalar(loss.total, 1.0 / cfg.accum_steps))
            totals.append(total)
            bces.append(float(loss.bce.data))
            ious.append(float(loss.iou.data))
        adamw_step(self.net.store, self.adam, cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.step_index += 1
        record = {
            "step": step,
            "loss_total": float(np.mean(totals)),
            "loss_bce": float(np.mean(bces)),
            "loss_iou": float(np.mean(ious)),
            "lr": cfg.lr,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        self._log(record)
        return record

    def run(self, n_steps: int) -> list[dict]:
        return [self.train_step() for _ in range(n_steps)]

    def _log(self, record: dict) -> None:
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- checkpointing ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.net.store.state_arrays())
        self.adam.ensure(self.net.store)
        for name, m in self.adam.m.items():
            arrays[f"opt.m.{name}"] = m
        for name, v in self.adam.v.items():
            arrays[f"opt.v.{name}"] = v
        arrays["opt.step"] = np.array([float(self.adam.step)])
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
        self.net.store.load_arrays(params)
        self.adam = AdamWState()
        self.adam.ensure(self.net.store)
        for name in self.net.store.names():
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise ContractError(f"checkpoint is missing optimizer moments for {name!r}")
            self.adam.m[name] = arrays[mk].copy()
            self.adam.v[name] = arrays[vk].copy()
        self.adam.step = int(arrays["opt.step"][0])
        self.step_index = int(step)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    steps: int = 1
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"sampler needs at least one step, got {self.steps}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"mask threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class SampleResult:
    prob: np.ndarray  # (1, H, W) final sigmoid(logits)
    mask: np.ndarray  # (1, H, W) in {0, 1}
    x_path: list[np.ndarray] = field(default_factory=list)  # X after each Euler step


def sample(network: Network, I: np.ndarray, config: SamplerConfig, index: int = 0) -> SampleResult:
    """Euler-integrate the learned flow from seeded noise; priors stay absent.

    With steps = 1 the update collapses to returning the network's direct
    mask prediction at t = 0, bypassing the velocity formula entirely.
    """
    I = np.asarray(I, dtype=np.float64)
    if I.ndim != 3 or I.shape[0] != 3:
        raise ShapeError(f"sample expects one (3, H, W) image, got {I.shape}")
    h, w = I.shape[1:]
    x = RngState(config.seed).stream(rngmod.SAMPLE, index).generator().standard_normal((1, 1, h, w))
    dt = 1.0 / config.steps
    prob = None
    path = []
    for k in range(config.steps):
        tau = k * dt
        logits, _ = network.forward(I[None], x, tau, None)
        prob = ad.sigmoid_values(logits.data)
        if config.steps == 1:
            x = prob
        else:
            v = (prob - x) / max(1.0 - tau, dt / 2.0)
            x = x + dt * v
        path.append(x[0, 0].copy())
    mask = (prob[0] >= config.threshold).astype(np.float64)
    return SampleResult(prob=prob[0], mask=mask, x_path=path)
