"""Weighted cross-entropy training of the heterogeneous transformer."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import NumericError, ParameterError, TrainingAborted
from .signal import SimulationSetup, derive_rng, generate_batch
from .transformer import HTConfig, HTParams, forward

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


def weighted_bce_loss(P: Tensor, labels, activity_ratio: float) -> Tensor:
    """Class-weighted binary cross-entropy, averaged over the batch.

    Per sample: ``(2/N) sum_n [(1-k) a_n (-log P_n) + k (1-a_n) (-log(1-P_n))]``
    with ``k`` the activity ratio, so rare active devices carry the large
    weight.  At ``k = 1/2`` this is exactly the mean binary cross-entropy.
    ``P`` is clamped to ``[1e-12, 1 - 1e-12]`` before the logs.
    """
    if not 0.0 <= activity_ratio <= 1.0:
        raise ParameterError(f"activity_ratio must lie in [0, 1], got {activity_ratio}")
    labels = np.asarray(labels, dtype=float)
    if P.ndim == 1:
        P = ad.reshape(P, (1, P.shape[0]))
        labels = labels.reshape(1, -1)
    if labels.shape != P.shape:
        raise ParameterError(f"labels shape {labels.shape} does not match probabilities {P.shape}")
    S, N = P.shape
    P = ad.clamp(P, PROB_CLAMP, 1.0 - PROB_CLAMP)
    w_active = Tensor((1.0 - activity_ratio) * labels)
    w_inactive = Tensor(activity_ratio * (1.0 - labels))
    per_entry = ad.add(ad.mul(w_active, ad.neg(ad.log(P))),
                       ad.mul(w_inactive, ad.neg(ad.log(ad.shift(ad.neg(P), 1.0)))))
    return ad.scale(ad.tsum(per_entry), 2.0 / (N * S))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list, state: AdamState, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update of every tensor that has a gradient."""
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ParameterError(f"gradient shape {p.grad.shape} != parameter shape {p.shape}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad**2
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    steps_per_epoch: int = 5000
    batch_size: int = 256
    lr: float = 1e-4
    decay_epochs: list = field(default_factory=lambda: [90, 97])
    decay_factor: float = 0.1
    scenario_mode: str = "batch"  # batch | sample | fixed
    fixed_dataset: int = 0  # >0: cycle over this many pre-drawn batches
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"TrainConfig.{name} must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ParameterError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if any(e > self.epochs or e < 1 for e in self.decay_epochs):
            raise ParameterError(f"decay epochs {self.decay_epochs} must lie in [1, {self.epochs}]")
        if self.scenario_mode not in ("batch", "sample", "fixed"):
            raise ParameterError(f"unknown scenario_mode '{self.scenario_mode}'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``: decays take effect after their epoch."""
        drops = sum(1 for e in self.decay_epochs if e < epoch)
        return self.lr * self.decay_factor**drops

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainResult:
    params: HTParams
    trace: list  # EpochRecord per epoch
    step_losses: list


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(derive_rng(seed, 21, epoch, step).integers(2**62))


def train(
    train_config: TrainConfig,
    model_config: HTConfig,
    setup: SimulationSetup,
    params: Optional[HTParams] = None,
    callback: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Mini-batch Adam on freshly simulated batches with step learning-rate decay.

    Each step draws ``batch_size`` samples from ``setup`` (new deployment per
    batch by default), runs the model with batch statistics, and applies one
    Adam update.  With ``fixed_dataset > 0`` the step seeds cycle over that
    many batches instead.
    """
    tc = train_config
    if params is None:
        params = HTParams.initialize(model_config, setup.pilot_len, seed=int(derive_rng(tc.seed, 20).integers(2**62)))
    plist = params.parameters()
    opt = AdamState(lr=tc.lr)
    trace, step_losses = [], []
    global_step = 0
    for epoch in range(1, tc.epochs + 1):
        lr = tc.lr_at(epoch)
        losses = []
        for step in range(tc.steps_per_epoch):
            if tc.fixed_dataset > 0:
                k = global_step % tc.fixed_dataset
                seed = step_seed(tc.seed, 0, k)
            else:
                seed = step_seed(tc.seed, epoch, step)
            global_step += 1
            batch, _ = generate_batch(setup, tc.batch_size, seed, scenario_mode=tc.scenario_mode)
            ad.zero_grad(plist)
            try:
                with Tape() as tape:
                    P = forward(batch.B, batch.C, params, mode="train")
                    loss = weighted_bce_loss(P, batch.labels, setup.activity_ratio)
                value = loss.item()
            except NumericError as exc:
                raise TrainingAborted(f"numeric failure at epoch {epoch}, step {step} (seed {seed}): {exc}",
                                      epoch=epoch, step=step, step_seed=seed) from exc
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value} at epoch {epoch}, step {step} (seed {seed})",
                                      epoch=epoch, step=step, step_seed=seed)
            tape.backward(loss)
            adam_step(plist, opt, lr)
            losses.append(value)
        step_losses.extend(losses)
        record = EpochRecord(epoch, float(np.mean(losses)), lr)
        trace.append(record)
        logger.info("epoch %d  loss %.6f  lr %.3g", epoch, record.mean_loss, lr)
        if callback is not None:
            callback(record)
    return TrainResult(params=params, trace=trace, step_losses=step_losses)
