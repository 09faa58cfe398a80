"""Episodic training with Adam and step-wise learning-rate decay.

An "epoch" is ``episodes_per_epoch`` consecutive episodes (default 100), so
with the defaults the learning rate is multiplied by 0.95 every 1000 episodes.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapter import AdapterParams
from .bank import SpeakerBank
from .embedcore import DEFAULT_TEMPERATURE, DomainError, ScoringConfig
from .episodes import EpisodeConfig, sample_episode
from .losses import TRAINABLE, LossConfig, loss_gradients
from .rng import numpy_rng, sub_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 16000
    lr0: float = 1e-3
    decay_factor: float = 0.95
    decay_every_epochs: int = 10
    episodes_per_epoch: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    temperature: float = DEFAULT_TEMPERATURE
    heads: int = 1
    dropout_rate: float = 0.5
    # None: sqrt(dim), matching unit-norm inputs to the layer-norm output scale
    backbone_scale: float = None
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    episode_cfg: EpisodeConfig = field(default_factory=EpisodeConfig)
    seed: int = 0

    def validate(self):
        if self.episodes < 0:
            raise DomainError("episodes must be >= 0")
        if not self.lr0 > 0:
            raise DomainError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise DomainError("decay_factor must lie in (0, 1]")
        if self.decay_every_epochs < 1 or self.episodes_per_epoch < 1:
            raise DomainError("decay period must be positive")
        self.episode_cfg.validate()

    def to_json(self):
        return asdict(self)


@dataclass
class TrainReport:
    loss_trace: list
    wall_seconds: float
    params_checksum: str
    config: dict

    def to_json(self):
        # "timing" is the only non-deterministic field of a report
        return {
            "config": self.config,
            "loss_trace": self.loss_trace,
            "params_checksum": self.params_checksum,
            "timing": {"wall_seconds": self.wall_seconds},
        }


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place, for every key of ``grads``.

    ``params`` maps names to float arrays (mutated); ``state`` is advanced.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DomainError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_at(cfg: TrainConfig, episode: int) -> float:
    period = cfg.decay_every_epochs * cfg.episodes_per_epoch
    return cfg.lr0 * cfg.decay_factor ** (episode // period)


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def train(bank: SpeakerBank, cfg: TrainConfig, progress_every=0):
    """Run ``cfg.episodes`` sample -> loss/grad -> Adam steps.

    Deterministic given ``cfg.seed``: episode ``e`` draws from
    ``numpy_rng(seed, "episode", e)`` and uses dropout seed
    ``sub_seed(seed, "mask", e)``.
    """
    cfg.validate()
    start = time.perf_counter()
    scale = np.sqrt(bank.dim) if cfg.backbone_scale is None else cfg.backbone_scale
    params = AdapterParams.init(
        bank.dim, cfg.heads, cfg.dropout_rate, rng=numpy_rng(cfg.seed, "init"),
        backbone_scale=float(scale),
    )
    score_cfg = ScoringConfig(cfg.temperature)
    trainable = TRAINABLE[cfg.loss_cfg.mode]
    arrays = params.arrays()
    state = AdamState()
    trace = []
    for e in range(cfg.episodes):
        try:
            ep = sample_episode(bank, cfg.episode_cfg, numpy_rng(cfg.seed, "episode", e))
        except DomainError as exc:
            raise DomainError(f"episode {e}: {exc}") from exc
        loss, grads = loss_gradients(
            ep, params, score_cfg, cfg.loss_cfg, mask_seed=sub_seed(cfg.seed, "mask", e)
        )
        grads = {name: grads[name] for name in trainable}
        clip_global_norm(grads, cfg.clip_norm)
        adam_step(arrays, grads, state, lr_at(cfg, e),
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for name in trainable:
            if not np.all(np.isfinite(arrays[name])):
                raise FloatingPointError(f"episode {e}: non-finite values in {name}")
        trace.append(loss)
        if progress_every and (e + 1) % progress_every == 0:
            recent = trace[-progress_every:]
            log.info("episode %d  mean loss %.4f", e + 1, sum(recent) / len(recent))
    params.train_config_echo = cfg.to_json()
    report = TrainReport(trace, time.perf_counter() - start, params.checksum(), cfg.to_json())
    return params, report


def save_report(report: TrainReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh)
        fh.write("\n")
