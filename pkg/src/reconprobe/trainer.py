"""Masked-LM training with Adam on length-bucketed batches (no padding)."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError, TrainingError
from .model import WeightSet, mlm_loss_and_grads
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID

log = logging.getLogger(__name__)

SPECIAL_IDS = frozenset((PAD_ID, MASK_ID, CLS_ID, SEP_ID))
FIRST_ORDINARY_ID = 5


@dataclass(frozen=True)
class TrainConfig:
    mask_rate: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"  # or "linear": decay to 0 over ``steps``
    seed: int = 0

    def __post_init__(self):
        if abs(self.mask_frac + self.random_frac + self.keep_frac - 1.0) > 1e-12:
            raise ConfigError("mask/random/keep fractions must sum to 1")
        if min(self.mask_frac, self.random_frac, self.keep_frac) < 0:
            raise ConfigError("mask/random/keep fractions must be nonnegative")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("mask_rate must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def make_mlm_batch(sentences, vocab_size, config: TrainConfig, rng):
    """Standard MLM corruption of each id sequence.

    Each non-special position is selected with probability ``mask_rate``;
    selected positions become [MASK], a random ordinary token, or stay
    unchanged in the configured proportions. Returns per-sentence
    (inputs, targets, loss flags); empty sentences are skipped.
    """
    inputs, targets, flags = [], [], []
    for ids in sentences:
        ids = np.asarray(ids, dtype=np.int64)
        eligible = ~np.isin(ids, list(SPECIAL_IDS))
        if not eligible.any():
            continue
        u = rng.random(ids.shape)
        action = rng.random(ids.shape)
        selected = eligible & (u < config.mask_rate)
        corrupted = ids.copy()
        to_mask = selected & (action < config.mask_frac)
        to_random = selected & (action >= config.mask_frac) & (action < config.mask_frac + config.random_frac)
        corrupted[to_mask] = MASK_ID
        corrupted[to_random] = rng.integers(FIRST_ORDINARY_ID, vocab_size, size=int(to_random.sum()))
        inputs.append(corrupted)
        targets.append(np.where(selected, ids, 0))
        flags.append(selected)
    return inputs, targets, flags


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(weights: WeightSet, sentences, config: TrainConfig, progress_every: int = 0):
    """Train a copy of ``weights``. Returns (trained WeightSet, per-step loss list).

    Sentences are bucketed by length; each step draws one bucket (weighted
    by size) and ``batch_size`` sentences from it with replacement.
    """
    weights = weights.copy()
    max_len = weights.config.max_positions
    buckets = defaultdict(list)
    for ids in sentences:
        ids = tuple(ids)
        if 0 < len(ids) <= max_len:
            buckets[len(ids)].append(ids)
    if not buckets:
        raise ConfigError("no trainable sentences (empty or longer than max_positions)")
    lengths = sorted(buckets)
    arrays = {n: np.array(buckets[n], dtype=np.int64) for n in lengths}
    sizes = np.array([len(buckets[n]) for n in lengths], dtype=np.float64)
    bucket_p = sizes / sizes.sum()

    rng = np.random.default_rng(config.seed)
    opt = Adam(weights, config.lr, config.beta1, config.beta2, config.adam_eps)
    trace = []
    for step in range(config.steps):
        n = lengths[int(rng.choice(len(lengths), p=bucket_p))]
        pick = rng.integers(0, len(arrays[n]), size=config.batch_size)
        inputs, targets, flags = make_mlm_batch(arrays[n][pick], weights.config.vocab_size, config, rng)
        weights.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = mlm_loss_and_grads(weights, np.stack(inputs), np.stack(targets), np.stack(flags))
        except InvalidInputError:
            loss = float("nan")  # activations overflowed
        if not np.isfinite(loss):
            raise TrainingError("non-finite loss", step)
        if config.lr_schedule == "linear":
            opt.lr = config.lr * (1.0 - step / config.steps)
        opt.step()
        trace.append(loss)
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(trace[-progress_every:])))
    weights.zero_grad()
    return weights, trace


def write_loss_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, format(loss, ".17g")])
