"""Alternating minibatch SGD.

Every iteration samples a minibatch, takes one step on the encoder alone
against the soft normalized-cut loss, then one step on encoder and decoder
together against the reconstruction loss.  Both losses are averaged over
the minibatch; the reconstruction loss is the per-element mean squared error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..affinity import AffinityParams, SparseAffinity, build_affinity
from ..ncut import soft_ncut_with_grad
from ..tensor import make_rng
from .network import (
    NetworkParams,
    backward_decode,
    backward_encode,
    forward_decode,
    forward_encode,
)

TRACE_HEADER = ("iter", "j_reconstr", "j_softncut", "lr")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr_initial: float = 0.003
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.1
    max_iters: int = 2000
    seed: int = 0
    use_ncut: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_iters < 0 or self.lr_decay_every < 1:
            raise ValueError(f"invalid training schedule {self}")
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Batches of 10, lr 0.003 divided by ten every 1000 iterations, 50k iterations."""
        base = dict(batch_size=10, lr_initial=0.003, lr_decay_every=1000,
                    lr_decay_factor=0.1, max_iters=50_000)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, iteration: int) -> float:
        return self.lr_initial * self.lr_decay_factor ** (iteration // self.lr_decay_every)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainState:
    """Where a run stands: next iteration index and the sampling/dropout stream."""

    iteration: int
    rng: np.random.Generator
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, tc: TrainConfig) -> "TrainState":
        return cls(0, make_rng(tc.seed))


def sgd_step(net: NetworkParams, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        p = net.params[name]
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)


def ncut_step(net, batch, affinities, lr, rng):
    """Update the encoder only; returns the batch-mean soft normalized cut."""
    p, cache = forward_encode(net, batch, training=True, rng=rng)
    p64 = p.astype(np.float64)
    n = len(batch)
    dp = np.empty_like(p64)
    total = 0.0
    for i, W in enumerate(affinities):
        loss, grad = soft_ncut_with_grad(p64[i], W)
        total += loss
        dp[i] = grad / n
    sgd_step(net, backward_encode(net, dp, cache), lr)
    return total / n


def reconstruction_step(net, batch, lr, rng):
    """Update encoder and decoder; returns the batch-mean squared error."""
    p, enc_cache = forward_encode(net, batch, training=True, rng=rng)
    recon, dec_cache = forward_decode(net, p, training=True, rng=rng)
    diff = recon.astype(np.float64) - batch
    mse = float(np.mean(diff * diff))
    drecon = 2.0 * diff / diff.size
    dp, grads = backward_decode(net, drecon, dec_cache)
    grads.update(backward_encode(net, dp, enc_cache))
    sgd_step(net, grads, lr)
    return mse


def train(
    net: NetworkParams,
    images: Sequence[np.ndarray],
    tc: TrainConfig,
    affinity: Callable[[np.ndarray], SparseAffinity] | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
    on_iteration: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run the alternating schedule in place on ``net``.

    ``affinity`` builds the weight matrix of one image (default: the standard
    parameters).  Training resumes from ``state`` when given and stops before
    iteration ``stop_at`` (default ``tc.max_iters``).
    """
    if len(images) == 0:
        raise ValueError("training needs at least one image")
    affinity = affinity or (lambda img: build_affinity(img, AffinityParams()))
    data = np.stack([np.asarray(img, dtype=np.float64) for img in images])
    weights = [affinity(img) for img in data] if tc.use_ncut else None
    state = state or TrainState.fresh(tc)
    stop = tc.max_iters if stop_at is None else min(stop_at, tc.max_iters)
    n = len(data)
    while state.iteration < stop:
        it = state.iteration
        lr = tc.lr_at(it)
        if n >= tc.batch_size:
            idx = state.rng.choice(n, size=tc.batch_size, replace=False)
        else:
            idx = state.rng.integers(0, n, size=tc.batch_size)
        batch = data[idx]
        batch_w = [weights[i] for i in idx] if weights is not None else None
        j_ncut = float("nan")
        if batch_w is not None:
            j_ncut = ncut_step(net, batch, batch_w, lr, state.rng)
            if not math.isfinite(j_ncut):
                raise TrainingDiverged(it, "soft-Ncut loss")
        mse = reconstruction_step(net, batch, lr, state.rng)
        if not math.isfinite(mse):
            raise TrainingDiverged(it, "reconstruction loss")
        state.trace.append((it, mse, j_ncut, lr))
        state.iteration += 1
        if on_iteration is not None:
            on_iteration(state)
    return state


def write_trace(trace, path, append=False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(TRACE_HEADER)
        for it, rec, nc, lr in trace:
            w.writerow([it, f"{rec:.10g}", f"{nc:.10g}", f"{lr:.10g}"])


def read_trace(path) -> list[tuple[int, float, float, float]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_HEADER:
        raise ValueError(f"{path} is not a loss trace")
    return [(int(a), float(b), float(c), float(d)) for a, b, c, d in rows[1:]]
