"""Adam optimizer, the alternating adversarial training loop, warmup
phases and generator/discriminator balancing diagnostics.

Each training iteration processes one batch: the generator inpaints masked
images, the discriminator scores real vs generated patches, then the
discriminator updates on its binary cross-entropy and the generator on the
joint loss (pure L2 during warmup). Phase selection is per epoch: the first
`epochs_g_l2_only` epochs train only the generator with L2, the next
`epochs_d_only` train only the discriminator, the remainder train both.
`freeze_g_every=k` additionally skips the generator update on every k-th
iteration (likewise freeze_d_every). A frozen network is driven without any
state side effects, so its weights and running statistics stay bit-equal
across frozen iterations.

Trace semantics per record: l2/bce_d/minimax/score_* come from the scoring
pass at the top of the iteration (before any update); adv_g is the loss the
generator actually descends, recomputed against the just-updated
discriminator during joint training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import loss as L
from .models import Discriminator, Generator
from .tensor import DTYPES, ContractError, Rng, Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    """Per-parameter Adam moments; defaults follow the training setup
    (lr 0.0002, betas 0.5/0.999)."""

    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, named_params: dict, lr=0.0002, beta1=0.5, beta2=0.999,
                   epsilon=1e-8) -> "AdamState":
        s = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in named_params.items():
            s.m[name] = np.zeros_like(p.array)
            s.v[name] = np.zeros_like(p.array)
        return s

    def to_arrays(self, prefix: str) -> dict:
        out = {}
        for name in self.m:
            out[f"{prefix}.{name}.m"] = self.m[name]
            out[f"{prefix}.{name}.v"] = self.v[name]
        return out

    def load_arrays(self, prefix: str, arrays: dict) -> None:
        for name in self.m:
            self.m[name][...] = arrays[f"{prefix}.{name}.m"]
            self.v[name][...] = arrays[f"{prefix}.{name}.v"]


def adam_step(params: dict, grads: dict, s: AdamState) -> dict:
    """One Adam update, in place; raises on any non-finite gradient."""
    for name in params:
        g = grads[name]
        ga = g.array if isinstance(g, Tensor) else g
        if not np.all(np.isfinite(ga)):
            raise TrainingError(f"non-finite gradient for {name!r}")
    s.t += 1
    c1 = 1.0 - s.beta1 ** s.t
    c2 = 1.0 - s.beta2 ** s.t
    for name, p in params.items():
        g = grads[name]
        ga = g.array if isinstance(g, Tensor) else g
        m = s.m[name]
        v = s.v[name]
        m *= s.beta1
        m += (1.0 - s.beta1) * ga
        v *= s.beta2
        v += (1.0 - s.beta2) * ga * ga
        mhat = m / c1
        vhat = v / c2
        p.array -= (s.lr * mhat / (np.sqrt(vhat) + s.epsilon)).astype(
            p.array.dtype, copy=False)
    return params


@dataclass
class TrainSchedule:
    epochs_g_l2_only: int = 2
    epochs_d_only: int = 4
    total_epochs: int = 90
    freeze_g_every: int = 0
    freeze_d_every: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs_g_l2_only < 0 or self.epochs_d_only < 0:
            raise ContractError("phase lengths must be non-negative")
        if self.epochs_g_l2_only + self.epochs_d_only > self.total_epochs:
            raise ContractError("warmup phases exceed total epochs")
        if self.freeze_g_every < 0 or self.freeze_d_every < 0:
            raise ContractError("freeze periods must be >= 0")
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2 (batchnorm)")

    def phase(self, epoch: int) -> str:
        if epoch < self.epochs_g_l2_only:
            return "g-l2-only"
        if epoch < self.epochs_g_l2_only + self.epochs_d_only:
            return "d-only"
        return "joint"


@dataclass
class TraceRecord:
    epoch: int
    iteration: int
    l2: float
    adv_g: float
    bce_d: float
    minimax: float
    score_real: float
    score_fake: float


@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    records: list = field(default_factory=list)


TRACE_COLUMNS = ["epoch", "iter", "l2", "adv_g", "bce_d", "minimax",
                 "score_real", "score_fake"]


def write_trace(path, records: list, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        wr = csv.writer(f)
        if not append:
            wr.writerow(TRACE_COLUMNS)
        for r in records:
            wr.writerow([r.epoch, r.iteration, repr(r.l2), repr(r.adv_g),
                         repr(r.bce_d), repr(r.minimax), repr(r.score_real),
                         repr(r.score_fake)])


def read_trace(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != TRACE_COLUMNS:
        raise ContractError(f"{path}: bad trace header")
    return [TraceRecord(int(r[0]), int(r[1]), *(float(v) for v in r[2:]))
            for r in rows[1:]]


@dataclass
class BalanceReport:
    window: int
    minimax_mean: float
    score_real_mean: float
    score_fake_mean: float
    classification: str


def balance_report(state: TrainState, window: int,
                   tolerance: float = 0.2) -> BalanceReport:
    """Windowed balance diagnostic over the most recent trace records.

    A mini-max value near 0 means the discriminator separates real from
    fake well (d-dominant); a value well below -log 4 means it is being
    fooled (g-dominant); within `tolerance` of -log 4 the two are balanced.
    """
    if window < 1 or window > len(state.records):
        raise ContractError(
            f"window {window} invalid for trace of length {len(state.records)}")
    recent = state.records[-window:]
    v = sum(r.minimax for r in recent) / window
    sr = sum(r.score_real for r in recent) / window
    sf = sum(r.score_fake for r in recent) / window
    log4 = math.log(4.0)
    if abs(v + log4) <= tolerance:
        cls = "balanced"
    elif v > -log4 + tolerance:
        cls = "d-dominant"
    else:
        cls = "g-dominant"
    return BalanceReport(window=window, minimax_mean=v, score_real_mean=sr,
                         score_fake_mean=sf, classification=cls)


class Trainer:
    """Drives alternating adversarial training of one generator/discriminator
    pair over a patch array; owns the optimizer and RNG state."""

    def __init__(self, generator: Generator, discriminator: Discriminator,
                 schedule: TrainSchedule, weights: L.LossWeights,
                 mask: L.MaskSpec, rng: Rng, lr: float = 0.0002,
                 beta1: float = 0.5, beta2: float = 0.999,
                 epsilon: float = 1e-8, fill: float = 0.0,
                 l2_reduction: str = "mean"):
        self.gen = generator
        self.disc = discriminator
        self.schedule = schedule
        self.weights = weights
        self.mask = mask
        self.rng = rng
        self.fill = fill
        self.l2_reduction = l2_reduction
        self.adam_g = AdamState.for_params(generator.named_params(), lr,
                                           beta1, beta2, epsilon)
        self.adam_d = AdamState.for_params(discriminator.named_params(), lr,
                                           beta1, beta2, epsilon)
        self.state = TrainState()

    def _dtype(self):
        return DTYPES[self.gen.cfg.dtype]

    def _frozen(self, every: int) -> bool:
        return every > 0 and (self.state.iteration + 1) % every == 0

    def _check_finite(self, **losses):
        for name, value in losses.items():
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {name}={value} at "
                                    f"iteration {self.state.iteration}")

    def _iteration(self, batch: np.ndarray) -> TraceRecord:
        phase = self.schedule.phase(self.state.epoch)
        g_trains = phase in ("g-l2-only", "joint") and not self._frozen(
            self.schedule.freeze_g_every)
        d_trains = phase in ("d-only", "joint") and not self._frozen(
            self.schedule.freeze_d_every)

        ctx, tgt, _ = D.mask_batch(batch, self.fill)
        ctx_t = Tensor(ctx)
        tgt_t = Tensor(tgt)

        fake, g_caches = self.gen.forward(ctx_t, train=g_trains,
                                          update_running=g_trains)
        l2 = L.weighted_l2(tgt_t, fake, self.mask, self.l2_reduction)

        s_real, cache_r = self.disc.forward(tgt_t, train=d_trains,
                                            update_running=d_trains)
        s_fake, cache_f = self.disc.forward(fake, train=d_trains,
                                            update_running=d_trains)
        bce = L.adv_loss_discriminator(s_real, s_fake)
        mm = L.minimax_value(s_real, s_fake)
        adv = L.adv_loss_generator(s_fake)
        self._check_finite(l2=l2, bce_d=bce, minimax=mm, adv_g=adv)

        if d_trains:
            gr, gf = L.adv_loss_discriminator_backward(s_real, s_fake)
            grads_r, _ = self.disc.backward(cache_r, gr, train=True)
            grads_f, _ = self.disc.backward(cache_f, gf, train=True)
            total = {k: Tensor(grads_r[k].array + grads_f[k].array)
                     for k in grads_r}
            adam_step(self.disc.named_params(), total, self.adam_d)

        if g_trains:
            grad_fake = L.weighted_l2_backward(tgt_t, fake, self.mask,
                                               self.l2_reduction)
            grad_fake_arr = self.weights.lambda_l2 * grad_fake.array
            if phase == "joint":
                # fresh pass against the updated discriminator, side-effect free
                s_fake2, cache_f2 = self.disc.forward(fake, train=True,
                                                      update_running=False)
                adv = L.adv_loss_generator(s_fake2)
                self._check_finite(adv_g=adv)
                dscores = L.adv_loss_generator_backward(s_fake2)
                _, grad_patch = self.disc.backward(cache_f2, dscores, train=True)
                grad_fake_arr = grad_fake_arr \
                    + self.weights.lambda_adv * grad_patch.array
            elif phase == "g-l2-only":
                grad_fake_arr = grad_fake.array  # pure L2, unweighted
            g_grads, _ = self.gen.backward(g_caches, Tensor(grad_fake_arr),
                                           train=True)
            adam_step(self.gen.named_params(), g_grads, self.adam_g)

        rec = TraceRecord(epoch=self.state.epoch,
                          iteration=self.state.iteration, l2=l2, adv_g=adv,
                          bce_d=bce, minimax=mm,
                          score_real=float(s_real.array.mean()),
                          score_fake=float(s_fake.array.mean()))
        self.state.records.append(rec)
        self.state.iteration += 1
        return rec

    def train_epoch(self, patches: np.ndarray) -> TrainState:
        """One pass over the patch array in a seeded random order; batches
        smaller than the configured size are dropped."""
        if patches.shape[0] < self.schedule.batch_size:
            raise ContractError(
                f"dataset of {patches.shape[0]} patches is smaller than one "
                f"batch ({self.schedule.batch_size})")
        dt = self._dtype()
        order = self.rng.permutation(patches.shape[0])
        bs = self.schedule.batch_size
        for start in range(0, patches.shape[0] - bs + 1, bs):
            batch = patches[order[start:start + bs]].astype(dt, copy=False)
            self._iteration(np.ascontiguousarray(batch))
        self.state.epoch += 1
        return self.state

    def validation_l2(self, patches: np.ndarray, batch_size: int = 64) -> float:
        """Masked weighted L2 over a held-out set, eval mode, no side effects."""
        dt = self._dtype()
        total = 0.0
        count = 0
        for start in range(0, patches.shape[0], batch_size):
            batch = np.ascontiguousarray(
                patches[start:start + batch_size].astype(dt, copy=False))
            ctx, tgt, _ = D.mask_batch(batch, self.fill)
            fake, _ = self.gen.forward(Tensor(ctx), train=False)
            n = batch.shape[0]
            total += L.weighted_l2(Tensor(tgt), fake, self.mask,
                                   self.l2_reduction) * n
            count += n
        if count == 0:
            raise ContractError("validation set is empty")
        return total / count

    def counters(self) -> dict:
        """Checkpoint counters: training position, RNG and Adam scalars."""
        return {
            "epoch": self.state.epoch,
            "iteration": self.state.iteration,
            "rng_state": self.rng.get_state(),
            "adam_g": {"t": self.adam_g.t, "lr": self.adam_g.lr,
                       "beta1": self.adam_g.beta1, "beta2": self.adam_g.beta2,
                       "epsilon": self.adam_g.epsilon},
            "adam_d": {"t": self.adam_d.t, "lr": self.adam_d.lr,
                       "beta1": self.adam_d.beta1, "beta2": self.adam_d.beta2,
                       "epsilon": self.adam_d.epsilon},
        }

    def optimizer_arrays(self) -> dict:
        return {**self.adam_g.to_arrays("opt_g"),
                **self.adam_d.to_arrays("opt_d")}

    def restore(self, counters: dict, arrays: dict) -> None:
        """Adopt checkpointed counters + optimizer moments for exact resume."""
        self.state.epoch = counters["epoch"]
        self.state.iteration = counters["iteration"]
        self.rng.set_state(counters["rng_state"])
        for adam, key, prefix in ((self.adam_g, "adam_g", "opt_g"),
                                  (self.adam_d, "adam_d", "opt_d")):
            adam.t = counters[key]["t"]
            adam.lr = counters[key]["lr"]
            adam.beta1 = counters[key]["beta1"]
            adam.beta2 = counters[key]["beta2"]
            adam.epsilon = counters[key]["epsilon"]
            adam.load_arrays(prefix, arrays)
