"""Training objectives: margin-weighted masked L2, the generator and
discriminator adversarial losses, the joint combination, and the mini-max
game value used as a balance diagnostic.

The L2 term is a weighted mean over patch pixels (averaged over the batch),
so the default lambda weights keep their meaning across patch sizes; a
"sum" reduction is available for the literal squared-norm reading. Scores
fed to the log-based losses must lie in [0, 1]; logs are clamped at 1e-12
so a saturated discriminator cannot produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor

LOG_CLAMP = 1e-12


@dataclass
class MaskSpec:
    """Weight map over the reconstructed patch: a margin_width-wide inner
    border counts margin_weight times, everything else counts once."""

    patch_size: int
    margin_width: int = 4
    margin_weight: float = 10.0

    def __post_init__(self):
        if self.margin_width < 0 or 2 * self.margin_width > self.patch_size:
            raise ContractError(
                f"margin width {self.margin_width} does not fit patch "
                f"size {self.patch_size}")

    def weight_map(self, dtype=np.float64) -> Tensor:
        p, m, w = self.patch_size, self.margin_width, self.margin_weight
        wm = np.full((p, p), w, dtype=dtype)
        if m < p - m:
            wm[m:p - m, m:p - m] = 1.0
        return Tensor(wm)


@dataclass
class LossWeights:
    lambda_l2: float = 0.998
    lambda_adv: float = 0.002

    def __post_init__(self):
        if self.lambda_l2 < 0 or self.lambda_adv < 0:
            raise ContractError("loss weights must be non-negative")


def _check_patch_pair(real: Tensor, fake: Tensor) -> None:
    if real.shape != fake.shape:
        raise ContractError(f"patch shape mismatch: {real.shape} vs {fake.shape}")
    if real.ndim != 4 or real.shape[1] != 1 or real.shape[2] != real.shape[3]:
        raise ContractError(f"patches must be (N, 1, P, P), got {real.shape}")


def weighted_l2(real: Tensor, fake: Tensor, m: MaskSpec,
                reduction: str = "mean") -> float:
    """Margin-weighted squared difference between real and generated patches."""
    _check_patch_pair(real, fake)
    if real.shape[2] != m.patch_size:
        raise ContractError(
            f"patch size {real.shape[2]} != mask spec {m.patch_size}")
    wm = m.weight_map(real.dtype).array
    sq = wm[None, None] * (real.array - fake.array) ** 2
    if reduction == "mean":
        return float(sq.sum() / (real.shape[0] * m.patch_size ** 2))
    if reduction == "sum":
        return float(sq.sum())
    raise ContractError(f"unknown reduction {reduction!r}")


def weighted_l2_backward(real: Tensor, fake: Tensor, m: MaskSpec,
                         reduction: str = "mean") -> Tensor:
    """d(weighted_l2)/d(fake)."""
    _check_patch_pair(real, fake)
    wm = m.weight_map(real.dtype).array
    g = 2.0 * wm[None, None] * (fake.array - real.array)
    if reduction == "mean":
        g /= real.shape[0] * m.patch_size ** 2
    elif reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return Tensor(g)


def _check_scores(scores: Tensor, name: str) -> np.ndarray:
    s = scores.array.reshape(-1)
    if s.size == 0:
        raise ContractError(f"{name} is empty")
    if np.any(s < 0) or np.any(s > 1):
        bad = float(s[(s < 0) | (s > 1)][0])
        raise ContractError(f"{name} contains {bad}, outside [0, 1]")
    return s


def adv_loss_generator(d_scores_on_fake: Tensor) -> float:
    """Mean of -log(score); the real-image term plays no role for the
    generator and is omitted."""
    s = _check_scores(d_scores_on_fake, "fake scores")
    return float(-np.log(np.maximum(s, LOG_CLAMP)).mean())


def adv_loss_generator_backward(d_scores_on_fake: Tensor) -> Tensor:
    s = _check_scores(d_scores_on_fake, "fake scores")
    g = np.where(s > LOG_CLAMP, -1.0 / (s.size * np.maximum(s, LOG_CLAMP)), 0.0)
    return Tensor(g.reshape(d_scores_on_fake.shape))


def adv_loss_discriminator(scores_real: Tensor, scores_fake: Tensor) -> float:
    """Binary cross-entropy, real and fake halves weighted equally."""
    r = _check_scores(scores_real, "real scores")
    f = _check_scores(scores_fake, "fake scores")
    if r.size != f.size:
        raise ContractError(f"batch mismatch: {r.size} real vs {f.size} fake")
    lr = np.log(np.maximum(r, LOG_CLAMP))
    lf = np.log(np.maximum(1.0 - f, LOG_CLAMP))
    return float(-(lr + lf).mean() / 2.0)


def adv_loss_discriminator_backward(scores_real: Tensor,
                                    scores_fake: Tensor) -> tuple:
    """(d/d real scores, d/d fake scores) of the discriminator BCE."""
    r = _check_scores(scores_real, "real scores")
    f = _check_scores(scores_fake, "fake scores")
    n = r.size
    gr = np.where(r > LOG_CLAMP, -1.0 / (2.0 * n * np.maximum(r, LOG_CLAMP)), 0.0)
    one_minus = 1.0 - f
    gf = np.where(one_minus > LOG_CLAMP,
                  1.0 / (2.0 * n * np.maximum(one_minus, LOG_CLAMP)), 0.0)
    return (Tensor(gr.reshape(scores_real.shape)),
            Tensor(gf.reshape(scores_fake.shape)))


def joint_loss(l2: float, adv: float, w: LossWeights) -> float:
    return w.lambda_l2 * l2 + w.lambda_adv * adv


def minimax_value(scores_real: Tensor, scores_fake: Tensor) -> float:
    """Batch mean of log(D(real)) + log(1 - D(fake)); -log 4 at the balanced
    0.5/0.5 equilibrium. Diagnostic only, never a training signal."""
    r = _check_scores(scores_real, "real scores")
    f = _check_scores(scores_fake, "fake scores")
    if r.size != f.size:
        raise ContractError(f"batch mismatch: {r.size} real vs {f.size} fake")
    lr = np.log(np.maximum(r, LOG_CLAMP))
    lf = np.log(np.maximum(1.0 - f, LOG_CLAMP))
    return float((lr + lf).mean())
