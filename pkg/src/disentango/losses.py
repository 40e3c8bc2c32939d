"""Loss terms: discrete-L2 data misfit, lifting-parameter reconstruction,
closed-form KL (full and simplified), and the semi-supervised classifier term.

Scenario conventions:
  SC1 (unsupervised)    KL against a standard normal prior;
  SC2 (semi-supervised) SC1 plus a cross-entropy term on a linear classifier;
  SC3 (supervised)      KL centered on the given per-task parameter vector.

The "simplified" KL form penalizes only the posterior mean (squared norm for
SC1/SC2, squared distance to the target for SC3); the "full" form carries the
variance terms of the closed-form divergence as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LatentPosterior
from .tensor import ShapeError, Tensor, log_softmax

SCENARIOS = ("SC1", "SC2", "SC3")
KL_FORMS = ("full", "simplified")


class LossError(ValueError):
    pass


@dataclass
class Hyperparams:
    beta_d: float = 1.0
    beta_kl: float = 1.0
    beta_cls: float = 0.0
    scenario: str = "SC1"
    kl_form: str = "simplified"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise LossError(f"unknown scenario {self.scenario!r}")
        if self.kl_form not in KL_FORMS:
            raise LossError(f"unknown kl_form {self.kl_form!r}")
        if min(self.beta_d, self.beta_kl, self.beta_cls) < 0:
            raise LossError("loss weights must be non-negative")

    @staticmethod
    def beta_d_from_noise(sigma_theta: float, noise_scale: float,
                          dx: float, d_u: int) -> float:
        """beta_d derived from the Gaussian noise model instead of set directly."""
        if sigma_theta <= 0 or noise_scale <= 0:
            raise LossError("sigma_theta and the noise scale must be positive")
        return sigma_theta**2 / (noise_scale**2 * dx ** (2 * d_u))


@dataclass
class LossBreakdown:
    data: float
    recon: float
    kl: float
    cls: float
    total: float


def kl_term(post: LatentPosterior, scenario: str = "SC1",
            b: Tensor | None = None, kl_form: str = "full") -> Tensor:
    """Closed-form KL of the diagonal-Gaussian posterior, summed over tasks.

    SC1/SC2 measure against N(0, I); SC3 against N(b, I) with the given
    per-task parameter vectors.
    """
    if scenario not in SCENARIOS:
        raise LossError(f"unknown scenario {scenario!r}")
    mu, std = post.mean, post.std
    if scenario == "SC3":
        if b is None:
            raise LossError("SC3 KL needs the per-task parameter vectors b")
        if b.shape != mu.shape:
            raise ShapeError(f"b shape {b.shape} does not match posterior {mu.shape}")
        center = mu - b
    else:
        center = mu
    if kl_form == "simplified":
        return center.square().sum()
    return 0.5 * (std.square() + center.square() - 2.0 * std.log() - 1.0).sum()


def recon_term(theta_p: Tensor, mu_theta: Tensor) -> Tensor:
    """Squared Euclidean distance between lifting parameters and decoded mean."""
    if theta_p.shape != mu_theta.shape:
        raise ShapeError(f"length mismatch: {theta_p.shape} vs {mu_theta.shape}")
    return (theta_p - mu_theta).square().sum()


def data_term(u_hat: Tensor, u: Tensor, cell_measure: float) -> Tensor:
    """Discrete L2 misfit summed over pairs: sum_j dx^s sum_x |u_hat - u|^2."""
    if u_hat.shape != u.shape:
        raise ShapeError(f"shape mismatch: {u_hat.shape} vs {u.shape}")
    return cell_measure * (u_hat - u).square().sum()


def cls_term(z: Tensor, labels: np.ndarray, cls_w: Tensor, cls_b: Tensor) -> Tensor:
    """Cross-entropy of a linear classifier on the latent, summed over tasks."""
    labels = np.asarray(labels)
    n_classes = cls_w.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LossError(f"label out of range [0, {n_classes}): {labels.tolist()}")
    logits = z @ cls_w + cls_b
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.sum()


def total_loss(data: Tensor, recon: Tensor, kl: Tensor, hp: Hyperparams,
               num_tasks: int, cls: Tensor | None = None) -> tuple[Tensor, LossBreakdown]:
    """Compose the scenario objective, averaged over the S tasks in the batch."""
    if hp.scenario == "SC2":
        if cls is None:
            raise LossError("SC2 total loss needs the classification term")
    elif cls is not None:
        raise LossError(f"classification term given but scenario is {hp.scenario}")
    inv_s = 1.0 / num_tasks
    total = inv_s * (hp.beta_d * data + recon + hp.beta_kl * kl)
    if cls is not None:
        total = total + inv_s * hp.beta_cls * cls
    breakdown = LossBreakdown(
        data=inv_s * hp.beta_d * data.item(),
        recon=inv_s * recon.item(),
        kl=inv_s * hp.beta_kl * kl.item(),
        cls=inv_s * hp.beta_cls * cls.item() if cls is not None else 0.0,
        total=total.item(),
    )
    return total, breakdown
