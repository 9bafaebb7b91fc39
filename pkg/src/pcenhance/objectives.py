"""Training objectives: RMSE fidelity, WGAN-GP critic loss and the joint generator loss.

The enhancement problem is a relaxed transport problem: a fidelity (transport
cost) term plus a weighted distribution distance. Here the cost is the RMSE and
the distance is the critic's Wasserstein-1 estimate, so ``omega`` plays the role
of the balance weight between the two.

Sign convention is the standard WGAN-GP one: the critic minimizes
E[D(fake)] - E[D(real)] + beta * GP and the generator minimizes
omega * RMSE - E[D(fake)].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch


@dataclass
class LossConfig:
    beta: float = 10.0
    omega: float = 60.0
    # omega stands in for the transport balance weight; the RMSE realizes the
    # transport cost. Recorded for reference only, never read.
    lambda_gamma_note: str = "omega ~ lambda (balance weight); RMSE ~ transport cost with gamma = 1"

    def __post_init__(self):
        if self.beta < 0 or self.omega <= 0:
            raise ValueError("beta must be >= 0 and omega > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def rmse_loss(enhanced: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    if enhanced.shape != original.shape:
        raise ValueError(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(original.shape)}")
    return torch.sqrt(torch.mean((enhanced - original.to(enhanced.dtype)) ** 2))


def gradient_penalty(critic, real, fake, idx, u=None, generator=None) -> torch.Tensor:
    """Mean of (||grad_x D(x)||_2 - 1)^2 at random interpolates of real and fake.

    ``critic`` is any callable ``critic(attributes, idx) -> scores (B,)``;
    ``real`` and ``fake`` are (B, n). One interpolation weight is drawn per
    patch from U(0, 1) unless ``u`` (B,) is given.
    """
    real = real.detach()
    fake = fake.detach().to(real.dtype)
    if u is None:
        u = torch.rand(real.shape[0], dtype=real.dtype, generator=generator)
    u = u.to(real.dtype).reshape(-1, *([1] * (real.dim() - 1)))
    x = (u * real + (1 - u) * fake).requires_grad_(True)
    scores = critic(x, idx)
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(x)
    norm = grad.reshape(grad.shape[0], -1).norm(dim=1)
    if not torch.isfinite(norm).all():
        bad = (~torch.isfinite(norm)).nonzero().flatten().tolist()
        raise FloatingPointError(
            f"non-finite critic gradient for patches {bad}; "
            f"score range [{scores.min().item():.4g}, {scores.max().item():.4g}], "
            f"input range [{x.min().item():.4g}, {x.max().item():.4g}]"
        )
    return ((norm - 1.0) ** 2).mean()


def _as_float(x):
    return x if torch.is_tensor(x) and x.is_floating_point() else torch.as_tensor(x, dtype=torch.float64)


def discriminator_loss(scores_real, scores_fake, gp, beta: float = 10.0):
    return torch.mean(_as_float(scores_fake)) - torch.mean(_as_float(scores_real)) + beta * gp


def generator_loss(enhanced, original, scores_fake, omega: float = 60.0):
    return omega * rmse_loss(enhanced, original) - torch.mean(_as_float(scores_fake))
