"""Forward noising, masked objective, and reverse samplers.

Tensors here are channels-first torch arrays (B, C, T, P); the mixture
mask is (B, 1, T, P) and broadcasts over instruments. Steps are 1-based:
schedule index 0 is the identity state (alpha_bar[0] = 1), matching the
convention that step t carries noise level alpha_bar[t].

The separation constraint is enforced by multiplication with the mixture:
denoiser inputs, training targets, predictions, the initial noise, and the
state after every reverse step are all masked, so silent mixture cells can
never activate a note.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .pianoroll import validate_mixture


class ScheduleError(ValueError):
    pass


class SamplingFault(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    """Per-step beta/alpha tables, length steps+1 with index 0 = identity."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def coeff(self, table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
        """Gather table[t] shaped for broadcasting against `like`."""
        value = torch.as_tensor(table, dtype=like.dtype)[
            torch.as_tensor(t, dtype=torch.long)
        ]
        return value.reshape((-1,) + (1,) * (like.ndim - 1))


def linear_schedule(
    steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly interpolated beta from beta_start (t=1) to beta_end (t=steps)."""
    if steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.zeros(steps + 1)
    beta[1:] = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(steps, beta, alpha, alpha_bar)


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # "ddpm" | "ddim"
    ddim_steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def _check_t(t, steps: int) -> None:
    t = np.asarray(t)
    if (t < 1).any() or (t > steps).any():
        raise ValueError(f"step {t} outside [1, {steps}]")


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward marginal: sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps."""
    if y0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    _check_t(t, sched.steps)
    ab = sched.coeff(sched.alpha_bar, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def masked_loss(
    denoiser,
    y0: torch.Tensor,
    x: torch.Tensor,
    t,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between the masked noise and the masked prediction.

    Both the denoiser input and both sides of the loss are multiplied by the
    mixture, so masked cells contribute nothing and constrain nothing.
    """
    y_t = q_sample(y0, t, eps, sched)
    pred = denoiser(y_t * x, t)
    loss = torch.mean((eps * x - pred * x) ** 2)
    if not torch.isfinite(loss):
        raise SamplingFault("non-finite training loss", int(np.max(np.asarray(t))))
    return loss


def ddpm_reverse_step(
    denoiser,
    y_t: torch.Tensor,
    t: int,
    x: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One ancestral step t -> t-1; the result is masked before return."""
    if t < 1:
        raise ValueError("t must be >= 1; the t=1 -> 0 transition is the decoder's")
    _check_t(t, sched.steps)
    eps_hat = denoiser(y_t * x, t)
    beta = sched.coeff(sched.beta, t, y_t)
    alpha = sched.coeff(sched.alpha, t, y_t)
    ab = sched.coeff(sched.alpha_bar, t, y_t)
    mean = (y_t - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)
    if t > 1:
        ab_prev = sched.coeff(sched.alpha_bar, t - 1, y_t)
        sigma = torch.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
        noise = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype)
        mean = mean + sigma * noise
    return mean * x


def ddim_reverse_step(
    denoiser,
    y_t: torch.Tensor,
    t: int,
    x: torch.Tensor,
    sched: NoiseSchedule,
    t_next: int,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM jump t -> t_next (t_next < t, 0 allowed); masked on return."""
    if not 0 <= t_next < t:
        raise ValueError(f"need 0 <= t_next < t, got t={t}, t_next={t_next}")
    _check_t(t, sched.steps)
    ab_t = sched.coeff(sched.alpha_bar, t, y_t)
    ab_next = sched.coeff(sched.alpha_bar, t_next, y_t)
    if float(ab_t.min()) <= 0.0:
        raise ScheduleError(f"alpha_bar[{t}] vanished; schedule too aggressive")
    eps_hat = denoiser(y_t * x, t)
    y0_hat = (y_t - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
    sigma = (
        eta
        * torch.sqrt((1.0 - ab_next) / (1.0 - ab_t))
        * torch.sqrt(1.0 - ab_t / ab_next)
    )
    y_next = (
        torch.sqrt(ab_next) * y0_hat
        + torch.sqrt(torch.clamp(1.0 - ab_next - sigma**2, min=0.0)) * eps_hat
    )
    if eta > 0.0:
        noise = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype)
        y_next = y_next + sigma * noise
    return y_next * x


def ddim_time_sequence(steps: int, ddim_steps: int) -> list[int]:
    """Descending subsequence of steps from `steps` down to 1, evenly spaced."""
    count = min(ddim_steps, steps)
    taus = np.unique(np.linspace(1, steps, count).round().astype(int))
    return [int(t) for t in taus[::-1]]


def decode_final(decoder, y1: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Probability of each note from the t=1 state; masked cells forced to 0."""
    if not getattr(decoder, "trained", False):
        raise UntrainedModelError(
            "final decoder has not been trained; refusing to decode"
        )
    return decoder(y1 * x) * x


def mixture_to_mask(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(T, P) binary mixture -> (1, 1, T, P) float mask tensor."""
    x = validate_mixture(x)
    return torch.as_tensor(x, dtype=dtype).unsqueeze(0).unsqueeze(0)


def sample(
    denoiser,
    decoder,
    x: np.ndarray,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    channels: int | None = None,
) -> np.ndarray:
    """Draw one separated pianoroll for a mixture.

    Starts from masked isotropic noise, runs the configured reverse sampler
    down to t=1, decodes note probabilities, and thresholds at 0.5. Output
    cells are identically 0 wherever the mixture is 0.
    """
    mask = mixture_to_mask(x)
    if channels is None:
        channels = denoiser.out_channels
    generator = torch.Generator().manual_seed(cfg.seed)
    shape = (1, channels, mask.shape[2], mask.shape[3])
    y = torch.randn(shape, generator=generator) * mask

    def check(t):
        if not torch.isfinite(y).all():
            raise SamplingFault("non-finite sampler state", t)

    with torch.no_grad():
        if cfg.kind == "ddpm":
            for t in range(sched.steps, 1, -1):
                y = ddpm_reverse_step(denoiser, y, t, mask, sched, generator)
                check(t - 1)
        else:
            taus = ddim_time_sequence(sched.steps, cfg.ddim_steps)
            for t, t_next in zip(taus, taus[1:]):
                y = ddim_reverse_step(
                    denoiser, y, t, mask, sched, t_next, cfg.eta, generator
                )
                check(t_next)
        probs = decode_final(decoder, y, mask)
    roll = (probs >= 0.5).to(torch.uint8) * mask.to(torch.uint8)
    return roll.squeeze(0).permute(1, 2, 0).numpy()
