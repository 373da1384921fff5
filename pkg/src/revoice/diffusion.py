"""Noise schedule, variance-preserving preconditioning, the score-matching
objective, and the annealed Langevin reverse sampler.

The sampler's update is x_{t-d} = x_t + eta*sigma_t^2*S(x_t, c, sigma_t)
+ beta*sigma_{t-d}*z with the per-step ratio gamma = sigma_{t-d}/sigma_t
= (sigma_min/sigma_max)^(1/N), eta = 1 - gamma^epsilon and
beta = sqrt(1 - gamma^(2*(epsilon-1))).  No noise is added after the final
step.  epsilon must exceed 1 for beta to be real.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvalidInputError, NumericDivergenceError


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 5e-4
    sigma_max: float = 5.0
    sigma_data: float = 0.2

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.sigma_data <= 0:
            raise ConfigError("sigma_data must be positive")


def sigma_at(t, schedule: NoiseSchedule):
    """Exponential schedule sigma_t = sigma_min * (sigma_max/sigma_min)^t, t in [0, 1]."""
    t_val = torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
    if torch.any(t_val < 0) or torch.any(t_val > 1):
        raise InvalidInputError(f"t must lie in [0, 1], got {t}")
    ratio = schedule.sigma_max / schedule.sigma_min
    out = schedule.sigma_min * ratio**t_val
    return out.item() if not torch.is_tensor(t) and out.dim() == 0 else out


def precondition_coeffs(sigma, sigma_data: float):
    """(c_skip, c_out, c_in) making network inputs and regression targets
    unit-variance: c_skip = sd^2/(sd^2+s^2), c_out = s*sqrt(c_skip),
    c_in = 1/sqrt(sd^2+s^2)."""
    if sigma_data <= 0:
        raise ConfigError("sigma_data must be positive")
    if torch.is_tensor(sigma):
        total = sigma_data**2 + sigma**2
        c_skip = sigma_data**2 / total
        return c_skip, sigma * torch.sqrt(c_skip), 1.0 / torch.sqrt(total)
    total = sigma_data**2 + sigma**2
    c_skip = sigma_data**2 / total
    return c_skip, sigma * math.sqrt(c_skip), 1.0 / math.sqrt(total)


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    num_steps: int = 8
    epsilon: float = 1.3

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.epsilon <= 1.0:
            raise ConfigError(
                f"epsilon must exceed 1 (got {self.epsilon}); the noise gain "
                "beta = sqrt(1 - gamma^(2*(epsilon-1))) is imaginary otherwise"
            )

    @property
    def gamma(self) -> float:
        return (self.schedule.sigma_min / self.schedule.sigma_max) ** (1.0 / self.num_steps)

    @property
    def eta(self) -> float:
        return 1.0 - self.gamma**self.epsilon

    @property
    def beta(self) -> float:
        return math.sqrt(1.0 - self.gamma ** (2.0 * (self.epsilon - 1.0)))

    @property
    def delta(self) -> float:
        return 1.0 / self.num_steps


def sampler_params(schedule: NoiseSchedule, num_steps: int, epsilon: float) -> SamplerConfig:
    return SamplerConfig(schedule=schedule, num_steps=num_steps, epsilon=epsilon)


def score_matching_loss(model, x0: torch.Tensor, cond, generator: torch.Generator, schedule: NoiseSchedule) -> torch.Tensor:
    """Denoising score-matching objective.

    Per item: draw t ~ U(0,1) and z ~ N(0,I), form x = x0 + sigma_t*z, and
    accumulate ||sigma_t*S(x, c, sigma_t) + z||^2 / D with D the sample count,
    so the value is architecture- and length-independent (model output ident-
    ically zero gives E||z||^2/D = 1).
    """
    if x0.dim() != 3:
        raise InvalidInputError(f"expected (B, 1, T) clean batch, got {tuple(x0.shape)}")
    batch = x0.shape[0]
    t = torch.rand(batch, generator=generator, dtype=x0.dtype, device=x0.device)
    sigma = sigma_at(t, schedule)
    z = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    shape = (-1, 1, 1)
    x_noisy = x0 + sigma.reshape(shape) * z
    score_fn = model.score if hasattr(model, "score") else model
    score = score_fn(x_noisy, cond, sigma)
    resid = sigma.reshape(shape) * score + z
    dims = x0.shape[1] * x0.shape[2]
    return torch.mean(torch.sum(resid**2, dim=(1, 2)) / dims)


def langevin_sample(score_fn, x_init: torch.Tensor, cfg: SamplerConfig, generator: torch.Generator, last_steps_with_grad: int = 0) -> torch.Tensor:
    """Run the N-step annealed Langevin chain from x_init (drawn at sigma_max).

    ``score_fn(x, sigma: float) -> tensor`` evaluates the (wrapped) score.
    Steps before the last ``last_steps_with_grad`` run under no_grad, which is
    how fine-tuning backpropagates through the tail of the chain only.
    """
    schedule, n = cfg.schedule, cfg.num_steps
    eta, beta = cfg.eta, cfg.beta
    x = x_init
    for k in range(n):
        t = 1.0 - k / n
        t_next = 1.0 - (k + 1) / n
        sig = sigma_at(t, schedule)
        grad_on = k >= n - last_steps_with_grad
        with torch.set_grad_enabled(grad_on and torch.is_grad_enabled()):
            if not grad_on:
                x = x.detach()
            score = score_fn(x, sig)
            x = x + eta * sig * sig * score
            if k < n - 1:
                z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
                x = x + beta * sigma_at(t_next, schedule) * z
        if not torch.all(torch.isfinite(x)):
            raise NumericDivergenceError(f"sampler state became non-finite at step {k}", step=k)
    return x


def enhance_waveform(y: torch.Tensor, model, cfg: SamplerConfig, generator: torch.Generator, last_steps_with_grad: int = 0, cond=None):
    """Enhance a (B, 1, T) batch: conditioning features are computed once, the
    chain starts from x ~ N(0, sigma_max^2 I) at the hop-padded length, and the
    result is trimmed back to T.  Returns (enhanced, cond_features, head)."""
    if y.dim() != 3 or y.shape[1] != 1:
        raise InvalidInputError(f"expected (B, 1, T), got {tuple(y.shape)}")
    length = y.shape[-1]
    hop = model.cond_net.cfg.hop
    remainder = length % hop
    if remainder:
        y = torch.nn.functional.pad(y, (0, hop - remainder))
    head = None
    if cond is None:
        cond, head = model.condition(y)
        head = head[..., :length]
    x_init = (
        torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)
        * cfg.schedule.sigma_max
    )

    def score_fn(x, sig):
        return model.score(x, cond, sig)

    enhanced = langevin_sample(score_fn, x_init, cfg, generator, last_steps_with_grad)
    return enhanced[..., :length], cond, head


def enhance(y, model, cfg: SamplerConfig, seed: int = 0):
    """AudioBuffer-level entry point: pure function of (y, weights, cfg, seed)."""
    from .audio_core import AudioBuffer

    generator = torch.Generator().manual_seed(int(seed))
    x = torch.as_tensor(y.samples, dtype=torch.get_default_dtype()).reshape(1, 1, -1)
    was_training = getattr(model.cond_net, "training", False)
    model.cond_net.eval()
    model.score_net.eval()
    try:
        with torch.no_grad():
            out, _, _ = enhance_waveform(x, model, cfg, generator)
    finally:
        if was_training:
            model.cond_net.train()
            model.score_net.train()
    return AudioBuffer(out.squeeze().numpy().astype(np.float64), y.sample_rate)
