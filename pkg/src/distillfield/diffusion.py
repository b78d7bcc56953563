"""Forward diffusion, timestep sampling, guidance-oracle contract, and the
score-distillation update rule shared by both pipeline stages.

A guidance oracle is any epsilon predictor. The synthetic TargetImageOracle
denoises exactly toward known target images, which makes distillation outcomes
analytically checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigError, OracleError
from .render import Camera

SCHEDULE_PROFILES = ("linear-beta", "cosine")
WEIGHT_MODES = ("sigma_sq", "one", "sigma_alpha")

CAP_VIEW = "view-conditioned"
CAP_TEXT = "text-conditioned"
CAP_ADAPT = "adaptable"

# Uniform timestep law bounds as fractions of num_steps.
T_FRACTION_LO = 0.02
T_FRACTION_HI = 0.98


@dataclass
class NoiseSchedule:
    """Variance-preserving schedule: per-timestep (α_t, σ_t) and SDS weight w(t).

    α_t is nonincreasing, σ_t nondecreasing, and α_t² + σ_t² = 1.
    """

    alpha: Tensor
    sigma: Tensor
    weight: Tensor
    num_steps: int
    profile: str
    weight_mode: str

    def coefficients(self, t: int) -> tuple[float, float, float]:
        """(α_t, σ_t, w_t) as floats; t must be a valid index."""
        if not 0 <= t < self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps})")
        return float(self.alpha[t]), float(self.sigma[t]), float(self.weight[t])


def build_schedule(
    num_steps: int = 1000,
    profile: str = "linear-beta",
    weight_mode: str = "sigma_sq",
) -> NoiseSchedule:
    """Construct a variance-preserving noise schedule.

    Profiles: ``linear-beta`` (betas linear in t) and ``cosine``. The
    cumulative signal level is clamped away from 0 and 1 so that σ_t > 0 and
    w(t) > 0 at every step.
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    if profile not in SCHEDULE_PROFILES:
        raise ConfigError(f"unknown schedule profile {profile!r}; expected one of {SCHEDULE_PROFILES}")
    if weight_mode not in WEIGHT_MODES:
        raise ConfigError(f"unknown weight mode {weight_mode!r}; expected one of {WEIGHT_MODES}")

    t = torch.arange(num_steps, dtype=torch.float64)
    if profile == "linear-beta":
        beta = torch.linspace(8.5e-4, 1.2e-2, num_steps, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    else:
        s = 0.008
        f = torch.cos(((t / num_steps + s) / (1.0 + s)) * (math.pi / 2)) ** 2
        f0 = math.cos((s / (1.0 + s)) * (math.pi / 2)) ** 2
        alpha_bar = f / f0
    alpha_bar = alpha_bar.clamp(1e-8, 1.0 - 1e-8)

    alpha = torch.sqrt(alpha_bar)
    sigma = torch.sqrt(1.0 - alpha_bar)
    if weight_mode == "sigma_sq":
        weight = sigma**2
    elif weight_mode == "one":
        weight = torch.ones_like(sigma)
    else:
        weight = sigma * alpha
    return NoiseSchedule(alpha, sigma, weight, num_steps, profile, weight_mode)


def sample_timestep(schedule: NoiseSchedule, generator: torch.Generator | None = None) -> int:
    """Draw t = round(u · num_steps) with u uniform on [0.02, 0.98]."""
    u = T_FRACTION_LO + (T_FRACTION_HI - T_FRACTION_LO) * torch.rand(
        (), dtype=torch.float64, generator=generator
    )
    t = int(torch.round(u * schedule.num_steps))
    return min(max(t, 0), schedule.num_steps - 1)


def forward_diffuse(x0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """x_t = α_t·x0 + σ_t·eps, elementwise."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    a, s, _ = schedule.coefficients(t)
    return a * x0 + s * eps


def sds_grad(x0: Tensor, t: int, eps: Tensor, eps_pred: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Score-distillation gradient w.r.t. x0: w(t)·(eps_pred − eps).

    The oracle's internal Jacobian is deliberately omitted; chain this through
    the renderer with :func:`sds_loss_through`.
    """
    if not (x0.shape == eps.shape == eps_pred.shape):
        raise ValueError("x0, eps, eps_pred must share a shape")
    _, _, w = schedule.coefficients(t)
    return w * (eps_pred - eps)


def sds_loss_through(x0: Tensor, grad: Tensor) -> Tensor:
    """Surrogate scalar whose autograd gradient w.r.t. x0 equals ``grad``."""
    return (grad.detach() * x0).sum()


@dataclass
class Conditioning:
    """What an oracle sees besides the noisy observation."""

    camera: Camera | None = None
    prompt: str | None = None


class GuidanceOracle:
    """Abstract epsilon predictor consumed by score distillation.

    ``latent_shape`` of None means the oracle works directly on pixels and
    encode/decode are the identity. ``predict_eps`` must return a tensor of
    the input's shape with finite values for finite inputs. A single oracle
    instance is never called concurrently.
    """

    capabilities: frozenset[str] = frozenset()
    latent_shape: tuple[int, ...] | None = None

    def supports(self, capability: str) -> bool:
        return capability in self.capabilities

    def encode(self, image: Tensor) -> Tensor:
        return image

    def decode(self, latent: Tensor) -> Tensor:
        return latent

    def predict_eps(self, x_t: Tensor, t: int, conditioning: Conditioning) -> Tensor:
        raise NotImplementedError

    def adapt(
        self,
        observations: list[Tensor],
        conditionings: list[Conditioning],
        schedule: NoiseSchedule,
        generator: torch.Generator | None = None,
    ) -> float:
        raise OracleError("this oracle has no adaptable capability")


class TargetImageOracle(GuidanceOracle):
    """Synthetic oracle that denoises exactly toward per-camera target images.

    Given x_t = α_t·x0 + σ_t·eps it predicts (x_t − α_t·X(camera))/σ_t, so the
    prediction equals the injected noise exactly when x0 matches the target.
    The optional adapter is a per-channel affine residual on the prediction,
    zero-initialized so the base behavior is unchanged until adapted.
    """

    def __init__(
        self,
        target_fn,
        schedule: NoiseSchedule,
        capabilities: frozenset[str] = frozenset({CAP_VIEW}),
        adapter_lr: float = 1e-2,
    ):
        self.target_fn = target_fn
        self.schedule = schedule
        self.capabilities = frozenset(capabilities)
        self.latent_shape = None
        self._target_cache: dict[tuple, Tensor] = {}
        self.calls = 0

        self.adapter_scale = torch.zeros(3, requires_grad=True)
        self.adapter_bias = torch.zeros(3, requires_grad=True)
        self._adapter_opt = torch.optim.Adam([self.adapter_scale, self.adapter_bias], lr=adapter_lr)

    def target(self, camera: Camera) -> Tensor:
        key = (
            camera.rho, camera.theta, camera.phi, camera.fov_y,
            camera.width, camera.height, camera.near, camera.far,
        )
        cached = self._target_cache.get(key)
        if cached is None:
            cached = self.target_fn(camera).detach()
            self._target_cache[key] = cached
        return cached

    def _base_eps(self, x_t: Tensor, t: int, conditioning: Conditioning) -> Tensor:
        if conditioning.camera is None:
            raise OracleError("TargetImageOracle needs a camera in the conditioning")
        a, s, _ = self.schedule.coefficients(t)
        if s == 0.0:
            raise OracleError(f"timestep {t} has sigma = 0; cannot invert the forward process")
        target = self.target(conditioning.camera).to(x_t.dtype)
        if target.shape != x_t.shape:
            raise OracleError(
                f"x_t shape {tuple(x_t.shape)} does not match target shape {tuple(target.shape)}"
            )
        return (x_t - a * target) / s

    def predict_eps(self, x_t: Tensor, t: int, conditioning: Conditioning) -> Tensor:
        self.calls += 1
        base = self._base_eps(x_t, t, conditioning)
        scale = self.adapter_scale.to(x_t.dtype)
        bias = self.adapter_bias.to(x_t.dtype)
        return base + scale * base + bias

    def adapter_state(self) -> tuple[Tensor, Tensor]:
        return self.adapter_scale.detach().clone(), self.adapter_bias.detach().clone()

    def adapt(
        self,
        observations: list[Tensor],
        conditionings: list[Conditioning],
        schedule: NoiseSchedule,
        generator: torch.Generator | None = None,
    ) -> float:
        if CAP_ADAPT not in self.capabilities:
            raise OracleError("this oracle has no adaptable capability")
        if not observations:
            raise OracleError("adaptation needs a nonempty observation batch")
        self._adapter_opt.zero_grad()
        loss_acc = None
        for obs, cond in zip(observations, conditionings):
            z0 = obs.detach()
            t = sample_timestep(schedule, generator)
            eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
            z_t = forward_diffuse(z0, t, eps, schedule)
            base = self._base_eps(z_t, t, cond).detach()
            pred = base + self.adapter_scale.to(z0.dtype) * base + self.adapter_bias.to(z0.dtype)
            _, _, w = schedule.coefficients(t)
            term = w * ((pred - eps) ** 2).mean()
            loss_acc = term if loss_acc is None else loss_acc + term
        loss = loss_acc / len(observations)
        loss.backward()
        self._adapter_opt.step()
        return float(loss.detach())


def adapt_oracle(
    oracle: GuidanceOracle,
    observations: list[Tensor],
    conditionings: list[Conditioning],
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> float:
    """One adapter update on freshly noised observations; returns the pre-step loss.

    The observations are detached first, so the caller's field parameters
    cannot move during adaptation.
    """
    if not oracle.supports(CAP_ADAPT):
        raise OracleError("adapt_oracle requires an oracle with the adaptable capability")
    if len(observations) == 0:
        raise OracleError("adapt_oracle requires a nonempty observation batch")
    if len(observations) != len(conditionings):
        raise OracleError("observations and conditionings must pair up")
    detached = [o.detach() for o in observations]
    return oracle.adapt(detached, conditionings, schedule, generator)
