"""Noise schedule, deterministic DDIM sampling/inversion and the backbone contract.

Sampler levels are indexed ``0..T`` where level 0 is the clean latent
(cumulative alpha 1) and level ``T`` is the noisiest timestep the sampler
visits. A sampling step moves from level ``t`` to ``t - 1``; an inversion
step moves from ``t`` to ``t + 1``.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import BackboneError, ScheduleError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Training-time noise schedule over timesteps ``1..len(betas)``."""

    betas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ScheduleError("betas must lie in (0, 1)")
        if b.size > 1 and not np.all(np.diff(b) > 0):
            raise ScheduleError("betas must be strictly increasing")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2,
               num_train_timesteps: int = 1000) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, num_train_timesteps), kind="linear")

    @classmethod
    def scaled_linear(cls, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2,
                      num_train_timesteps: int = 1000) -> "NoiseSchedule":
        """Linear in sqrt(beta); the schedule Stable Diffusion was trained with."""
        b = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps) ** 2
        return cls(b, kind="scaled_linear")

    @property
    def num_train_timesteps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products for timesteps ``1..T_train`` (index ``t - 1``)."""
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_train_timesteps:
            raise ScheduleError(f"timestep {t} outside 0..{self.num_train_timesteps}")
        return float(self.alpha_bars[t - 1])

    def sampler(self, num_steps: int) -> "SamplerSchedule":
        """Uniformly spaced sampler levels: timestep ``k * stride`` at level ``k``."""
        n = self.num_train_timesteps
        if not 1 <= num_steps <= n:
            raise ScheduleError(f"num_steps must lie in 1..{n}, got {num_steps}")
        stride = n // num_steps
        timesteps = tuple([0] + [k * stride for k in range(1, num_steps + 1)])
        levels = np.array([self.alpha_bar(t) for t in timesteps])
        return SamplerSchedule(levels, timesteps)

    def describe(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "num_train_timesteps": self.num_train_timesteps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass(frozen=True)
class SamplerSchedule:
    """Cumulative alphas at the sampler levels ``0..T`` plus their training timesteps."""

    alpha_bars: np.ndarray
    timesteps: tuple[int, ...] = field(default=())

    def __post_init__(self):
        a = np.asarray(self.alpha_bars, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("a sampler schedule needs at least two levels")
        if not (np.all(a > 0) and np.all(a <= 1)):
            raise ScheduleError("cumulative alphas must lie in (0, 1]")
        if not np.all(np.diff(a) < 0):
            raise ScheduleError("cumulative alphas must strictly decrease with the level")
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bars", a)
        ts = tuple(self.timesteps) or tuple(range(a.size))
        if len(ts) != a.size:
            raise ScheduleError("timesteps and alpha_bars differ in length")
        object.__setattr__(self, "timesteps", ts)

    @classmethod
    def from_alpha_bars(cls, levels: Sequence[float]) -> "SamplerSchedule":
        return cls(np.asarray(levels, dtype=np.float64))

    @property
    def num_steps(self) -> int:
        return self.alpha_bars.size - 1


def _ddim_move(z: np.ndarray, eps: np.ndarray, a_from: float, a_to: float) -> np.ndarray:
    pred_x0 = (z - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    return np.sqrt(a_to) * pred_x0 + np.sqrt(1.0 - a_to) * eps


def _check_shapes(z: np.ndarray, eps: np.ndarray) -> None:
    if np.shape(z) != np.shape(eps):
        raise ShapeError(f"noise estimate shape {np.shape(eps)} != latent shape {np.shape(z)}")


def ddim_sample_step(z_t: np.ndarray, t: int, eps: np.ndarray,
                     schedule: SamplerSchedule) -> np.ndarray:
    """One deterministic DDIM update from level ``t`` to ``t - 1``."""
    if not 1 <= t <= schedule.num_steps:
        raise ScheduleError(f"sampling level {t} outside 1..{schedule.num_steps}")
    _check_shapes(z_t, eps)
    a = schedule.alpha_bars
    return _ddim_move(z_t, eps, a[t], a[t - 1])


def ddim_invert_step(z_t: np.ndarray, t: int, eps: np.ndarray,
                     schedule: SamplerSchedule) -> np.ndarray:
    """One DDIM inversion update from level ``t`` to ``t + 1``."""
    if not 0 <= t <= schedule.num_steps - 1:
        raise ScheduleError(f"inversion level {t} outside 0..{schedule.num_steps - 1}")
    _check_shapes(z_t, eps)
    a = schedule.alpha_bars
    return _ddim_move(z_t, eps, a[t], a[t + 1])


def project_to_x0(z_t: np.ndarray, t: int, eps: np.ndarray,
                  schedule: SamplerSchedule) -> np.ndarray:
    """One-shot clean-latent estimate at level ``t``."""
    _check_shapes(z_t, eps)
    a_t = schedule.alpha_bars[t]
    if a_t <= 0:
        raise ScheduleError(f"cumulative alpha is zero at level {t}")
    return (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)


# -- backbone contract --------------------------------------------------------

class BackboneAdapter(abc.ABC):
    """A pretrained text-conditioned latent noise predictor with its autoencoder.

    Pixels cross this boundary as ``[N, H, W, 3]`` arrays in ``[0, 1]``;
    latents as ``[N, C, h, w]``. ``attention`` is an
    :class:`~longedit.attention.AttentionHooks` (or ``None`` for plain attention)
    that the backbone must route its self- and cross-attention layers through.
    """

    name: str = "backbone"
    # decode(encode(x)) stays within this max-abs distance of x
    reconstruction_tolerance: float = 0.0

    @abc.abstractmethod
    def noise_schedule(self) -> NoiseSchedule: ...

    @abc.abstractmethod
    def encode(self, frames: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def decode(self, latents: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def encode_prompt(self, prompt: str) -> Any: ...

    @abc.abstractmethod
    def token_positions(self, prompt: str, words: Sequence[str]) -> list[int]:
        """Positions of every (sub)token of ``words`` in the tokenized ``prompt``."""

    @abc.abstractmethod
    def predict_noise(self, latents: np.ndarray, timestep: int, prompt_embedding: Any,
                      control: np.ndarray | None = None, control_scale: float = 1.0,
                      attention=None) -> np.ndarray: ...

    def latent_shape(self, resolution: tuple[int, int]) -> tuple[int, int, int]:
        probe = self.encode(np.zeros((1, *resolution, 3)))
        return probe.shape[1:]

    def describe(self) -> dict[str, Any]:
        return {"name": self.name}


def guided_noise(backbone: BackboneAdapter, latents: np.ndarray, t: int,
                 schedule: SamplerSchedule, cond: Any, uncond: Any,
                 guidance_scale: float, control: np.ndarray | None = None,
                 control_scale: float = 1.0, attention=None) -> np.ndarray:
    """Classifier-free guided noise estimate at sampler level ``t``.

    With ``guidance_scale == 1`` only the conditional branch is evaluated.
    ``attention`` may be a callable ``branch -> hooks`` so each branch gets its own.
    """
    timestep = schedule.timesteps[t]

    def run(emb, branch):
        hooks = attention(branch) if callable(attention) else attention
        try:
            eps = backbone.predict_noise(latents, timestep, emb, control=control,
                                         control_scale=control_scale, attention=hooks)
        except BackboneError:
            raise
        except Exception as exc:
            raise BackboneError(f"{type(exc).__name__}: {exc}", timestep) from exc
        if eps.shape != latents.shape:
            raise BackboneError(f"backbone returned shape {eps.shape}, expected {latents.shape}",
                                timestep)
        return eps

    eps_cond = run(cond, "cond")
    if guidance_scale == 1.0:
        return eps_cond
    eps_uncond = run(uncond, "uncond")
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)
