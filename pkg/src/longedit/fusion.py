"""Blending of edited latents with the source inversion trajectory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class FusionSchedule:
    """``gamma`` applies through step ``gamma_cutoff``; all fusion stops after ``fusion_cutoff``.

    Steps count completed reverse-process iterations, starting at 1.
    """

    gamma: float = 0.97
    gamma_cutoff: int = 30
    fusion_cutoff: int = 40
    use_mask: bool = True
    mask_inverted: bool = False

    def __post_init__(self):
        issues = []
        if not 0.0 < self.gamma <= 1.0:
            issues.append(("fusion_gamma", f"must lie in (0, 1], got {self.gamma}"))
        if not 0 <= self.gamma_cutoff <= self.fusion_cutoff:
            issues.append(("gamma_cutoff_step", "must satisfy 0 <= gamma_cutoff <= fusion_cutoff"))
        if issues:
            raise ConfigError(issues)

    @classmethod
    def from_config(cls, config) -> "FusionSchedule":
        return cls(config.fusion_gamma, config.gamma_cutoff_step, config.fusion_cutoff_step,
                   config.use_mask, config.mask_inverted)

    def gamma_at(self, step: int) -> float:
        return self.gamma if step <= self.gamma_cutoff else 1.0

    def active(self, step: int) -> bool:
        return step <= self.fusion_cutoff


def effective_mask(mask: np.ndarray | None, schedule: FusionSchedule) -> np.ndarray | float:
    """0/1 weights on the edited latent; ``1.0`` (a scalar) when masks are disabled."""
    if not schedule.use_mask:
        return 1.0
    if mask is None:
        raise ShapeError("this fusion schedule uses masks but none was given")
    m = np.asarray(mask, dtype=np.float64)
    return 1.0 - m if schedule.mask_inverted else m


def fuse(z_edit: np.ndarray, z_src: np.ndarray, mask: np.ndarray | None, step: int,
         schedule: FusionSchedule) -> np.ndarray:
    """Fuse one latent (or a batch) with the inversion latent at the same timestep.

    ``mask`` is ``[h, w]`` (or ``[B, h, w]`` for a batch) and broadcasts over channels.
    """
    if step < 1:
        raise ShapeError(f"step index starts at 1, got {step}")
    if z_edit.shape != z_src.shape:
        raise ShapeError(f"edited latent {z_edit.shape} and source latent {z_src.shape} differ")
    if not schedule.active(step):
        return z_edit
    m = effective_mask(mask, schedule)
    if isinstance(m, np.ndarray):
        if m.shape[-2:] != z_edit.shape[-2:]:
            raise ShapeError(f"mask {m.shape} does not match latent grid {z_edit.shape[-2:]}")
        if m.ndim == 3:
            m = m[:, None]  # [B, 1, h, w]
    g = schedule.gamma_at(step)
    inner = z_edit if g == 1.0 else g * z_edit + (1.0 - g) * z_src
    return m * inner + (1.0 - m) * z_src
