"""Backbone adapters selectable by name."""

from __future__ import annotations

import inspect

from ..diffusion import BackboneAdapter
from ..errors import ConfigError
from .toy import ToyBackbone, toy_backend


def load_backend(name: str, **options) -> BackboneAdapter:
    """Instantiate a backend; unknown option names are reported as config errors."""
    if name == "toy":
        cls: type[BackboneAdapter] = ToyBackbone
    elif name == "diffusers":
        from .diffusers_sd import DiffusersBackbone  # torch + diffusers are optional

        cls = DiffusersBackbone
    else:
        raise ConfigError([("backend", f"unknown backend {name!r} (expected 'toy' or 'diffusers')")])
    accepted = inspect.signature(cls.__init__).parameters
    unknown = sorted(set(options) - set(accepted))
    if unknown:
        raise ConfigError([("backend_options", f"{name} backend does not accept {unknown}")])
    return cls(**options)


__all__ = ["ToyBackbone", "toy_backend", "load_backend"]
