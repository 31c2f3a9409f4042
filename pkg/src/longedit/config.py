"""Edit job description, per-task presets and validation."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .errors import ConfigError


class TaskKind(str, Enum):
    attribute = "attribute"
    style = "style"
    background = "background"


class ControlType(str, Enum):
    canny = "canny"
    hed = "hed"
    depth = "depth"


@dataclass(frozen=True)
class TaskPreset:
    """Default sampler and fusion settings for one task category."""

    gamma_cutoff_step: int
    fusion_cutoff_step: int
    fusion_gamma: float
    use_mask: bool
    mask_inverted: bool
    num_steps: int = 50
    guidance_scale: float = 12.0
    control_scale: float = 1.0

    def as_overrides(self) -> dict[str, Any]:
        return asdict(self)


_PRESETS = {
    TaskKind.attribute: TaskPreset(30, 40, 0.97, use_mask=True, mask_inverted=False),
    TaskKind.style: TaskPreset(0, 10, 0.97, use_mask=False, mask_inverted=False),
    # masks keep the foreground object and let the background change
    TaskKind.background: TaskPreset(0, 20, 0.97, use_mask=True, mask_inverted=True),
}


def preset_for_task(task_kind: TaskKind | str) -> TaskPreset:
    try:
        kind = TaskKind(task_kind)
    except ValueError:
        raise ConfigError([("task_kind", f"unknown task kind {task_kind!r}")]) from None
    return _PRESETS[kind]


class EditConfig(BaseModel):
    """Everything needed to run one editing job.

    Fields left out when constructing (or in a config file) are filled from
    the preset of ``task_kind``. Invariants across fields are checked by
    :func:`validate`, not at construction, so that every violation can be
    reported together.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=False)

    task_kind: TaskKind
    source_prompt: str
    target_prompt: str
    object_tokens: tuple[str, ...] = ()
    window_size: int = 8
    num_steps: int = 50
    guidance_scale: float = 12.0
    control_scale: float = 1.0
    fusion_gamma: float = 0.97
    gamma_cutoff_step: int = 30
    fusion_cutoff_step: int = 40
    use_mask: bool = True
    mask_inverted: bool = False
    mask_threshold: float = 0.3
    control_type: ControlType = ControlType.canny
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_sigma: float = 1.4
    seed: int = 0
    resolution: tuple[int, int] = (512, 512)

    @model_validator(mode="before")
    @classmethod
    def _fill_from_preset(cls, data: Any) -> Any:
        if not isinstance(data, Mapping) or "task_kind" not in data:
            return data
        try:
            preset = preset_for_task(data["task_kind"])
        except ConfigError:
            return data  # let field validation report the bad enum
        merged = preset.as_overrides()
        merged.update(data)
        return merged

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EditConfig":
        """Parse a mapping, turning pydantic type errors into :class:`ConfigError`."""
        try:
            return cls.model_validate(dict(data))
        except ValidationError as exc:
            issues = [(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"])
                      for err in exc.errors()]
            raise ConfigError(issues) from None

    @classmethod
    def from_json(cls, text: str) -> "EditConfig":
        return cls.from_mapping(json.loads(text))

    def replace(self, **changes: Any) -> "EditConfig":
        data = self.to_dict()
        data.update(changes)
        return type(self).from_mapping(data)


def read_config_mapping(path: str | Path) -> dict[str, Any]:
    """Raw field mapping of a job document (JSON or YAML, chosen by suffix)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc}")]) from None
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError([("<file>", f"cannot parse {path}: {exc}")]) from None
    if not isinstance(data, Mapping):
        raise ConfigError([("<file>", f"{path} does not contain a mapping")])
    return dict(data)


def load_config(path: str | Path) -> EditConfig:
    return EditConfig.from_mapping(read_config_mapping(path))


def resolve_config(path: str | Path | None = None, mapping: Mapping[str, Any] | None = None,
                   overrides: Mapping[str, Any] | None = None) -> EditConfig:
    """Build a validated config from a file or mapping plus field overrides.

    Overrides are applied before preset filling, so overriding ``task_kind``
    also switches the defaults that come with it.
    """
    if (path is None) == (mapping is None):
        raise ConfigError([("<root>", "give exactly one of a config path or a config mapping")])
    data = read_config_mapping(path) if path is not None else dict(mapping)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ensure_valid(EditConfig.from_mapping(data))


def save_config(config: EditConfig, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    else:
        path.write_text(config.to_json())


def _appears_in(token: str, prompt: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(token) + r"(?!\w)", prompt) is not None


def validate(config: EditConfig) -> list[tuple[str, str]]:
    """Check every cross-field invariant; return all violations (empty if valid)."""
    issues: list[tuple[str, str]] = []

    def bad(field: str, msg: str) -> None:
        issues.append((field, msg))

    if not config.source_prompt.strip():
        bad("source_prompt", "must not be empty")
    if not config.target_prompt.strip():
        bad("target_prompt", "must not be empty")
    if config.window_size < 2:
        bad("window_size", f"must be >= 2, got {config.window_size}")
    if config.num_steps < 1:
        bad("num_steps", f"must be >= 1, got {config.num_steps}")
    if config.guidance_scale < 0:
        bad("guidance_scale", f"must be >= 0, got {config.guidance_scale}")
    if not 0.0 <= config.control_scale <= 1.0:
        bad("control_scale", f"must lie in [0, 1], got {config.control_scale}")
    if not 0.0 < config.fusion_gamma <= 1.0:
        bad("fusion_gamma", f"must lie in (0, 1], got {config.fusion_gamma}")
    if not 0.0 < config.mask_threshold < 1.0:
        bad("mask_threshold", f"must lie in (0, 1), got {config.mask_threshold}")

    t0, t1, n = config.gamma_cutoff_step, config.fusion_cutoff_step, config.num_steps
    if t0 < 0:
        bad("gamma_cutoff_step", f"must be >= 0, got {t0}")
    if t0 > t1:
        bad("gamma_cutoff_step", f"must not exceed fusion_cutoff_step ({t0} > {t1})")
    if t1 > n:
        bad("fusion_cutoff_step", f"must not exceed num_steps ({t1} > {n})")

    if config.task_kind != TaskKind.style:
        for tok in config.object_tokens:
            if not _appears_in(tok, config.source_prompt):
                bad("object_tokens", f"{tok!r} does not appear in source_prompt")
    if config.use_mask and not config.object_tokens:
        bad("object_tokens", "mask estimation needs at least one object token")

    if not 0.0 < config.canny_low < config.canny_high:
        bad("canny_low", "canny thresholds must satisfy 0 < canny_low < canny_high")
    if config.canny_sigma <= 0:
        bad("canny_sigma", f"must be > 0, got {config.canny_sigma}")
    h, w = config.resolution
    if h <= 0 or w <= 0:
        bad("resolution", f"must be positive, got {config.resolution}")
    return issues


def ensure_valid(config: EditConfig) -> EditConfig:
    issues = validate(config)
    if issues:
        raise ConfigError(issues)
    return config


def make_config(task_kind: TaskKind | str, source_prompt: str, target_prompt: str,
                **overrides: Any) -> EditConfig:
    """Build a validated config from the task preset plus explicit overrides."""
    data: dict[str, Any] = {
        "task_kind": task_kind,
        "source_prompt": source_prompt,
        "target_prompt": target_prompt,
    }
    data.update(overrides)
    return ensure_valid(EditConfig.from_mapping(data))
