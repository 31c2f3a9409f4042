"""Request and response bodies of the HTTP service."""

from __future__ import annotations

from datetime import datetime
from typing import Any, Literal

from pydantic import BaseModel, Field

from ..jobs import JobOptions

JobState = Literal["queued", "running", "succeeded", "failed"]


class JobRequest(BaseModel):
    """Submit an edit: either an inline ``config`` mapping or a ``config_path`` on the server."""

    input_path: str
    output_dir: str
    config: dict[str, Any] | None = None
    config_path: str | None = None
    overrides: dict[str, Any] = Field(default_factory=dict)
    options: JobOptions = Field(default_factory=JobOptions)


class JobStatus(BaseModel):
    id: str
    state: JobState
    created: datetime
    finished: datetime | None = None
    exit_code: int | None = None
    window: int | None = None
    step: int | None = None
    artifacts: dict[str, str] = Field(default_factory=dict)
    error: dict[str, Any] | None = None


class EvaluateRequest(BaseModel):
    source_path: str
    edited_path: str
    prompt: str
    output_dir: str
    embedder: str = "toy"


class EvaluateResponse(BaseModel):
    exit_code: int
    metrics: dict[str, Any] | None = None
    error: dict[str, Any] | None = None


class ValidateResponse(BaseModel):
    valid: bool
    config: dict[str, Any] | None = None
    issues: list[dict[str, str]] = Field(default_factory=list)


class Health(BaseModel):
    status: Literal["ok"] = "ok"
    version: str
