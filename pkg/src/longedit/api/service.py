"""FastAPI service: queue editing jobs, poll their status, validate configs, score videos.

Jobs run one at a time on a background worker; the service holds no state
beyond the in-process job table, and every artifact lands in the job's
``output_dir``.
"""

from __future__ import annotations

import json
import threading
import uuid
from concurrent.futures import Executor, ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Any

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import EditConfig, preset_for_task, resolve_config, validate
from ..errors import ConfigError
from ..jobs import EXIT_CONFIG, EXIT_OK, run_evaluate, run_job
from .schemas import (EvaluateRequest, EvaluateResponse, Health, JobRequest, JobStatus,
                      ValidateResponse)


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _issues(exc: ConfigError) -> list[dict[str, str]]:
    return [{"field": f, "message": m} for f, m in exc.issues]


class JobManager:
    def __init__(self, executor: Executor | None = None):
        self.executor = executor or ThreadPoolExecutor(max_workers=1, thread_name_prefix="longedit-job")
        self._jobs: dict[str, JobStatus] = {}
        self._lock = threading.Lock()

    def _update(self, job_id: str, **changes: Any) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=changes)

    def submit(self, request: JobRequest, config: EditConfig) -> JobStatus:
        job_id = uuid.uuid4().hex[:12]
        status = JobStatus(id=job_id, state="queued", created=_now())
        with self._lock:
            self._jobs[job_id] = status
        self.executor.submit(self._run, job_id, request, config)
        return status

    def _run(self, job_id: str, request: JobRequest, config: EditConfig) -> None:
        self._update(job_id, state="running")
        try:
            code, artifacts = run_job(config, request.input_path, request.output_dir, request.options,
                                      on_step=lambda w, s: self._update(job_id, window=w, step=s))
        except Exception as exc:  # run_job reports failures itself; this is a last resort
            self._update(job_id, state="failed", exit_code=1, finished=_now(),
                         error={"error": type(exc).__name__, "message": str(exc)})
            return
        error = None
        if "error" in artifacts:
            error = json.loads(artifacts["error"].read_text())
        self._update(job_id, state="succeeded" if code == EXIT_OK else "failed", exit_code=code,
                     finished=_now(), artifacts={k: str(v) for k, v in artifacts.items()}, error=error)

    def get(self, job_id: str) -> JobStatus:
        with self._lock:
            try:
                return self._jobs[job_id]
            except KeyError:
                raise HTTPException(status_code=404, detail=f"no job {job_id!r}") from None

    def all(self) -> list[JobStatus]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.created)


def create_app(manager: JobManager | None = None) -> FastAPI:
    app = FastAPI(title="longedit", version=__version__)
    jobs = manager or JobManager()
    app.state.jobs = jobs

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(version=__version__)

    @app.get("/presets/{task_kind}")
    def preset(task_kind: str) -> dict[str, Any]:
        try:
            return preset_for_task(task_kind).as_overrides()
        except ConfigError as exc:
            raise HTTPException(status_code=404, detail=_issues(exc)) from None

    @app.post("/config/validate", response_model=ValidateResponse)
    def validate_config(body: dict[str, Any]) -> ValidateResponse:
        try:
            config = EditConfig.from_mapping(body)
        except ConfigError as exc:
            return ValidateResponse(valid=False, issues=_issues(exc))
        issues = validate(config)
        return ValidateResponse(valid=not issues, config=config.to_dict(),
                                issues=[{"field": f, "message": m} for f, m in issues])

    @app.post("/jobs", response_model=JobStatus, status_code=202)
    def submit(request: JobRequest) -> JobStatus:
        try:
            config = resolve_config(request.config_path, request.config, request.overrides)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail={"exit_code": EXIT_CONFIG,
                                                         "issues": _issues(exc)}) from None
        return jobs.submit(request, config)

    @app.get("/jobs", response_model=list[JobStatus])
    def list_jobs() -> list[JobStatus]:
        return jobs.all()

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job(job_id: str) -> JobStatus:
        return jobs.get(job_id)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(request: EvaluateRequest) -> EvaluateResponse:
        code, artifacts = run_evaluate(request.source_path, request.edited_path, request.prompt,
                                       request.output_dir, request.embedder)
        if code != EXIT_OK:
            return EvaluateResponse(exit_code=code, error=json.loads(artifacts["error"].read_text()))
        return EvaluateResponse(exit_code=code, metrics=json.loads(artifacts["metrics"].read_text()))

    return app
