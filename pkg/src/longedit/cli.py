"""Command line entry point: ``longedit edit|invert|evaluate|preview|validate|serve``.

Every config field can be overridden with a flag of the same name
(``--fusion_gamma 0.9``; ``--fusion-gamma`` also works). With ``--server``
the ``edit`` and ``evaluate`` commands submit to a running service instead
of working locally.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from .config import EditConfig, resolve_config
from .errors import ConfigError, VideoIOError
from .jobs import EXIT_CONFIG, EXIT_FAILURE, EXIT_INPUT, EXIT_OK, JobOptions, run_evaluate, run_invert, run_job
from .video import load_video, save_preview


def _parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 512 or 512x512, got {text!r}") from None
    return h, w


def _parse_tokens(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for name, info in EditConfig.model_fields.items():
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        kwargs: dict[str, Any] = {"dest": f"override_{name}", "default": None}
        ann = info.annotation
        if ann is bool:
            kwargs["action"] = argparse.BooleanOptionalAction
        elif name == "resolution":
            kwargs.update(type=_parse_resolution, metavar="HxW")
        elif name == "object_tokens":
            kwargs.update(type=_parse_tokens, metavar="TOK[,TOK]")
        elif ann in (int, float):
            kwargs["type"] = ann
        else:
            kwargs["type"] = str
            choices = getattr(ann, "__members__", None)
            if choices:
                kwargs["choices"] = list(choices)
        group.add_argument(*flags, **kwargs)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {k[len("override_"):]: v for k, v in vars(args).items()
            if k.startswith("override_") and v is not None}


def _backend_options(pairs: Sequence[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"--backend-option expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _job_options(args: argparse.Namespace) -> JobOptions:
    return JobOptions(
        backend=args.backend,
        backend_options=_backend_options(args.backend_option),
        interpolator=getattr(args, "interpolator", "midpoint"),
        embedder=None if getattr(args, "no_metrics", False) else getattr(args, "embedder", "toy"),
        max_frames=args.max_frames,
        dump_frames=getattr(args, "dump_frames", False),
        dump_masks=getattr(args, "dump_masks", False),
        dump_controls=getattr(args, "dump_controls", False),
        inversion_cache=getattr(args, "inversion_cache", None),
        spill=getattr(args, "spill", False),
    )


def _report_config_error(exc: ConfigError) -> int:
    for field, msg in exc.issues:
        print(f"config error: {field}: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _report(code: int, artifacts: dict[str, Path]) -> int:
    if code == EXIT_OK:
        for name, path in sorted(artifacts.items()):
            print(f"{name}: {path}")
    else:
        err = artifacts.get("error")
        detail = json.loads(err.read_text()) if err else {}
        print(f"failed ({code}): {detail.get('message', 'see logs')}", file=sys.stderr)
        for issue in detail.get("issues", []):
            print(f"  {issue['field']}: {issue['message']}", file=sys.stderr)
        if err:
            print(f"details: {err}", file=sys.stderr)
    return code


# -- remote mode ----------------------------------------------------------------

def _remote_edit(args: argparse.Namespace, config: EditConfig) -> int:
    import httpx

    body = {
        "input_path": str(Path(args.input).resolve()),
        "output_dir": str(Path(args.output).resolve()),
        "config": config.to_dict(),
        "options": _job_options(args).model_dump(),
    }
    with httpx.Client(base_url=args.server, timeout=30.0) as client:
        resp = client.post("/jobs", json=body)
        if resp.status_code == 422:
            print(f"config rejected by server: {resp.json().get('detail')}", file=sys.stderr)
            return EXIT_CONFIG
        resp.raise_for_status()
        job = resp.json()
        print(f"job {job['id']} submitted")
        while job["state"] in ("queued", "running"):
            time.sleep(args.poll)
            job = client.get(f"/jobs/{job['id']}").json()
    for name, path in sorted(job["artifacts"].items()):
        print(f"{name}: {path}")
    if job["state"] != "succeeded":
        print(f"failed ({job['exit_code']}): {(job.get('error') or {}).get('message')}", file=sys.stderr)
    return int(job["exit_code"])


def _remote_evaluate(args: argparse.Namespace) -> int:
    import httpx

    body = {
        "source_path": str(Path(args.source).resolve()),
        "edited_path": str(Path(args.edited).resolve()),
        "prompt": args.prompt,
        "output_dir": str(Path(args.output).resolve()),
        "embedder": args.embedder,
    }
    resp = httpx.post(args.server.rstrip("/") + "/evaluate", json=body, timeout=None)
    resp.raise_for_status()
    result = resp.json()
    if result["exit_code"] == EXIT_OK:
        print(json.dumps({k: result["metrics"][k] for k in ("clip_text", "clip_temp", "clip_se", "con_l2")}))
    else:
        print(f"failed ({result['exit_code']}): {result['error'].get('message')}", file=sys.stderr)
    return int(result["exit_code"])


# -- commands -------------------------------------------------------------------

def cmd_edit(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, None, _overrides(args))
    except ConfigError as exc:
        return _report_config_error(exc)
    if args.server:
        return _remote_edit(args, config)
    return _report(*run_job(config, args.input, args.output, _job_options(args)))


def cmd_invert(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, None, _overrides(args))
    except ConfigError as exc:
        return _report_config_error(exc)
    return _report(*run_invert(config, args.input, args.cache, _job_options(args)))


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.server:
        return _remote_evaluate(args)
    code, artifacts = run_evaluate(args.source, args.edited, args.prompt, args.output, args.embedder,
                                   args.resolution)
    if code == EXIT_OK:
        report = json.loads(artifacts["metrics"].read_text())
        print(json.dumps({k: report[k] for k in ("clip_text", "clip_temp", "clip_se", "con_l2")}))
        print(f"metrics: {artifacts['metrics']}")
        return code
    return _report(code, artifacts)


def cmd_preview(args: argparse.Namespace) -> int:
    try:
        clip = load_video(args.input, args.resolution, max_frames=args.max_frames)
    except VideoIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(save_preview(clip, args.output, args.count))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, None, _overrides(args))
    except ConfigError as exc:
        return _report_config_error(exc)
    print(config.to_json())
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .api import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longedit", description="Training-free long video editing.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", default="toy", choices=["toy", "diffusers"])
        p.add_argument("--backend-option", action="append", default=[], metavar="KEY=VALUE",
                       help="backend constructor argument; VALUE is parsed as JSON when possible")
        p.add_argument("--max-frames", type=int, default=None)

    p = sub.add_parser("edit", help="edit a video")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True, help="video file or directory of frames")
    p.add_argument("--output", required=True, help="output directory")
    backend_flags(p)
    p.add_argument("--interpolator", default="midpoint",
                   help="'none', 'midpoint' or module:attr of a two-frame interpolator")
    p.add_argument("--embedder", default="toy", help="'toy', 'clip' or 'clip:<model id>'")
    p.add_argument("--no-metrics", action="store_true")
    p.add_argument("--dump-frames", action="store_true")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--dump-controls", action="store_true")
    p.add_argument("--inversion-cache", default=None, help="directory written by 'longedit invert'")
    p.add_argument("--spill", action="store_true", help="keep per-frame latents on disk")
    p.add_argument("--server", default=None, help="submit to a running service at this URL")
    p.add_argument("--poll", type=float, default=1.0, help=argparse.SUPPRESS)
    _add_override_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("invert", help="precompute inversion records into a cache directory")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--cache", required=True)
    backend_flags(p)
    _add_override_flags(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("evaluate", help="compute metrics for a source/edited pair")
    p.add_argument("--source", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--prompt", required=True, help="target prompt")
    p.add_argument("--output", required=True, help="directory for metrics.json")
    p.add_argument("--embedder", default="toy")
    p.add_argument("--resolution", type=_parse_resolution, default=None)
    p.add_argument("--server", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("preview", help="save a grid of evenly sampled frames")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="PNG path")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--resolution", type=_parse_resolution, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("validate", help="print the resolved config or its problems")
    p.add_argument("--config", required=True)
    _add_override_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
