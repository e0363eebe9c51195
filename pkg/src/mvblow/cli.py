"""Command line client.

Each subcommand reads a JSON config, validates it, posts it to the service
(in-process unless ``--server`` is given) and writes the returned tables and
documents atomically into the output directory together with a manifest.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .schemas import CascadeRequest, MeasureSpec, RunConfig

RUN_COMMANDS = ("simulate", "solve", "pde", "envelope", "sweep", "compare")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class InputError(Exception):
    pass


def fmt(v) -> str:
    if v is None:
        return "nan"
    return format(float(v), ".17g")


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_csv(table: dict) -> str:
    lines = [",".join(table["columns"])]
    lines += [",".join(fmt(v) for v in row) for row in table["rows"]]
    return "\n".join(lines) + "\n"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})")


def _set_path(doc: dict, dotted: str, raw: str):
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise InputError(f"--set {dotted}: {k} is not an object")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    if isinstance(val, (dict, list)):
        raise InputError("--set only overrides scalar fields")
    cur[keys[-1]] = val


class LocalClient:
    def __init__(self):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

        from .service import app
        self._c = TestClient(app, raise_server_exceptions=False)

    def post(self, path, payload):
        r = self._c.post(path, json=payload)
        return r.status_code, r.json()


class RemoteClient:
    def __init__(self, url):
        self.url = url.rstrip("/")

    def post(self, path, payload):
        import httpx
        r = httpx.post(self.url + path, json=payload, timeout=None)
        return r.status_code, r.json()


def build_parser():
    p = argparse.ArgumentParser(prog="mvblow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in RUN_COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", help="output directory (overrides outputs.directory)")
        s.add_argument("--alpha", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a scalar field, e.g. numerics.dt=1e-4")
        s.add_argument("--server", help="base URL of a running service")
    s = sub.add_parser("cascade")
    s.add_argument("--measure", required=True, help="JSON measure {pieces, atoms}")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--x-max", type=float, dest="x_max")
    s.add_argument("--out", default="out")
    s.add_argument("--server")
    s = sub.add_parser("serve")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def _load_config(args) -> RunConfig:
    doc = _read_json(args.config)
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    if args.alpha is not None:
        doc.setdefault("model", {})["alpha"] = args.alpha
    if args.seed is not None:
        doc.setdefault("numerics", {})["seeds"] = [args.seed]
    if args.threads is not None:
        doc.setdefault("numerics", {})["threads"] = args.threads
    if args.out:
        doc.setdefault("outputs", {})["directory"] = args.out
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(doc, k, v)
    return RunConfig.model_validate(doc)


def _emit(out: Path, result: dict, formats, manifest: dict):
    written = []
    if "csv" in formats:
        for name, table in result.get("tables", {}).items():
            write_atomic(out / f"{name}.csv", table_csv(table))
            written.append(f"{name}.csv")
    if "json" in formats:
        for name, doc in result.get("documents", {}).items():
            write_atomic(out / f"{name}.json", dump_json(doc))
            written.append(f"{name}.json")
    if "svg" in formats:
        for name, text in result.get("texts", {}).items():
            write_atomic(out / name, text)
            written.append(name)
    write_atomic(out / "summary.json", dump_json(result["summary"]))
    written.append("summary.json")
    manifest["outputs"] = written + ["manifest.json"]
    write_atomic(out / "manifest.json", dump_json(manifest))


def _fail(out: Path | None, code: int, body: dict) -> int:
    msg = body.get("error") or body.get("detail") or body
    print(f"mvblow: error: {msg}", file=sys.stderr)
    if out is not None:
        try:
            write_atomic(out / "error.json", dump_json(body))
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn
        uvicorn.run("mvblow.service:app", host=args.host, port=args.port)
        return EXIT_OK
    out = None
    try:
        if args.command == "cascade":
            doc = _read_json(args.measure)
            allow = doc.pop("allow_excess", True) if isinstance(doc, dict) else True
            req = CascadeRequest(measure=MeasureSpec.model_validate({**doc, "allow_excess": allow}),
                                 alpha=args.alpha, epsilon=args.epsilon, x_max=args.x_max)
            payload, formats, out = req.model_dump(), ["json"], Path(args.out)
            resolved = payload
        else:
            cfg = _load_config(args)
            payload, formats, out = cfg.model_dump(), cfg.outputs.formats, Path(cfg.outputs.directory)
            resolved = payload
    except (InputError, ValidationError) as e:
        return _fail(out, EXIT_INVALID, {"error": str(e), "kind": "validation"})
    client = RemoteClient(args.server) if args.server else LocalClient()
    status, body = client.post(f"/{args.command}", payload)
    if status == 422:
        return _fail(out, EXIT_INVALID, body if isinstance(body, dict) else {"error": body})
    if status != 200:
        code = EXIT_NUMERICAL if isinstance(body, dict) and body.get("kind") == "numerical" else 1
        return _fail(out, code, body if isinstance(body, dict) else {"error": body})
    manifest = {
        "tool": "mvblow",
        "version": __version__,
        "subcommand": args.command,
        "config": resolved,
        "threads_env": os.environ.get("MVBLOW_THREADS"),
        "server": args.server or "in-process",
    }
    _emit(out, body, formats, manifest)
    print(json.dumps(body["summary"], sort_keys=True)[:2000])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
