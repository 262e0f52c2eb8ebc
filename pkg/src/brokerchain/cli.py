"""Command line client for the harness service.

By default every command talks to an in-process copy of the HTTP service, so
no server needs to be running. Pass --server to target a remote instance
started with the serve subcommand. Exit codes: 0 on success, 1 for config or
usage problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

import httpx

from . import __version__

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 on usage problems, not 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


async def _request(server: str | None, method: str, path: str, **kwargs) -> httpx.Response:
    if server:
        async with httpx.AsyncClient(base_url=server, timeout=None) as client:
            return await client.request(method, path, **kwargs)
    from .service import app

    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(
        transport=transport, base_url="http://harness.local", timeout=None
    ) as client:
        return await client.request(method, path, **kwargs)


def _call(server: str | None, method: str, path: str, **kwargs) -> httpx.Response:
    try:
        return asyncio.run(_request(server, method, path, **kwargs))
    except httpx.HTTPError as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        raise SystemExit(2) from None


def _check(resp: httpx.Response) -> dict:
    if resp.status_code == 200:
        return resp.json()
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    print(f"error: {detail}", file=sys.stderr)
    raise SystemExit(1 if resp.status_code == 400 else 2)


def cmd_simulate(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    try:
        config_text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    body = {"config": config_text, "mode": args.mode}
    resp = _call(args.server, "POST", "/simulate", json=body)
    payload = _check(resp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in payload["artifacts"].items():
        (out_dir / name).write_text(text, encoding="utf-8")
        print(out_dir / name)
    print(
        f"completed {payload['rounds']} rounds on {payload['nodes']} nodes "
        f"({payload['mode']} mode, {payload['elapsed_s']:.2f}s), "
        f"chain tip {payload['chain_tip'][:16]}"
    )
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    files = []
    for path_str in args.csv:
        path = Path(path_str)
        try:
            files.append({"name": path.name, "content": path.read_text(encoding="utf-8")})
        except OSError as exc:
            print(f"error: cannot read csv: {exc}", file=sys.stderr)
            return 1
    resp = _call(args.server, "POST", "/analyze", json={"files": files})
    payload = _check(resp)
    if args.out:
        Path(args.out).write_text(payload["report"], encoding="utf-8")
        print(args.out)
    else:
        print(payload["report"], end="")
    return 0


def cmd_topology(args: argparse.Namespace) -> int:
    resp = _call(
        args.server, "GET", "/topology", params={"n_max": args.n_max, "brokers": args.brokers}
    )
    payload = _check(resp)
    print(payload["report"], end="")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import app

    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    except Exception as exc:
        print(f"error: server failed: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brokerchain", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a simulation and write its artifacts")
    p_sim.add_argument("--config", required=True, help="path to key=value config file")
    p_sim.add_argument("--out", required=True, help="directory for run artifacts")
    p_sim.add_argument("--mode", choices=["real", "seeded"], help="override run.mode")
    p_sim.add_argument("--server", help="base URL of a running service")
    p_sim.set_defaults(func=cmd_simulate)

    p_an = sub.add_parser("analyze", help="summarize one or more metrics CSVs")
    p_an.add_argument("csv", nargs="+", help="metrics CSV files, in comparison order")
    p_an.add_argument("--out", help="write the report here instead of stdout")
    p_an.add_argument("--server", help="base URL of a running service")
    p_an.set_defaults(func=cmd_analyze)

    p_top = sub.add_parser("topology", help="compare broker and mesh connection counts")
    p_top.add_argument("--n-max", type=int, default=20, dest="n_max")
    p_top.add_argument("--brokers", type=int, default=1)
    p_top.add_argument("--server", help="base URL of a running service")
    p_top.set_defaults(func=cmd_topology)

    p_srv = sub.add_parser("serve", help="run the HTTP service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)
    p_srv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # unexpected local failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
