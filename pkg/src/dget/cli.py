"""dgetctl: command-line client for the nucleus admin API.

Every remote subcommand talks HTTP to one nucleus. Exit codes: 0 success,
1 operational error (the server said no, or is unreachable), 2 usage error.
`--output structured` emits one canonically-encoded object per line for
scripting; the default output is human-readable.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time

import requests

from . import canon
from .errors import BadConfig

DEFAULT_ADMIN = "127.0.0.1:7700"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgetctl",
        description="Operate grid nuclei: run nodes, deploy and steer entities.",
    )
    parser.add_argument("-n", "--nucleus",
                        default=os.environ.get("DGET_ADMIN", DEFAULT_ADMIN),
                        help="admin address host:port of the nucleus")
    parser.add_argument("-o", "--output", choices=("human", "structured"),
                        default="human", help="output format")
    parser.add_argument("--token", default=os.environ.get("DGET_TOKEN", ""),
                        help="base64 admin identity token")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("nucleus", help="node management")
    run_sub = run.add_subparsers(dest="nucleus_command", required=True)
    runp = run_sub.add_parser("run", help="run a nucleus until interrupted")
    runp.add_argument("--config", default=None, help="config file path")

    deploy = sub.add_parser("deploy", help="deploy an entity")
    deploy.add_argument("-m", "--manifest", required=True,
                        help="manifest file (JSON)")
    deploy.add_argument("-p", "--program", required=True,
                        help="program assembly file")

    sub.add_parser("ls", help="list entities")

    for name in ("stop", "suspend", "resume"):
        p = sub.add_parser(name, help=f"{name} an entity")
        p.add_argument("id")

    migrate = sub.add_parser("migrate", help="migrate an entity")
    migrate.add_argument("id")
    migrate.add_argument("--to", required=True, dest="target",
                         help="target nucleus wire address host:port")

    query = sub.add_parser("query", help="flood a resource query")
    query.add_argument("expr")
    query.add_argument("--ttl", type=int, default=4)

    locate = sub.add_parser("locate", help="find the home of an entity")
    locate.add_argument("id")

    return parser


class _Client:
    def __init__(self, args):
        self.base = f"http://{args.nucleus}"
        self.headers = {}
        if args.token:
            self.headers["X-DGET-Token"] = args.token

    def get(self, path, **params):
        return requests.get(self.base + path, params=params or None,
                            headers=self.headers, timeout=30)

    def post(self, path, body=None):
        return requests.post(self.base + path, json=body or {},
                             headers=self.headers, timeout=60)


def _print(args, obj: dict, human: str):
    if args.output == "structured":
        print(canon.encode(obj).decode())
    else:
        print(human)


def _fail(args, response) -> int:
    try:
        obj = response.json()
    except ValueError:
        obj = {"error": "BadResponse", "reason": response.text[:200]}
    _print(args, dict(obj, status=response.status_code),
           f"error: {obj.get('error', '?')}: {obj.get('reason', '')}")
    return 1


def _run_nucleus(args) -> int:
    from . import nucleus as nucleus_mod

    config = nucleus_mod.load_config(args.config)
    node = nucleus_mod.Nucleus(config).start()
    _print(args, {"addr": node.addr, "admin": node.admin_addr},
           f"nucleus listening on {node.addr} (admin {node.admin_addr})")
    stop = {"flag": False}

    def _sig(*_):
        stop["flag"] = True

    signal.signal(signal.SIGINT, _sig)
    signal.signal(signal.SIGTERM, _sig)
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        node.stop()
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "nucleus":
        try:
            return _run_nucleus(args)
        except BadConfig as exc:
            _print(args, {"error": "BadConfig", "reason": str(exc)},
                   f"error: BadConfig: {exc}")
            return 1

    client = _Client(args)
    try:
        if args.command == "deploy":
            with open(args.manifest) as f:
                manifest = json.load(f)
            with open(args.program) as f:
                program = f.read()
            r = client.post("/v1/entities",
                            {"manifest": manifest, "program": program})
            if r.status_code != 201:
                return _fail(args, r)
            obj = r.json()
            _print(args, obj, f"deployed {obj['id']} ({obj['state']})")

        elif args.command == "ls":
            r = client.get("/v1/entities")
            if r.status_code != 200:
                return _fail(args, r)
            entities = r.json()["entities"]
            if args.output == "structured":
                for e in entities:
                    print(canon.encode(e).decode())
            else:
                fmt = "{:<34} {:<20} {:<16} {:<10}"
                print(fmt.format("ID", "NAME", "KIND", "STATE"))
                for e in entities:
                    print(fmt.format(e["id"], e["name"], e["kind"], e["state"]))

        elif args.command in ("stop", "suspend", "resume"):
            r = client.post(f"/v1/entities/{args.id}/{args.command}")
            if r.status_code != 200:
                return _fail(args, r)
            obj = r.json()
            _print(args, obj, f"{obj['id']} -> {obj['state']}")

        elif args.command == "migrate":
            r = client.post(f"/v1/entities/{args.id}/migrate",
                            {"target": args.target})
            if r.status_code != 200:
                return _fail(args, r)
            obj = r.json()
            _print(args, obj,
                   f"{obj['id']} -> {obj['state']} at {obj.get('target', '')}")

        elif args.command == "query":
            r = client.get("/v1/query", expr=args.expr, ttl=args.ttl)
            if r.status_code != 200:
                return _fail(args, r)
            hits = r.json()["hits"]
            if args.output == "structured":
                for h in hits:
                    print(canon.encode(h).decode())
            else:
                for h in hits:
                    attrs = ",".join(f"{k}={v}" for k, v in
                                     sorted(h["descriptor"].items()))
                    print(f"{h['origin']}  {attrs}")
                print(f"{len(hits)} hit(s)")

        elif args.command == "locate":
            r = client.get(f"/v1/locate/{args.id}")
            if r.status_code != 200:
                return _fail(args, r)
            obj = r.json()
            _print(args, obj, f"{obj['id']} is at {obj['addr']}")

        else:  # pragma: no cover - argparse enforces the choices
            return 2
    except OSError as exc:
        _print(args, {"error": "Unreachable", "reason": str(exc)},
               f"error: cannot reach nucleus: {exc}")
        return 1
    except requests.RequestException as exc:
        _print(args, {"error": "Unreachable", "reason": str(exc)},
               f"error: cannot reach nucleus: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
