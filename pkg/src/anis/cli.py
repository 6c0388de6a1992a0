"""Command-line front end.

Every command prints one JSON document.  Commands that need a running
deployment take ``--scenario FILE``: the scenario is loaded and its steps
are executed silently before the command runs (nothing persists between
invocations).

Exit codes: 0 success, 1 expectation failure, 2 usage error, 3 operation
error (the document is then ``{"error": ..., "cause": ...}``).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import AnisError, ParseError
from .matching import EMPTY_TABLE, ConceptTable, classify
from .scenario import Runtime, parse_scenario, run_scenario, run_scenario_data
from .service_model import load_descriptor, validate

EXIT_OK, EXIT_EXPECT, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


def _value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anis", description="dynamic service integration runtime")
    p.add_argument("--scenario", help="deployment to load (and replay) before the command")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file and print its transcript")
    r.add_argument("file")

    r = sub.add_parser("register", help="validate (and with --scenario, register) a descriptor")
    r.add_argument("descriptor")
    r.add_argument("--node")

    r = sub.add_parser("match", help="classify two descriptors")
    r.add_argument("a")
    r.add_argument("b")
    r.add_argument("--concepts")

    r = sub.add_parser("compose", help="build a composite plan")
    r.add_argument("a")
    r.add_argument("b")
    r.add_argument("--technique", choices=("simple", "weave"), default="simple")
    r.add_argument("--optimize", default="", help="comma list of redundant, unused, context")
    r.add_argument("--new-id", required=True)
    r.add_argument("--node", required=True)
    r.add_argument("--commit", action="store_true")

    r = sub.add_parser("integrate")
    r.add_argument("target")
    r.add_argument("members", nargs="+")
    r.add_argument("--ttl", type=int)
    r.add_argument("--rules")
    r.add_argument("--new-id")

    r = sub.add_parser("unintegrate")
    r.add_argument("target")
    r.add_argument("members", nargs="+")

    r = sub.add_parser("integrated")
    r.add_argument("target")

    r = sub.add_parser("call")
    r.add_argument("node")
    r.add_argument("service")
    r.add_argument("method")
    r.add_argument("args", nargs="*")

    r = sub.add_parser("net")
    r.add_argument("state", choices=("up", "down"))
    r.add_argument("a")
    r.add_argument("b")

    r = sub.add_parser("tick")
    r.add_argument("--now", type=int)

    r = sub.add_parser("replay")
    r.add_argument("node")
    r.add_argument("stub")
    return p


def _runtime(args) -> Runtime:
    if not args.scenario:
        rt = Runtime()
        from .integserv import IntegServ

        rt.integserv = IntegServ(rt.network, "local")
        return rt
    path = Path(args.scenario)
    data = parse_scenario(path.read_text())
    rt = Runtime.from_scenario(data, path.parent)
    run_scenario_data(data, path.parent, runtime=rt)
    return rt


def _load_side(rt: Runtime, ref: str, host: str):
    """A descriptor file is placed on the composition host; an id must
    already be registered somewhere in the loaded deployment."""
    if Path(ref).is_file():
        desc = load_descriptor(ref)
        desc.node_id = host
        node = rt.network.add_node(host)
        if desc.service_id not in node.registry:
            node.registry.register_service(desc)
        return desc.service_id
    return ref


def dispatch(args) -> tuple[int, object]:
    cmd = args.command
    if cmd == "run":
        code, _ = run_scenario(args.file, out=sys.stdout)
        return code, None
    if cmd == "match":
        table = ConceptTable.load(args.concepts) if args.concepts else EMPTY_TABLE
        report = classify(load_descriptor(args.a), load_descriptor(args.b), table)
        return EXIT_OK, report.to_dict()
    if cmd == "register" and not args.scenario:
        desc = load_descriptor(args.descriptor)
        validate(desc)
        return EXIT_OK, {"service_id": desc.service_id, "node_id": args.node or desc.node_id}

    rt = _runtime(args)
    if cmd == "register":
        sid = rt.register({"file": str(Path(args.descriptor).resolve()), **({"node": args.node} if args.node else {})})
        return EXIT_OK, {"service_id": sid}
    if cmd == "compose":
        a = _load_side(rt, args.a, args.node)
        b = _load_side(rt, args.b, args.node)
        rt.network.add_node(args.node)
        step = {
            "services": [a, b],
            "technique": args.technique,
            "optimize": [s for s in args.optimize.split(",") if s],
            "new_id": args.new_id,
            "node": args.node,
            "commit": args.commit,
        }
        return EXIT_OK, rt.compose(step)
    if cmd == "integrate":
        if args.rules:
            from .integserv import load_rules

            rt.integserv.rules = load_rules(args.rules)
        step = {"op": "integrate", "target": args.target, "members": args.members, "ttl": args.ttl}
        if args.new_id:
            step["new_id"] = args.new_id
        return EXIT_OK, rt.execute(step)
    if cmd == "unintegrate":
        return EXIT_OK, rt.execute({"op": "unintegrate", "target": args.target, "members": args.members})
    if cmd == "integrated":
        return EXIT_OK, rt.execute({"op": "integrated", "target": args.target})
    if cmd == "call":
        step = {"op": "call", "node": args.node, "service": args.service, "method": args.method,
                "args": [_value(a) for a in args.args]}
        return EXIT_OK, rt.execute(step)
    if cmd == "net":
        return EXIT_OK, rt.execute({"op": "net", "a": args.a, "b": args.b, "state": args.state})
    if cmd == "tick":
        step = {"op": "tick"}
        if args.now is not None:
            step["now"] = args.now
        return EXIT_OK, rt.execute(step)
    if cmd == "replay":
        return EXIT_OK, rt.execute({"op": "replay", "node": args.node, "stub": args.stub})
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code, doc = dispatch(args)
    except ParseError as exc:
        print(json.dumps(exc.to_json()))
        return EXIT_USAGE
    except (AnisError, OSError, ValueError, KeyError) as exc:
        err = exc.to_json() if isinstance(exc, AnisError) else {"error": str(exc), "cause": type(exc).__name__}
        print(json.dumps(err))
        return EXIT_ERROR
    if doc is not None:
        print(json.dumps(doc))
    return code


if __name__ == "__main__":
    sys.exit(main())
