"""Scenario files: a deployment plus an ordered list of steps.

A scenario is one JSON document::

    {"nodes": [...], "links": [[a, b, "up"], ...],
     "integserv": {"node": "C"},
     "services": [{"file": "descriptors/s1.json", "node": "A", "start": true}],
     "steps": [{"op": "integrate", ...}, {"op": "expect", "value": ...}]}

Each step appends one JSON line to the transcript.  ``expect`` compares its
literal ``value`` with the result of the step right before it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .combining import OptimizationProfile, compose_simple, materialize, optimize, weave
from .errors import AnisError, ParseError, UnknownService
from .integserv import IntegServ, load_rules
from .matching import EMPTY_TABLE, ConceptTable, classify
from .remoting import Buffered, Network
from .service_model import ContextModel, ServiceDescriptor, load_descriptor

# op -> keys the step must carry
STEP_KEYS: dict[str, tuple[str, ...]] = {
    "register": ("node",),
    "unregister": ("service",),
    "start": ("service",),
    "stop": ("service",),
    "integrate": ("target", "members"),
    "unintegrate": ("target", "members"),
    "integrated": ("target",),
    "call": ("service", "method"),
    "remote_call": ("node", "stub", "method"),
    "net": ("a", "b", "state"),
    "tick": (),
    "replay": ("node", "stub"),
    "announce": ("node",),
    "skeleton": ("node", "service"),
    "stub": ("node", "remote", "remote_node"),
    "match": ("a", "b"),
    "compose": ("services", "new_id", "node"),
    "context": ("node", "key"),
    "records": (),
    "state": (),
    "expect": ("value",),
}


def to_plain(value: Any) -> Any:
    if isinstance(value, Buffered):
        return {"buffered": value.seq}
    return value


@dataclass
class Runtime:
    """A simulated deployment: network, IntegServ and a logical clock."""

    network: Network = field(default_factory=Network)
    integserv: IntegServ | None = None
    base: Path = Path(".")
    table: ConceptTable = EMPTY_TABLE

    @classmethod
    def from_scenario(cls, data: dict, base: Path = Path(".")) -> "Runtime":
        rt = cls(base=base)
        for n in data.get("nodes", ()):
            ctx = data.get("node_context", {}).get(n, {})
            rt.network.add_node(n, ContextModel(external=dict(ctx)))
        for link in data.get("links", ()):
            a, b = link[0], link[1]
            rt.network.add_link(a, b, link[2] if len(link) > 2 else "up")
        cfg = data.get("integserv", {})
        if cfg.get("concepts"):
            rt.table = ConceptTable.load(base / cfg["concepts"])
        rules = load_rules(base / cfg["rules"]) if cfg.get("rules") else None
        rt.integserv = IntegServ(
            rt.network,
            cfg.get("node", (data.get("nodes") or ["local"])[0]),
            rules=rules,
            table=rt.table,
            max_rounds=cfg.get("max_rounds", 3),
            coalesce_policy=cfg.get("coalesce", "none"),
        )
        for s in data.get("services", ()):
            rt.register(s)
        return rt

    def descriptor(self, spec: dict) -> ServiceDescriptor:
        if "descriptor" in spec:
            return ServiceDescriptor.from_dict(spec["descriptor"])
        return load_descriptor(self.base / spec["file"])

    def register(self, spec: dict) -> str:
        desc = self.descriptor(spec)
        node_id = spec.get("node", desc.node_id)
        desc.node_id = node_id
        if "service_id" in spec:
            desc.service_id = spec["service_id"]
        sid = self.network.add_node(node_id).registry.register_service(desc)
        if spec.get("start"):
            self.network.nodes[node_id].registry.set_run_state(sid, "started")
        return sid

    def node_of(self, service_id: str, node: str | None = None):
        if node is not None:
            return self.network.nodes[node]
        found = self.network.locate(service_id)
        if found is None:
            raise UnknownService(service_id)
        return found

    # -- step execution -----------------------------------------------------------

    def execute(self, step: dict) -> Any:
        op = step["op"]
        net, isv = self.network, self.integserv
        if op == "register":
            return self.register(step)
        if op == "unregister":
            self.node_of(step["service"], step.get("node")).registry.unregister_service(step["service"])
            return {"unregistered": step["service"], "context_reports": _drain(isv)}
        if op in ("start", "stop"):
            state = "started" if op == "start" else "stopped"
            self.node_of(step["service"], step.get("node")).registry.set_run_state(step["service"], state)
            return state
        if op == "integrate":
            constraints = dict(step.get("constraints", {}))
            for key in ("new_id", "node"):
                if key in step:
                    constraints[key] = step[key]
            cid = isv.integrate(
                step["target"], list(step["members"]), ttl=step.get("ttl"),
                constraints=constraints, policy=step.get("policy", "accept-any-feasible"),
            )
            rec = isv.records[-1]
            return {"composite_id": cid, "node": rec.host, "chain": rec.chain.names()}
        if op == "unintegrate":
            isv.unintegrate(step["target"], list(step["members"]))
            return "unintegrated"
        if op == "integrated":
            return isv.get_integrated_services(step["target"])
        if op == "call":
            node = self.node_of(step["service"], step.get("node"))
            return node.registry.invoke(step["service"], step["method"], list(step.get("args", [])))
        if op == "remote_call":
            stub = net.stub(step["node"], step["stub"])
            return to_plain(net.remote_invoke(stub, step["method"], list(step.get("args", [])),
                                              importance=step.get("importance")))
        if op == "net":
            reports = net.link_set_state(step["a"], step["b"], step["state"])
            return {"link": [step["a"], step["b"]], "state": step["state"], "replays": _jsonable(reports)}
        if op == "tick":
            if "advance" in step:
                isv.clock.advance(step["advance"])
            now = step.get("now", isv.clock.now)
            expired = isv.lifecycle_tick(now)
            return {"now": isv.clock.now, "expired": expired}
        if op == "replay":
            stub = net.stub(step["node"], step["stub"])
            if stub.cache is None:
                return {"stub": stub.id, "sent": [], "coalesced": [], "results": {}}
            return _jsonable(net.replay(stub.cache))
        if op == "announce":
            net.announce(step["node"], step.get("services"))
            return "announced"
        if op == "skeleton":
            net.make_skeleton(step["service"], step["node"])
            return "skeleton"
        if op == "stub":
            stub = net.make_stub(step["remote"], step["remote_node"], step["node"], step.get("id"))
            if "cache" in step:
                net.attach_cache(stub, step["cache"])
            return stub.id
        if op == "match":
            a, b = (self.node_of(s).registry.get(s) for s in (step["a"], step["b"]))
            r = classify(a, b, self.table)
            return {"api_class": r.api_class, "semantic_class": r.semantic_class}
        if op == "compose":
            return self.compose(step)
        if op == "context":
            report = isv.set_context_fact(step["node"], step["key"], step.get("value"))
            return report
        if op == "records":
            return [r.to_dict() for r in isv.records]
        if op == "state":
            return net.state()
        raise ParseError(f"unknown op {op!r}")

    def compose(self, step: dict) -> dict:
        reg = self.network.nodes[step["node"]].registry
        members = [self.node_of(s).registry.get(s) for s in step["services"]]
        build = weave if step.get("technique", "simple") == "weave" else compose_simple
        plan = build(members, step["new_id"], step["node"], self.table)
        passes = step.get("optimize") or []
        if isinstance(passes, str):
            passes = passes.split(",")
        if passes:
            plan = optimize(plan, reg, self.network.nodes[step["node"]].context,
                            OptimizationProfile.from_names(passes))
        out = plan.to_dict()
        if step.get("commit"):
            materialize(plan, reg)
            out["committed"] = True
        return out


def _drain(isv: IntegServ | None) -> list:
    if isv is None:
        return []
    out, isv.context_reports = isv.context_reports, []
    return out


def _jsonable(value: Any) -> Any:
    return json.loads(json.dumps(value, default=str))


def _step_lines(text: str) -> list[int]:
    return [text.count("\n", 0, m.start()) + 1 for m in re.finditer(r'"op"\s*:', text)]


def parse_scenario(text: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("scenario must be a JSON object", 1)
    unknown = set(data) - {"nodes", "links", "services", "steps", "integserv", "node_context", "description"}
    if unknown:
        raise ParseError(f"unknown top-level key(s) {sorted(unknown)}", 1)
    lines = _step_lines(text)
    nodes = set(data.get("nodes", ()))
    for link in data.get("links", ()):
        if len(link) < 2 or link[0] not in nodes or link[1] not in nodes:
            raise ParseError(f"link {link} names an undeclared node")
    for s in data.get("services", ()):
        if s.get("node") is not None and s["node"] not in nodes:
            raise ParseError(f"service placed on undeclared node {s['node']!r}")
        if "file" not in s and "descriptor" not in s:
            raise ParseError("service entry needs 'file' or 'descriptor'")
    isv_node = data.get("integserv", {}).get("node")
    if isv_node is not None and isv_node not in nodes:
        raise ParseError(f"integserv node {isv_node!r} is undeclared")
    for k, step in enumerate(data.get("steps", ())):
        line = lines[k] if k < len(lines) else None
        if not isinstance(step, dict) or step.get("op") not in STEP_KEYS:
            raise ParseError(f"step {k}: unknown op {step.get('op') if isinstance(step, dict) else step!r}", line)
        missing = [key for key in STEP_KEYS[step["op"]] if key not in step]
        if missing:
            raise ParseError(f"step {k} ({step['op']}): missing {missing}", line)
        for key in ("node", "a", "b", "remote_node"):
            if key in step and step[key] not in nodes:
                raise ParseError(f"step {k}: node {step[key]!r} is undeclared", line)
        if step["op"] == "expect" and k == 0:
            raise ParseError("expect needs a preceding step", line)
    return data


def run_scenario(path, out=None) -> tuple[int, list[str]]:
    """Run a scenario file; returns (exit code, transcript lines)."""
    path = Path(path)
    data = parse_scenario(path.read_text())
    return run_scenario_data(data, path.parent, out)


def run_scenario_data(data: dict, base: Path = Path("."), out=None, runtime: Runtime | None = None):
    rt = runtime or Runtime.from_scenario(data, base)
    transcript: list[str] = []
    code = 0
    last: Any = None
    for k, step in enumerate(data.get("steps", ())):
        op = step["op"]
        if op == "expect":
            ok = _jsonable(step["value"]) == _jsonable(last)
            line = {"step": k, "op": "expect", "status": "PASS" if ok else "FAIL"}
            if not ok:
                code = 1
                line.update(expected=step["value"], actual=last)
        else:
            try:
                last = _jsonable(rt.execute(step))
            except AnisError as exc:
                last = exc.to_json()
            line = {"step": k, "op": op, "result": last}
        text = json.dumps(line)
        transcript.append(text)
        if out is not None:
            print(text, file=out)
    return code, transcript


__all__ = [
    "Runtime",
    "parse_scenario",
    "run_scenario",
    "run_scenario_data",
]
