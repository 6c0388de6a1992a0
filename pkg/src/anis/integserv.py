"""IntegServ: decision, negotiation, life-cycle and technical integration.

The four parts are internal components of one orchestrator.  All
mutations go through a single lock so integrate/unintegrate/tick and
context events are processed one at a time.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from .combining import (
    CompositePlan,
    OptimizationProfile,
    compose_simple,
    materialize,
    optimize,
    weave,
)
from .errors import (
    AnisError,
    IntegrationException,
    NoApplicableRule,
    NoLink,
    UnIntegrationException,
    UnknownService,
)
from .matching import EMPTY_TABLE, FULL, NONE, PARTIAL, ConceptTable, MatchReport, classify
from .remoting import UP, Network, Node, Stub, summary_of
from .service_model import ContextModel, ServiceDescriptor, ServiceRegistered, ServiceUnregistered

log = logging.getLogger(__name__)

STEP_NAMES = ("transform", "compose_simple", "weave", "optimize", "make_stubs", "attach_caches")
_CLASS_ORDER = {NONE: 0, PARTIAL: 1, FULL: 2}


# ---------------------------------------------------------------------------
# technique chains and strategy rules


@dataclass(frozen=True)
class Step:
    name: str
    options: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.name}({','.join(self.options)})" if self.options else self.name

    @classmethod
    def parse(cls, text: str) -> "Step":
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(([^)]*)\))?\s*", text)
        if not m or m.group(1) not in STEP_NAMES:
            raise ValueError(f"unknown technique step {text!r}")
        opts = tuple(o.strip() for o in (m.group(2) or "").split(",") if o.strip())
        if m.group(1) == "optimize":
            OptimizationProfile.from_names(opts)
        return cls(m.group(1), opts)


@dataclass(frozen=True)
class TechniqueChain:
    steps: tuple[Step, ...]

    def __post_init__(self):
        names = [s.name for s in self.steps]
        combiners = [i for i, n in enumerate(names) if n in ("compose_simple", "weave")]
        if len(combiners) > 1:
            raise ValueError("a chain holds at most one of compose_simple / weave")
        if "transform" in names and combiners and names.index("transform") > combiners[0]:
            raise ValueError("transform must precede compose/weave")

    @classmethod
    def parse(cls, steps: list[str]) -> "TechniqueChain":
        return cls(tuple(Step.parse(s) for s in steps))

    def names(self) -> list[str]:
        return [str(s) for s in self.steps]

    def with_transform(self) -> "TechniqueChain":
        if any(s.name == "transform" for s in self.steps):
            return self
        return TechniqueChain((Step("transform"),) + self.steps)


@dataclass(frozen=True)
class StrategyRule:
    priority: int
    predicate: dict
    chain: TechniqueChain

    def matches(self, facts: dict) -> bool:
        for key, want in self.predicate.items():
            if key == "context_has":
                keys = [want] if isinstance(want, str) else list(want)
                ctx = facts.get("context", {})
                if not all(ctx.get(k) not in (None, False) for k in keys):
                    return False
            elif facts.get(key) != want:
                return False
        return True

    def to_dict(self) -> dict:
        return {"priority": self.priority, "predicate": self.predicate, "chain": self.chain.names()}


PREDICATE_KEYS = {"colocated", "link_state", "api_class", "semantic_class", "context_has"}


def parse_rules(data: list) -> list[StrategyRule]:
    rules = []
    for r in data:
        pred = dict(r.get("predicate", {}))
        unknown = set(pred) - PREDICATE_KEYS
        if unknown:
            raise ValueError(f"unknown predicate key(s) {sorted(unknown)}")
        rules.append(StrategyRule(int(r["priority"]), pred, TechniqueChain.parse(r["chain"])))
    prios = [r.priority for r in rules]
    if len(set(prios)) != len(prios):
        raise ValueError("rule priorities must be distinct")
    if not any(not r.predicate for r in rules):
        log.warning("rule set has no catch-all rule")
    return sorted(rules, key=lambda r: -r.priority)


def load_rules(path) -> list[StrategyRule]:
    with open(path) as fh:
        return parse_rules(json.load(fh))


DEFAULT_RULES = parse_rules(
    [
        {"priority": 100, "predicate": {"colocated": True, "context_has": "require_weave"}, "chain": ["weave"]},
        {"priority": 95, "predicate": {"colocated": False, "context_has": "require_weave"}, "chain": ["make_stubs", "weave"]},
        {"priority": 90, "predicate": {"colocated": True, "context_has": "memory_limit"}, "chain": ["compose_simple", "optimize(context)"]},
        {"priority": 80, "predicate": {"colocated": True, "api_class": "full"}, "chain": ["compose_simple"]},
        {"priority": 70, "predicate": {"colocated": False, "context_has": "flaky"}, "chain": ["make_stubs", "attach_caches", "compose_simple"]},
        {"priority": 60, "predicate": {"colocated": False, "link_state": "up"}, "chain": ["make_stubs", "compose_simple"]},
        {"priority": 50, "predicate": {"colocated": False}, "chain": ["make_stubs", "attach_caches", "compose_simple"]},
        {"priority": 0, "predicate": {}, "chain": ["compose_simple"]},
    ]
)


def decide_from_facts(facts: dict, rules: list[StrategyRule] = DEFAULT_RULES) -> TechniqueChain:
    for rule in rules:
        if rule.matches(facts):
            chain = rule.chain
            if facts.get("needs_transform"):
                chain = chain.with_transform()
            return chain
    raise NoApplicableRule(f"no rule matches {facts}")


# ---------------------------------------------------------------------------
# negotiation


def _accept_any(report: MatchReport) -> bool:
    return report.feasible


def _accept_api_full(report: MatchReport) -> bool:
    return report.api_class == FULL


POLICIES: dict[str, Callable[[MatchReport], bool]] = {
    "accept-any-feasible": _accept_any,
    "accept-api-full-only": _accept_api_full,
}


def candidate_rank(report: MatchReport) -> int:
    if report.api_class == FULL:
        return 0
    if report.api_class == PARTIAL:
        return 1
    if report.semantic_class == FULL:
        return 2
    return 3


@dataclass
class Substitution:
    missing: str
    substitute: str
    report: MatchReport

    def to_dict(self) -> dict:
        return {
            "missing": self.missing,
            "substitute": self.substitute,
            "api_class": self.report.api_class,
            "semantic_class": self.report.semantic_class,
        }


@dataclass
class NegotiationOutcome:
    rounds: int
    agreed: bool
    substitutions: list[Substitution] = field(default_factory=list)
    reason: str = ""

    @property
    def mapping(self) -> dict[str, str]:
        return {s.missing: s.substitute for s in self.substitutions}

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "result": "agreed" if self.agreed else "failed",
            "reason": self.reason,
            "substitutions": [s.to_dict() for s in self.substitutions],
        }


# ---------------------------------------------------------------------------
# records


@dataclass
class IntegrationRequest:
    target: str
    members: list[str]
    constraints: dict = field(default_factory=dict)
    ttl: int | None = None
    policy: str = "accept-any-feasible"

    def __post_init__(self):
        if not self.members:
            raise IntegrationException("InvalidRequest", "members must be non-empty")
        if self.target in self.members:
            raise IntegrationException("InvalidRequest", "target cannot be one of its members")
        if self.policy not in POLICIES:
            raise IntegrationException("InvalidRequest", f"unknown policy {self.policy!r}")


@dataclass
class UndoLog:
    """Everything an integration added, so it can be taken back exactly."""

    services: list[tuple[str, str]] = field(default_factory=list)  # (node, id), creation order
    skeletons: list[tuple[str, str]] = field(default_factory=list)
    peers: dict[str, dict] = field(default_factory=dict)
    announced: dict[str, set] = field(default_factory=dict)

    def touch(self, node: Node) -> None:
        if node.node_id not in self.peers:
            self.peers[node.node_id] = copy.deepcopy(node.peers)
            self.announced[node.node_id] = set(node.announced)


@dataclass
class IntegrationRecord:
    record_id: int
    composite_id: str
    target: str
    members: list[str]
    chain: TechniqueChain
    created_at: int
    ttl: int | None
    host: str
    request: IntegrationRequest
    undo: UndoLog
    plan: CompositePlan | None = None
    state: str = "active"

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "composite_id": self.composite_id,
            "target": self.target,
            "members": list(self.members),
            "chain": self.chain.names(),
            "created_at": self.created_at,
            "ttl": self.ttl,
            "host": self.host,
            "state": self.state,
        }


@dataclass
class LogicalClock:
    now: int = 0

    def set(self, now: int) -> int:
        self.now = max(self.now, int(now))
        return self.now

    def advance(self, delta: int) -> int:
        self.now += int(delta)
        return self.now


@dataclass(frozen=True)
class ContextFactChanged:
    key: str
    node_id: str | None = None


# ---------------------------------------------------------------------------
# orchestrator


class IntegServ:
    def __init__(
        self,
        network: Network,
        node_id: str,
        rules: list[StrategyRule] | None = None,
        table: ConceptTable = EMPTY_TABLE,
        max_rounds: int = 3,
        clock: LogicalClock | None = None,
        coalesce_policy: str = "none",
    ):
        self.network = network
        self.node_id = node_id
        network.add_node(node_id)
        self.rules = rules if rules is not None else DEFAULT_RULES
        self.table = table
        self.max_rounds = max_rounds
        self.clock = clock or LogicalClock()
        self.coalesce_policy = coalesce_policy
        self.records: list[IntegrationRecord] = []
        self.context_reports: list[dict] = []
        self.retry: list[int] = []  # records whose expiry was blocked by InUse
        self.known: dict[str, ServiceDescriptor] = {}
        self._reg_order: dict[str, int] = {}
        self._seq = itertools.count()
        self._record_ids = itertools.count(1)
        self._internal: set[str] = set()
        self._lock = threading.RLock()
        for node in network.nodes.values():
            self._watch(node)
        network.node_listeners.append(self._watch)

    # -- registry observation --------------------------------------------------

    def _watch(self, node: Node) -> None:
        for sid in node.registry.service_ids():
            self._remember(node, sid)
        node.registry.subscribe(lambda e, n=node: self._on_event(n, e))

    def _remember(self, node: Node, sid: str) -> None:
        self.known[sid] = copy.deepcopy(node.registry.get(sid))
        self._reg_order.setdefault(sid, next(self._seq))

    def _on_event(self, node: Node, event) -> None:
        if isinstance(event, ServiceRegistered):
            if event.service_id not in self._internal:
                self._remember(node, event.service_id)
        elif isinstance(event, ServiceUnregistered) and event.service_id not in self._internal:
            report = self.on_context_change(event)
            if report["actions"]:
                self.context_reports.append(report)

    def locate(self, service_id: str) -> Node | None:
        return self.network.locate(service_id)

    # -- Integrable -------------------------------------------------------------

    def integrate(
        self,
        target: str,
        members: list[str],
        *,
        ttl: int | None = None,
        constraints: dict | None = None,
        policy: str = "accept-any-feasible",
    ) -> str:
        with self._lock:
            request = IntegrationRequest(target, list(members), dict(constraints or {}), ttl, policy)
            if self.locate(target) is None:
                raise IntegrationException("UnknownService", f"target {target} is not registered")
            missing = [m for m in request.members if self.locate(m) is None]
            resolved = list(request.members)
            if missing:
                outcome = self.negotiate(request, missing)
                if not outcome.agreed:
                    raise IntegrationException("NegotiationFailed", outcome.reason)
                resolved = [outcome.mapping.get(m, m) for m in resolved]
            return self._realize(request, resolved).composite_id

    def unintegrate(self, target: str, members: list[str]) -> None:
        with self._lock:
            rec = self._find(target, members)
            if rec is None:
                raise UnIntegrationException("NotAvailable", f"no active integration of {members} into {target}")
            gone = [s for s in [rec.target, *rec.members] if self.locate(s) is None]
            if gone:
                raise UnIntegrationException("NotAvailable", f"{gone} no longer available")
            users = self._users_of(rec)
            if users:
                raise UnIntegrationException("InUse", f"{rec.composite_id} is used by {users}")
            self._teardown(rec)
            rec.state = "unintegrated"

    def get_integrated_services(self, target: str) -> list[str]:
        if self.locate(target) is None:
            raise UnknownService(target)
        out: list[str] = []
        for rec in self.records:
            if rec.state == "active" and rec.target == target:
                out.extend(m for m in rec.members if m not in out)
        return out

    def integrable(self, service_id: str) -> "Integrable":
        return Integrable(self, service_id)

    # -- decision ---------------------------------------------------------------

    def facts(self, participants: list[str], constraints: dict | None = None) -> dict:
        constraints = constraints or {}
        placement = {}
        for sid in participants:
            node = self.locate(sid)
            if node is None:
                raise UnknownService(sid)
            placement[sid] = node.node_id
        colocated = len(set(placement.values())) == 1
        host = next(iter(placement.values())) if colocated else constraints.get("node", self.node_id)
        link_state = None
        if not colocated:
            states = []
            for n in sorted(set(placement.values()) - {host}):
                states.append(self.network.link(host, n).state if self.network.has_link(host, n) else "missing")
            link_state = UP if all(s == UP for s in states) else "down"
        api, sem, transform = FULL, FULL, False
        for a, b in zip(participants, participants[1:]):
            r = classify(self.locate(a).registry.get(a), self.locate(b).registry.get(b), self.table)
            api = min(api, r.api_class, key=_CLASS_ORDER.__getitem__)
            sem = min(sem, r.semantic_class, key=_CLASS_ORDER.__getitem__)
            transform = transform or r.transform_plan is not None
        context = dict(self.network.nodes[host].context.external)
        context.update(constraints)
        return {
            "colocated": colocated,
            "host": host,
            "link_state": link_state,
            "api_class": api,
            "semantic_class": sem,
            "needs_transform": transform,
            "context": context,
        }

    def decide(self, request: IntegrationRequest, members: list[str] | None = None) -> TechniqueChain:
        participants = [request.target, *(members or request.members)]
        return decide_from_facts(self.facts(participants, request.constraints), self.rules)

    # -- negotiation ------------------------------------------------------------

    def candidates(self, missing: str, exclude: set[str]) -> list[tuple[str, MatchReport]]:
        wanted = self.known.get(missing)
        if wanted is None:
            return []
        ranked = []
        for node in self.network.nodes.values():
            for sid, desc in node.registry.services.items():
                if sid in exclude or sid in self._internal or sid == missing:
                    continue
                report = classify(wanted, desc, self.table)
                if report.feasible:
                    ranked.append((candidate_rank(report), self._reg_order.get(sid, 1 << 30), sid, report))
        ranked.sort(key=lambda t: (t[0], t[1]))
        return [(sid, report) for _, _, sid, report in ranked]

    def negotiate(
        self,
        request: IntegrationRequest,
        missing: list[str],
        policy: str | None = None,
        max_rounds: int | None = None,
    ) -> NegotiationOutcome:
        accept = POLICIES[policy or request.policy]
        max_rounds = self.max_rounds if max_rounds is None else max_rounds
        exclude = {request.target, *request.members}
        ranked = {m: self.candidates(m, exclude) for m in missing}
        position = {m: 0 for m in missing}
        agreed: dict[str, Substitution] = {}
        rounds = 0
        while len(agreed) < len(missing):
            if rounds >= max_rounds:
                return NegotiationOutcome(rounds, False, [], f"no agreement within {max_rounds} round(s)")
            rounds += 1
            taken = {s.substitute for s in agreed.values()}
            for m in missing:
                if m in agreed:
                    continue
                options = [c for c in ranked[m][position[m]:] if c[0] not in taken]
                if not options:
                    return NegotiationOutcome(rounds, False, [], f"exhausted: no acceptable substitute for {m}")
                sid, report = options[0]
                if accept(report):
                    agreed[m] = Substitution(m, sid, report)
                    taken.add(sid)
                else:
                    position[m] = ranked[m].index(options[0]) + 1
        return NegotiationOutcome(rounds, True, [agreed[m] for m in missing])

    # -- technical integration ------------------------------------------------------

    def _realize(self, request: IntegrationRequest, members: list[str]) -> IntegrationRecord:
        participants = [request.target, *members]
        try:
            facts = self.facts(participants, request.constraints)
            chain = decide_from_facts(facts, self.rules)
        except AnisError as exc:
            raise IntegrationException(exc.cause, str(exc)) from exc
        undo = UndoLog()
        try:
            composite_id, plan = self.execute_chain(chain, participants, facts, request, undo)
        except AnisError as exc:
            self._rollback(undo)
            raise IntegrationException(exc.cause, str(exc)) from exc
        rec = IntegrationRecord(
            record_id=next(self._record_ids),
            composite_id=composite_id,
            target=request.target,
            members=list(members),
            chain=chain,
            created_at=self.clock.now,
            ttl=request.ttl,
            host=facts["host"],
            request=request,
            undo=undo,
            plan=plan,
        )
        self.records.append(rec)
        return rec

    def _fresh_id(self, registry, base: str) -> str:
        sid, k = base, 2
        while sid in registry:
            sid, k = f"{base}#{k}", k + 1
        return sid

    def execute_chain(
        self,
        chain: TechniqueChain,
        participants: list[str],
        facts: dict,
        request: IntegrationRequest,
        undo: UndoLog,
    ) -> tuple[str, CompositePlan]:
        host = facts["host"]
        host_node = self.network.nodes[host]
        registry = host_node.registry
        new_id = request.constraints.get("new_id") or "+".join(participants)
        new_id = self._fresh_id(registry, new_id)
        local_ids = list(participants)
        stubs: list[Stub] = []
        plan: CompositePlan | None = None

        for step in chain.steps:
            if step.name == "transform":
                continue  # renames travel inside the dispatch plan
            if step.name == "make_stubs":
                for k, sid in enumerate(participants):
                    owner = self.locate(sid)
                    if owner.node_id == host:
                        continue
                    stub = self._stub_for(sid, owner, host_node, undo)
                    stubs.append(stub)
                    local_ids[k] = stub.id
            elif step.name == "attach_caches":
                for stub in stubs:
                    self.network.attach_cache(stub, request.constraints.get("coalesce", self.coalesce_policy))
            elif step.name in ("compose_simple", "weave"):
                build = compose_simple if step.name == "compose_simple" else weave
                plan = build([self._descriptor(s, host) for s in local_ids], new_id, host, self.table)
            elif step.name == "optimize":
                if plan is None:
                    plan = compose_simple([self._descriptor(s, host) for s in local_ids], new_id, host, self.table)
                host_ctx = ContextModel.from_dict(host_node.context.to_dict())
                if "memory_limit" in request.constraints:
                    host_ctx.external["memory_limit"] = request.constraints["memory_limit"]
                plan = optimize(plan, registry, host_ctx, OptimizationProfile.from_names(step.options))
        if plan is None:
            plan = compose_simple([self._descriptor(s, host) for s in local_ids], new_id, host, self.table)
        self._internal.add(new_id)
        materialize(plan, registry)
        undo.services.append((host, new_id))
        return new_id, plan

    def _descriptor(self, sid: str, host: str) -> ServiceDescriptor:
        node = self.locate(sid)
        if node is None:
            raise UnknownService(sid)
        return node.registry.get(sid)

    def _stub_for(self, sid: str, owner: Node, host_node: Node, undo: UndoLog) -> Stub:
        net = self.network
        if not net.has_link(owner.node_id, host_node.node_id):
            raise NoLink(f"{owner.node_id}<->{host_node.node_id}")
        if sid not in owner.skeletons:
            net.make_skeleton(sid, owner.node_id)
            undo.skeletons.append((owner.node_id, sid))
        undo.touch(owner)
        undo.touch(host_node)
        for peer in net.neighbours(owner.node_id):
            undo.touch(net.nodes[peer])
        if net.link(owner.node_id, host_node.node_id).state == UP:
            net.announce(owner.node_id, [sid])
        else:
            # link is down: fall back on the last summary we saw
            host_node.peers[(owner.node_id, sid)] = summary_of(self.known[sid])
        stub_id = self._fresh_id(host_node.registry, f"{sid}@{owner.node_id}")
        self._internal.add(stub_id)
        stub = net.make_stub(sid, owner.node_id, host_node.node_id, stub_id)
        undo.services.append((host_node.node_id, stub_id))
        return stub

    def _rollback(self, undo: UndoLog) -> None:
        for node_id, sid in reversed(undo.services):
            node = self.network.nodes.get(node_id)
            if node is not None and sid in node.registry:
                node.registry.unregister_service(sid)
        for node_id, sid in undo.skeletons:
            node = self.network.nodes.get(node_id)
            if node is not None:
                node.skeletons.pop(sid, None)
        for node_id, peers in undo.peers.items():
            node = self.network.nodes[node_id]
            node.peers = copy.deepcopy(peers)
            node.announced = set(undo.announced[node_id])

    def _teardown(self, rec: IntegrationRecord) -> None:
        self._rollback(rec.undo)

    def _find(self, target: str, members: list[str]) -> IntegrationRecord | None:
        wanted = set(members)
        for rec in self.records:
            if rec.state != "active" or rec.target != target:
                continue
            if set(rec.members) == wanted or set(rec.request.members) == wanted:
                return rec
        return None

    def _users_of(self, rec: IntegrationRecord) -> list[str]:
        own = {sid for _, sid in rec.undo.services}
        users = []
        for node in self.network.nodes.values():
            for sid, desc in node.registry.services.items():
                if sid in own:
                    continue
                if any(b.target == rec.composite_id for b in desc.bindings):
                    users.append(sid)
            for stub in node.stubs.values():
                if stub.remote_service_id == rec.composite_id and stub.id not in own:
                    users.append(stub.id)
        return sorted(set(users))

    # -- life cycle ---------------------------------------------------------------

    def lifecycle_tick(self, now: int | None = None) -> list[int]:
        """Expire every active record whose created_at + ttl <= now."""
        with self._lock:
            if now is not None:
                self.clock.set(now)
            now = self.clock.now
            expired = []
            self.retry = []
            for rec in list(self.records):
                if rec.state != "active" or rec.ttl is None or rec.created_at + rec.ttl > now:
                    continue
                if self._users_of(rec):
                    self.retry.append(rec.record_id)
                    continue
                self._teardown(rec)
                rec.state = "expired"
                expired.append(rec.record_id)
            return expired

    def on_context_change(self, event: Any) -> dict:
        """React to a departed service or a changed context fact."""
        with self._lock:
            if isinstance(event, ServiceUnregistered):
                return self._on_departure(event.service_id)
            if isinstance(event, ContextFactChanged):
                return self._on_fact(event)
            return {"event": repr(event), "actions": []}

    def _on_departure(self, sid: str) -> dict:
        report = {"event": {"ServiceUnregistered": sid}, "actions": []}
        for rec in list(self.records):
            if rec.state != "active" or (sid not in rec.members and sid != rec.target):
                continue
            action = {"record_id": rec.record_id, "composite_id": rec.composite_id}
            outcome = None
            if sid != rec.target:
                outcome = self.negotiate(rec.request, [sid])
            self._teardown(rec)
            rec.state = "unintegrated"
            if outcome is None or not outcome.agreed:
                action["action"] = "unintegrated"
                if outcome is not None:
                    action["reason"] = outcome.reason
            else:
                members = [outcome.mapping.get(m, m) for m in rec.members]
                request = copy.deepcopy(rec.request)
                request.constraints.setdefault("new_id", rec.composite_id)
                try:
                    new = self._realize(request, members)
                except IntegrationException as exc:
                    action.update(action="unintegrated", reason=exc.cause)
                else:
                    new.created_at = self.clock.now
                    action.update(
                        action="reintegrated",
                        new_record_id=new.record_id,
                        new_composite_id=new.composite_id,
                        substitutions=outcome.mapping,
                    )
            report["actions"].append(action)
        return report

    def _on_fact(self, event: ContextFactChanged) -> dict:
        report = {"event": {"ContextFactChanged": event.key}, "actions": []}
        for rec in list(self.records):
            if rec.state != "active":
                continue
            if event.node_id is not None and event.node_id != rec.host:
                continue
            try:
                chain = self.decide(rec.request, rec.members)
            except AnisError:
                continue
            if chain == rec.chain:
                continue
            if self._users_of(rec):
                report["actions"].append({"record_id": rec.record_id, "action": "kept", "reason": "InUse"})
                continue
            self._teardown(rec)
            rec.state = "unintegrated"
            request = copy.deepcopy(rec.request)
            request.constraints.setdefault("new_id", rec.composite_id)
            try:
                new = self._realize(request, rec.members)
            except IntegrationException as exc:
                report["actions"].append({"record_id": rec.record_id, "action": "unintegrated", "reason": exc.cause})
            else:
                report["actions"].append(
                    {"record_id": rec.record_id, "action": "redecided", "new_record_id": new.record_id,
                     "chain": new.chain.names()}
                )
        return report

    def set_context_fact(self, node_id: str, key: str, value: Any) -> dict:
        node = self.network.nodes[node_id]
        if value is None:
            node.context.external.pop(key, None)
        else:
            node.context.external[key] = value
        report = self.on_context_change(ContextFactChanged(key, node_id))
        if report["actions"]:
            self.context_reports.append(report)
        return report


class Integrable:
    """The three-method contract, bound to one service."""

    def __init__(self, integserv: IntegServ, service_id: str):
        self.integserv = integserv
        self.service_id = service_id

    def integrate(self, services: list[str], **kw) -> str:
        return self.integserv.integrate(self.service_id, list(services), **kw)

    def unintegrate(self, services: list[str]) -> None:
        self.integserv.unintegrate(self.service_id, list(services))

    def get_integrated_services(self) -> list[str]:
        return self.integserv.get_integrated_services(self.service_id)
