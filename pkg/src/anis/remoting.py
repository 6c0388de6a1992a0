"""Remote combining over a simulated message fabric.

Connected combining adds a stub on the caller's node and a skeleton on the
owner's node; the stub is registered as an ordinary local facade service
whose bodies are a single opaque instruction handled natively by the stub.
Disconnected combining puts a consistency cache in front of a stub: while
the link is down calls are logged, and they are replayed in order once it
comes back.

Frames are length-prefixed JSON (4-byte big-endian length, then compact
UTF-8 JSON with keys in schema order).
"""

from __future__ import annotations

import copy
import json
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import (
    REMOTE_ERRORS,
    AnisError,
    LinkDown,
    MalformedFrame,
    NoLink,
    ReplayInterrupted,
    UnknownLink,
    UnknownMethod,
    UnknownRemote,
    UnknownService,
)
from .service_model import (
    STARTED,
    ContextModel,
    Instruction,
    InterfaceDescriptor,
    MethodBody,
    Registry,
    ServiceDescriptor,
    ServiceUnregistered,
)

log = logging.getLogger(__name__)

CALL, RESULT, ANNOUNCE, BYE, PING = "CALL", "RESULT", "ANNOUNCE", "BYE", "PING"
UP, DOWN = "up", "down"
NONE_POLICY, DROP_SUPERSEDED = "none", "drop_superseded"
PASSTHROUGH, BUFFERING, REPLAYING = "passthrough", "buffering", "replaying"
NEVER_DROP_IMPORTANCE = 8

# field order on the wire, per message kind
SCHEMA: dict[str, tuple[str, ...]] = {
    CALL: ("kind", "request_id", "sender", "receiver", "service_id", "method", "args"),
    RESULT: ("kind", "request_id", "sender", "receiver", "service_id", "method", "value", "error"),
    ANNOUNCE: ("kind", "request_id", "sender", "receiver", "summary"),
    BYE: ("kind", "request_id", "sender", "receiver", "service_id"),
    PING: ("kind", "request_id", "sender", "receiver"),
}


@dataclass
class WireMessage:
    kind: str
    request_id: int
    sender: str
    receiver: str
    service_id: str | None = None
    method: str | None = None
    args: list | None = None
    value: Any = None
    error: dict | None = None
    summary: list | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SCHEMA[self.kind]}


def encode(msg: WireMessage) -> bytes:
    body = json.dumps(msg.to_dict(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode(frame: bytes) -> WireMessage:
    msgs, rest = decode_stream(frame)
    if len(msgs) != 1 or rest:
        raise MalformedFrame("expected exactly one complete frame")
    return msgs[0]


def decode_stream(buf: bytes) -> tuple[list[WireMessage], bytes]:
    """Split a byte stream into messages; returns any trailing partial frame."""
    out = []
    pos = 0
    while len(buf) - pos >= 4:
        (n,) = struct.unpack_from(">I", buf, pos)
        if len(buf) - pos - 4 < n:
            break
        try:
            d = json.loads(buf[pos + 4 : pos + 4 + n].decode("utf-8"))
            kind = d["kind"]
            if kind not in SCHEMA or set(d) != set(SCHEMA[kind]):
                raise MalformedFrame(f"fields do not match the {kind} schema")
            out.append(WireMessage(**d))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedFrame(str(exc)) from exc
        pos += 4 + n
    return out, buf[pos:]


@dataclass
class Link:
    a: str
    b: str
    state: str = UP
    queues: dict = field(default_factory=dict)
    # goes down by itself after this many more RESULT deliveries (fault injection)
    fail_after: int | None = None

    def __post_init__(self):
        self.queues = {(self.a, self.b): deque(), (self.b, self.a): deque()}

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)


@dataclass(frozen=True)
class Buffered:
    seq: int


@dataclass
class LogEntry:
    seq: int
    method: str
    args: list
    importance: int
    idempotent: bool

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "method": self.method,
            "args": self.args,
            "importance": self.importance,
            "idempotent": self.idempotent,
        }


class Skeleton:
    """Answers CALL frames for one locally registered service."""

    def __init__(self, node: "Node", service_id: str):
        self.node = node
        self.service_id = service_id
        # (method, args, value, error) for every call answered, in order
        self.transcript: list[tuple[str, list, Any, str | None]] = []

    def answer(self, method: str, args: list) -> tuple[Any, dict | None]:
        try:
            value = self.node.registry.invoke(self.service_id, method, args)
        except AnisError as exc:
            self.transcript.append((method, list(args), None, exc.cause))
            return None, {"type": exc.cause, "message": str(exc)}
        self.transcript.append((method, list(args), copy.deepcopy(value), None))
        return value, None


class Stub:
    def __init__(self, network: "Network", stub_id: str, remote_id: str, remote_node: str, local_node: str):
        self.network = network
        self.local_facade_service_id = stub_id
        self.remote_service_id = remote_id
        self.remote_node = remote_node
        self.local_node = local_node
        self.pending: dict[int, Any] = {}
        self.results: dict[int, tuple[Any, dict | None]] = {}
        self.cache: ConsistencyCache | None = None
        self._lock = threading.RLock()

    @property
    def id(self) -> str:
        return self.local_facade_service_id

    @property
    def link(self) -> Link:
        return self.network.link(self.local_node, self.remote_node)

    def facade(self) -> ServiceDescriptor:
        return self.network.nodes[self.local_node].registry.get(self.id)

    def begin_call(self, method: str, args: list) -> int:
        rid = self.network.next_request_id(self.local_node, self.remote_node)
        self.pending[rid] = method
        self.network.send(
            WireMessage(CALL, rid, self.local_node, self.remote_node,
                        service_id=self.remote_service_id, method=method, args=list(args))
        )
        return rid

    def call(self, method: str, args: list) -> list:
        """Synchronous request/response; one outstanding request per caller."""
        with self._lock:
            rid = self.begin_call(method, args)
            self.network.run_until(lambda: rid in self.results or self.link.state == DOWN)
            if rid not in self.results:
                self.pending.pop(rid, None)
                raise LinkDown(f"{self.local_node}<->{self.remote_node} dropped during call")
            value, error = self.results.pop(rid)
            if error is not None:
                cls = REMOTE_ERRORS.get(error["type"], AnisError)
                raise cls(error["message"])
            return value

    def on_result(self, msg: WireMessage) -> None:
        if self.pending.pop(msg.request_id, None) is None:
            log.warning("RESULT %s on %s matches no pending CALL", msg.request_id, self.id)
            return
        self.results[msg.request_id] = (msg.value, msg.error)

    def handle(self, service_id: str, method: str, args: list) -> list:
        """Native handler for the facade's opaque bodies."""
        target = self.cache if self.cache is not None else self
        out = self.network.remote_invoke(target, method, args)
        return [] if isinstance(out, Buffered) else out


class ConsistencyCache:
    def __init__(self, stub: Stub, policy: str = NONE_POLICY):
        if policy not in (NONE_POLICY, DROP_SUPERSEDED):
            raise ValueError(f"unknown coalesce policy {policy!r}")
        self.owner = stub
        self.coalesce_policy = policy
        self.log: deque[LogEntry] = deque()
        self.mode = PASSTHROUGH
        self._seq = 0
        self._lock = threading.RLock()

    def append(self, method: str, args: list, importance: int, idempotent: bool) -> int:
        with self._lock:
            self._seq += 1
            self.log.append(LogEntry(self._seq, method, list(args), importance, idempotent))
            self.mode = BUFFERING
            return self._seq

    def plan(self) -> tuple[list[LogEntry], list[LogEntry]]:
        """Split the log into (to send, coalesced) according to the policy."""
        entries = list(self.log)
        if self.coalesce_policy == NONE_POLICY:
            return entries, []
        send, dropped = [], []
        for k, e in enumerate(entries):
            nxt = entries[k + 1] if k + 1 < len(entries) else None
            superseded = (
                e.idempotent and nxt is not None and nxt.method == e.method and nxt.idempotent
            )
            if superseded and e.importance < NEVER_DROP_IMPORTANCE:
                dropped.append(e)
            else:
                send.append(e)
        return send, dropped


@dataclass
class Node:
    node_id: str
    registry: Registry
    context: ContextModel = field(default_factory=ContextModel)
    # (remote node, service id) -> announced summary
    peers: dict[tuple[str, str], dict] = field(default_factory=dict)
    skeletons: dict[str, Skeleton] = field(default_factory=dict)
    stubs: dict[str, Stub] = field(default_factory=dict)
    announced: set[str] = field(default_factory=set)


def summary_of(desc: ServiceDescriptor) -> dict:
    return {
        "service_id": desc.service_id,
        "node_id": desc.node_id,
        "interfaces": [i.to_dict() for i in desc.interfaces],
    }


class Network:
    """In-process fabric: nodes, links with per-direction FIFO queues, and
    the stub/skeleton/cache machinery riding on top.

    With ``auto_deliver`` (the default) every send is drained immediately
    and calls are synchronous.  Without it messages stay queued until
    :meth:`deliver` is called, which lets tests drive arbitrary schedules.
    """

    def __init__(self, auto_deliver: bool = True):
        self.auto_deliver = auto_deliver
        self.nodes: dict[str, Node] = {}
        self.links: dict[frozenset, Link] = {}
        self.trace: list[WireMessage] = []  # every delivered message, in order
        self.replay_reports: list[dict] = []
        self.node_listeners: list[Callable[[Node], None]] = []
        self._counters: dict[tuple[str, str], int] = {}
        self._lock = threading.RLock()

    # -- topology -----------------------------------------------------------

    def add_node(self, node_id: str, context: ContextModel | None = None) -> Node:
        if node_id in self.nodes:
            return self.nodes[node_id]
        registry = Registry(node_id)
        node = Node(node_id, registry, context or ContextModel())
        registry.subscribe(lambda e, n=node: self._on_registry_event(n, e))
        self.nodes[node_id] = node
        for listener in list(self.node_listeners):
            listener(node)
        return node

    def add_link(self, a: str, b: str, state: str = UP) -> Link:
        for n in (a, b):
            self.add_node(n)
        key = frozenset((a, b))
        if key not in self.links:
            self.links[key] = Link(a, b, state)
        return self.links[key]

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise UnknownLink(f"{a}<->{b}") from None

    def has_link(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.links

    def link_set_state(self, a: str, b: str, state: str) -> list[dict]:
        """Toggle a link; a down->up transition replays caches riding on it."""
        if state not in (UP, DOWN):
            raise ValueError(f"link state must be up or down, not {state!r}")
        link = self.link(a, b)
        previous, link.state = link.state, state
        reports = []
        if previous == DOWN and state == UP:
            self.pump()
            for cache in self.caches_on(link):
                if cache.log:
                    try:
                        reports.append(self.replay(cache))
                    except ReplayInterrupted as exc:
                        reports.append({"stub": cache.owner.id, "interrupted": str(exc), "sent": exc.sent})
        return reports

    def caches_on(self, link: Link) -> list[ConsistencyCache]:
        out = []
        for node in self.nodes.values():
            for stub in node.stubs.values():
                if stub.cache is not None and frozenset((stub.local_node, stub.remote_node)) == frozenset(link.endpoints):
                    out.append(stub.cache)
        return out

    def locate(self, service_id: str) -> Node | None:
        for node in self.nodes.values():
            if service_id in node.registry:
                return node
        return None

    def state(self) -> dict:
        return {nid: n.registry.state() for nid, n in sorted(self.nodes.items())}

    # -- transport ----------------------------------------------------------

    def next_request_id(self, sender: str, receiver: str) -> int:
        with self._lock:
            n = self._counters.get((sender, receiver), 0) + 1
            self._counters[(sender, receiver)] = n
            return n

    def send(self, msg: WireMessage) -> None:
        if not self.has_link(msg.sender, msg.receiver):
            raise NoLink(f"{msg.sender}->{msg.receiver}")
        link = self.link(msg.sender, msg.receiver)
        if link.state == DOWN:
            raise LinkDown(f"{msg.sender}->{msg.receiver}")
        # frames cross the link as bytes so nothing mutable is shared
        link.queues[(msg.sender, msg.receiver)].append(encode(msg))
        if self.auto_deliver:
            self.pump()

    def pending(self) -> list[tuple[str, str]]:
        """Directions with at least one queued frame on an up link."""
        out = []
        for link in self.links.values():
            if link.state == DOWN:
                continue
            for direction, q in link.queues.items():
                if q:
                    out.append(direction)
        return sorted(out)

    def deliver(self, sender: str, receiver: str) -> WireMessage | None:
        """Deliver the oldest queued frame on one direction of a link."""
        link = self.link(sender, receiver)
        q = link.queues[(sender, receiver)]
        if link.state == DOWN or not q:
            return None
        msg = decode(q.popleft())
        self.trace.append(msg)
        self._dispatch(msg)
        if msg.kind == RESULT and link.fail_after is not None:
            link.fail_after -= 1
            if link.fail_after <= 0:
                link.fail_after = None
                link.state = DOWN
        return msg

    def pump(self) -> int:
        n = 0
        while True:
            ready = self.pending()
            if not ready:
                return n
            self.deliver(*ready[0])
            n += 1

    def run_until(self, done: Callable[[], bool]) -> None:
        while not done():
            ready = self.pending()
            if not ready:
                return
            self.deliver(*ready[0])

    def _dispatch(self, msg: WireMessage) -> None:
        node = self.nodes[msg.receiver]
        if msg.kind == CALL:
            skel = node.skeletons.get(msg.service_id)
            if skel is None:
                value, error = None, {"type": "UnknownService", "message": f"no skeleton for {msg.service_id} on {node.node_id}"}
            else:
                value, error = skel.answer(msg.method, msg.args or [])
            reply = WireMessage(RESULT, msg.request_id, msg.receiver, msg.sender,
                                service_id=msg.service_id, method=msg.method, value=value, error=error)
            try:
                self.send(reply)
            except (LinkDown, NoLink):
                log.warning("RESULT %s lost: link %s<->%s down", msg.request_id, msg.receiver, msg.sender)
        elif msg.kind == RESULT:
            for stub in self.nodes[msg.receiver].stubs.values():
                if msg.request_id in stub.pending and stub.remote_node == msg.sender:
                    stub.on_result(msg)
                    break
        elif msg.kind == ANNOUNCE:
            for s in msg.summary or ():
                node.peers[(msg.sender, s["service_id"])] = s
        elif msg.kind == BYE:
            node.peers.pop((msg.sender, msg.service_id), None)

    # -- discovery ----------------------------------------------------------

    def neighbours(self, node_id: str) -> list[str]:
        out = []
        for link in self.links.values():
            if node_id in link.endpoints and link.state == UP:
                out.append(link.b if link.a == node_id else link.a)
        return sorted(out)

    def announce(self, node_id: str, service_ids: list[str] | None = None) -> None:
        node = self.nodes[node_id]
        ids = service_ids if service_ids is not None else node.registry.service_ids()
        summaries = [summary_of(node.registry.get(s)) for s in ids]
        node.announced |= set(ids)
        for peer in self.neighbours(node_id):
            self.send(WireMessage(ANNOUNCE, self.next_request_id(node_id, peer), node_id, peer, summary=summaries))

    def bye(self, node_id: str, service_id: str) -> None:
        node = self.nodes[node_id]
        node.announced.discard(service_id)
        for peer in self.neighbours(node_id):
            self.send(WireMessage(BYE, self.next_request_id(node_id, peer), node_id, peer, service_id=service_id))

    def ping(self, a: str, b: str) -> None:
        self.send(WireMessage(PING, self.next_request_id(a, b), a, b))

    def _on_registry_event(self, node: Node, event) -> None:
        if isinstance(event, ServiceUnregistered):
            node.skeletons.pop(event.service_id, None)
            stub = node.stubs.pop(event.service_id, None)
            if stub is not None:
                node.registry.natives.pop(_tag(stub.id), None)
            if event.service_id in node.announced:
                self.bye(node.node_id, event.service_id)

    # -- connected combining --------------------------------------------------

    def make_skeleton(self, service_id: str, node_id: str) -> Skeleton:
        node = self.nodes[node_id]
        if service_id not in node.registry:
            raise UnknownService(f"{service_id} on {node_id}")
        if service_id not in node.skeletons:
            node.skeletons[service_id] = Skeleton(node, service_id)
        return node.skeletons[service_id]

    def make_stub(
        self, remote_id: str, remote_node: str, local_node: str, stub_id: str | None = None
    ) -> Stub:
        if not self.has_link(local_node, remote_node):
            raise NoLink(f"{local_node}<->{remote_node}")
        node = self.nodes[local_node]
        summary = node.peers.get((remote_node, remote_id))
        if summary is None:
            raise UnknownRemote(f"{remote_id} on {remote_node} is not announced to {local_node}")
        stub_id = stub_id or f"{remote_id}@{remote_node}"
        stub = Stub(self, stub_id, remote_id, remote_node, local_node)
        tag = _tag(stub_id)
        interfaces = [InterfaceDescriptor.from_dict(i) for i in summary["interfaces"]]
        bodies = {
            (i.id, m.name): MethodBody((i.id, m.name), [Instruction("opaque", tag)])
            for i in interfaces
            for m in i.methods
        }
        facade = ServiceDescriptor(
            service_id=stub_id,
            node_id=local_node,
            interfaces=interfaces,
            bodies=bodies,
            context=ContextModel({"run_state": STARTED}, {"remote": f"{remote_id}@{remote_node}"}),
        )
        node.registry.natives[tag] = stub.handle
        node.stubs[stub_id] = stub
        try:
            node.registry.register_service(facade)
        except AnisError:
            node.stubs.pop(stub_id, None)
            node.registry.natives.pop(tag, None)
            raise
        return stub

    def stub(self, node_id: str, stub_id: str) -> Stub:
        try:
            return self.nodes[node_id].stubs[stub_id]
        except KeyError:
            raise UnknownService(f"no stub {stub_id} on {node_id}") from None

    # -- disconnected combining -------------------------------------------------

    def attach_cache(self, stub: Stub, policy: str = NONE_POLICY) -> ConsistencyCache:
        if stub.cache is None:
            stub.cache = ConsistencyCache(stub, policy)
        return stub.cache

    def remote_invoke(
        self,
        target: Stub | ConsistencyCache,
        method: str,
        args: list | tuple = (),
        importance: int | None = None,
    ) -> list | Buffered:
        stub = target.owner if isinstance(target, ConsistencyCache) else target
        cache = stub.cache
        found = stub.facade().find_method(method)
        if found is None:
            raise UnknownMethod(f"{stub.id}.{method}")
        _, sig = found
        if stub.link.state == UP:
            if cache is not None and cache.log:
                self.replay(cache)
            return stub.call(method, list(args))
        if cache is None:
            raise LinkDown(f"{stub.local_node}<->{stub.remote_node}")
        ann = sig.annotations
        seq = cache.append(
            method, list(args), ann.importance if importance is None else importance, ann.idempotent
        )
        return Buffered(seq)

    def replay(self, cache: ConsistencyCache) -> dict:
        """Send the logged calls in FIFO order, honouring the coalesce policy."""
        stub = cache.owner
        with cache._lock:
            send, dropped = cache.plan()
            dropped_seqs = {e.seq for e in dropped}
            cache.mode = REPLAYING
            report = {"stub": stub.id, "sent": [], "coalesced": [], "results": {}}
            for e in send:
                if stub.link.state == DOWN:
                    cache.mode = BUFFERING
                    raise ReplayInterrupted(
                        f"link {stub.local_node}<->{stub.remote_node} dropped mid-replay",
                        report["sent"],
                    )
                try:
                    value = stub.call(e.method, e.args)
                    report["results"][e.seq] = value
                except LinkDown:
                    cache.mode = BUFFERING
                    raise ReplayInterrupted(
                        f"link {stub.local_node}<->{stub.remote_node} dropped mid-replay",
                        report["sent"],
                    ) from None
                except AnisError as exc:
                    report["results"][e.seq] = {"error": exc.cause}
                # the entry and everything it superseded leave the log together
                while cache.log and cache.log[0].seq <= e.seq:
                    gone = cache.log.popleft()
                    if gone.seq in dropped_seqs:
                        report["coalesced"].append(gone.seq)
                report["sent"].append(e.seq)
            while cache.log and cache.log[0].seq in dropped_seqs:
                report["coalesced"].append(cache.log.popleft().seq)
            cache.mode = PASSTHROUGH
        self.replay_reports.append(report)
        return report


def _tag(stub_id: str) -> str:
    return f"stub:{stub_id}"


def compose_with_cache(
    network: Network, node_id: str, local_id: str, cache: ConsistencyCache, new_id: str
) -> ServiceDescriptor:
    """Simple-compose a local service with the facade its cache sits behind."""
    from .combining import compose_simple, materialize

    registry = network.nodes[node_id].registry
    plan = compose_simple(
        [registry.get(local_id), registry.get(cache.owner.id)], new_id, node_id
    )
    return materialize(plan, registry)
