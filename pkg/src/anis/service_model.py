"""Four-part service model, per-node registry and the body interpreter.

A service is made of interfaces, bindings, objects (here: instruction
bodies attached to methods) and a context.  Bodies are small instruction
lists rather than native code so that weaving, remote redirection and
replay all stay deterministic and inspectable.

Expressions that may appear inside instruction payloads:

* ``{"arg": i}``                 -- i-th call argument
* ``{"var": name}``              -- a local bound by ``read_context``
* ``{"coerce": type, "expr": e}``  -- ``e`` converted to ``type``
* ``{"lit": v}``                 -- ``v`` taken verbatim
* anything else                  -- a literal value
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import (
    ArityMismatch,
    DuplicateId,
    ExecutionError,
    MalformedDescriptor,
    MalformedSnapshot,
    ServiceStopped,
    UnboundBinding,
    UnknownMethod,
    UnknownService,
)

FUNCTIONAL = "functional"
MANAGEMENT = "management"
INTERFACE_KINDS = (FUNCTIONAL, MANAGEMENT)
REQUIRES = "requires"
PROVIDES = "provides"
STARTED = "started"
STOPPED = "stopped"
OPS = ("emit", "read_context", "write_context", "invoke_binding", "opaque")
RESERVED_INTERNAL = ("run_state", "params")

# management methods the runtime answers when a service ships no body for them
RUNTIME_MANAGEMENT = ("start", "stop", "getState")


@dataclass(frozen=True)
class Annotations:
    memory_cost: int = 0
    importance: int = 5
    idempotent: bool = False
    atomic: bool = False

    def to_dict(self) -> dict:
        return {
            "memory_cost": self.memory_cost,
            "importance": self.importance,
            "idempotent": self.idempotent,
            "atomic": self.atomic,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "Annotations":
        return cls(**(d or {}))


@dataclass(frozen=True)
class MethodSignature:
    name: str
    inputs: tuple[str, ...] = ()
    output: str = "void"
    concept: str | None = None
    annotations: Annotations = field(default_factory=Annotations)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def arity(self) -> int:
        return len(self.inputs)

    def same_signature(self, other: "MethodSignature") -> bool:
        return (
            self.name == other.name
            and self.inputs == other.inputs
            and self.output == other.output
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": list(self.inputs),
            "output": self.output,
            "concept": self.concept,
            "annotations": self.annotations.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSignature":
        return cls(
            name=d["name"],
            inputs=tuple(d.get("inputs", ())),
            output=d.get("output", "void"),
            concept=d.get("concept"),
            annotations=Annotations.from_dict(d.get("annotations")),
        )


@dataclass
class InterfaceDescriptor:
    id: str
    kind: str = FUNCTIONAL
    methods: list[MethodSignature] = field(default_factory=list)

    def method(self, name: str) -> MethodSignature | None:
        for m in self.methods:
            if m.name == name:
                return m
        return None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "methods": [m.to_dict() for m in self.methods],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterfaceDescriptor":
        return cls(
            id=d["id"],
            kind=d.get("kind", FUNCTIONAL),
            methods=[MethodSignature.from_dict(m) for m in d.get("methods", ())],
        )


@dataclass
class Binding:
    """A run-time dependency.  ``name`` is the handle bodies use to call
    through the binding; it defaults to the interface id."""

    required_interface: str
    target: str | None = None
    role: str = REQUIRES
    name: str = ""

    def __post_init__(self):
        if not self.name:
            self.name = self.required_interface

    def to_dict(self) -> dict:
        return {
            "required_interface": self.required_interface,
            "target": self.target,
            "role": self.role,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Binding":
        return cls(
            required_interface=d["required_interface"],
            target=d.get("target"),
            role=d.get("role", REQUIRES),
            name=d.get("name", ""),
        )


@dataclass
class Instruction:
    op: str
    payload: Any = None

    def to_dict(self) -> dict:
        return {"op": self.op, "payload": copy.deepcopy(self.payload)}

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(op=d["op"], payload=copy.deepcopy(d.get("payload")))


def emit(value: Any) -> Instruction:
    return Instruction("emit", value)


def read_context(key: str, into: str | None = None) -> Instruction:
    return Instruction("read_context", {"key": key, "as": into or key})


def write_context(key: str, value: Any) -> Instruction:
    return Instruction("write_context", {"key": key, "value": value})


def invoke_binding(binding: str, method: str, args: Iterable[Any] = ()) -> Instruction:
    return Instruction(
        "invoke_binding", {"binding": binding, "method": method, "args": list(args)}
    )


def opaque(tag: str) -> Instruction:
    return Instruction("opaque", tag)


@dataclass
class MethodBody:
    signature_ref: tuple[str, str]
    instructions: list[Instruction] = field(default_factory=list)

    def __post_init__(self):
        self.signature_ref = tuple(self.signature_ref)

    def to_dict(self) -> dict:
        return {
            "signature_ref": list(self.signature_ref),
            "instructions": [i.to_dict() for i in self.instructions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodBody":
        return cls(
            signature_ref=tuple(d["signature_ref"]),
            instructions=[Instruction.from_dict(i) for i in d.get("instructions", ())],
        )


@dataclass
class ContextModel:
    internal: dict = field(default_factory=dict)
    external: dict = field(default_factory=dict)

    def __post_init__(self):
        self.internal.setdefault("run_state", STOPPED)
        self.internal.setdefault("params", {})

    @property
    def run_state(self) -> str:
        return self.internal["run_state"]

    def to_dict(self) -> dict:
        return {
            "internal": copy.deepcopy(self.internal),
            "external": copy.deepcopy(self.external),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ContextModel":
        d = d or {}
        return cls(
            internal=copy.deepcopy(d.get("internal", {})),
            external=copy.deepcopy(d.get("external", {})),
        )


@dataclass
class ServiceDescriptor:
    service_id: str
    node_id: str
    interfaces: list[InterfaceDescriptor] = field(default_factory=list)
    bindings: list[Binding] = field(default_factory=list)
    bodies: dict[tuple[str, str], MethodBody] = field(default_factory=dict)
    context: ContextModel = field(default_factory=ContextModel)

    def interface(self, iface_id: str) -> InterfaceDescriptor | None:
        for i in self.interfaces:
            if i.id == iface_id:
                return i
        return None

    def functional_methods(self) -> list[tuple[str, MethodSignature]]:
        return [
            (i.id, m) for i in self.interfaces if i.kind == FUNCTIONAL for m in i.methods
        ]

    def find_method(
        self, name: str, interface: str | None = None
    ) -> tuple[InterfaceDescriptor, MethodSignature] | None:
        # functional interfaces win over management ones on a name clash
        ifaces = sorted(self.interfaces, key=lambda i: i.kind != FUNCTIONAL)
        for iface in ifaces:
            if interface is not None and iface.id != interface:
                continue
            m = iface.method(name)
            if m is not None:
                return iface, m
        return None

    def binding(self, name: str) -> Binding | None:
        for b in self.bindings:
            if b.name == name:
                return b
        return None

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "node_id": self.node_id,
            "interfaces": [i.to_dict() for i in self.interfaces],
            "bindings": [b.to_dict() for b in self.bindings],
            "bodies": [self.bodies[k].to_dict() for k in sorted(self.bodies)],
            "context": self.context.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceDescriptor":
        try:
            raw_bodies = d.get("bodies", [])
            if isinstance(raw_bodies, dict):
                # {"Iface/method": [instructions]} shorthand
                raw_bodies = [
                    {"signature_ref": k.split("/", 1), "instructions": v}
                    for k, v in raw_bodies.items()
                ]
            bodies = {}
            for b in raw_bodies:
                body = MethodBody.from_dict(b)
                if body.signature_ref in bodies:
                    raise MalformedDescriptor(
                        "one body per method", f"duplicate body for {body.signature_ref}"
                    )
                bodies[body.signature_ref] = body
            return cls(
                service_id=d["service_id"],
                node_id=d["node_id"],
                interfaces=[InterfaceDescriptor.from_dict(i) for i in d.get("interfaces", ())],
                bindings=[Binding.from_dict(b) for b in d.get("bindings", ())],
                bodies=bodies,
                context=ContextModel.from_dict(d.get("context")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MalformedDescriptor):
                raise
            raise MalformedDescriptor("descriptor schema", repr(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ServiceDescriptor":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def validate(desc: ServiceDescriptor) -> None:
    """Raise MalformedDescriptor naming the first violated invariant."""
    if not desc.service_id:
        raise MalformedDescriptor("service_id non-empty")
    seen_ifaces = set()
    for iface in desc.interfaces:
        if iface.id in seen_ifaces:
            raise MalformedDescriptor("interface ids distinct", iface.id)
        seen_ifaces.add(iface.id)
        if iface.kind not in INTERFACE_KINDS:
            raise MalformedDescriptor("interface kind", f"{iface.id}: {iface.kind!r}")
        names = set()
        for m in iface.methods:
            if not m.name:
                raise MalformedDescriptor("method name non-empty", iface.id)
            if m.name in names:
                raise MalformedDescriptor(
                    "method names unique within interface", f"{iface.id}.{m.name}"
                )
            names.add(m.name)
            a = m.annotations
            if not isinstance(a.memory_cost, int) or a.memory_cost < 0:
                raise MalformedDescriptor("memory_cost non-negative", m.name)
            if not isinstance(a.importance, int) or not 0 <= a.importance <= 9:
                raise MalformedDescriptor("importance in 0-9", m.name)

    binding_names = set()
    for b in desc.bindings:
        if b.role not in (REQUIRES, PROVIDES):
            raise MalformedDescriptor("binding role", repr(b.role))
        if b.name in binding_names:
            raise MalformedDescriptor("binding names distinct", b.name)
        binding_names.add(b.name)
        if b.role == PROVIDES and b.required_interface not in seen_ifaces:
            raise MalformedDescriptor(
                "provides binding names a declared interface", b.required_interface
            )
    requires = {b.name for b in desc.bindings if b.role == REQUIRES}

    for ref, body in desc.bodies.items():
        iface = desc.interface(ref[0])
        if iface is None or iface.method(ref[1]) is None:
            raise MalformedDescriptor("body refers to a declared method", "/".join(ref))
        for ins in body.instructions:
            if ins.op not in OPS:
                raise MalformedDescriptor("instruction op", repr(ins.op))
            if ins.op == "invoke_binding":
                name = (ins.payload or {}).get("binding")
                if name not in requires:
                    raise MalformedDescriptor(
                        "invoke_binding references a declared requires binding",
                        f"{'/'.join(ref)} -> {name!r}",
                    )
            elif ins.op == "write_context":
                key = (ins.payload or {}).get("key")
                if key in RESERVED_INTERNAL:
                    raise MalformedDescriptor("reserved context key", key)
    for iface_id, m in desc.functional_methods():
        if (iface_id, m.name) not in desc.bodies:
            raise MalformedDescriptor(
                "every functional method has exactly one body", f"{iface_id}/{m.name}"
            )
    if desc.context.internal.get("run_state") not in (STARTED, STOPPED):
        raise MalformedDescriptor("run_state valid", repr(desc.context.internal.get("run_state")))


# ---------------------------------------------------------------------------
# interpreter helpers

_TYPE_CHECKS: dict[str, Callable[[Any], bool]] = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "string": lambda v: isinstance(v, str),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "map": lambda v: isinstance(v, dict),
}

_COERCIONS: dict[str, Callable[[Any], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "string": str,
    "bool": bool,
}


def type_accepts(type_name: str, value: Any) -> bool:
    """Unknown type names are opaque and accept any value."""
    check = _TYPE_CHECKS.get(type_name)
    return True if check is None else check(value)


def coerce(value: Any, type_name: str) -> Any:
    fn = _COERCIONS.get(type_name)
    if fn is None:
        return value
    try:
        return fn(value)
    except (TypeError, ValueError) as exc:
        raise ExecutionError(f"cannot coerce {value!r} to {type_name}") from exc


def evaluate(expr: Any, args: list, env: dict) -> Any:
    if isinstance(expr, dict) and len(expr) in (1, 2):
        if "arg" in expr and len(expr) == 1:
            i = expr["arg"]
            if not isinstance(i, int) or not 0 <= i < len(args):
                raise ExecutionError(f"argument index {i!r} out of range")
            return args[i]
        if "var" in expr and len(expr) == 1:
            if expr["var"] not in env:
                raise ExecutionError(f"unbound variable {expr['var']!r}")
            return env[expr["var"]]
        if "lit" in expr and len(expr) == 1:
            return copy.deepcopy(expr["lit"])
        if "coerce" in expr and "expr" in expr:
            return coerce(evaluate(expr["expr"], args, env), expr["coerce"])
    return copy.deepcopy(expr)


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class ServiceRegistered:
    service_id: str
    node_id: str


@dataclass(frozen=True)
class ServiceUnregistered:
    service_id: str
    node_id: str


NativeHandler = Callable[[str, str, list], list]


class Registry:
    """Services hosted on one node.

    Writers are serialized on one lock; each service's invoke+context
    update is serialized on its own lock.  Subscribers receive every
    registration event synchronously after the write commits.
    """

    def __init__(self, node_id: str = "local"):
        self.node_id = node_id
        self.services: dict[str, ServiceDescriptor] = {}
        self.subscribers: list[Callable[[Any], None]] = []
        self.events: list[ServiceRegistered | ServiceUnregistered] = []
        # opaque tag -> handler(service_id, method, args) -> emitted values
        self.natives: dict[str, NativeHandler] = {}
        self._write_lock = threading.RLock()
        self._service_locks: dict[str, threading.RLock] = {}
        # resolves binding targets that live outside this registry
        self.resolver: Callable[[str], "Registry | None"] | None = None

    # -- registration -------------------------------------------------------

    def register_service(self, descriptor: ServiceDescriptor) -> str:
        validate(descriptor)
        with self._write_lock:
            if descriptor.service_id in self.services:
                raise DuplicateId(descriptor.service_id)
            desc = copy.deepcopy(descriptor)
            self.services[desc.service_id] = desc
            self._service_locks[desc.service_id] = threading.RLock()
            event = ServiceRegistered(desc.service_id, self.node_id)
            self.events.append(event)
        self._publish(event)
        return desc.service_id

    def unregister_service(self, service_id: str) -> None:
        with self._write_lock:
            if service_id not in self.services:
                raise UnknownService(service_id)
            del self.services[service_id]
            self._service_locks.pop(service_id, None)
            event = ServiceUnregistered(service_id, self.node_id)
            self.events.append(event)
        self._publish(event)

    def subscribe(self, sink: Callable[[Any], None]) -> None:
        self.subscribers.append(sink)

    def unsubscribe(self, sink: Callable[[Any], None]) -> None:
        if sink in self.subscribers:
            self.subscribers.remove(sink)

    def _publish(self, event) -> None:
        for sink in list(self.subscribers):
            sink(event)

    def get(self, service_id: str) -> ServiceDescriptor:
        try:
            return self.services[service_id]
        except KeyError:
            raise UnknownService(service_id) from None

    def __contains__(self, service_id: str) -> bool:
        return service_id in self.services

    def service_ids(self) -> list[str]:
        return list(self.services)

    def state(self) -> dict:
        """Deep, plain-data copy of every registered descriptor."""
        return {sid: d.to_dict() for sid, d in sorted(self.services.items())}

    # -- lifecycle / context ------------------------------------------------

    def set_run_state(self, service_id: str, state: str) -> None:
        if state not in (STARTED, STOPPED):
            raise ValueError(f"run state must be started or stopped, not {state!r}")
        desc = self.get(service_id)
        with self._service_locks[service_id]:
            desc.context.internal["run_state"] = state

    def snapshot_context(self, service_id: str) -> bytes:
        desc = self.get(service_id)
        return json.dumps(desc.context.to_dict(), sort_keys=True).encode()

    def restore_context(self, service_id: str, snapshot: bytes | str) -> None:
        desc = self.get(service_id)
        try:
            data = json.loads(snapshot)
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedSnapshot(str(exc)) from exc
        if (
            not isinstance(data, dict)
            or set(data) != {"internal", "external"}
            or not isinstance(data["internal"], dict)
            or not isinstance(data["external"], dict)
            or data["internal"].get("run_state") not in (STARTED, STOPPED)
        ):
            raise MalformedSnapshot("snapshot must hold internal/external maps with run_state")
        with self._service_locks[service_id]:
            desc.context = ContextModel.from_dict(data)

    # -- interpreter --------------------------------------------------------

    def invoke(
        self,
        service_id: str,
        method: str,
        args: list | tuple = (),
        interface: str | None = None,
    ) -> list:
        desc = self.get(service_id)
        found = desc.find_method(method, interface)
        if found is None:
            raise UnknownMethod(f"{service_id}.{method}")
        iface, sig = found
        body = desc.bodies.get((iface.id, sig.name))
        args = list(args)
        if body is None:
            if iface.kind == MANAGEMENT and sig.name in RUNTIME_MANAGEMENT:
                return self._runtime_management(service_id, sig.name)
            raise UnknownMethod(f"{service_id}.{method} has no body")
        if desc.context.run_state != STARTED:
            raise ServiceStopped(service_id)
        if len(args) != sig.arity:
            raise ArityMismatch(
                f"{service_id}.{method} takes {sig.arity} argument(s), got {len(args)}"
            )
        for t, v in zip(sig.inputs, args):
            if not type_accepts(t, v):
                raise ArityMismatch(f"{service_id}.{method}: {v!r} is not a {t}")
        with self._service_locks[service_id]:
            internal = copy.deepcopy(desc.context.internal)
            out = self._execute(desc, sig.name, body.instructions, args, internal)
            desc.context.internal = internal
        return out

    def _runtime_management(self, service_id: str, name: str) -> list:
        if name == "getState":
            return [self.get(service_id).context.run_state]
        self.set_run_state(service_id, STARTED if name == "start" else STOPPED)
        return []

    def _execute(self, desc, method, instructions, args, internal) -> list:
        out: list = []
        env: dict = {}
        for ins in instructions:
            p = ins.payload
            if ins.op == "emit":
                out.append(evaluate(p, args, env))
            elif ins.op == "read_context":
                key, into = (p, p) if isinstance(p, str) else (p["key"], p.get("as", p["key"]))
                if key in internal:
                    env[into] = copy.deepcopy(internal[key])
                else:
                    env[into] = copy.deepcopy(desc.context.external.get(key))
            elif ins.op == "write_context":
                internal[p["key"]] = evaluate(p.get("value"), args, env)
            elif ins.op == "invoke_binding":
                out.extend(self._call_binding(desc, p, args, env))
            elif ins.op == "opaque":
                handler = self.natives.get(p)
                if handler is not None:
                    out.extend(handler(desc.service_id, method, list(args)))
        return out

    def _call_binding(self, desc, payload, args, env) -> list:
        binding = desc.binding(payload["binding"])
        if binding is None or binding.target is None:
            raise UnboundBinding(f"{desc.service_id}: binding {payload['binding']!r}")
        call_args = [evaluate(a, args, env) for a in payload.get("args", ())]
        registry = self._registry_for(binding.target)
        if registry is None:
            raise UnboundBinding(
                f"{desc.service_id}: target {binding.target!r} is not reachable"
            )
        iface = binding.required_interface
        target_desc = registry.get(binding.target)
        if target_desc.interface(iface) is None:
            iface = None
        result = registry.invoke(binding.target, payload["method"], call_args, interface=iface)
        out_type = payload.get("output_as")
        if out_type:
            result = [coerce(v, out_type) for v in result]
        return result

    def _registry_for(self, service_id: str) -> "Registry | None":
        if service_id in self.services:
            return self
        if self.resolver is not None:
            return self.resolver(service_id)
        return None


def replay_events(events: Iterable[ServiceRegistered | ServiceUnregistered]) -> set[str]:
    """Fold an event stream from empty into the live service-id set."""
    live: set[str] = set()
    for e in events:
        if isinstance(e, ServiceRegistered):
            live.add(e.service_id)
        else:
            live.discard(e.service_id)
    return live


def load_descriptor(path) -> ServiceDescriptor:
    with open(path) as fh:
        return ServiceDescriptor.from_json(fh.read())
