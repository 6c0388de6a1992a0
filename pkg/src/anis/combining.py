"""Local combining: simple composition, weaving and optimized combining.

Every technique yields a :class:`CompositePlan`; :func:`materialize` turns
a plan into a registrable descriptor whose bodies either redirect calls to
the members through auto-added ``requires`` bindings or run a woven
instruction sequence against the composite's own merged context.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .errors import ArityIncompatible, EmptyComposite, InfeasibleMatch, UnknownMember, Unweavable
from .matching import EMPTY_TABLE, SEMANTIC, ConceptTable, MethodRef, Rename, classify
from .service_model import (
    FUNCTIONAL,
    REQUIRES,
    Annotations,
    Binding,
    ContextModel,
    Instruction,
    InterfaceDescriptor,
    MethodBody,
    MethodSignature,
    Registry,
    ServiceDescriptor,
)

COMPOSE_SIMPLE, WEAVE, COMPOSE_OPTIMIZED = "compose_simple", "weave", "compose_optimized"
REDUNDANT, NON_USEFUL, CONTEXT_EXCLUDED = "redundant", "non_useful", "context_excluded"


@dataclass
class Target:
    service_id: str
    interface: str
    method: str
    signature: MethodSignature

    @property
    def ref(self) -> tuple[str, str, str]:
        return (self.service_id, self.interface, self.method)


@dataclass
class DispatchEntry:
    exposed: MethodRef
    signature: MethodSignature
    targets: list[Target] = field(default_factory=list)

    def rename_for(self, t: Target) -> Rename | None:
        """The rename a call on the exposed method needs to reach ``t``."""
        if t.signature.same_signature(self.signature):
            return None
        coercions = tuple(
            (k, et, tt)
            for k, (et, tt) in enumerate(zip(self.signature.inputs, t.signature.inputs))
            if et != tt
        )
        out = (
            (t.signature.output, self.signature.output)
            if t.signature.output != self.signature.output
            else None
        )
        return Rename(
            (t.interface, t.method),
            self.exposed,
            tuple(range(t.signature.arity)),
            coercions,
            out,
        )

    def to_dict(self) -> dict:
        targets = []
        for t in self.targets:
            r = self.rename_for(t)
            targets.append(
                {
                    "service_id": t.service_id,
                    "interface": t.interface,
                    "method": t.method,
                    "rename": r.to_dict() if r else None,
                }
            )
        return {
            "exposed_method": list(self.exposed),
            "signature": self.signature.to_dict(),
            "targets": targets,
        }


@dataclass(frozen=True)
class PrunedMethod:
    method: tuple[str, str, str]  # (service id, interface id, method name)
    reason: str

    def to_dict(self) -> dict:
        return {"method": list(self.method), "reason": self.reason}


@dataclass
class WeaveItem:
    exposed: MethodRef
    sources: list[tuple[str, str, str]]  # member body refs, in member order
    # member bodies after key/binding/argument adaptation, aligned with sources
    adapted: list[list[Instruction]] = field(default_factory=list)

    @property
    def body(self) -> list[Instruction]:
        return interleave(*self.adapted)

    def to_dict(self) -> dict:
        return {"exposed_method": list(self.exposed), "bodies": [list(s) for s in self.sources]}


@dataclass(frozen=True)
class OptimizationProfile:
    redundant: bool = False
    unused: bool = False
    context: bool = False

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "OptimizationProfile":
        names = {n.strip() for n in names if n.strip()}
        unknown = names - {"redundant", "unused", "context"}
        if unknown:
            raise ValueError(f"unknown optimization pass(es): {sorted(unknown)}")
        return cls("redundant" in names, "unused" in names, "context" in names)

    def names(self) -> list[str]:
        return [n for n in ("redundant", "unused", "context") if getattr(self, n)]


@dataclass
class CompositePlan:
    technique: str
    new_id: str
    new_node: str
    members: list[str]
    dispatch: list[DispatchEntry] = field(default_factory=list)
    pruned: list[PrunedMethod] = field(default_factory=list)
    weave_spec: list[WeaveItem] | None = None
    merged_bindings: list[Binding] = field(default_factory=list)
    # bindings woven bodies call through (member bindings, renamed apart)
    carried_bindings: list[Binding] = field(default_factory=list)
    context: ContextModel | None = None

    def exposed(self) -> list[MethodRef]:
        return [e.exposed for e in self.dispatch]

    def entry(self, exposed: MethodRef) -> DispatchEntry | None:
        for e in self.dispatch:
            if e.exposed == exposed:
                return e
        return None

    def to_dict(self) -> dict:
        return {
            "technique": self.technique,
            "new_id": self.new_id,
            "new_node": self.new_node,
            "members": list(self.members),
            "dispatch": [e.to_dict() for e in self.dispatch],
            "pruned": [p.to_dict() for p in self.pruned],
            "weave_spec": [w.to_dict() for w in self.weave_spec]
            if self.weave_spec is not None
            else None,
            "merged_bindings": [b.to_dict() for b in self.merged_bindings],
        }


def interleave(*bodies: list) -> list:
    """Round-robin, one item at a time, in argument order; remainders appended."""
    out = []
    longest = max((len(b) for b in bodies), default=0)
    for k in range(longest):
        for b in bodies:
            if k < len(b):
                out.append(b[k])
    return out


# ---------------------------------------------------------------------------
# simple composition


def _group(members: list[ServiceDescriptor], new_id: str, table: ConceptTable) -> list[DispatchEntry]:
    entries: list[DispatchEntry] = []
    index: dict[tuple[int, str, str], DispatchEntry] = {}
    taken: dict[MethodRef, DispatchEntry] = {}

    def expose(entry: DispatchEntry, iface: str, name: str, owner: str) -> None:
        ref = (iface, name)
        if ref in taken and taken[ref] is not entry:
            ref = (f"{owner}.{iface}", name)
        if entry.exposed in taken and taken[entry.exposed] is entry:
            del taken[entry.exposed]
        entry.exposed = ref
        taken[ref] = entry

    for i, m in enumerate(members):
        sigs = {(iid, s.name): s for iid, s in m.functional_methods()}
        if i > 0:
            prev = members[i - 1]
            report = classify(prev, m, table)
            if not report.feasible:
                raise InfeasibleMatch(f"{prev.service_id} and {m.service_id} share nothing")
            if report.transform_error:
                raise ArityIncompatible(report.transform_error)
            for p in report.pairs:
                entry = index[(i - 1, *p.left)]
                rsig = sigs[p.right]
                if p.kind == SEMANTIC:
                    entry.signature = rsig
                    expose(entry, p.right[0], p.right[1], m.service_id)
                entry.targets.append(Target(m.service_id, p.right[0], p.right[1], rsig))
                index[(i, *p.right)] = entry
        for (iid, name), sig in sigs.items():
            if (i, iid, name) in index:
                continue
            entry = DispatchEntry((iid, name), sig, [Target(m.service_id, iid, name, sig)])
            expose(entry, iid, name, m.service_id)
            entries.append(entry)
            index[(i, iid, name)] = entry
    return entries


def _merged_bindings(members: list[ServiceDescriptor], new_id: str) -> list[Binding]:
    provided = {i.id for m in members for i in m.interfaces}
    out: list[Binding] = []
    seen: set[tuple[str, str | None]] = set()
    names: set[str] = set()
    for m in members:
        for b in m.bindings:
            if b.role != REQUIRES:
                continue
            target = new_id if b.required_interface in provided else b.target
            if (b.required_interface, target) in seen:
                continue
            seen.add((b.required_interface, target))
            name = b.name if b.name not in names else f"{m.service_id}.{b.name}"
            names.add(name)
            out.append(Binding(b.required_interface, target, REQUIRES, name))
    return out


def compose_simple(
    members: list[ServiceDescriptor],
    new_id: str,
    new_node: str,
    table: ConceptTable = EMPTY_TABLE,
) -> CompositePlan:
    """Expose the union of member methods; shared methods fan out in member order."""
    if not members:
        raise InfeasibleMatch("nothing to compose")
    return CompositePlan(
        technique=COMPOSE_SIMPLE,
        new_id=new_id,
        new_node=new_node,
        members=[m.service_id for m in members],
        dispatch=_group(members, new_id, table),
        merged_bindings=_merged_bindings(members, new_id),
    )


# ---------------------------------------------------------------------------
# weaving


def merge_contexts(members: list[ServiceDescriptor]) -> tuple[ContextModel, dict[str, set[str]]]:
    """Union of member contexts; keys present in two or more members are
    stored once per member under ``<member>.<key>``.  Returns the merged
    context and, per member, the internal keys that were prefixed."""

    def merge(maps: list[tuple[str, dict]]) -> tuple[dict, dict[str, set[str]]]:
        counts: dict[str, int] = {}
        for _, d in maps:
            for k in d:
                counts[k] = counts.get(k, 0) + 1
        out: dict = {}
        renamed: dict[str, set[str]] = {sid: set() for sid, _ in maps}
        for sid, d in maps:
            for k, v in d.items():
                if counts[k] > 1:
                    out[f"{sid}.{k}"] = copy.deepcopy(v)
                    renamed[sid].add(k)
                else:
                    out[k] = copy.deepcopy(v)
        return out, renamed

    internal, renamed = merge(
        [
            (m.service_id, {k: v for k, v in m.context.internal.items() if k not in ("run_state", "params")})
            for m in members
        ]
    )
    params, _ = merge([(m.service_id, m.context.internal.get("params", {})) for m in members])
    external, _ = merge([(m.service_id, m.context.external) for m in members])
    internal["run_state"] = "stopped"
    internal["params"] = params
    return ContextModel(internal, external), renamed


def _wrap_args(expr: Any, casts: dict[int, str]) -> Any:
    if isinstance(expr, dict):
        if len(expr) == 1 and "arg" in expr:
            k = expr["arg"]
            return {"coerce": casts[k], "expr": expr} if k in casts else expr
        if "coerce" in expr and "expr" in expr and len(expr) == 2:
            return {"coerce": expr["coerce"], "expr": _wrap_args(expr["expr"], casts)}
    return expr


def _adapt(
    instructions: list[Instruction],
    member: str,
    renamed_keys: set[str],
    rename: Rename | None,
    target_inputs: tuple[str, ...],
) -> list[Instruction]:
    casts = {k: target_inputs[k] for k, _, _ in rename.input_coercions} if rename else {}
    out_type = rename.output_coercion[1] if rename and rename.output_coercion else None
    out = []
    for ins in instructions:
        p = copy.deepcopy(ins.payload)
        if ins.op == "emit":
            p = _wrap_args(p, casts)
            if out_type:
                p = {"coerce": out_type, "expr": p}
        elif ins.op == "read_context":
            key, into = (p, p) if isinstance(p, str) else (p["key"], p.get("as", p["key"]))
            p = {"key": f"{member}.{key}" if key in renamed_keys else key, "as": into}
        elif ins.op == "write_context":
            key = p["key"]
            p = {
                "key": f"{member}.{key}" if key in renamed_keys else key,
                "value": _wrap_args(p.get("value"), casts),
            }
        elif ins.op == "invoke_binding":
            p["binding"] = f"{member}.{p['binding']}"
            p["args"] = [_wrap_args(a, casts) for a in p.get("args", ())]
            if out_type:
                p["output_as"] = out_type
        out.append(Instruction(ins.op, p))
    return out


def weave(
    members: list[ServiceDescriptor],
    new_id: str,
    new_node: str,
    table: ConceptTable = EMPTY_TABLE,
) -> CompositePlan:
    """Interlace the bodies of matched methods; unmatched methods redirect."""
    plan = compose_simple(members, new_id, new_node, table)
    plan.technique = WEAVE
    by_id = {m.service_id: m for m in members}
    woven = [e for e in plan.dispatch if len(e.targets) > 1]
    for e in woven:
        for t in e.targets:
            body = by_id[t.service_id].bodies[(t.interface, t.method)]
            for ins in body.instructions:
                if ins.op == "opaque":
                    raise Unweavable(
                        f"{t.service_id}.{t.method} holds opaque instruction {ins.payload!r}"
                    )
    plan.context, renamed = merge_contexts(members)
    plan.weave_spec = []
    carried: dict[str, Binding] = {}
    for e in woven:
        item = WeaveItem(e.exposed, [t.ref for t in e.targets])
        for t in e.targets:
            m = by_id[t.service_id]
            body = m.bodies[(t.interface, t.method)]
            item.adapted.append(
                _adapt(body.instructions, m.service_id, renamed[m.service_id],
                       e.rename_for(t), t.signature.inputs)
            )
            for ins in body.instructions:
                if ins.op == "invoke_binding":
                    b = m.binding(ins.payload["binding"])
                    name = f"{m.service_id}.{b.name}"
                    carried[name] = Binding(b.required_interface, b.target, REQUIRES, name)
        plan.weave_spec.append(item)
    plan.carried_bindings = list(carried.values())
    return plan


# ---------------------------------------------------------------------------
# optimized combining


def _useful(registry: Registry, exclude: set[str]) -> tuple[set[str], set[MethodRef]]:
    """Interfaces and methods some other registered service depends on."""
    whole: set[str] = set()
    methods: set[MethodRef] = set()
    for sid, desc in registry.services.items():
        if sid in exclude:
            continue
        for b in desc.bindings:
            if b.role != REQUIRES:
                continue
            called = {
                ins.payload["method"]
                for body in desc.bodies.values()
                for ins in body.instructions
                if ins.op == "invoke_binding" and ins.payload.get("binding") == b.name
            }
            if called:
                methods |= {(b.required_interface, c) for c in called}
            else:
                whole.add(b.required_interface)
    return whole, methods


def optimize(
    plan: CompositePlan,
    registry: Registry,
    host_context: ContextModel | dict | None,
    profile: OptimizationProfile,
) -> CompositePlan:
    """Apply redundancy, usefulness and context passes, in that order."""
    plan = copy.deepcopy(plan)
    plan.technique = COMPOSE_OPTIMIZED if plan.technique == COMPOSE_SIMPLE else plan.technique
    weave_by = {w.exposed: w for w in plan.weave_spec or ()}

    if profile.redundant:
        for e in plan.dispatch:
            first = e.targets[0]
            keep = [first]
            for t in e.targets[1:]:
                if t.signature.same_signature(first.signature):
                    plan.pruned.append(PrunedMethod(t.ref, REDUNDANT))
                else:
                    keep.append(t)
            w = weave_by.get(e.exposed)
            if w is not None:
                kept = {t.ref for t in keep}
                pairs = [(s, a) for s, a in zip(w.sources, w.adapted) if s in kept]
                w.sources = [s for s, _ in pairs]
                w.adapted = [a for _, a in pairs]
            e.targets = keep

    drop: dict[MethodRef, str] = {}
    if profile.unused:
        whole, methods = _useful(registry, set(plan.members) | {plan.new_id})
        for e in plan.dispatch:
            if e.exposed[0] not in whole and e.exposed not in methods:
                drop[e.exposed] = NON_USEFUL

    if profile.context and host_context is not None:
        external = host_context.external if isinstance(host_context, ContextModel) else host_context
        limit = external.get("memory_limit")
        if limit is not None:
            for e in plan.dispatch:
                cost = max(t.signature.annotations.memory_cost for t in e.targets)
                if e.exposed not in drop and cost > limit:
                    drop[e.exposed] = CONTEXT_EXCLUDED

    for e in plan.dispatch:
        if e.exposed in drop:
            plan.pruned.append(PrunedMethod((plan.new_id, *e.exposed), drop[e.exposed]))
    plan.dispatch = [e for e in plan.dispatch if e.exposed not in drop]
    if plan.weave_spec is not None:
        plan.weave_spec = [w for w in plan.weave_spec if w.exposed not in drop]
    if not plan.dispatch:
        raise EmptyComposite(f"every method of {plan.new_id} was pruned")
    return plan


# ---------------------------------------------------------------------------
# materialization


def redirection_body(entry: DispatchEntry) -> list[Instruction]:
    body = []
    for t in entry.targets:
        r = entry.rename_for(t)
        casts: dict[int, str] = {}
        if r is not None:
            casts = {k: t.signature.inputs[k] for k, _, _ in r.input_coercions}
        args = [
            {"coerce": casts[k], "expr": {"arg": k}} if k in casts else {"arg": k}
            for k in range(t.signature.arity)
        ]
        payload = {"binding": f"{t.service_id}/{t.interface}", "method": t.method, "args": args}
        if r is not None and r.output_coercion:
            payload["output_as"] = r.output_coercion[1]
        body.append(Instruction("invoke_binding", payload))
    return body


def build_descriptor(plan: CompositePlan) -> ServiceDescriptor:
    ifaces: dict[str, InterfaceDescriptor] = {}
    bodies: dict[tuple[str, str], MethodBody] = {}
    bindings: dict[str, Binding] = {}
    woven = {w.exposed: w for w in plan.weave_spec or ()}
    for e in plan.dispatch:
        iface_id, name = e.exposed
        cost = max(t.signature.annotations.memory_cost for t in e.targets)
        sig = replace(
            e.signature,
            name=name,
            annotations=replace(e.signature.annotations or Annotations(), memory_cost=cost),
        )
        ifaces.setdefault(iface_id, InterfaceDescriptor(iface_id, FUNCTIONAL, [])).methods.append(sig)
        w = woven.get(e.exposed)
        if w is not None:
            instructions = copy.deepcopy(w.body)
        else:
            instructions = redirection_body(e)
            for t in e.targets:
                name_ = f"{t.service_id}/{t.interface}"
                bindings[name_] = Binding(t.interface, t.service_id, REQUIRES, name_)
        bodies[e.exposed] = MethodBody(e.exposed, instructions)
    if woven:
        for b in plan.carried_bindings:
            bindings[b.name] = copy.deepcopy(b)
    for b in plan.merged_bindings:
        if b.name not in bindings:
            bindings[b.name] = copy.deepcopy(b)
    context = copy.deepcopy(plan.context) if plan.context is not None else ContextModel()
    context.internal["run_state"] = "stopped"
    return ServiceDescriptor(
        service_id=plan.new_id,
        node_id=plan.new_node,
        interfaces=list(ifaces.values()),
        bindings=list(bindings.values()),
        bodies=bodies,
        context=context,
    )


def materialize(plan: CompositePlan, registry: Registry) -> ServiceDescriptor:
    """Register the composite described by ``plan``; it starts stopped."""
    for sid in plan.members:
        if sid not in registry:
            raise UnknownMember(sid)
    desc = build_descriptor(plan)
    registry.register_service(desc)
    return registry.get(desc.service_id)
