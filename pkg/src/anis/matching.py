"""Interface matching on two axes.

API axis: exact signature equality (name, ordered input types, output
type).  Semantic axis: methods tagged with equal or synonymous concept
ids; an exact API match also counts as a semantic match.  Each axis
grades a pair of interfaces as full, partial or none.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Union

from .errors import ArityIncompatible
from .service_model import InterfaceDescriptor, MethodSignature, ServiceDescriptor

FULL, PARTIAL, NONE = "full", "partial", "none"
API, SEMANTIC = "api", "semantic"

MethodRef = tuple[str, str]  # (interface id, method name)
Side = Union[InterfaceDescriptor, ServiceDescriptor, list]


class ConceptTable:
    """Symmetric, reflexive synonym relation over concept ids (not transitive)."""

    def __init__(self, pairs: Iterable[Iterable[str]] = ()):
        self.synonyms: set[frozenset[str]] = set()
        for p in pairs:
            a, b = p
            self.add(a, b)

    def add(self, a: str, b: str) -> None:
        self.synonyms.add(frozenset((a, b)))

    def equivalent(self, a: str | None, b: str | None) -> bool:
        if a is None or b is None:
            return False
        return a == b or frozenset((a, b)) in self.synonyms

    def to_json(self) -> str:
        pairs = sorted(sorted(p) if len(p) == 2 else [min(p)] * 2 for p in self.synonyms)
        return json.dumps(pairs)

    @classmethod
    def from_json(cls, text: str) -> "ConceptTable":
        data = json.loads(text)
        if not isinstance(data, list) or any(
            not isinstance(p, list) or len(p) != 2 for p in data
        ):
            raise ValueError("concept table must be a JSON list of two-element arrays")
        return cls(data)

    @classmethod
    def load(cls, path) -> "ConceptTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


EMPTY_TABLE = ConceptTable()


@dataclass(frozen=True)
class MatchedPair:
    left: MethodRef
    right: MethodRef
    kind: str

    def to_dict(self) -> dict:
        return {"left": list(self.left), "right": list(self.right), "kind": self.kind}


@dataclass(frozen=True)
class Rename:
    from_method: MethodRef
    to_method: MethodRef
    input_permutation: tuple[int, ...]
    # (position, from type, to type) for every position whose type differs
    input_coercions: tuple[tuple[int, str, str], ...] = ()
    output_coercion: tuple[str, str] | None = None

    def to_dict(self) -> dict:
        return {
            "from_method": list(self.from_method),
            "to_method": list(self.to_method),
            "input_permutation": list(self.input_permutation),
            "input_coercions": [list(c) for c in self.input_coercions],
            "output_coercion": list(self.output_coercion) if self.output_coercion else None,
        }


@dataclass(frozen=True)
class TransformPlan:
    renames: tuple[Rename, ...]

    def to_dict(self) -> dict:
        return {"renames": [r.to_dict() for r in self.renames]}


@dataclass
class MatchReport:
    api_class: str
    semantic_class: str
    pairs: list[MatchedPair] = field(default_factory=list)
    unmatched_left: list[MethodRef] = field(default_factory=list)
    unmatched_right: list[MethodRef] = field(default_factory=list)
    transform_plan: TransformPlan | None = None
    # set when a semantic pair cannot be turned into a rename
    transform_error: str | None = None

    @property
    def feasible(self) -> bool:
        return not (self.api_class == NONE and self.semantic_class == NONE)

    def to_dict(self) -> dict:
        return {
            "api_class": self.api_class,
            "semantic_class": self.semantic_class,
            "feasible": self.feasible,
            "pairs": [p.to_dict() for p in self.pairs],
            "unmatched_left": [list(m) for m in self.unmatched_left],
            "unmatched_right": [list(m) for m in self.unmatched_right],
            "transform_plan": self.transform_plan.to_dict() if self.transform_plan else None,
            "transform_error": self.transform_error,
        }


def methods_of(side: Side) -> list[tuple[str, MethodSignature]]:
    """Flatten an interface, a service (functional interfaces) or a ready list."""
    if isinstance(side, InterfaceDescriptor):
        return [(side.id, m) for m in side.methods]
    if isinstance(side, ServiceDescriptor):
        return side.functional_methods()
    return list(side)


def grade(covered: int, total_left: int, total_right: int) -> str:
    if covered == 0:
        return NONE
    if covered == total_left == total_right:
        return FULL
    return PARTIAL


def match_signatures(a: Side, b: Side) -> tuple[str, list[MatchedPair]]:
    left, right = methods_of(a), methods_of(b)
    used: set[int] = set()
    pairs = []
    for li, lsig in left:
        for j, (ri, rsig) in enumerate(right):
            if j not in used and lsig.same_signature(rsig):
                used.add(j)
                pairs.append(MatchedPair((li, lsig.name), (ri, rsig.name), API))
                break
    return grade(len(pairs), len(left), len(right)), pairs


def _edge(lsig: MethodSignature, rsig: MethodSignature, table: ConceptTable) -> str | None:
    if lsig.same_signature(rsig):
        return API
    if table.equivalent(lsig.concept, rsig.concept):
        return SEMANTIC
    return None


def _pairing(a: Side, b: Side, table: ConceptTable) -> list[MatchedPair]:
    """Injective pairing of maximum size over api-or-semantic edges.

    Seeded with the exact-signature pairs, then each still-unpaired left
    method is tried in order against right methods in order, re-seating
    earlier partners along augmenting paths when that frees a slot.
    Plain greedy pairing can miss a complete pairing because synonymy is
    not transitive; augmentation cannot.
    """
    left, right = methods_of(a), methods_of(b)
    adj = [
        [j for j, (_, rsig) in enumerate(right) if _edge(lsig, rsig, table)]
        for _, lsig in left
    ]
    match_r: dict[int, int] = {}
    match_l: dict[int, int] = {}
    _, api_pairs = match_signatures(left, right)
    lpos = {(iid, s.name): i for i, (iid, s) in enumerate(left)}
    rpos = {(iid, s.name): j for j, (iid, s) in enumerate(right)}
    for p in api_pairs:
        i, j = lpos[p.left], rpos[p.right]
        match_l[i], match_r[j] = j, i

    def augment(i: int, seen: set[int]) -> bool:
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in match_r or augment(match_r[j], seen):
                match_r[j] = i
                match_l[i] = j
                return True
        return False

    for i in range(len(left)):
        if i not in match_l:
            augment(i, set())

    pairs = []
    for i in sorted(match_l):
        j = match_l[i]
        (li, lsig), (ri, rsig) = left[i], right[j]
        pairs.append(MatchedPair((li, lsig.name), (ri, rsig.name), _edge(lsig, rsig, table)))
    return pairs


def match_semantics(
    a: Side, b: Side, table: ConceptTable = EMPTY_TABLE
) -> tuple[str, list[MatchedPair]]:
    """Grade the semantic axis; returns the semantic-only pairs of the pairing."""
    pairs = _pairing(a, b, table)
    klass = grade(len(pairs), len(methods_of(a)), len(methods_of(b)))
    return klass, [p for p in pairs if p.kind == SEMANTIC]


def build_transform_plan(pairs: Iterable[MatchedPair], a: Side, b: Side) -> TransformPlan:
    left = {(iid, s.name): s for iid, s in methods_of(a)}
    right = {(iid, s.name): s for iid, s in methods_of(b)}
    renames = []
    for p in pairs:
        lsig, rsig = left[p.left], right[p.right]
        if lsig.arity != rsig.arity:
            raise ArityIncompatible(
                f"{p.left[1]}{list(lsig.inputs)} ~ {p.right[1]}{list(rsig.inputs)}"
            )
        coercions = tuple(
            (k, lt, rt) for k, (lt, rt) in enumerate(zip(lsig.inputs, rsig.inputs)) if lt != rt
        )
        out = (lsig.output, rsig.output) if lsig.output != rsig.output else None
        renames.append(
            Rename(p.left, p.right, tuple(range(lsig.arity)), coercions, out)
        )
    return TransformPlan(tuple(renames))


def apply_plan(plan: TransformPlan, a: Side) -> list[tuple[str, MethodSignature]]:
    """Rewrite the planned left methods into their right-hand signatures."""
    left = {(iid, s.name): s for iid, s in methods_of(a)}
    out = []
    for r in plan.renames:
        sig = left[r.from_method]
        inputs = list(sig.inputs)
        inputs = [inputs[k] for k in r.input_permutation]
        for k, _, to in r.input_coercions:
            inputs[k] = to
        output = r.output_coercion[1] if r.output_coercion else sig.output
        out.append(
            (
                r.to_method[0],
                MethodSignature(
                    name=r.to_method[1],
                    inputs=tuple(inputs),
                    output=output,
                    concept=sig.concept,
                    annotations=sig.annotations,
                ),
            )
        )
    return out


def classify(a: Side, b: Side, table: ConceptTable = EMPTY_TABLE) -> MatchReport:
    left, right = methods_of(a), methods_of(b)
    api_class, _ = match_signatures(left, right)
    pairs = _pairing(left, right, table)
    semantic_class = grade(len(pairs), len(left), len(right))
    paired_l = {p.left for p in pairs}
    paired_r = {p.right for p in pairs}
    report = MatchReport(
        api_class=api_class,
        semantic_class=semantic_class,
        pairs=pairs,
        unmatched_left=[(i, s.name) for i, s in left if (i, s.name) not in paired_l],
        unmatched_right=[(i, s.name) for i, s in right if (i, s.name) not in paired_r],
    )
    semantic_only = [p for p in pairs if p.kind == SEMANTIC]
    if semantic_only:
        try:
            report.transform_plan = build_transform_plan(semantic_only, left, right)
        except ArityIncompatible as exc:
            report.transform_error = f"ArityIncompatible: {exc}"
    return report
