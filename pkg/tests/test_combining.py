import pytest
from hypothesis import given, settings, strategies as st

from anis.combining import (
    OptimizationProfile,
    compose_simple,
    interleave,
    materialize,
    merge_contexts,
    optimize,
    weave,
)
from anis.errors import DuplicateId, EmptyComposite, InfeasibleMatch, UnknownMember, Unweavable
from anis.matching import ConceptTable
from anis.service_model import (
    Annotations,
    ContextModel,
    InterfaceDescriptor,
    MethodBody,
    MethodSignature,
    Registry,
    ServiceDescriptor,
    emit,
    opaque,
    read_context,
    write_context,
)

from gen import body_service, is_subsequence, make_client, random_body, random_members


def simple(sid, methods, node="A", concept=None, cost=None):
    """Methods given as name -> emitted text."""
    sigs = [
        MethodSignature(n, concept=concept, annotations=Annotations(memory_cost=(cost or {}).get(n, 0)))
        for n in methods
    ]
    return ServiceDescriptor(
        service_id=sid,
        node_id=node,
        interfaces=[InterfaceDescriptor("I", "functional", sigs)],
        bodies={("I", n): MethodBody(("I", n), [emit(text)]) for n, text in methods.items()},
        context=ContextModel({"run_state": "started"}),
    )


def registry_with(*descs):
    r = Registry("A")
    for d in descs:
        r.register_service(d)
    return r


class TestComposeSimple:
    def test_shared_method_fans_out_in_member_order(self):
        s1, s2 = simple("Service1", {"hello": "S1"}), simple("Service2", {"hello": "S2"})
        plan = compose_simple([s1, s2], "Service3", "C")
        (entry,) = plan.dispatch
        assert [t.service_id for t in entry.targets] == ["Service1", "Service2"]
        reg = registry_with(s1, s2)
        materialize(plan, reg)
        reg.set_run_state("Service3", "started")
        assert reg.invoke("Service3", "hello") == ["S1", "S2"]

    def test_redirection_body_shape(self):
        s1, s2 = simple("Service1", {"hello": "S1"}), simple("Service2", {"hello": "S2"})
        reg = registry_with(s1, s2)
        desc = materialize(compose_simple([s1, s2], "Service3", "A"), reg)
        ins = desc.bodies[("I", "hello")].instructions
        assert [(i.op, i.payload["binding"], i.payload["method"]) for i in ins] == [
            ("invoke_binding", "Service1/I", "hello"),
            ("invoke_binding", "Service2/I", "hello"),
        ]
        assert desc.context.run_state == "stopped"

    def test_union_of_methods(self):
        s1 = simple("S1", {"f": "a", "g": "b"})
        s2 = simple("S2", {"f": "c", "h": "d"})
        plan = compose_simple([s1, s2], "X", "A")
        assert [e.exposed for e in plan.dispatch] == [("I", "f"), ("I", "g"), ("I", "h")]

    def test_name_collision_is_qualified(self):
        s1 = simple("S1", {"f": "a", "g": "b"})
        s2 = simple("S2", {"f": "c"})
        s2.interfaces[0].methods.append(MethodSignature("g", ("int",)))
        s2.bodies[("I", "g")] = MethodBody(("I", "g"), [emit({"arg": 0})])
        plan = compose_simple([s1, s2], "X", "A")
        assert [e.exposed for e in plan.dispatch] == [("I", "f"), ("I", "g"), ("S2.I", "g")]

    def test_singleton_is_identity(self):
        s1 = simple("S1", {"f": "a", "g": "b"})
        reg = registry_with(s1)
        materialize(compose_simple([s1], "X", "A"), reg)
        reg.set_run_state("X", "started")
        for m in ("f", "g"):
            assert reg.invoke("X", m) == reg.invoke("S1", m)

    def test_infeasible(self):
        with pytest.raises(InfeasibleMatch):
            compose_simple([simple("S1", {"f": "a"}, concept="x"), simple("S2", {"g": "b"}, concept="y")], "X", "A")

    def test_semantic_pair_routes_through_rename(self):
        a = simple("S1", {"f": "a"}, concept="greet")
        b = simple("S2", {"sayHello": "b"}, concept="greet")
        plan = compose_simple([a, b], "X", "A", ConceptTable())
        (entry,) = plan.dispatch
        assert entry.exposed == ("I", "sayHello")
        assert entry.rename_for(entry.targets[0]) is not None
        reg = registry_with(a, b)
        materialize(plan, reg)
        reg.set_run_state("X", "started")
        assert reg.invoke("X", "sayHello") == ["a", "b"]

    def test_materialize_errors(self):
        s1, s2 = simple("S1", {"f": "a"}), simple("S2", {"f": "b"})
        plan = compose_simple([s1, s2], "X", "A")
        with pytest.raises(UnknownMember):
            materialize(plan, registry_with(s1))
        reg = registry_with(s1, s2)
        materialize(plan, reg)
        with pytest.raises(DuplicateId):
            materialize(plan, reg)


class TestWeave:
    def test_round_robin(self):
        assert interleave(["e1", "e2"], ["f1", "f2", "f3"]) == ["e1", "f1", "e2", "f2", "f3"]

    def test_self_weave(self):
        body = [emit(1), emit(2)]
        plan = weave([body_service("A1", "A", body), body_service("A2", "A", body)], "W", "A")
        assert [i.payload for i in plan.weave_spec[0].body] == [1, 1, 2, 2]

    def test_opaque_is_unweavable(self):
        with pytest.raises(Unweavable):
            weave([body_service("A1", "A", [opaque("native")]), body_service("A2", "A", [emit(1)])], "W", "A")

    def test_woven_composite_runs_on_merged_context(self):
        a = body_service("A1", "A", [write_context("n", 1), read_context("n", "x"), emit({"var": "x"})])
        b = body_service("A2", "A", [write_context("n", 2), read_context("n", "y"), emit({"var": "y"})])
        a.context.internal["n"] = 0
        b.context.internal["n"] = 0
        reg = registry_with(a, b)
        desc = materialize(weave([a, b], "W", "A"), reg)
        assert {"A1.n", "A2.n"} <= set(desc.context.internal)
        reg.set_run_state("W", "started")
        assert reg.invoke("W", "run") == [1, 2]
        # members untouched
        assert reg.get("A1").context.internal["n"] == 0

    def test_merge_contexts_prefixes_only_collisions(self):
        a = body_service("A1", "A", [])
        b = body_service("A2", "A", [])
        a.context.internal.update(shared=1, only_a=2)
        b.context.internal.update(shared=3)
        merged, renamed = merge_contexts([a, b])
        assert merged.internal["A1.shared"] == 1 and merged.internal["A2.shared"] == 3
        assert merged.internal["only_a"] == 2 and "shared" not in merged.internal
        assert renamed == {"A1": {"shared"}, "A2": {"shared"}}


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_weave_subsequence_property(rng):
    b1, b2 = random_body(rng, "p"), random_body(rng, "q")
    plan = weave([body_service("P", "A", b1), body_service("Q", "A", b2)], "W", "A")
    woven = plan.weave_spec[0].body
    assert len(woven) == len(b1) + len(b2)
    assert is_subsequence(b1, woven) and is_subsequence(b2, woven)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(), max_size=8), st.lists(st.integers(), max_size=8), st.lists(st.integers(), max_size=8))
def test_interleave_preserves_each_input(a, b, c):
    tagged = [[("a", x) for x in a], [("b", x) for x in b], [("c", x) for x in c]]
    out = interleave(*tagged)
    assert len(out) == len(a) + len(b) + len(c)
    for tag, t in zip("abc", tagged):
        assert [x for x in out if x[0] == tag] == t


class TestOptimize:
    def test_redundancy_keeps_first(self):
        s1, s2 = simple("S1", {"f": "a"}), simple("S2", {"f": "b"})
        reg = registry_with(s1, s2)
        plan = optimize(compose_simple([s1, s2], "X", "A"), reg, None, OptimizationProfile(redundant=True))
        assert [t.service_id for t in plan.dispatch[0].targets] == ["S1"]
        assert [(p.method, p.reason) for p in plan.pruned] == [(("S2", "I", "f"), "redundant")]

    def test_required_methods_survive_usefulness(self):
        s1 = simple("S1", {"f": "a", "g": "b"})
        client = make_client("Cl", "A", "I", ["g"])
        reg = registry_with(s1, client)
        plan = optimize(compose_simple([s1], "X", "A"), reg, None, OptimizationProfile(unused=True))
        assert plan.exposed() == [("I", "g")]
        assert [(p.method, p.reason) for p in plan.pruned] == [(("X", "I", "f"), "non_useful")]

    def test_context_memory_limit(self):
        s1 = simple("S1", {"f": "a", "g": "b"}, cost={"f": 4, "g": 32})
        reg = registry_with(s1)
        ctx = ContextModel(external={"memory_limit": 10})
        plan = optimize(compose_simple([s1], "X", "A"), reg, ctx, OptimizationProfile(context=True))
        assert plan.exposed() == [("I", "f")]
        assert plan.pruned[0].reason == "context_excluded"

    def test_everything_pruned(self):
        s1 = simple("S1", {"f": "a"}, cost={"f": 50})
        with pytest.raises(EmptyComposite):
            optimize(compose_simple([s1], "X", "A"), registry_with(s1), {"memory_limit": 1},
                     OptimizationProfile(context=True))

    def test_profile_names(self):
        assert OptimizationProfile.from_names(["context", "redundant"]).names() == ["redundant", "context"]
        with pytest.raises(ValueError):
            OptimizationProfile.from_names(["fast"])


def _cost_after_redundancy(entry, redundant):
    first = entry.targets[0].signature
    kept = [t for t in entry.targets if not redundant or t is entry.targets[0]
            or (t.method, t.signature.inputs, t.signature.output) != (first.name, first.inputs, first.output)]
    return max(t.signature.annotations.memory_cost for t in kept)


@settings(max_examples=80, deadline=None)
@given(st.randoms(use_true_random=False))
def test_optimize_conservation_and_context_oracle(rng):
    members = random_members(rng, ["S1", "S2", "S3"][: rng.randint(1, 3)], lambda s: "A")
    reg = registry_with(*members)
    plan = compose_simple(members, "X", "A")
    limit = rng.randint(0, 45)
    profile = OptimizationProfile(rng.random() < 0.5, False, True)
    expected = {e.exposed for e in plan.dispatch if _cost_after_redundancy(e, profile.redundant) > limit}
    try:
        opt = optimize(plan, reg, {"memory_limit": limit}, profile)
    except EmptyComposite:
        assert expected == set(plan.exposed())
        return
    excluded = {p.method[1:] for p in opt.pruned if p.reason != "redundant"}
    assert set(opt.exposed()) | excluded == set(plan.exposed())
    assert not set(opt.exposed()) & excluded
    assert excluded == expected
