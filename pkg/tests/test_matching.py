import pytest
from hypothesis import given, settings, strategies as st

from anis.errors import ArityIncompatible
from anis.matching import (
    EMPTY_TABLE,
    ConceptTable,
    MatchedPair,
    apply_plan,
    build_transform_plan,
    classify,
    match_semantics,
    match_signatures,
)
from anis.service_model import InterfaceDescriptor, MethodSignature as M

from gen import oracle_labels, random_interface, random_interface_pair, random_table


def iface(iid, *methods):
    return InterfaceDescriptor(iid, "functional", list(methods))


class TestSignatures:
    def test_identical_hello(self):
        a = iface("A", M("displayHelloWorld"))
        assert match_signatures(a, a)[0] == "full"

    def test_partial(self):
        a = iface("A", M("f", ("int",), "int"), M("g"))
        b = iface("B", M("f", ("int",), "int"), M("h"))
        klass, pairs = match_signatures(a, b)
        assert klass == "partial"
        assert pairs == [MatchedPair(("A", "f"), ("B", "f"), "api")]

    def test_input_types_differ(self):
        assert match_signatures(iface("A", M("f", ("int",), "int")), iface("B", M("f", ("string",), "int")))[0] == "none"

    def test_void_is_an_ordinary_type(self):
        assert match_signatures(iface("A", M("f", (), "void")), iface("B", M("f", (), "unit")))[0] == "none"


class TestSemantics:
    def test_same_concept_different_name(self):
        a = iface("A", M("f", concept="greet"))
        b = iface("B", M("sayHello", concept="greet"))
        klass, pairs = match_semantics(a, b)
        assert klass == "full" and pairs[0].kind == "semantic"

    def test_no_concepts(self):
        assert match_semantics(iface("A", M("f")), iface("B", M("g")))[0] == "none"

    def test_partial(self):
        a = iface("A", M("f", concept="greet"), M("g", concept="report"))
        b = iface("B", M("hello", concept="greet"))
        assert match_semantics(a, b)[0] == "partial"

    def test_synonyms_are_not_transitive(self):
        t = ConceptTable([("a", "b"), ("b", "c")])
        assert t.equivalent("a", "b") and t.equivalent("c", "b")
        assert not t.equivalent("a", "c")

    def test_maximum_pairing_beats_first_fit(self):
        # first-fit pairs x~p and leaves y without a partner
        t = ConceptTable([("c1", "c2"), ("c1", "c3")])
        a = iface("A", M("x", concept="c1"), M("y", concept="c2"))
        b = iface("B", M("p", concept="c2"), M("q", concept="c3"))
        report = classify(a, b, t)
        assert report.semantic_class == "full"
        assert oracle_labels(a, b, t) == ("none", "full")

    def test_concept_table_roundtrip(self, tmp_path):
        t = ConceptTable([("greet", "hello")])
        p = tmp_path / "c.json"
        p.write_text(t.to_json())
        assert ConceptTable.load(p).synonyms == t.synonyms
        with pytest.raises(ValueError):
            ConceptTable.from_json('[["only-one"]]')


class TestTransform:
    def test_rename_only(self):
        a, b = iface("A", M("f", ("int",), "int", "c")), iface("B", M("sayHello", ("int",), "int", "c"))
        plan = classify(a, b).transform_plan
        (r,) = plan.renames
        assert r.from_method == ("A", "f") and r.to_method == ("B", "sayHello")
        assert r.input_permutation == (0,) and r.input_coercions == () and r.output_coercion is None

    def test_coercion(self):
        a, b = iface("A", M("f", ("int",), "int", "c")), iface("B", M("g", ("float",), "int", "c"))
        plan = classify(a, b).transform_plan
        assert plan.renames[0].input_coercions == ((0, "int", "float"),)
        assert match_signatures(apply_plan(plan, a), b)[0] == "full"

    def test_arity_incompatible(self):
        a, b = iface("A", M("f", ("int", "int"), "int", "c")), iface("B", M("g", ("int",), "int", "c"))
        pairs = classify(a, b).pairs
        with pytest.raises(ArityIncompatible):
            build_transform_plan(pairs, a, b)
        assert "ArityIncompatible" in classify(a, b).transform_error


class TestClassify:
    def test_identical(self):
        a = iface("A", M("f", concept="x"))
        r = classify(a, a)
        assert (r.api_class, r.semantic_class) == ("full", "full")

    def test_disjoint_names_matching_concepts(self):
        r = classify(iface("A", M("f", concept="x")), iface("B", M("g", concept="x")))
        assert (r.api_class, r.semantic_class) == ("none", "full")
        assert r.transform_plan is not None and r.feasible

    def test_infeasible(self):
        r = classify(iface("A", M("f")), iface("B", M("g")))
        assert (r.api_class, r.semantic_class) == ("none", "none")
        assert not r.feasible

    def test_unmatched_lists(self):
        r = classify(iface("A", M("f"), M("g")), iface("B", M("f")))
        assert r.unmatched_left == [("A", "g")] and r.unmatched_right == []


pairs_st = st.builds(lambda rng: (random_interface_pair(rng), random_table(rng)), st.randoms(use_true_random=False))


@settings(max_examples=300, deadline=None)
@given(pairs_st)
def test_labels_equal_oracle(case):
    (a, b), t = case
    r = classify(a, b, t)
    assert (r.api_class, r.semantic_class) == oracle_labels(a, b, t)


@settings(max_examples=200, deadline=None)
@given(pairs_st)
def test_symmetry(case):
    (a, b), t = case
    r1, r2 = classify(a, b, t), classify(b, a, t)
    assert (r1.api_class, r1.semantic_class) == (r2.api_class, r2.semantic_class)


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False))
def test_reflexivity(rng):
    a = random_interface(rng, "A")
    r = classify(a, a, EMPTY_TABLE)
    assert r.api_class == "full" and r.semantic_class == "full"


@settings(max_examples=200, deadline=None)
@given(pairs_st)
def test_report_invariants(case):
    (a, b), t = case
    r = classify(a, b, t)
    lefts = [p.left for p in r.pairs]
    rights = [p.right for p in r.pairs]
    assert len(set(lefts)) == len(lefts) and len(set(rights)) == len(rights)
    assert len(r.pairs) + len(r.unmatched_left) == len(a.methods)
    assert len(r.pairs) + len(r.unmatched_right) == len(b.methods)
    has_semantic = any(p.kind == "semantic" for p in r.pairs)
    assert has_semantic == (r.transform_plan is not None or r.transform_error is not None)


@settings(max_examples=200, deadline=None)
@given(pairs_st)
def test_transform_soundness(case):
    (a, b), t = case
    r = classify(a, b, t)
    if r.transform_plan is None:
        return
    renamed = apply_plan(r.transform_plan, a)
    right = {(i, s.name): s for i, s in [(b.id, m) for m in b.methods]}
    for (iid, sig), rename in zip(renamed, r.transform_plan.renames):
        assert sig.same_signature(right[rename.to_method])
