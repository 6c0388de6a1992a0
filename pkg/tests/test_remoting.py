import pytest
from hypothesis import given, settings, strategies as st

from anis.errors import (
    LinkDown,
    MalformedFrame,
    NoLink,
    ReplayInterrupted,
    ServiceStopped,
    UnknownLink,
    UnknownMethod,
    UnknownRemote,
)
from anis.remoting import (
    CALL,
    RESULT,
    Buffered,
    Network,
    WireMessage,
    compose_with_cache,
    decode,
    decode_stream,
    encode,
)

from gen import CALL_METHODS, oracle_last_of_run, random_calls, register_service
from test_service_model import hello


def fabric(policy=None, auto=True):
    """Reg on B, a stub for it on A (with a cache when ``policy`` is given)."""
    net = Network(auto_deliver=auto)
    net.add_link("A", "B")
    net.nodes["B"].registry.register_service(register_service())
    net.make_skeleton("Reg", "B")
    net.announce("B")
    stub = net.make_stub("Reg", "B", "A", "reg")
    if policy is not None:
        net.attach_cache(stub, policy)
    return net, stub


class TestWire:
    def test_roundtrip(self):
        msg = WireMessage(CALL, 3, "C", "B", service_id="S", method="m", args=[1, "x"])
        assert decode(encode(msg)) == msg

    def test_stream_keeps_partial_tail(self):
        a = encode(WireMessage(CALL, 1, "A", "B", service_id="S", method="m", args=[]))
        b = encode(WireMessage(RESULT, 1, "B", "A", service_id="S", method="m", value=[1]))
        msgs, rest = decode_stream(a + b[:5])
        assert len(msgs) == 1 and rest == b[:5]

    def test_malformed(self):
        with pytest.raises(MalformedFrame):
            decode(b"\x00\x00\x00\x02{}")
        with pytest.raises(MalformedFrame):
            decode(encode(WireMessage(CALL, 1, "A", "B", service_id="S", method="m", args=[])) + b"\x00")

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(1, 2**31),
        st.lists(st.one_of(st.integers(), st.text(max_size=5), st.booleans(), st.none()), max_size=4),
    )
    def test_roundtrip_property(self, rid, args):
        msg = WireMessage(CALL, rid, "A", "B", service_id="S", method="m", args=args)
        assert decode(encode(msg)) == msg


class TestConnected:
    def test_transparency(self):
        net, stub = fabric()
        assert net.remote_invoke(stub, "set", [4]) == []
        assert net.remote_invoke(stub, "get") == [4]
        assert net.nodes["B"].registry.invoke("Reg", "get") == [4]

    def test_facade_invoked_locally(self):
        net, stub = fabric()
        reg = net.nodes["A"].registry
        reg.invoke("reg", "set", [9])
        assert reg.invoke("reg", "get") == [9]

    def test_remote_errors(self):
        net, stub = fabric()
        with pytest.raises(UnknownMethod):
            net.remote_invoke(stub, "nope")
        with pytest.raises(UnknownMethod):
            stub.call("nope", [])
        net.nodes["B"].registry.set_run_state("Reg", "stopped")
        with pytest.raises(ServiceStopped):
            net.remote_invoke(stub, "get")

    def test_unknown_remote_and_bye(self):
        net = Network()
        net.add_link("A", "B")
        with pytest.raises(UnknownRemote):
            net.make_stub("Reg", "B", "A")
        net.nodes["B"].registry.register_service(register_service())
        net.announce("B")
        net.nodes["B"].registry.unregister_service("Reg")
        with pytest.raises(UnknownRemote):
            net.make_stub("Reg", "B", "A")

    def test_no_link(self):
        net = Network()
        net.add_node("A")
        net.add_node("B")
        with pytest.raises(NoLink):
            net.make_stub("Reg", "B", "A")
        with pytest.raises(UnknownLink):
            net.link_set_state("A", "B", "down")

    def test_stub_of_a_stub(self):
        net = Network()
        net.add_link("A", "B")
        net.add_link("B", "C")
        net.nodes["A"].registry.register_service(hello("Service1", "A"))
        net.make_skeleton("Service1", "A")
        net.announce("A")
        net.make_stub("Service1", "A", "B", "s1")
        net.make_skeleton("s1", "B")
        net.announce("B", ["s1"])
        outer = net.make_stub("s1", "B", "C", "s1b")
        assert net.nodes["C"].registry.invoke("s1b", "displayHelloWorld") == ["S1"]
        assert outer.remote_service_id == "s1"

    def test_link_down_without_cache(self):
        net, stub = fabric()
        net.link_set_state("A", "B", "down")
        with pytest.raises(LinkDown):
            net.remote_invoke(stub, "get")


class TestDisconnected:
    def test_passthrough_when_up(self):
        net, stub = fabric("none")
        for k in range(3):
            assert net.remote_invoke(stub, "set", [k]) == []
        assert not stub.cache.log

    def test_buffer_and_replay(self):
        net, stub = fabric("none")
        net.link_set_state("A", "B", "down")
        assert net.remote_invoke(stub, "set", [1]) == Buffered(1)
        assert net.remote_invoke(stub, "put", ["x"]) == Buffered(2)
        assert [e.method for e in stub.cache.log] == ["set", "put"]
        (report,) = net.link_set_state("A", "B", "up")
        assert report["sent"] == [1, 2] and not stub.cache.log
        assert net.nodes["B"].registry.invoke("Reg", "get") == [1]

    def test_attach_twice(self):
        net, stub = fabric("none")
        assert net.attach_cache(stub, "drop_superseded") is stub.cache
        assert stub.cache.coalesce_policy == "none"

    def _replay(self, calls):
        net, stub = fabric("drop_superseded")
        net.link_set_state("A", "B", "down")
        for m, args, imp in calls:
            net.remote_invoke(stub, m, args, importance=imp)
        (report,) = net.link_set_state("A", "B", "up")
        return report

    def test_run_coalesced(self):
        r = self._replay([("set", [1], 0), ("set", [2], 0), ("set", [3], 0)])
        assert r["sent"] == [3] and r["coalesced"] == [1, 2]

    def test_alternating_all_sent(self):
        r = self._replay([("set", [1], 0), ("put", ["a"], 0), ("set", [2], 0)])
        assert r["sent"] == [1, 2, 3] and r["coalesced"] == []

    def test_important_call_kept(self):
        r = self._replay([("set", [1], 0), ("set", [2], 9), ("set", [3], 0)])
        assert r["sent"] == [2, 3] and r["coalesced"] == [1]

    def test_non_idempotent_never_coalesced(self):
        r = self._replay([("mark", ["a"], 0), ("mark", ["b"], 0)])
        assert r["sent"] == [1, 2]

    def test_replay_interrupted(self):
        net, stub = fabric("none")
        net.link_set_state("A", "B", "down")
        for k in range(4):
            net.remote_invoke(stub, "set", [k])
        net.link("A", "B").fail_after = 2
        (report,) = net.link_set_state("A", "B", "up")
        assert "interrupted" in report and report["sent"] == [1, 2]
        assert [e.seq for e in stub.cache.log] == [3, 4]
        with pytest.raises(ReplayInterrupted):
            net.link("A", "B").state = "up"
            net.link("A", "B").fail_after = 1
            net.replay(stub.cache)
        (report,) = net.link_set_state("A", "B", "up")
        assert report["sent"] == [4] and not stub.cache.log
        assert net.nodes["B"].registry.invoke("Reg", "get") == [3]

    def test_compose_with_cache(self):
        net, stub = fabric("none")
        reg = net.nodes["A"].registry
        local = register_service()
        local.service_id, local.node_id = "LocalReg", "A"
        reg.register_service(local)
        desc = compose_with_cache(net, "A", "LocalReg", stub.cache, "Both")
        reg.set_run_state("Both", "started")
        reg.invoke("Both", "set", [5])
        assert reg.invoke("Both", "get") == [5, 5]
        assert desc.service_id == "Both"


@settings(max_examples=100, deadline=None)
@given(st.randoms(use_true_random=False))
def test_drop_superseded_matches_oracle(rng):
    calls = random_calls(rng)
    net, stub = fabric("drop_superseded")
    net.link_set_state("A", "B", "down")
    for m, args, imp in calls:
        net.remote_invoke(stub, m, args, importance=imp)
    entries = [(k + 1, m, CALL_METHODS[m][1], imp) for k, (m, _, imp) in enumerate(calls)]
    sent, coalesced = oracle_last_of_run(entries)
    (report,) = net.link_set_state("A", "B", "up")
    assert (report["sent"], sorted(report["coalesced"])) == (sent, coalesced)


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False))
def test_random_schedules_pair_results(rng):
    """Small model check: three nodes, up to six calls, random delivery order."""
    net = Network(auto_deliver=False)
    for a, b in (("A", "B"), ("B", "C"), ("A", "C")):
        net.add_link(a, b)
    stubs = []
    for owner in ("A", "B", "C"):
        sid = f"Reg{owner}"
        d = register_service()
        d.service_id, d.node_id = sid, owner
        net.nodes[owner].registry.register_service(d)
        net.make_skeleton(sid, owner)
        net.announce(owner)
        net.pump()
    for caller in ("A", "B", "C"):
        for owner in ("A", "B", "C"):
            if caller != owner:
                stubs.append(net.make_stub(f"Reg{owner}", owner, caller))
    issued = []
    for _ in range(rng.randint(1, 6)):
        stub = rng.choice(stubs)
        issued.append((stub, stub.begin_call("get", [])))
    while net.pending():
        net.deliver(*rng.choice(net.pending()))
    last: dict = {}
    calls = set()
    for msg in net.trace:
        if msg.kind == CALL:
            key = (msg.sender, msg.receiver)
            assert msg.request_id > last.get(key, 0)
            last[key] = msg.request_id
            calls.add((msg.sender, msg.receiver, msg.request_id))
        elif msg.kind == RESULT:
            assert (msg.receiver, msg.sender, msg.request_id) in calls
    for stub, rid in issued:
        assert stub.results[rid] == ([0], None)
