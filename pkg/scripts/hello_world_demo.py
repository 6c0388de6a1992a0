"""Integrate two remote hello-world services through IntegServ and show
the wire traffic, then unintegrate and confirm the nodes are unchanged."""

from pathlib import Path

from anis import IntegServ, Network, load_descriptor
from anis.remoting import encode

DESCRIPTORS = Path(__file__).resolve().parents[1] / "scenarios" / "descriptors"


def snapshot(net: Network) -> dict:
    return {nid: (n.registry.state(), sorted(n.stubs), sorted(n.skeletons)) for nid, n in net.nodes.items()}


def main() -> None:
    net = Network()
    net.add_link("A", "C")
    net.add_link("B", "C")
    for name, node in (("service1.json", "A"), ("service2.json", "B")):
        desc = load_descriptor(DESCRIPTORS / name)
        desc.node_id = node
        net.nodes[node].registry.register_service(desc)
        net.nodes[node].registry.set_run_state(desc.service_id, "started")
    isv = IntegServ(net, "C")
    before = snapshot(net)

    cid = isv.integrate("Service1", ["Service2"], constraints={"new_id": "Service3"})
    record = isv.records[-1]
    print("composite:", cid, "on", record.host, "via", " -> ".join(record.chain.names()))
    reg = net.nodes[record.host].registry
    reg.set_run_state(cid, "started")
    print("result:", reg.invoke(cid, "displayHelloWorld", []))
    for msg in net.trace:
        print("  ", encode(msg))

    isv.unintegrate("Service1", ["Service2"])
    print("restored:", snapshot(net) == before)


if __name__ == "__main__":
    main()
