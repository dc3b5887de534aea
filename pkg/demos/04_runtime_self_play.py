"""Run the reference orchestrator against two in-process services."""

import threading

from carecheck.cli import data_dir
from carecheck.protocol import parse_configuration
from carecheck.runtime import (
    HandshakeMismatch, ServiceEndpoint, load_behaviour, load_contract, make_policy,
    run_orchestrator,
)

d = data_dir()
contract = load_contract(d / "coffee.contract")
people = [load_behaviour(d / "alice.behaviour.json"), load_behaviour(d / "bob.behaviour.json")]


def quietly(endpoint):
    try:
        endpoint.serve()
    except Exception as exc:  # a refused handshake ends the service early
        print(f"  service ended: {exc!r}")


def session(orc, services):
    endpoints = [ServiceEndpoint(b, parse_configuration(c), deadline=3.0)
                 for b, c in zip(people, services)]
    threads = [threading.Thread(target=quietly, args=(e,), daemon=True) for e in endpoints]
    for t in threads:
        t.start()
    try:
        return run_orchestrator(contract, [("127.0.0.1", e.port) for e in endpoints],
                                parse_configuration(orc), make_policy("stop-at-final"),
                                deadline=3.0)
    except HandshakeMismatch as exc:
        return exc
    finally:
        for t in threads:
            t.join(5)


for orc in ("DICT/CENT", "MAJ/DIST"):
    report = session(orc, [orc, orc])
    print(f"{orc}: executed {report.labels}, final state {report.final_state}")
print("mismatch:", repr(session("MAJ/CENT", ["DICT/CENT", "MAJ/CENT"])))
