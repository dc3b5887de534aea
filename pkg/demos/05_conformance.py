"""Replay generated scripts against the live orchestrator, all four configurations."""

from carecheck.cli import data_dir
from carecheck.protocol import load_params, parse_configuration
from carecheck.runtime import load_contract, make_policy, run_conformance, run_orchestrator
from carecheck.testgen import (
    AnnotationTable, concretize, emit_abstract_test, find_witness, load_bindings,
    parse_steps_query,
)

d = data_dir()
table = AnnotationTable.load(d / "coffee.annotations")
contract = load_contract(d / "coffee.contract")

for tag, config in [("dict-cent", "DICT/CENT"), ("dict-dist", "DICT/DIST"),
                    ("maj-cent", "MAJ/CENT"), ("maj-dist", "MAJ/DIST")]:
    params = load_params(d / f"testgen-{tag}.params")
    witness = find_witness(params, parse_steps_query((d / f"steps-{tag}.query").read_text()))
    script = concretize(emit_abstract_test(witness, table, params),
                        load_bindings(d / f"bindings-{tag}.txt"))
    conf = parse_configuration(config)

    def sut(endpoints, conf=conf):
        return run_orchestrator(contract, endpoints, conf,
                                make_policy("scripted:(!euro,-);STOP"), 0, 5.0)

    result = run_conformance(script, 10.0, sut)
    print(f"{tag}: {len(script.splitlines())} script lines -> {result.summary()}")
