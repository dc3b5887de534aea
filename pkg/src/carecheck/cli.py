"""Command-line entry point.

Exit codes: 0 holds/pass, 1 fails, 2 unknown or resource limit, 3 usage error.
Results go to standard output as ``key: value`` records; progress and
diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import shlex
import sys
import time
from importlib import resources
from pathlib import Path

from . import checker, smc, testgen
from .protocol import InvalidParams, PARAM_KEYS, SystemParams, parse_configuration, parse_params
from .query import EXPECTED_MAX, PROBABILITY, MalformedPredicate, QuerySyntaxError, parse_query
from .semantics import format_trace

log = logging.getLogger("carecheck")

EXIT_OK, EXIT_FAIL, EXIT_UNKNOWN, EXIT_USAGE = 0, 1, 2, 3
ENV_PREFIX = "CARECHECK_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Input resolution: explicit paths first, then the shipped data directory.

def data_dir() -> Path:
    return Path(str(resources.files("carecheck") / "data"))


_ALIASES = {"params-c-small": "desk-small", "c-small": "desk-small",
            "c1": "paper-c1", "c2": "paper-c2"}


def resolve(name: str, suffixes: tuple[str, ...] = ("",)) -> Path:
    p = Path(name)
    if p.exists():
        return p
    base = _ALIASES.get(name, name)
    for suffix in suffixes + ("",):
        cand = data_dir() / f"{base}{suffix}"
        if cand.is_file():
            return cand
    raise UsageError(f"no such file or shipped preset: {name}")


def env_overrides() -> list[str]:
    out = []
    for key in sorted(PARAM_KEYS):
        val = os.environ.get(ENV_PREFIX + key.upper())
        if val is not None:
            out.append(f"{key}={val}")
    return out


def load_params_arg(args) -> SystemParams:
    text = resolve(args.params, (".params",)).read_text()
    overrides = []
    for item in env_overrides() + list(args.set or []):
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides.append(item)
    text += "\n" + "\n".join(overrides) + "\n"
    return parse_params(text)


def query_arg(text: str) -> str:
    try:
        return resolve(text, (".q",)).read_text().strip()
    except (UsageError, OSError):
        return text


# ---------------------------------------------------------------------------
# Reports

@dataclasses.dataclass
class RunReport:
    echo: str
    params_digest: str = "-"
    seed: str = "-"
    result: str = ""
    artifacts: list = dataclasses.field(default_factory=list)
    wall_time: float = 0.0

    def render(self) -> str:
        head = f"command: {self.echo}\nparams_digest: {self.params_digest}\nseed: {self.seed}\n"
        tail = f"artifacts: {', '.join(map(str, self.artifacts)) or '-'}\nwall_time_s: {self.wall_time:.3f}\n"
        return head + self.result + tail


def echo_line(argv: list[str]) -> str:
    extra = []
    if argv and argv[0] in ("verify", "smc", "simulate", "gentest"):
        for item in env_overrides():
            extra += ["--set", item]
    return "carecheck " + shlex.join(list(argv) + extra)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_verify(args, report: RunReport) -> int:
    params = load_params_arg(args)
    report.params_digest = params.digest()
    query = parse_query(query_arg(args.query))
    if query.kind in (PROBABILITY, EXPECTED_MAX):
        raise UsageError("probabilistic queries are answered by the smc subcommand")
    if args.jobs > 1:
        log.info("exhaustive search runs on one worker; --jobs %d ignored", args.jobs)
    try:
        verdict = checker.check_query(params, query, search=args.search, state_cap=args.state_cap)
    except checker.ResourceExhausted as exc:
        report.result = f"query: {query.text}\nverdict: unknown\nnote: {exc}\n"
        return EXIT_UNKNOWN
    report.result = verdict.to_record()
    if verdict.evidence is not None and args.evidence != "-":
        path = Path(args.evidence)
        path.write_text(f"# {query.text}\n" + checker.evidence_text(verdict))
        report.artifacts.append(path)
    return {True: EXIT_OK, False: EXIT_FAIL, None: EXIT_UNKNOWN}[verdict.holds]


def cmd_smc(args, report: RunReport) -> int:
    params = load_params_arg(args)
    report.params_digest = params.digest()
    report.seed = str(args.seed)
    text = query_arg(args.query)
    try:
        query = parse_query(text)
    except QuerySyntaxError:
        if args.horizon is None:
            raise
        query = parse_query(f"Pr[<={args.horizon:g}](<> {text})")
    if query.kind not in (PROBABILITY, EXPECTED_MAX):
        raise UsageError(f"{query.kind} queries are answered by the verify subcommand")
    if args.horizon is not None:
        text = re.sub(r"\[<=\s*[0-9.]+", f"[<={args.horizon:g}", query.text, count=1)
        query = dataclasses.replace(query, horizon=args.horizon, text=text)
    if args.jobs > 1:
        log.info("runs are simulated on one worker; --jobs %d ignored", args.jobs)
    if query.kind == PROBABILITY and args.runs is None:
        log.info("%d runs (alpha=%g, epsilon=%g)", smc.chernoff_runs(args.alpha, args.epsilon),
                 args.alpha, args.epsilon)
    res = smc.run_query(params, query, alpha=args.alpha, epsilon=args.epsilon, seed=args.seed,
                        runs=args.runs)
    report.result = res.to_record()
    return EXIT_OK


def cmd_simulate(args, report: RunReport) -> int:
    params = load_params_arg(args)
    report.params_digest = params.digest()
    report.seed = str(args.seed)
    run = smc.simulate_run(params, args.horizon, args.seed, args.run_index)
    body = "".join(f"{t:.6f} {line}\n" for (t, _), line in
                   zip(run.events, format_trace(run.trace()).splitlines()))
    final = run.final
    report.result = (f"horizon: {args.horizon:g}\nend_time: {run.end_time:.6f}\n"
                     f"transitions: {len(run.events)}\norc: {final.orc}\n"
                     f"services: {' '.join(final.svc)}\n")
    if args.out:
        Path(args.out).write_text(body)
        report.artifacts.append(args.out)
    else:
        report.result += body
    return EXIT_OK


def cmd_gentest(args, report: RunReport) -> int:
    params = load_params_arg(args)
    report.params_digest = params.digest()
    report.seed = str(args.seed)
    query = testgen.parse_steps_query(resolve(args.steps_query, (".query",)).read_text())
    table = testgen.AnnotationTable.load(resolve(args.annotations, (".annotations",)))
    scope = None if args.scope in ("all", "") else [s.strip() for s in args.scope.split(",")]
    try:
        witness = testgen.find_witness(params, query, search=args.search,
                                       depth_cap=args.depth_cap, seed=args.seed)
    except testgen.DepthExceeded as exc:
        report.result = f"witness: none\nnote: {exc}\n"
        return EXIT_UNKNOWN
    except testgen.NoWitness as exc:
        report.result = f"witness: none\nnote: {exc}\n"
        return EXIT_FAIL
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = testgen.emit_abstract_test(witness, table, params, scope)
    traces = [witness]
    if args.augment:
        traces += testgen.random_witnesses(params, args.augment, seed=args.seed)
    coverage = testgen.edge_coverage(traces)
    files = {"witness.trace": format_trace(witness), "abstract.test": test.to_text(),
             "coverage.txt": "".join(f"{k}: {a}/{b}\n" for k, (a, b) in coverage.items())}
    for name, body in files.items():
        (out / name).write_text(body)
        report.artifacts.append(out / name)
    report.result = (f"witness_steps: {len(witness)}\nemissions: {len(test.emissions)}\n"
                     f"placeholders: {len(test.placeholders())}\n"
                     + "".join(f"coverage_{k}: {a}/{b}\n" for k, (a, b) in coverage.items()))
    return EXIT_OK


def cmd_concretize(args, report: RunReport) -> int:
    test = testgen.AbstractTest.parse(Path(args.test).read_text())
    bindings = testgen.load_bindings(resolve(args.bindings, (".txt",)))
    script = testgen.concretize(test, bindings)
    Path(args.out).write_text(script)
    report.artifacts.append(args.out)
    report.result = f"lines: {len(script.splitlines())}\n"
    return EXIT_OK


def _endpoints(text: str) -> list[tuple[str, int]]:
    out = []
    for item in text.split(","):
        host, _, port = item.strip().rpartition(":")
        if not port.isdigit():
            raise UsageError(f"endpoint {item!r} is not host:port")
        out.append((host or "127.0.0.1", int(port)))
    return out


def _orchestration_record(rep) -> str:
    lines = [f"labels: {' '.join(rep.labels) or '-'}", f"stopped: {rep.stopped}",
             f"final_state: {rep.final_state}"]
    lines += [f"choice: {s} {';'.join(c)} -> {x}" for s, c, x in rep.choices]
    lines += [f"peer_session: svc({r}) -> svc({o}) at {a}" for r, o, a in rep.peer_sessions]
    lines.append("unread_bytes: " + " ".join(f"svc({i})={n}" for i, n in sorted(rep.unread.items())))
    return "\n".join(lines) + "\n"


def cmd_orchestrate(args, report: RunReport) -> int:
    from .runtime import (
        HandshakeMismatch, PeerTimeout, RuntimeProtocolError, load_contract, make_policy,
        run_orchestrator,
    )
    contract = load_contract(resolve(args.contract, (".contract",)))
    config = parse_configuration(args.config)
    report.seed = str(args.seed)
    try:
        rep = run_orchestrator(contract, _endpoints(args.endpoints), config,
                               make_policy(args.policy, args.seed), args.seed, args.deadline)
    except HandshakeMismatch as exc:
        report.result = f"outcome: handshake-mismatch\nnote: {exc}\n"
        return EXIT_FAIL
    except PeerTimeout as exc:
        report.result = f"outcome: timeout\nnote: {exc}\n"
        return EXIT_UNKNOWN
    except RuntimeProtocolError as exc:
        report.result = f"outcome: protocol-violation\nnote: {exc}\n"
        return EXIT_FAIL
    report.result = "outcome: completed\n" + _orchestration_record(rep)
    return EXIT_OK


def cmd_serve(args, report: RunReport) -> int:
    from .runtime import RuntimeProtocolError, PeerTimeout, ServiceEndpoint, load_behaviour
    endpoint = ServiceEndpoint(load_behaviour(resolve(args.behaviour, (".behaviour.json", ".json"))),
                               parse_configuration(args.config), args.port, args.host, args.deadline)
    log.warning("listening on %s:%d", args.host, endpoint.port)
    try:
        rep = endpoint.serve()
    except PeerTimeout as exc:
        report.result = f"outcome: timeout\nnote: {exc}\n"
        return EXIT_UNKNOWN
    except RuntimeProtocolError as exc:
        report.result = f"outcome: protocol-violation\nnote: {exc}\n"
        return EXIT_FAIL
    report.result = (f"outcome: {'terminated' if rep.terminated else 'rejected'}\n"
                     f"handled: {' '.join(f'{r}:{a}' for r, a in rep.handled) or '-'}\n"
                     f"unread_bytes: {rep.unread + rep.peer_unread}\n")
    return EXIT_OK if rep.terminated else EXIT_FAIL


def cmd_conformance(args, report: RunReport) -> int:
    from .runtime import load_contract, load_script, make_policy, run_conformance, run_orchestrator
    script = load_script(args.script)
    sut = None
    if args.contract:
        if not args.config:
            raise UsageError("--contract needs --config")
        contract = load_contract(resolve(args.contract, (".contract",)))
        config = parse_configuration(args.config)
        report.seed = str(args.seed)

        def sut(endpoints):
            return run_orchestrator(contract, endpoints, config,
                                    make_policy(args.policy, args.seed), args.seed,
                                    min(args.deadline, 5.0))
    result = run_conformance(script, args.deadline, sut)
    report.result = f"result: {result.summary()}\ncommands: {len(script)}\n"
    if result.sut_error is not None and result.failure is not None:
        report.result += f"system_under_test: {result.sut_error!r}\n"
    return EXIT_OK if result.passed else EXIT_FAIL


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carecheck", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(sp):
        sp.add_argument("--params", required=True, help="parameter file or preset name")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one parameter (repeatable)")

    v = sub.add_parser("verify", help="exhaustive check of A[] / E<> / E[] / A<> / --> queries")
    model_args(v)
    v.add_argument("--query", required=True, help="query text, file or shipped name")
    v.add_argument("--search", choices=("bfs", "dfs"), default="bfs")
    v.add_argument("--state-cap", type=int, default=checker.DEFAULT_STATE_CAP)
    v.add_argument("--evidence", default="evidence.trace",
                   help="where to write a counterexample or witness ('-' to skip)")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(run=cmd_verify)

    s = sub.add_parser("smc", help="statistical estimation of Pr[<=T] and E[<=T] queries")
    model_args(s)
    s.add_argument("--query", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--runs", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(run=cmd_smc)

    m = sub.add_parser("simulate", help="one stochastic run")
    model_args(m)
    m.add_argument("--horizon", type=float, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--run-index", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(run=cmd_simulate)

    g = sub.add_parser("gentest", help="witness search and abstract test emission")
    model_args(g)
    g.add_argument("--steps-query", required=True)
    g.add_argument("--annotations", required=True)
    g.add_argument("--scope", default="all",
                   help="'all' or a comma list of processes, 'services', 'orchestrator'")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--search", choices=("bfs", "dfs", "rdfs"), default="bfs")
    g.add_argument("--depth-cap", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--augment", type=int, default=0,
                   help="random walks tried for extra edge coverage")
    g.set_defaults(run=cmd_gentest)

    c = sub.add_parser("concretize", help="bind the placeholders of an abstract test")
    c.add_argument("--test", required=True)
    c.add_argument("--bindings", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(run=cmd_concretize)

    o = sub.add_parser("orchestrate", help="run the reference orchestrator")
    o.add_argument("--contract", required=True)
    o.add_argument("--config", required=True)
    o.add_argument("--endpoints", required=True, help="host:port,host:port,...")
    o.add_argument("--policy", default="seeded", help="stop-at-final | seeded | scripted:L;L")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--deadline", type=float, default=5.0)
    o.set_defaults(run=cmd_orchestrate)

    sv = sub.add_parser("serve", help="serve one session as a reference service")
    sv.add_argument("--port", type=int, required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--behaviour", required=True)
    sv.add_argument("--config", required=True)
    sv.add_argument("--deadline", type=float, default=60.0)
    sv.set_defaults(run=cmd_serve)

    k = sub.add_parser("conformance", help="run a concretised test script")
    k.add_argument("--script", required=True)
    k.add_argument("--deadline", type=float, default=10.0)
    k.add_argument("--contract", help="also start the reference orchestrator on this contract")
    k.add_argument("--config")
    k.add_argument("--policy", default="stop-at-final")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(run=cmd_conformance)
    return p


_USER_ERRORS = (UsageError, InvalidParams, QuerySyntaxError, MalformedPredicate, OSError,
                testgen.TableSyntaxError, testgen.UnboundPlaceholder,
                testgen.UnresolvedInterpolation, smc.DomainError, ValueError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    report = RunReport(echo_line(argv))
    start = time.perf_counter()
    try:
        code = args.run(args, report)
    except _USER_ERRORS as exc:
        print(f"carecheck: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemoryError:
        print("carecheck: out of memory", file=sys.stderr)
        return EXIT_UNKNOWN
    report.wall_time = time.perf_counter() - start
    sys.stdout.write(report.render())
    sys.stdout.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
