import argparse
import logging
import os
import sys
from typing import List, Optional

import structlog

from audit import audit_artifacts
from bench import MODE_REUSE, MODES, predicted_rdmpf, run_bench
from errors import (AuditViolation, DepositRejected, FinalizeRejected, ParamsError, RdmpfError, ReclaimRejected,
                    RetrievalRejected, ScenarioError, SpawnError, SpawnRejected, TagMismatch, TransferMismatch)
from kem_capsule import generate_vector, vector_params, write_vectors
from math_core import PROFILE_PRODUCTION, PROFILE_TEST, composition_law_oracle, save_params
from protocol import ScenarioRun
from scenario import DEFAULT_SEED, ScenarioConfig

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1

# Exit code per failure class, checked in order
EXIT_CODES = (
    (ScenarioError, 2),
    (ParamsError, 2),
    (SpawnError, 3),
    (SpawnRejected, 3),
    (DepositRejected, 4),
    (RetrievalRejected, 5),
    (TagMismatch, 5),
    (ReclaimRejected, 6),
    (FinalizeRejected, 7),
    (AuditViolation, 8),
    (TransferMismatch, 9),
)

TRACE_FILE = "trace.txt"
EXPORT_FILE = "noticeboard.bin"
VECTOR_FILE = "vectors.txt"
PARAMS_FILE = "params.bin"


def exit_code_for(error: Exception) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(error, cls):
            return code
    return EXIT_UNEXPECTED


# Console logging to stderr; stdout carries the report
def configure_logging(verbose: bool = False):
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.DEBUG if verbose else logging.INFO),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ScenarioError("bad-list", text) from None


def cmd_run(args) -> int:
    if args.scenario:
        config = ScenarioConfig.load(args.scenario)
    else:
        config = ScenarioConfig()
    config.apply_overrides(seed=args.seed, profile=args.profile)
    run = ScenarioRun(config)
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, TRACE_FILE)
    export_path = os.path.join(args.out, EXPORT_FILE)

    try:
        outcome = run.execute()
    finally:
        run.world.sim.write_trace(trace_path)
        run.world.board.export(export_path)
        print(f"Trace written to: {trace_path}")
        print(f"Noticeboard export written to: {export_path}")

    print(f"Deposit {outcome.deposit_id} idx={outcome.idx} state={outcome.state}")
    if outcome.reclaimed:
        print(f"✅ Reclaimed {outcome.refund} to the committed refund output")
    else:
        print(f"✅ Payload delivered: {outcome.payload_match}  csrn match: {outcome.csrn_match}")
        print(f"✅ Finalize accepted: {outcome.finalized}")
    return EXIT_OK


def cmd_audit(args) -> int:
    report = audit_artifacts(args.trace, args.export)
    for line in report.lines():
        print(line)
    if not report.ok:
        raise AuditViolation(detail=f"{len(report.violations) + len(report.observation.violations)} violations")
    print("✅ Audit clean")
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = bytes.fromhex(args.seed or DEFAULT_SEED)
    for result in run_bench(_int_list(args.dims), args.n, args.mode, args.bits, seed, args.payload_len):
        for line in result.rows():
            print(line)
        if result.total_rdmpf != predicted_rdmpf(args.n, args.mode):
            print("❌ RDMPF count differs from the closed form")
            return EXIT_UNEXPECTED
    return EXIT_OK


def cmd_vectors(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    params = vector_params()
    records = []
    for i in range(args.count):
        seed = f"vector-{i}".encode()
        records.append((f"vector-{i}", generate_vector(params, seed, idx=i)))
    write_vectors(os.path.join(args.out, VECTOR_FILE), records)
    save_params(params, os.path.join(args.out, PARAMS_FILE))
    print(f"Wrote {len(records)} vectors to {os.path.join(args.out, VECTOR_FILE)}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    for p in _int_list(args.primes):
        report = composition_law_oracle(p)
        print(f"p={p}: {report.agreements}/{report.trials} quadruples agree")
        if report.counterexample is not None:
            sender, recipient, nested, composed = report.counterexample
            print(f"  counterexample sender=({sender.lam}, {sender.omega}) "
                  f"recipient=({recipient.lam}, {recipient.omega})")
            print(f"  nested={[list(r) for r in nested.rows]} compose={[list(r) for r in composed.rows]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdmpf-drop", description="RDMPF dead-drop transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an end-to-end scenario")
    run.add_argument("--scenario", help="JSON scenario file")
    run.add_argument("--seed", help="hex seed")
    run.add_argument("--profile", choices=(PROFILE_TEST, PROFILE_PRODUCTION))
    run.add_argument("--out", default="out", help="directory for trace and noticeboard export")
    run.set_defaults(func=cmd_run)

    audit = sub.add_parser("audit", help="audit a trace and noticeboard export")
    audit.add_argument("--trace", required=True)
    audit.add_argument("--export", required=True)
    audit.set_defaults(func=cmd_audit)

    bench = sub.add_parser("bench", help="count RDMPF invocations and wire sizes")
    bench.add_argument("--dims", default="8", help="comma separated matrix dimensions")
    bench.add_argument("--n", type=int, default=2)
    bench.add_argument("--mode", choices=MODES, default=MODE_REUSE)
    bench.add_argument("--bits", type=int, default=64)
    bench.add_argument("--payload-len", type=int, default=256)
    bench.add_argument("--seed", help="hex seed")
    bench.set_defaults(func=cmd_bench)

    vectors = sub.add_parser("vectors", help="write golden capsule vectors")
    vectors.add_argument("--out", default="vectors")
    vectors.add_argument("--count", type=int, default=4)
    vectors.set_defaults(func=cmd_vectors)

    oracle = sub.add_parser("oracle", help="brute-force the composition law at small primes")
    oracle.add_argument("--primes", default="7,11,13")
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except RdmpfError as e:
        code = exit_code_for(e)
        print(f"❌ {type(e).__name__}: {e}")
        logger.error("command.failed", command=args.command, reason=e.reason, exit_code=code)
        return code
    except Exception as e:
        print(f"❌ Unexpected error: {e}")
        logger.exception("command.crashed", command=args.command)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
