"""
Batch frontend for the certification pipeline.

Every command writes fixed-format text so re-runs diff cleanly. Exit codes:
0 certified or passed, 1 verification failed, 2 solver or infrastructure
failure.
"""

import argparse
import asyncio
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

from .errors import (
    CertificationRefused,
    CheckpointMismatch,
    CoverageError,
    DepthBudgetError,
    GapViolation,
    LatticeError,
    LipschitzViolation,
    MarginalError,
    MemoryBudgetError,
    ParamsError,
    SolverFailure,
    TiltAmbiguityError,
)
from .gabound import (
    CertificationSession,
    SegmentCertificate,
    certify_theta,
    envelope_from_certificates,
    read_envelope,
    write_envelope,
)
from .landscape import (
    PUBLISHED_BASE_COUNT,
    certify_size_bound,
    default_degree_family,
    dump_models,
    enumerate_base_decompositions,
    load_models,
    replay_soundness,
    size_log_lines,
    strategy_family,
    verify_degree_bound,
)
from .lyapunov import build_transition_matrices, export_system, monte_carlo_lyapunov
from .rebalance import (
    TameParams,
    dump_family,
    normalize_family_name,
    resolve_family,
    validate_family,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INFRA = 2

COMMANDS = (
    "family validate",
    "matrices build",
    "envelope solve",
    "size certify",
    "degree certify",
    "lyapunov mc",
    "base enumerate",
)

DEFAULT_SIZE_LATTICE = (
    "0:0.30:0.001",
    "0.30:0.3710:0.0001",
    "0.3710:0.3718:0.000001",
    "0.3718:0.45:0.0001",
    "0.45:1:0.001",
)
DEFAULT_DEGREE_LATTICE = ("0.2:0.5:0.0001",)
# families whose envelopes feed the degree landscape
DEGREE_FAMILIES = ("sonetto", "regulus", "regulust")


@dataclass(frozen=True)
class LatticeSegment:
    lo: float
    hi: float
    step: float


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs; built from the command line."""

    command: str
    family: str = ""
    n: int = 14
    lattice: Tuple[LatticeSegment, ...] = ()
    gap_threshold: float = 5e-6
    target: float = 0.319895
    seed: int = 0
    out: Optional[Path] = None
    workers: int = 1
    verbose: bool = False
    envelope: Optional[Path] = None
    envelope_dir: Optional[Path] = None
    models: Optional[Path] = None
    mode: Optional[str] = None
    timeout: Optional[float] = None
    samples: int = 8
    p: float = 0.3714
    steps: int = 2000
    reps: int = 200


def parse_lattice_spec(specs: Sequence[str]) -> Tuple[LatticeSegment, ...]:
    """
    Parse "lo:hi:step" pieces and check they are sorted and contiguous.

    Raises:
        LatticeError: When a piece is malformed, unsorted or leaves a hole
    """
    segments = []
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 3:
            raise LatticeError(f"Lattice piece {spec!r} must look like lo:hi:step")
        try:
            lo, hi, step = (float(x) for x in parts)
        except ValueError:
            raise LatticeError(f"Lattice piece {spec!r} has a non-numeric field")
        if not (0.0 <= lo < hi <= 1.0) or step <= 0:
            raise LatticeError(f"Lattice piece {spec!r} needs 0 <= lo < hi <= 1 and step > 0")
        count = (hi - lo) / step
        if abs(count - round(count)) > 1e-6:
            raise LatticeError(f"Step {step} does not divide [{lo}, {hi}]")
        segments.append(LatticeSegment(lo, hi, step))
    if not segments:
        raise LatticeError("Empty lattice specification")
    for left, right in zip(segments, segments[1:]):
        if right.lo < left.hi - 1e-12:
            raise LatticeError(f"Lattice pieces overlap or are unsorted at {right.lo}")
        if right.lo > left.hi + 1e-12:
            raise LatticeError(f"Lattice leaves a hole between {left.hi} and {right.lo}")
    return tuple(segments)


def lattice_points(segments: Sequence[LatticeSegment]) -> List[float]:
    """Lattice points in increasing order, rounded to 10 decimals."""
    points: List[float] = []
    for segment in segments:
        count = int(round((segment.hi - segment.lo) / segment.step))
        for k in range(count + 1):
            value = round(segment.lo + k * segment.step, 10)
            if not points or value > points[-1]:
                points.append(value)
    return points


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _open_output(path: Optional[Path]) -> TextIO:
    if path is None:
        return sys.stdout
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _emit(lines: Sequence[str], path: Optional[Path]) -> None:
    stream = _open_output(path)
    try:
        for line in lines:
            stream.write(line + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()


def _family_validate(config: RunConfig) -> int:
    params = resolve_family(config.family)
    report = validate_family(params, config.n, samples=config.samples, seed=config.seed)
    lines = [f"{params.name} n={config.n} states={len(report.states)}"]
    lines.extend(f"FAIL {message}" for message in report.failures)
    lines.append("PASS" if report.passed else f"FAILED first violation {report.first_violation}")
    _emit(lines, config.out)
    return EXIT_OK if report.passed else EXIT_FAILED


def _matrices_build(config: RunConfig) -> int:
    params = resolve_family(config.family)
    system = build_transition_matrices(params)
    target = config.out or Path(f"{params.name.lower()}-matrices")
    manifest = export_system(system, target)
    _emit([f"{system.name} K={system.K} H={system.H} digest={system.digest} -> {manifest}"], None)
    return EXIT_OK


_WORKER_SESSIONS: Dict[str, CertificationSession] = {}


def _solve_segment(family: str, interval: Tuple[float, float], gap_threshold: float) -> Dict[str, Any]:
    """Worker entry point; each process keeps its own compiled session."""
    params = resolve_family(family)
    session = _WORKER_SESSIONS.get(family)
    if session is None:
        session = CertificationSession.for_params(params)
        _WORKER_SESSIONS[family] = session
    certificate = certify_theta(params, interval, gap_threshold, session=session)
    return {
        "p_lo": certificate.p_lo,
        "p_hi": certificate.p_hi,
        "theta": certificate.theta,
        "gap": certificate.gap,
        "attempts": certificate.attempts,
    }


def checkpoint_path(out: Path) -> Path:
    return out.with_name(out.name + ".partial.jsonl")


def checkpoint_header(params: TameParams, gap_threshold: float) -> Dict[str, Any]:
    """First checkpoint line: identifies the family table and the gap threshold."""
    digest = hashlib.sha256(dump_family(params).encode("utf-8")).hexdigest()
    return {
        "kind": "header",
        "family": params.name,
        "digest": digest,
        "gap_threshold": gap_threshold,
    }


def read_checkpoint(
    path: Path, header: Optional[Dict[str, Any]] = None
) -> Dict[Tuple[float, float], Dict[str, Any]]:
    """
    Completed segments keyed by (p_lo, p_hi) rounded to 10 decimals.

    Raises:
        CheckpointMismatch: When `header` is given and the file was written
            for another family table or gap threshold
    """
    done: Dict[Tuple[float, float], Dict[str, Any]] = {}
    if not path.exists():
        return done
    found: Optional[Dict[str, Any]] = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            logger.warning("Skipping truncated checkpoint line in %s", path)
            continue
        if record.get("kind") == "header":
            found = record
            continue
        done[(round(record["p_lo"], 10), round(record["p_hi"], 10))] = record
    if header is not None and (done or found is not None) and found != header:
        raise CheckpointMismatch(
            f"{path} was written for {found.get('family') if found else 'an unknown run'} "
            f"(gap threshold {found.get('gap_threshold') if found else '?'}); "
            f"remove it to start {header['family']} afresh"
        )
    return done


async def solve_lattice(
    family: str,
    points: Sequence[float],
    gap_threshold: float,
    checkpoint: Path,
    workers: int,
) -> List[Dict[str, Any]]:
    """
    Certify every lattice segment, resuming from the checkpoint file.

    Results come back in lattice order regardless of completion order.
    """
    segments = [(points[k], points[k + 1]) for k in range(len(points) - 1)]
    header = checkpoint_header(resolve_family(family), gap_threshold)
    done = read_checkpoint(checkpoint, header)
    pending = [s for s in segments if (round(s[0], 10), round(s[1], 10)) not in done]
    if done:
        logger.info("Resuming: %d of %d segments already certified", len(segments) - len(pending), len(segments))

    loop = asyncio.get_running_loop()
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    pool = ProcessPoolExecutor(max_workers=max(1, workers))
    try:
        # a file without completed segments is restarted with a fresh header
        with open(checkpoint, "a" if done else "w", encoding="utf-8") as log:
            if not done:
                log.write(json.dumps(header) + "\n")
                log.flush()
            futures = [
                loop.run_in_executor(pool, _solve_segment, family, segment, gap_threshold)
                for segment in pending
            ]
            for finished, future in enumerate(asyncio.as_completed(futures), start=1):
                record = await future
                log.write(json.dumps(record) + "\n")
                log.flush()
                done[(round(record["p_lo"], 10), round(record["p_hi"], 10))] = record
                if finished % 50 == 0:
                    logger.info("%d of %d segments certified", finished, len(pending))
    except BaseException:
        # queued segments are dropped; ones already handed to a worker finish in the background
        pool.shutdown(wait=False, cancel_futures=True)
        raise
    pool.shutdown(wait=True)

    return [done[(round(lo, 10), round(hi, 10))] for lo, hi in segments]


def default_mode(params: TameParams) -> str:
    """Envelope shape a family is consumed with: ramp for the degree families."""
    return "ramp" if normalize_family_name(params.name) in DEGREE_FAMILIES else "step"


def _envelope_solve(config: RunConfig) -> int:
    params = resolve_family(config.family)
    expected = default_mode(params)
    mode = config.mode or expected
    if mode != expected:
        logger.warning(
            "%s envelopes are normally %s; writing a %s envelope as requested",
            params.name,
            expected,
            mode,
        )
    if config.lattice:
        segments = config.lattice
    else:
        default = DEFAULT_SIZE_LATTICE if mode == "step" else DEFAULT_DEGREE_LATTICE
        segments = parse_lattice_spec(default)
    points = lattice_points(segments)
    out = config.out or Path(f"{params.name.lower()}.env")
    checkpoint = checkpoint_path(out)

    coroutine = solve_lattice(config.family, points, config.gap_threshold, checkpoint, config.workers)
    records = asyncio.run(asyncio.wait_for(coroutine, timeout=config.timeout))
    certificates = [
        SegmentCertificate(
            p_lo=r["p_lo"], p_hi=r["p_hi"], theta=r["theta"], gap=r["gap"], attempts=r["attempts"]
        )
        for r in records
    ]
    envelope = envelope_from_certificates(certificates, mode, params)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_envelope(envelope, out)
    checkpoint.unlink(missing_ok=True)
    logger.info("Wrote %d segments to %s", envelope.segments, out)
    return EXIT_OK


def _size_certify(config: RunConfig) -> int:
    if config.envelope is None:
        raise FileNotFoundError("size certify needs --envelope")
    envelope = read_envelope(config.envelope)
    bound = certify_size_bound(envelope, config.gap_threshold)
    lines = size_log_lines(envelope)
    lines.append(f"CERTIFIED sigma <= {bound:.14f}")
    _emit(lines, config.out)
    return EXIT_OK


def _degree_certify(config: RunConfig) -> int:
    if config.models is not None:
        models = load_models(config.models, config.envelope_dir)
    else:
        if config.envelope_dir is None:
            raise FileNotFoundError("degree certify needs --envelope-dir or --models")
        models = default_degree_family(config.envelope_dir)
    family = strategy_family(models)
    logger.info("Degree family: %d models, %d strategies", len(models), len(family))
    report = verify_degree_bound(
        family, target=config.target, gap_threshold=config.gap_threshold, workers=config.workers
    )
    _emit(report.log_lines(), config.out)
    if not report.certified:
        return EXIT_FAILED
    replay = replay_soundness(report, family, seed=config.seed)
    if not replay.passed:
        logger.error("Soundness replay found %d violations", len(replay.violations))
        return EXIT_FAILED
    return EXIT_OK


def _lyapunov_mc(config: RunConfig) -> int:
    system = build_transition_matrices(resolve_family(config.family))
    result = monte_carlo_lyapunov(system, config.p, config.steps, config.reps, config.seed)
    _emit([f"{config.p:.6f} {result.estimate:.10f} {result.stderr:.10f}"], config.out)
    return EXIT_OK


def _base_enumerate(config: RunConfig) -> int:
    models = enumerate_base_decompositions()
    lines = [model.name for model in models]
    lines.append(f"{len(models)} base decompositions (published: {PUBLISHED_BASE_COUNT})")
    _emit(lines, None)
    if config.out is not None:
        config.out.parent.mkdir(parents=True, exist_ok=True)
        config.out.write_text(dump_models(models), encoding="utf-8")
    return EXIT_OK


_DISPATCH = {
    "family validate": _family_validate,
    "matrices build": _matrices_build,
    "envelope solve": _envelope_solve,
    "size certify": _size_certify,
    "degree certify": _degree_certify,
    "lyapunov mc": _lyapunov_mc,
    "base enumerate": _base_enumerate,
}


def run(config: RunConfig) -> int:
    """Dispatch one command and map its outcome to an exit code."""
    handler = _DISPATCH.get(config.command)
    if handler is None:
        logger.error("Unknown command %r; expected one of %s", config.command, ", ".join(COMMANDS))
        return EXIT_INFRA
    try:
        return handler(config)
    except (LipschitzViolation, GapViolation, CoverageError, TiltAmbiguityError) as exc:
        logger.error("Verification failed: %s", exc)
        return EXIT_FAILED
    except (
        SolverFailure,
        CertificationRefused,
        MemoryBudgetError,
        DepthBudgetError,
        FileNotFoundError,
        ParamsError,
        LatticeError,
        MarginalError,
        CheckpointMismatch,
        asyncio.TimeoutError,
    ) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INFRA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tame-certify",
        description="Certify size and degree exponents of tame-rebalanced circuits "
        "for Kronecker powers of the disjointness matrix.",
        epilog="Exit codes: 0 certified, 1 verification failed, 2 solver or input failure.",
    )
    parser.add_argument("area", help="family | matrices | envelope | size | degree | lyapunov | base | serve")
    parser.add_argument("action", nargs="?", default="", help="validate | build | solve | certify | mc | enumerate")
    parser.add_argument("--family", default="", help="Preset name or path to a family YAML file")
    parser.add_argument("--n", type=int, default=14, help="Block length in bits (multiple of K)")
    parser.add_argument(
        "--interval",
        action="append",
        default=[],
        metavar="LO:HI:STEP",
        help="Lattice piece; repeat to build a piecewise lattice",
    )
    parser.add_argument("--gap-threshold", type=float, default=5e-6)
    parser.add_argument("--target", type=float, default=0.319895)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None, help="Output file or directory")
    parser.add_argument("--workers", type=int, default=1, help="Solver worker processes")
    parser.add_argument("--envelope", type=Path, default=None, help="Envelope file for size certify")
    parser.add_argument("--envelope-dir", type=Path, default=None)
    parser.add_argument("--models", type=Path, default=None, help="Model YAML file for degree certify")
    parser.add_argument(
        "--mode",
        choices=("step", "ramp"),
        default=None,
        help="Envelope shape (default: ramp for Sonetto, Regulus, RegulusT; step otherwise)",
    )
    parser.add_argument("--timeout", type=float, default=None, help="Seconds before an envelope run is abandoned")
    parser.add_argument("--samples", type=int, default=8, help="Random start states for family validate")
    parser.add_argument("--p", type=float, default=0.3714)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--reps", type=int, default=200)
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """
    Raises:
        LatticeError: When an --interval piece is malformed
    """
    command = f"{args.area} {args.action}".strip()
    return RunConfig(
        command=command,
        family=args.family,
        n=args.n,
        lattice=parse_lattice_spec(args.interval) if args.interval else (),
        gap_threshold=args.gap_threshold,
        target=args.target,
        seed=args.seed,
        out=args.out,
        workers=args.workers,
        verbose=args.verbose,
        envelope=args.envelope,
        envelope_dir=args.envelope_dir,
        models=args.models,
        mode=args.mode,
        timeout=args.timeout,
        samples=args.samples,
        p=args.p,
        steps=args.steps,
        reps=args.reps,
    )


def main_from_argv(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    if args.area == "serve":
        from .certify_server import mcp

        print("Starting tame-certify tool server on stdio", file=sys.stderr)
        mcp.run()
        return EXIT_OK
    try:
        config = config_from_args(args)
    except LatticeError as exc:
        logger.error("%s", exc)
        return EXIT_INFRA
    if not math.isfinite(config.gap_threshold) or config.gap_threshold < 0:
        logger.error("--gap-threshold must be a non-negative number")
        return EXIT_INFRA
    return run(config)
