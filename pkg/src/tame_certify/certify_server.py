"""
Tame Certify MCP Server

Exposes family validation, segment certification, the size-bound check and
single-point landscape queries as MCP tools so an assistant can drive the
pipeline interactively. Long runs belong to the batch CLI.
"""

import asyncio
import json
import logging
import os
from typing import Any, Callable, Dict, Optional, TypeVar

from mcp.server.fastmcp import FastMCP

from .gabound import certify_theta, read_envelope
from .landscape import (
    certify_size_bound,
    default_degree_family,
    landscape_cost,
    load_models,
    strategy_cost,
    strategy_family,
)
from .rebalance import resolve_family, validate_family

logger = logging.getLogger(__name__)

DEFAULT_TOOL_TIMEOUT = 3600

T = TypeVar("T")


mcp = FastMCP(
    name="tame-certify",
    instructions="""Certification tools for tame-rebalanced depth-2 circuits of
Kronecker powers of the 2x2 disjointness matrix.

Tools:
• validate_family_tool: check a preset or YAML family at block length n
• certify_segment_tool: certified theta for one lattice segment [p_lo, p_hi]
• size_bound_tool: certified size exponent from an envelope file
• landscape_point_tool: best balancing strategy and delta at one (p, q)

Every tool returns JSON with a `status` field of "success" or "error".""",
)


def _get_tool_timeout() -> float:
    """
    Seconds a single tool call may run. Defaults to 3600 unless overridden
    via the TAME_CERTIFY_TOOL_TIMEOUT environment variable.
    """
    raw = os.environ.get("TAME_CERTIFY_TOOL_TIMEOUT", "").strip()
    if not raw:
        return float(DEFAULT_TOOL_TIMEOUT)
    try:
        value = float(raw)
    except ValueError:
        logger.warning("Ignoring non-numeric TAME_CERTIFY_TOOL_TIMEOUT=%r", raw)
        return float(DEFAULT_TOOL_TIMEOUT)
    return value if value > 0 else float(DEFAULT_TOOL_TIMEOUT)


async def _run_blocking(func: Callable[..., T], *args: Any) -> T:
    """
    Run a CPU-bound call off the event loop, bounded by the tool timeout.

    On timeout the caller gets TimeoutError at once, but the worker thread
    cannot be interrupted and keeps computing until `func` returns.
    """
    loop = asyncio.get_running_loop()
    return await asyncio.wait_for(
        loop.run_in_executor(None, func, *args), timeout=_get_tool_timeout()
    )


def _error(exc: BaseException, **context: Any) -> str:
    result: Dict[str, Any] = {
        "status": "error",
        "message": str(exc) or "timed out",
        "error_type": type(exc).__name__,
    }
    result.update(context)
    return json.dumps(result, indent=2, ensure_ascii=False)


def _success(**payload: Any) -> str:
    result: Dict[str, Any] = {"status": "success"}
    result.update(payload)
    return json.dumps(result, indent=2, ensure_ascii=False)


@mcp.tool()
async def validate_family_tool(family: str, n: int = 14) -> str:
    """Validate a tame family at block length n.

    Checks that the unfolded terms sum to the Kronecker power, that the
    transpose identity holds, and that the degree-only unfolding agrees
    with the explicit terms, on a sample of start states.

    Args:
        family: Preset name (Vertin, Sonetto, Regulus, RegulusT) or YAML path
        n: Block length in bits; must be a multiple of the family's K

    Returns:
        JSON with `passed`, the checked states and any failure messages"""
    try:
        params = resolve_family(family)
        report = await _run_blocking(validate_family, params, n)
    except Exception as e:
        return _error(e, family=family, n=n)
    return _success(
        family=params.name,
        n=n,
        passed=report.passed,
        states=list(report.states),
        failures=report.failures,
        first_violation=list(report.first_violation) if report.first_violation else None,
    )


@mcp.tool()
async def certify_segment_tool(
    family: str, p_lo: float, p_hi: float, gap_threshold: float = 5e-6
) -> str:
    """Certify theta for one segment [p_lo, p_hi] of a family's envelope.

    Args:
        family: Preset name or YAML path
        p_lo: Segment start in [0, 1)
        p_hi: Segment end in (p_lo, 1]
        gap_threshold: Largest accepted primal/dual gap (default: 5e-6)

    Returns:
        JSON with theta, the certified gap and the number of solve attempts"""
    try:
        params = resolve_family(family)
        certificate = await _run_blocking(
            certify_theta, params, (p_lo, p_hi), gap_threshold
        )
    except Exception as e:
        return _error(e, family=family, p_lo=p_lo, p_hi=p_hi)
    return _success(
        family=params.name,
        p_lo=certificate.p_lo,
        p_hi=certificate.p_hi,
        theta=certificate.theta,
        gap=certificate.gap,
        attempts=certificate.attempts,
    )


@mcp.tool()
async def size_bound_tool(envelope_path: str, gap_threshold: float = 5e-6) -> str:
    """Certified size exponent sigma from a step or ramp envelope file.

    Args:
        envelope_path: Envelope file written by `tame-certify envelope solve`
        gap_threshold: Largest per-segment gap the bound may absorb

    Returns:
        JSON with the bound and the envelope's family and mode"""
    try:
        envelope = read_envelope(envelope_path)
        bound = await _run_blocking(certify_size_bound, envelope, gap_threshold)
    except Exception as e:
        return _error(e, envelope_path=envelope_path)
    return _success(
        family=envelope.family,
        mode=envelope.mode,
        segments=envelope.segments,
        bound=bound,
    )


@mcp.tool()
async def landscape_point_tool(
    p: float,
    q: float,
    models_path: Optional[str] = None,
    envelope_dir: Optional[str] = None,
) -> str:
    """Best balancing strategy and delta at a single (p, q).

    Args:
        p: Left weight fraction
        q: Right weight fraction
        models_path: Model YAML file; defaults to the standard degree family
        envelope_dir: Directory holding the degree envelope files

    Returns:
        JSON with delta, the winning strategy and its mixing fraction"""
    try:
        if models_path:
            models = load_models(models_path, envelope_dir)
        elif envelope_dir:
            models = default_degree_family(envelope_dir)
        else:
            raise FileNotFoundError("landscape_point_tool needs models_path or envelope_dir")
        family = strategy_family(models)
        delta, strategy = await _run_blocking(landscape_cost, family, p, q)
        _, lam = strategy_cost(strategy, p, q)
    except Exception as e:
        return _error(e, p=p, q=q)
    return _success(p=p, q=q, delta=delta, strategy=strategy.name, mix=lam)


@mcp.resource("tame://docs/usage")
def get_usage_guide() -> str:
    """
    Return the usage guide for the tame-certify tools.
    """
    return """
# Tame Certify - Tool Usage

## Families
Presets: Vertin, Sonetto, Regulus, RegulusT. Any other value is read as a
path to a family YAML file with keys name, K, H, Z, alpha, beta, blocks and
iRuns.

## Typical session
1. `validate_family_tool` with a small n (7 or 14) before anything else.
2. `certify_segment_tool` on a few segments to see theta and the gap.
3. Run the full lattice with `tame-certify envelope solve`; it checkpoints
   and resumes.
4. `size_bound_tool` on the written envelope file.
5. `landscape_point_tool` to inspect the degree landscape at a point.

## Errors
- Check the `status` field in every response
- `error_type` names the failure, for example CertificationRefused when the
  solver gap stays above the threshold
- Calls longer than TAME_CERTIFY_TOOL_TIMEOUT seconds return TimeoutError
- A timed-out computation keeps running in its worker thread until it
  finishes; its result is discarded. Size the timeout to the largest solve
  you expect rather than retrying in a loop

## Environment
- TAME_CERTIFY_SOLVER: CLARABEL (default), SCS or MOSEK
- TAME_CERTIFY_MAX_NNZ: largest explicit Kronecker power
- TAME_CERTIFY_MAX_UNFOLD_BITS / TAME_CERTIFY_MAX_DEGREE_BITS: unfolding limits
"""


if __name__ == "__main__":
    mcp.run()
