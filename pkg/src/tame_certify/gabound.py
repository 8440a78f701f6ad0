"""
Upper bounds on quenched Lyapunov exponents through a flow program.

For T nonnegative N x N matrices A_i drawn i.i.d. from a marginal P, the
program maximizes

    (H(eta) + F(eta) - Ent) / B

over probability flows eta on the edges (i, u) -> (j, v) with A_i(u, v) != 0,
where H is the conditional entropy of an edge given its source node, F the
expected log2 matrix entry and B = T - 1 converts to bits per index bit.

Every solve reports a primal value and a solver-independent dual bound: for
any multipliers of the marginal and conservation constraints the Lagrangian
supremum is a per-node log-sum-exp, so weak duality holds by construction.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
from scipy import sparse
from scipy.special import rel_entr
from scipy.stats import binom, entropy

from .errors import (
    CertificationRefused,
    CoverageError,
    EnvelopeDomainError,
    LipschitzViolation,
    MarginalError,
    SolverFailure,
)
from .lyapunov import TransitionSystem, build_transition_matrices
from .rebalance import TameParams
from .solver_adapter import ConicAdapter, Status

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
DEFAULT_SLACK = 1e-8
DEFAULT_GAP_THRESHOLD = 5e-6
DEFAULT_LIPSCHITZ = 10.0
MAX_RETRIES = 2
WEAK_DUALITY_TOLERANCE = 1e-9

EnvelopeMode = Literal["step", "ramp"]


@dataclass(frozen=True)
class ExactMarginal:
    P: Tuple[float, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.P)
        if np.any(values <= 0):
            raise MarginalError("Exact marginals need every P_i > 0")
        if abs(values.sum() - 1.0) > 1e-9:
            raise MarginalError(f"Exact marginal sums to {values.sum()!r}, expected 1")


@dataclass(frozen=True)
class IntervalMarginal:
    pmin: Tuple[float, ...]
    pmax: Tuple[float, ...]

    def __post_init__(self) -> None:
        lo = np.asarray(self.pmin)
        hi = np.asarray(self.pmax)
        if lo.shape != hi.shape:
            raise MarginalError("pmin and pmax must have the same length")
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
            raise MarginalError("Interval marginals need 0 <= pmin <= pmax <= 1")


Marginal = Union[ExactMarginal, IntervalMarginal]


def _validate_matrices(matrices: Sequence[sparse.spmatrix]) -> Tuple[sparse.csr_matrix, ...]:
    result = []
    for index, matrix in enumerate(matrices):
        csr = sparse.csr_matrix(matrix)
        csr.eliminate_zeros()
        if csr.shape[0] != csr.shape[1]:
            raise ValueError(f"A_{index} is not square")
        if csr.nnz and (csr.data.min() < 0 or np.any(csr.data != np.round(csr.data))):
            raise ValueError(f"A_{index} must have nonnegative integer entries")
        result.append(csr)
    if len({m.shape for m in result}) != 1:
        raise ValueError("All matrices must share one shape")
    return tuple(result)


@dataclass(frozen=True)
class ProgramInstance:
    """One flow program; ent_constant is computed for exact marginals when omitted."""

    matrices: Tuple[sparse.csr_matrix, ...]
    marginal: Marginal
    ent_constant: Optional[float] = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrices", _validate_matrices(self.matrices))
        if self.T < 2:
            raise ValueError("At least two matrix types are required")
        width = len(self.marginal.P) if isinstance(self.marginal, ExactMarginal) else len(
            self.marginal.pmin
        )
        if width != self.T:
            raise MarginalError(f"Marginal has {width} entries for {self.T} matrix types")
        if self.ent_constant is None:
            if not isinstance(self.marginal, ExactMarginal):
                raise MarginalError("Interval instances need an explicit entropy constant")
            object.__setattr__(self, "ent_constant", float(entropy(self.marginal.P, base=2)))

    @property
    def T(self) -> int:
        return len(self.matrices)

    @property
    def N(self) -> int:
        return int(self.matrices[0].shape[0])

    @property
    def bits_per_step(self) -> int:
        return self.T - 1


def binomial_pmf_bounds(
    i: int, n: int, interval: Tuple[float, float], slack: float = DEFAULT_SLACK
) -> Tuple[float, float]:
    """Min and max of binom(n, i) p^i (1-p)^(n-i) over the interval, widened by slack."""
    p_lo, p_hi = interval
    if not 0.0 <= p_lo <= p_hi <= 1.0:
        raise ValueError(f"Invalid probability interval [{p_lo}, {p_hi}]")
    if slack < 0:
        raise ValueError("slack must be non-negative")
    candidates = [p_lo, p_hi]
    stationary = i / n
    if p_lo < stationary < p_hi:
        candidates.append(stationary)
    values = binom.pmf(i, n, np.asarray(candidates))
    return max(0.0, float(values.min()) - slack), min(1.0, float(values.max()) + slack)


def binomial_entropy(n: int, p: float) -> float:
    """Entropy of B(n, p) in bits."""
    return float(binom.entropy(n, p)) / LN2


def min_binomial_entropy(n: int, interval: Tuple[float, float], grid: int = 101) -> float:
    """
    Minimum entropy of B(n, p) for p in the interval.

    The entropy is unimodal with its peak at 1/2, so the minimum sits at an
    endpoint; a grid scan backs up the endpoint rule.
    """
    p_lo, p_hi = interval
    if not 0.0 <= p_lo <= p_hi <= 1.0:
        raise ValueError(f"Invalid probability interval [{p_lo}, {p_hi}]")
    endpoint = min(binomial_entropy(n, p_lo), binomial_entropy(n, p_hi))
    scan = min(binomial_entropy(n, float(p)) for p in np.linspace(p_lo, p_hi, grid))
    if scan < endpoint - 1e-12:
        logger.warning(
            "Binomial entropy grid minimum %.12f undercuts the endpoint rule %.12f on [%g, %g]",
            scan,
            endpoint,
            p_lo,
            p_hi,
        )
        return scan
    return endpoint


def exact_binomial_marginal(K: int, p: float) -> ExactMarginal:
    """B(K, p) as an exact marginal; p in {0, 1} is rejected."""
    if not 0.0 < p < 1.0:
        raise MarginalError(f"Exact programs need 0 < p < 1, got {p}")
    return ExactMarginal(P=tuple(float(x) for x in binom.pmf(np.arange(K + 1), K, p)))


def interval_binomial_marginal(
    K: int, interval: Tuple[float, float], slack: float = DEFAULT_SLACK
) -> IntervalMarginal:
    bounds = [binomial_pmf_bounds(i, K, interval, slack) for i in range(K + 1)]
    return IntervalMarginal(
        pmin=tuple(lo for lo, _ in bounds), pmax=tuple(hi for _, hi in bounds)
    )


def build_instance(
    system: TransitionSystem,
    marginal_spec: Union[float, Tuple[float, float], Marginal],
    slack: float = DEFAULT_SLACK,
    ent_constant: Optional[float] = None,
) -> ProgramInstance:
    """
    A program over the matrices M_0..M_K of a transition system.

    marginal_spec is either p (exact binomial marginal), an interval
    (p_lo, p_hi) relaxed by `slack`, or a prepared marginal. Prepared
    interval marginals need ent_constant.
    """
    ent: Optional[float] = ent_constant
    if isinstance(marginal_spec, (ExactMarginal, IntervalMarginal)):
        marginal: Marginal = marginal_spec
    elif isinstance(marginal_spec, tuple):
        marginal = interval_binomial_marginal(system.K, marginal_spec, slack)
        if ent is None:
            ent = min_binomial_entropy(system.K, marginal_spec)
    else:
        marginal = exact_binomial_marginal(system.K, float(marginal_spec))
    return ProgramInstance(
        matrices=system.matrices, marginal=marginal, ent_constant=ent, name=system.name
    )


@dataclass(frozen=True)
class FlowSupport:
    """
    The edge set of the flow program with incidence matrices.

    Edges are sorted by source node, node id i * N + u.
    """

    T: int
    N: int
    src: np.ndarray
    dst: np.ndarray
    pair: np.ndarray
    log2_weight: np.ndarray

    @classmethod
    def from_matrices(cls, matrices: Sequence[sparse.csr_matrix]) -> "FlowSupport":
        T = len(matrices)
        N = int(matrices[0].shape[0])
        src: List[np.ndarray] = []
        dst: List[np.ndarray] = []
        pair: List[np.ndarray] = []
        weight: List[np.ndarray] = []
        for i, matrix in enumerate(matrices):
            coo = sparse.csr_matrix(matrix).tocoo()
            order = np.lexsort((coo.col, coo.row))
            u = coo.row[order].astype(np.int64)
            v = coo.col[order].astype(np.int64)
            a = coo.data[order].astype(np.float64)
            j = np.tile(np.arange(T, dtype=np.int64), u.size)
            src.append(np.repeat(i * N + u, T))
            dst.append(j * N + np.repeat(v, T))
            pair.append(i * T + j)
            weight.append(np.repeat(np.log2(a), T))
        return cls(
            T=T,
            N=N,
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            pair=np.concatenate(pair),
            log2_weight=np.concatenate(weight),
        )

    @property
    def size(self) -> int:
        return int(self.src.size)

    @property
    def nodes(self) -> int:
        return self.T * self.N

    def _incidence(self, rows: np.ndarray, count: int) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (np.ones(self.size), (rows, np.arange(self.size))), shape=(count, self.size)
        )

    @property
    def out_incidence(self) -> sparse.csr_matrix:
        return self._incidence(self.src, self.nodes)

    @property
    def in_incidence(self) -> sparse.csr_matrix:
        return self._incidence(self.dst, self.nodes)

    @property
    def pair_incidence(self) -> sparse.csr_matrix:
        return self._incidence(self.pair, self.T * self.T)

    def marginals(self, eta: np.ndarray) -> np.ndarray:
        """rho(i, u): total outflow of every node."""
        return np.bincount(self.src, weights=eta, minlength=self.nodes)


def flow_objective(support: FlowSupport, eta: np.ndarray) -> float:
    """H(eta) + F(eta) in bits; zero entries contribute nothing."""
    values = np.clip(np.asarray(eta, dtype=np.float64), 0.0, None)
    rho = support.marginals(values)
    conditional = -float(np.sum(rel_entr(values, rho[support.src]))) / LN2
    reward = float(np.dot(values, support.log2_weight))
    return conditional + reward


def dual_bound(
    support: FlowSupport,
    w: np.ndarray,
    phi: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
) -> float:
    """
    Weak-duality upper bound on max H + F over the feasible flows.

    w prices the pair masses, which lie in [lo, hi]; phi prices inflow minus
    outflow at every node.
    """
    c = support.log2_weight - w[support.pair] - phi[support.src] + phi[support.dst]
    starts = np.flatnonzero(np.r_[True, support.src[1:] != support.src[:-1]])
    node_of_edge = np.cumsum(np.r_[True, support.src[1:] != support.src[:-1]]) - 1
    peak = np.maximum.reduceat(c, starts)
    mass = np.add.reduceat(np.exp2(c - peak[node_of_edge]), starts)
    per_node = peak + np.log2(mass)
    return float(per_node.max() + np.sum(np.maximum(w * lo, w * hi)))


@dataclass(frozen=True)
class SolveOutcome:
    """Primal and dual values of lambda-hat and their gap (dual - primal)."""

    primal: float
    dual: float
    gap: float
    status: Status
    solve_seconds: float
    attempts: int = 1


class FlowProgram:
    """
    The flow program compiled once for a support; marginals are parameters.

    kind "exact" fixes every pair mass, kind "interval" boxes it.
    """

    def __init__(self, support: FlowSupport, kind: Literal["exact", "interval"]) -> None:
        self.support = support
        self.kind = kind
        pairs = support.T * support.T
        self.eta = cp.Variable(support.size, nonneg=True)
        self.rho = cp.Variable(support.nodes, nonneg=True)
        out_matrix = support.out_incidence
        pair_matrix = support.pair_incidence

        self.definition = self.rho == out_matrix @ self.eta
        self.conservation = (out_matrix - support.in_incidence) @ self.eta == 0
        constraints = [self.definition, self.conservation]
        if kind == "exact":
            self.pair_mass = cp.Parameter(pairs, nonneg=True)
            self.marginal_constraints = [pair_matrix @ self.eta == self.pair_mass]
        else:
            self.pair_lo = cp.Parameter(pairs, nonneg=True)
            self.pair_hi = cp.Parameter(pairs, nonneg=True)
            self.marginal_constraints = [
                pair_matrix @ self.eta >= self.pair_lo,
                pair_matrix @ self.eta <= self.pair_hi,
            ]
            constraints.append(cp.sum(self.eta) == 1)
        constraints.extend(self.marginal_constraints)

        entropy_term = -cp.sum(cp.rel_entr(self.eta, out_matrix.T @ self.rho)) / LN2
        self.problem = cp.Problem(
            cp.Maximize(entropy_term + support.log2_weight @ self.eta), constraints
        )

    def set_marginal(self, marginal: Marginal) -> Tuple[np.ndarray, np.ndarray]:
        """Load parameter values; returns the pair-mass box [lo, hi]."""
        if isinstance(marginal, ExactMarginal):
            if self.kind != "exact":
                raise MarginalError("Exact marginal given to an interval program")
            mass = np.outer(marginal.P, marginal.P).ravel()
            self.pair_mass.value = mass
            return mass, mass
        if self.kind != "interval":
            raise MarginalError("Interval marginal given to an exact program")
        lo = np.outer(marginal.pmin, marginal.pmin).ravel()
        hi = np.outer(marginal.pmax, marginal.pmax).ravel()
        self.pair_lo.value = lo
        self.pair_hi.value = hi
        return lo, hi

    def multipliers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pair and node multipliers read back from the last solve."""
        phi = np.asarray(self.conservation.dual_value, dtype=np.float64).ravel()
        if self.kind == "exact":
            w = np.asarray(self.marginal_constraints[0].dual_value, dtype=np.float64).ravel()
        else:
            lower = np.asarray(self.marginal_constraints[0].dual_value, dtype=np.float64).ravel()
            upper = np.asarray(self.marginal_constraints[1].dual_value, dtype=np.float64).ravel()
            w = upper - lower
        return w, phi


class CertificationSession:
    """
    One set of matrices plus its compiled programs, owned by a single worker.
    """

    def __init__(
        self,
        matrices: Sequence[sparse.spmatrix],
        name: str = "",
        adapter: Optional[ConicAdapter] = None,
    ) -> None:
        self.matrices = _validate_matrices(matrices)
        self.name = name
        self.support = FlowSupport.from_matrices(self.matrices)
        self.adapter = adapter or ConicAdapter()
        self._programs: Dict[str, FlowProgram] = {}
        logger.debug("%s: flow support has %d edges", name, self.support.size)

    @classmethod
    def for_system(cls, system: TransitionSystem, adapter: Optional[ConicAdapter] = None) -> "CertificationSession":
        return cls(system.matrices, name=system.name, adapter=adapter)

    @classmethod
    def for_params(cls, params: TameParams, adapter: Optional[ConicAdapter] = None) -> "CertificationSession":
        return cls.for_system(build_transition_matrices(params), adapter)

    @property
    def K(self) -> int:
        return len(self.matrices) - 1

    def program(self, kind: Literal["exact", "interval"]) -> FlowProgram:
        if kind not in self._programs:
            self._programs[kind] = FlowProgram(self.support, kind)
        return self._programs[kind]

    def solve(self, instance: ProgramInstance, attempt: int = 0) -> SolveOutcome:
        """
        Solve the instance with the compiled program.

        Raises:
            SolverFailure: When the solver fails or returns no solution
        """
        if instance.T != len(self.matrices):
            raise ValueError("Instance does not match the session matrices")
        kind: Literal["exact", "interval"] = (
            "exact" if isinstance(instance.marginal, ExactMarginal) else "interval"
        )
        program = self.program(kind)
        lo, hi = program.set_marginal(instance.marginal)
        result = self.adapter.solve(program.problem, attempt)
        if program.eta.value is None:
            raise SolverFailure(f"{self.name}: solver returned no primal point ({result.raw_status})")

        assert instance.ent_constant is not None
        bits = instance.bits_per_step
        primal_raw = flow_objective(self.support, np.asarray(program.eta.value))
        w, phi = program.multipliers()
        # every sign choice gives a valid bound
        dual_raw = min(
            dual_bound(self.support, sw * w, sp * phi, lo, hi)
            for sw in (1.0, -1.0)
            for sp in (1.0, -1.0)
        )
        primal = (primal_raw - instance.ent_constant) / bits
        dual = (dual_raw - instance.ent_constant) / bits
        status = result.status
        if status == "solved" and dual - primal < -WEAK_DUALITY_TOLERANCE:
            logger.warning(
                "%s: primal %.12f exceeds the dual bound %.12f", self.name, primal, dual
            )
            status = "inaccurate"
        return SolveOutcome(
            primal=primal,
            dual=dual,
            gap=dual - primal,
            status=status,
            solve_seconds=result.seconds,
            attempts=attempt + 1,
        )


def solve_instance(
    instance: ProgramInstance, session: Optional[CertificationSession] = None
) -> SolveOutcome:
    """Maximize lambda-hat for one instance, reporting primal, dual and gap."""
    active = session or CertificationSession(instance.matrices, name=instance.name)
    outcome = active.solve(instance)
    if outcome.status == "failed":
        raise SolverFailure(f"{instance.name}: solver did not converge")
    return outcome


@dataclass(frozen=True)
class SegmentCertificate:
    p_lo: float
    p_hi: float
    theta: float
    gap: float
    attempts: int


def certify_theta(
    params: TameParams,
    interval: Tuple[float, float],
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    slack: float = DEFAULT_SLACK,
    session: Optional[CertificationSession] = None,
    max_retries: int = MAX_RETRIES,
) -> SegmentCertificate:
    """
    theta_o for one lattice segment from the interval-relaxed program.

    A solve whose gap exceeds gap_threshold is repeated with tighter solver
    tolerances up to max_retries times.

    Raises:
        CertificationRefused: When the gap stays above the threshold
    """
    p_lo, p_hi = interval
    if not 0.0 <= p_lo < p_hi <= 1.0:
        raise ValueError(f"Invalid segment [{p_lo}, {p_hi}]")
    active = session or CertificationSession.for_params(params)
    instance = ProgramInstance(
        matrices=active.matrices,
        marginal=interval_binomial_marginal(active.K, interval, slack),
        ent_constant=min_binomial_entropy(active.K, interval),
        name=params.name,
    )
    outcome: Optional[SolveOutcome] = None
    for attempt in range(max_retries + 1):
        outcome = active.solve(instance, attempt)
        if outcome.status == "solved" and outcome.gap <= gap_threshold:
            break
        logger.info(
            "%s [%.6f, %.6f]: gap %.3e status %s, re-solving",
            params.name,
            p_lo,
            p_hi,
            outcome.gap,
            outcome.status,
        )
    else:
        assert outcome is not None
        raise CertificationRefused(
            f"{params.name} [{p_lo:.6f}, {p_hi:.6f}]: gap {outcome.gap:.3e} "
            f"above {gap_threshold:.1e} after {max_retries} retries"
        )
    return SegmentCertificate(
        p_lo=p_lo,
        p_hi=p_hi,
        theta=outcome.primal,
        gap=outcome.gap,
        attempts=outcome.attempts,
    )


@dataclass(frozen=True)
class Envelope:
    """
    A piecewise upper envelope on the lattice p_0 < ... < p_L.

    thetas[o] and gaps[o] belong to the segment [p_o, p_{o+1}].
    """

    lattice: Tuple[float, ...]
    thetas: Tuple[float, ...]
    gaps: Tuple[float, ...]
    mode: EnvelopeMode
    family: str = ""
    H: int = 0
    alpha: float = 0.0
    beta: float = 0.0
    lipschitz_bound: float = DEFAULT_LIPSCHITZ

    def __post_init__(self) -> None:
        if self.mode not in ("step", "ramp"):
            raise ValueError(f"mode must be 'step' or 'ramp', got {self.mode!r}")
        if len(self.lattice) < 2:
            raise ValueError("An envelope needs at least one segment")
        if len(self.thetas) != len(self.lattice) - 1 or len(self.gaps) != len(self.thetas):
            raise ValueError("thetas and gaps must align with the lattice segments")
        if np.any(np.diff(self.lattice) <= 0):
            raise ValueError("Envelope lattice must be strictly increasing")
        if self.mode == "ramp":
            check_ramp_lipschitz(self.lattice, self.thetas, self.lipschitz_bound)

    @property
    def segments(self) -> int:
        return len(self.thetas)

    @property
    def domain(self) -> Tuple[float, float]:
        return self.lattice[0], self.lattice[-1]


def check_ramp_lipschitz(
    lattice: Sequence[float], thetas: Sequence[float], bound: float = DEFAULT_LIPSCHITZ
) -> None:
    """
    Raises:
        LipschitzViolation: When |theta_o - theta_{o-1}| > bound * (p_{o+1} - p_o) / 10
    """
    for o in range(1, len(thetas)):
        allowed = bound * (lattice[o + 1] - lattice[o]) / 10.0
        if abs(thetas[o] - thetas[o - 1]) > allowed + 1e-15:
            raise LipschitzViolation(
                f"Segment {o} at p={lattice[o]:.6f}: |{thetas[o]:.14f} - {thetas[o - 1]:.14f}| "
                f"exceeds {allowed:.3e}"
            )


def build_envelope(
    thetas: Sequence[float],
    lattice: Sequence[float],
    mode: EnvelopeMode,
    gaps: Optional[Sequence[float]] = None,
    family: str = "",
    H: int = 0,
    alpha: float = 0.0,
    beta: float = 0.0,
) -> Envelope:
    return Envelope(
        lattice=tuple(float(p) for p in lattice),
        thetas=tuple(float(t) for t in thetas),
        gaps=tuple(float(g) for g in gaps) if gaps is not None else (0.0,) * len(thetas),
        mode=mode,
        family=family,
        H=H,
        alpha=alpha,
        beta=beta,
    )


def envelope_from_certificates(
    certificates: Sequence[SegmentCertificate], mode: EnvelopeMode, params: TameParams
) -> Envelope:
    """
    Raises:
        CoverageError: When consecutive segments leave a hole or overlap
    """
    ordered = sorted(certificates, key=lambda c: c.p_lo)
    for left, right in zip(ordered, ordered[1:]):
        if not math.isclose(left.p_hi, right.p_lo, rel_tol=0.0, abs_tol=1e-12):
            raise CoverageError(f"Segments {left.p_hi:.6f} and {right.p_lo:.6f} do not meet")
    lattice = [c.p_lo for c in ordered] + [ordered[-1].p_hi]
    return build_envelope(
        [c.theta for c in ordered],
        lattice,
        mode,
        gaps=[c.gap for c in ordered],
        family=params.name,
        H=params.H,
        alpha=params.alpha,
        beta=params.beta,
    )


def envelope_eval(env: Envelope, p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Evaluate the envelope at p (scalar or array).

    Raises:
        EnvelopeDomainError: When p lies outside [p_0, p_L]
    """
    values = np.asarray(p, dtype=np.float64)
    lattice = np.asarray(env.lattice)
    if np.any(values < lattice[0]) or np.any(values > lattice[-1]):
        raise EnvelopeDomainError(
            f"Envelope {env.family or '<anonymous>'} is defined on "
            f"[{lattice[0]:.6f}, {lattice[-1]:.6f}]"
        )
    thetas = np.asarray(env.thetas)
    segment = np.clip(np.searchsorted(lattice, values, side="right") - 1, 0, env.segments - 1)
    if env.mode == "step":
        result = thetas[segment]
    else:
        left = lattice[segment]
        mid = (9.0 * left + lattice[segment + 1]) / 10.0
        gamma = np.maximum(0.0, (mid - values) / (mid - left))
        previous = thetas[np.maximum(segment - 1, 0)]
        result = (1.0 - gamma) * thetas[segment] + gamma * previous
    if result.ndim == 0:
        return float(result)
    return result


def write_envelope(env: Envelope, path: Union[str, Path]) -> None:
    """Header line, then 'p_o theta gap' per segment."""
    lines = [
        f"# family={env.family} mode={env.mode} H={env.H} "
        f"alpha={env.alpha} beta={env.beta} end={env.lattice[-1]:.6f}"
    ]
    for p, theta, gap in zip(env.lattice, env.thetas, env.gaps):
        lines.append(f"{p:.6f} {theta:.14f} {gap:.10f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_envelope(path: Union[str, Path]) -> Envelope:
    """
    Parse a file written by write_envelope.

    Raises:
        ValueError: When the header or a segment line is malformed
    """
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing envelope header")
    header: Dict[str, str] = {}
    for token in text[0].lstrip("#").split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed header token {token!r}")
        header[key] = value
    rows = [line.split() for line in text[1:] if line.strip()]
    if any(len(row) != 3 for row in rows):
        raise ValueError(f"{path}: segment lines need three columns")
    lattice = [float(row[0]) for row in rows] + [float(header["end"])]
    mode = header.get("mode", "step")
    if mode not in ("step", "ramp"):
        raise ValueError(f"{path}: unknown envelope mode {mode!r}")
    return build_envelope(
        [float(row[1]) for row in rows],
        lattice,
        "step" if mode == "step" else "ramp",
        gaps=[float(row[2]) for row in rows],
        family=header.get("family", ""),
        H=int(header.get("H", 0)),
        alpha=float(header.get("alpha", 0.0)),
        beta=float(header.get("beta", 0.0)),
    )


@dataclass
class DominanceReport:
    """Sampled (p, exact value, bound) triples and the ones that failed."""

    samples: List[Tuple[float, float, float]] = field(default_factory=list)
    violations: List[Tuple[float, float, float]] = field(default_factory=list)
    logged: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def relaxation_dominance(
    session: CertificationSession,
    certificate: SegmentCertificate,
    samples: int = 10,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> DominanceReport:
    """Exact-p optima inside a segment never exceed its certified theta."""
    rng = np.random.default_rng(seed)
    report = DominanceReport()
    for p in rng.uniform(certificate.p_lo, certificate.p_hi, size=samples):
        instance = ProgramInstance(
            matrices=session.matrices,
            marginal=exact_binomial_marginal(session.K, float(p)),
            name=session.name,
        )
        value = session.solve(instance).primal
        entry = (float(p), value, certificate.theta)
        report.samples.append(entry)
        if value > certificate.theta + tolerance:
            report.violations.append(entry)
    return report


def envelope_dominance(
    env: Envelope,
    session: CertificationSession,
    points: Sequence[float],
    tolerance: float = 1e-9,
) -> DominanceReport:
    """
    Compare the envelope with exact-p optima at the given points.

    In ramp mode a shortfall on the first tenth of a segment whose theta
    rises from the left neighbour is logged rather than counted.
    """
    report = DominanceReport()
    lattice = np.asarray(env.lattice)
    for p in points:
        instance = ProgramInstance(
            matrices=session.matrices,
            marginal=exact_binomial_marginal(session.K, float(p)),
            name=session.name,
        )
        value = session.solve(instance).primal
        bound = float(envelope_eval(env, float(p)))
        entry = (float(p), value, bound)
        report.samples.append(entry)
        if value <= bound + tolerance:
            continue
        o = int(np.clip(np.searchsorted(lattice, p, side="right") - 1, 0, env.segments - 1))
        on_ramp = p < lattice[o] + (lattice[o + 1] - lattice[o]) / 10.0
        if env.mode == "ramp" and on_ramp and o > 0 and env.thetas[o - 1] < env.thetas[o]:
            logger.info("Ramp shortfall at p=%.6f: %.12f > %.12f", p, value, bound)
            report.logged.append(entry)
        else:
            report.violations.append(entry)
    return report
