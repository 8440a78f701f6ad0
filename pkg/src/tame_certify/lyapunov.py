"""
Transition matrices of the rebalancing process and their growth rates.

M_i counts, for the representative block symbol 2^i - 1 of Hamming weight i,
the terms covering that symbol and the state each one moves to. Products of
i.i.d. B(K, p) draws of these matrices govern the left degree polynomial.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import yaml
from scipy import sparse
from scipy.stats import binom

from .errors import DeadStateError, LyapunovOverflowError
from .kron_core import degree_poly_eval, popcount, read_triplets, write_triplets
from .rebalance import (
    State,
    TameParams,
    _as_state,
    state_blocks,
    step_matrix,
    tilted_block,
    unfold_degrees,
)

logger = logging.getLogger(__name__)

MAX_EXACT_STEPS = 4
MIN_MC_STEPS = 100
MANIFEST_NAME = "manifest.yaml"


@dataclass(frozen=True)
class TransitionSystem:
    """K + 1 sparse nonnegative integer H x H matrices M_0 .. M_K."""

    K: int
    H: int
    matrices: Tuple[sparse.csr_matrix, ...]
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.matrices) != self.K + 1:
            raise ValueError(f"Expected {self.K + 1} matrices, got {len(self.matrices)}")
        for index, matrix in enumerate(self.matrices):
            if matrix.shape != (self.H, self.H):
                raise ValueError(f"M_{index} has shape {matrix.shape}, expected {(self.H, self.H)}")
            if matrix.nnz and matrix.data.min() < 0:
                raise ValueError(f"M_{index} has negative entries")

    @property
    def digest(self) -> str:
        """SHA-256 over the shapes and sorted triplets of every matrix."""
        hasher = hashlib.sha256()
        for matrix in self.matrices:
            coo = sparse.coo_matrix(matrix)
            order = np.lexsort((coo.col, coo.row))
            hasher.update(np.asarray(coo.shape, dtype=np.int64).tobytes())
            hasher.update(coo.row[order].astype(np.int64).tobytes())
            hasher.update(coo.col[order].astype(np.int64).tobytes())
            hasher.update(coo.data[order].astype(np.int64).tobytes())
        return hasher.hexdigest()


def build_transition_matrices(params: TameParams) -> TransitionSystem:
    """M_i(h -> h') counts terms of C_{I(h)} covering 2^i - 1 that land on h'."""
    matrices = tuple(
        step_matrix(params, (1 << i) - 1, "left").astype(np.int64).tocsr()
        for i in range(params.K + 1)
    )
    system = TransitionSystem(K=params.K, H=params.H, matrices=matrices, name=params.name)
    logger.debug(
        "Built %d transition matrices for %s, nnz=%s",
        len(matrices),
        params.name,
        [m.nnz for m in matrices],
    )
    return system


def _start_vector(system: TransitionSystem, h0: Union[State, float, None], start: str) -> np.ndarray:
    if start == "ones":
        return np.ones(system.H)
    if start != "indicator":
        raise ValueError(f"start must be 'indicator' or 'ones', got {start!r}")
    if h0 is None:
        raise ValueError("An indicator start needs a start state")
    vector = np.zeros(system.H)
    vector[_as_state(h0, system.H).index] = 1.0
    return vector


def _advance(vectors: np.ndarray, matrix: sparse.csr_matrix) -> np.ndarray:
    """Row vectors times a sparse matrix."""
    return np.asarray((matrix.T @ vectors.T).T)


def exact_expected_log_growth(
    system: TransitionSystem,
    steps: int,
    p: float,
    h0: Union[State, float, None] = None,
    start: str = "indicator",
    max_steps: int = MAX_EXACT_STEPS,
) -> Tuple[float, float]:
    """
    Expected log2 norm of a product of `steps` random matrices, per bit.

    All (K+1)^steps type sequences are enumerated with their binomial
    probabilities. Sequences whose product has zero norm are excluded.

    Returns:
        Tuple of (value, probability weight of the excluded sequences)
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if not 1 <= steps <= max_steps:
        raise ValueError(f"steps must lie in [1, {max_steps}], got {steps}")
    K = system.K
    type_weights = binom.pmf(np.arange(K + 1), K, p)
    initial = _start_vector(system, h0, start)

    vectors = initial[np.newaxis, :]
    weights = np.ones(1)
    for _ in range(steps):
        live = np.flatnonzero(type_weights > 0)
        vectors = np.stack([_advance(vectors, system.matrices[i]) for i in live], axis=1).reshape(
            -1, system.H
        )
        weights = np.outer(weights, type_weights[live]).ravel()

    norms = vectors.sum(axis=1)
    dead = norms <= 0
    dead_weight = float(weights[dead].sum())
    if dead_weight > 0:
        logger.info(
            "%s: %d type sequences of length %d end in a dead state (weight %.3g)",
            system.name,
            int(dead.sum()),
            steps,
            dead_weight,
        )
    value = float(np.dot(weights[~dead], np.log2(norms[~dead]))) / (K * steps)
    return value, dead_weight


def growth_subadditive(
    system: TransitionSystem, p: float, s: int, t: int, tolerance: float = 1e-12
) -> bool:
    """
    Fekete check (s+t) g(s+t) <= s g(s) + t g(t) on unnormalized growth.

    Uses the all-ones start, for which the 1-norm is submultiplicative on
    nonnegative matrices.
    """
    combined, _ = exact_expected_log_growth(system, s + t, p, start="ones")
    first, _ = exact_expected_log_growth(system, s, p, start="ones")
    second, _ = exact_expected_log_growth(system, t, p, start="ones")
    return (s + t) * combined <= s * first + t * second + tolerance


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    steps: int
    reps: int


def monte_carlo_lyapunov(
    system: TransitionSystem, p: float, steps: int, reps: int, seed: int
) -> MonteCarloEstimate:
    """
    Estimate lambda(p) from `reps` independent products of `steps` matrices.

    Every repetition starts from the all-ones row vector; the running vector
    is renormalized in 1-norm after each step and the log2 factors are
    accumulated in extended precision.

    Raises:
        DeadStateError: When a product collapses to the zero vector
        LyapunovOverflowError: When the accumulated logs stop being finite
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if steps < MIN_MC_STEPS:
        raise ValueError(f"Monte-Carlo estimates need at least {MIN_MC_STEPS} steps")
    if reps < 1:
        raise ValueError("reps must be positive")

    rng = np.random.default_rng(seed)
    draws = rng.binomial(system.K, p, size=(steps, reps))
    vectors = np.ones((reps, system.H))
    logs = np.zeros(reps, dtype=np.longdouble)

    for t in range(steps):
        row_types = draws[t]
        for i in np.unique(row_types):
            rows = row_types == i
            vectors[rows] = _advance(vectors[rows], system.matrices[int(i)])
        norms = vectors.sum(axis=1)
        if np.any(norms <= 0):
            raise DeadStateError(f"{system.name}: product reached the zero vector at step {t + 1}")
        logs += np.log2(norms).astype(np.longdouble)
        vectors /= norms[:, np.newaxis]
        if not np.all(np.isfinite(vectors)):
            raise LyapunovOverflowError(f"{system.name}: renormalized vector is not finite")

    if not np.all(np.isfinite(logs)):
        raise LyapunovOverflowError(f"{system.name}: accumulated log-norm is not finite")
    per_rep = np.asarray(logs / (system.K * steps), dtype=np.float64)
    estimate = float(per_rep.mean())
    stderr = float(per_rep.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    logger.debug("lambda_MC(%s, p=%g) = %.8f +/- %.2e", system.name, p, estimate, stderr)
    return MonteCarloEstimate(estimate=estimate, stderr=stderr, steps=steps, reps=reps)


@dataclass
class InvarianceReport:
    """Per (block, weight) outcome of the weight-class invariance diagnostic."""

    name: str
    results: Dict[Tuple[int, int], bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.results.values())

    def block_passes(self, block: int) -> bool:
        return all(ok for (b, _), ok in self.results.items() if b == block)

    @property
    def failing_blocks(self) -> List[int]:
        return sorted({b for (b, _), ok in self.results.items() if not ok})


def weight_class_invariance_check(params: TameParams) -> InvarianceReport:
    """
    For each block and weight w, check that the multiset of tilts of the
    terms covering x is the same for every x of Hamming weight w.
    """
    report = InvarianceReport(name=params.name)
    symbols = np.arange(1 << params.K)
    weights = popcount(symbols)
    for block in sorted(set(params.blocks)):
        terms = tilted_block(params, block).terms
        covering: List[List[int]] = [[] for _ in symbols]
        for term in terms:
            for x in term.left_support:
                assert term.tilt is not None
                covering[x].append(term.tilt)
        signatures = [tuple(sorted(tilts)) for tilts in covering]
        for w in range(params.K + 1):
            members = {signatures[x] for x in symbols[weights == w]}
            report.results[(block, w)] = len(members) == 1
    if report.passed:
        logger.info("%s: every block is weight-class invariant", params.name)
    else:
        logger.info(
            "%s: blocks %s are not weight-class invariant", params.name, report.failing_blocks
        )
    return report


def row_sum_identity(params: TameParams, system: TransitionSystem) -> bool:
    """Row sums of M_i at h equal the number of terms of C_{I(h)} covering 2^i - 1."""
    blocks = state_blocks(params)
    for i, matrix in enumerate(system.matrices):
        symbol = (1 << i) - 1
        sums = np.asarray(matrix.sum(axis=1)).ravel()
        for block in set(int(b) for b in blocks):
            expected = sum(
                1 for term in tilted_block(params, block).terms if symbol in term.left_support
            )
            if np.any(sums[blocks == block] != expected):
                logger.warning("Row sums of M_%d disagree with block %d", i, block)
                return False
    return True


def _all_terms_matrix(params: TameParams) -> sparse.csr_matrix:
    blocks = state_blocks(params)
    rows: List[int] = []
    cols: List[int] = []
    for state in range(params.H):
        for term in tilted_block(params, int(blocks[state])).terms:
            assert term.tilt is not None
            rows.append(state)
            cols.append(min(max(state + term.tilt, 0), params.H - 1))
    return sparse.coo_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(params.H, params.H)
    ).tocsr()


def support_monotonicity(params: TameParams, system: TransitionSystem) -> bool:
    """Each M_i is entrywise at most the count of all terms regardless of support."""
    bound = _all_terms_matrix(params)
    for matrix in system.matrices:
        excess = matrix - bound
        if excess.nnz and excess.data.max() > 0:
            return False
    return True


def finite_unfold_growth(
    params: TameParams, n: int, p: float, h0: Union[State, float]
) -> float:
    """(1/n) E_p[log2 L] of the unfolded circuit C(n, h0)."""
    return float(degree_poly_eval(unfold_degrees(params, n, h0), p, "left"))


def export_system(system: TransitionSystem, directory: Union[str, Path]) -> Path:
    """Write one triplet file per matrix plus a YAML manifest."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    files: List[str] = []
    for i, matrix in enumerate(system.matrices):
        filename = f"M_{i}.txt"
        write_triplets(matrix, target / filename)
        files.append(filename)
    manifest = {
        "family": system.name,
        "K": system.K,
        "H": system.H,
        "digest": system.digest,
        "matrices": files,
    }
    (target / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    logger.info("Exported %s transition system to %s", system.name, target)
    return target / MANIFEST_NAME


def import_system(directory: Union[str, Path], verify: bool = True) -> TransitionSystem:
    """
    Read a system written by export_system.

    Raises:
        FileNotFoundError: When the manifest or a matrix file is missing
        ValueError: When the content digest does not match the manifest
    """
    source = Path(directory)
    manifest = yaml.safe_load((source / MANIFEST_NAME).read_text(encoding="utf-8"))
    matrices = tuple(read_triplets(source / name) for name in manifest["matrices"])
    system = TransitionSystem(
        K=int(manifest["K"]),
        H=int(manifest["H"]),
        matrices=matrices,
        name=str(manifest.get("family", "")),
    )
    if verify and system.digest != manifest.get("digest"):
        raise ValueError(f"{source}: matrix content does not match the manifest digest")
    return system

