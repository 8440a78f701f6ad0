"""
Tame rebalancing process.

A parameter set selects, for every state of the half-integer lattice
{-H/2 + 1/2, ..., H/2 - 1/2}, a Sergeev building block; each rank-1 term
of that block moves the state by its tilt, clamped to the lattice. Unfolding
the recursion n/K times gives a circuit for D^{(x)n}.

States are handled internally by their index s = h + H/2 - 1/2 in [0, H).
"""

import functools
import logging
import math
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import sparse

from .errors import DepthBudgetError, ParamsError, TiltAmbiguityError
from .kron_core import (
    BuildingBlock,
    DegreeProfile,
    Rank1Term,
    circuit_degrees,
    circuit_matrix_check,
    expand_block,
    first_offending_term,
    pattern_from_index,
    popcount,
    wnnz,
)

logger = logging.getLogger(__name__)

HALF_INTEGER_TOLERANCE = 1e-9
DEFAULT_MAX_UNFOLD_BITS = 21
DEFAULT_MAX_DEGREE_BITS = 28

PRESET_FILES = {
    "vertin": "vertin.yaml",
    "sonetto": "sonetto.yaml",
    "regulus": "regulus.yaml",
    "regulust": "regulus_t.yaml",
}

_POWER_EXPR = re.compile(
    r"^\s*(?P<base>\d+(?:\.\d+)?)\s*\^\s*\(\s*(?P<num>-?\d+)\s*/\s*(?P<den>\d+)\s*\)\s*$"
)
_RUN_EXPR = re.compile(r"^\s*(?P<ordinal>\d+)\s*[x×]\s*(?P<length>\d+)\s*$")


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning("Ignoring malformed %s=%r", name, raw)
        return default


def _get_max_unfold_bits() -> int:
    return _env_int("TAME_CERTIFY_MAX_UNFOLD_BITS", DEFAULT_MAX_UNFOLD_BITS)


def _get_max_degree_bits() -> int:
    return _env_int("TAME_CERTIFY_MAX_DEGREE_BITS", DEFAULT_MAX_DEGREE_BITS)


def parse_tilt_base(expr: str) -> float:
    """
    Return log2(Z) for an exact expression like "2^(1/3)" or a decimal.

    Raises:
        ParamsError: When the expression cannot be parsed
    """
    match = _POWER_EXPR.match(expr)
    if match:
        base = float(match.group("base"))
        if base <= 0:
            raise ParamsError(f"Tilt base must be positive: {expr!r}")
        return math.log2(base) * int(match.group("num")) / int(match.group("den"))
    try:
        value = float(expr)
    except ValueError:
        raise ParamsError(f"Cannot parse tilt base Z={expr!r}")
    if value <= 0:
        raise ParamsError(f"Tilt base must be positive: {expr!r}")
    return math.log2(value)


@dataclass(frozen=True)
class TameParams:
    """
    A full parameter set naming one circuit family.

    i_runs holds (ordinal, length) pairs with 1-based ordinals into blocks;
    the first run labels the lowest states.
    """

    name: str
    K: int
    H: int
    blocks: Tuple[int, ...]
    i_runs: Tuple[Tuple[int, int], ...]
    z_expr: str
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ParamsError(f"K must be positive, got {self.K}")
        if self.H < 2 or self.H % 2:
            raise ParamsError(f"H must be a positive even integer, got {self.H}")
        if not self.blocks:
            raise ParamsError("At least one building block is required")
        for block in self.blocks:
            if not 0 <= block < (1 << self.K):
                raise ParamsError(f"Block {block} out of range for K={self.K}")
        for ordinal, length in self.i_runs:
            if not 1 <= ordinal <= len(self.blocks):
                raise ParamsError(f"Run ordinal {ordinal} references no block")
            if length < 1:
                raise ParamsError(f"Run lengths must be positive, got {length}")
        total = sum(length for _, length in self.i_runs)
        if total != self.H:
            raise ParamsError(f"Run lengths sum to {total}, expected H={self.H}")
        if self.z_log2 <= 0:
            raise ParamsError(f"Tilt base must exceed 1, got Z={self.z_expr}")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ParamsError("alpha and beta must lie in (0, 1)")

    @property
    def z_log2(self) -> float:
        return parse_tilt_base(self.z_expr)

    @property
    def Z(self) -> float:
        return float(2.0**self.z_log2)


@dataclass(frozen=True)
class State:
    """A point h of the half-integer lattice for window width H."""

    h: float
    H: int

    def __post_init__(self) -> None:
        if not _is_half_integer(self.h):
            raise ValueError(f"State must be a half-integer, got {self.h}")
        if not -self.H / 2 < self.h < self.H / 2:
            raise ValueError(f"State {self.h} lies outside the lattice for H={self.H}")

    @property
    def index(self) -> int:
        return int(self.h + self.H / 2 - 0.5)


def _is_half_integer(h: float) -> bool:
    doubled = 2.0 * h
    return doubled == math.floor(doubled) and int(doubled) % 2 == 1


def state_from_index(index: int, H: int) -> State:
    return State(h=index - H / 2 + 0.5, H=H)


def clamp(h: float, H: int) -> State:
    """Project a half-integer onto the lattice by clamping to the nearest endpoint."""
    if not _is_half_integer(h):
        raise ValueError(f"clamp expects a half-integer, got {h}")
    upper = H / 2 - 0.5
    return State(h=min(max(h, -upper), upper), H=H)


def _clamp_index(index: np.ndarray, H: int) -> np.ndarray:
    return np.clip(index, 0, H - 1)


def _as_state(h0: Union[State, float], H: int) -> State:
    if isinstance(h0, State):
        if h0.H != H:
            raise ValueError(f"State built for H={h0.H}, family has H={H}")
        return h0
    return State(h=float(h0), H=H)


def state_blocks(params: TameParams) -> np.ndarray:
    """Block index I(h) for every state index, lowest state first."""
    ordinals = np.repeat(
        [ordinal for ordinal, _ in params.i_runs],
        [length for _, length in params.i_runs],
    )
    return np.asarray(params.blocks, dtype=np.int64)[ordinals - 1]


def tilt(term: Rank1Term, params: TameParams) -> int:
    """
    Nearest integer to log_Z of the weighted support ratio right/left.

    Raises:
        TiltAmbiguityError: When the value is within 1e-9 of a half-integer
    """
    numerator = wnnz(term.right_support, 1.0 - params.beta, params.beta, params.K)
    denominator = wnnz(term.left_support, 1.0 - params.alpha, params.alpha, params.K)
    value = math.log2(numerator / denominator) / params.z_log2
    if abs(value - math.floor(value) - 0.5) < HALF_INTEGER_TOLERANCE:
        raise TiltAmbiguityError(
            f"{params.name}: tilt argument {value!r} is a half-integer; "
            "rounding does not commute with negation"
        )
    return int(math.floor(value + 0.5))


@functools.lru_cache(maxsize=256)
def tilted_block(params: TameParams, block: int) -> BuildingBlock:
    """The building block with index `block`, every term carrying its tilt."""
    expanded = expand_block(pattern_from_index(block, params.K))
    terms = tuple(
        Rank1Term(
            left_support=term.left_support,
            right_support=term.right_support,
            tilt=tilt(term, params),
        )
        for term in expanded.terms
    )
    return BuildingBlock(pattern=expanded.pattern, terms=terms)


def transpose_params(params: TameParams) -> TameParams:
    """
    Complement and reverse the blocks and the run array, swap alpha and beta.

    Self-transpose families keep their name; otherwise a trailing "T" is
    added or removed.
    """
    full = (1 << params.K) - 1
    count = len(params.blocks)
    blocks = tuple(full - block for block in reversed(params.blocks))
    runs = tuple((count + 1 - ordinal, length) for ordinal, length in reversed(params.i_runs))
    if (blocks, runs, params.beta, params.alpha) == (
        params.blocks,
        params.i_runs,
        params.alpha,
        params.beta,
    ):
        name = params.name
    elif params.name.endswith("T"):
        name = params.name[:-1]
    else:
        name = params.name + "T"
    return TameParams(
        name=name,
        K=params.K,
        H=params.H,
        blocks=blocks,
        i_runs=runs,
        z_expr=params.z_expr,
        alpha=params.beta,
        beta=params.alpha,
    )


def transpose_term(term: Rank1Term, params: TameParams) -> Rank1Term:
    """
    Transpose a term and re-tilt it under the transposed parameter set.

    Raises:
        TiltAmbiguityError: When the transposed tilt is ambiguous
    """
    swapped = term.transposed()
    retilted = tilt(swapped, transpose_params(params))
    if term.tilt is not None and retilted != -term.tilt:
        logger.warning("Transposed tilt %d is not the negation of %d", retilted, term.tilt)
    return Rank1Term(
        left_support=swapped.left_support,
        right_support=swapped.right_support,
        left_signs=swapped.left_signs,
        right_signs=swapped.right_signs,
        tilt=retilted,
    )


def params_from_mapping(data: Dict[str, Any]) -> TameParams:
    """Build a parameter set from the YAML mapping of a family file."""
    try:
        runs = []
        for entry in data["iRuns"]:
            match = _RUN_EXPR.match(str(entry))
            if not match:
                raise ParamsError(f"Malformed run entry {entry!r}; expected 'k x len'")
            runs.append((int(match.group("ordinal")), int(match.group("length"))))
        return TameParams(
            name=str(data["name"]),
            K=int(data["K"]),
            H=int(data["H"]),
            blocks=tuple(int(b) for b in data["blocks"]),
            i_runs=tuple(runs),
            z_expr=str(data["Z"]),
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
        )
    except KeyError as exc:
        raise ParamsError(f"Family file is missing field {exc}")


def load_family(path: Union[str, Path]) -> TameParams:
    with open(path, "r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle)
    if not isinstance(data, dict):
        raise ParamsError(f"Family file {path} does not hold a mapping")
    return params_from_mapping(data)


def dump_family(params: TameParams) -> str:
    """Serialize a parameter set in the family file layout."""
    data = {
        "name": params.name,
        "K": params.K,
        "H": params.H,
        "Z": params.z_expr,
        "alpha": params.alpha,
        "beta": params.beta,
        "blocks": list(params.blocks),
        "iRuns": [f"{ordinal} x {length}" for ordinal, length in params.i_runs],
    }
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def normalize_family_name(name: str) -> str:
    return re.sub(r"[^a-z]", "", name.lower())


def preset(name: str) -> TameParams:
    """
    Load one of the shipped families: Vertin, Sonetto, Regulus, RegulusT.

    Raises:
        ParamsError: When the name is not recognized
    """
    key = normalize_family_name(name)
    if key not in PRESET_FILES:
        raise ParamsError(
            f"Unknown family {name!r}; expected one of Vertin, Sonetto, Regulus, RegulusT"
        )
    text = resources.files("tame_certify").joinpath("families", PRESET_FILES[key]).read_text(
        encoding="utf-8"
    )
    return params_from_mapping(yaml.safe_load(text))


def resolve_family(name_or_path: str) -> TameParams:
    """A preset name, or a path to a family file."""
    if normalize_family_name(name_or_path) in PRESET_FILES:
        return preset(name_or_path)
    path = Path(name_or_path)
    if path.exists():
        return load_family(path)
    raise ParamsError(f"{name_or_path!r} is neither a preset nor a family file")


def _depth(params: TameParams, n: int) -> int:
    if n <= 0 or n % params.K:
        raise ValueError(f"n must be a positive multiple of K={params.K}, got {n}")
    return n // params.K


def unfold(params: TameParams, n: int, h0: Union[State, float]) -> List[Rank1Term]:
    """
    Materialize C(n, h0) as 2^n rank-1 terms.

    The recursion is threaded level by level; block bits of earlier levels
    are the more significant bits of the concatenated index.

    Raises:
        DepthBudgetError: When n exceeds the materialization budget
    """
    levels = _depth(params, n)
    budget = _get_max_unfold_bits()
    if n > budget:
        raise DepthBudgetError(f"unfold at n={n} exceeds the budget of {budget} bits")
    start = _as_state(h0, params.H)
    blocks = state_blocks(params)
    shift = 1 << params.K

    states = [start.index]
    lefts = [np.zeros(1, dtype=np.int64)]
    rights = [np.zeros(1, dtype=np.int64)]
    for _ in range(levels):
        next_states: List[int] = []
        next_lefts: List[np.ndarray] = []
        next_rights: List[np.ndarray] = []
        for state, left, right in zip(states, lefts, rights):
            block = tilted_block(params, int(blocks[state]))
            for term in block.terms:
                assert term.tilt is not None
                next_states.append(min(max(state + term.tilt, 0), params.H - 1))
                next_lefts.append(np.add.outer(left * shift, term.left_support).ravel())
                next_rights.append(np.add.outer(right * shift, term.right_support).ravel())
        states, lefts, rights = next_states, next_lefts, next_rights

    return [
        Rank1Term(left_support=tuple(left.tolist()), right_support=tuple(right.tolist()))
        for left, right in zip(lefts, rights)
    ]


@functools.lru_cache(maxsize=16)
def _stacked_step_matrices(params: TameParams, side: str) -> sparse.csr_matrix:
    """
    All per-symbol transition counts stacked vertically.

    Rows symbol * H + s, columns the clamped target state index.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    blocks = state_blocks(params)
    pairs: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for block in set(int(b) for b in blocks):
        symbols: List[int] = []
        tilts: List[int] = []
        for term in tilted_block(params, block).terms:
            support = term.left_support if side == "left" else term.right_support
            symbols.extend(support)
            assert term.tilt is not None
            tilts.extend([term.tilt] * len(support))
        pairs[block] = (np.asarray(symbols, dtype=np.int64), np.asarray(tilts, dtype=np.int64))

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    for state in range(params.H):
        symbols, tilts = pairs[int(blocks[state])]
        rows.append(symbols * params.H + state)
        cols.append(_clamp_index(state + tilts, params.H))
    row = np.concatenate(rows)
    col = np.concatenate(cols)
    size = (1 << params.K) * params.H
    return sparse.coo_matrix(
        (np.ones(row.size, dtype=np.float64), (row, col)), shape=(size, params.H)
    ).tocsr()


def step_matrix(params: TameParams, symbol: int, side: str = "left") -> sparse.csr_matrix:
    """
    H x H counts for one block symbol x in [0, 2^K).

    Entry (s, s') counts terms of block I(s) whose support on `side`
    contains x and whose tilt moves s to s' after clamping.
    """
    if not 0 <= symbol < (1 << params.K):
        raise ValueError(f"Symbol {symbol} out of range for K={params.K}")
    stacked = _stacked_step_matrices(params, side)
    return stacked[symbol * params.H : (symbol + 1) * params.H]


def _degree_chunks(
    params: TameParams, n: int, start: int, side: str, chunk_rows: int
) -> Iterator[Tuple[int, np.ndarray]]:
    stacked = _stacked_step_matrices(params, side)
    count = 1 << params.K
    matrices = [stacked[a * params.H : (a + 1) * params.H] for a in range(count)]
    # row sums of every symbol matrix, one column per symbol
    closing = np.asarray(stacked.sum(axis=1)).reshape(count, params.H).T

    def walk(vectors: np.ndarray, levels_left: int, offset: int) -> Iterator[Tuple[int, np.ndarray]]:
        if levels_left == 1:
            yield offset, (vectors @ closing).ravel()
            return
        span = 1 << (params.K * levels_left)
        for first in range(0, vectors.shape[0], chunk_rows):
            chunk = vectors[first : first + chunk_rows]
            expanded = np.stack(
                [np.asarray(m.T @ chunk.T).T for m in matrices], axis=1
            ).reshape(-1, params.H)
            yield from walk(expanded, levels_left - 1, offset + first * span)

    initial = np.zeros((1, params.H))
    initial[0, start] = 1.0
    yield from walk(initial, _depth(params, n), 0)


def _profile_side(params: TameParams, n: int, start: int, side: str, chunk_rows: int) -> Tuple[Tuple[float, ...], int]:
    sums = np.zeros(n + 1)
    zeros = 0
    for offset, counts in _degree_chunks(params, n, start, side, chunk_rows):
        weights = popcount(np.arange(offset, offset + counts.size, dtype=np.int64))
        positive = counts > 0
        logs = np.zeros(counts.size)
        logs[positive] = np.log2(counts[positive])
        sums += np.bincount(weights, weights=logs, minlength=n + 1)
        zeros += int(np.count_nonzero(~positive))
    return tuple(float(s) for s in sums), zeros


def unfold_degrees(
    params: TameParams, n: int, h0: Union[State, float], chunk_rows: int = 128
) -> DegreeProfile:
    """
    Degree profile of C(n, h0) without materializing its terms.

    L(x) for x = (a_1, ..., a_m) is the 1-norm of e(h0)^T M_{a_1} ... M_{a_m}
    with per-symbol matrices; prefixes are expanded in chunks.

    Raises:
        DepthBudgetError: When n exceeds the degree-only budget
    """
    _depth(params, n)
    budget = _get_max_degree_bits()
    if n > budget:
        raise DepthBudgetError(f"unfold_degrees at n={n} exceeds the budget of {budget} bits")
    start = _as_state(h0, params.H).index
    left, zero_left = _profile_side(params, n, start, "left", chunk_rows)
    right, zero_right = _profile_side(params, n, start, "right", chunk_rows)
    return DegreeProfile(
        n=n,
        left_weight_sums=left,
        right_weight_sums=right,
        zero_left=zero_left,
        zero_right=zero_right,
    )


@dataclass
class FamilyReport:
    """Outcome of validate_family; failures are human-readable findings."""

    name: str
    n: int
    states: Tuple[float, ...] = ()
    failures: List[str] = field(default_factory=list)
    first_violation: Optional[Tuple[float, Optional[int]]] = None

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, h: float, term: Optional[int], message: str) -> None:
        self.failures.append(message)
        if self.first_violation is None:
            self.first_violation = (h, term)


def sample_states(params: TameParams, samples: int = 8, seed: int = 0) -> Tuple[float, ...]:
    """Both endpoints, the center state and `samples` random states."""
    upper = params.H / 2 - 0.5
    chosen = [-upper, upper, 0.5]
    rng = np.random.default_rng(seed)
    count = min(samples, params.H)
    for index in rng.choice(params.H, size=count, replace=False):
        chosen.append(float(index) - params.H / 2 + 0.5)
    ordered: List[float] = []
    for h in chosen:
        if h not in ordered:
            ordered.append(h)
    return tuple(ordered)


def validate_family(
    params: TameParams,
    n: int,
    samples: int = 8,
    seed: int = 0,
    states: Optional[Sequence[float]] = None,
) -> FamilyReport:
    """
    Check circuit identity, transpose identity, tilt guard and the
    degree-only unfolding on a sample of start states.
    """
    report = FamilyReport(name=params.name, n=n)
    try:
        for block in params.blocks:
            tilted_block(params, block)
        transposed = transpose_params(params)
        for block in transposed.blocks:
            tilted_block(transposed, block)
    except TiltAmbiguityError as exc:
        report.record(float("nan"), None, str(exc))
        return report

    report.states = tuple(states) if states is not None else sample_states(params, samples, seed)
    for h in report.states:
        terms = unfold(params, n, h)
        if not circuit_matrix_check(terms, n):
            offending = first_offending_term(terms)
            report.record(h, offending, f"h={h}: terms do not sum to D^(x){n}")
            continue

        mirrored = unfold(transposed, n, -h)
        flipped = [term.transposed() for term in terms]
        if flipped != mirrored:
            index = next(
                (k for k, (a, b) in enumerate(zip(flipped, mirrored)) if a != b),
                min(len(flipped), len(mirrored)),
            )
            report.record(
                h, index, f"h={h}: transpose of C(n,h) differs from {transposed.name}(n,-h)"
            )

        direct = circuit_degrees(terms, n)
        streamed = unfold_degrees(params, n, h)
        if not (
            np.allclose(direct.left_weight_sums, streamed.left_weight_sums, atol=1e-9)
            and np.allclose(direct.right_weight_sums, streamed.right_weight_sums, atol=1e-9)
        ):
            report.record(h, None, f"h={h}: degree-only unfolding disagrees with the terms")

    if report.passed:
        logger.info("%s validated at n=%d on %d states", params.name, n, len(report.states))
    else:
        logger.warning("%s failed validation: %s", params.name, report.failures[0])
    return report
