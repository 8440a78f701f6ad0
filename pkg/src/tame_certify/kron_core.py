"""
Exact combinatorics of the disjointness matrix D = [[1, 1], [1, 0]].

Covers Sergeev building blocks indexed by {R, C}^K patterns, Kronecker
powers of D, exact circuit checks, wire degrees and the degree polynomials
built from them. Matrix identities are checked in integer arithmetic; only
the degree polynomials are floating point.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import comb, entr

from .errors import MemoryBudgetError, PatternError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

DEFAULT_MAX_NNZ = 3**16

# per-coordinate factor sets: (symbol, branch bit) -> (left bits, right bits)
_COORDINATE_FACTORS = {
    ("R", 0): ((0,), (0, 1)),
    ("R", 1): ((1,), (0,)),
    ("C", 0): ((0, 1), (0,)),
    ("C", 1): ((0,), (1,)),
}

_POP16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int64)


def _get_max_nnz() -> int:
    """
    Return the nonzero budget for explicit Kronecker powers, overridable via
    the TAME_CERTIFY_MAX_NNZ environment variable.
    """
    raw = os.environ.get("TAME_CERTIFY_MAX_NNZ", "").strip()
    if not raw:
        return DEFAULT_MAX_NNZ
    try:
        return int(raw)
    except ValueError:
        logger.warning("Ignoring malformed TAME_CERTIFY_MAX_NNZ=%r", raw)
        return DEFAULT_MAX_NNZ


def popcount(values: Union[int, np.ndarray]) -> np.ndarray:
    """Hamming weight of non-negative integers below 2^48, elementwise."""
    v = np.asarray(values, dtype=np.int64)
    return _POP16[v & 0xFFFF] + _POP16[(v >> 16) & 0xFFFF] + _POP16[(v >> 32) & 0xFFFF]


@dataclass(frozen=True)
class Pattern:
    """A Sergeev pattern: K symbols from {R, C}, leftmost symbol is the MSB."""

    chars: str

    def __post_init__(self) -> None:
        if not self.chars or any(c not in "RC" for c in self.chars):
            raise PatternError(f"Pattern must be a nonempty R/C string: {self.chars!r}")

    @property
    def K(self) -> int:
        return len(self.chars)

    @property
    def index(self) -> int:
        return index_from_pattern(self.chars)

    def symbol_at_bit(self, bit: int) -> str:
        """Symbol governing index bit `bit` (0 = least significant)."""
        return self.chars[self.K - 1 - bit]

    def complement(self) -> "Pattern":
        return Pattern("".join("C" if c == "R" else "R" for c in self.chars))


def pattern_from_index(m: int, K: int) -> Pattern:
    """
    Decode a block index into its pattern (R = 0, C = 1, MSB first).

    Raises:
        PatternError: When m is outside [0, 2^K) or K < 1
    """
    if K < 1:
        raise PatternError(f"K must be positive, got {K}")
    if not 0 <= m < (1 << K):
        raise PatternError(f"Index {m} out of range for K={K}")
    bits = format(m, f"0{K}b")
    return Pattern(bits.replace("0", "R").replace("1", "C"))


def index_from_pattern(chars: str) -> int:
    """Encode an R/C string as an integer; inverse of pattern_from_index."""
    if not chars or any(c not in "RC" for c in chars):
        raise PatternError(f"Pattern must be a nonempty R/C string: {chars!r}")
    return int(chars.replace("R", "0").replace("C", "1"), 2)


@dataclass(frozen=True)
class Rank1Term:
    """
    One rank-1 summand U V^T with supports stored as sorted index tuples.

    Signs are aligned with the supports; None means every coefficient is +1.
    The tilt stays None until a parameter set assigns one.
    """

    left_support: Tuple[int, ...]
    right_support: Tuple[int, ...]
    left_signs: Optional[Tuple[int, ...]] = None
    right_signs: Optional[Tuple[int, ...]] = None
    tilt: Optional[int] = field(default=None, compare=True)

    def __post_init__(self) -> None:
        if not self.left_support or not self.right_support:
            raise PatternError("Rank-1 term supports must be nonempty")
        if self.left_signs is not None and len(self.left_signs) != len(
            self.left_support
        ):
            raise PatternError("left_signs must align with left_support")
        if self.right_signs is not None and len(self.right_signs) != len(
            self.right_support
        ):
            raise PatternError("right_signs must align with right_support")

    def left_values(self) -> np.ndarray:
        if self.left_signs is None:
            return np.ones(len(self.left_support), dtype=np.int64)
        return np.asarray(self.left_signs, dtype=np.int64)

    def right_values(self) -> np.ndarray:
        if self.right_signs is None:
            return np.ones(len(self.right_support), dtype=np.int64)
        return np.asarray(self.right_signs, dtype=np.int64)

    def transposed(self) -> "Rank1Term":
        """Swap the two supports; a set tilt changes sign."""
        return Rank1Term(
            left_support=self.right_support,
            right_support=self.left_support,
            left_signs=self.right_signs,
            right_signs=self.left_signs,
            tilt=None if self.tilt is None else -self.tilt,
        )


@dataclass(frozen=True)
class BuildingBlock:
    """Sergeev construction: 2^K terms indexed by branch vectors."""

    pattern: Pattern
    terms: Tuple[Rank1Term, ...]

    @property
    def K(self) -> int:
        return self.pattern.K


@dataclass(frozen=True)
class DegreeProfile:
    """
    Weight-class sums of log2 degrees of a circuit for D^{(x)n}.

    left_weight_sums[w] is the sum of log2 L(i) over inputs i of Hamming
    weight w; nodes of degree 0 contribute 0 and are counted separately.
    """

    n: int
    left_weight_sums: Tuple[float, ...]
    right_weight_sums: Tuple[float, ...]
    zero_left: int = 0
    zero_right: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"Degree profiles need n >= 1, got {self.n}")
        if len(self.left_weight_sums) != self.n + 1:
            raise ValueError("left_weight_sums must have n + 1 entries")
        if len(self.right_weight_sums) != self.n + 1:
            raise ValueError("right_weight_sums must have n + 1 entries")

    def sums(self, side: str) -> Tuple[float, ...]:
        if side == "left":
            return self.left_weight_sums
        if side == "right":
            return self.right_weight_sums
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")

    def transposed(self) -> "DegreeProfile":
        return DegreeProfile(
            n=self.n,
            left_weight_sums=self.right_weight_sums,
            right_weight_sums=self.left_weight_sums,
            zero_left=self.zero_right,
            zero_right=self.zero_left,
        )


def _support_from_factors(factors: Sequence[Tuple[int, ...]]) -> Tuple[int, ...]:
    """Cartesian product of per-bit choices, factors[bit] is the allowed set."""
    indices = [0]
    for bit, allowed in enumerate(factors):
        indices = [x | (b << bit) for x in indices for b in allowed]
    return tuple(sorted(indices))


def expand_block(pattern: Pattern) -> BuildingBlock:
    """
    Expand a pattern into its 2^K rank-1 terms.

    Coordinate-wise, symbol R splits 1 - xy as 1{x=0} + 1{x=1}1{y=0} and
    symbol C as the transpose. Branch bit b of term j selects the summand
    used on the coordinate owning index bit b.
    """
    K = pattern.K
    terms: List[Rank1Term] = []
    for j in range(1 << K):
        left_factors = []
        right_factors = []
        for bit in range(K):
            left, right = _COORDINATE_FACTORS[(pattern.symbol_at_bit(bit), (j >> bit) & 1)]
            left_factors.append(left)
            right_factors.append(right)
        terms.append(
            Rank1Term(
                left_support=_support_from_factors(left_factors),
                right_support=_support_from_factors(right_factors),
            )
        )
    return BuildingBlock(pattern=pattern, terms=tuple(terms))


def kron_power(n: int, max_nnz: Optional[int] = None) -> sparse.csr_matrix:
    """
    Return D^{(x)n} as a sparse int8 matrix; (x, y) is 1 iff x & y == 0.

    Raises:
        MemoryBudgetError: When 3^n exceeds the nonzero budget
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    budget = _get_max_nnz() if max_nnz is None else max_nnz
    if 3**n > budget:
        raise MemoryBudgetError(
            f"D^(x){n} has {3 ** n} nonzeros, above the budget of {budget}"
        )
    base = sparse.csr_matrix(np.array([[1, 1], [1, 0]], dtype=np.int8))
    result = sparse.csr_matrix(np.ones((1, 1), dtype=np.int8))
    for _ in range(n):
        result = sparse.kron(result, base, format="csr")
    return result.astype(np.int8)


def kron_terms(
    outer: Sequence[Rank1Term], inner: Sequence[Rank1Term], inner_bits: int
) -> List[Rank1Term]:
    """
    Kronecker-compose two term lists, outer factor on the high bits.

    The result is ordered outer-major, matching the branch order of the
    recursive unfolding.
    """
    shift = 1 << inner_bits
    composed: List[Rank1Term] = []
    for a in outer:
        a_left = np.asarray(a.left_support, dtype=np.int64)
        a_right = np.asarray(a.right_support, dtype=np.int64)
        for b in inner:
            left = np.add.outer(a_left * shift, np.asarray(b.left_support)).ravel()
            right = np.add.outer(a_right * shift, np.asarray(b.right_support)).ravel()
            left_signs = None
            right_signs = None
            if a.left_signs is not None or b.left_signs is not None:
                left_signs = tuple(np.outer(a.left_values(), b.left_values()).ravel().tolist())
            if a.right_signs is not None or b.right_signs is not None:
                right_signs = tuple(
                    np.outer(a.right_values(), b.right_values()).ravel().tolist()
                )
            composed.append(
                Rank1Term(
                    left_support=tuple(left.tolist()),
                    right_support=tuple(right.tolist()),
                    left_signs=left_signs,
                    right_signs=right_signs,
                )
            )
    return composed


def _check_supports(terms: Iterable[Rank1Term], n: int) -> None:
    limit = 1 << n
    for index, term in enumerate(terms):
        if term.left_support[0] < 0 or term.left_support[-1] >= limit:
            raise ValueError(f"Term {index} has a left index outside [0, 2^{n})")
        if term.right_support[0] < 0 or term.right_support[-1] >= limit:
            raise ValueError(f"Term {index} has a right index outside [0, 2^{n})")


def circuit_matrix(terms: Sequence[Rank1Term], n: int) -> sparse.csr_matrix:
    """Signed sum of the outer products, duplicates accumulated."""
    _check_supports(terms, n)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    data: List[np.ndarray] = []
    for term in terms:
        left = np.asarray(term.left_support, dtype=np.int64)
        right = np.asarray(term.right_support, dtype=np.int64)
        rows.append(np.repeat(left, len(right)))
        cols.append(np.tile(right, len(left)))
        data.append(np.outer(term.left_values(), term.right_values()).ravel())
    size = 1 << n
    if not rows:
        return sparse.csr_matrix((size, size), dtype=np.int64)
    matrix = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
        dtype=np.int64,
    )
    return matrix.tocsr()


def circuit_matrix_check(terms: Sequence[Rank1Term], n: int) -> bool:
    """True iff the terms sum to D^{(x)n} exactly."""
    difference = circuit_matrix(terms, n) - kron_power(n).astype(np.int64)
    difference.eliminate_zeros()
    return bool(difference.nnz == 0)


def first_offending_term(terms: Sequence[Rank1Term]) -> Optional[int]:
    """Index of the first term touching an intersecting (x, y) pair, if any."""
    for index, term in enumerate(terms):
        left = np.asarray(term.left_support, dtype=np.int64)
        right = np.asarray(term.right_support, dtype=np.int64)
        if np.any(np.bitwise_and.outer(left, right)):
            return index
    return None


def degree_profile_from_counts(
    left_counts: np.ndarray, right_counts: np.ndarray, n: int
) -> DegreeProfile:
    """Aggregate per-node degrees (arrays of length 2^n) into weight sums."""
    left_sums, zero_left = _weight_sums(np.asarray(left_counts), n)
    right_sums, zero_right = _weight_sums(np.asarray(right_counts), n)
    if zero_left or zero_right:
        logger.info(
            "Degree profile at n=%d has %d left and %d right nodes of degree 0",
            n,
            zero_left,
            zero_right,
        )
    return DegreeProfile(
        n=n,
        left_weight_sums=left_sums,
        right_weight_sums=right_sums,
        zero_left=zero_left,
        zero_right=zero_right,
    )


def _weight_sums(counts: np.ndarray, n: int) -> Tuple[Tuple[float, ...], int]:
    if counts.shape != (1 << n,):
        raise ValueError(f"Expected {1 << n} degree counts, got {counts.shape}")
    weights = popcount(np.arange(1 << n, dtype=np.int64))
    positive = counts > 0
    logs = np.zeros(counts.shape, dtype=np.float64)
    logs[positive] = np.log2(counts[positive].astype(np.float64))
    sums = np.bincount(weights, weights=logs, minlength=n + 1)
    return tuple(float(s) for s in sums), int(np.count_nonzero(~positive))


def degree_counts(terms: Sequence[Rank1Term], n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node wire counts L(i), R(j) of a list of terms."""
    _check_supports(terms, n)
    left = np.zeros(1 << n, dtype=np.int64)
    right = np.zeros(1 << n, dtype=np.int64)
    for term in terms:
        left[np.asarray(term.left_support, dtype=np.int64)] += 1
        right[np.asarray(term.right_support, dtype=np.int64)] += 1
    return left, right


def circuit_degrees(terms: Sequence[Rank1Term], n: int) -> DegreeProfile:
    left, right = degree_counts(terms, n)
    return degree_profile_from_counts(left, right, n)


def compose_profiles(a: DegreeProfile, b: DegreeProfile) -> DegreeProfile:
    """
    Profile of the tensor product of two circuits, `a` on the high bits.

    Degrees multiply, so log-degree sums add across factors weighted by the
    number of nodes in the other factor's weight class.
    """
    if a.zero_left or a.zero_right or b.zero_left or b.zero_right:
        raise ValueError("Profiles with zero-degree nodes do not compose")
    counts_a = comb(a.n, np.arange(a.n + 1))
    counts_b = comb(b.n, np.arange(b.n + 1))

    def combine(sa: Sequence[float], sb: Sequence[float]) -> Tuple[float, ...]:
        total = np.convolve(np.asarray(sa), counts_b) + np.convolve(counts_a, np.asarray(sb))
        return tuple(float(x) for x in total)

    return DegreeProfile(
        n=a.n + b.n,
        left_weight_sums=combine(a.left_weight_sums, b.left_weight_sums),
        right_weight_sums=combine(a.right_weight_sums, b.right_weight_sums),
    )


def _horner(weight_sums: Sequence[float], p: np.ndarray) -> np.ndarray:
    # sum_w S_w p^w (1-p)^(n-w), descending w
    n = len(weight_sums) - 1
    q = 1.0 - p
    acc = np.full(p.shape, float(weight_sums[n]))
    q_power = np.ones(p.shape)
    for w in range(n - 1, -1, -1):
        q_power = q_power * q
        acc = acc * p + weight_sums[w] * q_power
    return acc


def degree_poly_eval(
    profile: DegreeProfile, p: ArrayLike, side: str = "left"
) -> Union[float, np.ndarray]:
    """
    Evaluate f(p) (side="left") or g(q) (side="right").

    Accepts a scalar or an array of probabilities in [0, 1].
    """
    values = np.asarray(p, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValueError("Degree polynomials are evaluated on [0, 1]")
    result = _horner(profile.sums(side), values) / profile.n
    if result.ndim == 0:
        return float(result)
    return result


def bernstein_coefficients(profile: DegreeProfile, side: str = "left") -> np.ndarray:
    """Coefficients of f (or g) in the degree-n Bernstein basis."""
    n = profile.n
    sums = np.asarray(profile.sums(side), dtype=np.float64)
    return sums / (n * comb(n, np.arange(n + 1)))


def derivative_bound(profile: DegreeProfile, side: str = "left") -> float:
    """Upper bound on |f'| over [0, 1] from Bernstein coefficient differences."""
    coefficients = bernstein_coefficients(profile, side)
    if len(coefficients) < 2:
        return 0.0
    return float(profile.n * np.max(np.abs(np.diff(coefficients))))


def wnnz(support: Iterable[int], gamma0: float, gamma1: float, K: int) -> float:
    """
    Weighted nonzero count: sum over the support of gamma0^(K-|i|) gamma1^|i|.

    Raises:
        ValueError: When the support is empty or a weight is not positive
    """
    if gamma0 <= 0 or gamma1 <= 0:
        raise ValueError("wnnz weights must be positive")
    indices = np.fromiter(support, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("wnnz of an empty support is undefined")
    weights = popcount(indices)
    return float(np.sum(gamma0 ** (K - weights) * gamma1**weights))


def binary_entropy(p: ArrayLike) -> Union[float, np.ndarray]:
    """h(p) in bits with h(0) = h(1) = 0."""
    values = np.asarray(p, dtype=np.float64)
    result = (entr(values) + entr(1.0 - values)) / np.log(2.0)
    if result.ndim == 0:
        return float(result)
    return result


def write_triplets(matrix: sparse.spmatrix, path: Union[str, Path]) -> None:
    """Write 'rows cols nnz' then one 'row col value' line per nonzero."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}"]
    for k in order:
        lines.append(f"{int(coo.row[k])} {int(coo.col[k])} {int(coo.data[k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_triplets(path: Union[str, Path]) -> sparse.csr_matrix:
    """Read a matrix written by write_triplets."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"Empty triplet file: {path}")
    rows, cols, nnz = (int(x) for x in lines[0].split())
    body = [line.split() for line in lines[1:] if line.strip()]
    if len(body) != nnz:
        raise ValueError(f"{path}: header announces {nnz} entries, found {len(body)}")
    if nnz == 0:
        return sparse.csr_matrix((rows, cols), dtype=np.int64)
    triples = np.array(body, dtype=np.int64)
    return sparse.coo_matrix(
        (triples[:, 2], (triples[:, 0], triples[:, 1])), shape=(rows, cols)
    ).tocsr()
