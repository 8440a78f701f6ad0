"""
Cost landscape of strategies over circuit models and its verifiers.

A circuit model supplies a left exponent f(p) and a right exponent g(q):
either exact degree polynomials of a small decomposition, or certified
envelopes on [0.2, 0.5]. A strategy mixes two models; the landscape takes
the best strategy at every (p, q). The rectangle verifier certifies an upper
bound on the landscape from grid samples plus a Lipschitz margin, and the
size aggregator turns a size envelope into the size exponent.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from numpy.polynomial import Polynomial
from scipy.special import comb

from .errors import (
    CoverageError,
    DomainViolation,
    GapViolation,
    LipschitzViolation,
)
from .gabound import (
    DEFAULT_GAP_THRESHOLD,
    DEFAULT_LIPSCHITZ,
    Envelope,
    check_ramp_lipschitz,
    envelope_eval,
    read_envelope,
)
from .kron_core import (
    DegreeProfile,
    Pattern,
    bernstein_coefficients,
    binary_entropy,
    circuit_degrees,
    degree_poly_eval,
    degree_profile_from_counts,
    derivative_bound,
    expand_block,
)

logger = logging.getLogger(__name__)

ENVELOPE_DOMAIN = (0.2, 0.5)
DEFAULT_TARGET = 0.319895
PUBLISHED_BASE_COUNT = 49
GRID_POINTS = 101
DEPTH_CAP = 60
PAIR_CHUNK = 64

ModelKind = Literal["exact", "envelope"]


@dataclass(frozen=True)
class CircuitModel:
    """
    One member of the degree family.

    Exact models carry a degree profile and are defined on [0, 1]; envelope
    models carry a left and a right envelope and are defined on `domain`.
    """

    name: str
    kind: ModelKind
    profile: Optional[DegreeProfile] = None
    left_envelope: Optional[Envelope] = None
    right_envelope: Optional[Envelope] = None
    domain: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind == "exact" and self.profile is None:
            raise ValueError(f"Exact model {self.name} needs a degree profile")
        if self.kind == "envelope":
            if self.left_envelope is None or self.right_envelope is None:
                raise ValueError(f"Envelope model {self.name} needs two envelopes")
            lo, hi = self.domain
            for env in (self.left_envelope, self.right_envelope):
                if env.lattice[0] > lo + 1e-12 or env.lattice[-1] < hi - 1e-12:
                    raise CoverageError(
                        f"Envelope {env.family} does not cover the domain [{lo}, {hi}] of {self.name}"
                    )

    @classmethod
    def from_profiles(cls, name: str, profile: DegreeProfile) -> "CircuitModel":
        return cls(name=name, kind="exact", profile=profile)

    def in_domain(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.domain
        return (values >= lo) & (values <= hi)

    def _side(self, values: Union[float, np.ndarray], side: str) -> np.ndarray:
        points = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if self.kind == "exact":
            assert self.profile is not None
            return np.asarray(degree_poly_eval(self.profile, points, side))
        env = self.left_envelope if side == "left" else self.right_envelope
        assert env is not None
        if not np.all(self.in_domain(points)):
            raise DomainViolation(f"{self.name} is only defined on {self.domain}")
        return np.asarray(envelope_eval(env, points))

    def f(self, p: Union[float, np.ndarray]) -> np.ndarray:
        return self._side(p, "left")

    def g(self, q: Union[float, np.ndarray]) -> np.ndarray:
        return self._side(q, "right")

    def masked(self, values: np.ndarray, side: str) -> Tuple[np.ndarray, np.ndarray]:
        """Values on the domain and zero elsewhere, plus the domain mask."""
        mask = self.in_domain(values)
        result = np.zeros(values.shape)
        if np.any(mask):
            result[mask] = self._side(values[mask], side)
        return result, mask

    def transposed(self, name: Optional[str] = None) -> "CircuitModel":
        if self.kind == "exact":
            assert self.profile is not None
            return CircuitModel(
                name=name or self.name, kind="exact", profile=self.profile.transposed()
            )
        return CircuitModel(
            name=name or self.name,
            kind="envelope",
            left_envelope=self.right_envelope,
            right_envelope=self.left_envelope,
            domain=self.domain,
        )


def sergeev_model(chars: str) -> CircuitModel:
    """Exact model of one Sergeev building block, e.g. "RR" or "CC"."""
    block = expand_block(Pattern(chars))
    return CircuitModel.from_profiles(
        f"sergeev-{chars}", circuit_degrees(list(block.terms), block.K)
    )


def envelope_model(
    name: str,
    left: Envelope,
    right: Envelope,
    domain: Tuple[float, float] = ENVELOPE_DOMAIN,
) -> CircuitModel:
    return CircuitModel(
        name=name, kind="envelope", left_envelope=left, right_envelope=right, domain=domain
    )


@dataclass(frozen=True)
class Strategy:
    """An unordered pair of distinct models, stored in name order."""

    first: CircuitModel
    second: CircuitModel

    def __post_init__(self) -> None:
        if self.first.name == self.second.name:
            raise ValueError(f"A strategy needs two distinct models, got {self.first.name} twice")
        if self.second.name < self.first.name:
            first, second = self.second, self.first
            object.__setattr__(self, "first", first)
            object.__setattr__(self, "second", second)

    @property
    def name(self) -> str:
        return f"{self.first.name}+{self.second.name}"


def strategy_family(models: Sequence[CircuitModel]) -> List[Strategy]:
    """Every unordered pair of models, in canonical name order."""
    ordered = sorted(models, key=lambda m: m.name)
    names = [m.name for m in ordered]
    if len(set(names)) != len(names):
        raise ValueError("Model names must be unique")
    return [Strategy(a, b) for a, b in itertools.combinations(ordered, 2)]


def _mix_cost(
    a1: np.ndarray, a2: np.ndarray, b1: np.ndarray, b2: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    min over lambda in [0, 1] of max(lambda a1 + (1-lambda) a2,
    lambda b1 + (1-lambda) b2), floored at 0; returns (cost, argmin lambda).

    The expression is symmetric under swapping (a1, a2) with (b1, b2).
    """
    da = a1 - a2
    db = b1 - b2
    at_zero = np.maximum(a2, b2)
    at_one = np.maximum(a1, b1)
    denom = da - db
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(denom != 0, (b2 - a2) / np.where(denom != 0, denom, 1.0), -1.0)
    inside = (lam > 0.0) & (lam < 1.0)
    safe = np.where(inside, lam, 0.0)
    crossing = np.where(inside, np.maximum(a2 + safe * da, b2 + safe * db), np.inf)

    cost = at_zero
    best = np.zeros(np.shape(cost))
    better = at_one < cost
    cost = np.where(better, at_one, cost)
    best = np.where(better, 1.0, best)
    better = crossing < cost
    cost = np.where(better, crossing, cost)
    best = np.where(better, safe, best)
    return np.maximum(cost, 0.0), best


def strategy_cost(strategy: Strategy, p: float, q: float) -> Tuple[float, float]:
    """
    delta and the mixing fraction lambda of one strategy at (p, q).

    Raises:
        DomainViolation: When (p, q) lies outside a member's domain
    """
    a1 = strategy.first.f(p)
    a2 = strategy.second.f(p)
    b1 = strategy.first.g(q)
    b2 = strategy.second.g(q)
    cost, lam = _mix_cost(a1, a2, b1, b2)
    return float(cost[0]), float(lam[0])


def _admissible(strategy: Strategy, p: float, q: float) -> bool:
    point = np.array([p, q])
    return bool(
        np.all(strategy.first.in_domain(point)) and np.all(strategy.second.in_domain(point))
    )


def landscape_cost(
    family: Sequence[Strategy], p: float, q: float
) -> Tuple[float, Strategy]:
    """
    Best strategy at (p, q); ties go to the first strategy in name order.

    Raises:
        DomainViolation: When no strategy is admissible at (p, q)
    """
    best: Optional[Tuple[float, Strategy]] = None
    for strategy in sorted(family, key=lambda s: s.name):
        if not _admissible(strategy, p, q):
            continue
        delta, _ = strategy_cost(strategy, p, q)
        if best is None or delta < best[0]:
            best = (delta, strategy)
    if best is None:
        raise DomainViolation(f"No admissible strategy at ({p}, {q})")
    return best


def _family_models(family: Sequence[Strategy]) -> List[CircuitModel]:
    seen: Dict[str, CircuitModel] = {}
    for strategy in family:
        seen.setdefault(strategy.first.name, strategy.first)
        seen.setdefault(strategy.second.name, strategy.second)
    return [seen[name] for name in sorted(seen)]


def landscape_grid(
    family: Sequence[Strategy], ps: np.ndarray, qs: np.ndarray
) -> np.ndarray:
    """
    delta at every (ps[i], qs[j]); +inf where no strategy is admissible.
    """
    models = _family_models(family)
    index = {m.name: k for k, m in enumerate(models)}
    f_values = []
    g_values = []
    p_masks = []
    q_masks = []
    for model in models:
        fv, pm = model.masked(ps, "left")
        gv, qm = model.masked(qs, "right")
        f_values.append(fv)
        g_values.append(gv)
        p_masks.append(pm)
        q_masks.append(qm)
    F = np.asarray(f_values)
    G = np.asarray(g_values)
    PM = np.asarray(p_masks)
    QM = np.asarray(q_masks)

    first = np.array([index[s.first.name] for s in family], dtype=np.int64)
    second = np.array([index[s.second.name] for s in family], dtype=np.int64)
    result = np.full((ps.size, qs.size), np.inf)
    for start in range(0, first.size, PAIR_CHUNK):
        i = first[start : start + PAIR_CHUNK]
        j = second[start : start + PAIR_CHUNK]
        cost, _ = _mix_cost(
            F[i][:, :, None], F[j][:, :, None], G[i][:, None, :], G[j][:, None, :]
        )
        valid = (PM[i] & PM[j])[:, :, None] & (QM[i] & QM[j])[:, None, :]
        cost = np.where(valid, cost, np.inf)
        result = np.minimum(result, cost.min(axis=0))
    return result


def _bernstein_to_power(coefficients: np.ndarray) -> Polynomial:
    n = len(coefficients) - 1
    p = Polynomial([0.0, 1.0])
    q = Polynomial([1.0, -1.0])
    total = Polynomial([0.0])
    for k, b in enumerate(coefficients):
        total = total + float(comb(n, k)) * float(b) * p**k * q ** (n - k)
    return total


def _extrema_on_unit(poly: Polynomial) -> Tuple[float, float]:
    """Exact min and max of a polynomial on [0, 1]."""
    points = [0.0, 1.0]
    trimmed = poly.trim()
    roots = trimmed.deriv().roots() if trimmed.degree() > 1 else np.array([])
    for root in roots:
        if abs(root.imag) < 1e-12 and 0.0 < root.real < 1.0:
            points.append(float(root.real))
    values = poly(np.asarray(points))
    return float(values.min()), float(values.max())


def _dominates(b: CircuitModel, a: CircuitModel, tolerance: float = 1e-12) -> bool:
    """True when b is pointwise no worse than a on both sides."""
    assert a.profile is not None and b.profile is not None
    strict = False
    for side in ("left", "right"):
        diff = bernstein_coefficients(a.profile, side) - bernstein_coefficients(b.profile, side)
        if diff[0] < -tolerance or diff[-1] < -tolerance:
            return False
        low, high = _extrema_on_unit(_bernstein_to_power(diff))
        if low < -tolerance:
            return False
        if high > tolerance:
            strict = True
    return strict


def _profiles_equal(a: CircuitModel, b: CircuitModel, tolerance: float = 1e-12) -> bool:
    assert a.profile is not None and b.profile is not None
    return bool(
        np.allclose(a.profile.left_weight_sums, b.profile.left_weight_sums, atol=tolerance)
        and np.allclose(a.profile.right_weight_sums, b.profile.right_weight_sums, atol=tolerance)
    )


def pareto_filter(models: Sequence[CircuitModel]) -> List[CircuitModel]:
    """
    Drop every exact model strictly dominated by another; among equal
    models keep the one first in name order.
    """
    if any(m.kind != "exact" for m in models):
        raise ValueError("pareto_filter accepts exact models only")
    ordered = sorted(models, key=lambda m: m.name)
    survivors: List[CircuitModel] = []
    for k, model in enumerate(ordered):
        duplicate = any(_profiles_equal(model, other) for other in ordered[:k])
        dominated = any(_dominates(other, model) for other in ordered if other is not model)
        if not duplicate and not dominated:
            survivors.append(model)
    return survivors


def _sign_classes(length: int) -> np.ndarray:
    """Nonzero {0, +-1} vectors whose first nonzero entry is +1."""
    vectors = []
    for entries in itertools.product((0, 1, -1), repeat=length):
        nonzero = [e for e in entries if e]
        if nonzero and nonzero[0] == 1:
            vectors.append(entries)
    return np.asarray(vectors, dtype=np.int64)


def _degree_name(left: np.ndarray, right: np.ndarray) -> str:
    return "base-" + "".join(str(int(x)) for x in left) + "-" + "".join(str(int(x)) for x in right)


def enumerate_base_decompositions(bits: int = 2) -> List[CircuitModel]:
    """
    All 4-term factorizations D^{(x)2} = P Q over {0, +-1} with P invertible,
    deduplicated by degree profile and Pareto filtered.
    """
    size = 1 << bits
    target = np.array(
        [[1 if (x & y) == 0 else 0 for y in range(size)] for x in range(size)], dtype=np.float64
    )
    columns = _sign_classes(size)
    combos = np.asarray(list(itertools.combinations(range(len(columns)), size)), dtype=np.int64)
    P = np.transpose(columns[combos], (0, 2, 1)).astype(np.float64)

    det = np.linalg.det(P)
    P = P[np.abs(det) > 0.5]
    Q = np.linalg.solve(P, np.broadcast_to(target, P.shape))
    rounded = np.round(Q)
    integral = np.all(np.abs(Q - rounded) < 1e-9, axis=(1, 2)) & np.all(
        np.abs(rounded) <= 1, axis=(1, 2)
    )
    P = P[integral]
    Q = rounded[integral]
    logger.debug("%d sign-matrix factorizations of D^(x)%d", P.shape[0], bits)

    by_profile: Dict[Tuple[Tuple[float, ...], Tuple[float, ...]], CircuitModel] = {}
    for left_factor, right_factor in zip(P, Q):
        left = np.count_nonzero(left_factor, axis=1)
        right = np.count_nonzero(right_factor, axis=0)
        profile = degree_profile_from_counts(left, right, bits)
        key = (profile.left_weight_sums, profile.right_weight_sums)
        name = _degree_name(left, right)
        if key not in by_profile or name < by_profile[key].name:
            by_profile[key] = CircuitModel.from_profiles(name, profile)

    survivors = pareto_filter(list(by_profile.values()))
    log = logger.info if len(survivors) == PUBLISHED_BASE_COUNT else logger.warning
    log(
        "%d base decompositions survive (%d distinct profiles); published count is %d",
        len(survivors),
        len(by_profile),
        PUBLISHED_BASE_COUNT,
    )
    return survivors


def model_lipschitz_check(model: CircuitModel, bound: float = DEFAULT_LIPSCHITZ) -> bool:
    """
    Exact models: Bernstein derivative bound and a 1e-3 grid of |f'|, |g'|.
    Envelope models: ramp mode with the segment condition on both sides.
    """
    if model.kind == "exact":
        assert model.profile is not None
        grid = np.linspace(0.0, 1.0, 1001)
        for side in ("left", "right"):
            coefficients = bernstein_coefficients(model.profile, side)
            exact = derivative_bound(model.profile, side)
            sampled = float(np.max(np.abs(_bernstein_to_power(coefficients).deriv()(grid))))
            if exact > bound or sampled > bound:
                return False
        return True
    for env in (model.left_envelope, model.right_envelope):
        assert env is not None
        if env.mode != "ramp":
            return False
        try:
            check_ramp_lipschitz(env.lattice, env.thetas, bound)
        except LipschitzViolation:
            return False
    return True


@dataclass(frozen=True)
class Rectangle:
    p0: float
    p1: float
    q0: float
    q1: float
    depth: int = 0

    def split(self) -> Tuple["Rectangle", "Rectangle"]:
        """Halve along p at even depth and along q at odd depth."""
        if self.depth % 2 == 0:
            mid = (self.p0 + self.p1) / 2.0
            return (
                Rectangle(self.p0, mid, self.q0, self.q1, self.depth + 1),
                Rectangle(mid, self.p1, self.q0, self.q1, self.depth + 1),
            )
        mid = (self.q0 + self.q1) / 2.0
        return (
            Rectangle(self.p0, self.p1, self.q0, mid, self.depth + 1),
            Rectangle(self.p0, self.p1, mid, self.q1, self.depth + 1),
        )

    def describe(self) -> str:
        return f"[{self.p0:.10f}, {self.p1:.10f}] x [{self.q0:.10f}, {self.q1:.10f}]"


@dataclass
class VerifierReport:
    target: float
    gap_threshold: float
    accepted: List[Tuple[Rectangle, float]] = field(default_factory=list)
    max_depth: int = 0
    evaluations: int = 0
    failed_at: Optional[Rectangle] = None

    @property
    def certified(self) -> bool:
        return self.failed_at is None and bool(self.accepted)

    @property
    def bound(self) -> float:
        return self.target + self.gap_threshold

    def log_lines(self) -> List[str]:
        lines = [
            f"{r.p0:.10f} {r.p1:.10f} {r.q0:.10f} {r.q1:.10f} {r.depth} {margin:.10f}"
            for r, margin in self.accepted
        ]
        if self.certified:
            lines.append(f"CERTIFIED delta <= {self.bound:.10g}")
        else:
            assert self.failed_at is not None
            lines.append(f"FAILED at {self.failed_at.describe()}")
        return lines


def _check_rectangle(
    family: Sequence[Strategy],
    rect: Rectangle,
    target: float,
    lipschitz: float,
    grid: int,
) -> Tuple[bool, float]:
    ps = np.linspace(rect.p0, rect.p1, grid)
    qs = np.linspace(rect.q0, rect.q1, grid)
    deltas = landscape_grid(family, ps, qs)
    margin = ((rect.p1 - rect.p0) / (2 * (grid - 1)) + (rect.q1 - rect.q0) / (2 * (grid - 1))) * lipschitz
    worst = target - (float(deltas.max()) + margin)
    return worst >= 0.0, worst


def verify_degree_bound(
    family: Sequence[Strategy],
    target: float = DEFAULT_TARGET,
    root: Rectangle = Rectangle(0.0, 1.0, 0.0, 1.0),
    lipschitz: float = DEFAULT_LIPSCHITZ,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    grid: int = GRID_POINTS,
    depth_cap: int = DEPTH_CAP,
    workers: int = 1,
) -> VerifierReport:
    """
    Certify delta <= target on `root` by grid sampling and bisection.

    Rectangles are processed breadth first; each level is checked in a
    thread pool and accepted rectangles are reported in sorted order.

    Raises:
        LipschitzViolation: When a model is not `lipschitz`-Lipschitz
    """
    for model in _family_models(family):
        if not model_lipschitz_check(model, lipschitz):
            raise LipschitzViolation(f"Model {model.name} is not {lipschitz}-Lipschitz")

    report = VerifierReport(target=target, gap_threshold=gap_threshold)
    level = [root]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while level:
            outcomes = list(
                pool.map(lambda r: _check_rectangle(family, r, target, lipschitz, grid), level)
            )
            report.evaluations += grid * grid * len(level)
            next_level: List[Rectangle] = []
            for rect, (ok, worst) in zip(level, outcomes):
                report.max_depth = max(report.max_depth, rect.depth)
                if ok:
                    report.accepted.append((rect, worst))
                elif rect.depth >= depth_cap:
                    report.failed_at = rect
                    logger.warning("Depth cap reached at %s", rect.describe())
                    break
                else:
                    next_level.extend(rect.split())
            if report.failed_at is not None:
                break
            level = next_level
            if level:
                logger.debug("Verifier depth %d: %d open rectangles", level[0].depth, len(level))

    report.accepted.sort(key=lambda item: (item[0].p0, item[0].q0, item[0].p1, item[0].q1))
    logger.info(
        "Verifier %s: %d rectangles, depth %d, %d evaluations",
        "certified" if report.certified else "failed",
        len(report.accepted),
        report.max_depth,
        report.evaluations,
    )
    return report


@dataclass
class ReplayReport:
    samples: int
    worst: float
    violations: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def replay_soundness(
    report: VerifierReport,
    family: Sequence[Strategy],
    samples: int = 1000,
    seed: int = 0,
    relative_slack: float = 1e-12,
) -> ReplayReport:
    """Recheck delta at random interior points of the accepted rectangles."""
    if not report.accepted:
        raise ValueError("Nothing to replay: the report has no accepted rectangles")
    rng = np.random.default_rng(seed)
    rects = [r for r, _ in report.accepted]
    picks = rng.integers(0, len(rects), size=samples)
    limit = report.target * (1.0 + relative_slack) + relative_slack
    replay = ReplayReport(samples=samples, worst=-math.inf)
    for k in picks:
        rect = rects[int(k)]
        p = float(rng.uniform(rect.p0, rect.p1))
        q = float(rng.uniform(rect.q0, rect.q1))
        delta, _ = landscape_cost(family, p, q)
        replay.worst = max(replay.worst, delta)
        if delta > limit:
            replay.violations.append((p, q, delta))
    return replay


def segment_size_bound(p0: float, p1: float, theta: float) -> float:
    """theta plus the largest binary entropy on [p0, p1]."""
    if p1 <= 0.5:
        return theta + float(binary_entropy(p1))
    if p0 >= 0.5:
        return theta + float(binary_entropy(p0))
    return theta + 1.0


def _segment_thetas(envelope: Envelope) -> List[float]:
    # a ramp segment also takes its left neighbour's value
    if envelope.mode == "step":
        return list(envelope.thetas)
    return [
        max(theta, envelope.thetas[o - 1]) if o else theta
        for o, theta in enumerate(envelope.thetas)
    ]


def size_log_lines(envelope: Envelope) -> List[str]:
    """One 'p theta gap -> bound' line per segment."""
    lines = []
    for o, theta in enumerate(_segment_thetas(envelope)):
        p0, p1 = envelope.lattice[o], envelope.lattice[o + 1]
        bound = segment_size_bound(p0, p1, theta)
        lines.append(f"{p0:.6f} {envelope.thetas[o]:.14f} {envelope.gaps[o]:.10f} -> {bound:.14f}")
    return lines


def certify_size_bound(
    envelope: Envelope,
    gap_threshold: float = DEFAULT_GAP_THRESHOLD,
    domain: Tuple[float, float] = (0.0, 1.0),
) -> float:
    """
    The size exponent bound: max over segments of theta + h, plus the gap margin.

    Raises:
        CoverageError: When the lattice does not cover the domain
        GapViolation: When a recorded gap exceeds gap_threshold
    """
    if envelope.lattice[0] > domain[0] or envelope.lattice[-1] < domain[1]:
        raise CoverageError(
            f"Envelope covers [{envelope.lattice[0]}, {envelope.lattice[-1]}], "
            f"needs [{domain[0]}, {domain[1]}]"
        )
    for o, gap in enumerate(envelope.gaps):
        if gap > gap_threshold:
            raise GapViolation(
                f"Segment at p={envelope.lattice[o]:.6f} has gap {gap:.10f} > {gap_threshold}"
            )
    bounds = [
        segment_size_bound(envelope.lattice[o], envelope.lattice[o + 1], theta)
        for o, theta in enumerate(_segment_thetas(envelope))
    ]
    worst = int(np.argmax(bounds))
    logger.info(
        "Size bound attained on [%.6f, %.6f]: %.14f",
        envelope.lattice[worst],
        envelope.lattice[worst + 1],
        bounds[worst],
    )
    return max(bounds) + gap_threshold


def _envelope_file(directory: Path, family: str) -> Path:
    return directory / f"{family.lower()}.env"


def load_degree_envelopes(envelope_dir: Union[str, Path]) -> List[CircuitModel]:
    """
    The three envelope models: Sonetto with itself, Regulus with RegulusT
    and RegulusT with Regulus.

    Raises:
        FileNotFoundError: When an envelope file is missing
    """
    directory = Path(envelope_dir)
    envelopes = {}
    for family in ("Sonetto", "Regulus", "RegulusT"):
        path = _envelope_file(directory, family)
        if not path.exists():
            raise FileNotFoundError(f"Missing envelope file {path}")
        envelopes[family] = read_envelope(path)
    return [
        envelope_model("Sonetto", envelopes["Sonetto"], envelopes["Sonetto"]),
        envelope_model("Regulus", envelopes["Regulus"], envelopes["RegulusT"]),
        envelope_model("RegulusT", envelopes["RegulusT"], envelopes["Regulus"]),
    ]


def default_degree_family(envelope_dir: Union[str, Path]) -> List[CircuitModel]:
    """Enumerated base decompositions plus the three envelope models."""
    return enumerate_base_decompositions() + load_degree_envelopes(envelope_dir)


def dump_models(models: Iterable[CircuitModel], envelope_names: Optional[Dict[str, Tuple[str, str]]] = None) -> str:
    """
    YAML list of models. Exact models store their weight sums; envelope
    models store the envelope file names given in envelope_names.
    """
    entries = []
    for model in models:
        if model.kind == "exact":
            assert model.profile is not None
            entries.append(
                {
                    "name": model.name,
                    "kind": "exact",
                    "n": model.profile.n,
                    "left": [float(x) for x in model.profile.left_weight_sums],
                    "right": [float(x) for x in model.profile.right_weight_sums],
                }
            )
        else:
            if envelope_names is None or model.name not in envelope_names:
                raise ValueError(f"No envelope file names for model {model.name}")
            left, right = envelope_names[model.name]
            entries.append(
                {
                    "name": model.name,
                    "kind": "envelope",
                    "left": left,
                    "right": right,
                    "domain": list(model.domain),
                }
            )
    return yaml.safe_dump(entries, sort_keys=False, default_flow_style=None)


def load_models(path: Union[str, Path], envelope_dir: Optional[Union[str, Path]] = None) -> List[CircuitModel]:
    """
    Read a model file; envelope file names resolve against envelope_dir,
    or the model file's directory when omitted.
    """
    source = Path(path)
    base = Path(envelope_dir) if envelope_dir is not None else source.parent
    data = yaml.safe_load(source.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{source}: expected a list of models")
    models = []
    for entry in data:
        kind = entry.get("kind")
        if kind == "exact":
            n = int(entry["n"])
            profile = DegreeProfile(
                n=n,
                left_weight_sums=tuple(float(x) for x in entry["left"]),
                right_weight_sums=tuple(float(x) for x in entry["right"]),
            )
            models.append(CircuitModel.from_profiles(str(entry["name"]), profile))
        elif kind == "envelope":
            domain = tuple(float(x) for x in entry.get("domain", ENVELOPE_DOMAIN))
            models.append(
                envelope_model(
                    str(entry["name"]),
                    read_envelope(base / entry["left"]),
                    read_envelope(base / entry["right"]),
                    (domain[0], domain[1]),
                )
            )
        else:
            raise ValueError(f"{source}: unknown model kind {kind!r}")
    return models
