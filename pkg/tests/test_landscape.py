"""
Tests for strategies, the cost landscape, the rectangle verifier and the
size-bound aggregation.
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from tame_certify.errors import (
    CoverageError,
    DomainViolation,
    GapViolation,
    LipschitzViolation,
)
from tame_certify.gabound import build_envelope, write_envelope
from tame_certify.kron_core import DegreeProfile, binary_entropy
from tame_certify.landscape import (
    CircuitModel,
    Rectangle,
    Strategy,
    _check_rectangle,
    _dominates,
    _mix_cost,
    _profiles_equal,
    certify_size_bound,
    dump_models,
    enumerate_base_decompositions,
    envelope_model,
    landscape_cost,
    landscape_grid,
    load_degree_envelopes,
    load_models,
    model_lipschitz_check,
    pareto_filter,
    replay_soundness,
    segment_size_bound,
    sergeev_model,
    size_log_lines,
    strategy_cost,
    strategy_family,
    verify_degree_bound,
)


def flat_envelope(theta, mode="step"):
    return build_envelope((theta, theta), (0.2, 0.35, 0.5), mode)


class TestMixCost(unittest.TestCase):
    """Cost of mixing two circuits"""

    def cost(self, a1, a2, b1, b2):
        cost, lam = _mix_cost(*(np.array([x]) for x in (a1, a2, b1, b2)))
        return float(cost[0]), float(lam[0])

    def test_affine_crossing(self):
        delta, lam = self.cost(0.4, 0.2, 0.1, 0.5)
        self.assertAlmostEqual(delta, 0.3)
        self.assertAlmostEqual(lam, 0.5)

    def test_zero_floor(self):
        delta, lam = self.cost(0.0, 0.3, 0.0, 0.6)
        self.assertEqual(delta, 0.0)
        self.assertEqual(lam, 1.0)

    def test_lambda_independent(self):
        delta, _ = self.cost(0.25, 0.25, 0.4, 0.4)
        self.assertAlmostEqual(delta, 0.4)

    def test_matches_exact_lambda_minimum(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a1, a2, b1, b2 = rng.uniform(0.0, 1.0, size=4)
            delta, _ = self.cost(a1, a2, b1, b2)

            def worst(lam):
                return max(lam * a1 + (1 - lam) * a2, lam * b1 + (1 - lam) * b2)

            result = minimize_scalar(
                worst, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12}
            )
            exact = max(min(result.fun, worst(0.0), worst(1.0)), 0.0)
            self.assertLessEqual(delta, exact + 1e-12)
            self.assertLess(exact - delta, 1e-7)

    def test_matches_dense_lambda_scan(self):
        rng = np.random.default_rng(7)
        grid = np.linspace(0.0, 1.0, 10001)
        for _ in range(50):
            a1, a2, b1, b2 = rng.uniform(0.0, 1.0, size=4)
            delta, _ = self.cost(a1, a2, b1, b2)
            scan = np.max(
                [grid * a1 + (1 - grid) * a2, grid * b1 + (1 - grid) * b2], axis=0
            ).min()
            self.assertLessEqual(delta, scan + 1e-12)
            # slopes are below 1, so a grid step of 1e-4 misses the minimum by at most 1e-4
            self.assertLessEqual(scan, delta + 1e-4 + 1e-12)

    def test_member_order_does_not_matter(self):
        first = self.cost(0.4, 0.2, 0.1, 0.5)
        second = self.cost(0.2, 0.4, 0.5, 0.1)
        self.assertAlmostEqual(first[0], second[0], places=12)


class TestStrategies(unittest.TestCase):
    """Strategies over exact and envelope models"""

    @classmethod
    def setUpClass(cls):
        cls.rr = sergeev_model("RR")
        cls.cc = sergeev_model("CC")
        cls.env = envelope_model("Env", flat_envelope(0.1), flat_envelope(0.1))

    def test_sergeev_polynomials(self):
        self.assertAlmostEqual(float(self.rr.f(0.3)[0]), 0.0)
        self.assertAlmostEqual(float(self.rr.g(0.3)[0]), 0.7)
        self.assertAlmostEqual(float(self.cc.f(0.3)[0]), 0.7)

    def test_canonical_order(self):
        self.assertEqual(Strategy(self.rr, self.cc).name, Strategy(self.cc, self.rr).name)
        self.assertEqual(Strategy(self.rr, self.cc).name, "sergeev-CC+sergeev-RR")
        with self.assertRaises(ValueError):
            Strategy(self.rr, self.rr)

    def test_two_block_landscape(self):
        delta, lam = strategy_cost(Strategy(self.rr, self.cc), 0.2, 0.6)
        self.assertAlmostEqual(delta, 0.8 * 0.4 / 1.2)
        self.assertAlmostEqual(lam, 0.4 / 1.2)

    def test_single_pair_family(self):
        family = strategy_family([self.rr, self.cc])
        self.assertEqual(len(family), 1)
        for p, q in ((0.1, 0.9), (0.5, 0.5), (0.37, 0.21)):
            delta, best = landscape_cost(family, p, q)
            self.assertEqual(delta, strategy_cost(family[0], p, q)[0])
            self.assertIs(best, family[0])

    def test_envelope_models_only_inside_domain(self):
        family = strategy_family([self.rr, self.cc, self.env])
        _, best = landscape_cost(family, 0.1, 0.1)
        self.assertNotIn("Env", best.name)
        delta, best = landscape_cost(family, 0.3, 0.3)
        self.assertIn("Env", best.name)
        self.assertLessEqual(delta, 0.1 + 1e-12)

    def test_no_admissible_strategy(self):
        other = envelope_model("Other", flat_envelope(0.2), flat_envelope(0.2))
        family = strategy_family([self.env, other])
        with self.assertRaises(DomainViolation):
            landscape_cost(family, 0.1, 0.3)

    def test_grid_matches_pointwise(self):
        family = strategy_family([self.rr, self.cc, self.env])
        ps = np.linspace(0.0, 1.0, 11)
        qs = np.linspace(0.0, 1.0, 7)
        grid = landscape_grid(family, ps, qs)
        for i, p in enumerate(ps):
            for j, q in enumerate(qs):
                self.assertAlmostEqual(grid[i, j], landscape_cost(family, p, q)[0], places=12)

    def test_transposed_landscape(self):
        family = strategy_family([self.rr, self.cc])
        flipped = strategy_family([m.transposed() for m in (self.rr, self.cc)])
        for p, q in ((0.2, 0.7), (0.45, 0.3)):
            self.assertAlmostEqual(
                landscape_cost(family, p, q)[0], landscape_cost(flipped, q, p)[0], places=12
            )


class TestPareto(unittest.TestCase):
    """Pareto filtering of exact models"""

    def setUp(self):
        self.rr = sergeev_model("RR")
        self.cc = sergeev_model("CC")

    def test_duplicates_collapse(self):
        copy = CircuitModel.from_profiles("z-copy", self.rr.profile)
        survivors = pareto_filter([copy, self.rr, self.cc])
        self.assertEqual([m.name for m in survivors], ["sergeev-CC", "sergeev-RR"])

    def test_dominated_model_removed(self):
        worse = CircuitModel.from_profiles(
            "worse",
            DegreeProfile(
                n=2,
                left_weight_sums=self.cc.profile.left_weight_sums,
                right_weight_sums=self.rr.profile.right_weight_sums,
            ),
        )
        self.assertTrue(_dominates(self.rr, worse))
        self.assertFalse(_dominates(worse, self.rr))
        names = [m.name for m in pareto_filter([worse, self.rr, self.cc])]
        self.assertNotIn("worse", names)

    def test_empty_input(self):
        self.assertEqual(pareto_filter([]), [])

    def test_base_enumeration(self):
        models = enumerate_base_decompositions()
        self.assertTrue(models)
        names = [m.name for m in models]
        self.assertEqual(len(names), len(set(names)))
        self.assertTrue(all(m.kind == "exact" and m.profile.n == 2 for m in models))
        # some factorization has every left degree equal to one
        self.assertTrue(any(not any(m.profile.left_weight_sums) for m in models))
        for a in models:
            for b in models:
                if a is not b:
                    self.assertFalse(_dominates(b, a), f"{b.name} dominates {a.name}")

    def test_base_enumeration_is_transpose_closed(self):
        models = enumerate_base_decompositions()
        for model in models:
            flipped = model.transposed()
            self.assertTrue(
                any(_profiles_equal(flipped, other) for other in models),
                f"transpose of {model.name} is missing",
            )
        for chars in ("RR", "CC"):
            block = sergeev_model(chars)
            self.assertTrue(any(_profiles_equal(block, other) for other in models), chars)


class TestVerifier(unittest.TestCase):
    """Rectangle verifier"""

    @classmethod
    def setUpClass(cls):
        cls.family = strategy_family([sergeev_model("RR"), sergeev_model("CC")])

    def test_unit_square_margin(self):
        # delta peaks at 1/2 in the corner; the margin on the unit square is 0.1
        ok, worst = _check_rectangle(self.family, Rectangle(0.0, 1.0, 0.0, 1.0), 0.61, 10.0, 101)
        self.assertTrue(ok)
        self.assertAlmostEqual(worst, 0.01)

    def test_certified_at_root(self):
        report = verify_degree_bound(self.family, target=0.61)
        self.assertTrue(report.certified)
        self.assertEqual(report.max_depth, 0)
        self.assertEqual(report.log_lines()[-1], "CERTIFIED delta <= 0.610005")

    def test_bisection(self):
        report = verify_degree_bound(self.family, target=0.56, workers=2)
        self.assertTrue(report.certified)
        self.assertGreater(report.max_depth, 0)
        areas = sum((r.p1 - r.p0) * (r.q1 - r.q0) for r, _ in report.accepted)
        self.assertAlmostEqual(areas, 1.0)
        replay = replay_soundness(report, self.family, samples=1000, seed=4)
        self.assertTrue(replay.passed)
        self.assertLessEqual(replay.worst, 0.5 + 1e-12)

    def test_uncertifiable_target(self):
        report = verify_degree_bound(self.family, target=0.45, depth_cap=4)
        self.assertFalse(report.certified)
        self.assertIsNotNone(report.failed_at)
        self.assertTrue(report.log_lines()[-1].startswith("FAILED at ["))

    def test_steep_model_rejected(self):
        steep = CircuitModel.from_profiles(
            "steep", DegreeProfile(n=1, left_weight_sums=(0.0, 20.0), right_weight_sums=(0.0, 0.0))
        )
        family = strategy_family([steep, sergeev_model("RR")])
        self.assertFalse(model_lipschitz_check(steep))
        with self.assertRaises(LipschitzViolation):
            verify_degree_bound(family, target=0.9)

    def test_envelope_models_need_ramps(self):
        step = envelope_model("Step", flat_envelope(0.3), flat_envelope(0.3))
        ramp = envelope_model("Ramp", flat_envelope(0.3, "ramp"), flat_envelope(0.3, "ramp"))
        self.assertFalse(model_lipschitz_check(step))
        self.assertTrue(model_lipschitz_check(ramp))

    def test_split_alternates_axes(self):
        left, right = Rectangle(0.0, 1.0, 0.0, 1.0).split()
        self.assertEqual((left.p1, left.q1, left.depth), (0.5, 1.0, 1))
        lower, upper = left.split()
        self.assertEqual((lower.p1, lower.q1, lower.depth), (0.5, 0.5, 2))


class TestSizeBound(unittest.TestCase):
    """Size exponent aggregation"""

    def test_published_segment(self):
        self.assertAlmostEqual(
            segment_size_bound(0.371360, 0.371361, 0.29313274386304), 1.24484411922333, places=9
        )

    def test_segment_across_one_half(self):
        self.assertAlmostEqual(segment_size_bound(0.49, 0.51, 0.25), 1.25)

    def test_step_envelope(self):
        env = build_envelope((0.2, 0.3, 0.1), (0.0, 0.25, 0.5, 1.0), "step")
        self.assertAlmostEqual(certify_size_bound(env), 1.3 + 5e-6)
        self.assertAlmostEqual(
            segment_size_bound(0.0, 0.25, 0.2), 0.2 + binary_entropy(0.25)
        )

    def test_ramp_envelope_uses_left_neighbour(self):
        env = build_envelope((0.2, 0.21, 0.2), (0.0, 0.25, 0.5, 1.0), "ramp")
        self.assertAlmostEqual(certify_size_bound(env, gap_threshold=0.0), 1.21)

    def test_gap_above_threshold(self):
        env = build_envelope((0.2, 0.3), (0.0, 0.5, 1.0), "step", gaps=(1e-6, 1e-5))
        with self.assertRaises(GapViolation):
            certify_size_bound(env)

    def test_incomplete_coverage(self):
        env = build_envelope((0.2, 0.3), (0.1, 0.5, 1.0), "step")
        with self.assertRaises(CoverageError):
            certify_size_bound(env)

    def test_log_line_format(self):
        env = build_envelope((0.29313274386304,), (0.371360, 0.371361), "step", gaps=(8.805e-7,))
        (line,) = size_log_lines(env)
        head, bound = line.split(" -> ")
        self.assertEqual(head, "0.371360 0.29313274386304 0.0000008805")
        self.assertEqual(len(bound.split(".")[1]), 14)
        self.assertAlmostEqual(float(bound), 1.24484411922333, places=9)


class TestModelFiles(unittest.TestCase):
    """Model and envelope files"""

    def test_dump_and_load(self):
        rr = sergeev_model("RR")
        env = envelope_model("Env", flat_envelope(0.1, "ramp"), flat_envelope(0.2, "ramp"))
        with tempfile.TemporaryDirectory() as tmp:
            write_envelope(env.left_envelope, Path(tmp) / "left.env")
            write_envelope(env.right_envelope, Path(tmp) / "right.env")
            path = Path(tmp) / "models.yaml"
            path.write_text(dump_models([rr, env], {"Env": ("left.env", "right.env")}), encoding="utf-8")
            loaded = load_models(path)
        self.assertEqual([m.name for m in loaded], ["sergeev-RR", "Env"])
        self.assertEqual(loaded[0].profile, rr.profile)
        self.assertAlmostEqual(float(loaded[1].g(0.4)[0]), 0.2)

    def test_envelope_names_required(self):
        env = envelope_model("Env", flat_envelope(0.1), flat_envelope(0.1))
        with self.assertRaises(ValueError):
            dump_models([env])

    def test_missing_degree_envelopes(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FileNotFoundError):
                load_degree_envelopes(tmp)


if __name__ == "__main__":
    unittest.main()
