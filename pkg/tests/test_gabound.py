"""
Tests for the flow program, interval certification and envelopes.
"""

import logging
import math
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
from scipy import sparse
from scipy.stats import binom

from tame_certify.errors import (
    CertificationRefused,
    CoverageError,
    EnvelopeDomainError,
    LipschitzViolation,
    MarginalError,
)
from tame_certify.gabound import (
    DEFAULT_SLACK,
    CertificationSession,
    ExactMarginal,
    FlowSupport,
    IntervalMarginal,
    ProgramInstance,
    SegmentCertificate,
    SolveOutcome,
    binomial_entropy,
    binomial_pmf_bounds,
    build_envelope,
    build_instance,
    certify_theta,
    dual_bound,
    envelope_eval,
    envelope_from_certificates,
    exact_binomial_marginal,
    flow_objective,
    min_binomial_entropy,
    read_envelope,
    relaxation_dominance,
    solve_instance,
    write_envelope,
)
from tame_certify.lyapunov import build_transition_matrices
from tame_certify.rebalance import TameParams, preset
from tame_certify.solver_adapter import ConicAdapter, _get_solver_name

SLOW = os.environ.get("TAME_CERTIFY_SLOW") == "1"


def scalar_matrices(*values):
    return tuple(sparse.csr_matrix(np.array([[v]], dtype=np.int64)) for v in values)


def two_state_family():
    """K=1: the all-R block below, the all-C block above."""
    return TameParams(
        name="Pair",
        K=1,
        H=2,
        blocks=(0, 1),
        i_runs=((1, 1), (2, 1)),
        z_expr="2^(1/3)",
        alpha=0.5,
        beta=0.5,
    )


class TestBinomialMarginals(unittest.TestCase):
    """Interval bounds on binomial probabilities"""

    def test_monotone_endpoints(self):
        lo, hi = binomial_pmf_bounds(0, 7, (0.3, 0.4), slack=0.0)
        self.assertAlmostEqual(lo, 0.0279936)
        self.assertAlmostEqual(hi, 0.0823543)
        lo, hi = binomial_pmf_bounds(7, 7, (0.3, 0.4), slack=0.0)
        self.assertAlmostEqual(lo, 0.3**7)
        self.assertAlmostEqual(hi, 0.4**7)

    def test_interior_stationary_point(self):
        lo, hi = binomial_pmf_bounds(3, 7, (0.42, 0.44), slack=0.0)
        self.assertAlmostEqual(hi, binom.pmf(3, 7, 3 / 7))
        self.assertAlmostEqual(lo, min(binom.pmf(3, 7, 0.42), binom.pmf(3, 7, 0.44)))

    def test_slack_widens(self):
        lo, hi = binomial_pmf_bounds(0, 7, (0.3, 0.4), slack=1e-3)
        self.assertAlmostEqual(lo, 0.0279936 - 1e-3)
        self.assertAlmostEqual(hi, 0.0823543 + 1e-3)

    def test_min_entropy_examples(self):
        self.assertAlmostEqual(min_binomial_entropy(7, (0.3, 0.4)), binomial_entropy(7, 0.3))
        self.assertAlmostEqual(
            min_binomial_entropy(7, (0.45, 0.55)),
            min(binomial_entropy(7, 0.45), binomial_entropy(7, 0.55)),
        )
        self.assertAlmostEqual(min_binomial_entropy(7, (0.5, 0.5)), binomial_entropy(7, 0.5))

    def test_exact_marginal_validation(self):
        with self.assertRaises(MarginalError):
            ExactMarginal(P=(0.5, 0.5, 0.0))
        with self.assertRaises(MarginalError):
            ExactMarginal(P=(0.5, 0.6))
        with self.assertRaises(MarginalError):
            exact_binomial_marginal(7, 0.0)
        with self.assertRaises(MarginalError):
            IntervalMarginal(pmin=(0.3,), pmax=(0.2,))


class TestProgramInstance(unittest.TestCase):
    """Instance construction"""

    def test_toy_instance(self):
        instance = ProgramInstance(
            matrices=scalar_matrices(1, 2), marginal=ExactMarginal(P=(0.5, 0.5))
        )
        self.assertEqual((instance.T, instance.N, instance.bits_per_step), (2, 1, 1))
        self.assertAlmostEqual(instance.ent_constant, 1.0)

    def test_vertin_instance(self):
        system = build_transition_matrices(preset("Vertin"))
        instance = build_instance(system, 0.371360)
        self.assertEqual((instance.T, instance.N, instance.bits_per_step), (8, 600, 7))

    def test_sonetto_interval_instance(self):
        system = build_transition_matrices(preset("Sonetto"))
        instance = build_instance(system, (0.3199, 0.3200))
        self.assertIsInstance(instance.marginal, IntervalMarginal)
        for i in range(8):
            lo, hi = binomial_pmf_bounds(i, 7, (0.3199, 0.3200), DEFAULT_SLACK)
            self.assertEqual(instance.marginal.pmin[i], lo)
            self.assertEqual(instance.marginal.pmax[i], hi)
        self.assertAlmostEqual(instance.ent_constant, min_binomial_entropy(7, (0.3199, 0.3200)))

    def test_marginal_width_must_match(self):
        with self.assertRaises(MarginalError):
            ProgramInstance(matrices=scalar_matrices(1, 2), marginal=ExactMarginal(P=(1 / 3,) * 3))

    def test_interval_needs_entropy_constant(self):
        with self.assertRaises(MarginalError):
            ProgramInstance(
                matrices=scalar_matrices(1, 2),
                marginal=IntervalMarginal(pmin=(0.4, 0.4), pmax=(0.6, 0.6)),
            )

    def test_negative_entries_rejected(self):
        with self.assertRaises(ValueError):
            ProgramInstance(matrices=scalar_matrices(1, -1), marginal=ExactMarginal(P=(0.5, 0.5)))


class TestFlowProgram(unittest.TestCase):
    """Flow objective, dual certificate and solves"""

    def setUp(self):
        self.support = FlowSupport.from_matrices(scalar_matrices(1, 2))
        self.forced = np.full(4, 0.25)

    def test_support_layout(self):
        self.assertEqual(self.support.size, 4)
        self.assertTrue(np.all(np.diff(self.support.src) >= 0))
        np.testing.assert_array_equal(self.support.pair, [0, 1, 2, 3])
        np.testing.assert_allclose(self.support.log2_weight, [0.0, 0.0, 1.0, 1.0])

    def test_objective_at_forced_flow(self):
        # H = 1 bit, F = 1/2
        self.assertAlmostEqual(flow_objective(self.support, self.forced), 1.5)

    def test_weak_duality_for_any_multipliers(self):
        rng = np.random.default_rng(5)
        mass = np.full(4, 0.25)
        for _ in range(20):
            w = rng.normal(size=4)
            phi = rng.normal(size=self.support.nodes)
            bound = dual_bound(self.support, w, phi, mass, mass)
            self.assertGreaterEqual(bound, 1.5 - 1e-12)

    def test_toy_solve(self):
        instance = ProgramInstance(
            matrices=scalar_matrices(1, 2), marginal=ExactMarginal(P=(0.5, 0.5))
        )
        outcome = solve_instance(instance)
        self.assertAlmostEqual(outcome.primal, 0.5, places=6)
        self.assertGreaterEqual(outcome.dual, outcome.primal - 1e-9)
        self.assertLess(outcome.gap, 1e-5)

    def test_zero_one_scalars_give_zero(self):
        instance = ProgramInstance(
            matrices=scalar_matrices(1, 1, 1), marginal=ExactMarginal(P=(0.2, 0.3, 0.5))
        )
        self.assertAlmostEqual(solve_instance(instance).primal, 0.0, places=6)


class TestCertifyTheta(unittest.TestCase):
    """Interval-relaxed certification of one segment"""

    @classmethod
    def setUpClass(cls):
        cls.params = two_state_family()
        cls.session = CertificationSession.for_params(cls.params)

    def test_certificate_within_gap(self):
        certificate = certify_theta(self.params, (0.30, 0.31), session=self.session)
        self.assertLessEqual(certificate.gap, 5e-6)
        self.assertTrue(math.isfinite(certificate.theta))
        self.assertEqual((certificate.p_lo, certificate.p_hi), (0.30, 0.31))

    def test_relaxation_dominates_exact_values(self):
        certificate = certify_theta(self.params, (0.40, 0.45), session=self.session)
        report = relaxation_dominance(self.session, certificate, samples=4, seed=2)
        self.assertTrue(report.passed, report.violations)
        self.assertEqual(len(report.samples), 4)

    def test_refusal_after_retries(self):
        session = MagicMock()
        session.matrices = self.session.matrices
        session.K = 1
        session.solve.return_value = SolveOutcome(
            primal=0.1, dual=0.2, gap=0.1, status="solved", solve_seconds=0.0
        )
        with self.assertRaises(CertificationRefused):
            certify_theta(self.params, (0.3, 0.4), session=session, max_retries=2)
        self.assertEqual(session.solve.call_count, 3)

    def test_invalid_segment(self):
        with self.assertRaises(ValueError):
            certify_theta(self.params, (0.4, 0.3), session=self.session)

    @unittest.skipUnless(SLOW, "set TAME_CERTIFY_SLOW=1")
    def test_published_snapshot_lines(self):
        cases = (
            ("Vertin", (0.371360, 0.371361), 0.29313274386304),
            ("Sonetto", (0.3199, 0.3200), 0.31983985702607),
            ("Regulus", (0.2770, 0.2771), 0.31630630782061),
            ("RegulusT", (0.3520, 0.3521), 0.32258935625635),
        )
        for name, interval, expected in cases:
            certificate = certify_theta(preset(name), interval)
            self.assertLessEqual(certificate.gap, 5e-6, name)
            self.assertAlmostEqual(certificate.theta, expected, delta=5e-4, msg=name)

    @unittest.skipUnless(SLOW, "set TAME_CERTIFY_SLOW=1")
    def test_sonetto_exact_program(self):
        system = build_transition_matrices(preset("Sonetto"))
        outcome = solve_instance(build_instance(system, 0.3200))
        self.assertAlmostEqual(outcome.primal, 0.31980778125732, delta=5e-4)


class TestSolverAdapter(unittest.TestCase):
    """Solver selection"""

    def test_unknown_solver_rejected(self):
        with self.assertRaises(ValueError):
            ConicAdapter("SIMPLEX")

    @patch.dict(os.environ, {"TAME_CERTIFY_SOLVER": "scs"})
    def test_solver_from_environment(self):
        self.assertEqual(_get_solver_name(), "SCS")
        self.assertEqual(ConicAdapter().max_attempts, 3)

    @patch.dict(os.environ, {"TAME_CERTIFY_SOLVER": "nope"})
    def test_unknown_environment_value_falls_back(self):
        with self.assertLogs("tame_certify.solver_adapter", level=logging.WARNING):
            self.assertEqual(_get_solver_name(), "CLARABEL")


class TestEnvelopes(unittest.TestCase):
    """Step and ramp envelopes"""

    def setUp(self):
        self.lattice = (0.0, 0.1, 0.2)
        self.thetas = (1.0, 1.05)

    def test_step_evaluation(self):
        env = build_envelope(self.thetas, self.lattice, "step")
        self.assertEqual(envelope_eval(env, 0.05), 1.0)
        self.assertEqual(envelope_eval(env, 0.1), 1.05)
        self.assertEqual(envelope_eval(env, 0.2), 1.05)

    def test_ramp_evaluation(self):
        env = build_envelope(self.thetas, self.lattice, "ramp")
        self.assertAlmostEqual(envelope_eval(env, 0.1), 1.0)
        self.assertAlmostEqual(envelope_eval(env, 0.105), 1.025)
        self.assertAlmostEqual(envelope_eval(env, 0.11), 1.05)
        self.assertAlmostEqual(envelope_eval(env, 0.15), 1.05)
        self.assertAlmostEqual(envelope_eval(env, 0.0), 1.0)
        np.testing.assert_allclose(envelope_eval(env, np.array([0.1, 0.15])), [1.0, 1.05])

    def test_ramp_lipschitz_condition(self):
        with self.assertRaises(LipschitzViolation):
            build_envelope((1.0, 2.0), self.lattice, "ramp")
        build_envelope((1.0, 2.0), self.lattice, "step")

    def test_published_sonetto_slope_accepted(self):
        env = build_envelope(
            (0.31983985702607, 0.31980778125732), (0.3199, 0.3200, 0.3201), "ramp"
        )
        self.assertEqual(env.segments, 2)

    def test_outside_domain(self):
        env = build_envelope(self.thetas, self.lattice, "step")
        with self.assertRaises(EnvelopeDomainError):
            envelope_eval(env, 0.25)

    def test_file_format(self):
        env = build_envelope(
            (0.29313274386304,),
            (0.371360, 0.371361),
            "step",
            gaps=(0.0000008805,),
            family="Vertin",
            H=600,
            alpha=0.5,
            beta=0.5,
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "vertin.env"
            write_envelope(env, path)
            lines = path.read_text(encoding="utf-8").splitlines()
            self.assertEqual(
                lines[0], "# family=Vertin mode=step H=600 alpha=0.5 beta=0.5 end=0.371361"
            )
            self.assertEqual(lines[1], "0.371360 0.29313274386304 0.0000008805")
            restored = read_envelope(path)
        self.assertEqual(restored.lattice, env.lattice)
        self.assertEqual(restored.thetas, env.thetas)
        self.assertEqual(restored.family, "Vertin")

    def test_certificates_must_meet(self):
        params = two_state_family()
        certificates = [
            SegmentCertificate(0.1, 0.2, 0.5, 0.0, 1),
            SegmentCertificate(0.2, 0.3, 0.5, 0.0, 1),
        ]
        env = envelope_from_certificates(certificates, "step", params)
        self.assertEqual(env.lattice, (0.1, 0.2, 0.3))
        self.assertEqual(env.family, "Pair")
        with self.assertRaises(CoverageError):
            envelope_from_certificates(
                [certificates[0], SegmentCertificate(0.25, 0.3, 0.5, 0.0, 1)], "step", params
            )


if __name__ == "__main__":
    unittest.main()
