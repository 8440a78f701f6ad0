"""
Unit tests for the tame rebalancing process.
"""

import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import yaml

from tame_certify.errors import DepthBudgetError, ParamsError, TiltAmbiguityError
from tame_certify.kron_core import (
    Rank1Term,
    circuit_degrees,
    circuit_matrix_check,
    expand_block,
    pattern_from_index,
    popcount,
)
from tame_certify.rebalance import (
    State,
    TameParams,
    clamp,
    dump_family,
    load_family,
    params_from_mapping,
    parse_tilt_base,
    preset,
    resolve_family,
    sample_states,
    state_blocks,
    step_matrix,
    tilt,
    tilted_block,
    transpose_params,
    transpose_term,
    unfold,
    unfold_degrees,
    validate_family,
)

SLOW = os.environ.get("TAME_CERTIFY_SLOW") == "1"


def small_family(**overrides):
    """Four K=2 blocks on eight states; every tilt is an integer."""
    fields = dict(
        name="Quad",
        K=2,
        H=8,
        blocks=(0, 1, 2, 3),
        i_runs=((1, 2), (2, 2), (3, 2), (4, 2)),
        z_expr="2^(1/3)",
        alpha=0.5,
        beta=0.5,
    )
    fields.update(overrides)
    return TameParams(**fields)


class TestPresets(unittest.TestCase):
    """Shipped parameter tables"""

    def test_vertin(self):
        params = preset("Vertin")
        self.assertEqual(params.K, 7)
        self.assertEqual(params.H, 600)
        self.assertEqual(params.blocks, (0, 21, 42, 85, 106, 127))
        self.assertEqual(
            params.i_runs, ((1, 15), (2, 30), (3, 255), (4, 255), (5, 30), (6, 15))
        )
        self.assertAlmostEqual(params.Z, 2 ** (1 / 3))

    def test_sonetto(self):
        params = preset("sonetto")
        self.assertEqual(params.H, 360)
        self.assertEqual((params.alpha, params.beta), (0.38, 0.38))

    def test_regulus_t(self):
        params = preset("RegulusT")
        self.assertEqual(params.blocks, (0, 41, 42, 50, 82, 84, 85, 127))
        self.assertEqual((params.alpha, params.beta), (0.414, 0.336))

    def test_unknown_name(self):
        with self.assertRaises(ParamsError):
            preset("Andante")

    def test_first_run_labels_lowest_states(self):
        blocks = state_blocks(preset("Vertin"))
        self.assertEqual(blocks[0], 0)
        self.assertEqual(blocks[-1], 127)
        self.assertEqual(blocks[State(0.5, 600).index], 85)
        self.assertEqual(blocks[State(-0.5, 600).index], 42)


class TestParams(unittest.TestCase):
    """Parameter validation and family files"""

    def test_tilt_base_expressions(self):
        self.assertAlmostEqual(parse_tilt_base("2^(1/3)"), 1 / 3)
        self.assertAlmostEqual(parse_tilt_base("1.5"), np.log2(1.5))
        with self.assertRaises(ParamsError):
            parse_tilt_base("two")

    def test_unit_tilt_base_rejected(self):
        with self.assertRaises(ParamsError):
            small_family(z_expr="1")

    def test_runs_must_cover_window(self):
        with self.assertRaises(ParamsError):
            small_family(i_runs=((1, 2), (2, 2)))

    def test_run_ordinal_must_reference_a_block(self):
        with self.assertRaises(ParamsError):
            small_family(i_runs=((1, 4), (5, 4)))

    def test_dump_and_load(self):
        params = preset("Regulus")
        text = dump_family(params)
        self.assertEqual(params_from_mapping(yaml.safe_load(text)), params)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "regulus-copy.yaml"
            path.write_text(text, encoding="utf-8")
            self.assertEqual(load_family(path), params)
            self.assertEqual(resolve_family(str(path)), params)

    def test_missing_field(self):
        with self.assertRaises(ParamsError):
            params_from_mapping({"name": "x", "K": 7})

    def test_resolve_unknown(self):
        with self.assertRaises(ParamsError):
            resolve_family("/nonexistent/family.yaml")


class TestStates(unittest.TestCase):
    """Half-integer lattice"""

    def test_clamp_examples(self):
        self.assertEqual(clamp(302.5, 600).h, 299.5)
        self.assertEqual(clamp(-300.5, 600).h, -299.5)
        self.assertEqual(clamp(10.5, 600).h, 10.5)

    def test_integer_state_rejected(self):
        with self.assertRaises(ValueError):
            State(0.0, 600)
        with self.assertRaises(ValueError):
            clamp(3.0, 600)

    def test_index_range(self):
        self.assertEqual(State(-299.5, 600).index, 0)
        self.assertEqual(State(299.5, 600).index, 599)

    def test_sample_states_include_endpoints(self):
        states = sample_states(preset("Sonetto"), samples=4, seed=1)
        self.assertIn(-179.5, states)
        self.assertIn(179.5, states)
        self.assertEqual(len(states), len(set(states)))


class TestTilt(unittest.TestCase):
    """Tilt rounding and transposition"""

    def setUp(self):
        self.vertin = preset("Vertin")

    def test_all_r_branches(self):
        block = tilted_block(self.vertin, 0)
        for j, term in enumerate(block.terms):
            self.assertEqual(term.tilt, 3 * (7 - int(popcount(j))), j)
        self.assertEqual(block.terms[0].tilt, 21)

    def test_all_c_branches(self):
        block = tilted_block(self.vertin, 127)
        for j, term in enumerate(block.terms):
            self.assertEqual(term.tilt, -3 * (7 - int(popcount(j))), j)

    def test_balanced_term_has_zero_tilt(self):
        term = Rank1Term(left_support=(5,), right_support=(5,))
        self.assertEqual(tilt(term, self.vertin), 0)

    def test_half_integer_argument_raises(self):
        # log_4 of the ratio 2 is exactly one half
        params = TameParams(
            name="Ambiguous",
            K=1,
            H=2,
            blocks=(0, 1),
            i_runs=((1, 1), (2, 1)),
            z_expr="4",
            alpha=0.5,
            beta=0.5,
        )
        with self.assertRaises(TiltAmbiguityError):
            tilted_block(params, 0)
        report = validate_family(params, 1)
        self.assertFalse(report.passed)

    def test_transpose_term_negates_tilt(self):
        params = preset("Regulus")
        for term in tilted_block(params, 43).terms[:16]:
            flipped = transpose_term(term, params)
            self.assertEqual(flipped.tilt, -term.tilt)
            self.assertEqual(flipped.left_support, term.right_support)


class TestTransposeParams(unittest.TestCase):
    """Transpose identities between the published families"""

    def test_regulus_maps_to_regulus_t(self):
        self.assertEqual(transpose_params(preset("Regulus")), preset("RegulusT"))
        self.assertEqual(transpose_params(preset("RegulusT")), preset("Regulus"))

    def test_self_transpose_families(self):
        for name in ("Vertin", "Sonetto"):
            params = preset(name)
            self.assertEqual(transpose_params(params), params)

    def test_involution(self):
        params = small_family(blocks=(0, 1, 3, 2), alpha=0.4, beta=0.45)
        self.assertEqual(transpose_params(transpose_params(params)), params)


class TestUnfold(unittest.TestCase):
    """Unfolding into finite circuits"""

    def test_one_level_is_the_state_block(self):
        vertin = preset("Vertin")
        terms = unfold(vertin, 7, 0.5)
        block = expand_block(pattern_from_index(85, 7))
        self.assertEqual(len(terms), 128)
        self.assertEqual(
            [(t.left_support, t.right_support) for t in terms],
            [(t.left_support, t.right_support) for t in block.terms],
        )

    def test_vertin_two_levels_is_a_circuit(self):
        terms = unfold(preset("Vertin"), 14, 0.5)
        self.assertEqual(len(terms), 16384)
        self.assertTrue(circuit_matrix_check(terms, 14))

    def test_n_must_be_multiple_of_k(self):
        with self.assertRaises(ValueError):
            unfold(preset("Vertin"), 10, 0.5)

    def test_depth_budget(self):
        with self.assertRaises(DepthBudgetError):
            unfold(preset("Vertin"), 28, 0.5)

    @patch.dict(os.environ, {"TAME_CERTIFY_MAX_UNFOLD_BITS": "4"})
    def test_depth_budget_from_environment(self):
        with self.assertRaises(DepthBudgetError):
            unfold(small_family(), 6, 0.5)

    def test_degree_only_unfolding_matches_terms(self):
        params = small_family()
        for h in (-3.5, 0.5, 3.5):
            direct = circuit_degrees(unfold(params, 6, h), 6)
            for chunk_rows in (1, 3, 128):
                streamed = unfold_degrees(params, 6, h, chunk_rows=chunk_rows)
                np.testing.assert_allclose(
                    streamed.left_weight_sums, direct.left_weight_sums, atol=1e-9
                )
                np.testing.assert_allclose(
                    streamed.right_weight_sums, direct.right_weight_sums, atol=1e-9
                )

    def test_step_matrix_rows_count_covering_terms(self):
        params = small_family()
        blocks = state_blocks(params)
        for symbol in range(4):
            sums = np.asarray(step_matrix(params, symbol, "right").sum(axis=1)).ravel()
            for state in range(params.H):
                terms = expand_block(pattern_from_index(int(blocks[state]), 2)).terms
                expected = sum(1 for t in terms if symbol in t.right_support)
                self.assertEqual(sums[state], expected)


class TestValidateFamily(unittest.TestCase):
    """Family validation"""

    def test_small_family_passes(self):
        report = validate_family(small_family(), 6, samples=8)
        self.assertTrue(report.passed, report.failures)
        self.assertIsNone(report.first_violation)

    def test_vertin_passes_at_one_state(self):
        report = validate_family(preset("Vertin"), 14, states=[0.5])
        self.assertTrue(report.passed, report.failures)

    @unittest.skipUnless(SLOW, "set TAME_CERTIFY_SLOW=1")
    def test_published_families_pass(self):
        for name in ("Vertin", "Sonetto", "Regulus", "RegulusT"):
            report = validate_family(preset(name), 14, samples=10)
            self.assertGreaterEqual(len(report.states), 10, name)
            self.assertTrue(report.passed, f"{name}: {report.failures}")


if __name__ == "__main__":
    unittest.main()
