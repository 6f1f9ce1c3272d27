"""Test script for run configuration parsing, validation and manifests."""

import dataclasses
import unittest
from unittest.mock import patch

from tools.particle_system.model import builtin_model
from tools.particle_system.run_config import (
    ConfigError,
    RunConfig,
    config_from_manifest,
    format_config,
    parse_config,
    validate_config,
)


class TestParseConfig(unittest.TestCase):
    """Test cases for the key-value configuration text."""

    def test_minimal(self):
        """Test a minimal configuration with defaults filled in."""
        run_config = parse_config("model=gbm\nh_levels=0.25,0.125\n")
        self.assertEqual(run_config.model, "gbm")
        self.assertEqual(run_config.h_levels, [0.25, 0.125])
        self.assertEqual(run_config.M, 10)
        self.assertEqual(run_config.scheme, "milstein")
        self.assertIsNone(run_config.mode)
        self.assertEqual(run_config.schema_version, 1)

    def test_comments_and_params(self):
        """Test comment lines and model parameters."""
        text = "# geometric Brownian motion\nmodel=gbm\nparam.a=0.2\nN=4\n"
        run_config = parse_config(text)
        self.assertEqual(run_config.params, {"a": 0.2})
        self.assertEqual(run_config.N, 4)
        self.assertEqual(run_config.build_model().params, {"a": 0.2, "nu": 0.3})

    def test_step_not_dividing_reference(self):
        """Test that a violation names both h_ref and h_levels."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=mvou\nT=1\nh_levels=0.25\nh_ref=0.3\n")
        self.assertTrue(
            any("h_ref" in v and "h_levels" in v for v in context.exception.violations)
        )

    def test_levels_nested_without_reference(self):
        """Test that every level must be a multiple of the finest one when h_ref is unset."""
        with self.assertRaises(ConfigError) as context:
            validate_config({"model": "gbm", "h_levels": [0.25, 0.2], "M": 4})
        self.assertTrue(
            any(v.startswith("h_levels") and "finest" in v for v in context.exception.violations)
        )
        with self.assertRaises(ConfigError):
            parse_config("model=gbm\nh_levels=0.5,0.25,0.25\n")
        run_config = parse_config("model=gbm\nh_levels=0.5,0.25,0.125\n")
        self.assertEqual(run_config.violations_for("moments"), [])

    def test_commutative_needs_commutation_condition(self):
        """Test rejection of the reduced update for a model flagged non-commutative."""
        self.assertEqual(parse_config("model=gbm\nmode=commutative\n").mode, "commutative")
        with patch(
            "tools.particle_system.run_config.builtin_model",
            lambda name, params: dataclasses.replace(builtin_model(name, params), commutative=False),
        ):
            with self.assertRaises(ConfigError) as context:
                parse_config("model=gbm\nmode=commutative\n")
        self.assertTrue(any("commutation" in v for v in context.exception.violations))

    def test_commutative_with_common_noise(self):
        """Test rejection of the reduced update for a model with W0."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=mvou\nparam.sigma0=0.3\nmode=commutative\n")
        self.assertTrue(any(v.startswith("mode") for v in context.exception.violations))

    def test_unknown_key(self):
        """Test that unknown keys are errors."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=gbm\nsteps=10\n")
        self.assertTrue(any(v.startswith("steps") for v in context.exception.violations))

    def test_all_violations_reported(self):
        """Test that independent violations are reported together."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=gbm\nM=0\nworkers=0\nscheme=heun\n")
        violations = context.exception.violations
        self.assertEqual(len(violations), 3)
        for field in ("M", "workers", "scheme"):
            self.assertTrue(any(v.startswith(field) for v in violations))

    def test_unknown_model_and_params(self):
        """Test rejection of unknown models and parameters."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=heston\n")
        self.assertTrue(context.exception.violations[0].startswith("model"))
        with self.assertRaises(ConfigError) as context:
            parse_config("model=gbm\nparam.b=1\n")
        self.assertTrue(context.exception.violations[0].startswith("params.b"))
        with self.assertRaises(ConfigError):
            parse_config("param.a=1\n")

    def test_missing_value(self):
        """Test a key without a value."""
        with self.assertRaises(ConfigError) as context:
            parse_config("model=gbm\nseed\n")
        self.assertIn("seed: missing value", context.exception.violations)

    def test_horizon_constraints(self):
        """Test the maximal step min(1, T)."""
        self.assertEqual(parse_config("model=gbm\nT=2\nn=2\n").n, 2)
        with self.assertRaises(ConfigError):
            parse_config("model=gbm\nT=2\nn=1\n")
        with self.assertRaises(ConfigError):
            parse_config("model=gbm\nT=2\nh_levels=2\n")
        with self.assertRaises(ConfigError):
            parse_config("model=gbm\nT=1\nh_levels=0.3\n")

    def test_particle_levels(self):
        """Test the divisibility of N_ref by the particle levels."""
        self.assertEqual(parse_config("model=mvou\nN_levels=2,4\nN_ref=8\n").N_ref, 8)
        with self.assertRaises(ConfigError):
            parse_config("model=mvou\nN_levels=3\nN_ref=8\n")
        with self.assertRaises(ConfigError):
            parse_config("model=mvou\nN_levels=16\nN_ref=8\n")

    def test_non_finite_and_schema(self):
        """Test rejection of non-finite numbers and future schema versions."""
        with self.assertRaises(ConfigError):
            parse_config("model=gbm\nx0=nan\n")
        with self.assertRaises(ConfigError):
            parse_config("schema_version=2\nmodel=gbm\n")

    def test_slope_window(self):
        """Test ordering of the slope window bounds."""
        self.assertEqual(parse_config("slope_window=0.8,1.2\n").slope_window, (0.8, 1.2))
        with self.assertRaises(ConfigError):
            parse_config("slope_window=1.2,0.8\n")


class TestFormatConfig(unittest.TestCase):
    """Test cases for the canonical text and manifests."""

    def test_round_trip(self):
        """Test that the canonical text parses back to an equal configuration."""
        run_config = parse_config(
            "model=mean_volatility\nparam.nu=0.05\nmode=drop_measure_terms\n"
            "h_levels=0.25,0.125\nh_ref=0.03125\nM=20\nslope_window=0.8,1.2\nseed=3\n"
        )
        text = format_config(run_config)
        self.assertIn("param.nu=0.05\n", text)
        self.assertNotIn("N_levels", text)
        self.assertEqual(parse_config(text).model_dump(), run_config.model_dump())
        self.assertEqual(format_config(parse_config(text)), text)

    def test_manifest(self):
        """Test re-creating a configuration from a manifest."""
        run_config = parse_config("model=gbm\nn=8\n")
        manifest = {"config_text": format_config(run_config)}
        self.assertEqual(config_from_manifest(manifest).model_dump(), run_config.model_dump())
        with self.assertRaises(ConfigError):
            config_from_manifest({})


class TestSubcommandRequirements(unittest.TestCase):
    """Test cases for fields required by each subcommand."""

    def test_simulate(self):
        """Test that simulate needs a model and a step count."""
        violations = RunConfig().violations_for("simulate")
        self.assertTrue(any(v.startswith("model") for v in violations))
        self.assertTrue(any(v.startswith("n:") for v in violations))
        self.assertEqual(validate_config({"model": "gbm", "n": 4}).violations_for("simulate"), [])

    def test_quadrature_needs_no_model(self):
        """Test that quadrature only needs step sizes."""
        run_config = validate_config({"h_levels": [0.5, 0.25]})
        self.assertEqual(run_config.violations_for("quadrature"), [])

    def test_convergence_reference(self):
        """Test that h_ref is only required without a closed form."""
        data = {"h_levels": [0.5, 0.25, 0.125]}
        self.assertEqual(validate_config(dict(data, model="gbm")).violations_for("convergence"), [])
        violations = validate_config(dict(data, model="mvou")).violations_for("convergence")
        self.assertTrue(any(v.startswith("h_ref") for v in violations))

    def test_study_replicates(self):
        """Test that studies need at least two replicates."""
        run_config = validate_config({"h_levels": [0.5], "M": 1})
        self.assertTrue(any(v.startswith("M") for v in run_config.violations_for("quadrature")))

    def test_poc(self):
        """Test the particle levels required by poc."""
        violations = validate_config({"model": "mvou", "n": 4}).violations_for("poc")
        self.assertTrue(any(v.startswith("N_levels") for v in violations))
        self.assertTrue(any(v.startswith("N_ref") for v in violations))

    def test_unknown_subcommand(self):
        """Test an unknown subcommand."""
        self.assertEqual(len(RunConfig().violations_for("plot")), 1)


if __name__ == "__main__":
    unittest.main()
