import json
import math
import tempfile
from contextlib import ExitStack
from pathlib import Path
from unittest import mock, skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, TestCase, override_settings

from experiments import reports, services
from experiments.errors import ArtifactError, ConstraintError, InstabilityError
from experiments.lp_besov import TorusGrid
from experiments.models import ExperimentRun, RunStatus, SweepCell
from experiments.reports import CHECK_FAIL, CHECK_OBSERVED, CHECK_PASS, CHECK_SKIPPED
from experiments.tasks import probe_cell_task, run_experiment_task


class TempOutputMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.tmp = Path(self._tmp.name)
        override = override_settings(LAB_OUTPUT_ROOT=self.tmp)
        override.enable()
        self.addCleanup(override.disable)


class ConfigTests(TempOutputMixin, TestCase):
    def test_hash_ignores_output_directory(self):
        first = services.validate_config({"kind": "symbol", "output": "/tmp/a"})
        second = services.validate_config({"kind": "symbol", "output": "/tmp/b"})
        self.assertEqual(first.config_hash, second.config_hash)
        self.assertEqual(len(first.config_hash), 64)
        self.assertNotEqual(first.config_hash, services.validate_config({"kind": "symbol", "seed": 1}).config_hash)

    def test_parse_overrides(self):
        overrides = services.parse_overrides(["samples=5", "omegas=[1, 2]", "recipe=gaussian-bump"])
        self.assertEqual(overrides, {"samples": 5, "omegas": [1, 2], "recipe": "gaussian-bump"})
        with self.assertRaises(ConstraintError):
            services.parse_overrides(["samples"])

    def test_unknown_key_is_rejected(self):
        with self.assertRaises(ConstraintError) as ctx:
            services.validate_config({"kind": "symbol", "viscosity": 1.0})
        self.assertEqual(ctx.exception.constraint, "known config keys")

    def test_form_constraint_becomes_the_error_code(self):
        with self.assertRaises(ConstraintError) as ctx:
            services.validate_config({"kind": "norms", "r": 2.0})
        self.assertEqual(ctx.exception.constraint, "2 < r")
        self.assertEqual(ctx.exception.exit_code, services.EXIT_VALIDATION)

    def test_config_file_errors(self):
        with self.assertRaises(ArtifactError):
            services.load_config_file(self.tmp / "missing.json")
        bad = self.tmp / "bad.json"
        bad.write_text("[1, 2]")
        with self.assertRaises(ConstraintError):
            services.load_config_file(bad)

    def test_default_output_directory(self):
        cfg = services.validate_config({"kind": "symbol"})
        self.assertEqual(services.output_dir_for(cfg), self.tmp / "symbol" / cfg.config_hash[:16])
        self.assertEqual(cfg.omegas(), [10.0])
        self.assertEqual(cfg.seeds(), [0])


class RunTests(TempOutputMixin, TestCase):
    def test_symbol_run_writes_reports(self):
        outcome = services.run({"kind": "symbol"}, ["samples=5"])
        self.assertIn(outcome.exit_code, (services.EXIT_OK, services.EXIT_CHECK_FAILED))
        run = ExperimentRun.objects.get(id=outcome.run.id)
        self.assertEqual(run.output_dir, str(outcome.output_dir))
        for name in ("symbol_draws.csv", "summary.json", "manifest.json"):
            self.assertTrue((outcome.output_dir / name).exists(), name)
        config_hash, rows = reports.read_csv_rows(outcome.output_dir / "symbol_draws.csv")
        self.assertEqual(config_hash, run.config_hash)
        self.assertEqual(len(rows), 5)
        manifest = json.loads((outcome.output_dir / "manifest.json").read_text())
        self.assertEqual(manifest["kind"], "symbol")
        self.assertNotIn("output", manifest["config"])
        self.assertEqual(run.summary["checks"][0]["name"], "quartic matches charpoly")

    def test_identical_configs_give_identical_reports(self):
        first = services.run({"kind": "symbol", "output": str(self.tmp / "a")}, ["samples=4"])
        second = services.run({"kind": "symbol", "output": str(self.tmp / "b")}, ["samples=4"])
        for name in ("symbol_draws.csv", "summary.json", "manifest.json"):
            self.assertEqual((first.output_dir / name).read_bytes(), (second.output_dir / name).read_bytes(), name)

    def test_validation_error_records_nothing(self):
        with self.assertRaises(ConstraintError):
            services.run({"kind": "strichartz"}, ["Omega=50"])
        self.assertFalse(ExperimentRun.objects.exists())

    def test_failed_check_exit_code(self):
        def failing(cfg, ctx):
            return [services.flag_check("always", False)]

        with mock.patch.dict(services.RUNNERS, {"symbol": failing}):
            outcome = services.run({"kind": "symbol"})
        self.assertEqual(outcome.exit_code, services.EXIT_CHECK_FAILED)
        self.assertEqual(ExperimentRun.objects.get(id=outcome.run.id).status, RunStatus.FAILED)
        self.assertIn("always", services.summary_table(outcome.checks))

    def test_instability_exit_code(self):
        def unstable(cfg, ctx):
            raise InstabilityError("non-finite state", failure_time=0.5)

        with mock.patch.dict(services.RUNNERS, {"symbol": unstable}):
            outcome = services.run({"kind": "symbol"})
        run = ExperimentRun.objects.get(id=outcome.run.id)
        self.assertEqual(outcome.exit_code, services.EXIT_INSTABILITY)
        self.assertEqual(run.exit_code, services.EXIT_INSTABILITY)
        self.assertIn("non-finite", run.error_message)
        self.assertTrue((outcome.output_dir / "summary.json").exists())

    def test_io_error_exit_code(self):
        def broken(cfg, ctx):
            raise OSError("disk full")

        with mock.patch.dict(services.RUNNERS, {"symbol": broken}):
            outcome = services.run({"kind": "symbol"})
        self.assertEqual(outcome.exit_code, services.EXIT_IO)

    def test_simulate_writes_snapshots(self):
        outcome = services.run(
            {"kind": "simulate"},
            ["n=16", "recipe=gaussian-bump", "amplitude=0.05", "horizon=0.02", "dt=0.01", "snapshot_every=1"],
        )
        self.assertEqual(outcome.exit_code, services.EXIT_OK, outcome.error)
        manifest = json.loads((outcome.output_dir / "manifest.json").read_text())
        self.assertEqual(len(manifest["snapshots"]), 3)
        self.assertTrue((outcome.output_dir / "run_report.json").exists())

    def test_local_sweep_records_cells(self):
        outcome = services.run(
            {"kind": "sweep"},
            [
                "recipe=gaussian-bump", "amplitude=0.05", "horizon=0.02", "dt=0.01", "snapshot_every=1",
                "omegas=[1, 10]", "epsilons=[0.1]",
            ],
            sweep_backend="local",
        )
        self.assertEqual(outcome.exit_code, services.EXIT_OK, outcome.error)
        _, rows = reports.read_csv_rows(outcome.output_dir / "regime_map.csv")
        self.assertEqual([row["Omega"] for row in rows], ["1", "10"])
        cells = SweepCell.objects.filter(run=outcome.run)
        self.assertEqual(cells.count(), 2)
        self.assertTrue(all(cell.status == RunStatus.DONE for cell in cells))
        self.assertTrue((outcome.output_dir / "cells" / "cell_0001.csv").exists())


def passing(name):
    return lambda *args, **kwargs: [services.flag_check(name, True)]


class VerifySuiteTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.params = services.validate_config({"kind": "verify-all"}).params()
        cls.grid = TorusGrid(32)

    def by_name(self, checks):
        return {check.name: check for check in checks}

    def test_linear_suite(self):
        checks = self.by_name(services._linear_suite(self.grid, self.params, np.random.default_rng(0)))
        self.assertEqual(
            set(checks),
            {
                "block energy ratio >= 1",
                "high-frequency constant finite and eps-stable",
                "Duhamel quadrature vs stiff reference",
            },
        )
        self.assertEqual(checks["block energy ratio >= 1"].status, CHECK_PASS)
        self.assertEqual(checks["Duhamel quadrature vs stiff reference"].status, CHECK_PASS)
        high = checks["high-frequency constant finite and eps-stable"]
        self.assertIsNotNone(high.value)
        self.assertTrue(math.isfinite(high.value))
        self.assertGreaterEqual(high.value, 1.0)

    def test_strichartz_suite(self):
        decreasing, ratio = services._strichartz_suite(self.grid, self.params, np.random.default_rng(0))
        self.assertEqual(decreasing.name, "strictly decreasing in Omega")
        self.assertIn(decreasing.status, (CHECK_PASS, CHECK_FAIL))
        self.assertGreater(decreasing.value, 0.0)
        self.assertEqual(ratio.status, CHECK_OBSERVED)
        self.assertTrue(math.isfinite(ratio.value))

    def test_harness_suite_compares_two_batches(self):
        with mock.patch.object(services, "BATCH_SAMPLES", 4):
            checks = self.by_name(services._harness_suite(self.grid, 0))
        self.assertEqual(
            list(checks),
            [
                "A1 constant stable across batches",
                "A1 scaling drift",
                "A2 constant stable across batches",
                "A2 scaling drift",
                "A3 constant stable across batches",
            ],
        )
        self.assertEqual(checks["A1 scaling drift"].status, CHECK_PASS)
        self.assertEqual(checks["A2 scaling drift"].status, CHECK_PASS)
        for name in ("A1", "A2", "A3"):
            stable = checks[f"{name} constant stable across batches"]
            self.assertIn(stable.status, (CHECK_PASS, CHECK_FAIL))
            self.assertIn(" / ", stable.detail)

    @skipUnless(settings.LAB_SLOW_TESTS, "slow")
    def test_harness_constants_agree_across_full_batches(self):
        checks = services._harness_suite(self.grid, 0)
        self.assertTrue(all(check.status == CHECK_PASS for check in checks), services.summary_table(checks))

    def test_stable_check(self):
        self.assertEqual(services._stable_check("c", None, None).status, CHECK_SKIPPED)
        self.assertEqual(services._stable_check("c", 1.0, 1.04).status, CHECK_PASS)
        self.assertEqual(services._stable_check("c", 1.0, 1.1).status, CHECK_FAIL)
        self.assertEqual(services._stable_check("c", 1.0, None).status, CHECK_FAIL)

    def test_norm_suite_records_fitted_constants(self):
        spec = services.validate_config({"kind": "verify-all"}).norm_spec()
        checks = self.by_name(services._norm_suite(self.grid, self.params, spec))
        c4 = checks["C4 across amplitude scalings"]
        self.assertEqual(c4.status, CHECK_PASS)
        self.assertTrue(c4.detail.startswith("C4="))
        for name in ("AE1", "AE2", "AE3", "AE4"):
            self.assertIn(f"{name} constant stable across batches", checks)
        self.assertEqual(checks["E homogeneity"].status, CHECK_PASS)

    def test_solver_round_trip_passes(self):
        checks = self.by_name(services._solver_suite(TorusGrid(16), self.params, np.random.default_rng(0)))
        trip = checks["u -> m -> u round trip"]
        self.assertEqual(trip.status, CHECK_PASS)
        self.assertLessEqual(trip.value, 1e-11)


class VerifyAllTests(TempOutputMixin, TestCase):
    def test_suites_run_in_order(self):
        suites = {
            "run_symbol": "symbol",
            "run_linear_decay": "linear-decay",
            "_linear_suite": "linear",
            "_strichartz_suite": "strichartz",
            "_lp_suite": "littlewood-paley",
            "_harness_suite": "harnesses",
            "_solver_suite": "solver",
            "_norm_suite": "norms",
        }
        with ExitStack() as stack:
            for attribute in suites:
                stack.enter_context(mock.patch.object(services, attribute, passing("ok")))
            outcome = services.run({"kind": "verify-all"})
        self.assertEqual(outcome.exit_code, services.EXIT_OK, outcome.error)
        self.assertEqual([check.name for check in outcome.checks], [f"{suite}: ok" for suite in suites.values()])
        _, rows = reports.read_csv_rows(outcome.output_dir / "verify_all.csv")
        self.assertEqual([row["check"] for row in rows], [f"{suite}: ok" for suite in suites.values()])


class TaskTests(TempOutputMixin, TestCase):
    def test_run_task_executes_pending_run(self):
        cfg = services.validate_config({"kind": "symbol", "samples": 3})
        run = services.create_run(cfg)
        result = run_experiment_task.apply(args=[str(run.id)]).get()
        self.assertIn("exit_code", result)
        run.refresh_from_db()
        self.assertIn(run.status, (RunStatus.DONE, RunStatus.FAILED))

    def test_run_task_skips(self):
        self.assertEqual(
            run_experiment_task.apply(args=["00000000-0000-0000-0000-000000000000"]).get(),
            {"skipped": True, "reason": "missing"},
        )
        cfg = services.validate_config({"kind": "symbol"})
        run = services.create_run(cfg)
        run.status = RunStatus.DONE
        run.save()
        self.assertEqual(run_experiment_task.apply(args=[str(run.id)]).get()["reason"], "already_done")

    def test_cell_task_skips_finished_cell(self):
        cfg = services.validate_config({"kind": "symbol"})
        run = services.create_run(cfg)
        cell = SweepCell.objects.create(run=run, index=0, Omega=1.0, eps=0.1, status=RunStatus.DONE)
        self.assertEqual(probe_cell_task.apply(args=[cell.id]).get()["reason"], "already_done")
