import json
import math
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings, tag

from apps.detect.detectors import EnergySign
from apps.learner.types import Branch, EpisodeOutcome, LearnerMode, RunRecord
from apps.netcore.exceptions import ConfigurationError, NumericError
from apps.stream.generators import StreamConfig, default_domains
from apps.theory.services.report_service import theory_report_service
from apps.theory.types import TheoryCheck

from .config import (
    DetectorSpec,
    apply_overrides,
    load_config,
    parse_config,
    parse_overrides,
)
from .metrics import precision_recall, seed_metrics, summarize
from .records import EpisodeWriter, read_episodes, write_json
from .services.experiment_service import ExperimentService
from .services.sweep_service import SweepService

CONFIG_DIR = Path(settings.BASE_DIR) / "configs"
TEST_CACHES = {"default": {"BACKEND": "django.core.cache.backends.locmem.LocMemCache"}}
TEST_LAB_SETTINGS = {
    **settings.LAB_SETTINGS,
    "MAX_WORKERS": 1,
    "CALIBRATION_SUPPORTS": 30,
}


def smoke_doc(**changes):
    doc = json.loads((CONFIG_DIR / "smoke.json").read_text())
    doc.update(changes)
    return doc


def outcome(step, truth, detected, domain=0, acc=1.0):
    return EpisodeOutcome(
        step_index=step,
        query_loss=0.1,
        query_accuracy=acc,
        detected_switch=detected,
        detected_ood=False,
        truth_switched=truth,
        truth_domain_id=domain,
        support_loss=0.2,
        branch=Branch.SWITCH if detected else Branch.NO_SWITCH_IND,
    )


def record(truth, detected):
    return RunRecord(
        mode=LearnerMode.LEEDS,
        outcomes=[outcome(i, t, d) for i, (t, d) in enumerate(zip(truth, detected))],
    )


class ConfigTests(SimpleTestCase):
    def test_defaults_fill_in(self):
        config = parse_config(smoke_doc())
        self.assertEqual(config.modes, (LearnerMode.MAML_RESET,))
        self.assertEqual(config.n_seeds, 1)
        self.assertEqual(len(config.stream.domains), 3)
        self.assertEqual(config.detector, DetectorSpec())
        self.assertTrue(config.detector.calibrated)

    def test_round_trip(self):
        config = parse_config(smoke_doc(theory={"M_clip": 3.0}))
        again = parse_config(config.to_dict())
        self.assertEqual(again, config)
        self.assertEqual(again.to_dict(), config.to_dict())
        self.assertEqual(config.to_dict()["detector"]["tau"], "auto")

    def test_unknown_field_is_rejected_with_its_path(self):
        doc = smoke_doc()
        doc["stream"]["pstay"] = 0.9
        with self.assertRaisesMessage(ConfigurationError, "stream.pstay: Unknown field."):
            parse_config(doc)

    def test_unknown_domain_field(self):
        doc = parse_config(smoke_doc()).to_dict()
        doc["stream"]["domains"][1]["radius"] = 2.0
        with self.assertRaisesMessage(ConfigurationError, "stream.domains.1.radius"):
            parse_config(doc)

    def test_invalid_probability(self):
        with self.assertRaisesMessage(ConfigurationError, "p_stay"):
            parse_config(apply_overrides(smoke_doc(), {"stream.p_stay": 1.5}))

    def test_ways_must_match_classes(self):
        doc = parse_config(smoke_doc()).to_dict()
        doc["net"]["n_classes"] = 2
        with self.assertRaisesMessage(ConfigurationError, "n_ways"):
            parse_config(doc)

    def test_repeated_modes(self):
        with self.assertRaisesMessage(ConfigurationError, "modes"):
            parse_config(smoke_doc(modes=["leeds", "leeds"]))

    def test_explicit_detector(self):
        config = parse_config(smoke_doc(detector={"ell": 1.2, "tau": -0.5}))
        self.assertEqual(config.detector.ell, 1.2)
        self.assertEqual(config.detector.tau, -0.5)
        self.assertFalse(config.detector.calibrated)

    def test_energy_sign_aliases(self):
        for alias, sign in (("paper", EnergySign.NEGATED), ("literature", EnergySign.STANDARD)):
            config = parse_config(smoke_doc(detector={"energy_sign": alias}))
            self.assertIs(config.detector.energy_sign, sign)
            self.assertEqual(config.to_dict()["detector"]["energy_sign"], sign.value)

    def test_energy_sign_canonical_names(self):
        config = parse_config(smoke_doc(detector={"energy_sign": "standard"}))
        self.assertIs(config.detector.energy_sign, EnergySign.STANDARD)

    def test_detector_must_be_auto_or_object(self):
        with self.assertRaisesMessage(ConfigurationError, "detector"):
            parse_config(smoke_doc(detector="fixed"))

    def test_parse_overrides(self):
        overrides = parse_overrides(
            ["--stream.p_stay", "0.75", "--n_seeds=3", "--detector.tau", "auto"]
        )
        self.assertEqual(
            overrides, {"stream.p_stay": 0.75, "n_seeds": 3, "detector.tau": "auto"}
        )

    def test_override_needs_value(self):
        with self.assertRaises(ConfigurationError):
            parse_overrides(["--stream.p_stay"])
        with self.assertRaises(ConfigurationError):
            parse_overrides(["p_stay", "0.5"])

    def test_override_indexes_lists(self):
        doc = parse_config(smoke_doc()).to_dict()
        changed = apply_overrides(doc, {"stream.domains.2.prototype_radius": 2.5})
        self.assertEqual(changed["stream"]["domains"][2]["prototype_radius"], 2.5)
        self.assertEqual(doc["stream"]["domains"][2]["prototype_radius"], 1.5)

    def test_override_out_of_range(self):
        doc = parse_config(smoke_doc()).to_dict()
        with self.assertRaises(ConfigurationError):
            apply_overrides(doc, {"stream.domains.7.prototype_radius": 2.5})

    def test_load_config_applies_overrides(self):
        config = load_config(CONFIG_DIR / "smoke.json", {"stream.p_stay": 0.75})
        self.assertEqual(config.stream.p_stay, 0.75)

    def test_load_config_missing_file(self):
        with self.assertRaises(ConfigurationError):
            load_config(CONFIG_DIR / "missing.json")

    def test_shipped_default_config_is_valid(self):
        config = load_config(CONFIG_DIR / "default.json")
        self.assertEqual(config.net.n_classes, 5)
        self.assertEqual(len(config.modes), 5)


class RecordTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(tmp.__enter__())
        self.addCleanup(tmp.__exit__, None, None, None)

    def test_writer_renames_on_success(self):
        path = self.tmp / "run" / "episodes.csv"
        with EpisodeWriter(path) as sink:
            sink(None, outcome(0, True, True))
            sink(None, outcome(1, False, False))
        rows = read_episodes(path)
        self.assertEqual(len(rows), 2)
        self.assertEqual(rows[0]["truth_switched"], "1")
        self.assertEqual(rows[1]["branch_taken"], "no_switch_ind")
        self.assertFalse((self.tmp / "run" / "episodes.csv.partial").exists())

    def test_writer_keeps_partial_on_failure(self):
        path = self.tmp / "episodes.csv"
        with self.assertLogs("apps.harness.records", "WARNING"):
            with self.assertRaises(RuntimeError):
                with EpisodeWriter(path) as sink:
                    sink(None, outcome(0, True, True))
                    raise RuntimeError("boom")
        self.assertFalse(path.exists())
        self.assertEqual(len(read_episodes(self.tmp / "episodes.csv.partial")), 1)

    def test_json_nan_becomes_null(self):
        path = self.tmp / "out.json"
        write_json(path, {"precision": math.nan, "rows": [1.5, math.nan]})
        self.assertEqual(json.loads(path.read_text()), {"precision": None, "rows": [1.5, None]})


class PrecisionRecallTests(SimpleTestCase):
    truth = [True, False, False, True, False, True, False, False]

    def test_ground_truth_detector(self):
        self.assertEqual(precision_recall(record(self.truth, self.truth)), (1.0, 1.0))

    def test_always_firing_detector(self):
        precision, recall = precision_recall(record(self.truth, [True] * len(self.truth)))
        self.assertAlmostEqual(precision, 2 / 7)
        self.assertEqual(recall, 1.0)

    def test_never_firing_detector(self):
        with self.assertLogs("apps.harness.metrics", "WARNING"):
            precision, recall = precision_recall(record(self.truth, [False] * len(self.truth)))
        self.assertTrue(math.isnan(precision))
        self.assertEqual(recall, 0.0)

    def test_step_zero_is_ignored(self):
        truth = [True, False, True]
        detected = [False, False, True]
        self.assertEqual(precision_recall(record(truth, detected)), (1.0, 1.0))


class SummaryTests(SimpleTestCase):
    def setUp(self):
        self.scfg = StreamConfig(
            p_stay=0.8, eta_ind=0.5, domains=default_domains(4, 3), n_shot=3, n_query=3
        )

    def test_per_domain_accuracy(self):
        run = RunRecord(
            mode=LearnerMode.LEEDS,
            outcomes=[
                outcome(0, True, True, domain=0, acc=1.0),
                outcome(1, True, True, domain=1, acc=0.5),
                outcome(2, True, True, domain=2, acc=0.0),
                outcome(3, False, False, domain=2, acc=0.5),
            ],
        )
        metrics = seed_metrics(run, self.scfg)
        self.assertEqual(metrics["pretrain_acc"], 1.0)
        self.assertEqual(metrics["ood1_acc"], 0.5)
        self.assertEqual(metrics["ood2_acc"], 0.25)
        self.assertEqual(metrics["overall_acc"], 0.5)

    def test_means_and_population_std(self):
        rng = np.random.default_rng(0)
        keys = ["overall_acc", "pretrain_acc", "ood1_acc", "ood2_acc", "precision", "recall"]
        seeds = [{**{k: float(rng.random()) for k in keys}, "detected_ood": 3.0} for _ in range(5)]
        summary = summarize({"leeds": seeds}, self.scfg)
        row = summary.row("leeds")
        self.assertEqual(row["seed_count"], 5)
        for key in keys:
            values = [s[key] for s in seeds]
            self.assertAlmostEqual(row[f"{key}_mean"], sum(values) / 5, delta=1e-12)
            self.assertAlmostEqual(row[f"{key}_std"], float(np.std(values)), delta=1e-12)
        self.assertEqual(
            summary.columns[:4], ["mode", "seed_count", "overall_acc_mean", "overall_acc_std"]
        )
        with self.assertRaises(KeyError):
            summary.row("maml_reset")


@override_settings(CACHES=TEST_CACHES, LAB_SETTINGS=TEST_LAB_SETTINGS)
class ExperimentRunTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(tmp.__enter__())
        self.addCleanup(tmp.__exit__, None, None, None)
        self.service = ExperimentService()

    def config(self, name="out", **changes):
        return parse_config(smoke_doc(output_dir=str(self.tmp / name), **changes))

    def test_smoke_run(self):
        config = self.config()
        summary = self.service.run_experiment(config)

        run_dir = self.tmp / "out" / "maml_reset" / "seed0"
        self.assertEqual(len(read_episodes(run_dir / "episodes.csv")), 10)
        self.assertEqual(len(list((self.tmp / "out").rglob("episodes.csv"))), 1)
        header = json.loads((run_dir / "run.json").read_text())
        self.assertEqual(header["mode"], "maml_reset")
        self.assertEqual(header["detector"]["ell"], math.log(3))
        self.assertTrue((self.tmp / "out" / "summary.csv").exists())
        self.assertTrue((self.tmp / "out" / "summary.json").exists())
        self.assertEqual([row["mode"] for row in summary.rows], ["maml_reset"])

    def test_repeat_runs_are_byte_identical(self):
        self.service.run_experiment(self.config("first"))
        self.service.run_experiment(self.config("second"))
        for name in ("summary.csv", "maml_reset/seed0/episodes.csv"):
            first = (self.tmp / "first" / name).read_bytes()
            self.assertEqual(first, (self.tmp / "second" / name).read_bytes())

    def test_modes_share_the_stream(self):
        self.service.run_experiment(self.config(modes=["leeds", "maml_reset"], n_seeds=2))
        for seed in (0, 1):
            columns = ("step", "truth_switched", "truth_domain")
            leeds, reset = (
                read_episodes(self.tmp / "out" / mode / f"seed{seed}" / "episodes.csv")
                for mode in ("leeds", "maml_reset")
            )
            self.assertEqual(
                [[row[c] for c in columns] for row in leeds],
                [[row[c] for c in columns] for row in reset],
            )

    def test_oracle_detection_is_perfect(self):
        summary = self.service.run_experiment(self.config(modes=["leeds"], n_steps=60, oracle=True))
        row = summary.row("leeds")
        self.assertEqual(row["precision_mean"], 1.0)
        self.assertEqual(row["recall_mean"], 1.0)

    def test_fixed_detector_skips_calibration(self):
        config = self.config(detector={"ell": 0.7, "tau": -1.0})
        theta = self.service.pretrained(config, 0)
        with mock.patch("apps.harness.services.experiment_service.calibrate_tau") as calibrate:
            det = self.service.detector_for(config, theta, 0)
        calibrate.assert_not_called()
        self.assertEqual((det.ell, det.tau), (0.7, -1.0))

    def test_pretraining_is_cached_per_seed(self):
        config = self.config()
        first = self.service.pretrained(config, 0)
        with mock.patch("apps.harness.services.pretrain_cache.pretrain_maml") as pretrain:
            second = self.service.pretrained(config, 0)
        pretrain.assert_not_called()
        np.testing.assert_array_equal(first.values, second.values)

    def test_failed_run_keeps_partial_record(self):
        config = self.config(modes=["leeds"])
        target = "apps.harness.services.experiment_service.run_stream"
        with mock.patch(target, side_effect=NumericError("overflow", branch="switch")):
            with self.assertLogs("apps.harness.services.experiment_service", "ERROR"):
                with self.assertRaises(NumericError):
                    self.service.run_experiment(config)
        run_dir = self.tmp / "out" / "leeds" / "seed0"
        self.assertTrue((run_dir / "episodes.csv.partial").exists())
        self.assertFalse((run_dir / "episodes.csv").exists())
        self.assertFalse((self.tmp / "out" / "summary.csv").exists())


@override_settings(CACHES=TEST_CACHES, LAB_SETTINGS=TEST_LAB_SETTINGS)
class SweepTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(tmp.__enter__())
        self.addCleanup(tmp.__exit__, None, None, None)
        self.runner = ExperimentService()
        self.service = SweepService(self.runner)

    def test_invalid_value_becomes_error_row(self):
        config = parse_config(smoke_doc(output_dir=str(self.tmp)))
        with self.assertLogs("apps.harness.services.sweep_service", "WARNING"):
            rows = self.service.sweep(config, "p_stay", [0.7, 1.5])
        self.assertEqual(len(rows), 2)
        self.assertEqual(rows[0]["error"], "")
        self.assertIn("p_stay", rows[1]["error"])
        self.assertTrue((self.tmp / "sweep.csv").exists())
        self.assertTrue((self.tmp / "p_stay-0.7" / "summary.csv").exists())

    def test_single_value_matches_direct_run(self):
        config = parse_config(smoke_doc(output_dir=str(self.tmp / "sweep")))
        rows = self.service.sweep(config, "ell", [0.9])
        direct = self.runner.run_experiment(
            parse_config(
                smoke_doc(output_dir=str(self.tmp / "direct"), detector={"ell": 0.9})
            )
        )
        expected = direct.row("maml_reset")
        for key, value in expected.items():
            np.testing.assert_equal(rows[0][key], value)

    def test_unknown_parameter(self):
        config = parse_config(smoke_doc(output_dir=str(self.tmp)))
        with self.assertRaises(ConfigurationError):
            self.service.sweep(config, "alpha1", [0.1])

    def sweep_rows(self, param, values, **changes):
        config = parse_config(smoke_doc(output_dir=str(self.tmp), **changes))
        self.service.sweep(config, param, values)
        rows = read_episodes(self.tmp / "sweep.csv")
        self.assertEqual([row["error"] for row in rows], [""] * len(values))
        return {float(row["value"]): row for row in rows}

    def test_raising_ell_trades_recall_for_precision(self):
        ell = math.log(3)
        with self.assertLogs("apps.harness.metrics", "WARNING"):
            rows = self.sweep_rows(
                "ell", [0.01, ell, 50.0], modes=["leeds"], n_steps=300, detector={"tau": 0.0}
            )
        precision = {value: float(row["precision_mean"]) for value, row in rows.items()}
        recall = {value: float(row["recall_mean"]) for value, row in rows.items()}

        # firing on every step recovers the switch base rate
        self.assertGreaterEqual(recall[0.01], 0.95)
        self.assertAlmostEqual(precision[0.01], 0.2, delta=0.1)
        self.assertGreater(precision[ell], precision[0.01])

        self.assertLessEqual(recall[ell], recall[0.01])
        self.assertLessEqual(recall[50.0], recall[ell])
        self.assertEqual(recall[50.0], 0.0)
        self.assertTrue(math.isnan(precision[50.0]))

    @tag("slow")
    def test_accuracy_rises_with_p_stay(self):
        config = load_config(
            CONFIG_DIR / "default.json", {"output_dir": str(self.tmp), "modes": ["leeds"]}
        )
        self.service.sweep(config, "p_stay", [0.75, 0.9, 0.95])
        rows = read_episodes(self.tmp / "sweep.csv")
        accuracy = [float(row["overall_acc_mean"]) for row in rows]
        self.assertEqual([row["value"] for row in rows], ["0.75", "0.9", "0.95"])
        self.assertEqual(accuracy, sorted(accuracy))


@override_settings(CACHES=TEST_CACHES)
class CommandTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(tmp.__enter__())
        self.addCleanup(tmp.__exit__, None, None, None)
        self.config_path = str(CONFIG_DIR / "smoke.json")

    def call(self, *args):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO())
        return out.getvalue()

    def test_run(self):
        output = self.call("run", self.config_path, "--output_dir", str(self.tmp))
        self.assertIn("maml_reset", output)
        self.assertTrue((self.tmp / "summary.csv").exists())

    def test_invalid_config_exits_with_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("run", self.config_path, "--stream.p_stay", "2")
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("stream", str(ctx.exception))

    def test_runtime_failure_exits_with_1(self):
        target = "apps.harness.services.experiment_service.run_stream"
        with mock.patch(target, side_effect=NumericError("overflow")):
            with self.assertLogs("apps.harness.services.experiment_service", "ERROR"):
                with self.assertRaises(CommandError) as ctx:
                    self.call("run", self.config_path, "--output_dir", str(self.tmp))
        self.assertEqual(ctx.exception.returncode, 1)

    def test_sweep_options_after_config(self):
        self.call(
            "sweep",
            self.config_path,
            "--param",
            "p_stay",
            "--values",
            "0.7,0.85",
            "--output_dir",
            str(self.tmp),
        )
        rows = read_episodes(self.tmp / "sweep.csv")
        self.assertEqual([row["value"] for row in rows], ["0.7", "0.85"])

    def test_sweep_requires_param(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("sweep", self.config_path, "--output_dir", str(self.tmp))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_calibrate(self):
        output = self.call("calibrate", self.config_path)
        self.assertIn(f"ell={math.log(3):.6f}", output)
        self.assertIn("tau=", output)

    def theory(self):
        self.call("theory", "--skip-neural", self.config_path, "--output_dir", str(self.tmp))
        return json.loads((self.tmp / "theory_report.json").read_text())

    def test_theory_writes_report(self):
        with (
            mock.patch.object(theory_report_service, "tar_checks", return_value=[]),
            mock.patch.object(theory_report_service, "tradeoff_checks", return_value=[]),
        ):
            report = self.theory()
        names = [check["name"] for check in report["checks"]]
        self.assertEqual(
            names, ["contraction_closed_form", "contraction_chaining", "quadratic_smoothness"]
        )
        self.assertTrue(report["passed"])
        self.assertTrue(all(check["passed"] for check in report["checks"]))

    def test_failed_theory_check_exits_with_1(self):
        checks = [
            TheoryCheck("contraction_closed_form", 0.0, 1e-8, True),
            TheoryCheck("tradeoff", math.nan, math.nan, False, "regime not separated"),
        ]
        with mock.patch.object(theory_report_service, "run_theory_checks", return_value=checks):
            with self.assertRaises(CommandError) as ctx:
                self.theory()
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("tradeoff", str(ctx.exception))
        report = json.loads((self.tmp / "theory_report.json").read_text())
        self.assertFalse(report["passed"])
        self.assertIsNone(report["checks"][1]["measured"])

    @tag("slow")
    def test_quadratic_theory_checks_pass(self):
        report = self.theory()
        names = {check["name"] for check in report["checks"]}
        self.assertIn("tradeoff_tar_increases_with_spread", names)
        self.assertFalse(any(name.startswith("hoeffding") for name in names))
        for check in report["checks"]:
            self.assertTrue(check["passed"], check)
        self.assertTrue(report["passed"])


ACCEPTANCE_MODES = ["leeds", "leeds_no_da", "maml_reset", "meta_ogd"]


@tag("slow")
class AcceptanceTests(SimpleTestCase):
    """Default synthetic stream at full length; minutes per test."""

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(tmp.__enter__())
        self.addCleanup(tmp.__exit__, None, None, None)

    def load(self, **overrides):
        return load_config(
            CONFIG_DIR / "default.json", {"output_dir": str(self.tmp), **overrides}
        )

    def test_switch_detection_quality(self):
        config = self.load(modes=["leeds"], n_seeds=1)
        row = ExperimentService().run_experiment(config).row("leeds")
        self.assertGreaterEqual(row["precision_mean"], 0.95)
        self.assertGreaterEqual(row["recall_mean"], 0.95)

    def test_directional_orderings(self):
        service = ExperimentService()
        summary = service.run_experiment(self.load(modes=ACCEPTANCE_MODES))
        leeds = summary.row("leeds")
        self.assertGreater(leeds["overall_acc_mean"], summary.row("maml_reset")["overall_acc_mean"])
        self.assertGreater(leeds["overall_acc_mean"], summary.row("meta_ogd")["overall_acc_mean"])

        no_da = summary.row("leeds_no_da")
        for key in ("ood1_acc_mean", "ood2_acc_mean"):
            self.assertGreaterEqual(leeds[key] - no_da[key], 0.02)

        low_p = service.run_experiment(
            self.load(
                **{"modes": ["leeds"], "stream.p_stay": 0.75, "output_dir": str(self.tmp / "p")}
            )
        )
        self.assertGreaterEqual(
            leeds["overall_acc_mean"], low_p.row("leeds")["overall_acc_mean"]
        )
