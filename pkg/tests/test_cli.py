import io
import json
import os
import tempfile
import unittest
from unittest.mock import Mock, patch

import pandas as pd

from config import TestConfig
from fbsdej.cli import COMMANDS, RESOLVED_NAME, _close_audit, main, parse_config
from fbsdej.deep_solver import TrainConfig, train
from fbsdej.exceptions import ConfigError, DivergenceError
from fbsdej.logger import record_log
from fbsdej.models import Log, Run, open_audit
from fbsdej.problem import constant_problem


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.output_dir = os.path.join(self.tmpdir.name, "out")

    def tearDown(self):
        self.tmpdir.cleanup()

    def write_config(self, text):
        path = os.path.join(self.tmpdir.name, "run.cfg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def invoke(self, *argv):
        """(exit code, stderr text) of one CLI call under TestConfig."""
        stderr = io.StringIO()
        with patch("sys.stderr", stderr):
            code = main(list(argv), defaults=TestConfig)
        return code, stderr.getvalue()

    def error_payload(self, stderr):
        return json.loads(stderr.strip().splitlines()[-1])


class TestConfigResolution(CliTestCase):

    def test_defaults_come_from_config_class(self):
        config = parse_config(["train"], defaults=TestConfig)
        self.assertEqual(config["grid.n"], 5)
        self.assertEqual(config["train.iterations"], 20)
        self.assertEqual(config["problem.name"], "example1")
        self.assertIn("grid.n = 5  # default", config.echo())

    def test_flag_beats_file_beats_default(self):
        path = self.write_config("# test run\ntrain.iterations = 7\ngrid.n = 8\n\nseed = 3  # trailing comment\n")
        config = parse_config(["train", "--config", path, "--n", "6", "--set", "seed=4"], defaults=TestConfig)
        self.assertEqual(config["train.iterations"], 7)
        self.assertEqual(config["grid.n"], 6)
        self.assertEqual(config.seed, 4)
        echo = config.echo()
        self.assertIn(f"train.iterations = 7  # file {path}:2", echo)
        self.assertIn("grid.n = 6  # flag", echo)
        self.assertIn("seed = 4  # --set", echo)

    def test_duplicate_key_reports_line(self):
        path = self.write_config("grid.n = 8\ntrain.lr = 0.01\ngrid.n = 9\n")
        code, stderr = self.invoke("train", "--config", path, "--output-dir", self.output_dir)
        self.assertEqual(code, 2)
        payload = self.error_payload(stderr)
        self.assertEqual((payload["error"], payload["key"], payload["line"]), ("config", "grid.n", 3))
        self.assertFalse(os.path.exists(self.output_dir))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(["train", "--set", "train.momentum=0.9"], defaults=TestConfig)
        self.assertEqual(ctx.exception.key, "train.momentum")
        path = self.write_config("problem.name = example1\ngrid.size = 4\n")
        with self.assertRaises(ConfigError) as ctx:
            parse_config(["train", "--config", path], defaults=TestConfig)
        self.assertEqual((ctx.exception.key, ctx.exception.line), ("grid.size", 2))

    def test_invalid_values(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(["train", "--batch", "1"], defaults=TestConfig)
        self.assertEqual(ctx.exception.key, "train.batch_size")
        with self.assertRaises(ConfigError):
            parse_config(["train", "--optimizer", "rmsprop"], defaults=TestConfig)
        with self.assertRaises(ConfigError):
            parse_config(["train", "--iters", "many"], defaults=TestConfig)

    def test_rate_levels_must_be_distinct(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(["rate", "--n-list", "4,4,8"], defaults=TestConfig)
        self.assertEqual(ctx.exception.key, "grid.n_list")
        config = parse_config(["rate", "--n-list", "4,8,16", "--mode", "oracle_policy"], defaults=TestConfig)
        self.assertEqual(config["grid.n_list"], "4,8,16")

    def test_missing_config_file(self):
        code, stderr = self.invoke("verify", "--config", os.path.join(self.tmpdir.name, "absent.cfg"))
        self.assertEqual(code, 2)
        self.assertEqual(self.error_payload(stderr)["error"], "config")


class TestSubcommands(CliTestCase):

    def test_verify_constant_problem(self):
        code, _ = self.invoke("verify", "--problem", "constant", "--output-dir", self.output_dir)
        self.assertEqual(code, 0)
        table = pd.read_csv(os.path.join(self.output_dir, "verify.csv"))
        self.assertTrue(table["passed"].all())
        with open(os.path.join(self.output_dir, RESOLVED_NAME), encoding="utf-8") as fh:
            self.assertIn("problem.name = constant  # flag", fh.read())

    def test_verify_failure_exit_code(self):
        failing = pd.DataFrame([("gradient_check", 1.0, 1e-5, False)],
                               columns=["check", "value", "tolerance", "passed"])
        with patch("fbsdej.cli.self_checks", return_value=failing):
            code, _ = self.invoke("verify", "--output-dir", self.output_dir)
        self.assertEqual(code, 1)

    def test_train_then_errors_from_checkpoint(self):
        code, _ = self.invoke("train", "--problem", "constant", "--output-dir", self.output_dir, "--runs", "2")
        self.assertEqual(code, 0)
        for name in ("checkpoints.csv", "runs.csv", "training_loss.csv", "params_run0.ckpt", "params_run1.ckpt"):
            self.assertTrue(os.path.isfile(os.path.join(self.output_dir, name)), name)
        checkpoints = pd.read_csv(os.path.join(self.output_dir, "checkpoints.csv"))
        self.assertEqual(checkpoints["iteration"].tolist(), [0, 5, 10, 15, 20])

        errors_dir = os.path.join(self.tmpdir.name, "errors")
        params = os.path.join(self.output_dir, "params_run0.ckpt")
        code, _ = self.invoke("errors", "--problem", "constant", "--source", "params", "--params", params,
                              "--output-dir", errors_dir)
        self.assertEqual(code, 0)
        report = pd.read_csv(os.path.join(errors_dir, "error_report.csv"))
        self.assertIn("total", report["metric"].tolist())

    def test_checkpoint_must_match_grid(self):
        code, _ = self.invoke("train", "--problem", "constant", "--output-dir", self.output_dir, "--iters", "0")
        self.assertEqual(code, 0)
        params = os.path.join(self.output_dir, "params_run0.ckpt")
        code, stderr = self.invoke("errors", "--problem", "constant", "--source", "params", "--params", params,
                                   "--n", "7", "--output-dir", self.output_dir)
        self.assertEqual(code, 2)
        self.assertEqual(self.error_payload(stderr)["key"], "errors.params")

    def test_missing_params_file(self):
        code, stderr = self.invoke("errors", "--source", "params", "--params",
                                   os.path.join(self.tmpdir.name, "none.ckpt"), "--output-dir", self.output_dir)
        self.assertEqual(code, 2)
        self.assertEqual(self.error_payload(stderr)["key"], "errors.params")

    def test_markovian_writes_sweeps(self):
        code, _ = self.invoke("markovian", "--problem", "constant", "--output-dir", self.output_dir)
        self.assertEqual(code, 0)
        sweeps = pd.read_csv(os.path.join(self.output_dir, "sweeps.csv"))
        self.assertEqual(list(sweeps.columns), ["m", "sup_delta", "u_at_xi", "condition_number_max"])
        self.assertAlmostEqual(sweeps["u_at_xi"].iloc[-1], 2.0, places=6)

    def test_rate_writes_report(self):
        code, _ = self.invoke("rate", "--problem", "constant", "--samples", "20", "--output-dir", self.output_dir)
        self.assertEqual(code, 0)
        report = pd.read_csv(os.path.join(self.output_dir, "rate_report.csv"))
        self.assertEqual(report["level"].tolist()[:3], ["N=4", "N=8", "N=16"])

    def test_divergence_is_reported_as_json(self):
        with patch("fbsdej.cli.self_checks", side_effect=DivergenceError("integrand blew up", step=3)):
            code, stderr = self.invoke("verify", "--output-dir", self.output_dir)
        self.assertEqual(code, 3)
        payload = self.error_payload(stderr)
        self.assertEqual((payload["error"], payload["step"]), ("divergence", 3))

    def test_setup_value_errors_become_config_errors(self):
        code, stderr = self.invoke("train", "--problem", "example1", "--d", "3", "--output-dir", self.output_dir)
        self.assertEqual(code, 2)
        self.assertEqual(self.error_payload(stderr)["error"], "config")

    def test_divergent_training_keeps_partial_report(self):
        partial = train(TrainConfig(N=3, iterations=2, batch_size=8, eval_samples=8, checkpoint_every=1),
                        constant_problem())
        failure = DivergenceError("Training diverged at iteration 2 of run 0", step=1, report=partial)
        with patch("fbsdej.cli.train", side_effect=failure):
            code, stderr = self.invoke("train", "--problem", "constant", "--output-dir", self.output_dir)
        self.assertEqual(code, 3)
        self.assertEqual(self.error_payload(stderr)["error"], "divergence")
        checkpoints = pd.read_csv(os.path.join(self.output_dir, "checkpoints.csv"))
        self.assertEqual(checkpoints["iteration"].tolist(), [0, 1, 2])

    def test_too_few_regression_samples(self):
        """20 paths pass the form but the degree-4 regression needs 50."""
        with patch("fbsdej.cli._close_audit", wraps=_close_audit) as close:
            code, stderr = self.invoke("markovian", "--problem", "example1", "--samples", "20",
                                       "--output-dir", self.output_dir)
        self.assertEqual(code, 2)
        payload = self.error_payload(stderr)
        self.assertEqual(payload["error"], "config")
        self.assertIn("needs at least 50 samples", payload["message"])
        self.assertEqual(close.call_args.args[2:], ("failed", 2))

    def test_unexpected_errors_close_audit_entry(self):
        with patch("fbsdej.cli._close_audit", wraps=_close_audit) as close, \
                patch.dict(COMMANDS, {"verify": Mock(side_effect=RuntimeError("disk full"))}):
            with self.assertRaises(RuntimeError):
                self.invoke("verify", "--output-dir", self.output_dir)
        self.assertEqual(close.call_args.args[2:], ("failed", 1))


class TestAuditTrail(unittest.TestCase):

    def setUp(self):
        self.session = open_audit("sqlite:///:memory:")

    def tearDown(self):
        self.session.close()

    def test_record_log_attaches_to_run(self):
        entry = Run(subcommand="verify", problem="example1", seed="0", output_dir="out")
        self.session.add(entry)
        self.session.commit()
        record_log(self.session, entry, "start", "{}")
        record_log(self.session, entry, "finish", "exit code 0")
        self.assertEqual([log.action for log in entry.logs.order_by(Log.id)], ["start", "finish"])
        self.assertEqual(entry.status, "running")

    def test_record_log_without_session_is_silent(self):
        record_log(None, None, "start")
        self.assertEqual(self.session.query(Log).count(), 0)


if __name__ == '__main__':
    unittest.main()
