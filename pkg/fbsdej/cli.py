"""Command-line runner: `python run.py <subcommand> [flags]`.

Config files hold one `key = value` per line with dotted keys
(`train.iterations = 4000`); `#` starts a comment and blank lines are
skipped. Values resolve as Config defaults < config file < --set < flags.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from config import Config
from fbsdej import configure_logging
from fbsdej.analysis import measure_errors, rate_study, self_checks
from fbsdej.deep_solver import OraclePolicy, TrainConfig, train
from fbsdej.exceptions import ConfigError, DivergenceError, SolverError
from fbsdej.forms import CONFIG_KEYS, FlatKeys, RunConfigForm, field_name, parse_int_list
from fbsdej.logger import record_log
from fbsdej.markovian import RegressionBasis, run_markovian, run_markovian_quadrature
from fbsdej.models import Run, open_audit
from fbsdej.net import load_params
from fbsdej.problem import build_problem
from fbsdej.reports import write_error_report, write_rate_report, write_sweeps, write_training, write_verify

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "markovian", "rate", "verify", "errors")
RESOLVED_NAME = "config_resolved.txt"

# flag dest -> config key, shared by every subcommand
COMMON_FLAGS = {
    "output_dir": "output_dir", "seed": "seed", "problem": "problem.name", "d": "problem.d", "t": "problem.t",
    "delta": "problem.delta", "mark_mode": "problem.mark_mode", "n": "grid.n", "runs": "runs",
    "determinism": "determinism",
}
SUBCOMMAND_FLAGS = {
    "train": {"iters": "train.iterations", "batch": "train.batch_size", "lr": "train.lr",
              "optimizer": "train.optimizer", "checkpoint_every": "train.checkpoint_every",
              "activation": "train.activation", "network": "train.network_mode", "driver": "train.driver_mode",
              "hidden": "train.hidden", "samples": "train.eval_samples"},
    "markovian": {"scheme": "markovian.scheme", "basis": "markovian.basis", "degree": "markovian.degree",
                  "max_sweeps": "markovian.max_sweeps", "tol": "markovian.tol", "samples": "markovian.samples"},
    "rate": {"n_list": "grid.n_list", "mode": "rate.mode", "samples": "rate.samples"},
    "verify": {},
    "errors": {"source": "errors.source", "params": "errors.params", "samples": "errors.samples"},
}


def default_value(key, defaults=Config):
    return getattr(defaults, key.upper().replace(".", "_"))


# ─── Config resolution ──────────────────────────────────────────────────────

@dataclass
class RunConfig:
    """Fully resolved run settings with the origin of every value."""

    subcommand: str
    settings: dict
    sources: dict = field(default_factory=dict)
    audit_uri: Optional[str] = None
    log_level: str = "INFO"

    def __getitem__(self, key):
        return self.settings[key]

    @property
    def output_dir(self) -> str:
        return self.settings["output_dir"]

    @property
    def seed(self) -> int:
        return self.settings["seed"]

    @property
    def runs(self) -> int:
        return self.settings["runs"]

    @property
    def problem_name(self) -> str:
        return self.settings["problem.name"]

    def build_problem(self):
        return build_problem(self["problem.name"], d=self["problem.d"], terminal_time=self["problem.t"],
                             delta=self["problem.delta"], quad_order=self["problem.quad_order"],
                             mark_mode=self["problem.mark_mode"])

    def train_config(self) -> TrainConfig:
        hidden = tuple(parse_int_list(self["train.hidden"])) or None
        return TrainConfig(
            problem=self["problem.name"], d=self["problem.d"], T=self["problem.t"], delta=self["problem.delta"],
            mark_mode=self["problem.mark_mode"], quad_order=self["problem.quad_order"], N=self["grid.n"],
            batch_size=self["train.batch_size"], iterations=self["train.iterations"], lr=self["train.lr"],
            beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"],
            optimizer=self["train.optimizer"], lr_decay=self["train.lr_decay"],
            lr_decay_every=self["train.lr_decay_every"], seed=self.seed,
            checkpoint_every=self["train.checkpoint_every"], runs=self.runs, hidden=hidden,
            activation=self["train.activation"], network_mode=self["train.network_mode"],
            y0_init=self["train.y0_init"], driver_mode=self["train.driver_mode"],
            implicit_iterations=self["train.implicit_iterations"], eval_samples=self["train.eval_samples"],
            noise_mode=self["determinism"])

    def basis(self) -> RegressionBasis:
        return RegressionBasis(kind=self["markovian.basis"], degree=self["markovian.degree"],
                               knots=self["markovian.knots"])

    def echo(self) -> str:
        lines = [f"# resolved settings for '{self.subcommand}'"]
        for key in CONFIG_KEYS:
            value = self.settings[key]
            text = "" if value is None else str(value)
            lines.append(f"{key} = {text}  # {self.sources.get(key, 'default')}")
        return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict:
    """key -> (raw value, line number) for a flat config file."""
    if not os.path.isfile(path):
        raise ConfigError(f"Config file {path} does not exist")
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Expected 'key = value' in {path}", line=number)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"Unknown config key in {path}", key=key, line=number)
            if key in entries:
                raise ConfigError(f"Duplicate config key in {path} (first set on line {entries[key][1]})",
                                  key=key, line=number)
            entries[key] = (value, number)
    return entries


def _parse_assignment(text):
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got '{text}'")
    key, value = (part.strip() for part in text.split("=", 1))
    if key not in CONFIG_KEYS:
        raise ConfigError("Unknown config key in --set", key=key)
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsdej", description="Deep and Markovian solvers for FBSDEs with jumps")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name, allow_abbrev=False)
        sub.add_argument("--config", help="flat key = value config file")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sub.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for dest in list(COMMON_FLAGS) + list(SUBCOMMAND_FLAGS[name]):
            sub.add_argument("--" + dest.replace("_", "-"), dest=dest, default=None)
    return parser


def parse_config(argv=None, defaults=Config) -> RunConfig:
    """Resolve and validate settings for one invocation, before any compute."""
    parser = build_parser()
    args = parser.parse_args(argv)

    raw, sources, lines = {}, {}, {}
    if args.config:
        for key, (value, number) in parse_config_file(args.config).items():
            raw[key], sources[key], lines[key] = value, f"file {args.config}:{number}", number
    for assignment in args.set:
        key, value = _parse_assignment(assignment)
        raw[key], sources[key] = value, "--set"
        lines.pop(key, None)
    for dest, key in {**COMMON_FLAGS, **SUBCOMMAND_FLAGS[args.subcommand]}.items():
        value = getattr(args, dest)
        if value is not None:
            raw[key], sources[key] = value, "flag"
            lines.pop(key, None)

    form = RunConfigForm(formdata=FlatKeys({field_name(k): v for k, v in raw.items() if v != ""}))
    if not form.validate():
        for key in CONFIG_KEYS:
            errors = form[field_name(key)].errors
            if errors:
                raise ConfigError(f"Invalid value '{raw.get(key)}': {errors[0]}", key=key, line=lines.get(key))

    settings = {}
    for key in CONFIG_KEYS:
        data = form[field_name(key)].data
        settings[key] = data if key in raw and raw[key] != "" else default_value(key, defaults)
    config = RunConfig(subcommand=args.subcommand, settings=settings, sources=sources,
                       audit_uri=getattr(defaults, "AUDIT_DATABASE_URI", None), log_level=args.log_level)
    return config


# ─── Subcommands ────────────────────────────────────────────────────────────

def _setup(build):
    """Run `build` and report bad settings as config errors."""
    try:
        return build()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e))


def run_train(config: RunConfig) -> int:
    train_config = _setup(config.train_config)
    spec = _setup(train_config.build_problem)
    try:
        report = train(train_config, spec)
    except DivergenceError as error:
        if error.report is not None:
            write_training(error.report, config.output_dir)
            logger.error(f"Partial training report written to {config.output_dir}")
        raise
    write_training(report, config.output_dir)
    final = report.final
    logger.info(f"Final: loss {final['loss_mean']:.5f}, y0 {final['y0_mean']:.5f} +/- {final['y0_std']:.5f}")
    return 0


def run_markovian_command(config: RunConfig) -> int:
    spec = _setup(config.build_problem)
    grid = _setup(lambda: spec.grid(config["grid.n"]))
    if config["markovian.scheme"] == "quadrature":
        solution = _setup(lambda: run_markovian_quadrature(spec, grid, max_sweeps=config["markovian.max_sweeps"],
                                                           tol=config["markovian.tol"]))
        write_sweeps(solution.history_frame(), config.output_dir)
        return 0
    basis = _setup(config.basis)
    state = _setup(lambda: run_markovian(spec, grid, config["markovian.samples"], basis,
                                         max_sweeps=config["markovian.max_sweeps"], tol=config["markovian.tol"],
                                         seed=config.seed, eval_points=config["markovian.eval_points"],
                                         noise_mode=config["determinism"]))
    write_sweeps(state.history_frame(), config.output_dir)
    return 0


def run_rate(config: RunConfig) -> int:
    spec = _setup(config.build_problem)
    report = _setup(lambda: rate_study(spec, parse_int_list(config["grid.n_list"]), config["rate.samples"],
                                       mode=config["rate.mode"], seed=config.seed,
                                       noise_mode=config["determinism"]))
    write_rate_report(report, config.output_dir)
    return 0


def run_verify(config: RunConfig) -> int:
    spec = _setup(config.build_problem)
    table = self_checks(spec, seed=config.seed)
    write_verify(table, config.output_dir)
    failed = table.loc[~table["passed"], "check"].tolist()
    if failed:
        logger.error(f"Self-checks failed: {', '.join(failed)}")
        return 1
    return 0


def run_errors(config: RunConfig) -> int:
    spec = _setup(config.build_problem)
    grid = _setup(lambda: spec.grid(config["grid.n"]))
    source_kind = config["errors.source"]
    if source_kind == "oracle":
        source = _setup(lambda: OraclePolicy(spec))
    elif source_kind == "params":
        if not config["errors.params"]:
            raise ConfigError("errors.source = params needs errors.params", key="errors.params")
        if not os.path.isfile(config["errors.params"]):
            raise ConfigError(f"Checkpoint {config['errors.params']} does not exist", key="errors.params")
        source = _setup(lambda: load_params(config["errors.params"]))
        if source.steps != grid.steps or source.dim != spec.d:
            raise ConfigError(f"Checkpoint was trained with d={source.dim}, N={source.steps}", key="errors.params")
    elif source_kind == "markovian":
        basis = _setup(config.basis)
        source = _setup(lambda: run_markovian(spec, grid, config["markovian.samples"], basis,
                                              max_sweeps=config["markovian.max_sweeps"], tol=config["markovian.tol"],
                                              seed=config.seed, noise_mode=config["determinism"]))
    else:
        source = _setup(lambda: run_markovian_quadrature(spec, grid, max_sweeps=config["markovian.max_sweeps"],
                                                         tol=config["markovian.tol"]))
    report = _setup(lambda: measure_errors(source, spec, grid, config["errors.samples"],
                                           seed=config.seed, mode=config["determinism"]))
    write_error_report(report, config.output_dir)
    return 0


COMMANDS = {
    "train": run_train,
    "markovian": run_markovian_command,
    "rate": run_rate,
    "verify": run_verify,
    "errors": run_errors,
}


def _open_audit(config: RunConfig):
    uri = config.audit_uri or "sqlite:///" + os.path.join(os.path.abspath(config.output_dir), "audit.db")
    try:
        session = open_audit(uri)
        entry = Run(subcommand=config.subcommand, problem=config.problem_name, seed=str(config.seed),
                    output_dir=config.output_dir)
        session.add(entry)
        session.commit()
        return session, entry
    except Exception as e:
        logger.warning(f"Audit database unavailable ({uri}): {e}")
        return None, None


def _close_audit(session, entry, status, exit_code):
    if session is None:
        return
    try:
        entry.status, entry.exit_code, entry.finished = status, exit_code, datetime.utcnow()
        session.commit()
    except Exception as e:
        logger.warning(f"Could not close audit entry: {e}")
    finally:
        session.close()


def run(config: RunConfig) -> int:
    """Execute one subcommand, writing its artifacts under output_dir. Returns the exit code."""
    os.makedirs(config.output_dir, exist_ok=True)
    with open(os.path.join(config.output_dir, RESOLVED_NAME), "w", encoding="utf-8") as fh:
        fh.write(config.echo())

    session, entry = _open_audit(config)
    record_log(session, entry, "start", json.dumps(config.settings, default=str))
    try:
        code = COMMANDS[config.subcommand](config)
    except SolverError as e:
        record_log(session, entry, e.kind, str(e))
        _close_audit(session, entry, "failed", e.exit_code)
        raise
    except ValueError as e:
        error = ConfigError(str(e))
        record_log(session, entry, error.kind, str(e))
        _close_audit(session, entry, "failed", error.exit_code)
        raise error from e
    except BaseException as e:
        record_log(session, entry, "crash", repr(e))
        _close_audit(session, entry, "failed", 1)
        raise
    record_log(session, entry, "finish", f"exit code {code}")
    _close_audit(session, entry, "ok" if code == 0 else "failed", code)
    return code


def main(argv=None, defaults=Config) -> int:
    try:
        config = parse_config(argv, defaults)
        configure_logging(config.log_level)
        logger.info(f"{config.subcommand}: problem {config.problem_name}, seed {config.seed}, "
                    f"output {config.output_dir}")
        return run(config)
    except SolverError as e:
        sys.stderr.write(json.dumps(e.to_dict()) + "\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
