"""
Command-line entry point
Subcommands: fetch, list-passes, run, localize, report.
Exit status: 0 all outcomes clean, 2 faults detected (reports written),
1 framework or usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from src.config import Config, reload_config
from src.core_types import BackendSpec, RunConfig
from src.errors import DifftoxError
from src.localizer import Backends, evaluate, localize
from src.mock_backends import FaultScenario, make_mock_backend
from src.optimizer_backend import AdapterOptimizerBackend, OptimizeMode
from src.orchestrator import (
    ModelCache, check_pass_subset, fetch_hub_model, load_dataset, load_run_config, resolve_model,
)
from src.reporting import build_run_report, emit_fault_report, emit_run_report, write_summary
from src.runner import AdapterRunnerBackend

logger = logging.getLogger(__name__)

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_FAULTS = 2

ADAPTER_DIR = Path(__file__).resolve().parent.parent / "adapters"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="difftox", description="Differential testing and fault localization for graph optimizers")
    parser.add_argument("--settings", help="framework settings file (default: settings.json)")
    parser.add_argument("--workers", type=int, help="parallel workers for chunks and pass sweeps")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fetch = sub.add_parser("fetch", help="fetch a hub model into the local cache")
    fetch.add_argument("model")
    fetch.add_argument("--opset", type=int)

    listing = sub.add_parser("list-passes", help="list the optimizer's passes")
    listing.add_argument("--mock-scenario", help="use mock backends driven by this scenario file")

    run = sub.add_parser("run", help="optimize, run and compare every configured model")
    run.add_argument("--config", required=True)
    run.add_argument("--chunks", type=int)
    modes = run.add_mutually_exclusive_group()
    modes.add_argument("--passes", help="comma-separated pass list")
    modes.add_argument("--default", action="store_true", help="apply the default bundle")
    run.add_argument("--no-localize", action="store_true", help="skip the per-pass sweep on faults")
    run.add_argument("--mock-scenario")

    loc = sub.add_parser("localize", help="sweep every pass for one model")
    loc.add_argument("--config", required=True)
    loc.add_argument("--model", required=True)
    loc.add_argument("--chunks", type=int)
    loc.add_argument("--mock-scenario")

    report = sub.add_parser("report", help="summarize reports")
    report.add_argument("--summary", required=True, metavar="DIR")
    return parser


def _adapter_command(configured: List[str], script: str) -> List[str]:
    return configured or [sys.executable, str(ADAPTER_DIR / script)]


def build_backends(config: Config, optimizer_spec: Optional[BackendSpec] = None,
                   runner_spec: Optional[BackendSpec] = None, mock_scenario: Optional[str] = None) -> Backends:
    """
    Backends for a run

    A mock scenario (flag, or backend id "mock" with a "scenario" setting)
    replaces both adapters; otherwise adapter commands come from the backend
    settings, then settings.json, then the bundled reference adapters.
    """
    optimizer_spec = optimizer_spec or BackendSpec("adapter")
    runner_spec = runner_spec or BackendSpec("adapter")
    if mock_scenario is None and "mock" in (optimizer_spec.id, runner_spec.id):
        spec = optimizer_spec if optimizer_spec.id == "mock" else runner_spec
        scenario = spec.settings.get("scenario", {})
        if isinstance(scenario, str):
            mock_scenario = scenario
        else:
            optimizer, runner = make_mock_backend(FaultScenario.from_dict(scenario))
            return Backends(optimizer, runner)
    if mock_scenario is not None:
        optimizer, runner = make_mock_backend(FaultScenario.load(mock_scenario))
        return Backends(optimizer, runner)
    optimizer = AdapterOptimizerBackend(
        optimizer_spec.settings.get("command") or _adapter_command(config.get_optimizer_command(),
                                                                   "onnx_optimizer_adapter.py"),
        timeout=float(optimizer_spec.settings.get("timeout", config.get_optimizer_timeout())),
    )
    runner = AdapterRunnerBackend(
        runner_spec.settings.get("command") or _adapter_command(config.get_runner_command(),
                                                                "onnxruntime_runner_adapter.py"),
        timeout=float(runner_spec.settings.get("timeout", config.get_runner_timeout())),
    )
    return Backends(optimizer, runner)


def _workers(args, config: Config) -> int:
    return max(1, args.workers or config.get_workers())


def cmd_fetch(args, config: Config) -> int:
    artifact = fetch_hub_model(args.model, args.opset, hub_base=config.get_hub_base_url(),
                               cache=ModelCache(config.get_cache_dir()))
    print(f"{artifact.path}\t{artifact.digest}")
    return EXIT_CLEAN


def cmd_list_passes(args, config: Config) -> int:
    backends = build_backends(config, mock_scenario=args.mock_scenario)
    for spec in backends.optimizer.list_passes():
        tags = (["default"] if spec.in_default_bundle else []) + (["unstable"] if spec.known_unstable else [])
        print(" ".join([spec.name] + tags))
    return EXIT_CLEAN


def _select_mode(args, run_config: RunConfig, registry) -> OptimizeMode:
    if getattr(args, "passes", None):
        names = [p.strip() for p in args.passes.split(",") if p.strip()]
        registry.check_names(names)
        return OptimizeMode.pass_list(names)
    if getattr(args, "default", False) or run_config.pass_subset is None:
        return OptimizeMode.default_bundle()
    return OptimizeMode.pass_list(run_config.pass_subset)


def _prepare(args, config: Config):
    run_config = load_run_config(args.config)
    backends = build_backends(config, run_config.optimizer_backend, run_config.runner_backend,
                              args.mock_scenario)
    registry = backends.optimizer.list_passes()
    check_pass_subset(run_config, registry.names())
    dataset = load_dataset(run_config.dataset)
    chunks = args.chunks if args.chunks is not None else run_config.chunks
    if chunks < 1:
        raise UsageError(f"--chunks must be >= 1, got {chunks}")
    return run_config, backends, registry, dataset, chunks


def cmd_run(args, config: Config) -> int:
    run_config, backends, registry, dataset, chunks = _prepare(args, config)
    mode = _select_mode(args, run_config, registry)
    workers = _workers(args, config)
    cache = ModelCache(config.get_cache_dir())
    faults = False
    incomplete = False
    for model in run_config.models:
        original = resolve_model(model, cache=cache, hub_base=config.get_hub_base_url())
        evaluation = evaluate(model, original, dataset, backends, mode, run_config.output_dir,
                              chunks=chunks, workers=workers)
        report = build_run_report(model, evaluation, backends.optimizer.id, backends.runner.id)
        path = emit_run_report(report, run_config.output_dir)
        outcome = evaluation.outcome
        if outcome.is_clean:
            logger.info(f"✅ {model.id}: CLEAN under {mode.label}")
            continue
        faults = True
        logger.warning(f"⚠️ {model.id}: {outcome.effective.value} under {mode.label}")
        if args.no_localize:
            continue
        fault_report = localize(model, original, dataset, backends, registry, run_config.output_dir,
                                trigger=evaluation, chunks=chunks, workers=workers,
                                sample_size=config.get_sample_size(), seed=config.get_seed())
        emit_fault_report(fault_report, run_config.output_dir, run_id=path.parent.name)
        if fault_report.incomplete:
            logger.error(f"❌ Sweep for {model.id} incomplete at pass index {fault_report.failed_pass_index}")
            incomplete = True
    if incomplete:
        return EXIT_ERROR
    return EXIT_FAULTS if faults else EXIT_CLEAN


def cmd_localize(args, config: Config) -> int:
    run_config, backends, registry, dataset, chunks = _prepare(args, config)
    matches = [m for m in run_config.models if m.id == args.model]
    if not matches:
        raise UsageError(f"model {args.model!r} not in {args.config}; known: "
                         f"{', '.join(m.id for m in run_config.models)}")
    model = matches[0]
    workers = _workers(args, config)
    original = resolve_model(model, cache=ModelCache(config.get_cache_dir()), hub_base=config.get_hub_base_url())
    trigger = evaluate(model, original, dataset, backends, OptimizeMode.default_bundle(), run_config.output_dir,
                       chunks=chunks, workers=workers)
    run_path = emit_run_report(build_run_report(model, trigger, backends.optimizer.id, backends.runner.id),
                               run_config.output_dir)
    fault_report = localize(model, original, dataset, backends, registry, run_config.output_dir,
                            trigger=trigger, chunks=chunks, workers=workers,
                            sample_size=config.get_sample_size(), seed=config.get_seed())
    emit_fault_report(fault_report, run_config.output_dir, run_id=run_path.parent.name)
    if fault_report.incomplete:
        return EXIT_ERROR
    if fault_report.attributed_passes or not trigger.outcome.is_clean:
        return EXIT_FAULTS
    return EXIT_CLEAN


def cmd_report(args, config: Config) -> int:
    print(write_summary(args.summary))
    return EXIT_CLEAN


COMMANDS = {
    "fetch": cmd_fetch,
    "list-passes": cmd_list_passes,
    "run": cmd_run,
    "localize": cmd_localize,
    "report": cmd_report,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv and execute one subcommand

    Returns:
        Process exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(f"difftox: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = reload_config(args.settings)
    except DifftoxError as e:
        print(f"difftox: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    level = (args.log_level or config.get_log_level()).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"difftox: error: unknown log level {level}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return COMMANDS[args.command](args, config)
    except (DifftoxError, UsageError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"difftox: error: {e}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(run_command())
