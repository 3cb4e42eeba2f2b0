from argparse import ArgumentParser
from datetime import timedelta
import json
import logging
import os
from pathlib import Path
import sys
import time
import traceback

file = Path(__file__).resolve()
sys.path.append(str(file.parent))

from agent.qnet.checkpoint import save_checkpoint
from allocator.allocator import load_allocator
from allocator.oracle_brute_force.oracle_brute_force_allocator import alloc_oracle_bruteforce
from allocator.oracle_greedy_true.oracle_greedy_true_allocator import alloc_oracle_greedy_true
from common.error_manager import ErrorManager
from environment.rl_env import maintain_index
from exporter.exporter import load_exporter
from harness.comparison import run_comparison
from harness.experiment import (
    AGENT,
    UNOPTIMIZED,
    ConfigError,
    MetricsRow,
    PolicySpec,
    build_agent,
    build_env,
    pretrain_agent,
    run_experiment,
)
from harness.scaling_studies import scaling_study_batch, scaling_study_complexity, scaling_study_cpus
from importer.importer import load_document
from importer.scenario.scenario_importer import ScenarioImporter
from shared_state.global_shared_state import GLOBAL_SHARED_STATE
from simulator.pipeline_simulator import pipeline_throughput

OUT_ENV_VAR = "PIPETUNE_OUT"
STUDIES = {
    "complexity": scaling_study_complexity,
    "cpus": scaling_study_cpus,
    "batch": scaling_study_batch,
}

logger = logging.getLogger(__name__)


class CliArgumentParser(ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def get_log_level_descriptor(log_level) -> int:
    if log_level:
        try:
            return getattr(logging, str(log_level).upper())
        except AttributeError:
            raise ConfigError("log_level", f"unknown log level {log_level!r}")
    return logging.INFO


def build_parser() -> CliArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="Experiment config (JSON or YAML)")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the config's seed list")
    common.add_argument("--out", help=f"Output directory (overridden by ${OUT_ENV_VAR})")
    common.add_argument("--steps", type=int, help="Steps per run")
    common.add_argument("--format", choices=("csv", "json"), help="Metrics file format")

    parser = CliArgumentParser(prog="pipetune", description="Tune data-ingestion pipeline CPU and prefetch allocation")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)
    commands.add_parser("simulate", parents=[common], help="One-shot throughput report for the configured policy")
    oracle = commands.add_parser("oracle", parents=[common], help="Best allocation on the noiseless simulator")
    oracle.add_argument(
        "--method",
        choices=("brute_force", "greedy_true"),
        default="brute_force",
        help="Exhaustive search, or marginal greedy on true rates for large budgets",
    )
    commands.add_parser("pretrain", parents=[common], help="Offline agent training, writes a checkpoint")
    commands.add_parser("tune", parents=[common], help="Online run with the agent")
    bench = commands.add_parser("bench", parents=[common], help="Scaling studies")
    bench.add_argument("study", nargs="?", choices=tuple(STUDIES) + ("all",), default="all")
    commands.add_parser("compare", parents=[common], help="Agent against the baselines on one scenario")
    return parser


def load_run_config(args):
    document = load_document(args.config)
    log_level = get_log_level_descriptor(document.get("log_level"))
    logger.setLevel(level=log_level)
    importer = ScenarioImporter({"path": args.config}, GLOBAL_SHARED_STATE, log_level)
    overrides = {
        "seeds": None if args.seed is None else (args.seed,),
        "steps": args.steps,
        "format": args.format,
        "output_dir": os.environ.get(OUT_ENV_VAR) or args.out,
    }
    return importer.load_experiment(overrides)


def print_json(document):
    print(json.dumps(document, indent=2))


def _agent_allocation(config):
    """Allocation, and machine after any resizes, the trained agent reaches acting greedily for config.steps steps."""
    if not config.agent.checkpoint:
        raise ConfigError("agent.checkpoint", "simulate runs the agent from a trained checkpoint")
    config.validate_checkpoint()
    seed = config.seeds[0]
    agent = build_agent(config, seed, GLOBAL_SHARED_STATE)
    env = build_env(config, seed)
    maintain = maintain_index(env.r)
    for _ in range(config.steps):
        env.step(maintain if env.in_downtime else agent.act(env))
    return env.allocation, env.machine


def simulate(config, args) -> int:
    machine = config.machine
    if config.policy.is_agent:
        allocation, machine = _agent_allocation(config)
    else:
        allocator = load_allocator(
            config.policy.kind, config.policy.allocator_params(), GLOBAL_SHARED_STATE, config.log_level
        )
        allocation = allocator.allocate(config.pipeline, config.machine, config.workload)
    noise = None if config.env.noise_seed is None else config.env_config_for(config.seeds[0]).noise_seed
    report = pipeline_throughput(config.pipeline, allocation, machine, config.workload, noise)
    print_json({"policy": config.policy.label, "allocation": allocation.as_dict(), **report.as_dict()})
    return 0


def oracle(config, args) -> int:
    if args.method == "brute_force":
        allocation, rate = alloc_oracle_bruteforce(config.pipeline, config.machine, config.workload)
    else:
        allocation, rate = alloc_oracle_greedy_true(config.pipeline, config.machine, config.workload)
    print_json({"method": args.method, "allocation": allocation.as_dict(), "achieved_rate": rate})
    return 0


def pretrain(config, args) -> int:
    exporter = load_exporter(config.format, config.output_dir, GLOBAL_SHARED_STATE, config.log_level)
    steps = args.steps or config.agent.pretrain_steps or config.steps
    for seed in config.seeds:
        agent = pretrain_agent(config, seed, steps)
        if config.agent.checkpoint and len(config.seeds) == 1:
            target = Path(config.agent.checkpoint)
        else:
            target = Path(config.output_dir) / f"checkpoint_s{seed}.json"
        save_checkpoint(target, agent.params, agent.hyper, agent.r)
        exporter.export_table(f"training_curve_s{seed}", agent.training_curve, ["step", "loss", "mean_reward"])
        print_json(
            {
                "seed": seed,
                "checkpoint": str(target),
                "steps": steps,
                "updates": agent.updates_done,
                "layer_dims": list(agent.params.layer_dims),
                "mac_count": agent.params.mac_count(),
            }
        )
    return 0


def _export_runs(config, rows, summaries, error_manager):
    exporter = load_exporter(config.format, config.output_dir, GLOBAL_SHARED_STATE, config.log_level)
    exporter.export_metrics(rows, MetricsRow.field_names())
    exporter.export_summaries(summaries)
    exporter.export_errors(error_manager)
    return exporter


def tune(config, args) -> int:
    if not config.policy.is_agent:
        config = config.with_policy(PolicySpec(AGENT))
    error_manager = ErrorManager(logger)
    rows, summaries = run_experiment(config, GLOBAL_SHARED_STATE, error_manager)
    _export_runs(config, rows, summaries, error_manager)
    print_json([summary.as_dict() for summary in summaries])
    return 0


def bench(config, args) -> int:
    exporter = load_exporter(config.format, config.output_dir, GLOBAL_SHARED_STATE, config.log_level)
    names = tuple(STUDIES) if args.study == "all" else (args.study,)
    for name in names:
        rows = STUDIES[name](config, shared_state=GLOBAL_SHARED_STATE)
        exporter.export_table(f"study_{name}", rows)
        logger.info(f"Finished {name} study: {len(rows)} points")
    return 0


def compare(config, args) -> int:
    policies = config.policies or (config.policy, UNOPTIMIZED, config.greedy_reference)
    configs = [config.with_policy(policy) for policy in policies]
    error_manager = ErrorManager(logger)
    table = run_comparison(configs, GLOBAL_SHARED_STATE, error_manager)
    exporter = _export_runs(config, table.rows, [s for label in table.labels for s in table.summaries[label]], error_manager)
    exporter.export_table("comparison", table.comparison_rows())
    ratios = table.summary_ratios()
    exporter.export_document("comparison_summary", ratios)
    print_json(ratios)
    return 0


COMMANDS = {
    "simulate": simulate,
    "oracle": oracle,
    "pretrain": pretrain,
    "tune": tune,
    "bench": bench,
    "compare": compare,
}


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code or 0
    start_time = time.time()
    try:
        config = load_run_config(args)
        status = COMMANDS[args.command](config, args)
    except ValueError as e:
        logger.error(f"{e}")
        return 1
    except Exception as e:
        logger.error(f"Unhandled error running {args.command}: {e}\nTraceback:{traceback.format_exc()}")
        return 2
    logger.info(f"Finished {args.command} in time:{timedelta(seconds=(time.time() - start_time))} ---")
    return status


if __name__ == "__main__":
    sys.exit(cli())
