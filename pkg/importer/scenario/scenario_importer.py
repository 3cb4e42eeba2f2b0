import logging
from dataclasses import replace

from ..importer import Importer, check_keys, closest, load_document, require
from agent.qnet.qnet_agent import AgentHyperparams
from allocator.allocator import AllocatorKind, EstimatorBias
from common.pipeline_model import MachineSpec, PipelineSpec, ResizeEvent, StageKind, StageSpec, WorkloadSpec
from environment.rl_env import EnvConfig
from harness.experiment import (
    AGENT,
    GREEDY_REFERENCE,
    AgentSettings,
    ConfigError,
    ExperimentConfig,
    PolicySpec,
)
from simulator.pipeline_simulator import calibrate_cost_scale

TOP_KEYS = (
    "description",
    "log_level",
    "pipeline",
    "calibration",
    "machine",
    "workload",
    "env",
    "policy",
    "policies",
    "agent",
    "seeds",
    "steps",
    "output_dir",
    "format",
    "convergence",
)
PIPELINE_KEYS = ("sample_size_mb", "batch_normalizer_mb", "prefetch_quantum_mb", "jitter_max", "u_half", "stages")
STAGE_KEYS = (
    "name",
    "kind",
    "cost_per_item_cpu_s",
    "mem_fixed_mb",
    "mem_per_replica_mb",
    "scalable",
    "noise_cv",
    "batch_cost_exponent",
)
MACHINE_KEYS = ("total_cpus", "cpu_ghz", "total_mem_mb", "dram_bandwidth_mbps", "io_bandwidth_mbps")
WORKLOAD_KEYS = ("batch_size", "model_latency_s")
ENV_KEYS = (
    "resize_schedule",
    "oom_downtime_steps",
    "reset_policy_after_oom",
    "noise_seed",
    "step_time_s",
    "mem_guard",
    "mem_guard_frac",
    "relaunch_downtime_steps",
)
POLICY_KEYS = ("kind", "adaptive", "bias", "prefetch_units_per_cpu")
AGENT_KEYS = ("checkpoint", "pretrain_steps", "hyperparams", "cost_jitter", "latency_jitter", "cpu_range")
CALIBRATION_KEYS = ("single_cpu_target_fraction",)
CONVERGENCE_KEYS = ("window_steps", "tolerance")

# config key -> dataclass field
_STAGE_FIELDS = {
    "cost_per_item_cpu_s": "cost_per_item",
    "mem_fixed_mb": "mem_fixed",
    "mem_per_replica_mb": "mem_per_replica",
}


def _as(kind, value, path: str):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {kind.__name__}, got {value!r}")


def _build(path: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e))


def parse_stage(section: dict, path: str) -> StageSpec:
    check_keys(section, STAGE_KEYS, path)
    kind = require(section, "kind", path)
    kinds = [k.value for k in StageKind]
    if kind not in kinds:
        raise ConfigError(f"{path}.kind", f"unknown stage kind {kind!r}, did you mean {closest(kind, kinds)!r}?")
    values = {_STAGE_FIELDS.get(key, key): value for key, value in section.items()}
    values["name"] = str(require(section, "name", path))
    return _build(path, StageSpec, **values)


def parse_pipeline(section: dict, path: str = "pipeline") -> PipelineSpec:
    check_keys(section, PIPELINE_KEYS, path)
    stages = require(section, "stages", path)
    if not isinstance(stages, list):
        raise ConfigError(f"{path}.stages", "expected a list of stages")
    values = {key: _as(float, value, f"{path}.{key}") for key, value in section.items() if key != "stages"}
    return _build(
        path,
        PipelineSpec,
        stages=tuple(parse_stage(stage, f"{path}.stages[{i}]") for i, stage in enumerate(stages)),
        **values,
    )


def parse_machine(section: dict, path: str = "machine") -> MachineSpec:
    check_keys(section, MACHINE_KEYS, path)
    require(section, "total_cpus", path)
    values = {
        key: _as(int if key == "total_cpus" else float, value, f"{path}.{key}") for key, value in section.items()
    }
    return _build(path, MachineSpec, **values)


def parse_workload(section: dict, path: str = "workload") -> WorkloadSpec:
    check_keys(section, WORKLOAD_KEYS, path)
    return _build(
        path,
        WorkloadSpec,
        batch_size=_as(int, require(section, "batch_size", path), f"{path}.batch_size"),
        model_latency_s=_as(float, require(section, "model_latency_s", path), f"{path}.model_latency_s"),
    )


def parse_env(section: dict, path: str = "env") -> EnvConfig:
    check_keys(section, ENV_KEYS, path)
    values = dict(section)
    schedule = []
    for i, event in enumerate(values.pop("resize_schedule", []) or []):
        event_path = f"{path}.resize_schedule[{i}]"
        check_keys(event, ("step", "cpus"), event_path)
        schedule.append(
            ResizeEvent(step=int(require(event, "step", event_path)), new_cpu_count=int(require(event, "cpus", event_path)))
        )
    return _build(path, EnvConfig, resize_schedule=tuple(schedule), **values)


def parse_policy(section, path: str = "policy") -> PolicySpec:
    if isinstance(section, str):
        section = {"kind": section}
    check_keys(section, POLICY_KEYS, path)
    kind = require(section, "kind", path)
    kinds = [AGENT] + [k.value for k in AllocatorKind]
    if kind not in kinds:
        raise ConfigError(f"{path}.kind", f"unknown policy {kind!r}, did you mean {closest(kind, kinds)!r}?")
    values = dict(section)
    if "bias" in values:
        bias = values["bias"] or {}
        check_keys(bias, [k.value for k in StageKind], f"{path}.bias")
        values["bias"] = _build(f"{path}.bias", EstimatorBias, factors=bias)
    return _build(path, PolicySpec, **values)


def parse_agent(section: dict, path: str = "agent") -> AgentSettings:
    check_keys(section, AGENT_KEYS, path)
    values = dict(section)
    if "hyperparams" in values:
        try:
            values["hyperparams"] = AgentHyperparams.from_dict(values["hyperparams"] or {})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}.hyperparams", str(e))
    if values.get("cpu_range") is not None:
        values["cpu_range"] = tuple(int(c) for c in values["cpu_range"])
    return _build(path, AgentSettings, **values)


def _greedy_reference(policies: list[PolicySpec]) -> PolicySpec:
    for policy in policies:
        if policy.kind == GREEDY_REFERENCE.kind:
            return replace(policy, adaptive=False)
    return GREEDY_REFERENCE


def parse_experiment(document: dict, log_level=logging.INFO) -> ExperimentConfig:
    check_keys(document, TOP_KEYS, "")
    pipeline = parse_pipeline(require(document, "pipeline", ""))
    machine = parse_machine(require(document, "machine", ""))
    workload = parse_workload(require(document, "workload", ""))

    if "calibration" in document:
        calibration = document["calibration"] or {}
        check_keys(calibration, CALIBRATION_KEYS, "calibration")
        fraction = float(require(calibration, "single_cpu_target_fraction", "calibration"))
        pipeline = _build("calibration", calibrate_cost_scale, pipeline=pipeline, machine=machine, workload=workload, target_fraction=fraction)

    policy = parse_policy(document.get("policy", AGENT))
    policies = tuple(parse_policy(p, f"policies[{i}]") for i, p in enumerate(document.get("policies") or []))
    convergence = document.get("convergence") or {}
    check_keys(convergence, CONVERGENCE_KEYS, "convergence")
    seeds = document.get("seeds", [0])
    if not isinstance(seeds, list):
        raise ConfigError("seeds", "expected a list of integers")

    return _build(
        "",
        ExperimentConfig,
        pipeline=pipeline,
        machine=machine,
        workload=workload,
        env=parse_env(document.get("env") or {}),
        policy=policy,
        agent=parse_agent(document.get("agent") or {}),
        seeds=tuple(int(s) for s in seeds),
        steps=int(document.get("steps", 1000)),
        output_dir=str(document.get("output_dir", "out")),
        format=str(document.get("format", "csv")),
        policies=policies,
        greedy_reference=_greedy_reference([policy, *policies]),
        convergence_window=int(convergence.get("window_steps", 200)),
        convergence_tolerance=float(convergence.get("tolerance", 0.01)),
        log_level=log_level,
    )


class ScenarioImporter(Importer):
    """Loads an experiment document (JSON or YAML) into an ExperimentConfig."""

    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, global_shared_state, log_level)
        try:
            self._path = params["path"]
        except KeyError as e:
            raise ValueError(e)
        self._log_level = log_level

    def load_document(self) -> dict:
        return load_document(self._path)

    def load_experiment(self, overrides: dict = None) -> ExperimentConfig:
        config = parse_experiment(self.load_document(), self._log_level)
        overrides = {key: value for key, value in (overrides or {}).items() if value is not None}
        if overrides:
            config = _apply(config, overrides)
        self._logger.info(
            f"Loaded {self._path}: {len(config.pipeline.stages)} stages, {config.machine.total_cpus} CPUs, "
            f"policy {config.policy.label}, seeds {list(config.seeds)}"
        )
        return config


def _apply(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    try:
        return replace(config, **overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("", str(e))
