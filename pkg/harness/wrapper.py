import logging
from dataclasses import replace
from typing import Iterator, Optional, Sequence, Union

from agent.qnet.checkpoint import load_checkpoint
from agent.qnet.qnet_agent import AgentHyperparams, QnetAgent
from common.pipeline_model import Allocation, MachineSpec, PipelineSpec, StageSpec, WorkloadSpec
from environment.rl_env import EnvConfig, EnvError, PipelineEnv, StepOutcome


class TunedPipeline:
    """A simulated pipeline whose knobs are tuned online while it is consumed.

    Iterating it advances the pipeline by one step and yields that step's info
    dict (achieved rate, memory, allocation, event).
    """

    def __init__(self, env: PipelineEnv, agent: QnetAgent):
        self.env = env
        self.agent = agent

    @property
    def allocation(self) -> Allocation:
        return self.env.allocation

    def step(self) -> StepOutcome:
        return self.agent.fine_tune_online(self.env, 1)[0]

    def run(self, steps: int) -> list[StepOutcome]:
        return self.agent.fine_tune_online(self.env, steps)

    def __iter__(self) -> Iterator[dict]:
        while True:
            yield self.step().info


def _knob_names(pipeline: PipelineSpec) -> list[str]:
    names = [stage.name for stage in pipeline.cpu_stages]
    if pipeline.has_prefetch:
        names.append(pipeline.stages[-1].name)
    return names


def pipeline_wrapper(
    pipeline: PipelineSpec,
    knobs: Optional[Sequence[Union[str, StageSpec]]] = None,
    machine: Optional[MachineSpec] = None,
    workload: Optional[WorkloadSpec] = None,
    env_config: EnvConfig = EnvConfig(),
    checkpoint: Optional[str] = None,
    hyperparams: AgentHyperparams = AgentHyperparams(),
    log_level=logging.INFO,
) -> TunedPipeline:
    """Hand the listed stages (all of them by default) to the agent; the
    other stages keep the allocation they start with."""
    if machine is None or workload is None:
        raise EnvError("pipeline_wrapper needs the machine and workload the pipeline runs on")
    names = _knob_names(pipeline)
    if knobs is None:
        selected = set(names)
    else:
        selected = {knob.name if isinstance(knob, StageSpec) else knob for knob in knobs}
    unknown = selected - set(names)
    if unknown:
        raise EnvError(f"Unknown knobs {sorted(unknown)}, pipeline stages are {names}")

    env = PipelineEnv(
        pipeline, machine, workload, env_config, log_level, tunable=[name in selected for name in names]
    )
    params = None
    if checkpoint:
        params, saved, _ = load_checkpoint(checkpoint, expected_r=env.r)
        hyperparams = replace(hyperparams, hidden_sizes=saved.hidden_sizes, head=saved.head)
    return TunedPipeline(env, QnetAgent(env.r, hyperparams, params=params, log_level=log_level))
