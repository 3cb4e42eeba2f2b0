import logging
from dataclasses import replace

import numpy as np

from common.pipeline_model import MachineSpec, PipelineSpec, WorkloadSpec
from environment.rl_env import EnvConfig, PipelineEnv


class EnvSampler:
    """Draws randomized environments around a base scenario for offline training.

    All drawn pipelines keep the base stage layout, so every environment has
    the same knob count r.
    """

    def __init__(
        self,
        pipeline: PipelineSpec,
        machine: MachineSpec,
        workload: WorkloadSpec,
        env_config: EnvConfig = EnvConfig(),
        cost_jitter: float = 0.0,
        cpu_range: tuple[int, int] = None,
        latency_jitter: float = 0.0,
        log_level=logging.WARNING,
    ):
        self.pipeline = pipeline
        self.machine = machine
        self.workload = workload
        self.env_config = env_config
        self.cost_jitter = cost_jitter
        self.cpu_range = cpu_range or (machine.total_cpus, machine.total_cpus)
        self.latency_jitter = latency_jitter
        self.log_level = log_level
        if self.cpu_range[0] < pipeline.cpu_knobs:
            raise ValueError(
                f"cpu_range starts at {self.cpu_range[0]}, below the {pipeline.cpu_knobs} CPU stages"
            )

    @property
    def r(self) -> int:
        return self.pipeline.knobs

    def _factor(self, rng: np.random.Generator, jitter: float) -> float:
        if not jitter:
            return 1.0
        return float(np.exp(rng.uniform(-np.log1p(jitter), np.log1p(jitter))))

    def __call__(self, rng: np.random.Generator) -> PipelineEnv:
        stages = tuple(
            stage
            if stage.is_prefetch
            else replace(stage, cost_per_item=stage.cost_per_item * self._factor(rng, self.cost_jitter))
            for stage in self.pipeline.stages
        )
        low, high = self.cpu_range
        machine = replace(self.machine, total_cpus=int(rng.integers(low, high + 1)))
        workload = WorkloadSpec(
            batch_size=self.workload.batch_size,
            model_latency_s=self.workload.model_latency_s * self._factor(rng, self.latency_jitter),
        )
        noise_seed = None if self.env_config.noise_seed is None else int(rng.integers(2**31))
        config = replace(self.env_config, resize_schedule=(), noise_seed=noise_seed)
        return PipelineEnv(
            replace(self.pipeline, stages=stages), machine, workload, config, self.log_level
        )
