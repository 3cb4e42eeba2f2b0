from abc import abstractmethod

from base_module.module import Module


class Agent(Module):
    def __init__(self, module_name, global_shared_state, log_level):
        super().__init__(module_name, global_shared_state, log_level)

    @abstractmethod
    def act(self, env) -> int:
        """Joint action index for the environment's current state."""
        pass

    @abstractmethod
    def fine_tune_online(self, env, steps: int) -> list:
        """Interact with a live environment, learning as it goes; returns the StepOutcome trajectory."""
        pass
