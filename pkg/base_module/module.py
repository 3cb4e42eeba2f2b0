import logging
from abc import ABC, abstractmethod


class Module(ABC):
    """Base of every pluggable component (allocators, agents, importers, exporters, the env).

    Plugins share one mutable dict across a CLI run; each gets its own logger
    at the configured level.
    """

    @abstractmethod
    def __init__(self, module_name, global_shared_state, log_level):
        logging.basicConfig(level=log_level)
        self._logger = logging.getLogger(module_name)
        # basicConfig only applies once per process
        self._logger.setLevel(log_level)
        self._global_shared_state = lambda: global_shared_state

    @property
    def global_shared_state(self):
        return self._global_shared_state()

    def shared_cache(self, name: str) -> dict:
        """Named cache in the shared state, created on first use."""
        return self.global_shared_state.setdefault(name, {})
