from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True, slots=True)
class RunEvent:
    message: str
    run_id: str
    seed: Optional[int]
    step: Optional[int]
    kind: str = "validation"
    notes: str = ""
    error_level: str = "INFO"

    def csv(self):
        return f"{self.c(self.message)},{self.c(self.run_id)},{self.c(self.seed)},{self.c(self.step)},{self.c(self.kind)},{self.c(self.error_level)},{self.c(self.notes)}"

    def c(self, s):
        return "" if s is None else str(s).replace(",", "")

    @classmethod
    def csv_header(cls):
        return "Message,RunId,Seed,Step,Kind,ErrorLevel,Notes"


class RunContext:
    def __init__(
        self,
        run_id: Optional[str] = None,
        seed: Optional[int] = None,
        step: Optional[int] = None,
        policy: Optional[str] = None,
    ):
        self.run_id = run_id
        self.seed = seed
        self.step = step
        self.policy = policy

    def __str__(self):
        return f"RunContext[Run:{self.run_id},Policy:{self.policy},Seed:{self.seed},Step:{self.step}]"


class ErrorManager:
    """Collects notable run events (OOM crashes, relaunches, rejected inputs)
    and renders them as errors.csv."""

    def __init__(self, logger, run_context: Optional[RunContext] = None):
        self._run_events = []
        self._logger = logger
        self.context = run_context or RunContext()

    @property
    def events(self) -> list[RunEvent]:
        return list(self._run_events)

    def errors_csv(self) -> str:
        if self._run_events:
            return "\n".join([RunEvent.csv_header()] + [x.csv() for x in self._run_events]) + "\n"
        else:
            return ""

    def count(self, kind: str) -> int:
        return sum(1 for event in self._run_events if event.kind == kind)

    def add_error(self, msg, kind="validation", error_level="INFO", notes=""):
        if error_level in ("ERROR", "CRITICAL"):
            self._logger.error(msg)
        elif error_level == "WARNING":
            self._logger.warning(msg)
        else:
            self._logger.info(msg)
        msg = msg.replace(",", "-")
        self._run_events.append(
            RunEvent(
                message=msg,
                run_id=self.context.run_id or "",
                seed=self.context.seed,
                step=self.context.step,
                kind=kind,
                notes=notes,
                error_level=error_level,
            )
        )
