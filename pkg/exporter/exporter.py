import json
import logging
import math
from abc import abstractmethod
from dataclasses import fields, is_dataclass
from pathlib import Path

from base_module.module import Module
from common.module_loader import load_module_class

SUMMARY_FILE = "summary.json"
ERRORS_FILE = "errors.csv"


def format_value(value) -> str:
    """CSV cell text: floats with 6 significant digits, tuples joined by '|'."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (tuple, list)):
        return "|".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def round_value(value):
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return value if not math.isfinite(value) else float(f"{value:.6g}")
    if isinstance(value, (tuple, list)):
        return [round_value(v) for v in value]
    if isinstance(value, dict):
        return {k: round_value(v) for k, v in value.items()}
    return value


def as_record(row) -> dict:
    if is_dataclass(row):
        return {f.name: getattr(row, f.name) for f in fields(row)}
    return dict(row)


class Exporter(Module):
    def __init__(self, module_name, params: dict, global_shared_state, log_level):
        super().__init__(module_name, global_shared_state, log_level)
        try:
            self._path = Path(params["path"])
        except KeyError as e:
            raise ValueError(e)

    @property
    def path(self) -> Path:
        return self._path

    def _target(self, filename: str) -> Path:
        self._path.mkdir(parents=True, exist_ok=True)
        return self._path / filename

    def _write(self, filename: str, text: str) -> Path:
        target = self._target(filename)
        with open(target, "w", encoding="utf-8", newline="\n") as stream:
            stream.write(text)
        self._logger.debug(f"Wrote {target}")
        return target

    @abstractmethod
    def export_table(self, name: str, rows: list, header: list = None) -> Path:
        pass

    def export_metrics(self, rows: list, header: list) -> list[Path]:
        """One metrics_<run_id> file per run, rows in step order."""
        runs = {}
        for row in rows:
            runs.setdefault(row.run_id, []).append(row)
        return [self.export_table(f"metrics_{run_id}", run_rows, header) for run_id, run_rows in runs.items()]

    def export_summaries(self, summaries: list) -> Path:
        records = [round_value(as_record(summary)) for summary in summaries]
        return self._write(SUMMARY_FILE, json.dumps(records, indent=2) + "\n")

    def export_document(self, name: str, document: dict) -> Path:
        return self._write(f"{name}.json", json.dumps(round_value(document), indent=2) + "\n")

    def export_errors(self, error_manager):
        if errors := error_manager.errors_csv():
            return self._write(ERRORS_FILE, errors)
        return None

    def __str__(self):
        return f"{type(self).__name__}({self._path})"


def load_exporter(output_format: str, path, global_shared_state=None, log_level=logging.INFO) -> Exporter:
    exporter_class = load_module_class(f"{output_format}_metrics", "exporter")
    return exporter_class({"path": path}, global_shared_state if global_shared_state is not None else {}, log_level)
