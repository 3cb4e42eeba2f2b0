import json
import logging
from pathlib import Path

from ..exporter import Exporter, as_record, round_value


class JsonMetricsExporter(Exporter):
    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def export_table(self, name: str, rows: list, header: list = None) -> Path:
        records = [as_record(row) for row in rows]
        if header:
            records = [{column: record[column] for column in header} for record in records]
        return self._write(f"{name}.json", json.dumps(round_value(records), indent=1) + "\n")
