import csv
import io
import logging
from pathlib import Path

from ..exporter import Exporter, as_record, format_value


class CsvMetricsExporter(Exporter):
    def __init__(self, params: dict, global_shared_state, log_level=logging.INFO):
        super().__init__(__name__, params, global_shared_state, log_level)

    def export_table(self, name: str, rows: list, header: list = None) -> Path:
        records = [as_record(row) for row in rows]
        header = header or (list(records[0]) if records else [])
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for record in records:
            writer.writerow([format_value(record[column]) for column in header])
        return self._write(f"{name}.csv", buffer.getvalue())
