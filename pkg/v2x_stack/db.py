""" Result store. """

from datetime import datetime, timezone
from typing import Any, Dict, List, Optional
import json
import os
import sqlite3

import pandas as pd

from v2x_stack.helper import band_label
from v2x_stack.rho import DayResult, aggregate_report
from v2x_stack.stackmodel import CostBreakdown
from v2x_stack.types import StackingMode


def _mode_adapter(mode: StackingMode) -> str:
    return mode.name


def _mode_converter(raw: bytes) -> StackingMode:
    return StackingMode[raw.decode("utf-8")]


class StoredResult:
    """A DayResult read back from the store: summary plus per-slot costs."""

    def __init__(self, row: sqlite3.Row, costs: pd.DataFrame):
        self.id = row["id"]
        self.scenario_hash = row["scenario_hash"]
        self.scenario_name = row["scenario"]
        self.mode = row["mode"]
        self.channel = row["channel"]
        self.target = row["target"]
        self.seed = row["seed"]
        self.summary = json.loads(row["summary"])
        self.costs = costs

    @property
    def total(self) -> CostBreakdown:
        columns = CostBreakdown.__dataclass_fields__
        return CostBreakdown(**{name: float(self.costs[name].sum()) for name in columns})

    @property
    def total_cost(self) -> float:
        return self.total.total


class ResultStore:
    """On-disk registry of day runs."""

    run_table_def = (
        ("id", "integer PRIMARY KEY"),
        ("scenario_hash", "text"),
        ("scenario", "text"),
        ("mode", "mode"),
        ("channel", "text"),  # Empty for the truth forecaster.
        ("target", "float"),
        ("band", "text"),
        ("seed", "integer"),
        ("created", "text"),
        ("summary", "text"),  # JSON of DayResult.summary()
    )
    cost_table_def = (
        ("run_id", "integer"),
        ("slot", "integer"),
        ("node", "integer"),
        ("grid", "float"),
        ("battery", "float"),
        ("discomfort", "float"),
        ("v2g_revenue", "float"),
        ("total", "float"),
        ("trade_settlement", "float"),
        ("grid_energy", "float"),
        ("hvac_energy", "float"),
    )

    def __init__(self, filename: str = ":memory:"):
        sqlite3.register_adapter(StackingMode, _mode_adapter)
        sqlite3.register_converter("mode", _mode_converter)
        self._filename = filename
        new_file = filename == ":memory:" or not os.path.isfile(filename)
        self.connection = sqlite3.connect(self._filename, detect_types=sqlite3.PARSE_DECLTYPES)
        self.connection.row_factory = sqlite3.Row
        if new_file:
            cursor = self.connection.cursor()
            try:
                self._create_tables(cursor)
            finally:
                cursor.close()
                self.connection.commit()

    def _create_tables(self, cursor):
        cursor.execute(
            "CREATE TABLE IF NOT EXISTS runs ("
            + (", ".join([f"{k} {t}" for k, t in ResultStore.run_table_def]))
            + ")"
        )
        cursor.execute(
            "CREATE TABLE IF NOT EXISTS slot_costs ("
            + (", ".join([f"{k} {t}" for k, t in ResultStore.cost_table_def]))
            + ")"
        )
        cursor.execute("CREATE INDEX IF NOT EXISTS run_keys ON runs (scenario_hash, mode)")
        cursor.execute("CREATE INDEX IF NOT EXISTS cost_runs ON slot_costs (run_id)")

    def close(self):
        self.connection.close()

    def record(self, result: DayResult) -> int:
        """Return the row id of the stored run."""
        channel = result.forecaster.get("channel") or ""
        target = float(result.forecaster.get("target_re") or 0.0)
        seed = result.forecaster.get("seed")
        cursor = self.connection.cursor()
        try:
            cursor.execute(
                "INSERT INTO runs (scenario_hash, scenario, mode, channel, target, band, seed, created, summary) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    result.scenario_hash,
                    result.scenario_name,
                    result.mode,
                    channel,
                    target,
                    band_label(target),
                    seed,
                    datetime.now(timezone.utc).isoformat(),
                    json.dumps(result.summary(), sort_keys=True),
                ),
            )
            run_id = cursor.lastrowid
            names = [k for k, _ in ResultStore.cost_table_def]
            frame = result.costs_frame()
            cursor.executemany(
                f"INSERT INTO slot_costs ({', '.join(names)}) VALUES ({', '.join('?' * len(names))})",
                [
                    (run_id, int(row["slot"]), int(row["node"]))
                    + tuple(float(row[name]) for name in names[3:])
                    for row in frame.to_dict("records")
                ],
            )
            return run_id
        finally:
            cursor.close()
            self.connection.commit()

    def costs(self, run_id: int) -> pd.DataFrame:
        return pd.read_sql_query(
            "SELECT * FROM slot_costs WHERE run_id = ? ORDER BY slot, node",
            self.connection,
            params=(run_id,),
        )

    def runs(
        self,
        scenario_hash: Optional[str] = None,
        mode: Optional[StackingMode] = None,
        channel: Optional[str] = None,
    ) -> List[StoredResult]:
        statement = "SELECT * FROM runs "
        clauses = []
        values: List[Any] = []
        if scenario_hash is not None:
            clauses.append("scenario_hash = ?")
            values.append(scenario_hash)
        if mode is not None:
            clauses.append("mode = ?")
            values.append(mode)
        if channel is not None:
            clauses.append("channel = ?")
            values.append(channel)
        if clauses:
            statement += "WHERE " + (" AND ".join(clauses)) + " "
        statement += "ORDER BY id"
        cursor = self.connection.cursor()
        try:
            cursor.execute(statement, values)
            rows = cursor.fetchall()
        finally:
            cursor.close()
        return [StoredResult(row, self.costs(row["id"])) for row in rows]

    def latest_by_mode(self, scenario_hash: str) -> Dict[StackingMode, StoredResult]:
        """Most recent truth-forecast run of every mode for a scenario."""
        latest: Dict[StackingMode, StoredResult] = {}
        for stored in self.runs(scenario_hash, channel=""):
            latest[stored.mode] = stored
        return latest

    def report(self, scenario_hash: str) -> Dict[str, Any]:
        """aggregate_report over the stored truth-forecast runs of a scenario."""
        stored = self.latest_by_mode(scenario_hash)
        if not stored:
            raise KeyError(f"No runs stored for scenario {scenario_hash}.")
        return aggregate_report([_Totals(s) for s in stored.values()])


class _Totals:
    """Adapter giving a stored run the attributes aggregate_report reads."""

    def __init__(self, stored: StoredResult):
        self.scenario_hash = stored.scenario_hash
        self.scenario_name = stored.scenario_name
        self.mode = stored.mode
        self.total = stored.total
        self.total_cost = self.total.total
        self.violations = [None] * int(stored.summary.get("violations", 0))
