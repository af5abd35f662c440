"""Per-run training record shared by the curriculum loop and the harness."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

# Deterministic per-cycle columns; wall-clock time lives in a separate timing file.
CYCLE_COLUMNS = (
    "cycle", "task_index", "success_rate", "nonneg_reward_cum", "buffer_size",
    "virtual_kept", "virtual_discarded", "epsilon", "samples", "episodes",
)
EPISODE_COLUMNS = ("cycle", "task_index", "episode", "success", "object_moved", "ever_grasped")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    switches: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    priority_hist: list = field(default_factory=list)
    complete: bool = False
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def success_rates(self, task_index=None) -> list:
        return [r["success_rate"] for r in self.rows
                if task_index is None or r["task_index"] == task_index]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CYCLE_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in CYCLE_COLUMNS])
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPISODE_COLUMNS)
        for e in self.episodes:
            w.writerow([_fmt(e[c]) for c in EPISODE_COLUMNS])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("cycle", "wall_ms"))
        for r, ms in zip(self.rows, self.wall_ms):
            w.writerow((r["cycle"], f"{ms:.3f}"))
        return buf.getvalue()

    def switches_json(self) -> str:
        return json.dumps(self.switches, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "RunLog":
        reader = csv.DictReader(io.StringIO(text))
        rows = []
        for rec in reader:
            row = {}
            for k, v in rec.items():
                if k in ("success_rate", "epsilon"):
                    row[k] = float(v)
                else:
                    row[k] = int(v)
            rows.append(row)
        return cls(rows=rows)


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v
