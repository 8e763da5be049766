from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict


@dataclass
class EvalReport:
    """Flat name -> value metrics plus free-form details, tagged with the
    config hash and seed that produced them."""

    config_hash: str
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metrics": {k: _num(v) for k, v in self.metrics.items()},
            "details": self.details,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value", "config_hash", "seed"])
        for k, v in self.metrics.items():
            w.writerow([k, repr(_num(v)), self.config_hash, self.seed])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.csv").write_text(self.to_csv())


def _num(v):
    v = float(v)
    return round(v, 10)
