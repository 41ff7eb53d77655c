"""Per-iteration records shared by the reconstruction drivers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ["iter", "objective", "grad_norm", "eps_f", "envelope_gap", "wall_ms"]


@dataclass
class TraceRow:
    iter: int
    objective: float | None = None
    grad_norm: float | None = None
    eps_f: float | None = None
    envelope_gap: float | None = None
    wall_ms: float = 0.0
    phase: str | None = None
    solves: int = 0  # cumulative RTE solves, not serialized


@dataclass
class ReconTrace:
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    @property
    def has_phase(self) -> bool:
        return any(r.phase is not None for r in self.rows)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = COLUMNS + (["phase"] if self.has_phase else [])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([_fmt(getattr(r, c)) for c in cols])

    @classmethod
    def from_csv(cls, path) -> "ReconTrace":
        trace = cls()
        with Path(path).open(newline="") as fh:
            for rec in csv.DictReader(fh):
                trace.append(
                    TraceRow(
                        iter=int(rec["iter"]),
                        objective=_parse(rec["objective"]),
                        grad_norm=_parse(rec["grad_norm"]),
                        eps_f=_parse(rec["eps_f"]),
                        envelope_gap=_parse(rec["envelope_gap"]),
                        wall_ms=float(rec["wall_ms"]),
                        phase=rec.get("phase") or None,
                    )
                )
        return trace


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str):
    return float(s) if s not in ("", None) else None
