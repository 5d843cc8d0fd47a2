#
# Records what a registration run did, iteration by iteration, and where
# the time went.

from __future__ import annotations

import contextlib
import csv
import sys
import time
from dataclasses import dataclass, field
from typing import Iterator, TextIO

import numpy as np

from .dfrtypes import PathLike
from .ext import format_table

COLUMNS = ("iter", "stage", "E_total", "E_cd", "E_corr", "E_arap", "|C|")


@dataclass(frozen=True)
class TraceRow:
    "Energies at one iteration"
    iteration: int
    stage: str
    e_total: float
    e_cd: float
    e_corr: float
    e_arap: float
    n_corr: int
    "Number of filtered correspondences in use"


class EnergyTrace:
    "Per iteration energies of a registration, in order"

    def __init__(self, rows: list[TraceRow] | None = None):
        self.rows: list[TraceRow] = list(rows or [])

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TraceRow]:
        return iter(self.rows)

    def __getitem__(self, i: int) -> TraceRow:
        return self.rows[i]

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def extend(self, other: EnergyTrace) -> None:
        self.rows.extend(other.rows)

    def stage(self, stage: str) -> EnergyTrace:
        "Rows belonging to one stage"
        return EnergyTrace([r for r in self.rows if r.stage == stage])

    def totals(self) -> np.ndarray:
        return np.array([r.e_total for r in self.rows])

    @property
    def stages(self) -> list[str]:
        "Stage labels in the order they ran"
        seen: list[str] = []
        for r in self.rows:
            if not seen or seen[-1] != r.stage:
                seen.append(r.stage)
        return seen

    def write(self, out: TextIO) -> None:
        "CSV with a header line, floats written so they read back exactly"
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([r.iteration, r.stage, repr(r.e_total), repr(r.e_cd), repr(r.e_corr), repr(r.e_arap), r.n_corr])

    def save(self, path: PathLike) -> None:
        with open(path, "wt", encoding="utf8", newline="") as f:
            self.write(f)

    @classmethod
    def load(cls, path: PathLike) -> EnergyTrace:
        with open(path, "rt", encoding="utf8", newline="") as f:
            reader = csv.reader(f)
            next(reader)
            return cls([
                TraceRow(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]), int(r[6]))
                for r in reader
            ])


@dataclass
class StageRuntime:
    "Wall clock accounting of one stage"
    stage: str
    iterations: int = 0
    seconds: float = 0.0
    sections: dict[str, float] = field(default_factory=dict)
    "Seconds spent per activity: correspondence, filter, energy and step"

    def as_dict(self) -> dict:
        return {"stage": self.stage, "iterations": self.iterations, "seconds": self.seconds, **self.sections}


class RuntimeAccount:
    """Accumulates time per named section

    .. code-block::

        account = RuntimeAccount("stage1")
        with account.section("energy"):
            ...
    """

    SECTIONS = ("correspondence", "filter", "energy", "step")

    def __init__(self, stage: str, clock=time.perf_counter):
        self.clock = clock
        self.runtime = StageRuntime(stage, sections={s: 0.0 for s in self.SECTIONS})
        self._start = clock()

    @contextlib.contextmanager
    def section(self, name: str):
        start = self.clock()
        try:
            yield
        finally:
            self.runtime.sections[name] = self.runtime.sections.get(name, 0.0) + self.clock() - start

    def finish(self, iterations: int) -> StageRuntime:
        self.runtime.iterations = iterations
        self.runtime.seconds = self.clock() - self._start
        return self.runtime


def print_runtime(runtimes: list[StageRuntime], out: TextIO | None = None) -> None:
    "Prints a runtime breakdown table"
    out = out or sys.stdout
    columns = ["stage", "iterations", "seconds", *RuntimeAccount.SECTIONS]
    rows = [[r.stage, r.iterations, f"{ r.seconds:.3f}", *(f"{ r.sections.get(s, 0.0):.3f}" for s in RuntimeAccount.SECTIONS)]
            for r in runtimes]
    out.write(format_table(columns, rows))
