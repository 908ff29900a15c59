"""CSV datasets keyed by individual id, validated against a graph spec.

Reserved columns: ``id`` (string) and optional ``time`` (integer tick).  Every
other column must be a variable of the graph.  Rows sharing an id become the
time-ordered snapshots of one individual.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .errors import DomainViolation, DuplicateTimestamp, ParseError
from .scm import CausalGraph, Individual, Snapshot

RESERVED = ("id", "time")


def load_dataset(path: str | Path, graph: CausalGraph) -> list[Individual]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty; a header row is required", line=1) from None
        header = [h.strip() for h in header]
        if "id" not in header:
            raise ParseError("header has no 'id' column", line=1)
        if len(set(header)) != len(header):
            raise ParseError("header repeats a column name", line=1)
        for col in header:
            if col not in RESERVED and not graph.has(col):
                raise ParseError("column is not a graph variable", line=1, column=col)
        required = graph.protected + graph.observables
        for name in required:
            if name not in header:
                raise ParseError("required variable column is missing", line=1, column=name)
        outcome = graph.outcomes[0]

        groups: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            cells = dict(zip(header, (c.strip() for c in row)))
            ident = cells["id"]
            if not ident:
                raise ParseError("empty id", line=lineno, column="id")
            time = 0
            if "time" in cells:
                try:
                    time = int(cells["time"])
                except ValueError:
                    raise ParseError(
                        f"time {cells['time']!r} is not an integer", line=lineno, column="time"
                    ) from None

            def parse(name, allow_empty):
                raw = cells.get(name, "")
                if raw == "":
                    if allow_empty:
                        return None
                    raise ParseError("empty value", line=lineno, column=name)
                try:
                    return graph.variable(name).normalize(raw)
                except ValueError as exc:
                    raise DomainViolation(f"row for {ident!r}: {exc}", line=lineno, column=name) from None

            protected = {p: parse(p, False) for p in graph.protected}
            observables = {o: parse(o, True) for o in graph.observables}
            value = parse(outcome, True) if outcome in cells else None

            g = groups.setdefault(ident, {"protected": protected, "snaps": {}, "outcome": {}})
            if g["protected"] != protected:
                raise DomainViolation(
                    f"protected values of {ident!r} change between rows", line=lineno
                )
            if time in g["snaps"]:
                raise DuplicateTimestamp(f"{ident!r} has two rows at time {time}", line=lineno)
            g["snaps"][time] = observables
            if value is not None:
                g["outcome"][time] = value

    individuals = []
    for ident, g in groups.items():
        times = sorted(g["snaps"])
        outcome_value = g["outcome"][max(g["outcome"])] if g["outcome"] else None
        individuals.append(
            Individual(
                id=ident,
                protected=g["protected"],
                snapshots=tuple(Snapshot(t, g["snaps"][t]) for t in times),
                outcome=outcome_value,
            )
        )
    return individuals


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_dataset(path: str | Path, graph: CausalGraph, individuals: Sequence[Individual]) -> None:
    """Inverse of :func:`load_dataset`; floats are written with ``repr`` so they round-trip."""
    with_time = any(len(ind.snapshots) > 1 or ind.snapshots[0].time != 0 for ind in individuals)
    outcome = graph.outcomes[0]
    header = ["id"] + (["time"] if with_time else []) + graph.protected + graph.observables + [outcome]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for ind in individuals:
            for k, snap in enumerate(ind.snapshots):
                row = [ind.id] + ([snap.time] if with_time else [])
                row += [_fmt(ind.protected[p]) for p in graph.protected]
                row += [_fmt(snap.observables.get(o)) for o in graph.observables]
                row.append(_fmt(ind.outcome) if k == len(ind.snapshots) - 1 else "")
                writer.writerow(row)
