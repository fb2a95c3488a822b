"""Encounter records and their JSON-lines serialization.

One encounter per line::

    {"format_version": 1, "id": 17, "dx": [3, 41], "treat": [7], "lab": [],
     "edges": [["v:0", "d:0"], ["v:0", "d:1"], ["d:0", "m:0"]],
     "labels": {"dx_treatment": [1]}}

Node references are ``"kind:position"`` with kind ``v`` (visit), ``d``
(diagnosis), ``m`` (treatment) or ``r`` (lab) and position the index inside
that kind's list. External data without known structure omits ``edges``
and may carry ``labels.readmission`` / ``labels.mortality`` booleans.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

KINDS = ("v", "d", "m", "r")
VISIT_REF = "v:0"


def parse_ref(ref: str) -> tuple[str, int]:
    kind, _, pos = ref.partition(":")
    if kind not in KINDS or not pos.isdigit():
        raise ValueError(f"bad node reference {ref!r}")
    return kind, int(pos)


@dataclass
class Encounter:
    id: int | str
    dx: list[int]
    treat: list[int]
    lab: list[int] = field(default_factory=list)
    edges: list[tuple[str, str]] | None = None
    labels: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return 1 + len(self.dx) + len(self.treat) + len(self.lab)

    @property
    def has_structure(self) -> bool:
        return self.edges is not None

    def to_json(self) -> dict:
        record = {
            "format_version": FORMAT_VERSION,
            "id": self.id,
            "dx": [int(c) for c in self.dx],
            "treat": [int(c) for c in self.treat],
            "lab": [int(c) for c in self.lab],
        }
        if self.edges is not None:
            record["edges"] = [[a, b] for a, b in self.edges]
        record["labels"] = _jsonable(self.labels)
        return record

    @classmethod
    def from_json(cls, record: dict) -> "Encounter":
        version = record.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported encounter format_version {version}")
        edges = record.get("edges")
        return cls(
            id=record["id"],
            dx=list(record.get("dx", [])),
            treat=list(record.get("treat", [])),
            lab=list(record.get("lab", [])),
            edges=None if edges is None else [(a, b) for a, b in edges],
            labels=dict(record.get("labels", {})),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (set, frozenset)):
        return sorted(_jsonable(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_jsonl(encounters, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for enc in encounters:
            fh.write(json.dumps(enc.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Encounter]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Encounter.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def dataset_stats(encounters) -> dict:
    """Per-type means and label prevalences."""
    n = len(encounters)
    stats = {
        "format_version": FORMAT_VERSION,
        "n_encounters": n,
        "mean_dx": float(np.mean([len(e.dx) for e in encounters])) if n else 0.0,
        "mean_treat": float(np.mean([len(e.treat) for e in encounters])) if n else 0.0,
        "mean_lab": float(np.mean([len(e.lab) for e in encounters])) if n else 0.0,
        "has_structure": all(e.has_structure for e in encounters),
    }
    prevalence = {}
    if n and any("dx_treatment" in e.labels for e in encounters):
        for label in (1, 2):
            prevalence[f"dx_treatment_{label}"] = float(
                np.mean([label in e.labels.get("dx_treatment", ()) for e in encounters])
            )
    for key in ("readmission", "mortality"):
        if n and any(key in e.labels for e in encounters):
            prevalence[key] = float(np.mean([bool(e.labels.get(key, False)) for e in encounters]))
    stats["prevalence"] = prevalence
    return stats


def write_stats(stats: dict, path) -> None:
    Path(path).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
