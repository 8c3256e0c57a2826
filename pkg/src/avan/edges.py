"""Connectome edges: one cleft linked to its pre- and postsynaptic segments."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

__all__ = ["SynapseEdge", "EdgeGraph", "save_edges", "load_edges"]


@dataclass(frozen=True)
class SynapseEdge:
    cleft_id: int
    pre_ids: tuple[int, ...]
    post_ids: tuple[int, ...]
    pre_scores: Mapping[int, float] = field(default_factory=dict, compare=False)
    post_scores: Mapping[int, float] = field(default_factory=dict, compare=False)
    flags: tuple[str, ...] = field(default=(), compare=False)
    center: tuple[int, int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cleft_id", int(self.cleft_id))
        object.__setattr__(self, "pre_ids", tuple(sorted(int(i) for i in self.pre_ids)))
        object.__setattr__(self, "post_ids", tuple(sorted(int(i) for i in self.post_ids)))
        if not self.pre_ids or not self.post_ids:
            raise ValueError(f"edge for cleft {self.cleft_id} needs nonempty pre and post sets")

    @property
    def is_diadic(self) -> bool:
        return len(self.pre_ids) == 1 and len(self.post_ids) == 1

    def same_partners(self, other: "SynapseEdge") -> bool:
        return set(self.pre_ids) == set(other.pre_ids) and set(self.post_ids) == set(other.post_ids)

    def to_dict(self) -> dict:
        d = {"cleft_id": self.cleft_id, "pre_ids": list(self.pre_ids), "post_ids": list(self.post_ids)}
        if self.pre_scores:
            d["pre_scores"] = {str(k): round(float(v), 8) for k, v in sorted(self.pre_scores.items())}
        if self.post_scores:
            d["post_scores"] = {str(k): round(float(v), 8) for k, v in sorted(self.post_scores.items())}
        if self.flags:
            d["flags"] = list(self.flags)
        if self.center is not None:
            d["center"] = [int(c) for c in self.center]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynapseEdge":
        return cls(
            d["cleft_id"],
            tuple(d["pre_ids"]),
            tuple(d["post_ids"]),
            {int(k): v for k, v in d.get("pre_scores", {}).items()},
            {int(k): v for k, v in d.get("post_scores", {}).items()},
            tuple(d.get("flags", ())),
            tuple(d["center"]) if d.get("center") is not None else None,
        )


class EdgeGraph(Mapping[int, SynapseEdge]):
    """Edges keyed by cleft ID, one per cleft, plus free-form provenance."""

    def __init__(self, edges: Iterable[SynapseEdge] = (), provenance: dict | None = None):
        self._edges: dict[int, SynapseEdge] = {}
        for e in edges:
            if e.cleft_id in self._edges:
                raise ValueError(f"duplicate edge for cleft {e.cleft_id}")
            self._edges[e.cleft_id] = e
        self.provenance = dict(provenance or {})

    def __getitem__(self, cleft_id: int) -> SynapseEdge:
        return self._edges[cleft_id]

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._edges))

    def __len__(self) -> int:
        return len(self._edges)

    def __repr__(self):
        return f"EdgeGraph({len(self)} edges)"

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "edges": [self[k].to_dict() for k in self]}

    @classmethod
    def from_dict(cls, d) -> "EdgeGraph":
        if isinstance(d, list):
            return cls(SynapseEdge.from_dict(e) for e in d)
        return cls((SynapseEdge.from_dict(e) for e in d["edges"]), d.get("provenance"))


def save_edges(graph: EdgeGraph, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(graph.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_edges(path: str | Path) -> EdgeGraph:
    return EdgeGraph.from_dict(json.loads(Path(path).read_text()))
