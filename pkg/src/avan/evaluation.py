"""Assignment accuracy, combined-system edge precision/recall/F1, grid search
and disagreement mining."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .assignment import AssignParams, NoCandidatesError, _diadic_edge, _forward, _polyadic_edge, candidate_segments
from .cleft_detect import cleft_instances
from .edges import EdgeGraph, SynapseEdge
from .pruners import PrunerAssigner, assign_by_pruner
from .validation import check_unit_interval
from .volume import LabelVolume, overlap_counts

__all__ = [
    "GridSpec",
    "assignment_accuracy",
    "match_clefts",
    "CleftMatching",
    "edge_prf",
    "f1_score",
    "f1_level_set",
    "grid_search",
    "CombinedSystem",
    "disagreement_report",
    "pr_scatter",
    "dump_report",
]

logger = logging.getLogger(__name__)


def _check_keys(a: Mapping, b: Mapping):
    if set(a) != set(b):
        missing, extra = sorted(set(b) - set(a)), sorted(set(a) - set(b))
        raise KeyError(f"key mismatch: missing {missing[:10]}, unexpected {extra[:10]}")


def assignment_accuracy(pred: EdgeGraph, truth: EdgeGraph) -> float:
    """Fraction of clefts whose predicted pre and post sets equal the truth exactly."""
    _check_keys(pred, truth)
    if not truth:
        return 0.0
    return sum(pred[k].same_partners(truth[k]) for k in truth) / len(truth)


@dataclass
class CleftMatching:
    """``pred_to_true`` maps every predicted instance to its max-overlap true cleft
    (None if it overlaps nothing); ``detections`` maps true cleft -> the one
    predicted instance that counts as its detection."""

    pred_to_true: dict[int, int | None]
    detections: dict[int, int]
    ties: list[int] = field(default_factory=list)

    def get(self, pred_id, default=None):
        return self.pred_to_true.get(pred_id, default)

    def __getitem__(self, pred_id):
        return self.pred_to_true[pred_id]

    def is_detection(self, pred_id: int) -> bool:
        t = self.pred_to_true.get(pred_id)
        return t is not None and self.detections.get(t) == pred_id


def match_clefts(pred_instances, true_instances) -> CleftMatching:
    """Match predicted cleft instances to true clefts by maximal voxel overlap.

    Ties pick the smaller true ID and are recorded. When several predictions
    claim one true cleft, the one with the largest overlap (then smaller ID)
    is its detection; the rest count as false positives.
    """
    pa = np.asarray(getattr(pred_instances, "data", pred_instances))
    ta = np.asarray(getattr(true_instances, "data", true_instances))
    counts = overlap_counts(pa, ta)
    pred_ids = [int(i) for i in np.unique(pa) if i != 0]
    best: dict[int, tuple[int, int]] = {}
    ties = []
    for (p, t), c in sorted(counts.items()):
        if p not in best or c > best[p][1]:
            best[p] = (t, c)
        elif c == best[p][1]:
            ties.append(p)
    pred_to_true = {p: (best[p][0] if p in best else None) for p in pred_ids}
    detections: dict[int, int] = {}
    for p in pred_ids:
        if p not in best:
            continue
        t, c = best[p]
        cur = detections.get(t)
        if cur is None or c > best[cur][1] or (c == best[cur][1] and p < cur):
            detections[t] = p
    return CleftMatching(pred_to_true, detections, sorted(set(ties)))


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def edge_prf(pred: EdgeGraph, truth: EdgeGraph, matching: CleftMatching) -> dict[str, Any]:
    """Edge precision, recall and F1.

    A predicted edge is correct when its instance is the designated detection
    of a true cleft and its partner sets equal that cleft's.
    """
    tp = 0
    for pid in pred:
        t = matching.get(pid)
        if t is not None and matching.is_detection(pid) and t in truth and pred[pid].same_partners(truth[t]):
            tp += 1
    n_pred, n_true = len(pred), len(truth)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    out = {"precision": precision, "recall": recall, "f1": f1_score(precision, recall),
           "tp": tp, "n_pred": n_pred, "n_true": n_true}
    if n_pred == 0:
        out["flags"] = ["empty_prediction"]
    return out


@dataclass(frozen=True)
class GridSpec:
    thresholds: tuple[float, ...] = (0.5,)
    min_sizes: tuple[int, ...] = (0,)
    radii_nm: tuple[float, ...] = (30.0,)
    polyadic_thresholds: tuple[float | None, ...] = (None,)

    def __post_init__(self):
        for name in ("thresholds", "min_sizes", "radii_nm", "polyadic_thresholds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"empty grid: {name} has no values")
            object.__setattr__(self, name, value)

    def points(self) -> list[dict]:
        """Grid points in declared order (last axis varies fastest)."""
        keys = ("threshold", "min_size", "radius_nm", "polyadic_threshold")
        axes = (self.thresholds, self.min_sizes, self.radii_nm, self.polyadic_thresholds)
        return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]

    def __len__(self):
        return len(self.thresholds) * len(self.min_sizes) * len(self.radii_nm) * len(self.polyadic_thresholds)


class SystemUnderTest(Protocol):
    def evaluate(self, world, point: dict) -> tuple[EdgeGraph, Any]: ...


def _truth_graph(world) -> EdgeGraph:
    return EdgeGraph(world.true_edges)


def _score_point(system, world, point) -> dict:
    pred, instances = system.evaluate(world, point)
    matching = match_clefts(instances, world.cleft_labels)
    return edge_prf(pred, _truth_graph(world), matching)


def grid_search(system: SystemUnderTest, grid: GridSpec, val_world, test_world) -> dict:
    """Pick the grid point with the best validation edge F1 (first wins ties), report test metrics."""
    points = grid.points()
    if not points:
        raise ValueError("empty grid")
    surface = []
    best_i, best_f1 = 0, -1.0
    for i, point in enumerate(points):
        metrics = _score_point(system, val_world, point)
        surface.append({"point": point, **_rounded(metrics)})
        if metrics["f1"] > best_f1:
            best_i, best_f1 = i, metrics["f1"]
    selected = points[best_i]
    test = _score_point(system, test_world, selected)
    return {
        "selected": selected,
        "selected_index": best_i,
        "validation_f1": round(best_f1, 10),
        "test": _rounded(test),
        "validation_surface": surface,
        "n_points": len(points),
    }


def _rounded(metrics: dict) -> dict:
    return {k: (round(v, 10) if isinstance(v, float) else v) for k, v in metrics.items()}


class CombinedSystem:
    """Cleft detector followed by a partner assigner, evaluated at a grid point.

    ``detector`` exposes ``predict_proba(image)``, ``detect_params`` and a
    ``representation``; ``assigner`` is a fitted
    :class:`~avan.assignment.AVANAssigner` or :class:`~avan.pruners.PrunerAssigner`.
    Dense detector output, network forwards and per-instance edges are
    cached, so sweeping instance parameters only re-runs the cheap stages.
    """

    def __init__(self, detector, assigner, name: str = "system"):
        self.detector = detector
        self.assigner = assigner
        self.name = name
        self._worlds: dict[int, tuple[Any, Any]] = {}
        self._forwards: dict[tuple, Any] = {}
        self._edges: dict[tuple, SynapseEdge | None] = {}
        if isinstance(assigner, PrunerAssigner) and assigner.variant == "proximity":
            if getattr(detector, "representation", "mask") != "signed_proximity":
                raise ValueError("proximity pruner in a combined system needs a signed-proximity detector")

    def _prediction(self, world):
        # the world is kept alive alongside its prediction so id() stays unique
        key = id(world)
        if key not in self._worlds:
            self._worlds[key] = (world, self.detector.predict_proba(world.image))
        return self._worlds[key][1]

    def instances(self, world, point):
        params = self.detector.detect_params(threshold=point["threshold"], min_size=point["min_size"])
        return cleft_instances(self._prediction(world), params)

    def evaluate(self, world, point):
        instances = self.instances(world, point)
        labels = instances.data
        base = self.assigner.assign_params()
        params = AssignParams(point["radius_nm"], point.get("polyadic_threshold"), base.patch_shape, base.image_pad)
        edges = []
        for cid in (int(i) for i in np.unique(labels) if i):
            mask = labels == cid
            digest = hashlib.sha1(np.packbits(mask).tobytes()).hexdigest()
            key = (id(world), digest, cid, params.radius_nm, params.threshold)
            if key not in self._edges:
                try:
                    self._edges[key] = self._assign(world, digest, mask, cid, params)
                except NoCandidatesError as exc:
                    logger.info("instance %s skipped: %s", cid, exc)
                    self._edges[key] = None
            if self._edges[key] is not None:
                edges.append(self._edges[key])
        return EdgeGraph(edges, {"system": self.name, **point}), instances

    def _assign(self, world, digest, mask, cid, params: AssignParams) -> SynapseEdge:
        network = self.assigner.network_
        if isinstance(self.assigner, PrunerAssigner):
            if self.assigner.variant == "proximity":
                rep = self._prediction(world)
            else:
                rep = LabelVolume(mask.astype(np.uint32), world.resolution)
            return assign_by_pruner(network, world.image, world.segmentation, mask, rep, cid, params)
        candidates = candidate_segments(mask, world.segmentation, params.radius_nm)
        fkey = (id(world), digest)
        if fkey not in self._forwards:
            self._forwards[fkey] = _forward(network, world.image, world.segmentation, mask, params, candidates)
        if not candidates:
            raise NoCandidatesError(f"no candidates within {params.radius_nm} nm")
        fwd = replace(self._forwards[fkey], candidates=candidates)
        if params.threshold is None:
            return _diadic_edge(cid, fwd)
        return _polyadic_edge(cid, fwd, params.threshold)


def disagreement_report(a: EdgeGraph, b: EdgeGraph) -> list[dict]:
    """Clefts where two assigners differ in pre or post sets, with both answers."""
    _check_keys(a, b)
    out = []
    for k in a:
        if not a[k].same_partners(b[k]):
            out.append({"cleft_id": k, "a": a[k].to_dict(), "b": b[k].to_dict()})
    return out


def f1_level_set(f1: float, recall: np.ndarray) -> np.ndarray:
    """Precision giving harmonic mean ``f1`` at each recall (nan where undefined)."""
    r = np.asarray(recall, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = f1 * r / (2 * r - f1)
    p[(2 * r - f1) <= 0] = np.nan
    p[(p < 0) | (p > 1 + 1e-12)] = np.nan
    return p


def pr_scatter(results: Sequence[tuple[float, float, str]], path: str | Path, levels=None) -> Path:
    """Precision-recall scatter with dashed F1 level sets through each point."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not results:
        raise ValueError("no results to plot")
    pts = np.array([(p, r) for p, r, _ in results], dtype=float)
    check_unit_interval(pts, "precision/recall")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    r = np.linspace(0.0, 1.0, 501)
    levels = sorted({round(f1_score(p, q), 6) for p, q in pts} if levels is None else levels)
    for f in levels:
        if f > 0:
            ax.plot(r, f1_level_set(f, r), "--", color="0.6", linewidth=0.8)
    for p, q, label in results:
        ax.scatter([q], [p], label=label, zorder=3)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    metadata = {"Software": None} if path.suffix == ".png" else ({"Date": None} if path.suffix == ".svg" else None)
    if path.suffix == ".svg":
        matplotlib.rcParams["svg.hashsalt"] = "avan"
    fig.savefig(path, metadata=metadata)
    plt.close(fig)
    return path


def dump_report(report: dict, path: str | Path) -> Path:
    """Canonical JSON (sorted keys, fixed indentation) so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (set, tuple)):
        return list(obj)
    if isinstance(obj, EdgeGraph):
        return obj.to_dict()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
