"""Config-driven command line: ``avan <command> <config.json> [selectors]``.

Everything an experiment needs (paths, generator parameters, network and
schedule settings, assignment/detection parameters, the grid) lives in one
JSON file. The few flags only choose which role, split or artifact a command
acts on. Failures exit nonzero with a JSON object on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .assignment import AVANAssigner, PartnerMaskOracle
from .cleft_detect import CleftDetector, GroundTruthDetector
from .edges import EdgeGraph, load_edges, save_edges
from .evaluation import (
    CombinedSystem,
    GridSpec,
    assignment_accuracy,
    disagreement_report,
    dump_report,
    edge_prf,
    grid_search,
    match_clefts,
    pr_scatter,
)
from .model import ROLE_CHANNELS, load_checkpoint, write_loss_log
from .pruners import PrunerAssigner
from .synthgen import GenParams, load_world, make_world, save_world, slab_bounds, split_slabs
from .volume import load_volume, save_volume

__all__ = ["ExperimentConfig", "main", "build_parser", "CliError"]

logger = logging.getLogger("avan")

ROLES = tuple(ROLE_CHANNELS)
SPLITS = ("train", "val", "test")
ASSIGNERS = ("avan", "mask_pruner", "prox_pruner", "oracle")
DETECTORS = ("cleft_mask", "cleft_prox", "oracle")


class CliError(Exception):
    """User-facing failure; ``kind`` becomes the ``error`` field of the JSON."""

    def __init__(self, message: str, kind: str = "config_error", **details):
        super().__init__(message)
        self.kind = kind
        self.details = details


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    seed: int = 0
    paths: dict[str, Path] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError(f"config not found: {path}", "io_error", path=str(path)) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}", path=str(path)) from None
        if not isinstance(raw, dict):
            raise CliError("config must be a JSON object", path=str(path))
        base = path.resolve().parent
        root = base / raw.get("paths", {}).get("root", ".")
        paths = {}
        for key, default in (("data", "data"), ("checkpoints", "checkpoints"), ("reports", "reports")):
            paths[key] = root / raw.get("paths", {}).get(key, default)
        return cls(raw, base, int(raw.get("seed", 0)), paths)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise CliError(f"config section {name!r} must be an object")
        return value

    def gen_params(self) -> GenParams:
        kw = dict(self.section("generate"))
        kw.setdefault("seed", self.seed)
        try:
            return GenParams.from_dict(kw)
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad generate section: {exc}") from None

    def role_settings(self, role: str) -> dict:
        """Network + schedule settings: ``train.defaults`` overlaid with ``train.<role>``."""
        train = self.section("train")
        kw = {**train.get("defaults", {}), **train.get(role, {})}
        kw.setdefault("seed", self.seed)
        if "lr_schedule" in kw:
            kw["lr_schedule"] = tuple(tuple(p) for p in kw["lr_schedule"])
        if "patch_shape" in kw:
            kw["patch_shape"] = tuple(kw["patch_shape"])
        return kw

    def seeds(self) -> dict:
        return {"global": self.seed, "generate": self.gen_params().seed,
                "train": {r: self.role_settings(r)["seed"] for r in ROLES}}

    def stamp(self) -> dict:
        return {"config_sha256": self.sha256, "seeds": self.seeds()}

    def world_dir(self, split: str) -> Path:
        return self.paths["data"] / "worlds" / split

    def checkpoint(self, role: str) -> Path:
        return self.paths["checkpoints"] / f"{role}.pt"

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


# estimators ---------------------------------------------------------------

_NET_KEYS = ("width", "depth", "norm", "iterations", "batch_size", "lr_schedule", "patch_shape", "image_pad", "seed")


def _pick(kw: dict, keys) -> dict:
    return {k: kw[k] for k in keys if k in kw}


def make_estimator(cfg: ExperimentConfig, role: str):
    if role not in ROLES:
        raise CliError(f"unknown role {role!r}; expected one of {list(ROLES)}")
    kw = cfg.role_settings(role)
    unknown = set(kw) - set(_NET_KEYS) - {"log_every"}
    if unknown:
        raise CliError(f"unknown train settings for {role}: {sorted(unknown)}")
    net = _pick(kw, _NET_KEYS)
    assign = cfg.section("assign")
    prox = cfg.section("proximity")
    detect = cfg.section("detect")
    try:
        if role == "avan":
            return AVANAssigner(radius_nm=assign.get("radius_nm", 30.0), threshold=assign.get("threshold"), **net)
        if role in ("mask_pruner", "prox_pruner"):
            return PrunerAssigner("mask" if role == "mask_pruner" else "proximity",
                                  radius_nm=assign.get("radius_nm", 30.0), d_max=prox.get("d_max", 120.0), **net)
        return CleftDetector(
            "mask" if role == "cleft_mask" else "signed_proximity",
            threshold=detect.get("threshold", 0.5),
            min_size=detect.get("min_size", 0),
            overlap=tuple(detect.get("overlap", (4, 16, 16))),
            d_max=prox.get("d_max", 120.0),
            **net,
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad settings for {role}: {exc}") from None


def load_role(cfg: ExperimentConfig, role: str):
    est = make_estimator(cfg, role)
    path = cfg.checkpoint(role)
    if not path.exists():
        raise CliError(f"no checkpoint for {role} at {path}; run `avan train` first", "missing_artifact", path=str(path))
    network, _ = load_checkpoint(path)
    return est.set_network(network)


def load_split(cfg: ExperimentConfig, split: str):
    if split not in SPLITS:
        raise CliError(f"unknown split {split!r}; expected one of {list(SPLITS)}")
    path = cfg.world_dir(split)
    if not (path / "world.json").exists():
        raise CliError(f"no generated world at {path}; run `avan generate` first", "missing_artifact", path=str(path))
    return load_world(path)


def _assigner(cfg, name: str, world):
    if name == "oracle":
        a = cfg.section("assign")
        est = AVANAssigner(radius_nm=a.get("radius_nm", 30.0), threshold=a.get("threshold"))
        return est.set_network(PartnerMaskOracle(world))
    if name not in ASSIGNERS:
        raise CliError(f"unknown assigner {name!r}; expected one of {list(ASSIGNERS)}")
    return load_role(cfg, name)


def _detector(cfg, name: str, world):
    if name == "oracle":
        return CleftDetector().set_network(GroundTruthDetector(world))
    if name not in DETECTORS:
        raise CliError(f"unknown detector {name!r}; expected one of {list(DETECTORS)}")
    return load_role(cfg, name)


def _relative(cfg, path: Path) -> str:
    try:
        return str(path.resolve().relative_to(cfg.base_dir))
    except ValueError:
        return str(path)


# commands -----------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> dict:
    params = cfg.gen_params()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        world = make_world(params)
    parts = split_slabs(world)
    bounds = slab_bounds(world.shape[0])
    manifest = {**cfg.stamp(), "shape": list(world.shape), "flags": list(world.flags),
                "warnings": [str(w.message) for w in caught], "splits": {}}
    for name, part in parts.items():
        save_world(part, cfg.world_dir(name))
        manifest["splits"][name] = {"z_range": list(bounds[name]), "n_synapses": len(part.true_edges),
                                    "path": _relative(cfg, cfg.world_dir(name))}
    dump_report(manifest, cfg.paths["data"] / "worlds" / "manifest.json")
    return manifest


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    roles = [args.role] if args.role else cfg.section("train").get("roles", ["avan"])
    out = {**cfg.stamp(), "trained": {}}
    train_world = load_split(cfg, "train")
    for role in roles:
        est = make_estimator(cfg, role)
        ck = cfg.checkpoint(role)
        est.fit([train_world], checkpoint_path=ck, resume=args.resume)
        log_path = cfg.paths["checkpoints"] / f"{role}_loss.csv"
        write_loss_log(log_path, est.loss_log_)
        out["trained"][role] = {
            "checkpoint": _relative(cfg, ck),
            "loss_log": _relative(cfg, log_path),
            "iterations": est.loss_log_[-1][0] if est.loss_log_ else 0,
            "final_loss": est.loss_log_[-1][1] if est.loss_log_ else None,
            "deterministic": bool(getattr(est, "deterministic_", True)),
        }
    return out


def cmd_detect(cfg: ExperimentConfig, args) -> dict:
    world = load_split(cfg, args.split)
    name = args.detector or cfg.section("detect").get("detector", "cleft_mask")
    det = _detector(cfg, name, world)
    pred = det.predict_proba(world.image)
    labels = world.cleft_labels if name == "oracle" else det.predict(world.image)
    out_dir = cfg.paths["data"] / "detections" / f"{args.split}_{name}"
    save_volume(pred, out_dir / "prediction")
    save_volume(labels, out_dir / "instances")
    matching = match_clefts(labels, world.cleft_labels)
    report = {**cfg.stamp(), "split": args.split, "detector": name,
              "n_instances": int(len(np.unique(labels.data)) - (labels.data == 0).any()),
              "n_true": len(world.true_edges), "n_detected": len(matching.detections),
              "instances": _relative(cfg, out_dir / "instances")}
    dump_report(report, out_dir / "report.json")
    return report


def cmd_assign(cfg: ExperimentConfig, args) -> dict:
    world = load_split(cfg, args.split)
    name = args.assigner or cfg.section("assign").get("assigner", "avan")
    est = _assigner(cfg, name, world)
    labels = None
    source = "ground_truth"
    if args.instances:
        labels = load_volume(cfg.resolve(args.instances))
        source = _relative(cfg, cfg.resolve(args.instances))
    if isinstance(est, PrunerAssigner) and est.variant == "proximity":
        rep = None
        if labels is not None:
            pred_path = cfg.resolve(args.instances).parent / "prediction"
            if not pred_path.exists():
                raise CliError("proximity pruner on detected clefts needs the detector's prediction volume",
                               "missing_artifact", path=str(pred_path))
            rep = load_volume(pred_path)
        graph = est.predict(world, labels, rep)
    else:
        graph = est.predict(world, labels)
    graph.provenance = _jsonable({**graph.provenance, **cfg.stamp(), "assigner": name, "clefts": source,
                                  "split": args.split})
    path = cfg.paths["reports"] / f"edges_{name}_{args.split}.json"
    save_edges(graph, path)
    return {**cfg.stamp(), "edges": _relative(cfg, path), "n_edges": len(graph), "split": args.split}


def cmd_evaluate(cfg: ExperimentConfig, args) -> dict:
    world = load_split(cfg, args.split)
    graph = load_edges(cfg.resolve(args.edges))
    truth = EdgeGraph(world.true_edges)
    report: dict[str, Any] = {**cfg.stamp(), "split": args.split, "edges": _relative(cfg, cfg.resolve(args.edges))}
    if args.instances:
        labels = load_volume(cfg.resolve(args.instances))
        report["mode"] = "edge_prf"
        report["metrics"] = edge_prf(graph, truth, match_clefts(labels, world.cleft_labels))
    else:
        expected, got = set(truth), set(graph)
        report["mode"] = "assignment_accuracy"
        report["skipped_clefts"] = sorted(expected - got)
        filled = EdgeGraph([graph[k] for k in sorted(expected & got)])
        correct = sum(filled[k].same_partners(truth[k]) for k in filled)
        report["metrics"] = {
            "accuracy": correct / len(truth) if truth else 0.0,
            "accuracy_on_assigned": assignment_accuracy(filled, EdgeGraph(truth[k] for k in filled)) if filled else 0.0,
            "n_true": len(truth),
            "n_correct": int(correct),
        }
        report["per_cleft"] = [
            {"cleft_id": k, "correct": bool(k in graph and graph[k].same_partners(truth[k]))} for k in truth
        ]
    path = cfg.paths["reports"] / f"eval_{Path(args.edges).stem}.json"
    dump_report(report, path)
    report["report"] = _relative(cfg, path)
    return report


def cmd_gridsearch(cfg: ExperimentConfig, args) -> dict:
    val, test = load_split(cfg, "val"), load_split(cfg, "test")
    g = cfg.section("grid")
    det_name = args.detector or g.get("detector", "cleft_mask")
    ass_name = args.assigner or g.get("assigner", "avan")
    try:
        grid = GridSpec(
            thresholds=tuple(g.get("thresholds", (0.5,))),
            min_sizes=tuple(g.get("min_sizes", (0,))),
            radii_nm=tuple(g.get("radii_nm", (cfg.section("assign").get("radius_nm", 30.0),))),
            polyadic_thresholds=tuple(g.get("polyadic_thresholds", (None,))),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if "oracle" in (det_name, ass_name):
        system = _PerWorldSystem(lambda w: CombinedSystem(_detector(cfg, det_name, w), _assigner(cfg, ass_name, w),
                                                          f"{det_name}+{ass_name}"))
    else:
        system = CombinedSystem(load_role(cfg, det_name), load_role(cfg, ass_name), f"{det_name}+{ass_name}")
    report = {**cfg.stamp(), "detector": det_name, "assigner": ass_name,
              **grid_search(system, grid, val, test)}
    path = cfg.paths["reports"] / f"grid_{det_name}_{ass_name}.json"
    dump_report(report, path)
    return {**report, "report": _relative(cfg, path)}


class _PerWorldSystem:
    """Oracle parts are bound to one world, so each scored world gets its own system."""

    def __init__(self, factory):
        self.factory = factory
        self.systems: dict[int, tuple[Any, CombinedSystem]] = {}

    def evaluate(self, world, point):
        if id(world) not in self.systems:
            self.systems[id(world)] = (world, self.factory(world))
        return self.systems[id(world)][1].evaluate(world, point)


def cmd_disagree(cfg: ExperimentConfig, args) -> dict:
    a, b = load_edges(cfg.resolve(args.a)), load_edges(cfg.resolve(args.b))
    try:
        entries = disagreement_report(a, b)
    except KeyError as exc:
        raise CliError(f"edge files cover different clefts: {exc}", "key_mismatch") from None
    report = {**cfg.stamp(), "a": _relative(cfg, cfg.resolve(args.a)), "b": _relative(cfg, cfg.resolve(args.b)),
              "n_disagreements": len(entries), "disagreements": entries}
    path = cfg.paths["reports"] / f"disagree_{Path(args.a).stem}_vs_{Path(args.b).stem}.json"
    dump_report(report, path)
    return {**report, "report": _relative(cfg, path)}


def cmd_plot(cfg: ExperimentConfig, args) -> dict:
    points = []
    for item in args.reports:
        rep = json.loads(cfg.resolve(item).read_text())
        metrics = rep.get("test") or rep.get("metrics") or {}
        if "precision" not in metrics:
            raise CliError(f"report {item} has no precision/recall metrics", "bad_report", path=item)
        label = f"{rep.get('detector', '?')}+{rep.get('assigner', '?')}" if "test" in rep else Path(item).stem
        points.append((float(metrics["precision"]), float(metrics["recall"]), label))
    out = cfg.paths["reports"] / (args.output or "pr_scatter.png")
    pr_scatter(points, out)
    return {**cfg.stamp(), "plot": _relative(cfg, out), "points": [list(p) for p in points]}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "detect": cmd_detect,
    "assign": cmd_assign,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "disagree": cmd_disagree,
    "plot": cmd_plot,
}


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: list(o) if isinstance(o, (tuple, set)) else str(o)))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, "usage_error")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avan", description="Synaptic partner assignment experiments on synthetic EM worlds.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="experiment JSON config")
        return sp

    add("generate", "build a synthetic world and persist its train/val/test slabs")
    sp = add("train", "train one role (or the config's train.roles)")
    sp.add_argument("--role", choices=ROLES)
    sp.add_argument("--resume", action="store_true", help="continue from the role's checkpoint")
    sp = add("detect", "run a cleft detector over a split")
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--detector", choices=DETECTORS)
    sp = add("assign", "assign partners for every cleft of a split")
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--assigner", choices=ASSIGNERS)
    sp.add_argument("--instances", help="cleft instance volume (default: ground-truth clefts)")
    sp = add("evaluate", "score an edge file against a split's truth")
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--edges", required=True)
    sp.add_argument("--instances", help="instance volume the edges refer to (enables edge P/R/F1)")
    sp = add("gridsearch", "combined detector+assigner grid search on val, reported on test")
    sp.add_argument("--detector", choices=DETECTORS)
    sp.add_argument("--assigner", choices=ASSIGNERS)
    sp = add("disagree", "list clefts where two edge files differ")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp = add("plot", "precision-recall scatter with F1 level sets")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--output")
    return p


def _fail(kind: str, message: str, command: str | None, code: int, **details) -> int:
    payload = {"error": kind, "message": message, "command": command, **details}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = ExperimentConfig.load(args.config)
        result = COMMANDS[command](cfg, args)
        sys.stdout.write(json.dumps(_jsonable(result), sort_keys=True) + "\n")
        return 0
    except CliError as exc:
        return _fail(exc.kind, str(exc), command, 4 if exc.kind == "io_error" else 2, **exc.details)
    except FloatingPointError as exc:
        return _fail("training_diverged", str(exc), command, 3)
    except ValueError as exc:
        return _fail("value_error", str(exc), command, 2)
    except OSError as exc:
        return _fail("io_error", str(exc), command, 4, path=getattr(exc, "filename", None))
    except Exception as exc:  # noqa: BLE001 - every failure must reach stderr as JSON
        return _fail(type(exc).__name__, str(exc), command, 1)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
