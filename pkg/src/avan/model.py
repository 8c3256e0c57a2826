"""Residual symmetric U-Net, loss, example sampling and the training loop.

The same architecture backs every learned component: the partner-mask
network (image + cleft mask in, pre/post masks out), the two pair pruners
(4 channels in, pooled to a single logit) and the cleft detectors.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .synthgen import SyntheticWorld
from .targets import partner_mask_targets
from .volume import DEFAULT_PATCH_SHAPE, PatchSpec, extract_patch

__all__ = [
    "NetConfig",
    "TrainSchedule",
    "TrainingExample",
    "RSUNet",
    "PooledHead",
    "build_network",
    "loss",
    "sample_cleft_location",
    "sample_training_example",
    "CleftExampleSampler",
    "train",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_log",
    "read_loss_log",
    "ROLE_CHANNELS",
]

logger = logging.getLogger(__name__)

ROLE_CHANNELS = {
    "avan": (2, 2),
    "mask_pruner": (4, 1),
    "prox_pruner": (4, 1),
    "cleft_mask": (1, 1),
    "cleft_prox": (1, 1),
}


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    out_channels: int = 2
    width: int = 8
    depth: int = 2
    upsample: str = "resize_conv"
    norm: str = "instance"
    patch_shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.upsample != "resize_conv":
            raise ValueError("only resize-convolution upsampling is supported")
        if self.norm not in _NORMS:
            raise ValueError(f"norm must be one of {sorted(_NORMS)}")
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))

    @classmethod
    def for_role(cls, role: str, **kw) -> "NetConfig":
        cin, cout = ROLE_CHANNELS[role]
        return cls(in_channels=cin, out_channels=cout, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 1000
    batch_size: int = 2
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-3),)
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        sched = tuple((int(i), float(lr)) for i, lr in self.lr_schedule)
        if not sched or sched[0][0] != 0:
            raise ValueError("lr schedule must start at iteration 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr schedule breakpoints must be strictly increasing")
        object.__setattr__(self, "lr_schedule", sched)

    def lr_at(self, iteration: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if iteration >= start:
                lr = value
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(p) for p in d["lr_schedule"])
        return cls(**d)


@dataclass(frozen=True)
class TrainingExample:
    inputs: np.ndarray
    targets: np.ndarray
    provenance: dict = field(default_factory=dict)


_NORMS = {
    "none": lambda c: nn.Identity(),
    "instance": lambda c: nn.InstanceNorm3d(c, affine=True),
    "batch": lambda c: nn.BatchNorm3d(c),
}


def _conv(cin, cout, kernel):
    return nn.Conv3d(cin, cout, kernel, padding=tuple(k // 2 for k in kernel))


class ResidualBlock(nn.Module):
    """In-plane embedding conv followed by a two-conv residual module."""

    def __init__(self, cin, cout, kernel=(3, 3, 3), norm="none"):
        super().__init__()
        self.embed = _conv(cin, cout, (1, 3, 3))
        self.conv1 = _conv(cout, cout, kernel)
        self.conv2 = _conv(cout, cout, kernel)
        self.n0, self.n1, self.n2 = (_NORMS[norm](cout) for _ in range(3))

    def forward(self, x):
        x = F.elu(self.n0(self.embed(x)))
        return F.elu(self.n2(x + self.conv2(F.elu(self.n1(self.conv1(x))))))


class ResizeConv(nn.Module):
    """Nearest-neighbour upsampling by (1, 2, 2) followed by a convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = _conv(cin, cout, (1, 3, 3))

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest"))


class RSUNet(nn.Module):
    """Symmetric U-Net with residual blocks and summing skip connections.

    Downsampling is in-plane only (1, 2, 2) max pooling, matching the coarse
    z resolution. The full-resolution level uses in-plane kernels.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = [config.width * 2**i for i in range(config.depth + 1)]
        top = (1, 3, 3)
        self.down = nn.ModuleList(
            [ResidualBlock(config.in_channels if i == 0 else w[i - 1], w[i], top if i == 0 else (3, 3, 3), config.norm)
             for i in range(config.depth)]
        )
        self.bottom = ResidualBlock(w[config.depth - 1], w[config.depth], norm=config.norm)
        self.up = nn.ModuleList([ResizeConv(w[i + 1], w[i]) for i in reversed(range(config.depth))])
        self.decode = nn.ModuleList(
            [ResidualBlock(w[i], w[i], top if i == 0 else (3, 3, 3), config.norm) for i in reversed(range(config.depth))]
        )
        self.head = nn.Conv3d(w[0], config.out_channels, 1)

    def forward(self, x):
        step = 2**self.config.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"incompatible depth: in-plane shape {tuple(x.shape[-2:])} not divisible by {step}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, (1, 2, 2))
        x = self.bottom(x)
        for up, block, skip in zip(self.up, self.decode, reversed(skips)):
            x = block(up(x) + skip)
        return self.head(x)


class PooledHead(nn.Module):
    """Global average pooling of a one-channel map into a single logit per sample."""

    def __init__(self, body: nn.Module):
        super().__init__()
        self.body = body

    @property
    def config(self) -> NetConfig:
        return self.body.config

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3, 4))


def build_network(config: NetConfig) -> nn.Module:
    """Seeded network instance; pruner roles (one output from four inputs) get a pooled head."""
    step = 2**config.depth
    if config.patch_shape[1] % step or config.patch_shape[2] % step:
        raise ValueError(f"incompatible depth: patch {config.patch_shape} not divisible by {step} in-plane")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = RSUNet(config)
    if config.in_channels == 4 and config.out_channels == 1:
        return PooledHead(net)
    return net


def loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-voxel, per-channel binary cross-entropy on logits."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(prediction, target)


def sample_cleft_location(world: SyntheticWorld, rng: np.random.Generator, coords=None):
    """Uniform cleft voxel; returns ``(cleft_id, (z, y, x))``."""
    if coords is None:
        coords = np.argwhere(world.cleft_labels.data > 0)
    if len(coords) == 0:
        raise ValueError("no training locations")
    c = tuple(int(v) for v in coords[rng.integers(len(coords))])
    return int(world.cleft_labels.data[c]), c


def _require_image(world: SyntheticWorld):
    if world.image is None:
        raise ValueError("world has no rendered image")
    return world.image


def sample_training_example(
    world: SyntheticWorld,
    rng: np.random.Generator,
    patch_shape=DEFAULT_PATCH_SHAPE,
    image_pad: float = 0.0,
    coords=None,
) -> TrainingExample:
    """Patch centred on a uniformly drawn cleft voxel: [image, cleft mask] -> [pre, post]."""
    cleft_id, center = sample_cleft_location(world, rng, coords)
    spec = PatchSpec(center, patch_shape, image_pad)
    image = extract_patch(_require_image(world), spec).data
    mask = extract_patch(world.cleft_labels, spec).data == cleft_id
    pre, post = partner_mask_targets(world, cleft_id, spec)
    return TrainingExample(
        inputs=np.stack([image, mask.astype(np.float32)]),
        targets=np.stack([pre.data, post.data]).astype(np.float32),
        provenance={"z_offset": world.z_offset, "cleft_id": cleft_id, "center": center},
    )


class CleftExampleSampler:
    """Callable ``rng -> (inputs, targets)`` over one or more worlds, cleft voxels cached."""

    def __init__(self, worlds: Sequence[SyntheticWorld], patch_shape=DEFAULT_PATCH_SHAPE, image_pad: float = 0.0):
        self.worlds = [w for w in worlds if w.true_edges]
        if not self.worlds:
            raise ValueError("no training locations")
        self.coords = [np.argwhere(w.cleft_labels.data > 0) for w in self.worlds]
        sizes = np.array([len(c) for c in self.coords], dtype=float)
        self.weights = sizes / sizes.sum()
        self.patch_shape = patch_shape
        self.image_pad = image_pad

    def __call__(self, rng: np.random.Generator):
        i = rng.choice(len(self.worlds), p=self.weights) if len(self.worlds) > 1 else 0
        ex = sample_training_example(self.worlds[i], rng, self.patch_shape, self.image_pad, self.coords[i])
        return ex.inputs, ex.targets


def train(
    network: nn.Module,
    sampler: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    schedule: TrainSchedule,
    *,
    start_iteration: int = 0,
    optimizer_state: dict | None = None,
    checkpoint_path: str | Path | None = None,
    loss_fn: Callable = loss,
):
    """Adam on ``loss_fn`` for ``schedule.iterations`` steps.

    Returns ``(network, loss_log, info)`` where ``loss_log`` holds
    ``(iteration, loss, lr)`` rows and ``info`` carries the optimizer state and
    the determinism flag. With ``start_iteration`` the sampler RNG and the
    iteration index continue from a previous run.
    """
    deterministic = True
    prev = torch.are_deterministic_algorithms_enabled()
    try:
        torch.use_deterministic_algorithms(True)
    except Exception:  # pragma: no cover - backend specific
        deterministic = False
        logger.warning("backend does not support deterministic algorithms; run is nondeterministic")
    rng = np.random.default_rng([schedule.seed, start_iteration])
    opt = torch.optim.Adam(network.parameters(), lr=schedule.lr_at(start_iteration))
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    log: list[tuple[int, float, float]] = []
    network.train()
    running, count = 0.0, 0
    end = start_iteration + schedule.iterations
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(schedule.seed + start_iteration)
            for it in range(start_iteration, end):
                lr = schedule.lr_at(it)
                for group in opt.param_groups:
                    group["lr"] = lr
                xs, ys = zip(*(sampler(rng) for _ in range(schedule.batch_size)))
                x = torch.from_numpy(np.stack(xs)).float().contiguous(memory_format=torch.channels_last_3d)
                y = torch.from_numpy(np.stack(ys)).float()
                opt.zero_grad(set_to_none=True)
                value = loss_fn(network(x), y)
                if not torch.isfinite(value):
                    raise FloatingPointError(f"non-finite loss {value.item()} at iteration {it} (lr={lr})")
                value.backward()
                opt.step()
                running += value.item()
                count += 1
                if (it + 1 - start_iteration) % schedule.log_every == 0 or it + 1 == end:
                    log.append((it + 1, running / count, lr))
                    running, count = 0.0, 0
    finally:
        torch.use_deterministic_algorithms(prev)
    network.eval()
    info = {"optimizer_state": opt.state_dict(), "deterministic": deterministic, "iteration": end}
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, network, schedule=schedule, loss_log=log, extra=info)
    return network, log, info


def run_training(network: nn.Module, sampler, schedule: TrainSchedule, *, loss_fn: Callable = loss,
                 checkpoint_path: str | Path | None = None, resume: bool = False):
    """Train from scratch, or continue the checkpoint at ``checkpoint_path``.

    ``schedule.iterations`` is the total; a resumed run only performs the
    remaining steps and its loss log extends the stored one. The checkpoint
    (if a path is given) is rewritten with the full log.
    """
    start, opt_state, prior = 0, None, []
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        payload = torch.load(Path(checkpoint_path), map_location="cpu", weights_only=False)
        stored = dict(payload["net_config"], patch_shape=tuple(payload["net_config"]["patch_shape"]))
        if NetConfig(**stored) != _unwrap_config(network):
            raise ValueError(f"checkpoint {checkpoint_path} was trained with a different network config")
        network.load_state_dict(payload["state_dict"])
        start, opt_state = int(payload["iteration"]), payload["optimizer_state"]
        prior = [tuple(r) for r in payload["loss_log"]]
    remaining = max(schedule.iterations - start, 0)
    network, log, info = train(
        network,
        sampler,
        TrainSchedule(remaining, schedule.batch_size, schedule.lr_schedule, schedule.log_every, schedule.seed),
        start_iteration=start,
        optimizer_state=opt_state,
        loss_fn=loss_fn,
    )
    if remaining == 0 and opt_state is not None:
        info["optimizer_state"] = opt_state
    log = prior + log
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, network, schedule=schedule, loss_log=log, extra=dict(info))
    return network, log, info


def _unwrap_config(network: nn.Module) -> NetConfig:
    return network.config


def save_checkpoint(path, network: nn.Module, *, schedule: TrainSchedule | None = None, loss_log=(), extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})
    payload = {
        "format": "avan-checkpoint/1",
        "net_config": _unwrap_config(network).to_dict(),
        "state_dict": network.state_dict(),
        "schedule": schedule.to_dict() if schedule else None,
        "loss_log": [list(r) for r in loss_log],
        "iteration": extra.pop("iteration", loss_log[-1][0] if loss_log else 0),
        "optimizer_state": extra.pop("optimizer_state", None),
        "deterministic": extra.pop("deterministic", True),
        "extra": extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = dict(payload["net_config"])
    cfg["patch_shape"] = tuple(cfg["patch_shape"])
    network = build_network(NetConfig(**cfg))
    network.load_state_dict(payload["state_dict"])
    network.eval()
    return network, payload


def write_loss_log(path, rows, append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["iteration", "loss", "lr"])
        for it, value, lr in rows:
            w.writerow([int(it), f"{value:.8g}", f"{lr:.8g}"])
    return path


def read_loss_log(path) -> list[tuple[int, float, float]]:
    with Path(path).open() as fh:
        return [(int(r["iteration"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


def forward_probabilities(network, inputs: np.ndarray) -> np.ndarray:
    """Sigmoid of the network output for one ``(C, Z, Y, X)`` array."""
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32))[None]
        out = network(x)
        if isinstance(out, torch.Tensor):
            return torch.sigmoid(out)[0].numpy()
        return 1.0 / (1.0 + np.exp(-np.asarray(out)[0]))


def count_parameters(network: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in network.parameters())
