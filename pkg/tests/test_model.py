from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from scipy import stats

from avan.edges import SynapseEdge
from avan.model import (
    NetConfig,
    PooledHead,
    TrainSchedule,
    build_network,
    count_parameters,
    forward_probabilities,
    load_checkpoint,
    loss,
    read_loss_log,
    sample_cleft_location,
    sample_training_example,
    save_checkpoint,
    train,
    write_loss_log,
)
from avan.synthgen import GenParams, SyntheticWorld
from avan.volume import LabelVolume, ScalarVolume
from oracles import bce_by_hand, finite_difference_check, relative_error

SMALL_PATCH = (4, 16, 16)


def fixed_sampler(x, y):
    return lambda rng: (x, y)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(depth=0)
    with pytest.raises(ValueError):
        NetConfig(upsample="transpose")
    with pytest.raises(ValueError):
        NetConfig(norm="group")
    assert NetConfig.for_role("mask_pruner").in_channels == 4
    with pytest.raises(ValueError, match="incompatible depth"):
        build_network(NetConfig(depth=5))


def test_avan_shape_contract():
    net = build_network(NetConfig(2, 2))
    out = net(torch.zeros(1, 2, 18, 80, 80))
    assert out.shape == (1, 2, 18, 80, 80)
    probs = forward_probabilities(net, np.random.default_rng(0).random((2, 18, 80, 80)))
    assert probs.shape == (2, 18, 80, 80)
    assert probs.min() > 0 and probs.max() < 1


@pytest.mark.parametrize("depth,shape", [(1, (3, 10, 14)), (2, (5, 16, 12)), (3, (2, 24, 8))])
def test_shape_contract_any_valid_depth(depth, shape):
    net = build_network(NetConfig(1, 3, width=2, depth=depth, patch_shape=(shape[0], 8 * shape[1], 8 * shape[2])))
    assert net(torch.zeros(1, 1, *shape)).shape == (1, 3, *shape)
    with pytest.raises(ValueError, match="incompatible depth"):
        net(torch.zeros(1, 1, shape[0], 2**depth + 1, shape[2]))


def test_pruner_role_is_pooled():
    net = build_network(NetConfig(4, 1, patch_shape=SMALL_PATCH))
    assert isinstance(net, PooledHead)
    assert net(torch.zeros(3, 4, *SMALL_PATCH)).shape == (3, 1)


def test_seeded_initialization():
    a, b = build_network(NetConfig(seed=3)), build_network(NetConfig(seed=3))
    c = build_network(NetConfig(seed=4))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)
    assert count_parameters(a) == sum(p.numel() for p in a.parameters())


def test_loss_values():
    t = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
    assert float(loss(torch.tensor([[50.0, -50.0, 50.0, -50.0]]), t)) < 1e-12
    assert float(loss(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 2, 2, 2))) == pytest.approx(math.log(2))
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1, 1, 2, 2, 2))
    y = (rng.random((1, 1, 2, 2, 2)) < 0.5).astype(float)
    got = float(loss(torch.from_numpy(z), torch.from_numpy(y)))
    assert got == pytest.approx(bce_by_hand(z, y), rel=1e-12)
    with pytest.raises(ValueError):
        loss(torch.zeros(2), torch.zeros(3))


def one_voxel_world(shape=(20, 90, 90)):
    seg = np.zeros(shape, dtype=np.uint32)
    seg[:, :, :44] = 1
    seg[:, :, 46:] = 2
    clefts = np.zeros(shape, dtype=np.uint32)
    clefts[10, 45, 45] = 1
    img = ScalarVolume(np.full(shape, 0.5))
    return SyntheticWorld(LabelVolume(seg), LabelVolume(clefts), (SynapseEdge(1, (1,), (2,)),), {1: "axon", 2: "dendrite"},
                          GenParams(), image=img)


def test_sampling_single_voxel_cleft():
    w = one_voxel_world()
    rng = np.random.default_rng(0)
    for _ in range(5):
        ex = sample_training_example(w, rng)
        assert ex.provenance["center"] == (10, 45, 45)
        assert ex.inputs.shape == (2, 18, 80, 80) and ex.targets.shape == (2, 18, 80, 80)
        assert ex.inputs[1, 9, 40, 40] == 1.0
        assert not np.any(ex.targets[0] * ex.targets[1])


def test_sampling_needs_clefts():
    w = one_voxel_world()
    empty = SyntheticWorld(w.segmentation, LabelVolume(np.zeros(w.shape)), (), {}, GenParams(), image=w.image)
    with pytest.raises(ValueError, match="no training locations"):
        sample_training_example(empty, np.random.default_rng(0))


def test_sampling_frequency_proportional_to_size(small_world):
    rng = np.random.default_rng(1)
    coords = np.argwhere(small_world.cleft_labels.data > 0)
    draws = [sample_cleft_location(small_world, rng, coords)[0] for _ in range(10_000)]
    ids = small_world.cleft_ids()
    counts = np.array([draws.count(i) for i in ids])
    sizes = np.array([(small_world.cleft_labels.data == i).sum() for i in ids], dtype=float)
    assert stats.chisquare(counts, sizes / sizes.sum() * counts.sum()).pvalue > 0.01


def test_schedule_validation():
    s = TrainSchedule(10, lr_schedule=((0, 1e-3), (5, 1e-4)))
    assert s.lr_at(4) == 1e-3 and s.lr_at(5) == 1e-4
    assert TrainSchedule.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        TrainSchedule(lr_schedule=((1, 1e-3),))
    with pytest.raises(ValueError):
        TrainSchedule(lr_schedule=((0, 1e-3), (0, 1e-4)))


def small_example(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((1, *SMALL_PATCH)).astype(np.float32)
    y = (x > 0.6).astype(np.float32)
    return x, y


def test_zero_iterations_leave_network_unchanged():
    net = build_network(NetConfig(1, 1, patch_shape=SMALL_PATCH))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net, log, _ = train(net, fixed_sampler(*small_example()), TrainSchedule(0))
    assert log == []
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_overfit_single_example():
    x, y = small_example()
    net = build_network(NetConfig(1, 1, patch_shape=SMALL_PATCH))
    _, log, _ = train(net, fixed_sampler(x, y), TrainSchedule(200, 1, ((0, 1e-2),), log_every=10))
    assert log[0][1] / log[-1][1] >= 10


def test_training_is_deterministic_and_resumable(tmp_path):
    x, y = small_example()

    def run(**kw):
        net = build_network(NetConfig(1, 1, patch_shape=SMALL_PATCH))
        sampler = lambda rng: (x + rng.normal(0, 0.1, x.shape).astype(np.float32), y)  # noqa: E731
        return train(net, sampler, TrainSchedule(6, 2, log_every=2, seed=1), **kw)

    a, b = run(), run()
    assert a[1] == b[1] and a[2]["deterministic"]
    ck = save_checkpoint(tmp_path / "c.pt", a[0], schedule=TrainSchedule(6), loss_log=a[1], extra=dict(a[2]))
    net, payload = load_checkpoint(ck)
    assert payload["iteration"] == 6 and payload["loss_log"][-1][0] == 6
    sa, sb = a[0].state_dict(), net.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    _, log, info = train(net, lambda rng: (x, y), TrainSchedule(4, 1, log_every=2), start_iteration=6,
                         optimizer_state=payload["optimizer_state"])
    assert [r[0] for r in log] == [8, 10] and info["iteration"] == 10
    path = write_loss_log(tmp_path / "loss.csv", a[1])
    write_loss_log(path, log, append=True)
    assert [r[0] for r in read_loss_log(path)] == [2, 4, 6, 8, 10]


def test_nan_loss_aborts():
    x, y = small_example()
    x = np.full_like(x, np.nan)
    net = build_network(NetConfig(1, 1, patch_shape=SMALL_PATCH))
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        train(net, fixed_sampler(x, y), TrainSchedule(3))


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = build_network(NetConfig(2, 2, width=2, depth=1, patch_shape=(3, 8, 8))).double()
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((1, 2, 3, 8, 8)))
    y = torch.from_numpy((rng.random((1, 2, 3, 8, 8)) < 0.5).astype(np.float64))
    pairs = finite_difference_check(net, x, y, loss, n_params=20)
    errors = [relative_error(a, n, floor=1e-7) for a, n in pairs]
    assert max(errors) < 1e-3, errors
