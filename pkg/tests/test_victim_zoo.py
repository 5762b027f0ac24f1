import numpy as np
import pytest
import torch
import torch.nn as nn

from advsig.checkpoint import state_checksum
from advsig.data import ImageSet, cifar10_dir, load_dataset, photo_crops
from advsig.victim_zoo import (REGISTRY, ConfigurationError, RegistryError, TrainSchedule,
                               VictimSpec, build_victim, evaluate_accuracy, load_victim,
                               save_victim, train_victim)


@pytest.mark.parametrize("arch", sorted(REGISTRY))
def test_build_is_deterministic(arch):
    spec = VictimSpec(arch, width=4, seed=7)
    a, b = build_victim(spec), build_victim(spec)
    assert a.checksum() == b.checksum()
    assert build_victim(VictimSpec(arch, width=4, seed=8)).checksum() != a.checksum()
    assert a(torch.rand(2, 3, 32, 32)).shape == (2, 10)


def test_unknown_arch_and_bad_spec():
    with pytest.raises(RegistryError):
        build_victim(VictimSpec("alexnet"))
    with pytest.raises(ConfigurationError):
        VictimSpec("desk_cnn", num_classes=1)
    with pytest.raises(ConfigurationError):
        VictimSpec("desk_cnn", input_shape=(3, 0, 32))


@pytest.mark.parametrize("arch", sorted(REGISTRY))
def test_filter_index_partitions_conv_parameters(arch):
    v = build_victim(VictimSpec(arch, width=4))
    offsets, conv = 0, set()
    for name, p in v.model.named_parameters():
        owner = name.rsplit(".", 1)[0]
        if isinstance(dict(v.model.named_modules())[owner], nn.Conv2d):
            conv |= set(range(offsets, offsets + p.numel()))
        offsets += p.numel()
    seen = set()
    for idx in v.filter_index.values():
        s = set(np.asarray(idx).tolist())
        assert not s & seen
        seen |= s
    assert seen == conv
    assert sum(c for _, c in v.layer_filters) == len(v.filter_index)


def test_schedule_law_and_validation():
    s = TrainSchedule(epochs=50, base_lr=0.01, decay_epochs=(25, 40), decay_factor=10)
    lrs = [s.lr_at(e) for e in range(50)]
    assert set(lrs[:25]) == {0.01}
    assert all(v == pytest.approx(1e-3) for v in lrs[25:40])
    assert all(v == pytest.approx(1e-4) for v in lrs[40:])
    for bad in [dict(decay_epochs=(40, 25)), dict(decay_epochs=(50,)), dict(momentum=1.0)]:
        with pytest.raises(ConfigurationError):
            TrainSchedule(epochs=50, **bad)


def _small_data(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageSet(torch.rand(n, 3, 32, 32, generator=g), torch.arange(n) % 10, torch.arange(n))


def test_zero_epochs_is_identity():
    v = build_victim(VictimSpec("desk_cnn", width=4))
    out = train_victim(v, _small_data(), TrainSchedule(epochs=0, decay_epochs=()))
    assert out.checksum() == v.checksum() and out.train_log == []


def test_training_is_deterministic_and_logs_lr():
    v = build_victim(VictimSpec("desk_cnn", width=4))
    sched = TrainSchedule(epochs=3, base_lr=0.05, decay_epochs=(2,), batch_size=16)
    a = train_victim(v, _small_data(), sched, seed=1)
    b = train_victim(v, _small_data(), sched, seed=1)
    assert a.checksum() == b.checksum() != v.checksum()
    assert [e["lr"] for e in a.train_log] == pytest.approx([0.05, 0.05, 0.005])


def test_empty_data_rejected():
    v = build_victim(VictimSpec("desk_cnn", width=4))
    empty = ImageSet(torch.zeros(0, 3, 32, 32), torch.zeros(0, dtype=torch.long), torch.zeros(0))
    with pytest.raises((ConfigurationError, ValueError)):
        train_victim(v, empty, TrainSchedule(epochs=1, decay_epochs=()))
    with pytest.raises(ValueError):
        evaluate_accuracy(v, empty)


class Favor0(nn.Module):
    def forward(self, x):
        out = torch.zeros(len(x), 10)
        out[:, 0] = 1
        return out


def test_accuracy_trivial_and_permutation_invariant():
    data = ImageSet(torch.rand(20, 3, 8, 8), torch.zeros(20, dtype=torch.long), torch.arange(20))
    acc, preds = evaluate_accuracy(Favor0(), data)
    assert acc == 1.0 and len(preds) == 20
    v = build_victim(VictimSpec("desk_cnn", width=4, seed=2))
    d = _small_data(50)
    perm = torch.randperm(50)
    a1, _ = evaluate_accuracy(v, d)
    a2, _ = evaluate_accuracy(v, ImageSet(d.images[perm], d.labels[perm], d.ids[perm]))
    assert a1 == a2


def test_random_init_is_near_chance():
    data = photo_crops(20, split="test", seed=0)
    accs = [evaluate_accuracy(build_victim(VictimSpec("desk_cnn", seed=s)), data)[0]
            for s in range(10)]
    assert all(0.02 <= a <= 0.25 for a in accs), accs


def _early_curves(data, seeds=range(5)):
    # the first five epochs of a 20-epoch run; no decay point falls inside them
    sched = TrainSchedule(epochs=5, base_lr=0.01, decay_epochs=())
    curves = []
    for seed in seeds:
        v = train_victim(build_victim(VictimSpec("desk_cnn", width=16, seed=seed)), data, sched,
                         seed=seed)
        curves.append([e["train_acc"] for e in v.train_log])
    return curves


@pytest.mark.skipif(cifar10_dir() is None, reason="CIFAR-10 not available (set CIFAR10_DIR)")
def test_train_accuracy_rises_early_cifar10():
    curves = _early_curves(load_dataset("cifar10", "train", 5000))
    assert sum(all(b > a for a, b in zip(c, c[1:])) for c in curves) >= 4


def test_train_accuracy_rises_early_photo_crops():
    # crops saturate near 90% by epoch 3, so single-epoch dips are common;
    # check net progress instead of strict monotonicity
    curves = _early_curves(photo_crops(500, split="train", seed=0))
    assert all(c[-1] > c[0] + 0.1 for c in curves)
    assert all(max(c[2:]) > c[1] for c in curves)


def test_checkpoint_round_trip(tmp_path):
    v = build_victim(VictimSpec("resnet18", width=4, seed=5))
    save_victim(v, tmp_path / "v.ckpt")
    r = load_victim(tmp_path / "v.ckpt")
    assert r.checksum() == v.checksum() and r.victim_id == v.victim_id
    x = torch.rand(3, 3, 32, 32)
    assert torch.equal(r(x), v(x))
    assert state_checksum(r.model) == state_checksum(v.model)
