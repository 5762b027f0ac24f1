import json
import random

import numpy as np
import pytest
import torch

from advsig.adv_dataset import (CorruptShardError, decode_shard, encode_shard, generate_dataset,
                                grid_choice, load_arrays, load_manifest, load_split, record_dtype,
                                shard_checksums)
from advsig.attacks import AttackConfig, AttackKind, audit_record
from advsig.data import ImageSet


def test_counts_and_manifest_invariants(tiny_manifest):
    m = tiny_manifest
    assert m.class_counts == {k.label: 24 for k in AttackKind}
    total = sum(sh["records"] for shards in m.splits.values() for sh in shards)
    assert total == sum(m.class_counts.values())
    for split, shards in m.splits.items():
        for sh in shards:
            raw = (m.directory / split / sh["file"]).read_bytes()
            assert raw[-8:].hex() == sh["checksum"]
            assert sh["records"] <= 40


def test_every_record_audits_clean(tiny_manifest, tiny_victim):
    for split in ("train", "test"):
        for rec in load_split(tiny_manifest, split):
            assert audit_record(rec, tiny_victim) == []
            if rec.kind == AttackKind.CLEAN:
                assert torch.equal(rec.x_adv, rec.x_clean)


def test_filter_and_order(tiny_manifest):
    pgd = list(load_split(tiny_manifest, "train", kinds=["PGD"]))
    assert len(pgd) == 16 and all(r.kind == AttackKind.PGD for r in pgd)
    a = [(r.clean_id, int(r.kind)) for r in load_split(tiny_manifest, "train")]
    b = [(r.clean_id, int(r.kind)) for r in load_split(tiny_manifest, "train")]
    assert a == b


def test_provenance_from_manifest_alone(tiny_manifest):
    m = load_manifest(tiny_manifest.directory)
    for rec in load_split(m, "test"):
        cfgs = [AttackConfig.from_dict(d) for d in m.configs[rec.kind.label]]
        assert rec.config in cfgs
        n = len(cfgs)
        assert rec.config == cfgs[grid_choice(m.seed, rec.kind, rec.clean_id, n)]


def test_round_trip_bitwise(tiny_manifest, tiny_victim, tiny_images):
    from advsig.attacks import attack_batch
    from advsig.adv_dataset import _rows
    x, y = tiny_images
    recs = attack_batch(tiny_victim, x, y, AttackConfig(AttackKind.PGD, steps=3), range(12))
    dt = record_dtype((3, 8, 8))
    rows = decode_shard(encode_shard(_rows(recs, [0] * 12, dt), (3, 8, 8)))
    sample = random.Random(0).sample(range(12), 8)
    for i in sample:
        assert np.array_equal(rows[i]["x_adv"], recs[i].x_adv.numpy())
        assert np.array_equal(rows[i]["x_clean"], recs[i].x_clean.numpy())
        assert int(rows[i]["label"]) == recs[i].label and bool(rows[i]["success"]) == recs[i].success


def test_corruption_named(tiny_manifest, tmp_path):
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(tiny_manifest.root, dst)
    m = load_manifest(dst / tiny_manifest.dataset_tag / tiny_manifest.victim_id)
    shard = m.directory / "train" / m.splits["train"][1]["file"]
    raw = bytearray(shard.read_bytes())
    raw[100] ^= 1
    shard.write_bytes(bytes(raw))
    with pytest.raises(CorruptShardError, match=m.splits["train"][1]["file"]):
        list(load_split(m, "train"))
    with pytest.raises(CorruptShardError):
        decode_shard(bytes(raw))


def test_clean_only_is_copy_and_regeneration_reproducible(tiny_victim, tmp_path):
    g = torch.Generator().manual_seed(5)
    data = ImageSet(torch.rand(6, 3, 8, 8, generator=g), torch.arange(6), torch.arange(6))
    grid = {AttackKind.CLEAN: [AttackConfig(AttackKind.CLEAN, steps=0)]}
    a = generate_dataset(tiny_victim, {"train": data}, grid, 0, tmp_path / "a", "t")
    b = generate_dataset(tiny_victim, {"train": data}, grid, 0, tmp_path / "b", "t")
    assert shard_checksums(a) == shard_checksums(b)
    arr = load_arrays(a, "train", ("x_adv", "x_clean", "kind", "label"))
    assert torch.equal(arr["x_adv"], data.images) and torch.equal(arr["x_clean"], data.images)
    assert (arr["kind"] == 0).all() and torch.equal(arr["label"], data.labels)


def test_never_successful_attack_warns(tiny_victim, tmp_path):
    data = ImageSet(torch.rand(4, 3, 8, 8), torch.arange(4), torch.arange(4))
    grid = {AttackKind.PGD: [AttackConfig(AttackKind.PGD, steps=1, epsilon=0.0)]}
    m = generate_dataset(tiny_victim, {"train": data}, grid, 0, tmp_path, "t")
    with torch.no_grad():
        wrong = (tiny_victim(data.images).argmax(1) != data.labels).any()
    assert bool(m.warnings) != bool(wrong)


def test_manifest_written_last(tiny_manifest):
    d = json.loads((tiny_manifest.directory / "manifest.json").read_text())
    assert d["victim_checksum"] == tiny_manifest.victim_checksum
    assert not list(tiny_manifest.directory.rglob("*.tmp*"))


def test_access_log_records_columns(tiny_manifest):
    n = len(tiny_manifest.access_log)
    load_arrays(tiny_manifest, "test", ("x_adv", "kind"))
    assert tiny_manifest.access_log[n:] == [("test", ("x_adv", "kind"))]
    with pytest.raises(KeyError):
        load_arrays(tiny_manifest, "test", ("delta",))
