"""Six-class adversarial datasets persisted as checksummed shards + a JSON manifest.

Directory layout::

    <root>/<dataset_tag>/<victim_id>/<split>/shard_00000.bin
    <root>/<dataset_tag>/<victim_id>/manifest.json

Shard file::

    b"ADVSHRD\\0" | u32 version | u32 count | u32 C | u32 H | u32 W
    count fixed-stride records (see ``record_dtype``)
    8-byte BLAKE2b digest of everything before it

The manifest is written last, through an atomic rename, so a directory
without ``manifest.json`` is an interrupted run.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .attacks import AdversarialRecord, AttackConfig, AttackKind, attack_batch
from .checkpoint import CorruptionError, atomic_write, digest64
from .data import ImageSet

log = logging.getLogger(__name__)

SHARD_MAGIC = b"ADVSHRD\0"
SHARD_VERSION = 1
SHARD_CAP = 4096
_HEADER = struct.Struct("<8sIIIII")


class CorruptShardError(CorruptionError):
    pass


def record_dtype(shape) -> np.dtype:
    return np.dtype([
        ("clean_id", "<i8"), ("label", "<i4"), ("kind", "u1"), ("success", "u1"),
        ("config_index", "<u2"), ("n_iter", "<u4"), ("patch", "<i2", (3,)), ("_pad", "<i2"),
        ("x_clean", "<f4", tuple(shape)), ("x_adv", "<f4", tuple(shape)),
    ])


def encode_shard(rows: np.ndarray, shape) -> bytes:
    body = _HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(rows), *shape) + rows.tobytes()
    return body + digest64(body)


def decode_shard(raw: bytes, name: str = "shard") -> np.ndarray:
    if len(raw) < _HEADER.size + 8:
        raise CorruptShardError(f"{name}: truncated")
    body, digest = raw[:-8], raw[-8:]
    if digest64(body) != digest:
        raise CorruptShardError(f"{name}: checksum mismatch")
    magic, version, count, c, h, w = _HEADER.unpack_from(body)
    if magic != SHARD_MAGIC or version != SHARD_VERSION:
        raise CorruptShardError(f"{name}: bad magic or version")
    dt = record_dtype((c, h, w))
    if len(body) - _HEADER.size != count * dt.itemsize:
        raise CorruptShardError(f"{name}: record block length mismatch")
    return np.frombuffer(body, dtype=dt, offset=_HEADER.size, count=count)


@dataclass
class DatasetManifest:
    dataset_tag: str
    victim_id: str
    victim_checksum: str
    seed: int
    image_shape: tuple[int, int, int]
    splits: dict[str, list[dict]]
    class_counts: dict[str, int]
    configs: dict[str, list[dict]]
    warnings: list[str] = field(default_factory=list)
    root: Path | None = None
    access_log: list[tuple[str, tuple[str, ...]]] = field(default_factory=list, repr=False)

    @property
    def directory(self) -> Path:
        return Path(self.root) / self.dataset_tag / self.victim_id

    def config_for(self, kind, index: int) -> AttackConfig:
        return AttackConfig.from_dict(self.configs[AttackKind.parse(kind).label][index])

    def kinds_in(self, split: str) -> set[AttackKind]:
        kinds = set()
        for shard in self.splits[split]:
            kinds |= {AttackKind.parse(k) for k, n in shard["class_counts"].items() if n}
        return kinds

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k not in ("root", "access_log")}
        d["format_version"] = SHARD_VERSION
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self) -> Path:
        path = self.directory / "manifest.json"
        atomic_write(path, self.to_json())
        return path


def load_manifest(path) -> DatasetManifest:
    """Load from a ``manifest.json`` path or the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    d = json.loads(path.read_text())
    d.pop("format_version", None)
    d["image_shape"] = tuple(d["image_shape"])
    m = DatasetManifest(**d)
    m.root = path.parent.parent.parent
    return m


class _ShardWriter:
    def __init__(self, directory: Path, shape, cap: int):
        self.directory, self.shape, self.cap = directory, tuple(shape), cap
        self.dtype = record_dtype(shape)
        self.buffer: list[np.ndarray] = []
        self.pending = 0
        self.shards: list[dict] = []

    def add(self, rows: np.ndarray):
        while len(rows):
            take = min(len(rows), self.cap - self.pending)
            self.buffer.append(rows[:take])
            self.pending += take
            rows = rows[take:]
            if self.pending == self.cap:
                self.flush()

    def flush(self):
        if not self.pending:
            return
        rows = np.concatenate(self.buffer)
        name = f"shard_{len(self.shards):05d}.bin"
        raw = encode_shard(rows, self.shape)
        atomic_write(self.directory / name, raw)
        counts = Counter(AttackKind(int(k)).label for k in rows["kind"])
        self.shards.append({"file": name, "records": int(len(rows)),
                            "checksum": raw[-8:].hex(), "class_counts": dict(counts)})
        self.buffer, self.pending = [], 0


def _rows(records: list[AdversarialRecord], config_index: list[int], dtype) -> np.ndarray:
    rows = np.zeros(len(records), dtype=dtype)
    for i, r in enumerate(records):
        rows[i]["clean_id"] = r.clean_id
        rows[i]["label"] = r.label
        rows[i]["kind"] = int(r.kind)
        rows[i]["success"] = r.success
        rows[i]["config_index"] = config_index[i]
        rows[i]["n_iter"] = r.n_iter
        rows[i]["patch"] = r.patch_box if r.patch_box else (-1, -1, -1)
    rows["x_clean"] = torch.stack([r.x_clean for r in records]).numpy()
    rows["x_adv"] = torch.stack([r.x_adv for r in records]).numpy()
    return rows


def grid_choice(seed: int, kind: AttackKind, clean_id: int, n_options: int) -> int:
    """Seeded uniform pick of one grid point per (kind, sample)."""
    if n_options == 1:
        return 0
    return int(np.random.default_rng([seed, int(kind), int(clean_id)]).integers(n_options))


def generate_dataset(victim, base_data: dict[str, ImageSet],
                     grid: dict[AttackKind, list[AttackConfig]], seed: int, root,
                     dataset_tag: str = "desk", batch_size: int = 100,
                     shard_size: int = SHARD_CAP) -> DatasetManifest:
    """Attack every base image with every requested kind and persist the result.

    ``grid`` maps each kind to one or more configs; every sample draws one of
    them uniformly (seeded by ``seed``, kind and image id). The config seed is
    overwritten with ``seed`` so patch placement is reproducible.
    """
    grid = {AttackKind.parse(k): [c if c.seed == seed else _reseed(c, seed) for c in v]
            for k, v in grid.items()}
    victim_id = getattr(victim, "victim_id", "victim")
    checksum = victim.checksum() if hasattr(victim, "checksum") else ""
    shape = None
    splits, totals, warnings = {}, Counter(), []
    manifest = DatasetManifest(dataset_tag, victim_id, checksum, seed, (0, 0, 0), {}, {},
                               {k.label: [c.to_dict() for c in v] for k, v in sorted(grid.items())},
                               root=Path(root))
    for split, data in base_data.items():
        shape = data.shape
        writer = _ShardWriter(manifest.directory / split, shape, shard_size)
        for kind in sorted(grid):
            cfgs = grid[kind]
            choice = np.array([grid_choice(seed, kind, i, len(cfgs)) for i in data.ids.tolist()])
            successes = 0
            for start in range(0, len(data), batch_size):
                sl = slice(start, start + batch_size)
                x, y, ids = data.images[sl], data.labels[sl], data.ids[sl]
                ch = choice[sl]
                out: list[AdversarialRecord | None] = [None] * len(ids)
                for gi in np.unique(ch):
                    sel = np.flatnonzero(ch == gi)
                    recs = attack_batch(victim, x[sel], y[sel], cfgs[gi], ids[sel].tolist())
                    for j, r in zip(sel, recs):
                        out[j] = r
                successes += sum(r.success for r in out)
                writer.add(_rows(out, ch.tolist(), writer.dtype))
            totals[kind.label] += len(data)
            if kind != AttackKind.CLEAN and len(data) and successes == 0:
                warnings.append(f"{split}/{kind.label}: attack never succeeded")
            log.info("%s %s: %d/%d successful", split, kind.label, successes, len(data))
        writer.flush()
        splits[split] = writer.shards
    manifest.splits = splits
    manifest.class_counts = dict(totals)
    manifest.warnings = warnings
    manifest.image_shape = tuple(shape or (0, 0, 0))
    manifest.save()
    return manifest


def _reseed(cfg: AttackConfig, seed: int) -> AttackConfig:
    from dataclasses import replace
    return replace(cfg, seed=seed)


def _read_shard(manifest: DatasetManifest, split: str, shard: dict) -> np.ndarray:
    path = manifest.directory / split / shard["file"]
    raw = path.read_bytes()
    name = f"{split}/{shard['file']}"
    if raw[-8:].hex() != shard["checksum"]:
        raise CorruptShardError(f"{name}: checksum differs from manifest")
    return decode_shard(raw, name)


def load_split(manifest: DatasetManifest, split: str, kinds=None) -> Iterator[AdversarialRecord]:
    """Yield records of ``split`` in shard order, optionally restricted to ``kinds``."""
    if split not in manifest.splits:
        raise KeyError(f"split {split!r} not in manifest")
    wanted = None if kinds is None else {int(AttackKind.parse(k)) for k in kinds}
    for shard in manifest.splits[split]:
        rows = _read_shard(manifest, split, shard)
        for row in rows:
            if wanted is not None and int(row["kind"]) not in wanted:
                continue
            kind = AttackKind(int(row["kind"]))
            x_clean = torch.from_numpy(row["x_clean"].copy())
            x_adv = torch.from_numpy(row["x_adv"].copy())
            box = tuple(int(v) for v in row["patch"])
            yield AdversarialRecord(
                clean_id=int(row["clean_id"]), label=int(row["label"]), x_clean=x_clean,
                x_adv=x_adv, delta=x_adv.double() - x_clean.double(), kind=kind,
                success=bool(row["success"]), victim_id=manifest.victim_id,
                config=manifest.config_for(kind, int(row["config_index"])),
                n_iter=int(row["n_iter"]), patch_box=None if box[0] < 0 else box)


ARRAY_FIELDS = ("x_clean", "x_adv", "kind", "label", "success", "clean_id")


def load_arrays(manifest: DatasetManifest, split: str, fields=("x_adv", "kind"),
                kinds=None) -> dict[str, torch.Tensor]:
    """Bulk-load selected columns of a split as tensors.

    Only the requested ``fields`` are materialized, and every call is appended
    to ``manifest.access_log`` so callers can prove which columns they read.
    """
    fields = tuple(fields)
    bad = set(fields) - set(ARRAY_FIELDS)
    if bad:
        raise KeyError(f"unknown fields {sorted(bad)}")
    manifest.access_log.append((split, fields))
    wanted = None if kinds is None else [int(AttackKind.parse(k)) for k in kinds]
    cols = {f: [] for f in fields}
    for shard in manifest.splits[split]:
        rows = _read_shard(manifest, split, shard)
        if wanted is not None:
            rows = rows[np.isin(rows["kind"], wanted)]
        for f in fields:
            cols[f].append(np.array(rows[f]))
    out = {}
    for f, parts in cols.items():
        arr = np.concatenate(parts) if parts else np.zeros(0)
        if f in ("kind", "label", "clean_id"):
            out[f] = torch.from_numpy(arr.astype(np.int64))
        elif f == "success":
            out[f] = torch.from_numpy(arr.astype(bool))
        else:
            out[f] = torch.from_numpy(arr.astype(np.float32))
    return out


def shard_checksums(manifest: DatasetManifest) -> dict[str, list[str]]:
    return {s: [sh["checksum"] for sh in shards] for s, shards in manifest.splits.items()}
