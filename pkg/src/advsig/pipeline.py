"""Run configuration and the workflow steps shared by the CLI and the experiment suite.

A workspace directory holds every artifact under a fixed layout::

    <root>/victims/<victim_id>.ckpt        (+ .ckpt.json sidecar)
    <root>/features/<dataset>-<hash>.ckpt
    <root>/datasets/<dataset>/<victim_id>/manifest.json
    <root>/redrl/<victim_id>/<name>-s<seed>.ckpt
    <root>/runs/<subcommand>-<hash>-s<seed>/run.json
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from .adv_dataset import DatasetManifest, generate_dataset, load_manifest
from .attacks import AttackConfig, AttackKind, full_grid
from .data import ImageSet, load_dataset
from .recognition import RecognizerSettings
from .redrl import DEFAULT_LAMBDAS, FeatureExtractor, ReconstructorSpec, make_bundle
from .victim_zoo import (ConfigurationError, TrainSchedule, VictimSpec, build_victim,
                         evaluate_accuracy, load_victim, save_victim, train_victim)

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    """An upstream artifact a step depends on does not exist."""


# --------------------------------------------------------------------------
# configuration

@dataclass
class VictimSection:
    arch_tag: str = "desk_cnn"
    width: int | None = 16
    num_classes: int = 10
    seed: int = 0


@dataclass
class DataSection:
    dataset: str = "photo-crops"
    victim_train: int = 5000
    attack_train: int = 400
    attack_test: int = 150
    validation: int = 100
    seed: int = 1


@dataclass
class AttackSection:
    grid: str = "desk"
    kinds: list[str] = field(default_factory=lambda: [k.label for k in AttackKind])
    batch_size: int = 200
    cwl2_steps: int = 200


@dataclass
class FeatureSection:
    arch_tag: str = "vgg_desk"
    width: int = 16
    layer: str = "block3"
    epochs: int = 6
    base_lr: float = 0.05


@dataclass
class RedrlSection:
    num_residual_blocks: int = 4
    channels: int = 16
    negative_slope: float = 0.2
    init: str = "default"
    psi_width: int = 16
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))


@dataclass
class SaliencySection:
    n: int = 10
    boost: float = 10.0
    max_records: int = 100
    heatmaps: int = 3


@dataclass
class AblationSection:
    scenarios: list[str] = field(default_factory=lambda: ["A", "B", "C", "full"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


_DESK_SCHEDULE = TrainSchedule(epochs=12, base_lr=0.05, decay_epochs=(8,))

_SECTIONS = {
    "victim": VictimSection, "schedule": TrainSchedule, "data": DataSection,
    "attacks": AttackSection, "feature": FeatureSection, "redrl": RedrlSection,
    "recognizer": RecognizerSettings, "saliency": SaliencySection, "ablation": AblationSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    victim: VictimSection = field(default_factory=VictimSection)
    schedule: TrainSchedule = field(default_factory=lambda: replace(_DESK_SCHEDULE))
    data: DataSection = field(default_factory=DataSection)
    attacks: AttackSection = field(default_factory=AttackSection)
    feature: FeatureSection = field(default_factory=FeatureSection)
    redrl: RedrlSection = field(default_factory=RedrlSection)
    recognizer: RecognizerSettings = field(default_factory=RecognizerSettings)
    saliency: SaliencySection = field(default_factory=SaliencySection)
    ablation: AblationSection = field(default_factory=AblationSection)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        cfg = cls()
        if "seed" in d:
            cfg.seed = int(d["seed"])
        for name, section_cls in _SECTIONS.items():
            if name not in d:
                continue
            sub = d[name] or {}
            if not isinstance(sub, dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                setattr(cfg, name, replace(getattr(cfg, name), **sub))
            except TypeError as exc:
                raise ConfigurationError(f"section {name!r}: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["decay_epochs"] = list(self.schedule.decay_epochs)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read YAML or JSON, then apply dotted-key ``overrides`` (``{"data.dataset": "cifar10"}``)."""
    import yaml

    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.from_dict(raw)


# --------------------------------------------------------------------------
# attack grids

def desk_grid(cwl2_steps: int = 200) -> dict[AttackKind, list[AttackConfig]]:
    """The full attack menu with a shortened CW-L2 optimization."""
    grid = full_grid()
    grid[AttackKind.CWL2] = [replace(c, steps=cwl2_steps) for c in grid[AttackKind.CWL2]]
    return grid


def attack_grid(section: AttackSection) -> dict[AttackKind, list[AttackConfig]]:
    if section.grid == "full":
        grid = full_grid()
    elif section.grid == "desk":
        grid = desk_grid(section.cwl2_steps)
    else:
        raise ConfigurationError(f"unknown attack grid {section.grid!r}")
    kinds = {AttackKind.parse(k) for k in section.kinds}
    return {k: v for k, v in grid.items() if k in kinds}


# --------------------------------------------------------------------------
# workspace

@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def victim_path(self, victim_id: str) -> Path:
        return self.root / "victims" / f"{victim_id}.ckpt"

    def find_victim(self, victim_id: str | None = None) -> Path:
        if victim_id:
            p = Path(victim_id)
            if p.suffix == ".ckpt" and p.exists():
                return p
            p = self.victim_path(victim_id)
            if not p.exists():
                raise MissingArtifact(f"victim checkpoint not found: {p}")
            return p
        found = sorted((self.root / "victims").glob("*.ckpt"))
        if not found:
            raise MissingArtifact(f"no victim checkpoint under {self.root / 'victims'}")
        if len(found) > 1:
            raise ConfigurationError(f"several victims in workspace, pass --victim: "
                                     f"{[f.stem for f in found]}")
        return found[0]

    def datasets_root(self) -> Path:
        return self.root / "datasets"

    def manifest(self, dataset: str, victim_id: str) -> DatasetManifest:
        path = self.datasets_root() / dataset / victim_id / "manifest.json"
        if not path.exists():
            raise MissingArtifact(f"dataset manifest not found: {path}")
        return load_manifest(path)

    def feature_path(self, dataset: str, key: str) -> Path:
        return self.root / "features" / f"{dataset}-{key}.ckpt"

    def bundle_path(self, victim_id: str, name: str, seed: int) -> Path:
        return self.root / "redrl" / victim_id / f"{name}-s{seed}.ckpt"

    def run_dir(self, subcommand: str, cfg: RunConfig) -> Path:
        return self.root / "runs" / f"{subcommand}-{cfg.digest()[:10]}-s{cfg.seed}"


# --------------------------------------------------------------------------
# steps

def base_split(cfg: RunConfig, split: str, n: int) -> ImageSet:
    return load_dataset(cfg.data.dataset, split, n, seed=cfg.data.seed)


def victim_spec(cfg: RunConfig, data: ImageSet) -> VictimSpec:
    v = cfg.victim
    return VictimSpec(v.arch_tag, v.num_classes, data.shape, v.seed, v.width)


def train_victim_step(cfg: RunConfig, ws: Workspace):
    """Train and save the victim; returns ``(victim, path, test_accuracy)``."""
    train = load_dataset(cfg.data.dataset, "train", cfg.data.victim_train, seed=0)
    test = load_dataset(cfg.data.dataset, "test", None if cfg.data.dataset == "cifar10" else 1000,
                        seed=0)
    victim = train_victim(build_victim(victim_spec(cfg, train)), train, cfg.schedule, seed=cfg.seed)
    acc, _ = evaluate_accuracy(victim, test)
    path = ws.victim_path(victim.victim_id)
    save_victim(victim, path)
    log.info("victim %s test accuracy %.4f", victim.victim_id, acc)
    return victim, path, acc


def gen_attacks_step(cfg: RunConfig, ws: Workspace, victim) -> DatasetManifest:
    base = {"train": base_split(cfg, "train", cfg.data.attack_train),
            "test": base_split(cfg, "test", cfg.data.attack_test)}
    # keep attack-train ids apart from the victim-training draw
    base["train"] = ImageSet(base["train"].images, base["train"].labels,
                             base["train"].ids + 10_000_000)
    return generate_dataset(victim, base, attack_grid(cfg.attacks), cfg.seed, ws.datasets_root(),
                            dataset_tag=cfg.data.dataset, batch_size=cfg.attacks.batch_size)


def feature_key(cfg: RunConfig) -> str:
    blob = json.dumps([asdict(cfg.feature), asdict(cfg.data)], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def feature_network(cfg: RunConfig, ws: Workspace | None = None) -> torch.nn.Module:
    """VGG-style network trained on the base dataset, cached in the workspace."""
    f = cfg.feature
    path = ws.feature_path(cfg.data.dataset, feature_key(cfg)) if ws else None
    train = load_dataset(cfg.data.dataset, "train", cfg.data.victim_train, seed=0)
    spec = VictimSpec(f.arch_tag, cfg.victim.num_classes, train.shape, 0, f.width)
    if path is not None and path.exists():
        return load_victim(path).model
    decay = (max(1, f.epochs * 2 // 3),) if f.epochs > 1 else ()
    sched = TrainSchedule(epochs=f.epochs, base_lr=f.base_lr, decay_epochs=decay)
    net = train_victim(build_victim(spec), train, sched, seed=0)
    if path is not None:
        save_victim(net, path)
    return net.model


def reconstructor_spec(cfg: RunConfig, channels: int) -> ReconstructorSpec:
    r = cfg.redrl
    return ReconstructorSpec(r.num_residual_blocks, r.channels, r.negative_slope, channels, r.init)


def new_bundle(cfg: RunConfig, victim, feature_net, seed: int, lambdas=None):
    channels = victim.spec.input_shape[0]
    return make_bundle(victim, FeatureExtractor(feature_net, cfg.feature.layer),
                       reconstructor_spec(cfg, channels), cfg.redrl.psi_width,
                       tuple(lambdas if lambdas is not None else cfg.redrl.lambdas),
                       cfg.recognizer.label_smoothing, seed)
