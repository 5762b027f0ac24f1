"""Victim classifiers: registry, seeded construction, SGD training, evaluation."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .data import ImageSet

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# architectures

class DeskCNN(nn.Module):
    """Four conv-BN-ReLU blocks with pooling and a linear head."""

    def __init__(self, in_channels=3, num_classes=10, width=32):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 4 * width]
        layers, c = [], in_channels
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            layers.append(nn.MaxPool2d(2) if i < 3 else nn.AdaptiveAvgPool2d(1))
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """18-layer residual CNN (2-2-2-2 basic blocks), 3x3 stem for small images.

    ``width`` is the channel count of the first stage; the standard network
    uses 64. ``in_channels`` lets the same family read 6-channel stacks.
    """

    def __init__(self, in_channels=3, num_classes=10, width=64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        stages, c = [], width
        for i, w in enumerate([width, 2 * width, 4 * width, 8 * width]):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(c, w, stride), BasicBlock(w, w)))
            c = w
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.fc = nn.Linear(c, num_classes)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return self.fc(F.adaptive_avg_pool2d(out, 1).flatten(1))


class VGGDesk(nn.Module):
    """Three VGG blocks of two 3x3 convs each; ``block3`` feeds feature losses."""

    def __init__(self, in_channels=3, num_classes=10, width=32):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
            )

        self.block1 = block(in_channels, width)
        self.block2 = block(width, 2 * width)
        self.block3 = block(2 * width, 4 * width)
        self.head = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        x = F.max_pool2d(self.block1(x), 2)
        x = F.max_pool2d(self.block2(x), 2)
        x = self.block3(x)
        return self.head(F.adaptive_avg_pool2d(x, 1).flatten(1))


REGISTRY: dict[str, tuple[Callable[..., nn.Module], int]] = {
    "desk_cnn": (DeskCNN, 32),
    "resnet18": (ResNet18, 64),
    "vgg_desk": (VGGDesk, 32),
}


class RegistryError(KeyError):
    pass


class ConfigurationError(ValueError):
    pass


# --------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class VictimSpec:
    arch_tag: str
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    seed: int = 0
    width: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ConfigurationError(f"bad input_shape {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))


@dataclass
class TrainSchedule:
    epochs: int = 50
    base_lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    decay_epochs: tuple[int, ...] = (25, 40)
    decay_factor: float = 10.0
    batch_size: int = 128
    weight_decay: float = 5e-4
    augment: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(d) for d in self.decay_epochs)
        if self.epochs < 0 or self.base_lr <= 0 or self.decay_factor <= 0:
            raise ConfigurationError("epochs >= 0, base_lr > 0, decay_factor > 0 required")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs for e in d):
            raise ConfigurationError("decay_epochs must be strictly increasing and < epochs")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for d in self.decay_epochs if d <= epoch)
        return self.base_lr / self.decay_factor ** drops


@dataclass
class TrainedVictim:
    spec: VictimSpec
    model: nn.Module
    filter_index: dict[str, np.ndarray]
    layer_filters: list[tuple[str, int]]
    train_log: list[dict] = field(default_factory=list)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    @property
    def parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.model.parameters()).detach()

    def checksum(self) -> str:
        return checkpoint.state_checksum(self.model)

    @property
    def victim_id(self) -> str:
        s = self.spec
        return f"{s.arch_tag}-c{s.num_classes}-s{s.seed}-{self.checksum()[:10]}"


def conv_filter_index(model: nn.Module):
    """Map every conv filter to its indices in the flat parameter vector.

    Filter ``k`` of a conv layer owns ``weight[k]`` and, when present,
    ``bias[k]``. Returns ``(filter_index, layer_filters)``.
    """
    offsets, pos = {}, 0
    for p in model.parameters():
        offsets[id(p)] = pos
        pos += p.numel()
    index, layers = {}, []
    for name, mod in model.named_modules():
        if not isinstance(mod, nn.Conv2d):
            continue
        w = mod.weight
        per = w[0].numel()
        start = offsets[id(w)]
        for k in range(w.shape[0]):
            idx = np.arange(start + k * per, start + (k + 1) * per)
            if mod.bias is not None:
                idx = np.append(idx, offsets[id(mod.bias)] + k)
            index[f"{name}:{k}"] = idx
        layers.append((name, w.shape[0]))
    return index, layers


def _seeded(seed: int, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def wrap_model(spec: VictimSpec, model: nn.Module, train_log=None) -> TrainedVictim:
    model.eval()
    index, layers = conv_filter_index(model)
    return TrainedVictim(spec, model, index, layers, list(train_log or []))


def build_victim(spec: VictimSpec) -> TrainedVictim:
    if spec.arch_tag not in REGISTRY:
        raise RegistryError(f"unknown arch_tag {spec.arch_tag!r}; known: {sorted(REGISTRY)}")
    cls, default_width = REGISTRY[spec.arch_tag]
    width = spec.width or default_width
    model = _seeded(spec.seed, lambda: cls(spec.input_shape[0], spec.num_classes, width))
    return wrap_model(spec, model)


# --------------------------------------------------------------------------
# training / evaluation

def augment_batch(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random horizontal flip and ``pad``-pixel zero-pad random crop."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    rows = (dy[:, None] + torch.arange(h)[None])[:, None, :, None]
    cols = (dx[:, None] + torch.arange(w)[None])[:, None, None, :]
    batch = torch.arange(n)[:, None, None, None]
    chan = torch.arange(x.shape[1])[None, :, None, None]
    return padded[batch, chan, rows, cols]


def train_victim(victim: TrainedVictim, train_data: ImageSet, schedule: TrainSchedule,
                 seed: int | None = None) -> TrainedVictim:
    """SGD with Nesterov momentum and step decay; returns a new victim."""
    if len(train_data) == 0:
        raise ConfigurationError("empty training set")
    if int(train_data.labels.max()) >= victim.spec.num_classes:
        raise ConfigurationError("label out of range for num_classes")
    seed = victim.spec.seed if seed is None else seed
    model = copy.deepcopy(victim.model)
    log_rows = []
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=schedule.base_lr, momentum=schedule.momentum,
                          nesterov=schedule.nesterov and schedule.momentum > 0,
                          weight_decay=schedule.weight_decay)
    n = len(train_data)
    do_aug = schedule.augment and train_data.shape[1:] == (32, 32)
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(n, generator=gen)
        total_loss, correct = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            x, y = train_data.images[idx], train_data.labels[idx]
            if do_aug:
                x = augment_batch(x, gen)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        row = {"epoch": epoch, "lr": lr, "loss": total_loss / n, "train_acc": correct / n}
        log.info("victim epoch %d lr %.5f loss %.4f acc %.4f", epoch, lr, row["loss"], row["train_acc"])
        log_rows.append(row)
    return wrap_model(victim.spec, model, victim.train_log + log_rows)


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    if isinstance(model, nn.Module):
        model.eval()
    out = [model(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def evaluate_accuracy(victim, data: ImageSet, batch_size: int = 500):
    """Return ``(accuracy, predictions)`` on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(victim, data.images, batch_size)
    return float((preds == data.labels).float().mean()), preds.tolist()


# --------------------------------------------------------------------------
# persistence

def save_victim(victim: TrainedVictim, path) -> str:
    path = Path(path)
    meta = {"kind": "victim", "arch_tag": victim.spec.arch_tag,
            "spec": asdict(victim.spec), "seed": victim.spec.seed,
            "checksum": victim.checksum()}
    digest = checkpoint.save(path, {"model": victim.model}, meta)
    sidecar = {"victim_id": victim.victim_id, "spec": asdict(victim.spec),
               "train_log": victim.train_log, "file_digest": digest}
    checkpoint.atomic_write(path.with_suffix(path.suffix + ".json"),
                            json.dumps(sidecar, indent=2))
    return digest


def load_victim(path) -> TrainedVictim:
    path = Path(path)
    meta, sections = checkpoint.read(path)
    spec = VictimSpec(**{**meta["spec"], "input_shape": tuple(meta["spec"]["input_shape"])})
    victim = build_victim(spec)
    checkpoint.load_into(victim.model, sections["model"])
    sidecar = path.with_suffix(path.suffix + ".json")
    train_log = json.loads(sidecar.read_text())["train_log"] if sidecar.exists() else []
    return wrap_model(spec, victim.model, train_log)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
