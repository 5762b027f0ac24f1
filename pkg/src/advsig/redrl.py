"""Residual-learning attack recognition: reconstructor G, residuals, recognizer Psi.

G maps an adversarial image back toward the clean manifold; the residual
``x_adv - G(x_adv)`` estimates the perturbation, and Psi classifies
``concat(residual, x_adv)`` into one of the six attack kinds. G and Psi are
trained jointly on

    L = L_AC + l1 * L_R + l2 * L_F + l3 * L_IC

with the victim Phi and the feature extractor F frozen.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .adv_dataset import DatasetManifest, load_arrays
from .attacks import NUM_KINDS, AttackKind, NumericalError
from .victim_zoo import ConfigurationError, ResNet18, freeze

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.01, 0.1, 1.0)


# --------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class ReconstructorSpec:
    num_residual_blocks: int = 8
    channels: int = 64
    negative_slope: float = 0.2
    image_channels: int = 3
    init: str = "default"  # or "identity"


class _ResBlock(nn.Module):
    def __init__(self, ch, slope):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class Reconstructor(nn.Module):
    """Residual blocks without normalization between two conv pairs.

    The blocks keep their local skip additions, but nothing carries the
    input image straight to the output.
    """

    def __init__(self, spec: ReconstructorSpec = ReconstructorSpec()):
        super().__init__()
        ch, s, ic = spec.channels, spec.negative_slope, spec.image_channels
        self.spec = spec
        self.head = nn.Sequential(nn.Conv2d(ic, ch, 3, padding=1), nn.LeakyReLU(s),
                                  nn.Conv2d(ch, ch, 3, padding=1), nn.LeakyReLU(s))
        self.blocks = nn.Sequential(*[_ResBlock(ch, s) for _ in range(spec.num_residual_blocks)])
        self.tail = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.LeakyReLU(s),
                                  nn.Conv2d(ch, ic, 3, padding=1))
        if spec.init == "identity":
            self._identity_init()
        elif spec.init != "default":
            raise ValueError(f"unknown init {spec.init!r}")

    @torch.no_grad()
    def _identity_init(self):
        """Start as the identity map on non-negative images.

        Image channels are routed through dirac kernels (LeakyReLU is the
        identity on them) and every block's second conv starts at zero; the
        spare head channels stay random but are ignored by the tail until
        training changes it.
        """
        ic = self.spec.image_channels
        first, second = self.head[0], self.head[2]
        nn.init.dirac_(first.weight[:ic])
        first.bias[:ic].zero_()
        for conv in (second, self.tail[0]):
            nn.init.dirac_(conv.weight)
            conv.bias.zero_()
        for block in self.blocks:
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
        last = self.tail[2]
        last.weight.zero_()
        nn.init.dirac_(last.weight[:, :ic])
        last.bias.zero_()

    def forward(self, x):
        return self.tail(self.blocks(self.head(x)))


class FeatureExtractor(nn.Module):
    """Activations of one named submodule of ``net`` (``layer=None``: the output)."""

    class _Stop(Exception):
        pass

    def __init__(self, net: nn.Module, layer: str | None = None):
        super().__init__()
        self.net = net
        self.layer = layer
        if layer is not None and layer not in dict(net.named_modules()):
            raise KeyError(f"extraction layer {layer!r} missing from {type(net).__name__}")

    def forward(self, x):
        if self.layer is None:
            return self.net(x)
        captured = {}

        def hook(_m, _inp, out):
            captured["out"] = out
            raise FeatureExtractor._Stop

        handle = dict(self.net.named_modules())[self.layer].register_forward_hook(hook)
        try:
            self.net(x)
        except FeatureExtractor._Stop:
            pass
        finally:
            handle.remove()
        return captured["out"]


def make_recognizer(in_channels: int = 6, width: int = 64, seed: int = 0) -> ResNet18:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ResNet18(in_channels, NUM_KINDS, width)


def _module(phi) -> nn.Module:
    return phi.model if hasattr(phi, "model") and isinstance(phi.model, nn.Module) else phi


@dataclass
class RedrlBundle:
    G: Reconstructor
    Psi: nn.Module
    Phi: nn.Module
    F: FeatureExtractor
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    label_smoothing: float = 0.1
    phi_id: str = ""
    phi_checksum: str = ""
    psi_width: int = 64
    metrics: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        freeze(self.Phi)
        freeze(self.F)
        ic = self.G.spec.image_channels
        first = next(m for m in self.Psi.modules() if isinstance(m, nn.Conv2d))
        if first.in_channels != 2 * ic:
            raise ConfigurationError("Psi must read 2x the image channel count")


def make_bundle(phi, feature_extractor: FeatureExtractor,
                g_spec: ReconstructorSpec = ReconstructorSpec(), psi_width: int = 64,
                lambdas=DEFAULT_LAMBDAS, label_smoothing: float = 0.1, seed: int = 0) -> RedrlBundle:
    """Fresh G and Psi (seeded) around copies of the frozen victim and F."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        G = Reconstructor(g_spec)
    Psi = make_recognizer(2 * g_spec.image_channels, psi_width, seed + 1)
    phi_module = copy.deepcopy(_module(phi))
    return RedrlBundle(G, Psi, phi_module, copy.deepcopy(feature_extractor), tuple(lambdas),
                       label_smoothing, phi_id=getattr(phi, "victim_id", ""),
                       phi_checksum=checkpoint.state_checksum(phi_module), psi_width=psi_width)


# --------------------------------------------------------------------------
# loss terms

def reconstruction_loss(x_clean: torch.Tensor, g_out: torch.Tensor) -> torch.Tensor:
    if x_clean.shape != g_out.shape:
        raise ValueError(f"shape mismatch {tuple(x_clean.shape)} vs {tuple(g_out.shape)}")
    return (x_clean - g_out).abs().flatten(1).mean(1).mean()


def feature_loss(x_clean, g_out, F_ext) -> torch.Tensor:
    with torch.no_grad():
        target = F_ext(x_clean)
    return (target - F_ext(g_out)).flatten(1).norm(dim=1).mean()


def image_classification_loss(g_out, x_clean, Phi) -> torch.Tensor:
    """Cross-entropy of Phi(g_out) against Phi's own prediction on x_clean."""
    with torch.no_grad():
        target = Phi(x_clean).argmax(1)
    return F.cross_entropy(Phi(g_out), target)


def recognizer_input(perturbation: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    return torch.cat([perturbation, x_adv], dim=1)


def attack_classification_loss(residual, x_adv, kind_label, Psi, label_smoothing=0.0):
    kind_label = torch.as_tensor(kind_label, dtype=torch.long)
    if int(kind_label.max()) >= NUM_KINDS:
        raise ValueError("kind label out of range")
    logits = Psi(recognizer_input(residual, x_adv))
    return F.cross_entropy(logits, kind_label, label_smoothing=label_smoothing)


TERMS = ("AC", "R", "F", "IC")


def total_loss(terms: dict, lambdas=DEFAULT_LAMBDAS):
    """``AC + l1*R + l2*F + l3*IC``; every term must be finite."""
    for name in TERMS:
        value = terms[name]
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise NumericalError(f"loss term L_{name}", -1)
    l1, l2, l3 = lambdas
    return terms["AC"] + l1 * terms["R"] + l2 * terms["F"] + l3 * terms["IC"]


def compute_terms(bundle: RedrlBundle, x_adv, x_clean, kind) -> tuple[dict, torch.Tensor]:
    """All four terms for a batch; terms with a zero weight are skipped (0)."""
    l1, l2, l3 = bundle.lambdas
    g_out = bundle.G(x_adv)
    residual = x_adv - g_out
    zero = g_out.new_zeros(())
    terms = {
        "AC": attack_classification_loss(residual, x_adv, kind, bundle.Psi, bundle.label_smoothing),
        "R": reconstruction_loss(x_clean, g_out) if l1 else zero,
        "F": feature_loss(x_clean, g_out, bundle.F) if l2 else zero,
        "IC": image_classification_loss(g_out, x_clean, bundle.Phi) if l3 else zero,
    }
    return terms, g_out


# --------------------------------------------------------------------------
# training

def warmup_lr(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear ramp from base_lr/10 at epoch 0 to base_lr at ``warmup_epochs``."""
    if epoch >= warmup_epochs:
        return base_lr
    return base_lr * (0.1 + 0.9 * epoch / warmup_epochs)


def _check_kinds(kinds: torch.Tensor):
    present = set(kinds.unique().tolist())
    missing = [AttackKind(k).label for k in range(NUM_KINDS) if k not in present]
    if missing:
        raise ConfigurationError(f"training data lacks kinds {missing}")


def train_redrl(bundle: RedrlBundle, manifest: DatasetManifest, epochs: int = 100,
                base_lr: float = 3.5e-4, warmup_epochs: int = 10, seed: int = 0,
                batch_size: int = 64, split: str = "train"):
    """End-to-end Adam training of G and Psi. Returns ``(bundle, metrics)``.

    The bundle is updated in place; Phi and F are verified unchanged.
    """
    data = load_arrays(manifest, split, ("x_clean", "x_adv", "kind"))
    _check_kinds(data["kind"])
    phi_sum = checkpoint.state_checksum(bundle.Phi)
    f_sum = checkpoint.state_checksum(bundle.F)
    params = list(bundle.G.parameters()) + list(bundle.Psi.parameters())
    opt = torch.optim.Adam(params, lr=base_lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(seed)
    n = len(data["kind"])
    metrics = []
    for epoch in range(epochs):
        lr = warmup_lr(epoch, base_lr, warmup_epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        bundle.G.train()
        bundle.Psi.train()
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        correct = 0
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x_adv, x_clean, kind = data["x_adv"][idx], data["x_clean"][idx], data["kind"][idx]
            terms, _ = compute_terms(bundle, x_adv, x_clean, kind)
            loss = total_loss(terms, bundle.lambdas)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k in TERMS:
                sums[k] += float(terms[k].detach()) * len(idx)
            sums["total"] += float(loss.detach()) * len(idx)
        row = {"epoch": epoch, "lr": lr, **{k: v / n for k, v in sums.items()}}
        log.info("redrl epoch %d lr %.2e total %.4f AC %.4f", epoch, lr, row["total"], row["AC"])
        metrics.append(row)
    if checkpoint.state_checksum(bundle.Phi) != phi_sum or checkpoint.state_checksum(bundle.F) != f_sum:
        raise RuntimeError("frozen Phi/F parameters changed during training")
    bundle.G.eval()
    bundle.Psi.eval()
    bundle.metrics.extend(metrics)
    return bundle, metrics


@torch.no_grad()
def infer(bundle: RedrlBundle, x_adv: torch.Tensor):
    """Return ``(g_out, residual, kind_distribution)`` for a batch."""
    bundle.G.eval()
    bundle.Psi.eval()
    g_out = bundle.G(x_adv)
    residual = x_adv - g_out
    probs = F.softmax(bundle.Psi(recognizer_input(residual, x_adv)), dim=1)
    return g_out, residual, probs


@torch.no_grad()
def reconstruct(G: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    G.eval()
    return torch.cat([G(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


# --------------------------------------------------------------------------
# persistence

def save_bundle(bundle: RedrlBundle, path) -> str:
    meta = {"kind": "redrl", "g_spec": asdict(bundle.G.spec), "psi_width": bundle.psi_width,
            "lambdas": list(bundle.lambdas), "label_smoothing": bundle.label_smoothing,
            "feature_layer": bundle.F.layer, "feature_net": type(bundle.F.net).__name__,
            "phi_id": bundle.phi_id, "phi_checksum": bundle.phi_checksum,
            "metrics": bundle.metrics}
    return checkpoint.save(Path(path), {"G": bundle.G, "Psi": bundle.Psi, "F": bundle.F.net}, meta)


def load_bundle(path, phi, feature_net: nn.Module) -> RedrlBundle:
    """Restore a bundle; ``phi`` must match the stored victim checksum."""
    meta, sections = checkpoint.read(path)
    phi_module = copy.deepcopy(_module(phi))
    if checkpoint.state_checksum(phi_module) != meta["phi_checksum"]:
        raise ValueError("victim checksum does not match the bundle's frozen reference")
    G = Reconstructor(ReconstructorSpec(**meta["g_spec"]))
    checkpoint.load_into(G, sections["G"])
    Psi = make_recognizer(2 * G.spec.image_channels, meta["psi_width"])
    checkpoint.load_into(Psi, sections["Psi"])
    net = copy.deepcopy(feature_net)
    checkpoint.load_into(net, sections["F"])
    bundle = RedrlBundle(G, Psi, phi_module, FeatureExtractor(net, meta["feature_layer"]),
                         tuple(meta["lambdas"]), meta["label_smoothing"], meta["phi_id"],
                         meta["phi_checksum"], meta["psi_width"], list(meta["metrics"]))
    G.eval()
    Psi.eval()
    return bundle
