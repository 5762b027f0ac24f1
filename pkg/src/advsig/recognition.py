"""Attack-recognition experiments: three input modes, confusion matrices,
reconstruction-recovery tables and the loss-ablation grid."""

from __future__ import annotations

import copy
import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adv_dataset import DatasetManifest, load_arrays
from .attacks import NUM_KINDS, AttackKind
from .redrl import (DEFAULT_LAMBDAS, RedrlBundle, _check_kinds, make_recognizer, reconstruct,
                    recognizer_input, train_redrl, warmup_lr)
from .victim_zoo import ConfigurationError, predict

log = logging.getLogger(__name__)


class InputMode(str, enum.Enum):
    ADV_ONLY = "adv"
    GT_CONCAT = "gt"
    RESIDUAL_CONCAT = "residual"

    @property
    def in_channels_factor(self) -> int:
        return 1 if self is InputMode.ADV_ONLY else 2

    @property
    def fields(self) -> tuple[str, ...]:
        # AdvOnly must never touch the clean images
        return ("x_adv", "kind") if self is not InputMode.GT_CONCAT else ("x_adv", "x_clean", "kind")


@dataclass
class Recognizer:
    net: torch.nn.Module
    mode: InputMode
    bundle: RedrlBundle | None = None
    metrics: list[dict] = field(default_factory=list)

    def inputs(self, x_adv: torch.Tensor, x_clean: torch.Tensor | None = None) -> torch.Tensor:
        if self.mode is InputMode.ADV_ONLY:
            return x_adv
        if self.mode is InputMode.GT_CONCAT:
            return recognizer_input(x_adv - x_clean, x_adv)
        with torch.no_grad():
            residual = x_adv - self.bundle.G(x_adv)
        return recognizer_input(residual, x_adv)

    @torch.no_grad()
    def predict(self, x_adv, x_clean=None, batch_size: int = 256) -> torch.Tensor:
        self.net.eval()
        if self.bundle is not None:
            self.bundle.G.eval()
        out = []
        for i in range(0, len(x_adv), batch_size):
            xc = None if x_clean is None else x_clean[i:i + batch_size]
            out.append(self.net(self.inputs(x_adv[i:i + batch_size], xc)).argmax(1))
        return torch.cat(out)


@dataclass
class RecognizerSettings:
    """Shared optimization settings so the input mode is the only varied factor."""

    epochs: int = 30
    lr: float = 1e-3
    warmup_epochs: int = 3
    label_smoothing: float = 0.1
    batch_size: int = 64
    width: int = 16


def _fit(net, inputs_fn, data, settings: RecognizerSettings, seed: int):
    opt = torch.optim.Adam(net.parameters(), lr=settings.lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(seed)
    n = len(data["kind"])
    metrics = []
    for epoch in range(settings.epochs):
        lr = warmup_lr(epoch, settings.lr, settings.warmup_epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        net.train()
        perm = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for start in range(0, n, settings.batch_size):
            idx = perm[start:start + settings.batch_size]
            logits = net(inputs_fn(idx))
            loss = F.cross_entropy(logits, data["kind"][idx], label_smoothing=settings.label_smoothing)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == data["kind"][idx]).sum())
        metrics.append({"epoch": epoch, "lr": lr, "AC": total / n, "train_acc": correct / n})
    net.eval()
    return metrics


def train_recognizer(mode, manifest: DatasetManifest, epochs: int | None = None, seed: int = 0,
                     settings: RecognizerSettings | None = None,
                     bundle: RedrlBundle | None = None) -> Recognizer:
    """Train a six-way attack recognizer for one input mode.

    ``ResidualConcat`` trains the given (untrained) REDRL ``bundle`` end to
    end and uses its Psi; the other modes train a fresh network of the same
    family with identical optimization settings.
    """
    mode = InputMode(mode)
    settings = settings or RecognizerSettings()
    if epochs is not None:
        settings = replace(settings, epochs=epochs)
    if mode is InputMode.RESIDUAL_CONCAT:
        if bundle is None:
            raise ConfigurationError("ResidualConcat needs a REDRL bundle")
        bundle = replace(bundle, label_smoothing=settings.label_smoothing)
        bundle, metrics = train_redrl(bundle, manifest, settings.epochs, settings.lr,
                                      settings.warmup_epochs, seed, settings.batch_size)
        return Recognizer(bundle.Psi, mode, bundle, metrics)
    data = load_arrays(manifest, "train", mode.fields)
    _check_kinds(data["kind"])
    channels = data["x_adv"].shape[1] * mode.in_channels_factor
    net = make_recognizer(channels, settings.width, seed + 1)
    rec = Recognizer(net, mode)
    if mode is InputMode.ADV_ONLY:
        def inputs_fn(idx):
            return data["x_adv"][idx]
    else:
        def inputs_fn(idx):
            return rec.inputs(data["x_adv"][idx], data["x_clean"][idx])
    rec.metrics = _fit(net, inputs_fn, data, settings, seed)
    return rec


# --------------------------------------------------------------------------
# confusion matrices

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true kind, columns: predicted kind

    @classmethod
    def from_predictions(cls, true, pred, num_classes: int = NUM_KINDS) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(true), np.asarray(pred)), 1)
        return cls(counts)

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(1)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        rows = self.row_sums
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    @property
    def total_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def as_rows(self) -> list[list]:
        labels = [AttackKind(k).label for k in range(len(self.counts))]
        return [[labels[i], *self.counts[i].tolist(), f"{100 * self.per_class_accuracy[i]:.2f}"]
                for i in range(len(labels))]


def evaluate_confusion(recognizer: Recognizer, manifest: DatasetManifest,
                       split: str = "test") -> tuple[ConfusionMatrix, np.ndarray]:
    """Confusion matrix on ``split`` plus the raw predictions (in split order)."""
    data = load_arrays(manifest, split, recognizer.mode.fields)
    if len(data["kind"]) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = recognizer.predict(data["x_adv"], data.get("x_clean"))
    return ConfusionMatrix.from_predictions(data["kind"].numpy(), pred.numpy()), pred.numpy()


# --------------------------------------------------------------------------
# reconstruction recovery

def recovery_table(G, victims, manifest: DatasetManifest, split: str = "test") -> list[dict]:
    """Victim accuracy on x_adv and on G(x_adv), per victim and kind."""
    data = load_arrays(manifest, split, ("x_adv", "kind", "label"))
    recon = reconstruct(G, data["x_adv"])
    rows = []
    for victim in victims:
        before = predict(victim, data["x_adv"]) == data["label"]
        after = predict(victim, recon) == data["label"]
        for k in range(NUM_KINDS):
            sel = data["kind"] == k
            n = int(sel.sum())
            if not n:
                continue
            rows.append({"victim": getattr(victim, "victim_id", type(victim).__name__),
                         "kind": AttackKind(k).label, "n": n,
                         "acc_before": float(before[sel].float().mean()),
                         "acc_after": float(after[sel].float().mean())})
    return rows


# --------------------------------------------------------------------------
# ablation

SCENARIOS = {
    "A": (True, False, False),     # L_R + L_AC
    "B": (True, True, False),      # + L_F
    "C": (True, False, True),      # L_R + L_IC + L_AC
    "full": (True, True, True),
}


def scenario_lambdas(name: str, base=DEFAULT_LAMBDAS) -> tuple[float, float, float]:
    on = SCENARIOS[name]
    return tuple(float(w) if keep else 0.0 for w, keep in zip(base, on))


def ablation_grid(manifest: DatasetManifest, bundle: RedrlBundle, scenarios=("A", "B", "C", "full"),
                  seeds=(0,), settings: RecognizerSettings | None = None, split: str = "test",
                  base_lambdas=DEFAULT_LAMBDAS, cache: dict | None = None) -> dict[str, list[ConfusionMatrix]]:
    """Train one REDRL model per (scenario, seed); runs differ only in loss weights.

    ``bundle`` is an untrained template (it is copied per run). ``cache`` may
    map ``(scenario, seed)`` to an already-evaluated matrix.
    """
    out = {}
    for name in scenarios:
        out[name] = []
        for seed in seeds:
            key = (name, seed)
            if cache is not None and key in cache:
                out[name].append(cache[key])
                continue
            run = copy.deepcopy(bundle)
            run.lambdas = scenario_lambdas(name, base_lambdas)
            rec = train_recognizer(InputMode.RESIDUAL_CONCAT, manifest, seed=seed,
                                   settings=settings, bundle=run)
            cm, _ = evaluate_confusion(rec, manifest, split)
            log.info("ablation %s seed %d total %.4f", name, seed, cm.total_accuracy)
            if cache is not None:
                cache[key] = cm
            out[name].append(cm)
    return out


# --------------------------------------------------------------------------
# tables

def write_tsv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)
    return path


def comparison_rows(results: dict[str, ConfusionMatrix]) -> tuple[list, list]:
    """Per-class and total accuracy (%) with one column per mode or scenario."""
    names = list(results)
    header = ["class", *names]
    rows = []
    for k in range(NUM_KINDS):
        rows.append([AttackKind(k).label,
                     *(f"{100 * results[n].per_class_accuracy[k]:.2f}" for n in names)])
    rows.append(["Total", *(f"{100 * results[n].total_accuracy:.2f}" for n in names)])
    return header, rows
