"""Parameter-space saliency: standardized per-filter gradient magnitudes.

For a sample ``(x, y)`` and conv filter ``k`` owning parameter indices
``alpha_k``::

    a_k(x, y) = mean_{i in alpha_k} |dL(x, y) / d theta_i|
    s_k(x, y) = |a_k(x, y) - mu_k| / sigma_k

where ``mu_k``/``sigma_k`` are the mean and population standard deviation of
``a_k`` over a validation set and ``L`` is cross-entropy against the true
label. Profiles sort ``s`` within each layer and average over samples.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call, grad, vmap

from .attacks import AdversarialRecord, AttackKind
from .victim_zoo import predict

log = logging.getLogger(__name__)

SIGMA_GUARD = 1e-12


def _conv_layers(model: nn.Module) -> list[tuple[str, nn.Conv2d]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]


def _model(victim) -> nn.Module:
    return victim.model if hasattr(victim, "model") else victim


def layer_bounds(counts) -> list[int]:
    return [0, *np.cumsum(counts).tolist()]


def _aggregate(grads: dict, layers) -> torch.Tensor:
    """Per-filter mean |gradient| from a dict of (batched) parameter grads."""
    cols = []
    for name, conv in layers:
        gw = grads[f"{name}.weight"].abs()
        total = gw.sum(dim=(-3, -2, -1))
        count = conv.weight[0].numel()
        if conv.bias is not None:
            total = total + grads[f"{name}.bias"].abs()
            count += 1
        cols.append(total / count)
    return torch.cat(cols, dim=-1)


def filter_gradients(victim, x: torch.Tensor, y: torch.Tensor, loss_scale: float = 1.0,
                     chunk: int = 64) -> np.ndarray:
    """``(N, K)`` float64 matrix of per-sample filter-aggregated |gradients|."""
    model = _model(victim)
    model.eval()
    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}
    layers = _conv_layers(model)

    def loss_fn(p, xi, yi):
        out = functional_call(model, (p, buffers), (xi[None],))
        return loss_scale * F.cross_entropy(out, yi[None])

    per_sample = vmap(grad(loss_fn), in_dims=(None, 0, 0))
    rows = []
    for i in range(0, len(x), chunk):
        g = per_sample(params, x[i:i + chunk], y[i:i + chunk])
        agg = _aggregate(g, layers)
        if not torch.isfinite(agg).all():
            raise FloatingPointError("non-finite parameter gradient")
        rows.append(agg.double().numpy())
    return np.concatenate(rows) if rows else np.zeros((0, sum(m.out_channels for _, m in layers)))


@dataclass
class ValStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    layer_filters: list[tuple[str, int]]
    zero_sigma: list[int] = field(default_factory=list)

    @property
    def bounds(self) -> list[int]:
        return layer_bounds([c for _, c in self.layer_filters])


def compute_val_stats(victim, images: torch.Tensor, labels: torch.Tensor,
                      loss_scale: float = 1.0, chunk: int = 64) -> ValStats:
    """Mean and population std of each filter's |gradient| over a validation set.

    Accumulates sum and sum of squares per chunk, so chunks may be reduced
    in any order.
    """
    if len(images) == 0:
        raise ValueError("validation set is empty")
    total = total_sq = 0.0
    for i in range(0, len(images), chunk):
        a = filter_gradients(victim, images[i:i + chunk], labels[i:i + chunk], loss_scale, chunk)
        total = total + a.sum(0)
        total_sq = total_sq + (a * a).sum(0)
    n = len(images)
    mu = total / n
    var = np.maximum(total_sq / n - mu * mu, 0.0)
    sigma = np.sqrt(var)
    # sum/sumsq leaves rounding-level variance when all samples agree
    sigma[sigma <= 1e-9 * np.maximum(np.abs(mu), 1e-300)] = 0.0
    layers = [(n_, m.out_channels) for n_, m in _conv_layers(_model(victim))]
    zero = np.flatnonzero(sigma == 0).tolist()
    if zero:
        log.info("%d filters have zero validation std", len(zero))
    return ValStats(mu, sigma, n, layers, zero)


@dataclass
class SaliencyProfile:
    values: np.ndarray
    bounds: list[int]
    provenance: str = ""
    n_samples: int = 1
    sample_ids: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_samples == 0

    def segments(self):
        return [self.values[a:b] for a, b in zip(self.bounds, self.bounds[1:])]


def standardize(a: np.ndarray, stats: ValStats) -> np.ndarray:
    return np.abs(a - stats.mu) / (stats.sigma + SIGMA_GUARD)


def saliency_values(victim, x, y, stats: ValStats, loss_scale: float = 1.0) -> np.ndarray:
    """``(N, K)`` standardized saliency for a batch."""
    return standardize(filter_gradients(victim, x, y, loss_scale), stats)


def filter_saliency(victim, x: torch.Tensor, y: int, stats: ValStats, loss_scale: float = 1.0,
                    sample_id: int | None = None) -> SaliencyProfile:
    s = saliency_values(victim, x[None], torch.tensor([int(y)]), stats, loss_scale)[0]
    prov = f"sample:{sample_id}" if sample_id is not None else "sample"
    return SaliencyProfile(s, stats.bounds, prov, 1, [] if sample_id is None else [sample_id])


def sort_within_layers(s: np.ndarray, bounds) -> np.ndarray:
    """Sort each layer segment of the last axis in descending order."""
    out = np.empty_like(s)
    for a, b in zip(bounds, bounds[1:]):
        out[..., a:b] = -np.sort(-s[..., a:b], axis=-1)
    return out


def kept_mask(victim, records: list[AdversarialRecord]) -> np.ndarray:
    """Attack records whose clean image is classified correctly and adversarial image is not.

    Clean-kind records carry no attack, so all of them are kept.
    """
    if not records:
        return np.zeros(0, dtype=bool)
    labels = torch.tensor([r.label for r in records])
    clean_ok = predict(victim, torch.stack([r.x_clean for r in records])) == labels
    adv_wrong = predict(victim, torch.stack([r.x_adv for r in records])) != labels
    is_clean = torch.tensor([AttackKind(r.kind) == AttackKind.CLEAN for r in records])
    return (is_clean | (clean_ok & adv_wrong)).numpy()


def aggregate_profiles(victim, stats: ValStats, records, kind, batch: int = 64) -> SaliencyProfile:
    """Average of per-layer-sorted saliency over the kept records of ``kind``."""
    kind = AttackKind.parse(kind)
    records = [r for r in records if AttackKind(r.kind) == kind]
    keep = kept_mask(victim, records)
    kept = [r for r, k in zip(records, keep) if k]
    bounds = stats.bounds
    if not kept:
        return SaliencyProfile(np.zeros(bounds[-1]), bounds, f"aggregate:{kind.label}", 0, [])
    total = np.zeros(bounds[-1])
    for i in range(0, len(kept), batch):
        part = kept[i:i + batch]
        x = torch.stack([r.x_adv for r in part])
        y = torch.tensor([r.label for r in part])
        total += sort_within_layers(saliency_values(victim, x, y, stats), bounds).sum(0)
    return SaliencyProfile(total / len(kept), bounds, f"aggregate:{kind.label}", len(kept),
                           [r.clean_id for r in kept])


# --------------------------------------------------------------------------
# input-space map

def _differentiable_saliency(victim, x, y, stats: ValStats):
    model = _model(victim)
    model.eval()
    params = {k: v.detach().clone().requires_grad_(True) for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}
    out = functional_call(model, (params, buffers), (x[None],))
    loss = F.cross_entropy(out, torch.as_tensor([int(y)]))
    names = list(params)
    gs = torch.autograd.grad(loss, [params[k] for k in names], create_graph=True)
    agg = _aggregate(dict(zip(names, gs)), _conv_layers(model))
    mu = torch.as_tensor(stats.mu, dtype=agg.dtype)
    sigma = torch.as_tensor(stats.sigma, dtype=agg.dtype)
    return (agg - mu).abs() / (sigma + SIGMA_GUARD)


def boosted_copy(s: torch.Tensor, n: int, boost: float) -> torch.Tensor:
    s2 = s.detach().clone()
    top = torch.topk(s2, n).indices
    s2[top] = s2[top] * boost
    return s2


def cosine_distance_objective(victim, x, y, stats, target: torch.Tensor) -> torch.Tensor:
    s = _differentiable_saliency(victim, x, y, stats)
    return 1.0 - F.cosine_similarity(s, target, dim=0)


def input_saliency_map(victim, x: torch.Tensor, y: int, stats: ValStats, n: int = 10,
                       boost: float = 10.0, reduce: bool = True) -> torch.Tensor:
    """``|grad_x D_C(s(x, y), s')|`` with ``s'`` = ``s`` with its top-``n`` entries boosted.

    Returns an ``(H, W)`` map (max over channels) or the raw ``(C, H, W)``
    gradient magnitude when ``reduce`` is false.
    """
    k = len(stats.mu)
    if not 0 < n <= k:
        raise ValueError(f"n must lie in 1..{k}")
    if boost < 1:
        raise ValueError("boost must be >= 1")
    x = x.detach().clone().requires_grad_(True)
    s = _differentiable_saliency(victim, x, y, stats)
    target = boosted_copy(s, n, boost)
    if float(s.detach().abs().max()) == 0.0:
        warnings.warn("saliency vector is all zero; cosine distance undefined")
        raw = torch.zeros_like(x)
    elif torch.equal(target, s.detach()):
        # s' == s: the cosine distance sits at its minimum, gradient is zero
        raw = torch.zeros_like(x)
    else:
        d = 1.0 - F.cosine_similarity(s, target, dim=0)
        (g,) = torch.autograd.grad(d, x)
        raw = g.abs()
    raw = raw.detach()
    return raw.amax(0) if reduce else raw


# --------------------------------------------------------------------------
# export

def write_profile(profile: SaliencyProfile, path, layer_names=None) -> Path:
    """Tab-separated ``layer, rank, value`` rows under a boundary header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = layer_names or [f"layer{i}" for i in range(len(profile.bounds) - 1)]
    lines = [f"# provenance\t{profile.provenance}",
             f"# n_samples\t{profile.n_samples}",
             "# bounds\t" + ",".join(map(str, profile.bounds)),
             "# layers\t" + ",".join(names),
             "layer\trank\tvalue"]
    for li, (a, b) in enumerate(zip(profile.bounds, profile.bounds[1:])):
        for r, v in enumerate(profile.values[a:b]):
            lines.append(f"{names[li]}\t{r}\t{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_profile(path) -> tuple[SaliencyProfile, list[str]]:
    meta, values = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition("\t")
            meta[key] = val
        elif line and not line.startswith("layer\t"):
            values.append(float(line.split("\t")[2]))
    bounds = [int(v) for v in meta["bounds"].split(",")]
    prof = SaliencyProfile(np.array(values), bounds, meta.get("provenance", ""),
                           int(meta.get("n_samples", 0)))
    return prof, meta.get("layers", "").split(",")
