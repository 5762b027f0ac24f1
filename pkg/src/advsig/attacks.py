"""The five attack optimizers and the record auditor.

Every attack works on a batch internally; :func:`attack_batch` is the batch
entry point and the ``*_attack`` functions wrap it for a single image.
Images live in ``[0, 1]`` and epsilons are given on that scale (8/255, not 8).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn.functional as F


class AttackKind(enum.IntEnum):
    CLEAN = 0
    PGD = 1
    DEEPFOOL = 2
    CWL2 = 3
    CWLINF = 4
    PATCH = 5

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for kind, name in _LABELS.items():
            if key in (name.lower(), kind.name.lower()):
                return kind
        raise ValueError(f"unknown attack kind {value!r}")


_LABELS = {AttackKind.CLEAN: "Clean", AttackKind.PGD: "PGD", AttackKind.DEEPFOOL: "DeepFool",
           AttackKind.CWL2: "CWL2", AttackKind.CWLINF: "CWLinf", AttackKind.PATCH: "Patch"}

NUM_KINDS = len(AttackKind)
LINF_KINDS = (AttackKind.PGD, AttackKind.CWLINF, AttackKind.PATCH)


class NumericalError(FloatingPointError):
    def __init__(self, what: str, step: int):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters for one attack; each kind reads only its own fields.

    ========  =====================================================
    PGD       steps, epsilon, step_size, random_start, seed
    DeepFool  steps, overshoot
    CWL2      steps, c, kappa, lr
    CWLinf    steps, epsilon, c, kappa, lr
    Patch     steps, epsilon, lr, kappa, patch_side, seed
    ========  =====================================================
    """

    kind: AttackKind
    steps: int = 100
    epsilon: float = 8 / 255
    step_size: float = 0.01
    c: float = 1.0
    kappa: float = 0.0
    lr: float = 0.01
    patch_side: int = 8
    overshoot: float = 0.02
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind.parse(self.kind))
        if self.steps < 0:
            raise AttackConfigError("steps must be non-negative")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be non-negative")
        if self.patch_side < 1:
            raise AttackConfigError("patch_side must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AttackConfigError(f"unknown attack config keys {sorted(unknown)}")
        return cls(**d)


def full_grid() -> dict[AttackKind, list[AttackConfig]]:
    """The attack menu used to build the six-class datasets."""
    eps = [4 / 255, 8 / 255, 16 / 255]
    return {
        AttackKind.CLEAN: [AttackConfig(AttackKind.CLEAN, steps=0)],
        AttackKind.PGD: [AttackConfig(AttackKind.PGD, steps=100, epsilon=e, step_size=0.01)
                         for e in eps],
        AttackKind.DEEPFOOL: [AttackConfig(AttackKind.DEEPFOOL, steps=50)],
        AttackKind.CWL2: [AttackConfig(AttackKind.CWL2, steps=1000, c=c, lr=0.01, kappa=0.0)
                          for c in (100.0, 1000.0)],
        AttackKind.CWLINF: [AttackConfig(AttackKind.CWLINF, steps=100, epsilon=e, lr=0.005, c=5.0)
                            for e in eps],
        AttackKind.PATCH: [AttackConfig(AttackKind.PATCH, steps=100, epsilon=e, lr=0.01,
                                        patch_side=s) for e in eps for s in (4, 8, 16)],
    }


@dataclass
class AdversarialRecord:
    clean_id: int
    label: int
    x_clean: torch.Tensor
    x_adv: torch.Tensor
    delta: torch.Tensor  # float64, exactly x_adv - x_clean
    kind: AttackKind
    success: bool
    victim_id: str
    config: AttackConfig
    n_iter: int = 0
    patch_box: tuple[int, int, int] | None = None  # (top, left, side)


# --------------------------------------------------------------------------
# primitives

def project_linf(x_candidate: torch.Tensor, x_center: torch.Tensor, eps: float) -> torch.Tensor:
    """Clamp into the max-norm ball of radius ``eps`` around ``x_center``, then into [0, 1]."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if x_candidate.shape != x_center.shape:
        raise ValueError("shape mismatch")
    out = torch.minimum(torch.maximum(x_candidate, x_center - eps), x_center + eps)
    return out.clamp(0.0, 1.0)


def cw_surrogate(logits: torch.Tensor, y: torch.Tensor, kappa: float) -> torch.Tensor:
    """``max(Z_y - max_{i != y} Z_i, -kappa)`` per sample."""
    true = logits.gather(1, y[:, None])[:, 0]
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).amax(1)
    return torch.clamp(true - other, min=-kappa)


def _grad(value: torch.Tensor, x: torch.Tensor, step: int, what: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericalError(what, step)
    (g,) = torch.autograd.grad(value, x)
    if not torch.isfinite(g).all():
        raise NumericalError(f"{what} gradient", step)
    return g


def _sample_rng(seed: int, clean_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(clean_id) & 0xFFFFFFFFFFFF])


# --------------------------------------------------------------------------
# attacks on batches; each returns (x_adv, iterations, extra)

def _pgd(model, x, y, cfg, ids):
    x_adv = x.clone()
    if cfg.random_start and cfg.epsilon > 0:
        noise = torch.stack([
            torch.from_numpy(_sample_rng(cfg.seed, i).uniform(-cfg.epsilon, cfg.epsilon, x.shape[1:]))
            for i in ids]).to(x.dtype)
        x_adv = project_linf(x + noise, x, cfg.epsilon)
    for step in range(cfg.steps):
        x_adv.requires_grad_(True)
        loss = F.cross_entropy(model(x_adv), y, reduction="sum")
        g = _grad(loss, x_adv, step, "cross-entropy")
        x_adv = project_linf(x_adv.detach() + cfg.step_size * g.sign(), x, cfg.epsilon)
    iters = torch.full((len(x),), cfg.steps)
    return x_adv.detach(), iters, None


def _deepfool(model, x, y, cfg, ids):
    n = len(x)
    r_tot = torch.zeros_like(x)
    scale = 1.0 + cfg.overshoot
    iters = torch.zeros(n, dtype=torch.long)
    with torch.no_grad():
        active = model(x).argmax(1) == y
    for step in range(cfg.steps):
        idx = active.nonzero()[:, 0]
        if len(idx) == 0:
            break
        xa = (x[idx] + scale * r_tot[idx]).requires_grad_(True)
        logits = model(xa)
        if not torch.isfinite(logits).all():
            raise NumericalError("logits", step)
        num_classes = logits.shape[1]
        grads = []
        for k in range(num_classes):
            (g,) = torch.autograd.grad(logits[:, k].sum(), xa, retain_graph=k < num_classes - 1)
            grads.append(g)
        grads = torch.stack(grads, 1)  # (m, C, ...)
        ya = y[idx]
        ar = torch.arange(len(idx))
        w = grads - grads[ar, ya][:, None]
        fdiff = (logits - logits[ar, ya][:, None]).detach()
        wnorm = w.flatten(2).norm(dim=2)
        ratio = fdiff.abs() / wnorm
        ratio[ar, ya] = float("inf")
        ratio[wnorm == 0] = float("inf")
        degenerate = torch.isinf(ratio).all(1)
        best = ratio.argmin(1)
        w_best = w[ar, best]
        coef = fdiff[ar, best].abs() / wnorm[ar, best].clamp_min(1e-30) ** 2
        r = coef.view(-1, *[1] * (x.ndim - 1)) * w_best
        r[degenerate] = 0
        r_tot[idx] += r.detach()
        iters[idx[~degenerate]] += 1
        with torch.no_grad():
            still = model(x[idx] + scale * r_tot[idx]).argmax(1) == ya
        active[idx] = still & ~degenerate
    x_adv = (x + scale * r_tot).clamp(0, 1)
    return x_adv, iters, None


def _cw_l2(model, x, y, cfg, ids):
    w0 = torch.logit(x.clamp(1e-6, 1 - 1e-6))
    base = torch.sigmoid(w0)
    w = w0.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.lr)
    best = x.clone()
    best_dist = torch.full((len(x),), float("inf"), dtype=x.dtype)

    def current():
        return (x + torch.sigmoid(w) - base).clamp(0, 1)

    for step in range(cfg.steps + 1):
        x_adv = current()
        logits = model(x_adv)
        dist = (x_adv - x).flatten(1).pow(2).sum(1)
        loss = dist + cfg.c * cw_surrogate(logits, y, cfg.kappa)
        with torch.no_grad():
            better = (logits.argmax(1) != y) & (dist < best_dist)
            best[better] = x_adv[better].detach()
            best_dist[better] = dist[better].detach()
        if step == cfg.steps:
            break
        total = loss.sum()
        if not torch.isfinite(total):
            raise NumericalError("CW-L2 objective", step)
        opt.zero_grad()
        total.backward()
        opt.step()
    found = torch.isfinite(best_dist)
    final = current().detach()
    x_adv = torch.where(found.view(-1, *[1] * (x.ndim - 1)), best, final)
    return x_adv, torch.full((len(x),), cfg.steps), None


def _cw_linf(model, x, y, cfg, ids):
    delta = torch.zeros_like(x, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.lr)
    for step in range(cfg.steps):
        loss = (cfg.c * cw_surrogate(model(x + delta), y, cfg.kappa)).sum()
        if not torch.isfinite(loss):
            raise NumericalError("CW-Linf objective", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            delta.copy_(project_linf(x + delta, x, cfg.epsilon) - x)
    x_adv = project_linf((x + delta).detach(), x, cfg.epsilon)
    return x_adv, torch.full((len(x),), cfg.steps), None


def patch_corner(cfg: AttackConfig, clean_id: int, height: int, width: int) -> tuple[int, int]:
    """Seeded top-left corner, uniform over all valid positions."""
    rng = _sample_rng(cfg.seed, clean_id)
    return (int(rng.integers(0, height - cfg.patch_side + 1)),
            int(rng.integers(0, width - cfg.patch_side + 1)))


def _patch(model, x, y, cfg, ids, corners=None):
    n, _, h, w = x.shape
    s = cfg.patch_side
    if s > min(h, w):
        raise AttackConfigError(f"patch_side {s} exceeds image side {min(h, w)}")
    if corners is None:
        corners = [patch_corner(cfg, i, h, w) for i in ids]
    mask = torch.zeros_like(x)
    for i, (top, left) in enumerate(corners):
        mask[i, :, top:top + s, left:left + s] = 1
    x_adv = x.clone()
    for step in range(cfg.steps):
        x_adv.requires_grad_(True)
        loss = cw_surrogate(model(x_adv), y, cfg.kappa).sum()
        g = _grad(loss, x_adv, step, "patch surrogate")
        x_adv = project_linf(x_adv.detach() - cfg.lr * g.sign() * mask, x, cfg.epsilon)
    boxes = [(top, left, s) for top, left in corners]
    return x_adv.detach(), torch.full((n,), cfg.steps), boxes


_ATTACKS = {AttackKind.PGD: _pgd, AttackKind.DEEPFOOL: _deepfool, AttackKind.CWL2: _cw_l2,
            AttackKind.CWLINF: _cw_linf, AttackKind.PATCH: _patch}


def _flush_tiny(x_adv, x_clean):
    # keeps x_adv - x_clean exactly representable in float64
    tiny = (x_adv.abs() < 2.0 ** -20) & (x_adv != x_clean)
    return torch.where(tiny, torch.zeros_like(x_adv), x_adv)


def attack_batch(victim, images: torch.Tensor, labels: torch.Tensor, cfg: AttackConfig,
                 clean_ids=None, corners=None) -> list[AdversarialRecord]:
    """Run ``cfg`` on a batch and return one audited-ready record per image."""
    images = images.detach()
    labels = torch.as_tensor(labels, dtype=torch.long)
    if clean_ids is None:
        clean_ids = list(range(len(images)))
    clean_ids = [int(i) for i in clean_ids]
    model = victim
    if isinstance(victim, torch.nn.Module):
        victim.eval()
    boxes = None
    if cfg.kind == AttackKind.CLEAN:
        x_adv, iters = images.clone(), torch.zeros(len(images), dtype=torch.long)
    elif cfg.kind == AttackKind.PATCH:
        x_adv, iters, boxes = _patch(model, images, labels, cfg, clean_ids, corners)
    else:
        x_adv, iters, boxes = _ATTACKS[cfg.kind](model, images, labels, cfg, clean_ids)
    x_adv = _flush_tiny(x_adv.detach(), images)
    with torch.no_grad():
        success = model(x_adv).argmax(1) != labels
    victim_id = getattr(victim, "victim_id", type(victim).__name__)
    records = []
    for i in range(len(images)):
        records.append(AdversarialRecord(
            clean_id=clean_ids[i], label=int(labels[i]), x_clean=images[i], x_adv=x_adv[i],
            delta=x_adv[i].double() - images[i].double(), kind=cfg.kind,
            success=bool(success[i]), victim_id=victim_id, config=cfg,
            n_iter=int(iters[i]), patch_box=boxes[i] if boxes else None))
    return records


def _single(kind, victim, x, y, cfg, clean_id=0, corner=None):
    if cfg.kind != kind:
        raise AttackConfigError(f"expected a {kind.label} config, got {cfg.kind.label}")
    corners = None if corner is None else [corner]
    return attack_batch(victim, x[None], torch.tensor([int(y)]), cfg, [clean_id], corners)[0]


def pgd_attack(victim, x, y, cfg, clean_id=0) -> AdversarialRecord:
    return _single(AttackKind.PGD, victim, x, y, cfg, clean_id)


def deepfool_attack(victim, x, y, cfg, clean_id=0) -> AdversarialRecord:
    return _single(AttackKind.DEEPFOOL, victim, x, y, cfg, clean_id)


def cw_l2_attack(victim, x, y, cfg, clean_id=0) -> AdversarialRecord:
    return _single(AttackKind.CWL2, victim, x, y, cfg, clean_id)


def cw_linf_attack(victim, x, y, cfg, clean_id=0) -> AdversarialRecord:
    return _single(AttackKind.CWLINF, victim, x, y, cfg, clean_id)


def patch_attack(victim, x, y, cfg, clean_id=0, corner=None) -> AdversarialRecord:
    return _single(AttackKind.PATCH, victim, x, y, cfg, clean_id, corner)


# --------------------------------------------------------------------------
# auditing

def audit_record(rec: AdversarialRecord, victim=None, tol: float = 1e-6) -> list[str]:
    """Re-check a record's constraints from its tensors alone.

    Returns a list of violation messages (empty when the record is valid).
    When ``victim`` is given the success flag is re-derived as well.
    """
    problems = []
    xc, xa = rec.x_clean.double(), rec.x_adv.double()
    delta = xa - xc
    if not torch.equal(xc + delta, xa) or not torch.equal(rec.delta.double(), delta):
        problems.append("x_adv != x_clean + delta")
    if xa.min() < 0 or xa.max() > 1:
        problems.append("x_adv outside [0, 1]")
    kind, cfg = AttackKind(rec.kind), rec.config
    if kind == AttackKind.CLEAN and not torch.equal(rec.x_adv, rec.x_clean):
        problems.append("clean record altered")
    if kind in LINF_KINDS and float(delta.abs().max()) > cfg.epsilon + tol:
        problems.append(f"max-norm {float(delta.abs().max()):.3g} > eps {cfg.epsilon:.3g}")
    if kind == AttackKind.PATCH:
        if rec.patch_box is None:
            problems.append("patch record without a box")
        else:
            top, left, side = rec.patch_box
            outside = delta.clone()
            outside[:, top:top + side, left:left + side] = 0
            if float(outside.abs().sum()) != 0.0:
                problems.append("patch delta nonzero outside the window")
    if victim is not None:
        with torch.no_grad():
            pred = int(victim(rec.x_adv[None]).argmax(1))
        if (pred != rec.label) != rec.success:
            problems.append("success flag disagrees with victim prediction")
    return problems


def with_seed(cfg: AttackConfig, seed: int) -> AttackConfig:
    return replace(cfg, seed=seed)
