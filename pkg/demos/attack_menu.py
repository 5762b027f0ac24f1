"""
Five attacks against one small classifier
=========================================

Trains a desk CNN for a couple of epochs on photo crops, runs one
configuration of every attack kind on a handful of test images and prints
the perturbation size and success rate per kind.
"""

from dataclasses import replace

import torch

from advsig.attacks import AttackKind, attack_batch, audit_record, full_grid
from advsig.data import photo_crops
from advsig.victim_zoo import TrainSchedule, VictimSpec, build_victim, evaluate_accuracy, train_victim

torch.manual_seed(0)

train = photo_crops(100, split="train", seed=0)
test = photo_crops(4, split="test", seed=0)

victim = build_victim(VictimSpec("desk_cnn", width=8))
victim = train_victim(victim, train, TrainSchedule(epochs=3, base_lr=0.05, decay_epochs=()))
print("clean test accuracy", evaluate_accuracy(victim, test)[0])

# first grid entry of each kind, CW-L2 shortened so the demo stays quick
for kind, configs in full_grid().items():
    if kind is AttackKind.CLEAN:
        continue
    cfg = configs[0]
    if kind is AttackKind.CWL2:
        cfg = replace(cfg, steps=100)
    recs = attack_batch(victim, test.images, test.labels, cfg, test.ids.tolist())
    linf = max(float(r.delta.abs().max()) for r in recs)
    l2 = sum(float(r.delta.norm()) for r in recs) / len(recs)
    ok = sum(r.success for r in recs)
    bad = sum(bool(audit_record(r, victim)) for r in recs)
    print(f"{kind.label:9s} success {ok:2d}/{len(recs)}  max|d| {linf:.4f}  mean||d||2 {l2:.3f}"
          f"  audit failures {bad}")
