"""
Which filters does an attack lean on?
=====================================

Builds filter-saliency profiles for clean and PGD images on a briefly
trained victim, then compares the two profiles layer by layer.
"""

import numpy as np
import torch

from advsig.attacks import AttackConfig, AttackKind, attack_batch
from advsig.data import photo_crops
from advsig.saliency import compute_val_stats, saliency_values, sort_within_layers
from advsig.victim_zoo import TrainSchedule, VictimSpec, build_victim, train_victim

train = photo_crops(100, split="train", seed=0)
val = photo_crops(10, split="test", seed=1)
probe = photo_crops(3, split="test", seed=2)

victim = train_victim(build_victim(VictimSpec("desk_cnn", width=8)), train,
                      TrainSchedule(epochs=3, base_lr=0.05, decay_epochs=()))
stats = compute_val_stats(victim, val.images, val.labels)

pgd = AttackConfig(AttackKind.PGD, steps=20, epsilon=8 / 255)
recs = attack_batch(victim, probe.images, probe.labels, pgd, probe.ids.tolist())
x_adv = torch.stack([r.x_adv for r in recs])

clean = saliency_values(victim, probe.images, probe.labels, stats).mean(0)
attacked = saliency_values(victim, x_adv, probe.labels, stats).mean(0)

bounds = stats.bounds
for (name, _), lo, hi in zip(stats.layer_filters, bounds, bounds[1:]):
    print(f"{name:24s} clean {clean[lo:hi].mean():.3f}  pgd {attacked[lo:hi].mean():.3f}")

# per-layer sorted profiles, the form used for plotting
c_sorted = sort_within_layers(clean, bounds)
a_sorted = sort_within_layers(attacked, bounds)
print("largest gap between sorted profiles", float(np.max(np.abs(a_sorted - c_sorted))))
