import numpy as np
import pytest
import torch
import torch.nn as nn

from advsig.attacks import AttackConfig, AttackKind, attack_batch
from advsig.saliency import (SIGMA_GUARD, aggregate_profiles, compute_val_stats,
                             cosine_distance_objective, boosted_copy, filter_saliency,
                             input_saliency_map, kept_mask, read_profile, sort_within_layers,
                             write_profile, _differentiable_saliency)
from advsig.victim_zoo import VictimSpec, build_victim, conv_filter_index


class Toy(nn.Module):
    """Smooth conv net small enough for per-parameter loops."""

    def __init__(self, filters=(3, 4)):
        super().__init__()
        self.conv1 = nn.Conv2d(3, filters[0], 3, padding=1)
        self.conv2 = nn.Conv2d(filters[0], filters[1], 3, padding=1, bias=False)
        self.head = nn.Linear(filters[1], 10)

    def forward(self, x):
        h = torch.tanh(self.conv2(torch.tanh(self.conv1(x))))
        return self.head(h.mean((2, 3)))


def _toy(seed=0):
    torch.manual_seed(seed)
    return Toy().double().eval()


def naive_abs_grads(model, x, y):
    """Per-sample backward passes, then a loop over each filter's parameter indices."""
    index, _ = conv_filter_index(model)
    rows = []
    for i in range(len(x)):
        model.zero_grad()
        nn.functional.cross_entropy(model(x[i:i + 1]), y[i:i + 1]).backward()
        flat = torch.cat([p.grad.flatten() for p in model.parameters()]).tolist()
        row = []
        for key in index:
            total = 0.0
            for j in index[key]:
                total += abs(flat[int(j)])
            row.append(total / len(index[key]))
        rows.append(row)
    return np.array(rows)


@pytest.fixture
def batch():
    g = torch.Generator().manual_seed(1)
    return torch.rand(4, 3, 6, 6, generator=g, dtype=torch.float64), torch.tensor([1, 3, 3, 7])


def test_stats_and_saliency_match_naive_oracle(batch):
    model = _toy()
    assert sum(p.numel() for p in model.parameters()) < 10_000
    x, y = batch
    a = naive_abs_grads(model, x, y)
    stats = compute_val_stats(model, x, y, chunk=3)
    np.testing.assert_allclose(stats.mu, a.mean(0), rtol=0, atol=1e-7)
    np.testing.assert_allclose(stats.sigma, a.std(0), rtol=0, atol=1e-7)
    for i in range(4):
        prof = filter_saliency(model, x[i], int(y[i]), stats)
        expect = np.abs(a[i] - a.mean(0)) / (a.std(0) + SIGMA_GUARD)
        np.testing.assert_allclose(prof.values, expect, rtol=0, atol=1e-7)


def test_filter_count_matches_victim_index(batch):
    v = build_victim(VictimSpec("desk_cnn", input_shape=(3, 8, 8), width=4))
    x = torch.rand(2, 3, 8, 8)
    stats = compute_val_stats(v, x, torch.tensor([0, 1]))
    assert len(stats.mu) == len(v.filter_index) == stats.bounds[-1]


def test_single_sample_and_identical_samples(batch):
    model = _toy()
    x, y = batch
    one = compute_val_stats(model, x[:1], y[:1])
    assert (one.sigma == 0).all() and len(one.zero_sigma) == len(one.mu)
    prof = filter_saliency(model, x[0], int(y[0]), one)
    assert (prof.values == 0).all()
    two = compute_val_stats(model, x[[0, 0]], y[[0, 0]])
    assert (two.sigma == 0).all()
    np.testing.assert_allclose(two.mu, one.mu, rtol=1e-12)


@pytest.mark.parametrize("scale", [0.01, 7.0, 1000.0])
def test_loss_scale_invariance(batch, scale):
    model = _toy()
    x, y = batch
    base = compute_val_stats(model, x, y)
    scaled = compute_val_stats(model, x, y, loss_scale=scale)
    for i in range(4):
        s1 = filter_saliency(model, x[i], int(y[i]), base).values
        s2 = filter_saliency(model, x[i], int(y[i]), scaled, loss_scale=scale).values
        np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-6)


def test_empty_validation_rejected():
    with pytest.raises(ValueError):
        compute_val_stats(_toy(), torch.zeros(0, 3, 6, 6, dtype=torch.float64),
                          torch.zeros(0, dtype=torch.long))


def test_sort_within_layers():
    s = np.array([[1.0, 3.0, 2.0, 5.0, 4.0]])
    np.testing.assert_array_equal(sort_within_layers(s, [0, 3, 5]), [[3, 2, 1, 5, 4]])


@pytest.fixture(scope="module")
def attacked():
    torch.manual_seed(2)
    model = Toy().eval()
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(3)
    g = torch.Generator().manual_seed(4)
    x = torch.rand(20, 3, 6, 6, generator=g)
    with torch.no_grad():
        y = model(x).argmax(1)
    y[:3] = (y[:3] + 1) % 10  # a few clean-misclassified samples
    recs = attack_batch(model, x, y, AttackConfig(AttackKind.PGD, steps=20, epsilon=0.3,
                                                  step_size=0.03))
    return model, recs, compute_val_stats(model, x, y)


def test_aggregate_filters_and_monotone(attacked):
    tiny_victim, recs, stats = attacked
    prof = aggregate_profiles(tiny_victim, stats, recs, "PGD")
    with torch.no_grad():
        expect = [r.clean_id for r in recs
                  if int(tiny_victim(r.x_clean[None]).argmax()) == r.label
                  and int(tiny_victim(r.x_adv[None]).argmax()) != r.label]
    assert sorted(prof.sample_ids) == sorted(expect) and prof.n_samples == len(expect) > 0
    assert (prof.values >= 0).all()
    for seg in prof.segments():
        assert np.all(np.diff(seg) <= 0)
    assert kept_mask(tiny_victim, recs).sum() == len(expect)


def test_aggregate_single_and_empty(attacked):
    tiny_victim, recs, stats = attacked
    keep = kept_mask(tiny_victim, recs)
    one = recs[int(np.flatnonzero(keep)[0])]
    agg = aggregate_profiles(tiny_victim, stats, [one], AttackKind.PGD)
    own = filter_saliency(tiny_victim, one.x_adv, one.label, stats).values
    np.testing.assert_allclose(agg.values, sort_within_layers(own, stats.bounds), rtol=1e-12)
    dropped = [recs[i] for i in np.flatnonzero(~keep)]
    empty = aggregate_profiles(tiny_victim, stats, dropped, AttackKind.PGD)
    assert empty.empty and (empty.values == 0).all()


def test_boost_one_gives_zero_map(batch):
    model = _toy()
    x, y = batch
    stats = compute_val_stats(model, x, y)
    m = input_saliency_map(model, x[0], int(y[0]), stats, n=3, boost=1.0)
    assert m.shape == (6, 6) and (m == 0).all()
    m10 = input_saliency_map(model, x[0], int(y[0]), stats, n=3, boost=10.0)
    assert (m10 >= 0).all() and m10.max() > 0
    with pytest.raises(ValueError):
        input_saliency_map(model, x[0], int(y[0]), stats, n=0)


def test_all_zero_saliency_warns(batch):
    model = _toy()
    x, y = batch
    stats = compute_val_stats(model, x[:1], y[:1])
    with pytest.warns(UserWarning):
        m = input_saliency_map(model, x[0], int(y[0]), stats, n=2)
    assert (m == 0).all()


def test_map_gradient_matches_finite_differences(batch):
    model = _toy()
    x, y = batch
    stats = compute_val_stats(model, x, y)
    x0, y0 = x[1].clone(), int(y[1])
    target = boosted_copy(_differentiable_saliency(model, x0, y0, stats), 3, 10.0)
    xg = x0.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(cosine_distance_objective(model, xg, y0, stats, target), xg)
    rng = np.random.default_rng(0)
    picks = [tuple(rng.integers(0, s) for s in x0.shape) for _ in range(12)]
    h = 1e-5
    fd = []
    for p in picks:
        up, down = x0.clone(), x0.clone()
        up[p] += h
        down[p] -= h
        fu = cosine_distance_objective(model, up, y0, stats, target).item()
        fdn = cosine_distance_objective(model, down, y0, stats, target).item()
        fd.append((fu - fdn) / (2 * h))
    auto = np.array([g[p].item() for p in picks])
    fd = np.array(fd)
    assert np.linalg.norm(auto - fd) / np.linalg.norm(auto) < 1e-2
    full = input_saliency_map(model, x0, y0, stats, n=3, boost=10.0, reduce=False)
    torch.testing.assert_close(full, g.abs(), rtol=1e-10, atol=0)


def test_profile_tsv_round_trip(tmp_path, attacked):
    tiny_victim, recs, stats = attacked
    prof = aggregate_profiles(tiny_victim, stats, recs, "PGD")
    names = [n for n, _ in stats.layer_filters]
    path = write_profile(prof, tmp_path / "p.tsv", names)
    back, layers = read_profile(path)
    assert layers == names and back.bounds == prof.bounds and back.n_samples == prof.n_samples
    np.testing.assert_array_equal(back.values, prof.values)
