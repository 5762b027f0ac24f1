import math

import pytest
import torch
import torch.nn as nn

from advsig.attacks import NumericalError
from advsig.checkpoint import state_checksum
from advsig.redrl import (DEFAULT_LAMBDAS, FeatureExtractor, Reconstructor, ReconstructorSpec,
                          attack_classification_loss, feature_loss, image_classification_loss,
                          infer, load_bundle, make_bundle, reconstruction_loss, save_bundle,
                          total_loss, train_redrl, warmup_lr)
from advsig.victim_zoo import ConfigurationError, VGGDesk, VictimSpec, build_victim

torch.set_default_dtype(torch.float32)


class Const(nn.Module):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        return x.new_zeros(len(x), self.k)


def _central_diff(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def _check_grad(fn, x):
    x = x.clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(x), x)
    num = _central_diff(fn, x.detach().clone())
    assert (auto - num).norm() / auto.norm() < 1e-3


# analytic values

def test_image_classification_loss_uniform_is_ln10():
    x = torch.rand(4, 3, 8, 8, dtype=torch.float64)
    assert image_classification_loss(x, x, Const(10)).item() == pytest.approx(math.log(10), abs=1e-15)


def test_attack_classification_loss_uniform_is_ln6():
    x = torch.rand(5, 3, 8, 8, dtype=torch.float64)
    kind = torch.arange(5) % 6
    loss = attack_classification_loss(x, x, kind, Const(6), label_smoothing=0.0)
    assert loss.item() == pytest.approx(math.log(6), abs=1e-15)


def test_total_loss_weighted_sum():
    ones = dict(AC=1.0, R=1.0, F=1.0, IC=1.0)
    assert total_loss(ones) == 1.0 + 0.01 * 1.0 + 0.1 * 1.0 + 1.0 * 1.0
    assert total_loss(ones) == pytest.approx(2.11, abs=1e-12)
    assert total_loss(dict(AC=0.7, R=3.0, F=2.0, IC=5.0), (0, 0, 0)) == 0.7
    base = dict(AC=0.3, R=0.4, F=0.5, IC=0.6)
    doubled = dict(base, R=0.8)
    assert total_loss(doubled) - total_loss(base) == pytest.approx(DEFAULT_LAMBDAS[0] * 0.4, abs=1e-15)


def test_total_loss_names_non_finite_term():
    with pytest.raises(NumericalError, match="L_F"):
        total_loss(dict(AC=1.0, R=1.0, F=float("nan"), IC=1.0))


def test_reconstruction_loss_values():
    a = torch.full((2, 3, 4, 4), 0.5)
    assert reconstruction_loss(a, a).item() == 0
    assert reconstruction_loss(a, torch.full_like(a, 0.25)).item() == 0.25
    x, g = torch.rand(3, 3, 5, 5, dtype=torch.float64), torch.rand(3, 3, 5, 5, dtype=torch.float64)
    naive = sum(abs(float(x[n].flatten()[i] - g[n].flatten()[i])) for n in range(3)
                for i in range(75)) / 225
    assert abs(reconstruction_loss(x, g).item() - naive) < 1e-7
    with pytest.raises(ValueError):
        reconstruction_loss(a, a[:, :1])


def test_feature_loss_identity_extractor():
    x = torch.rand(3, 2, 4, 4, dtype=torch.float64)
    v = torch.randn(2, 4, 4, dtype=torch.float64)
    ident = FeatureExtractor(nn.Identity())
    assert feature_loss(x, x, ident).item() == 0
    assert feature_loss(x, x - v, ident).item() == pytest.approx(v.norm().item(), rel=1e-12)


def test_feature_extractor_missing_layer():
    with pytest.raises(KeyError):
        FeatureExtractor(VGGDesk(3, 10, 4), "nope")


# finite-difference gradients on miniature models (float64)

@pytest.fixture
def mini():
    torch.manual_seed(0)
    phi = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Tanh(), nn.Flatten(),
                        nn.Linear(4 * 4 * 4, 10)).double()
    psi = nn.Sequential(nn.Conv2d(6, 4, 3, padding=1), nn.Tanh(), nn.Flatten(),
                        nn.Linear(4 * 4 * 4, 6)).double()
    feat = nn.Sequential(nn.Conv2d(3, 5, 3, padding=1), nn.Tanh()).double()
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    g = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    return phi, psi, feat, x, g


def test_grad_reconstruction(mini):
    _, _, _, x, g = mini
    _check_grad(lambda t: reconstruction_loss(x, t), g)


def test_grad_feature(mini):
    _, _, feat, x, g = mini
    _check_grad(lambda t: feature_loss(x, t, FeatureExtractor(feat)), g)


def test_grad_image_classification(mini):
    phi, _, _, x, g = mini
    _check_grad(lambda t: image_classification_loss(t, x, phi), g)


def test_grad_attack_classification(mini):
    _, psi, _, x, g = mini
    kind = torch.tensor([1, 4])
    _check_grad(lambda t: attack_classification_loss(t, x, kind, psi, 0.1), g)


def test_attack_loss_reaches_reconstructor():
    G = Reconstructor(ReconstructorSpec(1, 4))
    psi = nn.Sequential(nn.Conv2d(6, 2, 3), nn.Flatten(), nn.LazyLinear(6))
    x = torch.rand(2, 3, 8, 8)
    attack_classification_loss(x - G(x), x, torch.tensor([0, 5]), psi).backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in G.parameters())


# reconstructor structure

@pytest.mark.parametrize("hw", [(5, 7), (8, 8), (17, 3)])
def test_reconstructor_preserves_shape(hw):
    G = Reconstructor(ReconstructorSpec(2, 8))
    assert G(torch.rand(2, 3, *hw)).shape == (2, 3, *hw)


def test_reconstructor_has_no_global_skip():
    G = Reconstructor(ReconstructorSpec(2, 8))
    last = G.tail[-1]
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    # with the last layer zeroed nothing of the input may survive
    assert G(torch.rand(2, 3, 8, 8)).abs().max() == 0


@pytest.mark.parametrize("init", ["identity", "default"])
def test_reconstructor_no_skip_for_either_init(init):
    G = Reconstructor(ReconstructorSpec(2, 8, init=init))
    nn.init.zeros_(G.tail[-1].weight)
    nn.init.zeros_(G.tail[-1].bias)
    assert G(torch.rand(2, 3, 8, 8)).abs().max() == 0


def test_identity_init_starts_at_identity():
    x = torch.rand(4, 3, 16, 16)
    assert torch.equal(Reconstructor(ReconstructorSpec(3, 8, init="identity"))(x), x)
    assert not torch.allclose(Reconstructor(ReconstructorSpec(3, 8, init="default"))(x), x)
    with pytest.raises(ValueError):
        Reconstructor(ReconstructorSpec(1, 8, init="orthogonal"))


def test_warmup_schedule():
    assert warmup_lr(0, 1.0, 10) == pytest.approx(0.1)
    assert warmup_lr(5, 1.0, 10) == pytest.approx(0.55)
    assert warmup_lr(10, 1.0, 10) == 1.0 and warmup_lr(50, 1.0, 10) == 1.0
    assert warmup_lr(0, 1.0, 0) == 1.0


# training and inference on the tiny dataset

@pytest.fixture(scope="module")
def tiny_bundle_parts(tiny_victim):
    fnet = build_victim(VictimSpec("vgg_desk", input_shape=(3, 8, 8), width=4)).model
    return tiny_victim, fnet


def _bundle(parts, seed=0, lambdas=DEFAULT_LAMBDAS):
    victim, fnet = parts
    return make_bundle(victim, FeatureExtractor(fnet, "block3"), ReconstructorSpec(1, 8),
                       psi_width=4, lambdas=lambdas, seed=seed)


def test_frozen_modules_unchanged_by_training(tiny_bundle_parts, tiny_manifest):
    b = _bundle(tiny_bundle_parts)
    phi, f = state_checksum(b.Phi), state_checksum(b.F)
    g_before = state_checksum(b.G)
    b, metrics = train_redrl(b, tiny_manifest, epochs=2, base_lr=1e-3, warmup_epochs=1, batch_size=16)
    assert state_checksum(b.Phi) == phi and state_checksum(b.F) == f
    assert state_checksum(b.G) != g_before
    assert len(metrics) == 2 and set(metrics[0]) >= {"AC", "R", "F", "IC", "total", "lr"}


def test_zero_epochs_leaves_bundle(tiny_bundle_parts, tiny_manifest):
    b = _bundle(tiny_bundle_parts)
    before = (state_checksum(b.G), state_checksum(b.Psi))
    b, metrics = train_redrl(b, tiny_manifest, epochs=0)
    assert metrics == [] and (state_checksum(b.G), state_checksum(b.Psi)) == before


def test_total_loss_falls_by_epoch_ten(tiny_bundle_parts, tiny_manifest):
    falling = 0
    for seed in range(5):
        _, metrics = train_redrl(_bundle(tiny_bundle_parts, seed=seed), tiny_manifest, epochs=11,
                                 base_lr=1e-3, warmup_epochs=3, seed=seed, batch_size=32)
        falling += metrics[10]["total"] < metrics[0]["total"]
    assert falling >= 4


def test_missing_kind_rejected(tiny_bundle_parts, tiny_manifest, monkeypatch):
    import advsig.redrl as redrl
    real = redrl.load_arrays

    def drop_patch(*a, **k):
        d = real(*a, **k)
        keep = d["kind"] != 5
        return {n: t[keep] for n, t in d.items()}

    monkeypatch.setattr(redrl, "load_arrays", drop_patch)
    with pytest.raises(ConfigurationError):
        train_redrl(_bundle(tiny_bundle_parts), tiny_manifest, epochs=1)


def test_infer_properties(tiny_bundle_parts):
    b = _bundle(tiny_bundle_parts)
    x = torch.rand(4, 3, 8, 8)
    g_out, residual, probs = infer(b, x)
    assert torch.equal(residual, x - g_out)
    assert (g_out + residual - x).abs().max() <= 1e-6
    assert (probs >= 0).all() and torch.allclose(probs.sum(1), torch.ones(4), atol=1e-6)
    again = infer(b, x)
    assert all(torch.equal(a, c) for a, c in zip((g_out, residual, probs), again))


def test_bundle_rejects_wrong_psi_width(tiny_bundle_parts):
    from dataclasses import replace
    from advsig.redrl import make_recognizer
    b = _bundle(tiny_bundle_parts)
    with pytest.raises(ConfigurationError):
        replace(b, Psi=make_recognizer(3, 4))
    with pytest.raises(ConfigurationError):
        replace(b, label_smoothing=1.0)


def test_bundle_checkpoint_round_trip(tiny_bundle_parts, tmp_path):
    b = _bundle(tiny_bundle_parts, seed=3)
    save_bundle(b, tmp_path / "b.ckpt")
    victim, fnet = tiny_bundle_parts
    r = load_bundle(tmp_path / "b.ckpt", victim, fnet)
    x = torch.rand(2, 3, 8, 8)
    assert all(torch.equal(a, c) for a, c in zip(infer(b, x), infer(r, x)))
    other = build_victim(VictimSpec("desk_cnn", input_shape=(3, 8, 8), width=4, seed=99))
    with pytest.raises(ValueError):
        load_bundle(tmp_path / "b.ckpt", other, fnet)
