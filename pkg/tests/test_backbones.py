import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from i2i_extract import autodiff as ad
from i2i_extract.autodiff import Tensor
from i2i_extract.backbones import (BackboneSpec, ModelBundle, attack_total_loss, build_bundle,
                                   cyclegan_loss, gan_adversarial_terms, load_bundle,
                                   pix2pix_loss, save_bundle)
from i2i_extract.errors import ConfigurationError, DimensionError, FormatError
from i2i_extract.wavelet import WaveletConfig, wavelet_reg_loss

SMALL = dict(base_channels=4, depth=2, image_size=16)


def log_sigmoid(v):
    return -np.logaddexp(0.0, -v)


def images(rng, n=3, c=1, s=16):
    return rng.uniform(-1, 1, size=(n, c, s, s))


def component_sum_ok(lb):
    for prefix, total in (("G/", lb.total_generator_loss), ("D/", lb.total_discriminator_loss)):
        if total is None:
            continue
        parts = sum(v.item() for k, v in lb.components.items() if k.startswith(prefix))
        assert abs(total.item() - parts) < 1e-10


# construction -----------------------------------------------------------------

def test_group_counts_and_names():
    p = build_bundle(BackboneSpec("pix2pix", **SMALL), 0)
    assert [g.name for g in p.generators] == ["G1"] and len(p.discriminators) == 1
    c = build_bundle(BackboneSpec("cyclegan", **SMALL), 0)
    assert [g.name for g in c.groups()] == ["G1", "G2", "D_X", "D_Y"]


def test_same_seed_bit_identical():
    a = build_bundle(BackboneSpec("cyclegan", **SMALL), 7).state()
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 7).state()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_bundle(BackboneSpec("cyclegan", **SMALL), 8).state()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_statistics():
    state = build_bundle(BackboneSpec("pix2pix"), 0).state()
    w = np.concatenate([v.ravel() for k, v in state.items() if k.endswith("weight")])
    assert abs(w.std() - 0.02) < 0.002
    assert all(np.all(v == 0) for k, v in state.items() if k.endswith("bias"))


@pytest.mark.parametrize("kw", [dict(kind="unet"), dict(image_size=20, depth=3),
                                dict(base_channels=0), dict(depth=0)])
def test_invalid_spec(kw):
    with pytest.raises(ConfigurationError):
        BackboneSpec(**kw)


def test_generator_shape_and_range(rng):
    b = build_bundle(BackboneSpec("pix2pix", image_channels=3, **SMALL), 1)
    out = b.generate(rng.uniform(-1, 1, size=(2, 3, 16, 16))).data
    assert out.shape == (2, 3, 16, 16)
    assert np.all(np.abs(out) < 1)


def test_generator_rejects_wrong_image_size(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 1)
    with pytest.raises(DimensionError):
        b.generate(np.zeros((1, 1, 8, 8)))


def test_discriminator_per_sample_logits(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 1)
    assert b.discriminate(rng.normal(size=(5, 2, 16, 16))).shape == (5,)


# adversarial terms -----------------------------------------------------------

def test_adversarial_at_equilibrium():
    t = gan_adversarial_terms(np.zeros(4), np.zeros(4))
    assert t["d_loss"].item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert t["g_loss"].item() == pytest.approx(math.log(2), abs=1e-12)


def test_adversarial_perfect_discriminator():
    t = gan_adversarial_terms(np.full(3, 60.0), np.full(3, -60.0))
    assert t["d_loss"].item() < 1e-20


def test_adversarial_matches_direct_formula(rng):
    r, f = rng.normal(size=10) * 3, rng.normal(size=10) * 3
    t = gan_adversarial_terms(r, f)
    direct = -np.mean(log_sigmoid(r)) - np.mean(log_sigmoid(-f))
    assert t["d_loss"].item() == pytest.approx(direct, abs=1e-10)
    assert t["g_loss"].item() == pytest.approx(-np.mean(log_sigmoid(f)), abs=1e-10)


def test_adversarial_shape_mismatch():
    with pytest.raises(DimensionError):
        gan_adversarial_terms(np.zeros(3), np.zeros(4))


# pix2pix -------------------------------------------------------------------------

def test_pix2pix_lambda_zero_is_pure_adversarial(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    x, y = images(rng), images(rng)
    lb = pix2pix_loss(b, x, y, lambda_l1=0.0)
    assert lb.total_generator_loss.item() == lb.components["G/adv"].item()


def test_pix2pix_perfect_output_has_zero_l1(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    x = images(rng)
    y = b.generate(x).data
    assert pix2pix_loss(b, x, y).components["G/l1"].item() == 0.0


def test_pix2pix_components_sum_and_recompute(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    x, y = images(rng), images(rng)
    lb = pix2pix_loss(b, x, y, lambda_l1=100.0)
    component_sum_ok(lb)
    fake = b.generate(x).data
    assert lb.components["G/l1"].item() == pytest.approx(100 * np.mean(np.abs(fake - y)),
                                                         abs=1e-10)
    real_logit = b.discriminate(np.concatenate([x, y], 1)).data
    fake_logit = b.discriminate(np.concatenate([x, fake], 1)).data
    d_direct = -np.mean(log_sigmoid(real_logit)) - np.mean(log_sigmoid(-fake_logit))
    assert lb.total_discriminator_loss.item() == pytest.approx(d_direct, abs=1e-10)


def test_pix2pix_unpaired_shapes(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    with pytest.raises(DimensionError):
        pix2pix_loss(b, images(rng, 3), images(rng, 2))


def test_pix2pix_parts(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    x, y = images(rng), images(rng)
    full = pix2pix_loss(b, x, y)
    g = pix2pix_loss(b, x, y, part="generator")
    d = pix2pix_loss(b, x, y, part="discriminator")
    assert g.total_discriminator_loss is None and d.total_generator_loss is None
    assert g.total_generator_loss.item() == full.total_generator_loss.item()
    assert d.total_discriminator_loss.item() == full.total_discriminator_loss.item()
    with pytest.raises(ConfigurationError):
        pix2pix_loss(b, x, y, part="both")


def test_discriminator_loss_does_not_reach_generator(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 2)
    lb = pix2pix_loss(b, images(rng), images(rng), part="discriminator")
    grads = ad.backward(lb.total_discriminator_loss, b.generators)["G1"]
    assert all(np.all(g == 0) for g in grads)


# cyclegan ----------------------------------------------------------------------

def test_cyclegan_identity_generators_have_zero_cycle(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 3)
    b.generate = lambda x, which=0: ad.as_tensor(x)
    x = images(rng)
    lb = cyclegan_loss(b, x, x.copy())
    assert lb.components["G/cycle"].item() == 0.0


def test_cyclegan_lambda_zero(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 3)
    lb = cyclegan_loss(b, images(rng), images(rng), lambda_cyc=0.0)
    adv = lb.components["G/adv_G1"].item() + lb.components["G/adv_G2"].item()
    assert lb.total_generator_loss.item() == pytest.approx(adv, abs=1e-15)


def test_cyclegan_cycle_recomputed_from_raw_passes(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 3)
    x, y = images(rng), images(rng)
    lb = cyclegan_loss(b, x, y, lambda_cyc=10.0)
    g1 = lambda v: b.generate(v, 0).data  # noqa: E731
    g2 = lambda v: b.generate(v, 1).data  # noqa: E731
    cyc = np.mean(np.abs(g2(g1(x)) - x)) + np.mean(np.abs(g1(g2(y)) - y))
    assert lb.raw["cycle"] == pytest.approx(cyc, abs=1e-10)
    assert lb.components["G/cycle"].item() == pytest.approx(10 * cyc, abs=1e-10)
    component_sum_ok(lb)


def test_cyclegan_swap_symmetry(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 3)
    g1, g2 = b.generators
    dx, dy = b.discriminators
    swapped = ModelBundle(b.spec, [g2, g1], [dy, dx])
    x, y = images(rng), images(rng)
    a = cyclegan_loss(b, x, y)
    s = cyclegan_loss(swapped, y, x)
    assert abs(a.total_generator_loss.item() - s.total_generator_loss.item()) < 1e-12
    for name in ("D_X", "D_Y"):
        assert abs(a.per_group[name].item() - s.per_group[name].item()) < 1e-12
    assert a.components["G/adv_G1"].item() == pytest.approx(s.components["G/adv_G2"].item(),
                                                            abs=1e-12)


def test_cyclegan_shape_mismatch(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 3)
    with pytest.raises(DimensionError):
        cyclegan_loss(b, images(rng), images(rng, c=2))


# attack objective ------------------------------------------------------------------

def test_attack_total_alpha_zero_identical(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 4)
    lb = pix2pix_loss(b, images(rng), images(rng))
    t = attack_total_loss(lb, Tensor(2.0), 0.0)
    assert t.total_generator_loss.item() == lb.total_generator_loss.item()
    assert t.total_discriminator_loss is lb.total_discriminator_loss


def test_attack_total_adds_alpha_times_term(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 4)
    lb = pix2pix_loss(b, images(rng), images(rng))
    t = attack_total_loss(lb, Tensor(2.0), 0.15)
    assert t.total_generator_loss.item() - lb.total_generator_loss.item() == pytest.approx(
        0.3, abs=1e-12)
    component_sum_ok(t)


def test_attack_total_negative_alpha(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 4)
    with pytest.raises(ConfigurationError):
        attack_total_loss(pix2pix_loss(b, images(rng), images(rng)), Tensor(1.0), -0.1)


def test_attack_total_gradient_is_linear(rng):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 4)
    x, y = images(rng), images(rng)
    cfg = WaveletConfig(2)
    alpha = 0.15

    def parts():
        lb = pix2pix_loss(b, x, y, part="generator")
        return lb, wavelet_reg_loss(lb.outputs["fake"], y, cfg)

    lb, lw = parts()
    total = ad.backward(attack_total_loss(lb, lw, alpha).total_generator_loss, b.generators)
    lb, _ = parts()
    g_o = ad.backward(lb.total_generator_loss, b.generators)
    _, lw = parts()
    g_w = ad.backward(lw, b.generators)
    for t, o, w in zip(total["G1"], g_o["G1"], g_w["G1"]):
        np.testing.assert_allclose(t, o + alpha * w, rtol=0, atol=1e-8)


def test_cyclegan_attack_total_updates_both_generators(rng):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 4)
    lb = cyclegan_loss(b, images(rng), images(rng))
    t = attack_total_loss(lb, Tensor(1.0), 0.5)
    assert t.per_group["G1"] is t.total_generator_loss is t.per_group["G2"]
    assert t.per_group["D_X"] is lb.per_group["D_X"]


# persistence ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    b = build_bundle(BackboneSpec("cyclegan", **SMALL), 5)
    save_bundle(b, tmp_path / "ck")
    back = load_bundle(tmp_path / "ck")
    assert back.spec == b.spec
    s0, s1 = b.state(), back.state()
    assert all(np.array_equal(s0[k], s1[k]) for k in s0)


def test_checkpoint_count_mismatch(tmp_path):
    b = build_bundle(BackboneSpec("pix2pix", **SMALL), 5)
    save_bundle(b, tmp_path / "ck")
    m = (tmp_path / "ck" / "manifest.txt").read_text().replace("count=", "count=9")
    (tmp_path / "ck" / "manifest.txt").write_text(m)
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "ck")


def test_checkpoint_missing():
    with pytest.raises(FileNotFoundError):
        load_bundle("/nonexistent/checkpoint")


# properties -------------------------------------------------------------------

@given(st.integers(0, 2 ** 31), st.floats(1, 1e6))
def test_generator_output_bounded(seed, scale):
    r = np.random.default_rng(seed)
    b = build_bundle(BackboneSpec("pix2pix", base_channels=2, depth=1, image_size=8), seed % 97)
    out = b.generate(r.normal(size=(2, 1, 8, 8)) * scale).data
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) <= 1)


@given(st.integers(0, 2 ** 31), st.floats(-29, 29))
def test_losses_finite_for_moderate_logits(seed, v):
    r = np.random.default_rng(seed)
    t = gan_adversarial_terms(r.uniform(-abs(v), abs(v) + 1e-9, 4), np.full(4, v))
    assert math.isfinite(t["d_loss"].item()) and math.isfinite(t["g_loss"].item())


@given(st.integers(0, 2 ** 31), st.sampled_from(["pix2pix", "cyclegan"]))
def test_component_sum_identity(seed, kind):
    r = np.random.default_rng(seed)
    b = build_bundle(BackboneSpec(kind, base_channels=2, depth=1, image_size=8), seed % 97)
    x, y = r.uniform(-1, 1, (2, 1, 8, 8)), r.uniform(-1, 1, (2, 1, 8, 8))
    lb = pix2pix_loss(b, x, y) if kind == "pix2pix" else cyclegan_loss(b, x, y)
    component_sum_ok(attack_total_loss(lb, wavelet_reg_loss(lb.outputs["fake"], y,
                                                            WaveletConfig(1)), 0.2))
