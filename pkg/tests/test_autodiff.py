import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import conv2d_reference
from i2i_extract import autodiff as ad
from i2i_extract.autodiff import ParamGroup, Tensor
from i2i_extract.backbones import BackboneSpec, build_bundle
from i2i_extract.errors import ConfigurationError, ContractError, DimensionError


def group_of(**arrays):
    g = ParamGroup("W")
    for k, v in arrays.items():
        g.add(k, np.asarray(v, dtype=np.float64))
    return g


# conv2d ---------------------------------------------------------------------

def test_conv2d_scalar_kernel_scales():
    out = ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.full((1, 1, 1, 1), 3.0)),
                    Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


def test_conv2d_ones_kernel_sums_entries():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


@pytest.mark.parametrize("F,C,stride,pad", [(3, 2, 1, 0), (1, 4, 1, 1), (3, 2, 2, 1),
                                            (5, 3, 1, 2), (2, 6, 2, 0)])
def test_conv2d_matches_nested_loop_reference(rng, F, C, stride, pad):
    x = rng.normal(size=(2, C, 6, 6))
    k = rng.normal(size=(F, C, 3, 3))
    b = rng.normal(size=F)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, conv2d_reference(x, k, b, stride, pad), atol=1e-6)


def test_conv2d_output_size_formula(rng):
    x = Tensor(rng.normal(size=(1, 1, 7, 9)))
    out = ad.conv2d(x, Tensor(rng.normal(size=(2, 1, 4, 3))), None, stride=2, pad=1)
    assert out.shape == (1, 2, (7 + 2 - 4) // 2 + 1, (9 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize("F,C,stride,pad", [(3, 2, 1, 1), (1, 4, 1, 1), (2, 3, 2, 1)])
def test_conv2d_gradients_match_finite_differences(rng, F, C, stride, pad):
    x0 = rng.normal(size=(2, C, 5, 5))
    g = group_of(x=x0, k=rng.normal(size=(F, C, 3, 3)), b=rng.normal(size=F))
    w = rng.normal(size=ad.conv2d(Tensor(x0), g["k"], g["b"], stride, pad).shape)

    def closure():
        return (ad.conv2d(g["x"], g["k"], g["b"], stride, pad) * w).sum()

    assert ad.finite_diff_check(g, closure, step=1e-3, n_samples=None) < 1e-6


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(DimensionError) as info:
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    assert info.value.axis == "C"


def test_conv2d_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_bias_length_checked():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))),
                  Tensor(np.zeros(3)))


def test_conv2d_rejects_bad_stride():
    with pytest.raises((ConfigurationError, DimensionError)):
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# activations ------------------------------------------------------------------

def test_activation_reference_points():
    assert ad.activation(Tensor(0.0), "tanh").item() == 0.0
    assert ad.activation(Tensor(0.0), "sigmoid").item() == 0.5
    assert ad.activation(Tensor(-2.0), "leaky_relu", slope=0.2).item() == pytest.approx(-0.4)
    assert ad.activation(Tensor(-2.0), "relu").item() == 0.0


def test_activation_unknown_kind():
    with pytest.raises(ConfigurationError):
        ad.activation(Tensor(1.0), "swish")


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 2.0])
def test_leaky_relu_slope_range(slope):
    with pytest.raises(ConfigurationError):
        ad.leaky_relu(Tensor(1.0), slope)


def test_sigmoid_and_tanh_ranges_at_extremes():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    s = ad.sigmoid(x).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    t = ad.tanh(Tensor(np.array([-5.0, 0.3, 5.0]))).data
    assert np.all(np.abs(t) < 1)


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh", "sigmoid"])
def test_activation_gradients(rng, kind):
    # keep away from the kink at 0 so central differences are valid
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    g = group_of(x=x)
    # step 1e-5 keeps the h^2 truncation term well below the 1e-6 bound
    assert ad.finite_diff_check(g, lambda: (ad.activation(g["x"], kind) ** 2).sum(),
                                step=1e-5, n_samples=None) < 1e-6


# upsample ---------------------------------------------------------------------

def test_upsample_single_pixel():
    out = ad.upsample_nearest(Tensor(np.ones((1, 1, 1, 1))), 2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_upsample_factor_one_is_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(ad.upsample_nearest(Tensor(x), 1).data, x)


def test_upsample_gradient_of_sum_is_factor_squared():
    g = group_of(x=np.arange(6.0).reshape(1, 1, 2, 3))
    grads = ad.backward(ad.upsample_nearest(g["x"], 2).sum(), [g])["W"]
    np.testing.assert_array_equal(grads[0], np.full((1, 1, 2, 3), 4.0))
    assert ad.finite_diff_check(g, lambda: ad.upsample_nearest(g["x"], 2).sum()) < 1e-9


def test_upsample_rejects_factor_zero():
    with pytest.raises(ConfigurationError):
        ad.upsample_nearest(Tensor(np.ones((1, 1, 2, 2))), 0)


# losses -----------------------------------------------------------------------

def test_loss_reference_values():
    x = Tensor(np.array([0.3, -1.2]))
    assert ad.loss("l1", x, x).item() == 0.0
    assert ad.loss("bce_with_logits", Tensor(0.0), np.array(1.0)).item() == pytest.approx(
        math.log(2), abs=1e-12)
    assert ad.loss("mse", Tensor(np.zeros(2)), Tensor(np.array([1.0, 3.0]))).item() == 5.0


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.loss("l1", Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_loss_unknown_kind():
    with pytest.raises(ConfigurationError):
        ad.loss("huber", Tensor(np.zeros(3)), Tensor(np.zeros(3)))


def test_bce_stable_for_large_logits():
    logits = Tensor(np.array([-1000.0, -29.0, 29.0, 1000.0]))
    for t in (0.0, 1.0):
        v = ad.bce_with_logits(logits, np.full(4, t)).item()
        assert math.isfinite(v)
    # -log(sigmoid(1000)) underflows to 0, -log(1-sigmoid(1000)) = 1000
    assert ad.bce_with_logits(Tensor(np.array([1000.0])), np.array([0.0])).item() == 1000.0


def test_loss_gradients(rng):
    g = group_of(a=rng.normal(size=(4, 3)))
    b = rng.normal(size=(4, 3))
    t = (rng.uniform(size=(4, 3)) > 0.5).astype(float)
    assert ad.finite_diff_check(g, lambda: ad.mse_loss(g["a"], Tensor(b)), n_samples=None) < 1e-6
    assert ad.finite_diff_check(g, lambda: ad.bce_with_logits(g["a"], t), n_samples=None) < 1e-6
    assert ad.finite_diff_check(g, lambda: ad.l1_loss(g["a"], Tensor(b)), n_samples=None) < 1e-6


# backward ---------------------------------------------------------------------

def test_backward_sum_gives_ones():
    g = group_of(w=np.arange(5.0))
    np.testing.assert_array_equal(ad.backward(g["w"].sum(), [g])["W"][0], np.ones(5))


def test_backward_single_weight_mse_matches_hand_derivation():
    w, x, y = 0.7, 1.9, -0.4
    g = group_of(w=np.array(w))
    grad = ad.backward(ad.mse_loss(g["w"] * x, Tensor(np.array(y))), [g])["W"][0]
    assert float(grad) == pytest.approx(2 * x * (w * x - y), abs=1e-6)


def test_backward_unreachable_param_gets_zero():
    g = group_of(used=np.ones(3), unused=np.ones((2, 2)))
    grads = ad.backward((g["used"] * 2.0).sum(), [g])["W"]
    np.testing.assert_array_equal(grads[1], np.zeros((2, 2)))


def test_backward_non_scalar_loss_is_contract_error():
    g = group_of(w=np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(g["w"] * 2.0, [g])


def test_backward_shared_subexpression_accumulates():
    g = group_of(w=np.array([2.0]))
    h = g["w"] * g["w"]
    loss = (h + h * 3.0).sum()  # 4 w^2
    assert ad.backward(loss, [g])["W"][0][0] == pytest.approx(16.0)


def test_index_and_concat_gradients(rng):
    g = group_of(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 1, 4)))

    def closure():
        c = ad.concat([g["a"], g["b"]], axis=1)
        return (ad.index(c, (slice(None), slice(1, 4))) ** 2).sum()

    assert ad.finite_diff_check(g, closure, n_samples=None) < 1e-6


def test_elementwise_broadcast_gradients(rng):
    g = group_of(a=rng.uniform(0.5, 2.0, size=(3, 4)), b=rng.uniform(0.5, 2.0, size=(4,)))

    def closure():
        a, b = g["a"], g["b"]
        return (ad.log(a * b) + ad.exp(a / b) - (a - b) ** 2 + ad.absolute(a - 3.0)).mean()

    assert ad.finite_diff_check(g, closure, step=1e-5, n_samples=None) < 1e-6


# finite_diff_check --------------------------------------------------------------

def test_finite_diff_check_quadratic():
    g = group_of(w=np.array(3.0))
    assert ad.finite_diff_check(g, lambda: (g["w"] ** 2).sum(), step=1e-4) < 1e-6


def test_finite_diff_check_constant_loss():
    g = group_of(w=np.array([1.0, 2.0]))
    assert ad.finite_diff_check(g, lambda: Tensor(4.2) + g["w"].sum() * 0.0) == 0.0


def test_finite_diff_check_restores_parameters(rng):
    g = group_of(w=rng.normal(size=(3, 3)))
    before = g["w"].data.copy()
    ad.finite_diff_check(g, lambda: (g["w"] ** 3).sum())
    np.testing.assert_array_equal(g["w"].data, before)


def _toy_batch(rng, spec):
    x = rng.uniform(-1, 1, size=(2, spec.image_channels, spec.image_size, spec.image_size))
    y = rng.uniform(-1, 1, size=x.shape)
    return x, y


def test_toy_discriminator_finite_differences(rng):
    spec = BackboneSpec("pix2pix", base_channels=4, depth=2, image_size=16)
    bundle = build_bundle(spec, 3)
    x, y = _toy_batch(rng, spec)
    xy = Tensor(np.concatenate([x, y], axis=1))
    d = bundle.group("D")
    closure = lambda: ad.bce_with_logits(bundle.discriminate(xy), np.ones(2))  # noqa: E731
    rep = ad.finite_diff_report(d, closure, step=1e-3, n_samples=200, skip_kinks=True)
    assert rep.checked == 200
    assert rep.max_rel_error < 1e-3


def test_toy_generator_finite_differences(rng):
    spec = BackboneSpec("pix2pix", base_channels=4, depth=2, image_size=16)
    bundle = build_bundle(spec, 4)
    x, y = _toy_batch(rng, spec)
    g = bundle.group("G1")
    closure = lambda: ad.mse_loss(bundle.generate(x), Tensor(y))  # noqa: E731
    rep = ad.finite_diff_report(g, closure, step=1e-3, n_samples=200, skip_kinks=True)
    assert rep.checked == 200
    assert rep.max_rel_error < 1e-3


def test_toy_generator_small_step_needs_no_kink_filter(rng):
    # At step 1e-6 probes rarely straddle a kink, so the unfiltered check agrees too.
    spec = BackboneSpec("pix2pix", base_channels=4, depth=2, image_size=16)
    bundle = build_bundle(spec, 4)
    x, y = _toy_batch(rng, spec)
    closure = lambda: ad.mse_loss(bundle.generate(x), Tensor(y))  # noqa: E731
    rep = ad.finite_diff_report(bundle.group("G1"), closure, step=1e-6, n_samples=100,
                                skip_kinks=True)
    assert rep.skipped_kinks <= 5
    assert rep.max_rel_error < 1e-3


def test_kink_filter_detects_relu_crossing():
    g = group_of(w=np.array([1e-4, 2.0]))
    closure = lambda: ad.relu(g["w"]).sum()  # noqa: E731
    rep = ad.finite_diff_report(g, closure, step=1e-3, n_samples=None, skip_kinks=True)
    assert rep.skipped_kinks == 1 and rep.checked == 1
    assert rep.max_rel_error < 1e-9
    assert rep.raw_max_rel_error > 0.1


def test_kink_patterns_only_record_inside_context():
    with ad.kink_patterns() as log:
        ad.leaky_relu(Tensor(np.array([-1.0, 1.0])))
        ad.absolute(Tensor(np.array([0.5])))
        ad.tanh(Tensor(np.array([0.5])))
    assert len(log) == 2
    ad.relu(Tensor(np.array([1.0])))
    assert len(log) == 2


# properties -------------------------------------------------------------------

@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear_in_the_loss(seed, a, b):
    r = np.random.default_rng(seed)
    g = group_of(w=r.normal(size=(2, 3)))
    t = r.normal(size=(2, 3))

    def l1():
        return ad.mse_loss(ad.tanh(g["w"]), Tensor(t))

    def l2():
        return (ad.sigmoid(g["w"]) * t).sum()

    combo = ad.backward(l1() * a + l2() * b, [g])["W"][0]
    sep = a * ad.backward(l1(), [g])["W"][0] + b * ad.backward(l2(), [g])["W"][0]
    np.testing.assert_allclose(combo, sep, rtol=0, atol=1e-10)


@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.integers(0, 1),
       st.integers(1, 3), st.integers(1, 3))
def test_conv2d_property_gradients(seed, stride, pad, F, C):
    r = np.random.default_rng(seed)
    g = group_of(x=r.normal(size=(1, C, 5, 4)), k=r.normal(size=(F, C, 2, 3)),
                 b=r.normal(size=F))

    def closure():
        out = ad.conv2d(g["x"], g["k"], g["b"], stride, pad)
        return ad.mse_loss(out, Tensor(np.full(out.shape, 0.5)))

    assert ad.finite_diff_check(g, closure, step=1e-3, n_samples=None) < 1e-3


@given(st.integers(0, 2 ** 31))
def test_forward_and_gradients_are_deterministic(seed):
    spec = BackboneSpec("pix2pix", base_channels=2, depth=1, image_size=8)
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(2, 1, 8, 8))
    outs = []
    for _ in range(2):
        bundle = build_bundle(spec, seed % 1000)
        loss = ad.l1_loss(bundle.generate(x), Tensor(x))
        outs.append((loss.item(), ad.backward(loss, bundle.generators)["G1"]))
    assert outs[0][0] == outs[1][0]
    for a, b in zip(outs[0][1], outs[1][1]):
        assert np.array_equal(a, b)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_ops_stay_finite_on_finite_inputs(values):
    x = Tensor(np.array(values))
    for out in (ad.tanh(x), ad.sigmoid(x), ad.leaky_relu(x), ad.relu(x),
                ad.bce_with_logits(x, np.ones(len(values))), ad.absolute(x)):
        assert np.all(np.isfinite(out.data))
