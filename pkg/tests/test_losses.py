import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msnet.engine import ContractError, ShapeError, Tensor, backward, fd_check, parameter, softmax_channel
from msnet.losses import (
    LossWeights,
    aux_objective,
    dice_loss,
    kt_loss,
    l2_penalty,
    labels_to_onehot,
    onehot_argmax,
    uni_objective,
)
from msnet.model import ArchConfig, ParamGroup, build_model, forward_aux, forward_universal


def onehot(labels, c=2):
    return labels_to_onehot(np.asarray(labels), c)


def pixel(p0, p1):
    return np.array([p0, p1], dtype=np.float64).reshape(1, 2, 1, 1)


def const(v):
    return Tensor(np.array(float(v)))


def test_dice_perfect_prediction_is_zero():
    t = onehot(np.random.default_rng(0).integers(0, 2, size=(2, 4, 4)))
    assert dice_loss(Tensor(t), t).item() == 0.0


def test_dice_single_pixel_half():
    assert dice_loss(Tensor(pixel(0.5, 0.5)), pixel(1, 0)).item() == pytest.approx(1 / 3, abs=1e-12)


def test_kt_uniform_probs_give_one_third():
    t = onehot(np.random.default_rng(1).integers(0, 2, size=(3, 5, 5)))
    assert kt_loss(Tensor(np.full(t.shape, 0.5)), t).item() == pytest.approx(1 / 3, abs=1e-12)
    assert kt_loss(Tensor(t), t).item() == 0.0


def test_dice_gradient_fd():
    rng = np.random.default_rng(2)
    t = onehot(rng.integers(0, 2, size=(2, 4, 4)))
    assert fd_check(lambda z: dice_loss(softmax_channel(z), t), rng.normal(size=(2, 2, 4, 4))) < 1e-3
    assert fd_check(lambda z: kt_loss(softmax_channel(z), t), rng.normal(size=(2, 2, 4, 4))) < 1e-3


def test_dice_errors():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 3)))
    with pytest.raises(ContractError):
        dice_loss(Tensor(np.zeros((0, 2, 2, 2))), np.zeros((0, 2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 4), scale=st.floats(0.1, 20.0))
def test_dice_bounded(seed, c, scale):
    rng = np.random.default_rng(seed)
    probs = softmax_channel(Tensor(rng.normal(size=(2, c, 3, 3)) * scale))
    t = onehot(rng.integers(0, c, size=(2, 3, 3)), c)
    v = dice_loss(probs, t).item()
    assert 0.0 <= v <= 1.0
    assert kt_loss(probs, onehot_argmax(probs)).item() <= v + 1.0


def test_dice_zero_only_at_target():
    t = onehot([[[0, 1], [1, 0]]])
    p = t.copy()
    p[0, :, 0, 0] = [0.99, 0.01]
    assert dice_loss(Tensor(p), t).item() > 0


def test_onehot_argmax():
    assert np.array_equal(onehot_argmax(pixel(0.7, 0.3)), pixel(1, 0))
    assert np.array_equal(onehot_argmax(pixel(0.5, 0.5)), pixel(1, 0))
    t = onehot(np.random.default_rng(3).integers(0, 3, size=(2, 4, 4)), 3)
    assert np.array_equal(onehot_argmax(t), t)
    assert np.all(t.sum(axis=1) == 1)


def test_l2_penalty():
    assert l2_penalty([ParamGroup({"a.w": parameter(np.zeros((2, 2)))})]).item() == 0.0
    g = ParamGroup({"a.w": parameter(np.array([3.0, 4.0])), "a.b": parameter(np.array([10.0]))})
    assert l2_penalty([g]).item() == 25.0
    w = np.random.default_rng(4).normal(size=(3, 2))
    assert fd_check(lambda t: l2_penalty([ParamGroup({"k.w": t})]), w) < 1e-8
    t = parameter(w)
    backward(l2_penalty([ParamGroup({"k.w": t})]), wrt=[t])
    assert np.array_equal(t.grad, 2 * w)


def test_l2_excludes_bias_and_norm_affines():
    p = build_model(ArchConfig(input_size=16, base_channels=2, depth=2, bottleneck_blocks=1), 0)
    expected = sum(float((t.data ** 2).sum()) for n, t in p.encoder.tensors.items() if n.endswith(".w"))
    for state in p.encoder.norms.values():
        for bn in state.per_site.values():
            bn.gamma.data = bn.gamma.data * 5
    assert l2_penalty([p.encoder]).item() == pytest.approx(expected, rel=1e-12)


def test_aux_objective():
    w = LossWeights(alpha=0.5, eta=0.0)
    assert aux_objective([const(0.2), const(0.3), const(0.1)], [], w, 3).item() == pytest.approx(0.6)
    g = ParamGroup({"k.w": parameter(np.full(4, 5.0))})  # sum of squares 100
    assert aux_objective([const(0.2)], [g], LossWeights(eta=1e-4), 1).item() == pytest.approx(0.21)
    with pytest.raises(ContractError):
        aux_objective([const(0.2), const(0.3)], [], w, 3)


def test_uni_objective():
    pair = [(const(0.4), const(0.2))]
    assert uni_objective(pair, [], LossWeights(0.5, 0.0)).item() == pytest.approx(0.3)
    g = ParamGroup({"k.w": parameter(np.full(4, 5.0))})
    pairs = [(const(0.4), const(0.2)), (const(0.1), const(0.7))]
    assert uni_objective(pairs, [g], LossWeights(0.0, 1e-4)).item() == pytest.approx(0.9 + 0.01)
    assert uni_objective(pairs, [g], LossWeights(1.0, 1e-4)).item() == pytest.approx(0.5 + 0.01)
    with pytest.raises(ContractError):
        LossWeights(alpha=1.5)
    with pytest.raises(ContractError):
        uni_objective([(None, const(0.2))], [], LossWeights(0.5, 0.0))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.0, 1.0), kt=st.floats(0.0, 1.0), sup=st.floats(0.0, 1.0))
def test_uni_objective_is_affine(alpha, kt, sup):
    v = uni_objective([(const(kt), const(sup))], [], LossWeights(alpha, 0.0)).item()
    assert v == pytest.approx(alpha * kt + (1 - alpha) * sup, abs=1e-12)


def test_kt_target_is_detached():
    """Perturbing auxiliary parameters must not change the decoder gradient of the kt term."""
    cfg = ArchConfig(input_size=16, base_channels=2, depth=2, bottleneck_blocks=1, num_sites=1)
    x = Tensor(np.random.default_rng(5).normal(size=(2, 1, 16, 16)))

    def decoder_grads(model):
        probs, feats = forward_universal(model, x, 1, "batch")
        aux_probs = forward_aux(model, feats, 1, "batch")
        loss = kt_loss(probs, onehot_argmax(aux_probs))
        params = model.decoder.parameters() + model.aux[0].parameters()
        backward(loss, wrt=params)
        return [t.grad.copy() for t in model.decoder.parameters()], [t.grad for t in model.aux[0].parameters()]

    m = build_model(cfg, 0)
    g1, aux_g = decoder_grads(m)
    assert all(np.all(g == 0) for g in aux_g)
    # scaling the output kernel keeps the argmax, so the target is unchanged
    m.aux[0].tensors["out.conv.w"].data = m.aux[0].tensors["out.conv.w"].data * 3.0
    g2, _ = decoder_grads(m)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))
