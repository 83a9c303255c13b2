import copy

import numpy as np
import pytest

from msnet.checkpoint import save_checkpoint
from msnet.data import default_profiles, make_corpus
from msnet.engine import ContractError, ShapeError, Tensor, backward, no_grad
from msnet.losses import dice_loss
from msnet.model import (
    ArchConfig,
    ConfigError,
    _verify_skip_channels,
    build_model,
    encode,
    forward_aux,
    forward_universal,
    layer_table,
    strip_aux,
)
from msnet.normalization import SiteRoutingError
from msnet.train import TrainConfig, train_msnet

SMALL = ArchConfig(input_size=16, base_channels=2, depth=2, bottleneck_blocks=1, num_sites=3)


def images(n=2, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 1, size, size)))


def flat(group):
    return {k: t.data.copy() for k, t in group.tensors.items()}


def test_full_scale_shape_table():
    table = layer_table(ArchConfig(input_size=384, base_channels=32, depth=4, bottleneck_blocks=2, num_classes=2))
    expected = [
        ("convolution 1", 384, 32), ("residual block 1", 384, 32), ("pooling 1", 192, 32),
        ("residual block 2", 192, 64), ("pooling 2", 96, 64), ("residual block 3", 96, 128),
        ("pooling 3", 48, 128), ("residual block 4", 48, 256), ("pooling 4", 24, 256),
        ("residual block 5_1", 24, 512), ("residual block 5_2", 24, 512),
        ("upsample 6", 48, 256), ("residual block 6", 48, 256), ("upsample 7", 96, 128),
        ("residual block 7", 96, 128), ("upsample 8", 192, 64), ("residual block 8", 192, 64),
        ("upsample 9", 384, 32), ("residual block 9", 384, 32), ("output 10", 384, 2),
    ]
    assert table == expected


def test_full_scale_builds_with_matching_kernels():
    cfg = ArchConfig(input_size=384, base_channels=32, num_sites=1)
    p = build_model(cfg, 0, with_aux=False)
    assert p.encoder.tensors["res5_2.conv2.w"].shape == (512, 512, 3, 3)
    assert p.decoder.tensors["up6.deconv.w"].shape == (512, 256, 3, 3)
    assert p.decoder.tensors["out.conv.w"].shape == (2, 32, 1, 1)


def test_traced_shapes_follow_table():
    cfg = ArchConfig(input_size=32, base_channels=2, depth=3, bottleneck_blocks=2, num_sites=2)
    p = build_model(cfg, 1)
    with no_grad():
        skips, bottom = encode(p, images(2, 32), 1, "train")
        probs, _ = forward_universal(p, images(2, 32), 1, "train")
    rows = dict((name, (size, c)) for name, size, c in layer_table(cfg))
    for i, s in enumerate(skips, start=1):
        assert s.shape[1:] == (rows[f"residual block {i}"][1],) + (rows[f"residual block {i}"][0],) * 2
    assert bottom.shape[1:] == (rows["residual block 4_2"][1], 4, 4)
    assert probs.shape == (2, 2, 32, 32)


def test_build_is_deterministic():
    a, b = build_model(SMALL, 7), build_model(SMALL, 7)
    for ga, gb in [(a.encoder, b.encoder), (a.decoder, b.decoder)] + list(zip(a.aux, b.aux)):
        fa, fb = flat(ga), flat(gb)
        assert all(np.array_equal(fa[k], fb[k]) for k in fa)
    c = build_model(SMALL, 8)
    assert not np.array_equal(a.encoder.tensors["conv1.w"].data, c.encoder.tensors["conv1.w"].data)


def test_init_statistics():
    p = build_model(ArchConfig(base_channels=16, num_sites=1), 3, with_aux=False)
    w = p.encoder.tensors["res4.conv1.w"].data
    fan_in = w.shape[1] * 9
    assert abs(w.std() - np.sqrt(2.0 / fan_in)) < 0.05 * np.sqrt(2.0 / fan_in)
    assert np.all(p.encoder.tensors["res4.conv1.b"].data == 0)


def analytic_count(base, depth, blocks, classes, sites):
    """Parameter count derived from the layer list by hand."""
    ch = [base * 2 ** i for i in range(depth + 1)]
    conv = lambda ci, co, k: ci * co * k * k + co
    norm = lambda c: 2 * c * sites

    def res(ci, co):
        return (conv(ci, co, 1) if ci != co else 0) + 2 * (norm(co) + conv(co, co, 3))

    n = conv(1, ch[0], 3)
    for i in range(depth):
        n += res(ch[max(i - 1, 0)], ch[i])
    for j in range(blocks):
        n += res(ch[depth - 1] if j == 0 else ch[depth], ch[depth])
    for i in range(depth - 1, -1, -1):
        n += norm(ch[i + 1]) + conv(ch[i + 1], ch[i], 3) + res(ch[i], ch[i])
    return n + norm(ch[0]) + conv(ch[0], classes, 1)


def test_desk_parameter_count():
    cfg = ArchConfig(input_size=64, base_channels=8, num_sites=3)
    p = build_model(cfg, 0)
    assert p.parameter_count() == analytic_count(8, 4, 2, 2, 3)
    assert p.parameter_count() < 1_000_000


def test_universal_output_is_distribution():
    p = build_model(SMALL, 0)
    with no_grad():
        probs, feats = forward_universal(p, images(), 2, "train")
    assert probs.shape == (2, 2, 16, 16)
    assert np.max(np.abs(probs.data.sum(axis=1) - 1)) < 1e-12
    assert len(feats[0]) == SMALL.depth


def test_eval_mode_is_repeatable():
    p = build_model(SMALL, 0)
    forward_universal(p, images(seed=1), 1, "train")
    a = forward_universal(p, images(), 1, "eval")[0].data
    b = forward_universal(p, images(), 1, "eval")[0].data
    assert np.array_equal(a, b)


def test_identical_site_states_make_output_site_independent():
    p = build_model(SMALL, 0, with_aux=False)
    for _ in range(3):
        forward_universal(p, images(seed=5), 1, "train")
    for g in (p.encoder, p.decoder):
        for state in g.norms.values():
            for s in (2, 3):
                state.per_site[s] = state.per_site[1].copy()
    outs = [forward_universal(p, images(), s, "eval")[0].data for s in (1, 2, 3)]
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_aux_gradients_reach_encoder_and_own_branch_only():
    p = build_model(SMALL, 0)
    feats = encode(p, images(), 2, "train")
    probs = forward_aux(p, feats, 2, "train")
    assert probs.shape == (2, 2, 16, 16)
    target = np.zeros(probs.shape)
    target[:, 0] = 1
    everything = p.encoder.parameters() + p.decoder.parameters() + [t for g in p.aux for t in g.parameters()]
    backward(dice_loss(probs, target), wrt=everything)
    assert any(np.any(t.grad != 0) for t in p.encoder.parameters())
    assert any(np.any(t.grad != 0) for t in p.aux[1].parameters())
    assert all(np.all(t.grad == 0) for t in p.decoder.parameters())
    assert all(np.all(t.grad == 0) for s in (0, 2) for t in p.aux[s].parameters())


def test_branches_diverge_after_training():
    cfg = ArchConfig(input_size=32, base_channels=2, depth=2, bottleneck_blocks=1, num_sites=2)
    corpus = make_corpus(default_profiles()[1:3], n_train=10, n_test=1, seed=3, size=32)
    corpus.train[0] = [type(s)(s.image, s.mask, 1) for s in corpus.train[0]]
    corpus.train[1] = [type(s)(s.image, s.mask, 2) for s in corpus.train[1]]
    model, _ = train_msnet(build_model(cfg, 0), corpus.train, TrainConfig(iterations=50, seed=0))
    with no_grad():
        feats = encode(model, images(2, 32), 1, "eval")
        a = forward_aux(model, feats, 1, "eval").data
        b = forward_aux(model, feats, 2, "eval").data
    assert np.max(np.abs(a - b)) > 1e-3


def test_universal_inference_ignores_aux():
    p = build_model(SMALL, 0)
    before = forward_universal(p, images(), 1, "eval")[0].data
    for g in p.aux:
        for t in g.tensors.values():
            t.data = t.data + 1.0
    assert np.array_equal(before, forward_universal(p, images(), 1, "eval")[0].data)


def test_strip_aux(tmp_path):
    p = build_model(SMALL, 0)
    forward_universal(p, images(seed=3), 3, "train")
    stripped = strip_aux(p)
    for s in (1, 2, 3):
        assert np.array_equal(forward_universal(p, images(), s, "eval")[0].data,
                              forward_universal(stripped, images(), s, "eval")[0].data)
    full = save_checkpoint(p, tmp_path / "full.ckpt").stat().st_size
    small = save_checkpoint(stripped, tmp_path / "small.ckpt").stat().st_size
    assert small < full
    with pytest.raises(ContractError):
        forward_aux(stripped, encode(stripped, images(), 1, "eval"), 1, "eval")


def test_config_and_input_errors():
    with pytest.raises(ConfigError):
        ArchConfig(input_size=60, depth=4)
    with pytest.raises(ConfigError):
        ArchConfig(base_channels=0)
    p = build_model(SMALL, 0)
    with pytest.raises(SiteRoutingError):
        forward_universal(p, images(), 4, "eval")
    with pytest.raises(ShapeError):
        forward_universal(p, images(size=32), 1, "eval")


def test_skip_channel_check_catches_mismatch():
    p = build_model(SMALL, 0)
    bad = copy.deepcopy(p)
    w = bad.decoder.tensors["up4.deconv.w"]
    w.data = np.zeros((w.shape[0], w.shape[1] + 1, 3, 3))
    with pytest.raises(ConfigError):
        _verify_skip_channels(bad)
