import numpy as np
import pytest

from msnet.data import (
    Sample,
    SiteProfile,
    apply_augmentation,
    augment,
    default_profiles,
    generate_site,
    load_corpus,
    make_corpus,
    make_iteration_batches,
    save_corpus,
    shift_limit,
    substream,
    whiten,
)


def test_generation_is_deterministic():
    p = default_profiles()[1]
    a, b = generate_site(p, 5, 11), generate_site(p, 5, 11)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    c = generate_site(p, 5, 12)
    assert not np.array_equal(a[0].image, c[0].image)
    # a sample depends on its index only, not on how many were generated
    assert np.array_equal(generate_site(p, 2, 11)[1].image, a[1].image)


def test_foreground_fraction_range():
    for p in default_profiles():
        fracs = [s.mask.mean() for s in generate_site(p, 334, 5)]
        assert 0.02 <= min(fracs) and max(fracs) <= 0.40, (p.site_id, min(fracs), max(fracs))


def test_sample_invariants():
    for s in generate_site(default_profiles()[2], 20, 0):
        assert s.image.shape == (1, 64, 64) and s.mask.shape == (64, 64)
        assert set(np.unique(s.mask)) <= {0, 1}
        assert np.all(np.isfinite(s.image))


def test_gamma_shifts_foreground_intensity():
    base, gamma = SiteProfile(1, noise_sigma=0.0), SiteProfile(1, gamma_exponent=1.8, noise_sigma=0.0)

    def fg_mean(p):
        return np.mean([s.image[0][s.mask == 1].mean() for s in generate_site(p, 200, 3)])

    assert fg_mean(base) - fg_mean(gamma) > 0.1


def test_profile_validation():
    with pytest.raises(ValueError):
        SiteProfile(1, gamma_exponent=0.0)
    with pytest.raises(ValueError):
        SiteProfile(1, noise_sigma=-1.0)
    with pytest.raises(ValueError, match="fit"):
        generate_site(default_profiles()[0], 1, 0, size=16)
    with pytest.raises(KeyError, match="gama"):
        SiteProfile.from_dict({"site_id": 1, "gama": 2.0})


def test_whiten_hand_values():
    s = whiten(Sample(np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 2, 2), np.zeros((2, 2), np.uint8), 1))
    np.testing.assert_allclose(s.image.ravel(), (np.arange(4) - 1.5) / np.sqrt(1.25), rtol=1e-15)
    assert abs(s.image.mean()) < 1e-9 and abs(s.image.var() - 1) < 1e-6


def test_whiten_idempotent_and_constant():
    s = generate_site(default_profiles()[0], 1, 0)[0]
    once = whiten(s)
    assert np.max(np.abs(whiten(once).image - once.image)) < 1e-9
    const = whiten(Sample(np.full((1, 4, 4), 3.0), np.zeros((4, 4), np.uint8), 1))
    assert np.all(const.image == 0)


def test_augment_identity_and_flip_involution():
    s = generate_site(default_profiles()[0], 1, 0)[0]
    same = apply_augmentation(s, False, 0, 0)
    assert np.array_equal(same.image, s.image) and np.array_equal(same.mask, s.mask)
    twice = apply_augmentation(apply_augmentation(s, True, 0, 0), True, 0, 0)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_augment_keeps_alignment_and_counts():
    rng = np.random.default_rng(4)
    s = generate_site(default_profiles()[0], 1, 0)[0]
    indicator = Sample(s.mask[None].astype(np.float64), s.mask, 1)
    limit = shift_limit(64)
    assert limit == 5
    for _ in range(50):
        a = augment(indicator, rng)
        assert np.array_equal(a.image[0], a.mask.astype(np.float64))
        lost = s.mask.sum() - a.mask.sum()
        assert 0 <= lost
        # only pixels within `limit` of the border can leave the frame
        border = s.mask.copy()
        border[limit:-limit, limit:-limit] = 0
        assert lost <= border.sum()


def test_iteration_batches():
    corpus = make_corpus(n_train=8, n_test=1, size=32)
    rng = np.random.default_rng(0)
    batches = make_iteration_batches(corpus.train, 5, rng)
    assert [b.site for b in batches] == [1, 2, 3]
    assert all(b.images.shape == (5, 1, 32, 32) for b in batches)
    for b in batches:
        assert np.all(b.onehot_masks.sum(axis=1) == 1) and set(np.unique(b.onehot_masks)) <= {0.0, 1.0}
    again = make_iteration_batches(corpus.train, 5, np.random.default_rng(0))
    assert all(np.array_equal(x.images, y.images) for x, y in zip(batches, again))
    with pytest.raises(ValueError):
        make_iteration_batches(corpus.train, 9, rng)


def test_whitening_precedes_padding():
    corpus = make_corpus(n_train=5, n_test=1, size=32)
    b = make_iteration_batches(corpus.train, 5, np.random.default_rng(1), augment_data=False)[0]
    assert np.all(np.abs(b.images.mean(axis=(1, 2, 3))) < 1e-9)


def test_substreams_differ():
    a, b = substream(42, "augment").random(4), substream(42, "sampling").random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, substream(42, "augment").random(4))


def test_corpus_roundtrip(tmp_path):
    corpus = make_corpus(n_train=3, n_test=2, size=32)
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.profiles == corpus.profiles and back.seed == corpus.seed
    for split in ("train", "test"):
        for xs, ys in zip(getattr(corpus, split), getattr(back, split)):
            assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) and x.site == y.site
                       for x, y in zip(xs, ys))
