"""Synthetic multi-site segmentation corpus, whitening, augmentation and batching."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import labels_to_onehot

CORPUS_FORMAT = "msnet-corpus/1"
VARIANCE_FLOOR = 1e-8
SHIFT_FRACTION = 0.08


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("data", "init", "augment", ...)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),)))


@dataclass(frozen=True)
class SiteProfile:
    site_id: int
    gamma_exponent: float = 1.0
    contrast_scale: float = 1.0
    brightness_offset: float = 0.0
    bias_field_amplitude: float = 0.0
    noise_sigma: float = 0.02
    object_scale_range: tuple = (6.0, 13.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.gamma_exponent <= 0:
            raise ValueError("gamma_exponent must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.object_scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"object_scale_range {self.object_scale_range} is not an increasing positive pair")
        object.__setattr__(self, "object_scale_range", (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> "SiteProfile":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown profile key(s): {sorted(unknown)}")
        d = dict(d)
        if "object_scale_range" in d:
            d["object_scale_range"] = tuple(d["object_scale_range"])
        return cls(**d)


def default_profiles() -> list[SiteProfile]:
    """Three heterogeneous sites: near-identity, gamma + bias field, inverted + noisy with larger objects."""
    return [
        SiteProfile(1, texture_seed=101),
        SiteProfile(2, gamma_exponent=1.8, bias_field_amplitude=0.4, noise_sigma=0.03, texture_seed=202),
        SiteProfile(3, contrast_scale=-1.0, brightness_offset=1.0, noise_sigma=0.15,
                    object_scale_range=(8.0, 15.0), texture_seed=303),
    ]


def homogeneous_profiles(num_sites: int = 3) -> list[SiteProfile]:
    """Control corpus: every site draws from the site-1 appearance model."""
    base = default_profiles()[0]
    return [SiteProfile(**{**asdict(base), "site_id": s}) for s in range(1, num_sites + 1)]


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float64
    mask: np.ndarray   # (H, W) uint8 in {0, 1}
    site: int


@dataclass
class SiteBatch:
    images: np.ndarray         # (b, 1, H, W)
    onehot_masks: np.ndarray   # (b, 2, H, W)
    site: int
    indices: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _site_texture(profile: SiteProfile, size: int) -> np.ndarray:
    """Fixed site-specific background pattern (a sum of oriented gratings)."""
    rng = np.random.default_rng(profile.texture_seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return tex / 3.0


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def _bias_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency field in [-1, 1]: a random linear ramp plus one broad cosine."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    theta = rng.uniform(0, 2 * np.pi)
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    bump = np.cos(np.pi * (xx * rng.uniform(0.3, 0.8) + yy * rng.uniform(0.3, 0.8)))
    f = 0.7 * ramp + 0.3 * bump
    return f / np.abs(f).max()


def _ellipse_radius(size: int, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def render_sample(profile: SiteProfile, seed: int, index: int, size: int = 64) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, profile.site_id, index]))
    lo, hi = profile.object_scale_range

    background = 0.32 + 0.06 * _site_texture(profile, size) + 0.05 * _smooth_field(rng, size, 2.0)
    image = background.copy()
    mask = np.zeros((size, size), dtype=bool)

    # decoys: small round blobs of intermediate intensity that are not foreground
    for _ in range(rng.integers(1, 3)):
        r = rng.uniform(2.0, 3.5)
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        rad = _ellipse_radius(size, cy, cx, r, r, 0.0)
        image += 0.22 * (1 / (1 + np.exp((rad - 1) * 6)))

    # one object-sized dark decoy: its polarity is the opposite of the foreground,
    # so an inverted-contrast site makes it look like the objects of the other sites
    a, b = rng.uniform(lo, hi, size=2)
    reach = max(a, b)
    cy, cx = rng.uniform(reach + 1, size - reach - 1, size=2)
    rad = _ellipse_radius(size, cy, cx, a, b, rng.uniform(0, np.pi))
    soft = 1 / (1 + np.exp((rad - 1) * 8 * min(a, b) / 4))
    image = image * (1 - soft) + soft * (0.06 + 0.03 * _smooth_field(rng, size, 1.0))

    for _ in range(rng.integers(1, 3)):
        a, b = rng.uniform(lo, hi, size=2)
        theta = rng.uniform(0, np.pi)
        reach = max(a, b)
        cy, cx = rng.uniform(reach + 1, size - reach - 1, size=2)
        rad = _ellipse_radius(size, cy, cx, a, b, theta)
        inside = rad <= 1.0
        soft = 1 / (1 + np.exp((rad - 1) * 8 * min(a, b) / 4))
        image = image * (1 - soft) + soft * (0.62 + 0.04 * _smooth_field(rng, size, 1.0))
        mask |= inside

    image = np.clip(image, 0.0, 1.0) ** profile.gamma_exponent
    image = profile.contrast_scale * image + profile.brightness_offset
    if profile.bias_field_amplitude:
        image = image * (1.0 + profile.bias_field_amplitude * _bias_field(rng, size))
    if profile.noise_sigma:
        image = image + rng.normal(0.0, profile.noise_sigma, size=image.shape)
    return Sample(image[None].astype(np.float64), mask.astype(np.uint8), profile.site_id)


def generate_site(profile: SiteProfile, n: int, seed: int, size: int = 64) -> list[Sample]:
    """``n`` samples for one site; sample ``i`` depends only on (profile, seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if 2 * profile.object_scale_range[1] + 2 > size:
        raise ValueError(f"object_scale_range {profile.object_scale_range} does not fit a {size}x{size} image")
    return [render_sample(profile, seed, i, size) for i in range(n)]


@dataclass
class Corpus:
    profiles: list[SiteProfile]
    train: list[list[Sample]]
    test: list[list[Sample]]
    seed: int
    image_size: int

    @property
    def num_sites(self) -> int:
        return len(self.profiles)


def make_corpus(profiles: list[SiteProfile] | None = None, n_train: int = 60, n_test: int = 15,
                seed: int = 42, size: int = 64) -> Corpus:
    profiles = profiles if profiles is not None else default_profiles()
    train, test = [], []
    for p in profiles:
        samples = generate_site(p, n_train + n_test, seed, size)
        train.append(samples[:n_train])
        test.append(samples[n_train:])
    return Corpus(profiles, train, test, seed, size)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def whiten(sample: Sample) -> Sample:
    """Zero-mean, unit-variance intensity; constant images become all zeros."""
    img = sample.image
    var = img.var()
    out = (img - img.mean()) / np.sqrt(max(var, VARIANCE_FLOOR))
    return Sample(out, sample.mask, sample.site)


def shift_limit(size: int) -> int:
    return int(round(SHIFT_FRACTION * size))


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate the last two axes by (dy, dx), filling exposed pixels with zero."""
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def apply_augmentation(sample: Sample, flip: bool, dy: int, dx: int) -> Sample:
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    return Sample(_shift(image, dy, dx), _shift(mask, dy, dx), sample.site)


def augment(sample: Sample, rng: np.random.Generator, shift_max: int | None = None) -> Sample:
    """Random horizontal flip (p = 0.5) then an integer shift per axis, zero-padded."""
    if shift_max is None:
        shift_max = shift_limit(sample.image.shape[-1])
    flip = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(-shift_max, shift_max + 1, size=2))
    return apply_augmentation(sample, flip, dy, dx)


def stack_batch(samples: list[Sample], site: int, num_classes: int = 2) -> SiteBatch:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return SiteBatch(images, labels_to_onehot(masks, num_classes), site)


def make_iteration_batches(datasets: list[list[Sample]], batch_size: int, rng: np.random.Generator,
                           augment_data: bool = True, augment_rng: np.random.Generator | None = None) -> list[SiteBatch]:
    """One whitened, augmented batch per site, sites in order 1..S.

    Indices are drawn from ``rng``; augmentation draws from ``augment_rng``
    when given, else from ``rng`` as well.
    """
    augment_rng = augment_rng or rng
    for s, ds in enumerate(datasets, start=1):
        if len(ds) < batch_size:
            raise ValueError(f"site {s} has {len(ds)} samples, fewer than batch size {batch_size}")
    batches = []
    for s, ds in enumerate(datasets, start=1):
        idx = rng.choice(len(ds), size=batch_size, replace=False)
        drawn = [whiten(ds[i]) for i in idx]
        if augment_data:
            drawn = [augment(x, augment_rng) for x in drawn]
        batch = stack_batch(drawn, s)
        batch.indices = [int(i) for i in idx]
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, directory) -> Path:
    """Write manifest.json plus images.f64 (little-endian float64) and masks.u8."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    img_off = mask_off = 0
    with open(directory / "images.f64", "wb") as fi, open(directory / "masks.u8", "wb") as fm:
        for split, groups in (("train", corpus.train), ("test", corpus.test)):
            for site_samples in groups:
                for i, s in enumerate(site_samples):
                    img = s.image.astype("<f8").tobytes()
                    msk = s.mask.astype(np.uint8).tobytes()
                    records.append({
                        "site": s.site, "split": split, "index": i,
                        "image_shape": list(s.image.shape), "mask_shape": list(s.mask.shape),
                        "image_offset": img_off, "mask_offset": mask_off,
                    })
                    fi.write(img)
                    fm.write(msk)
                    img_off += len(img)
                    mask_off += len(msk)
    manifest = {
        "format": CORPUS_FORMAT,
        "seed": corpus.seed,
        "image_size": corpus.image_size,
        "profiles": [asdict(p) for p in corpus.profiles],
        "image_file": "images.f64",
        "mask_file": "masks.u8",
        "samples": records,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported corpus format {manifest.get('format')!r}")
    profiles = [SiteProfile.from_dict(p) for p in manifest["profiles"]]
    images = (directory / manifest["image_file"]).read_bytes()
    masks = (directory / manifest["mask_file"]).read_bytes()
    site_ids = [p.site_id for p in profiles]
    train = {s: [] for s in site_ids}
    test = {s: [] for s in site_ids}
    for r in manifest["samples"]:
        ishape, mshape = tuple(r["image_shape"]), tuple(r["mask_shape"])
        img = np.frombuffer(images, dtype="<f8", count=int(np.prod(ishape)), offset=r["image_offset"])
        msk = np.frombuffer(masks, dtype=np.uint8, count=int(np.prod(mshape)), offset=r["mask_offset"])
        sample = Sample(img.reshape(ishape).astype(np.float64), msk.reshape(mshape).copy(), r["site"])
        (train if r["split"] == "train" else test)[r["site"]].append(sample)
    return Corpus(profiles, [train[s] for s in site_ids], [test[s] for s in site_ids],
                  manifest["seed"], manifest["image_size"])
