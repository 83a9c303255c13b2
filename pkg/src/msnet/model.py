"""Residual U-Net with domain-specific normalization and per-site auxiliary decoders.

The layout follows a pre-activation residual U-Net: a raw 3x3 convolution,
``depth`` residual stages separated by 3x3/2 max pooling, a bottleneck of
residual blocks, then ``depth`` upsampling stages (norm, relu, stride-2
deconvolution, summed with the matching encoder output) each followed by a
residual block, and a final norm, relu, 1x1 convolution and softmax.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    conv2d,
    maxpool2d,
    parameter,
    relu,
    softmax_channel,
    transposed_conv2d,
)
from .normalization import BnState, DsbnState, SiteRoutingError, bn_forward, dsbn_forward


class ConfigError(ValueError):
    """Raised for an architecture configuration that cannot be built."""


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 64
    base_channels: int = 8
    depth: int = 4
    bottleneck_blocks: int = 2
    num_classes: int = 2
    num_sites: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.bottleneck_blocks < 1:
            raise ConfigError("depth, base_channels and bottleneck_blocks must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_sites < 1:
            raise ConfigError("num_sites must be >= 1")
        if self.input_size % (2 ** self.depth) != 0:
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def size(self, stage: int) -> int:
        return self.input_size // 2 ** stage


@dataclass
class ParamGroup:
    """Convolution tensors and normalization states of one part of the network."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    norms: dict[str, BnState | DsbnState] = field(default_factory=dict)

    def kernels(self) -> list[Tensor]:
        return [t for name, t in self.tensors.items() if name.endswith(".w")]

    def parameters(self) -> list[Tensor]:
        out = list(self.tensors.values())
        for state in self.norms.values():
            out.extend(state.parameters())
        return out

    def bn_states(self) -> list[tuple[str, BnState]]:
        """(name, state) pairs; DSBN layers are expanded per site as ``name@s``."""
        out = []
        for name, state in self.norms.items():
            if isinstance(state, DsbnState):
                out.extend((f"{name}@{s}", state.per_site[s]) for s in sorted(state.per_site))
            else:
                out.append((name, state))
        return out


@dataclass
class ModelParams:
    config: ArchConfig
    encoder: ParamGroup
    decoder: ParamGroup
    aux: list[ParamGroup] | None = None

    @property
    def num_sites(self) -> int:
        return self.config.num_sites

    def universal_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def parameter_count(self, include_aux: bool = False) -> int:
        params = self.universal_parameters()
        if include_aux and self.aux:
            params += [p for g in self.aux for p in g.parameters()]
        return int(sum(p.data.size for p in params))

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# shape table
# ---------------------------------------------------------------------------

def layer_table(config: ArchConfig) -> list[tuple[str, int, int]]:
    """(layer name, feature size, channels) for every row of the backbone."""
    rows = [("convolution 1", config.size(0), config.channels(0))]
    for i in range(config.depth):
        rows.append((f"residual block {i + 1}", config.size(i), config.channels(i)))
        rows.append((f"pooling {i + 1}", config.size(i + 1), config.channels(i)))
    bottom = config.depth + 1
    for j in range(config.bottleneck_blocks):
        rows.append((f"residual block {bottom}_{j + 1}", config.size(config.depth), config.channels(config.depth)))
    n = bottom
    for stage in range(config.depth - 1, -1, -1):
        n += 1
        rows.append((f"upsample {n}", config.size(stage), config.channels(stage)))
        rows.append((f"residual block {n}", config.size(stage), config.channels(stage)))
    rows.append((f"output {n + 1}", config.size(0), config.num_classes))
    return rows


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def _add_conv(group: ParamGroup, rng, name: str, c_in: int, c_out: int, k: int):
    group.tensors[f"{name}.w"] = _he(rng, (c_out, c_in, k, k), c_in * k * k)
    group.tensors[f"{name}.b"] = parameter(np.zeros(c_out))


def _add_deconv(group: ParamGroup, rng, name: str, c_in: int, c_out: int, k: int = 3):
    group.tensors[f"{name}.w"] = _he(rng, (c_in, c_out, k, k), c_in * k * k)
    group.tensors[f"{name}.b"] = parameter(np.zeros(c_out))


def _add_residual(group: ParamGroup, rng, name: str, c_in: int, c_out: int, make_norm):
    if c_in != c_out:
        _add_conv(group, rng, f"{name}.proj", c_in, c_out, 1)
    group.norms[f"{name}.norm1"] = make_norm(c_out)
    _add_conv(group, rng, f"{name}.conv1", c_out, c_out, 3)
    group.norms[f"{name}.norm2"] = make_norm(c_out)
    _add_conv(group, rng, f"{name}.conv2", c_out, c_out, 3)


def _build_decoder(config: ArchConfig, rng, make_norm) -> ParamGroup:
    dec = ParamGroup()
    n = config.depth + 1
    for stage in range(config.depth - 1, -1, -1):
        n += 1
        c_hi, c = config.channels(stage + 1), config.channels(stage)
        dec.norms[f"up{n}.norm"] = make_norm(c_hi)
        _add_deconv(dec, rng, f"up{n}.deconv", c_hi, c)
        _add_residual(dec, rng, f"res{n}", c, c, make_norm)
    dec.norms["out.norm"] = make_norm(config.channels(0))
    _add_conv(dec, rng, "out.conv", config.channels(0), config.num_classes, 1)
    return dec


def build_model(config: ArchConfig, seed: int, with_aux: bool = True) -> ModelParams:
    """Deterministically initialise encoder, decoder and (optionally) S auxiliary decoders.

    Draw order is encoder, decoder, then auxiliary branches, so the universal
    network depends only on ``seed`` and the architecture.
    """
    rng = np.random.default_rng(seed)
    S = config.num_sites

    def dsbn(c):
        return DsbnState.create(c, S)

    enc = ParamGroup()
    _add_conv(enc, rng, "conv1", 1, config.channels(0), 3)
    for i in range(config.depth):
        c_in = config.channels(max(i - 1, 0))
        _add_residual(enc, rng, f"res{i + 1}", c_in, config.channels(i), dsbn)
    bottom = config.depth + 1
    for j in range(config.bottleneck_blocks):
        c_in = config.channels(config.depth - 1) if j == 0 else config.channels(config.depth)
        _add_residual(enc, rng, f"res{bottom}_{j + 1}", c_in, config.channels(config.depth), dsbn)

    dec = _build_decoder(config, rng, dsbn)
    aux = [_build_decoder(config, rng, BnState.create) for _ in range(S)] if with_aux else None
    params = ModelParams(config, enc, dec, aux)
    _verify_skip_channels(params)
    return params


def _verify_skip_channels(params: ModelParams) -> None:
    cfg = params.config
    n = cfg.depth + 1
    for stage in range(cfg.depth - 1, -1, -1):
        n += 1
        skip_c = params.encoder.tensors[f"res{stage + 1}.conv2.w"].shape[0]
        up_c = params.decoder.tensors[f"up{n}.deconv.w"].shape[1]
        if skip_c != up_c:
            raise ConfigError(f"summation skip into upsample {n}: {up_c} channels vs encoder {skip_c}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _norm(group: ParamGroup, name: str, x: Tensor, site: int, mode: str) -> Tensor:
    state = group.norms[name]
    if isinstance(state, DsbnState):
        return dsbn_forward(x, site, state, mode)
    return bn_forward(x, state, mode)


def _conv(group: ParamGroup, name: str, x: Tensor, padding: int = 1) -> Tensor:
    return conv2d(x, group.tensors[f"{name}.w"], group.tensors[f"{name}.b"], 1, padding)


def _residual(group: ParamGroup, name: str, x: Tensor, site: int, mode: str) -> Tensor:
    if f"{name}.proj.w" in group.tensors:
        x = _conv(group, f"{name}.proj", x, padding=0)
    h = _conv(group, f"{name}.conv1", relu(_norm(group, f"{name}.norm1", x, site, mode)))
    h = _conv(group, f"{name}.conv2", relu(_norm(group, f"{name}.norm2", h, site, mode)))
    return add(x, h)


def _check_site(params: ModelParams, site: int) -> None:
    if not 1 <= site <= params.num_sites:
        raise SiteRoutingError(f"site {site} outside 1..{params.num_sites}")


def encode(params: ModelParams, images: Tensor, site: int, mode: str):
    """Run the encoder; returns (skip features per stage, bottleneck output)."""
    cfg = params.config
    _check_site(params, site)
    if images.data.ndim != 4 or images.shape[1] != 1:
        raise ShapeError(f"images must be (b, 1, H, W), got {images.shape}")
    if images.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"spatial size {images.shape[2:]} != configured {cfg.input_size}")
    enc = params.encoder
    x = _conv(enc, "conv1", images)
    skips = []
    for i in range(cfg.depth):
        x = _residual(enc, f"res{i + 1}", x, site, mode)
        skips.append(x)
        x = maxpool2d(x, 3, 2, 1)
    for j in range(cfg.bottleneck_blocks):
        x = _residual(enc, f"res{cfg.depth + 1}_{j + 1}", x, site, mode)
    return skips, x


def decode(config: ArchConfig, group: ParamGroup, features, site: int, mode: str) -> Tensor:
    skips, x = features
    n = config.depth + 1
    for stage in range(config.depth - 1, -1, -1):
        n += 1
        h = relu(_norm(group, f"up{n}.norm", x, site, mode))
        h = transposed_conv2d(h, group.tensors[f"up{n}.deconv.w"], group.tensors[f"up{n}.deconv.b"], 2)
        x = _residual(group, f"res{n}", add(h, skips[stage]), site, mode)
    x = relu(_norm(group, "out.norm", x, site, mode))
    return softmax_channel(_conv(group, "out.conv", x, padding=0))


def forward_universal(params: ModelParams, images: Tensor, site: int, mode: str):
    """Universal network forward; returns (probabilities, encoder features)."""
    features = encode(params, images, site, mode)
    return decode(params.config, params.decoder, features, site, mode), features


def forward_aux(params: ModelParams, features, site: int, mode: str) -> Tensor:
    """Run auxiliary branch ``site`` on encoder features of a batch from that site."""
    if params.aux is None:
        raise ContractError("auxiliary branches were stripped from this model")
    _check_site(params, site)
    return decode(params.config, params.aux[site - 1], features, 1, mode)


def strip_aux(params: ModelParams) -> ModelParams:
    """Deployment copy holding only the universal encoder and decoder."""
    return ModelParams(params.config, copy.deepcopy(params.encoder), copy.deepcopy(params.decoder), None)
