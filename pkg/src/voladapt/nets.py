"""The three networks: volumetric segmenter with skip connections and
feature taps, shape autoencoder, and domain classifier.

All builders return a flat ``ModelParams`` collection; forward passes are
free functions of (params, config, input) so the same code runs in 32-bit
training and 64-bit gradient-check mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, ShapeError, Tensor


class ConfigError(ValueError):
    """Network configuration violates a structural invariant."""


@dataclass
class VNetConfig:
    input_size: int = 64
    levels: int = 3
    base_channels: int = 8
    conv_kernel: int = 3

    def __post_init__(self):
        if self.input_size % (2 ** self.levels):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.levels}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd to preserve resolution")

    def tap_names(self):
        last = self.levels - 1
        names = ["L0", f"L{last}", "M", f"R{last}", "R0"]
        # reduced depth can collapse names; keep order, drop duplicates
        return list(dict.fromkeys(names))

    def tap_specs(self):
        """Map tap name -> (channels, spatial size)."""
        b, s = self.base_channels, self.input_size
        last = self.levels - 1
        specs = {
            "L0": (b, s),
            f"L{last}": (b * 2 ** last, s // 2 ** last),
            "M": (b * 2 ** self.levels, s // 2 ** self.levels),
            f"R{last}": (b * 2 ** last, s // 2 ** last),
            "R0": (b, s),
        }
        return {k: specs[k] for k in self.tap_names()}


@dataclass
class AutoencoderConfig:
    input_size: int = 64
    latent_dim: int = 128
    base_channels: int = 8
    bottleneck_size: int = 4

    def __post_init__(self):
        n = self.input_size
        while n > self.bottleneck_size and n % 2 == 0:
            n //= 2
        if n != self.bottleneck_size:
            raise ConfigError(
                f"input_size {self.input_size} cannot reach a {self.bottleneck_size}^3 grid by halving")

    @property
    def n_down(self):
        return int(np.log2(self.input_size // self.bottleneck_size))


@dataclass
class ClassifierConfig:
    reduce_channels: int = 4
    head_channels: int = 8
    bottleneck_size: int = 4


@dataclass
class FeatureTapSet:
    """Named activations captured during a segmentation forward pass."""

    taps: dict
    config: VNetConfig = None

    def names(self):
        return list(self.taps)

    def __getitem__(self, key):
        return self.taps[key]


# ---------------------------------------------------------------------------
# initialization helpers


def _he_conv(rng, f, c, k, dtype=np.float32):
    fan_in = c * k ** 3
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c, k, k, k)).astype(dtype))


def _he_dense(rng, k_in, m_out, dtype=np.float32):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / k_in), size=(k_in, m_out)).astype(dtype))


def _zeros(*shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype))


def _slopes(c, dtype=np.float32):
    return Tensor(np.full(c, 0.25, dtype=dtype))


def _add_conv(params, rng, prefix, f, c, k, slope=True):
    params.add(prefix + ".w", _he_conv(rng, f, c, k))
    params.add(prefix + ".b", _zeros(f))
    if slope:
        params.add(prefix + ".slope", _slopes(f))


def _conv_block(params, prefix, x, stride=1, padding=0):
    y = ad.conv3d(x, params.entries[prefix + ".w"], params.entries[prefix + ".b"],
                  stride=stride, padding=padding)
    if prefix + ".slope" in params.entries:
        y = ad.prelu(y, params.entries[prefix + ".slope"])
    return y


def _tconv_block(params, prefix, x, stride=2):
    y = ad.conv3d_transpose(x, params.entries[prefix + ".w"], params.entries[prefix + ".b"],
                            stride=stride)
    if prefix + ".slope" in params.entries:
        y = ad.prelu(y, params.entries[prefix + ".slope"])
    return y


# ---------------------------------------------------------------------------
# segmentation network


def build_segnet(cfg, seed):
    rng = np.random.default_rng(seed)
    p = ModelParams("segnet")
    b, k = cfg.base_channels, cfg.conv_kernel
    _add_conv(p, rng, "in.conv", b, 1, k)
    for i in range(1, cfg.levels + 1):
        c_in, c_out = b * 2 ** (i - 1), b * 2 ** i
        _add_conv(p, rng, f"down{i}", c_out, c_in, 2)
        _add_conv(p, rng, f"enc{i}.conv", c_out, c_out, k)
    for i in range(cfg.levels, 0, -1):
        c_hi, c_lo = b * 2 ** i, b * 2 ** (i - 1)
        # transposed conv weight maps c_hi input channels to c_lo outputs
        p.add(f"up{i}.w", _he_conv(rng, c_hi, c_lo, 2))
        p.add(f"up{i}.b", _zeros(c_lo))
        p.add(f"up{i}.slope", _slopes(c_lo))
        _add_conv(p, rng, f"dec{i - 1}.conv", c_lo, 2 * c_lo, k)
    p.add("head.w", _he_conv(rng, 1, b, 1))
    p.add("head.b", _zeros(1))
    return p


def segment(params, cfg, x):
    """Forward pass; returns (probability volume, FeatureTapSet)."""
    if x.data.ndim != 5 or x.data.shape[1] != 1 or x.data.shape[2:] != (cfg.input_size,) * 3:
        raise ShapeError(
            f"segment: expected (N,1,{cfg.input_size}^3) input, got {x.shape}")
    pad = (cfg.conv_kernel - 1) // 2
    taps = {}
    stages = []
    h = _conv_block(params, "in.conv", x, padding=pad)
    taps["L0"] = h
    stages.append(h)
    for i in range(1, cfg.levels + 1):
        h = _conv_block(params, f"down{i}", h, stride=2)
        h = _conv_block(params, f"enc{i}.conv", h, padding=pad)
        if i < cfg.levels:
            taps[f"L{i}"] = h
            stages.append(h)
        else:
            taps["M"] = h
    for i in range(cfg.levels, 0, -1):
        h = _tconv_block(params, f"up{i}", h)
        h = ad.concat_channels([h, stages[i - 1]])
        h = _conv_block(params, f"dec{i - 1}.conv", h, padding=pad)
        taps[f"R{i - 1}"] = h
    logits = ad.conv3d(h, params.entries["head.w"], params.entries["head.b"])
    probs = ad.sigmoid(logits)
    wanted = cfg.tap_names()
    return probs, FeatureTapSet({k: taps[k] for k in wanted}, cfg)


# ---------------------------------------------------------------------------
# shape autoencoder


def build_autoencoder(cfg, seed):
    rng = np.random.default_rng(seed)
    p = ModelParams("autoencoder")
    b = cfg.base_channels
    c = 1
    for i in range(cfg.n_down):
        c_out = b * 2 ** i
        _add_conv(p, rng, f"enc{i}", c_out, c, 2)
        c = c_out
    flat = c * cfg.bottleneck_size ** 3
    p.add("to_latent.w", _he_dense(rng, flat, cfg.latent_dim))
    p.add("to_latent.b", _zeros(cfg.latent_dim))
    from_w = _he_dense(rng, cfg.latent_dim, flat)
    from_w.data *= cfg.latent_dim          # undoes the code scaling at init
    p.add("from_latent.w", from_w)
    p.add("from_latent.b", _zeros(flat))
    p.add("from_latent.slope", _slopes(flat))
    for i in range(cfg.n_down - 1, -1, -1):
        c_out = b * 2 ** (i - 1) if i > 0 else b
        p.add(f"dec{i}.w", _he_conv(rng, c, c_out, 2))
        p.add(f"dec{i}.b", _zeros(c_out))
        p.add(f"dec{i}.slope", _slopes(c_out))
        c = c_out
    _add_conv(p, rng, "out", 1, c, 1, slope=False)
    return p


def encode(params, cfg, y):
    if y.data.ndim != 5 or y.data.shape[2:] != (cfg.input_size,) * 3:
        raise ShapeError(
            f"encode: expected (N,1,{cfg.input_size}^3) input, got {y.shape}")
    h = y
    for i in range(cfg.n_down):
        h = _conv_block(params, f"enc{i}", h, stride=2)
    n = h.data.shape[0]
    h = ad.reshape(h, (n, -1))
    z = ad.dense(h, params.entries["to_latent.w"], params.entries["to_latent.b"])
    # fixed 1/latent_dim code scaling (the decoder compensates at init)
    # keeps latent distances on a usable scale for the shape loss
    return z * (1.0 / cfg.latent_dim)


def decode(params, cfg, z):
    if z.data.ndim != 2 or z.data.shape[1] != cfg.latent_dim:
        raise ShapeError(f"decode: expected (N,{cfg.latent_dim}) code, got {z.shape}")
    n = z.data.shape[0]
    h = ad.dense(z, params.entries["from_latent.w"], params.entries["from_latent.b"])
    h = ad.prelu(h, params.entries["from_latent.slope"])
    c = params.entries[f"dec{cfg.n_down - 1}.w"].data.shape[0]
    h = ad.reshape(h, (n, c, cfg.bottleneck_size, cfg.bottleneck_size, cfg.bottleneck_size))
    for i in range(cfg.n_down - 1, -1, -1):
        h = _tconv_block(params, f"dec{i}", h)
    logits = ad.conv3d(h, params.entries["out.w"], params.entries["out.b"])
    return ad.sigmoid(logits)


def autoencode(params, cfg, y):
    return decode(params, cfg, encode(params, cfg, y))


# ---------------------------------------------------------------------------
# domain classifier


def build_classifier(cfg, vnet_cfg, seed):
    rng = np.random.default_rng(seed)
    p = ModelParams("classifier")
    total_c = 0
    for name, (c, s) in vnet_cfg.tap_specs().items():
        n_red = int(np.log2(s // cfg.bottleneck_size)) if s > cfg.bottleneck_size else 0
        c_in = c
        for j in range(n_red):
            _add_conv(p, rng, f"red.{name}.{j}", cfg.reduce_channels, c_in, 2)
            c_in = cfg.reduce_channels
        total_c += c_in
    _add_conv(p, rng, "head.conv", cfg.head_channels, total_c, 1)
    flat = cfg.head_channels * cfg.bottleneck_size ** 3
    p.add("head.fc.w", _he_dense(rng, flat, 1))
    p.add("head.fc.b", _zeros(1))
    return p


def classify_domain(params, cfg, vnet_cfg, taps):
    """Reduce every tap to the bottleneck grid, concatenate, and predict
    the probability of the target domain."""
    specs = vnet_cfg.tap_specs()
    if set(taps.names()) != set(specs):
        raise RuntimeError(
            f"tap set {sorted(taps.names())} inconsistent with config taps {sorted(specs)}")
    reduced = []
    for name, (c, s) in specs.items():
        h = taps[name]
        n_red = int(np.log2(s // cfg.bottleneck_size)) if s > cfg.bottleneck_size else 0
        for j in range(n_red):
            h = _conv_block(params, f"red.{name}.{j}", h, stride=2)
        if h.data.shape[2:] != (cfg.bottleneck_size,) * 3:
            raise RuntimeError(
                f"tap {name} reduced to {h.data.shape[2:]}, expected {cfg.bottleneck_size}^3")
        reduced.append(h)
    h = ad.concat_channels(reduced)
    h = _conv_block(params, "head.conv", h)
    n = h.data.shape[0]
    h = ad.reshape(h, (n, -1))
    logit = ad.dense(h, params.entries["head.fc.w"], params.entries["head.fc.b"])
    return ad.sigmoid(logit)
