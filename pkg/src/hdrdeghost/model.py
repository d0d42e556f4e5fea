"""Hierarchical dual-branch fusion model.

Each block adds a window self-attention global branch and a deformable-conv
channel-attention local branch; N blocks form a group with a conv + residual,
M groups plus a dilated-conv tail with two global residuals form the body.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tensor as tc
from .head import head_forward
from .hdrmath import SampleTriplet, HdrImage, build_input

CHECKPOINT_MAGIC = b"HDCK0001"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 60        # head feature channels C
    embed_dim: int = 60       # body embedding dim D
    window: int = 8
    heads: int = 6
    blocks_per_group: int = 6  # N
    groups: int = 3            # M
    mlp_ratio: float = 2.0
    dilation: int = 2
    sar: bool = True
    deformable: bool = True
    leaky_slope: float = 0.01
    dtype: str = "f32"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.channels, self.embed_dim, self.window, self.heads,
               self.blocks_per_group, self.groups, self.dilation) < 1:
            raise ConfigError("all structural sizes must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.dtype not in tc.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(tc.DTYPES)}")

    # local-branch channel path D -> D/10 -> D/5 -> 2D/5 -> 2D/5
    @property
    def local_c1(self):
        return max(1, self.embed_dim // 10)

    @property
    def local_c2(self):
        return max(1, self.embed_dim // 5)

    @property
    def local_c3(self):
        return max(1, 2 * self.embed_dim // 5)

    @property
    def mlp_hidden(self):
        return max(1, int(round(self.mlp_ratio * self.embed_dim)))


def full_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def tiny_preset(**overrides) -> ModelConfig:
    base = ModelConfig(channels=8, embed_dim=16, window=4, heads=2,
                       blocks_per_group=2, groups=1)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# parameter initialization

def _trunc_normal(rng, shape, std=0.02):
    v = rng.normal(0.0, std, size=shape)
    return np.clip(v, -2 * std, 2 * std)


def _conv_init(rng, k, cin, cout):
    bound = np.sqrt(6.0 / (k * k * cin))
    return rng.uniform(-bound, bound, size=(k, k, cin, cout))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Seeded parameter dict, keyed by hierarchical names."""
    rng = np.random.default_rng(seed)
    c, d = cfg.channels, cfg.embed_dim
    p = {}

    def conv(name, cin, cout, k=3):
        p[f"{name}.w"] = _conv_init(rng, k, cin, cout)
        p[f"{name}.b"] = np.zeros(cout)

    def lin(name, din, dout):
        p[f"{name}.w"] = _trunc_normal(rng, (din, dout))
        p[f"{name}.b"] = np.zeros(dout)

    def norm(name, dim):
        p[f"{name}.g"] = np.ones(dim)
        p[f"{name}.b"] = np.zeros(dim)

    conv("head.shallow.0", 6, c)
    conv("head.shallow.1", c, c)
    conv("head.shallow.2", c, c)
    for i in (1, 3):
        conv(f"head.att{i}.conv1", 2 * c, c)
        conv(f"head.att{i}.conv2", c, c)

    conv("embed", 4 * c, d)

    c1, c2, c3 = cfg.local_c1, cfg.local_c2, cfg.local_c3
    for g in range(cfg.groups):
        for n in range(cfg.blocks_per_group):
            pre = f"group{g}.dt{n}"
            norm(f"{pre}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                lin(f"{pre}.msa.{proj}", d, d)
            norm(f"{pre}.ln2", d)
            lin(f"{pre}.mlp.fc1", d, cfg.mlp_hidden)
            lin(f"{pre}.mlp.fc2", cfg.mlp_hidden, d)
            norm(f"{pre}.local.ln", d)
            conv(f"{pre}.local.conv1", d, c1)
            conv(f"{pre}.local.conv2", c1, c2)
            conv(f"{pre}.local.dconv1", c2, c3)
            conv(f"{pre}.local.dconv2", c3, c3)
            if cfg.deformable:
                # offset predictors start at zero: the plain-conv operating point
                for j, cin in ((1, c2), (2, c3)):
                    p[f"{pre}.local.dconv{j}.off.w"] = np.zeros((3, 3, cin, 18))
                    p[f"{pre}.local.dconv{j}.off.b"] = np.zeros(18)
            lin(f"{pre}.local.fc", c3, d)
        conv(f"group{g}.conv", d, d)

    conv("tail.dilated", d, d)
    conv("tail.conv1", d, d)
    conv("tail.out", d, 3)

    dt = tc.DTYPES[cfg.dtype]
    return {k: v.astype(dt) for k, v in p.items()}


def param_manifest(params: dict):
    """(name, shape, count) rows plus the total parameter count."""
    rows = [(k, tuple(v.shape), int(v.size)) for k, v in sorted(params.items())]
    return rows, sum(r[2] for r in rows)


# ---------------------------------------------------------------------------
# window tokenization

def window_partition(x, window, shift=0):
    """BHWC grid -> (B*nW) x window^2 x D window tokens.

    Pads H and W up to window multiples with reflect padding and applies a
    cyclic roll of ``shift`` pixels first. Returns the tokens plus the info
    needed by window_reverse.
    """
    b, h, w, d = x.shape
    ph = (-h) % window
    pw = (-w) % window
    if ph or pw:
        x = tc.pad2d(x, (0, ph, 0, pw), mode="reflect")
    hp, wp = h + ph, w + pw
    if shift:
        x = tc.roll2d(x, -shift, -shift)
    nh, nw = hp // window, wp // window
    x = tc.reshape(x, (b, nh, window, nw, window, d))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    tokens = tc.reshape(x, (b * nh * nw, window * window, d))
    return tokens, (b, h, w, hp, wp)


def window_reverse(tokens, window, shift, info):
    """Inverse of window_partition (bit-exact round trip)."""
    b, h, w, hp, wp = info
    nh, nw = hp // window, wp // window
    d = tokens.shape[-1]
    x = tc.reshape(tokens, (b, nh, nw, window, window, d))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    x = tc.reshape(x, (b, hp, wp, d))
    if shift:
        x = tc.roll2d(x, shift, shift)
    if hp != h or wp != w:
        x = tc.narrow(tc.narrow(x, 1, 0, h), 2, 0, w)
    return x


# ---------------------------------------------------------------------------
# dual-transformer block

def msa(tokens, p, pre, cfg):
    """Multi-head scaled dot-product attention within each window."""
    bw, t, d = tokens.shape
    h = cfg.heads
    hd = d // h
    scale = 1.0 / np.sqrt(hd)

    def split_heads(x):
        x = tc.reshape(x, (bw, t, h, hd))
        return tc.transpose(x, (0, 2, 1, 3))

    q = split_heads(tc.linear(tokens, p[f"{pre}.msa.q.w"], p[f"{pre}.msa.q.b"]))
    k = split_heads(tc.linear(tokens, p[f"{pre}.msa.k.w"], p[f"{pre}.msa.k.b"]))
    v = split_heads(tc.linear(tokens, p[f"{pre}.msa.v.w"], p[f"{pre}.msa.v.b"]))
    attn = tc.softmax(tc.mul_scalar(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))),
                                    scale), axis=-1)
    out = tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3))
    out = tc.reshape(out, (bw, t, d))
    return tc.linear(out, p[f"{pre}.msa.o.w"], p[f"{pre}.msa.o.b"])


def global_branch(x, p, pre, cfg, shift):
    """Window MSA and MLP, each behind a LayerNorm with a residual."""
    tokens, info = window_partition(
        tc.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]), cfg.window, shift)
    em1 = tc.add(window_reverse(msa(tokens, p, pre, cfg), cfg.window, shift, info), x)
    z = tc.layer_norm(em1, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    z = tc.linear(z, p[f"{pre}.mlp.fc1.w"], p[f"{pre}.mlp.fc1.b"])
    z = tc.leaky_relu(z, cfg.leaky_slope)
    z = tc.linear(z, p[f"{pre}.mlp.fc2.w"], p[f"{pre}.mlp.fc2.b"])
    return tc.add(z, em1)


def local_branch(x, p, pre, cfg):
    """Deformable-conv chain pooled into a per-channel gate on the input."""
    slope = cfg.leaky_slope
    f_in = tc.layer_norm(x, p[f"{pre}.local.ln.g"], p[f"{pre}.local.ln.b"])
    t = tc.leaky_relu(tc.conv2d(f_in, p[f"{pre}.local.conv1.w"],
                                p[f"{pre}.local.conv1.b"]), slope)
    t = tc.leaky_relu(tc.conv2d(t, p[f"{pre}.local.conv2.w"],
                                p[f"{pre}.local.conv2.b"]), slope)
    for j in (1, 2):
        w, b = p[f"{pre}.local.dconv{j}.w"], p[f"{pre}.local.dconv{j}.b"]
        if cfg.deformable:
            off = tc.conv2d(t, p[f"{pre}.local.dconv{j}.off.w"],
                            p[f"{pre}.local.dconv{j}.off.b"])
            t = tc.leaky_relu(tc.deformable_conv2d(t, w, b, off), slope)
        else:
            t = tc.leaky_relu(tc.conv2d(t, w, b), slope)
    pooled = tc.global_avg_pool(t)
    wc = tc.sigmoid(tc.linear(pooled, p[f"{pre}.local.fc.w"],
                              p[f"{pre}.local.fc.b"]))
    gate = tc.reshape(wc, (x.shape[0], 1, 1, x.shape[3]))
    return tc.mul(f_in, gate)


def dt_forward(x, p, pre, cfg, shift):
    """One dual-transformer block: additive fusion of both branches."""
    return tc.add(global_branch(x, p, pre, cfg, shift),
                  local_branch(x, p, pre, cfg))


def hdt_forward(f_init, p, cfg):
    """Body: embed, M groups of N blocks, dilated tail with two global
    residuals, then a sigmoid RGB head. Output values lie in (0, 1)."""
    x0 = tc.conv2d(f_init, p["embed.w"], p["embed.b"])
    x = x0
    for g in range(cfg.groups):
        gin = x
        for n in range(cfg.blocks_per_group):
            shift = 0 if n % 2 == 0 else cfg.window // 2
            x = dt_forward(x, p, f"group{g}.dt{n}", cfg, shift)
        x = tc.add(tc.conv2d(x, p[f"group{g}.conv.w"], p[f"group{g}.conv.b"]), gin)
    y = tc.add(tc.conv2d(x, p["tail.dilated.w"], p["tail.dilated.b"],
                         dilation=cfg.dilation), x0)
    y = tc.add(tc.conv2d(y, p["tail.conv1.w"], p["tail.conv1.b"]), x0)
    return tc.sigmoid(tc.conv2d(y, p["tail.out.w"], p["tail.out.b"]))


def bind_params(params: dict, tape: tc.Tape) -> dict:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def forward_from_inputs(inputs, leaves, cfg):
    """Differentiable forward from three 1 x H x W x 6 input tensors."""
    consts = [x if isinstance(x, tc.Tensor) else tc.constant(x) for x in inputs]
    f_init = head_forward(consts, leaves, cfg)
    return hdt_forward(f_init, leaves, cfg)


def model_forward(s: SampleTriplet, params: dict, cfg: ModelConfig,
                  gamma: float = 2.2) -> HdrImage:
    """End-to-end fusion of a triplet into a linear HDR image in [0, 1]."""
    tape = tc.Tape()
    leaves = bind_params(params, tape)
    dt = tc.DTYPES[cfg.dtype]
    inputs = [x.astype(dt) for x in build_input(s, gamma)]
    out = forward_from_inputs(inputs, leaves, cfg)
    return HdrImage(pixels=np.asarray(out.data[0], dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoint container

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, cfg: ModelConfig):
    """Self-describing container: magic, JSON manifest, little-endian float
    payloads in manifest order. Payload dtype follows the config (f32 for
    training/inference, f64 in gradient-check mode) so resuming is lossless."""
    names = sorted(params)
    wire = "<f8" if cfg.dtype == "f64" else "<f4"
    manifest = {
        "config": asdict(cfg),
        "tensors": [{"name": k, "shape": list(params[k].shape),
                     "dtype": cfg.dtype} for k in names],
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype=wire).tobytes())


def load_checkpoint(path):
    """Returns (params, ModelConfig); params use the config dtype."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<I", f.read(4))
        try:
            manifest = json.loads(f.read(mlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint manifest: {e}") from None
        cfg = ModelConfig(**manifest["config"])
        dt = tc.DTYPES[cfg.dtype]
        params = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            if entry.get("dtype", "f32") not in tc.DTYPES:
                raise CheckpointError(
                    f"unknown payload dtype {entry.get('dtype')!r}")
            wire = "<f8" if entry.get("dtype", "f32") == "f64" else "<f4"
            itemsize = 8 if wire == "<f8" else 4
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(itemsize * n)
            if len(raw) != itemsize * n:
                raise CheckpointError(
                    f"truncated payload for tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype=wire).reshape(
                shape).astype(dt)
        if f.read(1):
            raise CheckpointError("trailing bytes after declared payloads")
    expected = set(init_params(cfg, seed=0))
    if set(params) != expected:
        missing = sorted(expected - set(params))
        extra = sorted(set(params) - expected)
        raise CheckpointError(
            f"checkpoint/config mismatch: missing {missing}, unexpected {extra}")
    return params, cfg
