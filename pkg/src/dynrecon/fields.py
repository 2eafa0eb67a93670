"""Positional encoding and the canonical radiance / blend-weight networks.

Parameters live in :class:`FieldParameters` as float32 arrays. A forward
pass first *binds* them to tensors (tracked on a tape when training), so the
same code serves training, inference and spatial differentiation.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "PositionalEncoding",
    "FieldConfig",
    "FieldParameters",
    "CanonicalFieldNetwork",
    "encode",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"DYNRCKPT"
CHECKPOINT_VERSION = 1
_LATENT_NAMES = ("appearance_codes", "blend_codes")


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + int(self.include_input))


def encode(v, enc: PositionalEncoding):
    """Fourier features ``[v, sin(2^0 pi v), cos(2^0 pi v), ...]`` along the last axis.

    Accepts an array or a :class:`Tensor`; returns the same kind.
    """
    is_tensor = isinstance(v, Tensor)
    vt = ad.as_tensor(v)
    if not np.all(np.isfinite(vt.data)):
        raise ValueError("encode: non-finite input")
    dim = vt.shape[-1]
    lead = vt.shape[:-1]
    parts = [vt] if enc.include_input else []
    if enc.num_frequencies > 0:
        freqs = (2.0 ** np.arange(enc.num_frequencies) * np.pi)[:, None].astype(vt.data.dtype)
        scaled = ad.mul(ad.reshape(vt, lead + (1, dim)), freqs)
        sc = ad.concat([ad.sin(scaled), ad.cos(scaled)], axis=-1)
        parts.append(ad.reshape(sc, lead + (2 * dim * enc.num_frequencies,)))
    out = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
    return out if is_tensor else out.data


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of the density, color and canonical blend-weight networks."""

    pos_freqs: int = 6
    dir_freqs: int = 4
    include_input: bool = True
    density_depth: int = 8
    density_width: int = 256
    skip_layer: int = 4
    color_depth: int = 1
    color_width: int = 128
    weight_depth: int = 4
    weight_width: int = 64
    code_dim: int = 128
    num_frames: int = 1
    num_joints: int = 4

    @property
    def pos_encoding(self) -> PositionalEncoding:
        return PositionalEncoding(self.pos_freqs, self.include_input)

    @property
    def dir_encoding(self) -> PositionalEncoding:
        return PositionalEncoding(self.dir_freqs, self.include_input)

    @property
    def pos_dim(self) -> int:
        return self.pos_encoding.output_dim(3)

    @property
    def dir_dim(self) -> int:
        return self.dir_encoding.output_dim(3)

    @classmethod
    def desk(cls, **overrides) -> "FieldConfig":
        """Scaled-down layout for CPU runs."""
        base = dict(density_depth=4, density_width=64, skip_layer=2, color_width=64)
        base.update(overrides)
        return cls(**base)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        w = self.density_width
        for i in range(self.density_depth):
            fan_in = self.pos_dim if i == 0 else w
            if i == self.skip_layer and i > 0:
                fan_in += self.pos_dim
            shapes[f"density.{i}.W"] = (fan_in, w)
            shapes[f"density.{i}.b"] = (w,)
        shapes["sigma.W"] = (w, 1)
        shapes["sigma.b"] = (1,)
        shapes["feature.W"] = (w, w)
        shapes["feature.b"] = (w,)
        fan_in = w + self.dir_dim + self.code_dim
        for i in range(self.color_depth):
            shapes[f"color.{i}.W"] = (fan_in, self.color_width)
            shapes[f"color.{i}.b"] = (self.color_width,)
            fan_in = self.color_width
        shapes["rgb.W"] = (fan_in, 3)
        shapes["rgb.b"] = (3,)
        fan_in = self.pos_dim + self.code_dim
        for i in range(self.weight_depth):
            shapes[f"bw.{i}.W"] = (fan_in, self.weight_width)
            shapes[f"bw.{i}.b"] = (self.weight_width,)
            fan_in = self.weight_width
        shapes["bw.out.W"] = (fan_in, self.num_joints)
        shapes["bw.out.b"] = (self.num_joints,)
        shapes["appearance_codes"] = (self.num_frames, self.code_dim)
        shapes["blend_codes"] = (self.num_frames, self.code_dim)
        return shapes


@dataclass
class FieldParameters:
    config: FieldConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "FieldParameters":
        return FieldParameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)


def init_parameters(config: FieldConfig, seed: int = 0) -> FieldParameters:
    """Uniform ``±1/sqrt(fan_in)`` weights and biases; codes uniform in ±0.1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.layer_shapes().items():
        if name in _LATENT_NAMES:
            arr = rng.uniform(-0.1, 0.1, size=shape)
        else:
            fan_in = shape[0] if name.endswith(".W") else _fan_in_of_bias(config, name)
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        arrays[name] = arr.astype(np.float32)
    return FieldParameters(config, arrays)


def _fan_in_of_bias(config: FieldConfig, name: str) -> int:
    return config.layer_shapes()[name[:-1] + "W"][0]


class CanonicalFieldNetwork:
    """Density/color network over canonical points plus the canonical blend-weight field.

    Density sees only the encoded canonical position; color additionally sees
    the (possibly perturbed) encoded view direction and a per-frame
    appearance code.
    """

    def __init__(self, params: FieldParameters):
        self.params = params
        self.config = params.config

    def bind(self, tape: ad.Tape | None = None, trainable=None) -> dict[str, Tensor]:
        """Parameters as tensors; names in ``trainable`` are watched on ``tape``."""
        out = {}
        for name, arr in self.params.arrays.items():
            if tape is not None and (trainable is None or name in trainable):
                out[name] = tape.watch(arr)
            else:
                out[name] = Tensor(arr)
        return out

    # -- density branch ----------------------------------------------------

    def density(self, p: dict[str, Tensor], x_canonical) -> tuple[Tensor, Tensor]:
        """Return ``(sigma, feature)`` for canonical points of shape (..., 3)."""
        cfg = self.config
        gx = encode(ad.as_tensor(x_canonical), cfg.pos_encoding)
        h = gx
        for i in range(cfg.density_depth):
            if i == cfg.skip_layer and i > 0:
                h = ad.concat([h, gx], axis=-1)
            h = ad.linear(h, p[f"density.{i}.W"], p[f"density.{i}.b"], relu=True)
        raw = ad.linear(h, p["sigma.W"], p["sigma.b"])
        sigma = ad.softplus(ad.reshape(raw, raw.shape[:-1]))
        feature = ad.linear(h, p["feature.W"], p["feature.b"])
        return sigma, feature

    # -- color branch ------------------------------------------------------

    def color(self, p: dict[str, Tensor], feature: Tensor, dir_input, frames) -> Tensor:
        """RGB in [0, 1]^3.

        ``dir_input`` is the already encoded view direction, ``frames`` an index
        array; both may have fewer leading dims than ``feature`` as long as they
        broadcast (e.g. one direction per ray for all its samples).
        """
        cfg = self.config
        f, dd = cfg.density_width, cfg.dir_dim
        W0 = p["color.0.W"] if cfg.color_depth > 0 else p["rgb.W"]
        code = ad.take(p["appearance_codes"], np.asarray(frames), axis=0)
        dir_input = ad.as_tensor(dir_input)
        ctx = ad.linear(dir_input, W0[f : f + dd]) + ad.linear(code, W0[f + dd :])
        if ctx.ndim < feature.ndim:
            pad = (1,) * (feature.ndim - ctx.ndim)
            ctx = ad.reshape(ctx, ctx.shape[:-1] + pad + ctx.shape[-1:])
        if cfg.color_depth == 0:
            return ad.sigmoid(ad.linear(feature, W0[:f], p["rgb.b"]) + ctx)
        h = ad.relu(ad.linear(feature, W0[:f], p["color.0.b"]) + ctx)
        for i in range(1, cfg.color_depth):
            h = ad.linear(h, p[f"color.{i}.W"], p[f"color.{i}.b"], relu=True)
        return ad.sigmoid(ad.linear(h, p["rgb.W"], p["rgb.b"]))

    def encode_direction(self, d):
        return encode(d, self.config.dir_encoding)

    # -- canonical blend weights --------------------------------------------

    def canonical_weights(self, p: dict[str, Tensor], x_canonical, frames, codes=None) -> Tensor:
        """Softmax over joints of the canonical blend-weight network.

        ``codes`` defaults to the per-frame ``blend_codes`` table.
        """
        cfg = self.config
        gx = encode(ad.as_tensor(x_canonical), cfg.pos_encoding)
        table = p["blend_codes"] if codes is None else ad.as_tensor(codes)
        code = ad.take(table, np.asarray(frames), axis=0)
        W0 = p["bw.0.W"] if cfg.weight_depth > 0 else p["bw.out.W"]
        e = cfg.pos_dim
        pre = ad.linear(gx, W0[:e]) + ad.linear(code, W0[e:])
        if cfg.weight_depth == 0:
            return ad.softmax(pre + p["bw.out.b"], axis=-1)
        h = ad.relu(pre + p["bw.0.b"])
        for i in range(1, cfg.weight_depth):
            h = ad.linear(h, p[f"bw.{i}.W"], p[f"bw.{i}.b"], relu=True)
        return ad.softmax(ad.linear(h, p["bw.out.W"], p["bw.out.b"]), axis=-1)

    # -- convenience ---------------------------------------------------------

    def eval_field(self, x_canonical, d_view, frame) -> tuple[np.ndarray, np.ndarray]:
        """Density and color at canonical points for unit view directions."""
        x = np.asarray(x_canonical, dtype=np.float64)
        d = np.asarray(d_view, dtype=np.float64)
        n = np.linalg.norm(d, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise ValueError("eval_field: view direction must be unit length")
        p = self.bind()
        sigma, feat = self.density(p, x)
        frames = np.broadcast_to(np.asarray(frame), x.shape[:-1])
        rgb = self.color(p, feat, self.encode_direction(np.broadcast_to(d, x.shape)), frames)
        return sigma.data, rgb.data


# -- checkpoint IO --------------------------------------------------------------


class CheckpointError(ValueError):
    pass


_CONFIG_FIELDS = [f.name for f in fields(FieldConfig)]


def save_checkpoint(params: FieldParameters, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the flat binary checkpoint.

    Layout (little-endian): magic, u32 version, u32 count + i64 config table,
    u32 tensor count, per tensor (u8 kind, u16 name length, name, u8 ndim,
    u32 dims), then float32 payloads in table order. Layers come first
    (kind 0), latent codes after (kind 1).
    """
    tensors = dict(params.arrays)
    if extra:
        tensors.update(extra)
    layers = [k for k in tensors if k not in _LATENT_NAMES and not k.endswith("_codes")]
    latents = [k for k in tensors if k not in layers]
    cfg = asdict(params.config)
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(_CONFIG_FIELDS))
    buf += struct.pack(f"<{len(_CONFIG_FIELDS)}q", *(int(cfg[k]) for k in _CONFIG_FIELDS))
    order = layers + latents
    buf += struct.pack("<I", len(order))
    for name in order:
        arr = tensors[name]
        raw = name.encode()
        buf += struct.pack("<BH", 0 if name in layers else 1, len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in order:
        buf += np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[FieldParameters, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, extra_tensors)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, UnicodeDecodeError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> tuple[FieldParameters, dict[str, np.ndarray]]:
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (ncfg,) = struct.unpack_from("<I", data, off)
    off += 4
    vals = struct.unpack_from(f"<{ncfg}q", data, off)
    off += 8 * ncfg
    kw = {}
    for name, v in zip(_CONFIG_FIELDS, vals):
        kw[name] = bool(v) if name == "include_input" else int(v)
    config = FieldConfig(**kw)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(count):
        _kind, nlen = struct.unpack_from("<BH", data, off)
        off += 3
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    known = set(config.layer_shapes())
    params = FieldParameters(config, {k: v for k, v in arrays.items() if k in known})
    extra = {k: v for k, v in arrays.items() if k not in known}
    return params, extra
