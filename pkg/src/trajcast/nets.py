"""Network building blocks: residual 3-D conv encoder, small MLPs,
parameter initialization and binary serialization.

Convolutions are phrased as gather + matmul (im2col) so they run through
the same primitive set as everything else; activations are kept in a
channels-last layout, flattened per tape node.  Padding is handled by
appending one zero "sentinel" cell to the flattened activation and pointing
out-of-bounds taps at it — no scatter needed on the forward pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class NetError(ValueError):
    """Malformed spec, parameter bundle, or serialized file."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes, first to last; ELU between all but the final layer."""
    sizes: tuple

    def __post_init__(self):
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise NetError(f"bad MLP sizes {self.sizes}")


@dataclass(frozen=True)
class ConvEncoderSpec:
    """Residual conv encoder over a cubic single-channel volume.

    ``channels`` gives the width of each residual block; the first block
    keeps resolution, every later block halves it (stride 2).  The final
    feature map is flattened and projected to ``latent`` dimensions.
    """
    side: int = 8
    channels: tuple = (4, 8, 16)
    latent: int = 16

    def __post_init__(self):
        if len(self.channels) < 1:
            raise NetError("need at least one residual block")
        if self.side < 1 or self.latent < 1:
            raise NetError(f"bad encoder geometry: side {self.side}, "
                           f"latent {self.latent}")

    def block_sides(self):
        sides = [self.side]
        for _ in self.channels[1:]:
            sides.append((sides[-1] + 2 - 3) // 2 + 1)
        return sides


# ---------------------------------------------------------------------------
# im2col machinery
# ---------------------------------------------------------------------------

_IDX_CACHE: dict = {}


def _im2col_index(side: int, c_in: int, stride: int, batch: int, k: int):
    """Gather index for a k^3 conv, channels-last flat layout.

    Returns ``(idx, out_side)`` where ``idx`` has shape
    ``(batch * out_side^3, k^3 * c_in)``; out-of-bounds taps point at the
    sentinel slot ``batch * side^3 * c_in`` (a zero appended by the caller).
    """
    key = (side, c_in, stride, batch, k)
    hit = _IDX_CACHE.get(key)
    if hit is not None:
        return hit
    pad = 1 if k == 3 else 0
    out_side = (side + 2 * pad - k) // stride + 1
    o = np.arange(out_side) * stride - pad
    tap = np.arange(k)
    ax = (o[:, None] + tap[None, :])                   # (out_side, k)
    ok_ax = (ax >= 0) & (ax < side)
    # spatial linear index per (qx,qy,qz,tx,ty,tz), -1 where any axis clips
    X = ax[:, None, None, :, None, None]
    Y = ax[None, :, None, None, :, None]
    Z = ax[None, None, :, None, None, :]
    valid = (ok_ax[:, None, None, :, None, None]
             & ok_ax[None, :, None, None, :, None]
             & ok_ax[None, None, :, None, None, :])
    sp = (X * side + Y) * side + Z                     # garbage where invalid
    n_out = out_side ** 3
    sp = np.where(valid, sp, -1).reshape(n_out, k ** 3)
    sentinel = batch * side ** 3 * c_in
    c = np.arange(c_in)
    b_off = (np.arange(batch) * side ** 3)[:, None, None, None]
    full = (b_off + sp[None, :, :, None]) * c_in + c[None, None, None, :]
    full = np.where(sp[None, :, :, None] < 0, sentinel, full)
    idx = full.reshape(batch * n_out, k ** 3 * c_in)
    _IDX_CACHE[key] = (idx, out_side)
    return idx, out_side


def _conv(x, w, b, side, c_in, stride, batch, k):
    """x: channels-last rows (batch*side^3, c_in) -> (batch*out^3, c_out)."""
    idx, out_side = _im2col_index(side, c_in, stride, batch, k)
    flat = ad.reshape(x, (batch * side ** 3 * c_in,))
    flat = ad.concat([flat, np.zeros(1)])
    cols = ad.take(flat, idx)
    return ad.add_bias(ad.matmul(cols, w), b), out_side


def conv_encoder(params, spec: ConvEncoderSpec, vol, prefix: str = "vol."):
    """Run the residual encoder over a (batch, side^3) volume block.

    Block layout: conv3 -> ELU -> conv3 on the main path, a strided 1x1x1
    projection on the skip whenever channels or resolution change, then
    ``ELU(main + skip)``.  Output is the (batch, latent) projection of the
    flattened last feature map.
    """
    n = vol.shape[0]
    side = spec.side
    if vol.shape != (n, side ** 3):
        raise NetError(f"volume block shape {vol.shape} != (n, {side ** 3})")
    x, c_in = ad.reshape(vol, (n * side ** 3, 1)), 1
    for i, c_out in enumerate(spec.channels):
        stride = 1 if i == 0 else 2
        p = f"{prefix}b{i}."
        h, out_side = _conv(x, params[p + "c1.W"], params[p + "c1.b"],
                            side, c_in, stride, n, k=3)
        h, _ = _conv(ad.elu(h), params[p + "c2.W"], params[p + "c2.b"],
                     out_side, c_out, 1, n, k=3)
        if stride == 1 and c_in == c_out:
            skip = x
        else:
            skip, _ = _conv(x, params[p + "skip.W"], params[p + "skip.b"],
                            side, c_in, stride, n, k=1)
        x = ad.elu(ad.add(h, skip))
        side, c_in = out_side, c_out
    feat = ad.reshape(x, (n, side ** 3 * c_in))
    return ad.add_bias(ad.matmul(feat, params[prefix + "proj.W"]),
                       params[prefix + "proj.b"])


def mlp(params, prefix: str, x):
    """Apply the MLP stored under ``prefix`` (W0/b0, W1/b1, ...)."""
    h, i = x, 0
    while f"{prefix}W{i + 1}" in params:
        h = ad.elu(ad.add_bias(ad.matmul(h, params[f"{prefix}W{i}"]),
                               params[f"{prefix}b{i}"]))
        i += 1
    return ad.add_bias(ad.matmul(h, params[f"{prefix}W{i}"]),
                       params[f"{prefix}b{i}"])


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(rng, prefix: str, spec: MlpSpec, out: dict):
    for i, (a, b) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        out[f"{prefix}W{i}"] = _glorot(rng, a, b, (a, b))
        out[f"{prefix}b{i}"] = np.zeros(b)
    return out


def init_conv_encoder(rng, prefix: str, spec: ConvEncoderSpec, out: dict):
    c_in = 1
    for i, c_out in enumerate(spec.channels):
        p = f"{prefix}b{i}."
        out[p + "c1.W"] = _glorot(rng, 27 * c_in, c_out, (27 * c_in, c_out))
        out[p + "c1.b"] = np.zeros(c_out)
        out[p + "c2.W"] = _glorot(rng, 27 * c_out, c_out, (27 * c_out, c_out))
        out[p + "c2.b"] = np.zeros(c_out)
        if i > 0 or c_in != c_out:
            out[p + "skip.W"] = _glorot(rng, c_in, c_out, (c_in, c_out))
            out[p + "skip.b"] = np.zeros(c_out)
        c_in = c_out
    flat = spec.block_sides()[-1] ** 3 * spec.channels[-1]
    out[prefix + "proj.W"] = _glorot(rng, flat, spec.latent, (flat, spec.latent))
    out[prefix + "proj.b"] = np.zeros(spec.latent)
    return out


# ---------------------------------------------------------------------------
# parameter bundle + binary format
# ---------------------------------------------------------------------------

MAGIC = b"TNSDE1"


@dataclass
class ParamBundle:
    """Named float64 tensors plus a JSON-serializable metadata echo.

    ``meta`` carries whatever configuration produced the parameters
    (model shape, arm names, training settings) so a saved file is
    self-describing; round-trips must be bit-identical.
    """
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def bind(self, tape: ad.Tape) -> dict:
        """Register every tensor as a trainable leaf on ``tape``."""
        return {k: tape.leaf(v, param=True) for k, v in self.tensors.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def save_params(path, bundle: ParamBundle) -> None:
    """Write a bundle: magic, length-prefixed JSON metadata, named tensors.

    Per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
    then the raw float64 little-endian buffer.
    """
    blob = [MAGIC]
    meta = json.dumps(bundle.meta, sort_keys=True).encode("utf-8")
    blob.append(struct.pack("<I", len(meta)))
    blob.append(meta)
    blob.append(struct.pack("<I", len(bundle.tensors)))
    for name in sorted(bundle.tensors):
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
        arr = np.asarray(bundle.tensors[name], dtype="<f8", order="C")
        nb = name.encode("utf-8")
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<B", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_params(path) -> ParamBundle:
    """Read a bundle written by :func:`save_params`.

    Raises
    ------
    NetError
        On a foreign magic prefix, or on truncation (the message names the
        byte offset where the file ran out).
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise NetError(f"not a parameter file: magic {buf[:len(MAGIC)]!r} "
                       f"(expected {MAGIC!r})")
    pos = len(MAGIC)

    def pull(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise NetError(f"truncated parameter file: needed {n} bytes for "
                           f"{what} at byte offset {pos}, have {len(buf) - pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    meta_len, = struct.unpack("<I", pull(4, "metadata length"))
    meta = json.loads(pull(meta_len, "metadata").decode("utf-8"))
    n_tensors, = struct.unpack("<I", pull(4, "tensor count"))
    tensors = {}
    for _ in range(n_tensors):
        name_len, = struct.unpack("<H", pull(2, "name length"))
        name = pull(name_len, "tensor name").decode("utf-8")
        ndim, = struct.unpack("<B", pull(1, f"rank of {name}"))
        shape = struct.unpack(f"<{ndim}I", pull(4 * ndim, f"shape of {name}"))
        count = int(np.prod(shape)) if ndim else 1
        raw = pull(8 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise NetError(f"trailing garbage: {len(buf) - pos} bytes past "
                       f"offset {pos}")
    return ParamBundle(tensors=tensors, meta=meta)
