"""Small conv encoder over log-mel segments with an exact hand-written backward pass.

Layout of one sample through the network (channels-last throughout)::

    (T, F, 1) -> [conv kxk 'same' -> (instance norm) -> ReLU -> 2x2 mean-pool] * n_blocks
              -> mean over time -> flatten (F' * C) -> linear -> L2 normalise

Parameters live in a single flat vector ``theta``; named layers are views into it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError, FormatError, ShapeError, TapeError

MAGIC = b"MCVX1\n"
NORM_EPS = 1e-5
NORMALIZATIONS = ("none", "per_channel_instance")


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    embed_dim: int = 256
    channels: tuple = (8, 16, 32)
    kernel_sizes: tuple = (3, 3, 3)
    normalization: str = "none"
    # off by default; instance normalisation would cancel a per-channel bias exactly
    conv_bias: bool = False
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))

    def validate(self):
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.channels:
            raise ConfigError("encoder needs at least one conv block")
        if len(self.channels) != len(self.kernel_sizes):
            raise ConfigError(
                f"{len(self.channels)} channel widths but {len(self.kernel_sizes)} kernel sizes"
            )
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.pool < 1:
            raise ConfigError(f"pool must be >= 1, got {self.pool}")
        if self.n_mels // self.pool ** len(self.channels) < 1:
            raise ConfigError(f"n_mels={self.n_mels} too small for {len(self.channels)} pooling stages")

    def min_frames(self) -> int:
        return self.pool ** len(self.channels)

    def to_items(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ",".join(map(str, v)) if isinstance(v, tuple) else str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict):
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in ("channels", "kernel_sizes"):
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x.strip()) if raw.strip() else ()
            elif f.name == "conv_bias":
                kw[f.name] = _parse_bool(raw)
            elif f.name == "normalization":
                kw[f.name] = raw
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def param_layout(cfg: EncoderConfig):
    """Ordered list of (name, offset, shape). Works for any block count."""
    layout, off, c_in, width = [], 0, 1, cfg.n_mels
    for i, (c_out, k) in enumerate(zip(cfg.channels, cfg.kernel_sizes)):
        shapes = [(f"conv{i}.weight", (k, k, c_in, c_out))]
        if cfg.conv_bias:
            shapes.append((f"conv{i}.bias", (c_out,)))
        for name, shape in shapes:
            layout.append((name, off, shape))
            off += int(np.prod(shape))
        c_in, width = c_out, width // cfg.pool
    feat = c_in * width
    for name, shape in (("fc.weight", (feat, cfg.embed_dim)), ("fc.bias", (cfg.embed_dim,))):
        layout.append((name, off, shape))
        off += int(np.prod(shape))
    return layout


def num_params(cfg: EncoderConfig) -> int:
    name, off, shape = param_layout(cfg)[-1]
    return off + int(np.prod(shape))


class EncoderParams:
    """Flat parameter vector plus named views into it."""

    def __init__(self, cfg: EncoderConfig, theta: np.ndarray):
        theta = np.ascontiguousarray(theta)
        if theta.ndim != 1 or theta.shape[0] != num_params(cfg):
            raise ShapeError(f"theta must have {num_params(cfg)} entries, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ConfigError("theta contains NaN or Inf")
        self.cfg = cfg
        self.theta = theta

    @property
    def layout(self):
        return param_layout(self.cfg)

    def view(self, name: str) -> np.ndarray:
        for lname, off, shape in param_layout(self.cfg):
            if lname == name:
                return self.theta[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def views(self) -> dict:
        return {n: self.theta[o:o + int(np.prod(s))].reshape(s) for n, o, s in param_layout(self.cfg)}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.cfg, self.theta.copy())

    def fingerprint(self) -> bytes:
        return hashlib.blake2b(self.theta.tobytes(), digest_size=16).digest()


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> EncoderParams:
    cfg.validate()
    theta = np.zeros(num_params(cfg), dtype=dtype)
    p = EncoderParams(cfg, theta)
    for name, arr in p.views().items():
        if name.endswith(".weight"):
            if arr.ndim == 4:
                k1, k2, c_in, c_out = arr.shape
                fan_in, fan_out = c_in * k1 * k2, c_out * k1 * k2
            else:
                fan_in, fan_out = arr.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr[...] = rng.uniform(-a, a, size=arr.shape)
    return p


# -- layers ---------------------------------------------------------------

def _im2col(x, k):
    """x (B, T, F, C) -> columns (B*T*F, k*k*C) for a 'same' kxk convolution."""
    p = k // 2
    B, T, F, C = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # B,T,F,C,k,k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * T * F, k * k * C)


def _col2im(dcols, shape, k):
    B, T, F, C = shape
    p = k // 2
    d = dcols.reshape(B, T, F, k, k, C)
    dxp = np.zeros((B, T + 2 * p, F + 2 * p, C), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + T, j:j + F, :] += d[:, :, :, i, j, :]
    return dxp[:, p:p + T, p:p + F, :]


def _chan_mean(y):
    """Per-sample, per-channel mean over (T, F): (B, T, F, C) -> (B, 1, 1, C)."""
    B, T, F, C = y.shape
    ones = np.full(T * F, 1.0 / (T * F), dtype=y.dtype)
    return np.matmul(ones, y.reshape(B, T * F, C)).reshape(B, 1, 1, C)


def _pool_forward(x, s):
    B, T, F, C = x.shape
    To, Fo = T // s, F // s
    out = np.zeros((B, To, Fo, C), dtype=x.dtype)
    for i in range(s):
        for j in range(s):
            out += x[:, i:To * s:s, j:Fo * s:s, :]
    out *= 1.0 / (s * s)
    return out


def _pool_backward(dy, shape, s):
    To, Fo = dy.shape[1], dy.shape[2]
    dx = np.zeros(shape, dtype=dy.dtype)
    share = dy * (1.0 / (s * s))
    for i in range(s):
        for j in range(s):
            dx[:, i:To * s:s, j:Fo * s:s, :] = share
    return dx


class ForwardTape:
    """Activations recorded by one ``forward`` call, consumed by ``backward``."""

    def __init__(self, params: EncoderParams, batch_size: int):
        self.params = params
        self.fingerprint = params.fingerprint()
        self.batch_size = batch_size
        self.blocks = []
        self.feat = None
        self.z = None
        self.z_norm = None
        self.emb = None


def _as_batch(batch, cfg: EncoderConfig, dtype):
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([getattr(s, "values", s) for s in batch])
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != cfg.n_mels:
        raise ShapeError(f"expected batch of (T, {cfg.n_mels}) segments, got shape {x.shape}")
    if x.shape[1] < cfg.min_frames():
        raise ShapeError(f"expected at least {cfg.min_frames()} frames, got {x.shape[1]}")
    return np.ascontiguousarray(x, dtype=dtype)


def forward(params: EncoderParams, batch, want_tape: bool = False):
    """Embed a batch of equally-shaped log-mel segments.

    ``batch`` is a (B, T, n_mels) array or a sequence of LogMelSegment/arrays.
    Returns ``(embeddings (B, embed_dim), tape or None)``.
    """
    cfg = params.cfg
    dtype = params.theta.dtype
    x = _as_batch(batch, cfg, dtype)[..., None]
    w = params.views()
    tape = ForwardTape(params, x.shape[0]) if want_tape else None

    for i, k in enumerate(cfg.kernel_sizes):
        B, T, F, C = x.shape
        W = w[f"conv{i}.weight"]
        cols = _im2col(x, k)
        y = cols @ W.reshape(-1, W.shape[-1])
        if cfg.conv_bias:
            y += w[f"conv{i}.bias"]
        y = y.reshape(B, T, F, -1)
        rec = {"in_shape": x.shape, "cols": cols}
        if cfg.normalization == "per_channel_instance":
            y -= _chan_mean(y)
            inv = 1.0 / np.sqrt(_chan_mean(np.square(y)) + NORM_EPS)
            y *= inv
            rec["xhat"], rec["inv"] = y.copy() if want_tape else None, inv
        mask = y > 0
        a = np.maximum(y, 0, out=y)
        rec["mask"], rec["pre_pool"] = mask, a.shape
        x = _pool_forward(a, cfg.pool)
        if tape is not None:
            tape.blocks.append(rec)

    B, T, F, C = x.shape
    feat = x.mean(axis=1).reshape(B, F * C)
    z = feat @ w["fc.weight"] + w["fc.bias"]
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    emb = z / norm
    if tape is not None:
        tape.pooled_shape = x.shape
        tape.feat, tape.z, tape.z_norm, tape.emb = feat, z, norm, emb
    return emb, tape


def normalize_backward(grad_emb, emb, z_norm):
    """Gradient through e = z/|z|: (I - e e^T) g / |z|."""
    return (grad_emb - emb * (grad_emb * emb).sum(axis=1, keepdims=True)) / z_norm


def backward(tape: ForwardTape, grad_embeddings) -> np.ndarray:
    """Exact gradient of sum_i <grad_embeddings_i, emb_i> w.r.t. theta (flat, theta layout)."""
    if tape is None or tape.feat is None:
        raise TapeError("backward needs a tape recorded with want_tape=True")
    params = tape.params
    if params.fingerprint() != tape.fingerprint:
        raise TapeError("tape is stale: parameters changed since the forward pass")
    cfg = params.cfg
    g = np.asarray(grad_embeddings, dtype=params.theta.dtype)
    if g.shape != tape.emb.shape:
        raise TapeError(f"upstream gradient shape {g.shape} does not match embeddings {tape.emb.shape}")

    w = params.views()
    grad = np.zeros_like(params.theta)
    gv = EncoderParams.__new__(EncoderParams)
    gv.cfg, gv.theta = cfg, grad
    gw = gv.views()

    dz = normalize_backward(g, tape.emb, tape.z_norm)
    gw["fc.weight"][...] = tape.feat.T @ dz
    gw["fc.bias"][...] = dz.sum(axis=0)
    dfeat = dz @ w["fc.weight"].T
    B, T, F, C = tape.pooled_shape
    dx = np.broadcast_to(dfeat.reshape(B, 1, F, C) / T, (B, T, F, C))

    for i in reversed(range(len(cfg.channels))):
        rec, k = tape.blocks[i], cfg.kernel_sizes[i]
        da = _pool_backward(dx, rec["pre_pool"], cfg.pool)
        dy = np.multiply(da, rec["mask"], out=da)
        if cfg.normalization == "per_channel_instance":
            xhat, inv = rec["xhat"], rec["inv"]
            c_dot = _chan_mean(dy * xhat) * inv
            c_mean = _chan_mean(dy) * inv
            dy *= inv
            dy -= xhat * c_dot
            dy -= c_mean
        Bq, Tq, Fq, Cout = dy.shape
        dy2 = dy.reshape(-1, Cout)
        W = w[f"conv{i}.weight"]
        gw[f"conv{i}.weight"][...] = (rec["cols"].T @ dy2).reshape(W.shape)
        if cfg.conv_bias:
            gw[f"conv{i}.bias"][...] = dy2.sum(axis=0)
        if i > 0:
            dcols = dy2 @ W.reshape(-1, Cout).T
            dx = _col2im(dcols, rec["in_shape"], k)
    return grad


# -- parameter checkpoints ------------------------------------------------

def encode_header(items) -> bytes:
    lines = []
    for key, value in items:
        value = str(value)
        if "\n" in value or "=" in key:
            raise ConfigError(f"cannot serialise header entry {key!r}")
        lines.append(f"{key}={value}\n")
    return MAGIC + "".join(lines).encode("utf-8") + b"\n"


def decode_header(blob: bytes):
    """Return (ordered dict of header items, offset of the first payload byte)."""
    if not blob.startswith(MAGIC):
        raise FormatError("missing MCVX1 magic header", offset=0)
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise FormatError("unterminated config block", offset=len(blob))
    items = {}
    pos = len(MAGIC)
    for raw in blob[pos:end + 1].splitlines(keepends=True):
        try:
            line = raw.decode("utf-8").rstrip("\n")
        except UnicodeDecodeError as exc:
            raise FormatError("config block is not UTF-8", offset=pos + exc.start) from exc
        if line and "=" not in line:
            raise FormatError(f"bad config line {line!r}", offset=pos)
        if line:
            key, value = line.split("=", 1)
            items[key] = value
        pos += len(raw)
    return items, end + 2


def read_floats(blob: bytes, offset: int, count: int, what: str):
    need = offset + 4 * count
    if len(blob) < need:
        raise FormatError(f"truncated {what}: need {need} bytes, file has {len(blob)}", offset=len(blob))
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32), need


def save_params(path, params: EncoderParams) -> None:
    items = [(f"encoder.{k}", v) for k, v in params.cfg.to_items()]
    items.append(("num_params", num_params(params.cfg)))
    blob = encode_header(items) + params.theta.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def encoder_config_from_header(items: dict) -> EncoderConfig:
    sub = {k[len("encoder."):]: v for k, v in items.items() if k.startswith("encoder.")}
    try:
        return EncoderConfig.from_items(sub)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad encoder config in header: {exc}") from exc


def check_encoder_config(found: EncoderConfig, expected: EncoderConfig) -> None:
    for f in fields(EncoderConfig):
        a, b = getattr(found, f.name), getattr(expected, f.name)
        if a != b:
            raise ConfigError(f"encoder config mismatch in field '{f.name}': file has {a!r}, expected {b!r}")


def load_params(path, expected: EncoderConfig | None = None) -> EncoderParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    items, off = decode_header(blob)
    cfg = encoder_config_from_header(items)
    if expected is not None:
        check_encoder_config(cfg, expected)
    theta, _ = read_floats(blob, off, num_params(cfg), "theta block")
    return EncoderParams(cfg, theta)
