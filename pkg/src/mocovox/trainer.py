"""Training loop, run configuration, SGD and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment as aug
from . import contrast
from . import encoder as enc
from .dsp import SEGMENT_SECONDS, FeatureConfig, Waveform, chop_segment, log_mel_batch, read_wav
from .errors import ConfigError, ContractError, DataError, DataIOError, FormatError, NumericError, ShapeError
from .seeding import pool_map, rng_for
from .synthdata import Manifest

log = logging.getLogger(__name__)

PRETEXTS = ("instance_discrimination", "prototypical", "angular_prototypical")
METRICS_HEADER = "step,loss,pos_logit_mean,queue_filled,lr\n"
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 64
    epochs: int = 1
    max_steps: int = 0  # 0: no cap beyond epochs
    queue_size: int = 1024
    m: float = 0.999
    tau: float = 0.07
    pretext: str = "instance_discrimination"
    seed: int = 0
    segment_seconds: float = SEGMENT_SECONDS
    dtype: str = "float32"
    augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.queue_size % self.batch_size:
            raise ConfigError(
                f"queue_size {self.queue_size} is not a multiple of batch_size {self.batch_size}"
            )
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.sgd_momentum < 1:
            raise ConfigError(f"sgd_momentum must lie in [0, 1), got {self.sgd_momentum}")
        if not 0 <= self.m <= 1:
            raise ConfigError(f"m must lie in [0, 1], got {self.m}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.pretext not in PRETEXTS:
            raise ConfigError(f"pretext must be one of {PRETEXTS}, got {self.pretext!r}")
        if self.lr_schedule != "constant":
            raise ConfigError(f"only the constant lr schedule is implemented, got {self.lr_schedule!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("epochs must be >= 1 and max_steps >= 0")
        if self.encoder.n_mels != self.features.n_mels:
            raise ConfigError(
                f"encoder.n_mels={self.encoder.n_mels} differs from features.n_mels={self.features.n_mels}"
            )
        self.encoder.validate()

    # -- key=value serialisation -----------------------------------------

    def to_items(self):
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _NESTED:
                items += [(f"{f.name}.{k}", s) for k, s in _nested_items(v)]
            else:
                items.append((f.name, _fmt(v)))
        return items

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_items())

    @classmethod
    def from_items(cls, items: dict) -> "TrainConfig":
        top, nested = {}, {name: {} for name in _NESTED}
        known = {f.name for f in fields(cls)}
        for key, raw in items.items():
            head, _, rest = key.partition(".")
            if rest and head in _NESTED:
                nested[head][rest] = raw
            elif not rest and head in known and head not in _NESTED:
                top[head] = raw
            else:
                raise ConfigError(f"unknown config key {key!r}")
        default = cls()
        kw = {name: _coerce(raw, type(getattr(default, name)), name) for name, raw in top.items()}
        for name, sub in nested.items():
            if sub:
                kw[name] = _build_nested(_NESTED[name], sub, name)
        return cls(**kw)


_NESTED = {"augment": aug.AugmentPolicy, "encoder": enc.EncoderConfig, "features": FeatureConfig}


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _nested_items(obj):
    return [(f.name, _fmt(getattr(obj, f.name))) for f in fields(obj)]


def _coerce(raw: str, typ, name: str):
    raw = raw.strip()
    try:
        if typ is bool:
            return enc._parse_bool(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _build_nested(cls, sub: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    default = cls()
    kw = {}
    for key, raw in sub.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}.{key!r}")
        typ = type(getattr(default, key))
        if typ is tuple and key in ("channels", "kernel_sizes"):
            try:
                kw[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {prefix}.{key}: {raw!r}") from exc
        else:
            kw[key] = _coerce(raw, typ, f"{prefix}.{key}")
    return cls(**kw)


def parse_config_text(text: str) -> TrainConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return TrainConfig.from_items(items)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


# -- optimiser ------------------------------------------------------------

@dataclass
class OptState:
    velocity: np.ndarray


def sgd_step(theta: np.ndarray, grad: np.ndarray, opt: OptState, cfg: TrainConfig) -> None:
    """SGD with momentum and L2 weight decay, applied in place."""
    if theta.shape != grad.shape or opt.velocity.shape != theta.shape:
        raise ShapeError(
            f"length mismatch: theta {theta.shape}, grad {grad.shape}, velocity {opt.velocity.shape}"
        )
    g = grad + cfg.weight_decay * theta
    opt.velocity *= cfg.sgd_momentum
    opt.velocity += g
    theta -= cfg.lr * opt.velocity


# -- data -----------------------------------------------------------------

def load_waves(manifest: Manifest, threads=None) -> dict:
    def load(rec):
        return rec.utterance_id, read_wav(manifest.root / rec.path)

    return dict(pool_map(load, manifest.records, threads))


@dataclass
class SegmentPair:
    utterance_id: str
    first: Waveform
    second: Waveform
    starts: tuple  # sample offsets of (first, second)


def sample_pair_batch(waves: dict, batch_size: int, duration: float, rng: np.random.Generator,
                      hop: int = 1):
    """B distinct utterances, two independently placed segments from each.

    Start offsets are uniform over multiples of ``hop`` samples; the two segments may overlap.
    """
    ids = sorted(waves)
    if not ids:
        raise DataError("dev split is empty")
    if batch_size > len(ids):
        raise ConfigError(f"batch of {batch_size} distinct utterances but only {len(ids)} available")
    chosen = rng.choice(len(ids), size=batch_size, replace=False)
    out = []
    for i in chosen:
        uid = ids[i]
        w = waves[uid]
        n = int(round(duration * w.sample_rate))
        if len(w) < n:
            raise DataError(f"utterance {uid} ({w.duration:.2f} s) is shorter than {duration} s")
        a, b = rng.integers(0, (len(w) - n) // hop + 1, size=2) * hop
        out.append(SegmentPair(uid, chop_segment(w, a, duration), chop_segment(w, b, duration),
                               (int(a), int(b))))
    return out


class FeatureCache:
    """Whole-utterance log-mels; a hop-aligned segment's features are a frame slice."""

    def __init__(self, waves: dict, feat: FeatureConfig, dtype=np.float32):
        if feat.normalize:
            raise ConfigError("feature caching is incompatible with per-segment normalisation")
        self.feat = feat
        self.values = {uid: log_mel_batch(w.samples, feat).astype(dtype) for uid, w in waves.items()}

    def segment(self, uid: str, start: int, n_samples: int) -> np.ndarray:
        hop = self.feat.hop_samples
        if start % hop:
            raise ConfigError(f"segment start {start} is not a multiple of the hop ({hop})")
        first = start // hop
        return self.values[uid][first:first + self.feat.n_frames(n_samples)]


def pair_features(pairs, cfg: TrainConfig, step: int, epoch: int, bank=None, cache=None):
    """Augment (per policy, per-pair seeds) then extract log-mels. Returns (Xq, Xk)."""
    policy = cfg.augment
    dtype = DTYPES[cfg.dtype]
    out = [[None] * len(pairs), [None] * len(pairs)]
    todo = []
    for i, pair in enumerate(pairs):
        segs = [pair.first, pair.second]
        touched = ()
        if policy.mode != "none":
            rng = rng_for(cfg.seed, pair.utterance_id, "pair", epoch, step)
            decision = aug.sample_decision(policy, rng)
            segs = list(aug.augment_pair(segs[0], segs[1], decision, rng, bank))
            touched = decision.apply_to
        for side in (0, 1):
            if cache is not None and side not in touched:
                out[side][i] = cache.segment(pair.utterance_id, pair.starts[side], len(segs[side]))
            else:
                todo.append((side, i, segs[side].samples))
    if todo:
        feats = log_mel_batch(np.stack([t[2] for t in todo]), cfg.features).astype(dtype)
        for (side, i, _), f in zip(todo, feats):
            out[side][i] = f
    return np.stack(out[0]), np.stack(out[1])


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: TrainConfig
    theta_q: enc.EncoderParams
    theta_k: enc.EncoderParams
    queue: contrast.DictionaryQueue
    ap_w: float = 10.0
    ap_b: float = -5.0
    step: int = 0

    def state(self) -> contrast.MoCoState:
        return contrast.MoCoState(self.theta_q, self.theta_k, self.queue, self.cfg.m, self.cfg.tau,
                                  self.ap_w, self.ap_b)


def save_checkpoint(path, theta_q, theta_k, queue, cfg: TrainConfig, *, ap_w=10.0, ap_b=-5.0,
                    step=0) -> None:
    items = cfg.to_items() + [
        ("num_params", enc.num_params(cfg.encoder)),
        ("theta_blocks", 2),
        ("queue.capacity", queue.capacity),
        ("queue.dim", queue.dim),
        ("queue.ptr", queue.ptr),
        ("queue.filled", queue.filled),
        ("state.ap_w", repr(float(ap_w))),
        ("state.ap_b", repr(float(ap_b))),
        ("state.step", step),
    ]
    blob = (enc.encode_header(items)
            + theta_q.theta.astype("<f4").tobytes()
            + theta_k.theta.astype("<f4").tobytes()
            + queue.buffer.astype("<f4").tobytes())
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


_STATE_KEYS = ("num_params", "theta_blocks", "queue.capacity", "queue.dim", "queue.ptr",
               "queue.filled", "state.ap_w", "state.ap_b", "state.step")


def load_checkpoint(path, expected_encoder: enc.EncoderConfig | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    items, off = enc.decode_header(blob)
    missing = [k for k in _STATE_KEYS if k not in items]
    if missing:
        raise FormatError(f"checkpoint header lacks {missing}")
    cfg_items = {k: v for k, v in items.items() if k not in _STATE_KEYS}
    try:
        cfg = TrainConfig.from_items(cfg_items)
        capacity, dim = int(items["queue.capacity"]), int(items["queue.dim"])
        ptr, filled = int(items["queue.ptr"]), int(items["queue.filled"])
        ap_w, ap_b = float(items["state.ap_w"]), float(items["state.ap_b"])
        step = int(items["state.step"])
        n = int(items["num_params"])
    except ConfigError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"bad checkpoint header value: {exc}") from exc
    if expected_encoder is not None:
        enc.check_encoder_config(cfg.encoder, expected_encoder)
    if n != enc.num_params(cfg.encoder) or items["theta_blocks"] != "2":
        raise FormatError("parameter count in header disagrees with the encoder config")
    if dim != cfg.encoder.embed_dim or not (0 <= ptr < capacity and 0 <= filled <= capacity):
        raise FormatError("inconsistent queue geometry in header")
    tq, off = enc.read_floats(blob, off, n, "theta_q block")
    tk, off = enc.read_floats(blob, off, n, "theta_k block")
    buf, off = enc.read_floats(blob, off, capacity * dim, "queue block")
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after queue block", offset=off)
    queue = contrast.DictionaryQueue(capacity, dim, dtype=np.float32)
    queue.buffer[...] = buf.reshape(capacity, dim)
    queue.ptr, queue.filled = ptr, filled
    return Checkpoint(cfg, enc.EncoderParams(cfg.encoder, tq), enc.EncoderParams(cfg.encoder, tk),
                      queue, ap_w, ap_b, step)


# -- training loop --------------------------------------------------------

@dataclass
class TrainResult:
    state: contrast.MoCoState
    steps: int
    metrics_path: Path
    checkpoint_path: Path
    cfg: TrainConfig


def initial_params(cfg: TrainConfig) -> enc.EncoderParams:
    """The seeded starting point of theta_q (also the untrained baseline encoder)."""
    return enc.init_params(cfg.encoder, rng_for(cfg.seed, "init"), DTYPES[cfg.dtype])


def steps_per_epoch(n_utts: int, batch_size: int) -> int:
    return math.ceil(n_utts / batch_size)


def train(cfg: TrainConfig, manifest: Manifest, out_dir, waves: dict | None = None,
          progress=None) -> TrainResult:
    """Train query/key encoders on the manifest's dev split; write metrics and checkpoints."""
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write to {out_dir}: {exc}") from exc
    dev = manifest.split("dev")
    if waves is None:
        waves = load_waves(dev)
    else:
        waves = {r.utterance_id: waves[r.utterance_id] for r in dev}
    if not waves:
        raise DataError("manifest has no dev utterances")

    dtype = DTYPES[cfg.dtype]
    theta_q = initial_params(cfg)
    state = contrast.MoCoState.create(theta_q, cfg.queue_size, cfg.batch_size, cfg.m, cfg.tau)
    opt = OptState(np.zeros_like(theta_q.theta))
    bank = aug.NoiseBank(cfg.seed) if cfg.augment.mode != "none" else None

    def optimizer(theta, grad):
        sgd_step(theta, grad, opt, cfg)

    spe = steps_per_epoch(len(waves), cfg.batch_size)
    total = cfg.epochs * spe
    if cfg.max_steps:
        total = min(total, cfg.max_steps)

    hop = cfg.features.hop_samples
    cache = None if cfg.features.normalize else FeatureCache(waves, cfg.features, dtype)
    pairs = sample_pair_batch(waves, cfg.batch_size, cfg.segment_seconds, rng_for(cfg.seed, "prime"), hop)
    _, xk = pair_features(pairs, cfg, 0, 0, bank, cache)
    contrast.prime_queue(state, xk)

    metrics_path = out_dir / "metrics.csv"
    final_path = out_dir / "checkpoint.mcvx"
    try:
        fh = open(metrics_path, "w", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {metrics_path}: {exc}") from exc
    with fh:
        fh.write(METRICS_HEADER)
        for step in range(1, total + 1):
            epoch = (step - 1) // spe
            pairs = sample_pair_batch(waves, cfg.batch_size, cfg.segment_seconds,
                                      rng_for(cfg.seed, "batch", step), hop)
            xq, xk = pair_features(pairs, cfg, step, epoch, bank, cache)
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    if cfg.pretext == "instance_discrimination":
                        met = contrast.moco_step(state, xq, xk, optimizer)
                    else:
                        met = contrast.pretext_step(state, xq, xk, optimizer, cfg.pretext, cfg.lr)
                except ContractError as exc:
                    # a finite but blown-up encoder can emit all-zero (dead ReLU) embeddings
                    raise NumericError(f"training diverged at step {step}: {exc}", step) from exc
                except (ArithmeticError, ValueError) as exc:
                    if np.all(np.isfinite(state.theta_q.theta)):
                        raise
                    raise NumericError(f"training diverged at step {step}: {exc}", step) from exc
            if not (math.isfinite(met.loss) and np.all(np.isfinite(state.theta_q.theta))):
                raise NumericError(f"non-finite loss or parameters at step {step}", step)
            fh.write(f"{step},{met.loss!r},{met.pos_logit_mean!r},{met.queue_filled},{cfg.lr!r}\n")
            if progress is not None:
                progress(step, total, met)
            if step % spe == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch{step // spe:03d}.mcvx", state.theta_q,
                                state.theta_k, state.queue, cfg, ap_w=state.ap_w, ap_b=state.ap_b, step=step)
    save_checkpoint(final_path, state.theta_q, state.theta_k, state.queue, cfg,
                    ap_w=state.ap_w, ap_b=state.ap_b, step=total)
    return TrainResult(state, total, metrics_path, final_path, cfg)
