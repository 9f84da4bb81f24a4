"""Verification protocol: multi-segment utterance embeddings, trial scoring, EER, score histograms."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .contrast import _check_unit
from .dsp import SEGMENT_SECONDS, FeatureConfig, Waveform, log_mel_batch, read_wav
from .errors import DataError, DataIOError, FormatError
from .seeding import derive_seed, pool_map
from .synthdata import Manifest, TrialPair

N_SEGMENTS = 10
EVAL_SEED = 0


@dataclass(frozen=True)
class ScoreRecord:
    trial: TrialPair
    score: float


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_pos: int
    n_neg: int

    def summary(self) -> str:
        return f"EER={100 * self.eer:.2f}% threshold={self.threshold:.6g}"


def embed_utterance(params: enc.EncoderParams, utterance: Waveform, feat: FeatureConfig,
                    rng: np.random.Generator, n_seg: int = N_SEGMENTS,
                    duration: float = SEGMENT_SECONDS) -> np.ndarray:
    """Embed ``n_seg`` uniformly placed fixed-length segments; returns (n_seg, embed_dim)."""
    n = int(round(duration * utterance.sample_rate))
    if len(utterance) < n:
        raise DataError(f"utterance of {utterance.duration:.2f} s is shorter than {duration} s")
    starts = rng.integers(0, len(utterance) - n + 1, size=n_seg)
    segs = np.stack([utterance.samples[s:s + n] for s in starts])
    x = log_mel_batch(segs, feat).astype(params.theta.dtype, copy=False)
    emb, _ = enc.forward(params, x)
    return emb


def utterance_score(emb_a, emb_b) -> float:
    """Mean cosine similarity over all segment pairs of two unit-norm embedding sets."""
    emb_a, emb_b = np.asarray(emb_a, dtype=np.float64), np.asarray(emb_b, dtype=np.float64)
    _check_unit("emb_a", emb_a)
    _check_unit("emb_b", emb_b)
    return float((emb_a @ emb_b.T).mean())


def compute_eer(records) -> EerResult:
    """EER with the rule 'accept if score >= t', swept over every distinct score.

    The chosen threshold minimises |FAR - FRR| (lowest threshold on ties) and the
    reported EER is the mean of FAR and FRR there.
    """
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.trial.label for r in records])
    return _eer_from_arrays(scores[labels == 1], scores[labels == 0])


def _eer_from_arrays(pos, neg) -> EerResult:
    n_pos, n_neg = len(pos), len(neg)
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"EER needs both classes; got {n_pos} positive and {n_neg} negative trials")
    pos, neg = np.sort(pos), np.sort(neg)
    cand = np.unique(np.concatenate([pos, neg]))
    miss = np.searchsorted(pos, cand, side="left")          # positives below t
    fa = n_neg - np.searchsorted(neg, cand, side="left")    # negatives at or above t
    # integer cross-multiplication keeps tie-breaking exact
    gap = np.abs(fa.astype(np.int64) * n_pos - miss.astype(np.int64) * n_neg)
    i = int(np.argmin(gap))
    # (FAR + FRR) / 2 as one correctly rounded division
    eer = (int(fa[i]) * n_pos + int(miss[i]) * n_neg) / (2 * n_pos * n_neg)
    return EerResult(float(eer), float(cand[i]), n_pos, n_neg)


def score_histogram(records, n_bins: int = 50):
    """Rows ``(bin_lo, bin_hi, pos_count, neg_count)`` over uniform bins spanning the scores."""
    if not records:
        raise DataError("no score records to histogram")
    if n_bins < 1:
        raise DataError(f"n_bins must be >= 1, got {n_bins}")
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.trial.label for r in records])
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        eps = max(abs(lo), 1.0) * 1e-9
        return [(lo, lo + eps, int((labels == 1).sum()), int((labels == 0).sum()))]
    edges = np.linspace(lo, hi, n_bins + 1)
    pos, _ = np.histogram(scores[labels == 1], bins=edges)
    neg, _ = np.histogram(scores[labels == 0], bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(pos[i]), int(neg[i])) for i in range(n_bins)]


def utterance_rng(utterance_id: str, seed: int = EVAL_SEED) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, "eval", utterance_id))


def embed_all(params, manifest: Manifest, utterance_ids, feat: FeatureConfig, n_seg=N_SEGMENTS,
              seed=EVAL_SEED, waves=None, embed_fn=embed_utterance) -> dict:
    """Embed each distinct utterance once."""
    ids = sorted(set(utterance_ids))

    def one(uid):
        wav = waves[uid] if waves is not None else read_wav(manifest.path_of(uid))
        return uid, embed_fn(params, wav, feat, utterance_rng(uid, seed), n_seg)

    return dict(pool_map(one, ids))


def evaluate(params: enc.EncoderParams, manifest: Manifest, trials, feat: FeatureConfig,
             out_dir=None, n_seg: int = N_SEGMENTS, seed: int = EVAL_SEED, waves=None,
             embed_fn=embed_utterance):
    """Score every trial with the query encoder and compute the EER.

    Returns ``(EerResult, records)``; writes ``scores.csv`` when ``out_dir`` is given.
    """
    for t in trials:
        for uid in (t.utterance_a, t.utterance_b):
            try:
                manifest[uid]
            except KeyError:
                raise DataError(f"trial utterance {uid!r} is not in the manifest") from None
    ids = [u for t in trials for u in (t.utterance_a, t.utterance_b)]
    embs = embed_all(params, manifest, ids, feat, n_seg, seed, waves, embed_fn)
    records = [ScoreRecord(t, utterance_score(embs[t.utterance_a], embs[t.utterance_b])) for t in trials]
    result = compute_eer(records)
    if out_dir is not None:
        write_scores(Path(out_dir) / "scores.csv", records)
    return result, records


def write_scores(path, records) -> None:
    lines = ["label,utt_a,utt_b,score\n"]
    lines += [f"{r.trial.label},{r.trial.utterance_a},{r.trial.utterance_b},{r.score!r}\n" for r in records]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_scores(path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if lineno == 1 and line.startswith("label,"):
            continue
        if not line.strip():
            continue
        cols = line.split(",")
        try:
            records.append(ScoreRecord(TrialPair(int(cols[0]), cols[1], cols[2]), float(cols[3])))
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: expected 'label,utt_a,utt_b,score'") from exc
    return records


def write_histogram(path, rows) -> None:
    lines = ["bin_lo,bin_hi,pos_count,neg_count\n"]
    lines += [f"{lo!r},{hi!r},{p},{n}\n" for lo, hi, p, n in rows]
    try:
        Path(path).write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
