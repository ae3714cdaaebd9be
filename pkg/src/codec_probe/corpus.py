"""Token corpus format: JSONL loading/validation, stream alignment to a
common frame rate, and discretization of continuous attributes.

One utterance per line:

    {"id": str,
     "codec": {"name": str, "frame_rate_hz": num, "num_scales": int,
               "cardinality": int, "tokens": [[int, ...], ...]},
     "attributes": {
        "content":  {"frame_rate_hz": num, "cardinality": int, "tokens": [int, ...]},
        "pitch":    {"frame_rate_hz": num, "values_hz": [num, ...]},
        "loudness": {"frame_rate_hz": num, "values_db": [num, ...]},
        "speaker":  {"id": str, "embedding": [num, ...] | null}}}

Pitch uses 0.0 for unvoiced frames; voiced values must lie in (20, 2000) Hz.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class CorpusError(ValueError):
    """A corpus file or record violates the format contract."""


@dataclass(eq=False)
class CodecStream:
    name: str
    frame_rate_hz: float
    num_scales: int
    cardinality: int
    tokens: np.ndarray  # (num_scales, T) int64

    @property
    def length(self):
        return self.tokens.shape[1]


@dataclass(eq=False)
class AttributeStreams:
    content_tokens: np.ndarray  # (Tc,) int64
    content_rate_hz: float
    content_cardinality: int
    pitch_hz: np.ndarray  # (Tp,) float64, 0.0 = unvoiced
    pitch_rate_hz: float
    loudness_db: np.ndarray  # (Tl,) float64
    loudness_rate_hz: float
    speaker_id: str
    speaker_embedding: np.ndarray | None = None


@dataclass(eq=False)
class Utterance:
    id: str
    codec: CodecStream
    attributes: AttributeStreams


@dataclass(eq=False)
class AlignedUtterance:
    """All streams resampled to one frame rate and a common length."""

    id: str
    frame_rate_hz: float
    codec_tokens: np.ndarray  # (M, T_a)
    content: np.ndarray  # (T_a,)
    pitch_hz: np.ndarray  # (T_a,)
    loudness_db: np.ndarray  # (T_a,)
    speaker_id: str
    speaker_embedding: np.ndarray | None = None

    @property
    def length(self):
        return self.codec_tokens.shape[1]


@dataclass(frozen=True)
class BinningConfig:
    """Attribute tokenization: log-scale pitch bins (bin 0 reserved for
    unvoiced), linear loudness bins."""

    pitch_bins: int = 64
    pitch_range_hz: tuple = (50.0, 500.0)
    loudness_bins: int = 32
    loudness_range_db: tuple = (-60.0, 0.0)

    def __post_init__(self):
        if self.pitch_bins < 2 or self.loudness_bins < 2:
            raise CorpusError("bin counts must be at least 2")
        if self.pitch_range_hz[0] >= self.pitch_range_hz[1]:
            raise CorpusError("pitch_range_hz must satisfy low < high")
        if self.loudness_range_db[0] >= self.loudness_range_db[1]:
            raise CorpusError("loudness_range_db must satisfy low < high")

    @property
    def pitch_vocab(self):
        return self.pitch_bins + 1  # bin 0 is the unvoiced token

    @property
    def loudness_vocab(self):
        return self.loudness_bins

    def quantize_pitch(self, pitch_hz):
        """0.0 -> bin 0; p > 0 -> 1 + floor(bins * log position), clamped."""
        p = np.asarray(pitch_hz, dtype=np.float64)
        lo, hi = self.pitch_range_hz
        span = np.log(hi) - np.log(lo)
        bins = np.zeros(p.shape, dtype=np.int64)
        voiced = p > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = 1 + np.floor(self.pitch_bins * (np.log(p, where=voiced, out=np.zeros_like(p)) - np.log(lo)) / span)
        bins[voiced] = np.clip(raw[voiced], 1, self.pitch_bins).astype(np.int64)
        return bins

    def quantize_loudness(self, loudness_db):
        v = np.asarray(loudness_db, dtype=np.float64)
        lo, hi = self.loudness_range_db
        raw = np.floor(self.loudness_bins * (v - lo) / (hi - lo))
        return np.clip(raw, 0, self.loudness_bins - 1).astype(np.int64)

    def pitch_bin_center_hz(self, bins):
        """Geometric bin centers; bin 0 maps back to 0.0 (unvoiced)."""
        b = np.asarray(bins, dtype=np.int64)
        lo, hi = self.pitch_range_hz
        span = np.log(hi) - np.log(lo)
        centers = lo * np.exp((b - 0.5) * span / self.pitch_bins)
        return np.where(b == 0, 0.0, centers)

    def loudness_bin_center_db(self, bins):
        b = np.asarray(bins, dtype=np.int64)
        lo, hi = self.loudness_range_db
        return lo + (b + 0.5) * (hi - lo) / self.loudness_bins


@dataclass(eq=False)
class AttributeTokenFrames:
    """Fully tokenized attributes for one aligned utterance."""

    content: np.ndarray  # (T_a,)
    pitch_bins: np.ndarray  # (T_a,)
    loudness_bins: np.ndarray  # (T_a,)
    speaker_token: int


@dataclass(eq=False)
class TokenCorpus:
    utterances: list = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def num_scales(self):
        return self.utterances[0].codec.num_scales

    @property
    def codec_cardinality(self):
        return self.utterances[0].codec.cardinality

    @property
    def content_cardinality(self):
        return self.utterances[0].attributes.content_cardinality

    def speaker_ids(self):
        return sorted({u.attributes.speaker_id for u in self.utterances})

    def speaker_table(self):
        """Per-corpus categorical speaker index (sorted ids, deterministic)."""
        return {sid: i for i, sid in enumerate(self.speaker_ids())}


# ---------------------------------------------------------------------------
# record validation
# ---------------------------------------------------------------------------

def _require(cond, message):
    if not cond:
        raise CorpusError(message)


def _positive_rate(value, what):
    _require(isinstance(value, (int, float)) and np.isfinite(value) and value > 0,
             f"{what} frame_rate_hz must be a positive finite number")
    return float(value)


def utterance_from_dict(rec):
    """Build and validate one Utterance from a decoded JSON record."""
    _require(isinstance(rec, dict), "record must be a JSON object")
    uid = rec.get("id")
    _require(isinstance(uid, str) and uid, "id must be a non-empty string")

    c = rec.get("codec")
    _require(isinstance(c, dict), "codec must be an object")
    card = c.get("cardinality")
    _require(isinstance(card, int) and card >= 2, "codec cardinality must be an integer >= 2")
    m = c.get("num_scales")
    _require(isinstance(m, int) and m >= 1, "codec num_scales must be an integer >= 1")
    rows = c.get("tokens")
    _require(isinstance(rows, list) and len(rows) == m, "codec tokens must hold num_scales sequences")
    lengths = {len(r) for r in rows}
    _require(len(lengths) == 1, "codec scale sequences must share one length")
    tokens = np.asarray(rows, dtype=np.int64)
    if tokens.size:
        _require(tokens.min() >= 0 and tokens.max() < card, "token out of range for codec cardinality")
    codec = CodecStream(
        name=str(c.get("name", "")),
        frame_rate_hz=_positive_rate(c.get("frame_rate_hz"), "codec"),
        num_scales=m,
        cardinality=card,
        tokens=tokens,
    )

    a = rec.get("attributes")
    _require(isinstance(a, dict), "attributes must be an object")

    content = a.get("content")
    _require(isinstance(content, dict), "attributes.content must be an object")
    ccard = content.get("cardinality")
    _require(isinstance(ccard, int) and ccard >= 1, "content cardinality must be an integer >= 1")
    ctokens = np.asarray(content.get("tokens", []), dtype=np.int64)
    if ctokens.size:
        _require(ctokens.min() >= 0 and ctokens.max() < ccard, "token out of range for content cardinality")

    pitch = a.get("pitch")
    _require(isinstance(pitch, dict), "attributes.pitch must be an object")
    pvals = np.asarray(pitch.get("values_hz", []), dtype=np.float64)
    _require(np.all(np.isfinite(pvals)), "pitch values must be finite")
    _require(pvals.size == 0 or pvals.min() >= 0, "pitch values must be >= 0")
    voiced = pvals[pvals > 0]
    _require(voiced.size == 0 or (voiced.min() > 20.0 and voiced.max() < 2000.0),
             "voiced pitch must lie in (20, 2000) Hz")

    loud = a.get("loudness")
    _require(isinstance(loud, dict), "attributes.loudness must be an object")
    lvals = np.asarray(loud.get("values_db", []), dtype=np.float64)
    _require(np.all(np.isfinite(lvals)), "loudness values must be finite")

    spk = a.get("speaker")
    _require(isinstance(spk, dict), "attributes.speaker must be an object")
    sid = spk.get("id")
    _require(isinstance(sid, str) and sid, "speaker id must be a non-empty string")
    emb = spk.get("embedding")
    emb_arr = None
    if emb is not None:
        emb_arr = np.asarray(emb, dtype=np.float64)
        _require(emb_arr.ndim == 1 and emb_arr.size > 0, "speaker embedding must be a non-empty vector")
        _require(abs(np.linalg.norm(emb_arr) - 1.0) <= 1e-6, "speaker embedding must be unit-norm (within 1e-6)")

    attrs = AttributeStreams(
        content_tokens=ctokens,
        content_rate_hz=_positive_rate(content.get("frame_rate_hz"), "content"),
        content_cardinality=ccard,
        pitch_hz=pvals,
        pitch_rate_hz=_positive_rate(pitch.get("frame_rate_hz"), "pitch"),
        loudness_db=lvals,
        loudness_rate_hz=_positive_rate(loud.get("frame_rate_hz"), "loudness"),
        speaker_id=sid,
        speaker_embedding=emb_arr,
    )
    return Utterance(id=uid, codec=codec, attributes=attrs)


def utterance_to_dict(u):
    emb = u.attributes.speaker_embedding
    return {
        "id": u.id,
        "codec": {
            "name": u.codec.name,
            "frame_rate_hz": u.codec.frame_rate_hz,
            "num_scales": u.codec.num_scales,
            "cardinality": u.codec.cardinality,
            "tokens": [[int(t) for t in row] for row in u.codec.tokens],
        },
        "attributes": {
            "content": {
                "frame_rate_hz": u.attributes.content_rate_hz,
                "cardinality": u.attributes.content_cardinality,
                "tokens": [int(t) for t in u.attributes.content_tokens],
            },
            "pitch": {
                "frame_rate_hz": u.attributes.pitch_rate_hz,
                "values_hz": [float(v) for v in u.attributes.pitch_hz],
            },
            "loudness": {
                "frame_rate_hz": u.attributes.loudness_rate_hz,
                "values_db": [float(v) for v in u.attributes.loudness_db],
            },
            "speaker": {
                "id": u.attributes.speaker_id,
                "embedding": None if emb is None else [float(v) for v in emb],
            },
        },
    }


def load_corpus(path):
    """Read a JSONL corpus; errors carry the 1-based line number."""
    utterances = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: invalid JSON ({e.msg})") from None
            try:
                u = utterance_from_dict(rec)
            except CorpusError as e:
                raise CorpusError(f"line {lineno}: {e}") from None
            if u.id in seen:
                raise CorpusError(f"line {lineno}: duplicate utterance id {u.id!r}")
            seen.add(u.id)
            utterances.append(u)
    return TokenCorpus(utterances=utterances)


def write_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus:
            fh.write(json.dumps(utterance_to_dict(u)))
            fh.write("\n")


def corpora_equal(a, b):
    """Field-by-field equality, array contents included."""
    if len(a) != len(b):
        return False
    return all(utterance_to_dict(x) == utterance_to_dict(y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def _resample_indices(src_len, src_rate, target_rate, t_a):
    """Index map i -> floor(i * src_rate / target_rate), exact rationals.

    Covers both directions: decimation when src_rate >= target_rate and
    hold-repeat when src_rate < target_rate.
    """
    ratio = Fraction(src_rate) / Fraction(target_rate)
    p, q = ratio.numerator, ratio.denominator
    if t_a and (t_a - 1) * p < 2**62:
        idx = (np.arange(t_a, dtype=np.int64) * p) // q
    else:
        idx = np.array([(i * p) // q for i in range(t_a)], dtype=np.int64)
    if t_a and idx[-1] >= src_len:
        raise CorpusError("internal resampling error: index beyond stream end")
    return idx


def align_streams(u, target_rate_hz=None):
    """Resample every stream of ``u`` to one rate by floor index selection.

    ``u`` may be an Utterance or an already AlignedUtterance (realigning at
    the same rate is the identity). The default target is the codec rate.
    T_a = floor(min_duration * target_rate) where min_duration is the
    shortest stream duration.
    """
    if isinstance(u, AlignedUtterance):
        streams = [
            ("codec", u.codec_tokens, u.frame_rate_hz),
            ("content", u.content, u.frame_rate_hz),
            ("pitch", u.pitch_hz, u.frame_rate_hz),
            ("loudness", u.loudness_db, u.frame_rate_hz),
        ]
        uid, sid, emb = u.id, u.speaker_id, u.speaker_embedding
        default_rate = u.frame_rate_hz
    else:
        a = u.attributes
        streams = [
            ("codec", u.codec.tokens, u.codec.frame_rate_hz),
            ("content", a.content_tokens, a.content_rate_hz),
            ("pitch", a.pitch_hz, a.pitch_rate_hz),
            ("loudness", a.loudness_db, a.loudness_rate_hz),
        ]
        uid, sid, emb = u.id, a.speaker_id, a.speaker_embedding
        default_rate = u.codec.frame_rate_hz

    g = default_rate if target_rate_hz is None else float(target_rate_hz)
    if not (np.isfinite(g) and g > 0):
        raise CorpusError(f"target rate must be positive and finite, got {g}")

    duration = None
    for name, arr, rate in streams:
        length = arr.shape[-1]
        if length == 0:
            raise CorpusError(f"utterance {uid!r}: empty {name} stream")
        if not (np.isfinite(rate) and rate > 0):
            raise CorpusError(f"utterance {uid!r}: non-positive {name} rate")
        d = Fraction(length) / Fraction(rate)
        duration = d if duration is None else min(duration, d)

    t_a = int(duration * Fraction(g))
    resampled = {}
    for name, arr, rate in streams:
        idx = _resample_indices(arr.shape[-1], rate, g, t_a)
        resampled[name] = arr[..., idx]

    return AlignedUtterance(
        id=uid,
        frame_rate_hz=g,
        codec_tokens=resampled["codec"],
        content=resampled["content"],
        pitch_hz=resampled["pitch"],
        loudness_db=resampled["loudness"],
        speaker_id=sid,
        speaker_embedding=emb,
    )


def align_corpus(corpus, target_rate_hz=None):
    return [align_streams(u, target_rate_hz) for u in corpus]


def quantize_attributes(aligned, binning, speaker_table):
    """Tokenize an aligned utterance's attributes.

    Pitch: 0.0 -> reserved bin 0; voiced values to log bins clamped to
    [1, pitch_bins]. Loudness: linear bins. Content passes through.
    The speaker id maps to one categorical token via ``speaker_table``.
    """
    if aligned.speaker_id not in speaker_table:
        raise CorpusError(f"unknown speaker id {aligned.speaker_id!r}")
    return AttributeTokenFrames(
        content=aligned.content.astype(np.int64),
        pitch_bins=binning.quantize_pitch(aligned.pitch_hz),
        loudness_bins=binning.quantize_loudness(aligned.loudness_db),
        speaker_token=int(speaker_table[aligned.speaker_id]),
    )


# ---------------------------------------------------------------------------
# codebook file: magic CBK1, u32 scale count, then per scale
#   u32 rows, u32 dim, rows*dim f32 little-endian row-major
# ---------------------------------------------------------------------------

CODEBOOK_MAGIC = b"CBK1"


def write_codebooks(path, tables):
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<I", len(tables)))
        for arr in tables:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.ndim != 2:
                raise CorpusError("codebook tables must be 2-D (rows x dim)")
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def read_codebooks(path):
    tables = []
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CODEBOOK_MAGIC:
            raise CorpusError(f"bad codebook magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            rows, dim = struct.unpack("<II", fh.read(8))
            raw = fh.read(4 * rows * dim)
            if len(raw) != 4 * rows * dim:
                raise CorpusError("truncated codebook file")
            table = np.frombuffer(raw, dtype="<f4").reshape(rows, dim).copy()
            if not np.all(np.isfinite(table)):
                raise CorpusError("codebook contains non-finite values")
            tables.append(table)
    return tables
