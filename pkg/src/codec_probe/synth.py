"""Synthetic token corpora with controllable entanglement and exactly
enumerable mutual information.

Each scale of the synthetic codec draws its token per frame from a mixture:
with probability alpha a fixed table of the content token, with beta a fixed
table of the speaker, with gamma a fixed table of the pitch bin, and
otherwise uniformly at random. Because the per-frame joint distribution of
(content, speaker, pitch bin) is known in closed form, the mutual
information between any scale and any attribute is exactly computable.

Pitch is a per-speaker base F0 plus a sinusoidal contour with a uniformly
random phase per utterance, so the marginal distribution of a voiced frame's
pitch is the arcsine law on [base - amp, base + amp]; bin probabilities come
from arcsin evaluated at the bin edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import (
    AttributeStreams,
    BinningConfig,
    CodecStream,
    TokenCorpus,
    Utterance,
)

ENUMERATION_LIMIT = 10**7


class SynthSpecError(ValueError):
    """Generator parameters violate their contract."""


@dataclass
class GroundTruthSpec:
    """Parameters of the synthetic generator.

    ``scale_weights`` holds one (alpha, beta, gamma) triple per scale:
    content, speaker and pitch-bin dependency strengths, each in [0, 1]
    with alpha + beta + gamma <= 1; the remainder is uniform noise.
    """

    seed: int = 0
    num_speakers: int = 4
    content_cardinality: int = 100
    codec_cardinality: int = 128
    scale_weights: list = field(default_factory=lambda: [(0.9, 0.05, 0.02), (0.05, 0.5, 0.05)])
    frame_rate_hz: float = 50.0
    min_frames: int = 80
    max_frames: int = 120
    base_f0_range_hz: tuple = (120.0, 260.0)
    contour_amp_hz: float = 30.0
    contour_freq_hz: float = 2.0
    voiced_prob: float = 0.9
    loudness_mean_db: float = -30.0
    loudness_amp_db: float = 12.0
    loudness_freq_hz: float = 0.7
    speaker_embedding_dim: int = 16
    codec_name: str = "synthetic-rvq"
    binning: BinningConfig = field(default_factory=BinningConfig)

    def __post_init__(self):
        if self.num_speakers < 1:
            raise SynthSpecError("num_speakers must be >= 1")
        if self.content_cardinality < 1 or self.codec_cardinality < 2:
            raise SynthSpecError("cardinalities out of range")
        if self.min_frames < 1 or self.max_frames < self.min_frames:
            raise SynthSpecError("frame count range invalid")
        if not (0.0 < self.voiced_prob <= 1.0):
            raise SynthSpecError("voiced_prob must be in (0, 1]")
        lo, hi = self.base_f0_range_hz
        if not (20.0 < lo - self.contour_amp_hz and hi + self.contour_amp_hz < 2000.0):
            raise SynthSpecError("pitch model must stay inside (20, 2000) Hz")
        for s, w in enumerate(self.scale_weights):
            a, b, g = w
            if min(a, b, g) < 0 or a + b + g > 1.0 + 1e-12:
                raise SynthSpecError(f"scale {s}: weights must be >= 0 and sum to <= 1")

    @property
    def num_scales(self):
        return len(self.scale_weights)

    def to_json(self):
        d = asdict(self)
        d["scale_weights"] = [list(w) for w in self.scale_weights]
        d["binning"] = {
            "pitch_bins": self.binning.pitch_bins,
            "pitch_range_hz": list(self.binning.pitch_range_hz),
            "loudness_bins": self.binning.loudness_bins,
            "loudness_range_db": list(self.binning.loudness_range_db),
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if "binning" in d:
            b = d["binning"]
            d["binning"] = BinningConfig(
                pitch_bins=b.get("pitch_bins", 64),
                pitch_range_hz=tuple(b.get("pitch_range_hz", (50.0, 500.0))),
                loudness_bins=b.get("loudness_bins", 32),
                loudness_range_db=tuple(b.get("loudness_range_db", (-60.0, 0.0))),
            )
        d["scale_weights"] = [tuple(w) for w in d.get("scale_weights", [])]
        for key in ("base_f0_range_hz",):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(eq=False)
class GroundTruth:
    """Seeded derived state: mapping tables and per-speaker pitch models."""

    spec: GroundTruthSpec
    content_tables: np.ndarray  # (M, V) codec tokens
    speaker_tables: np.ndarray  # (M, S)
    pitch_tables: np.ndarray  # (M, pitch_vocab)
    speaker_base_f0: np.ndarray  # (S,)
    speaker_embeddings: np.ndarray  # (S, D) unit rows
    speaker_ids: list

    def analytic_mi_table(self):
        table = {}
        for s in range(self.spec.num_scales):
            table[s] = {attr: analytic_mi(self, s, attr) for attr in ("content", "speaker", "pitch_bin")}
        return table

    def to_json(self):
        return json.dumps(
            {
                "speaker_ids": self.speaker_ids,
                "speaker_base_f0": [float(v) for v in self.speaker_base_f0],
                "content_tables": self.content_tables.tolist(),
                "speaker_tables": self.speaker_tables.tolist(),
                "pitch_tables": self.pitch_tables.tolist(),
                "analytic_mi": {
                    str(s): {k: float(v) for k, v in row.items()}
                    for s, row in self.analytic_mi_table().items()
                },
            },
            indent=2,
        )


def _mapping_table(rng, domain, n_codec):
    """Random injection when it fits, otherwise a random function."""
    if domain <= n_codec:
        return rng.permutation(n_codec)[:domain].astype(np.int64)
    return rng.integers(0, n_codec, size=domain, dtype=np.int64)


def derive_ground_truth(spec):
    rng = np.random.default_rng(spec.seed)
    m, v, s = spec.num_scales, spec.content_cardinality, spec.num_speakers
    pv = spec.binning.pitch_vocab
    content = np.stack([_mapping_table(rng, v, spec.codec_cardinality) for _ in range(m)])
    speaker = np.stack([_mapping_table(rng, s, spec.codec_cardinality) for _ in range(m)])
    pitch = np.stack([_mapping_table(rng, pv, spec.codec_cardinality) for _ in range(m)])
    lo, hi = spec.base_f0_range_hz
    base_f0 = rng.uniform(lo, hi, size=s)
    emb = rng.normal(size=(s, spec.speaker_embedding_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    ids = [f"spk{i:03d}" for i in range(s)]
    return GroundTruth(
        spec=spec,
        content_tables=content,
        speaker_tables=speaker,
        pitch_tables=pitch,
        speaker_base_f0=base_f0,
        speaker_embeddings=emb,
        speaker_ids=ids,
    )


def generate_corpus(spec, num_utterances, truth=None):
    """Sample a corpus from ``spec``. Returns (TokenCorpus, GroundTruth).

    Deterministic for a given spec: one Generator seeded from spec.seed
    drives table derivation, then a second one (seed + 1) drives sampling,
    with a fixed draw order per utterance.
    """
    if truth is None:
        truth = derive_ground_truth(spec)
    rng = np.random.default_rng(spec.seed + 1)
    b = spec.binning
    utterances = []
    for u_index in range(num_utterances):
        spk = int(rng.integers(0, spec.num_speakers))
        t = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        content = rng.integers(0, spec.content_cardinality, size=t, dtype=np.int64)
        voiced = rng.random(t) < spec.voiced_prob
        phase = rng.uniform(0.0, 2.0 * np.pi)
        frames = np.arange(t)
        pitch = truth.speaker_base_f0[spk] + spec.contour_amp_hz * np.sin(
            2.0 * np.pi * spec.contour_freq_hz * frames / spec.frame_rate_hz + phase
        )
        pitch = np.where(voiced, pitch, 0.0)
        loud_phase = rng.uniform(0.0, 2.0 * np.pi)
        loudness = spec.loudness_mean_db + spec.loudness_amp_db * np.sin(
            2.0 * np.pi * spec.loudness_freq_hz * frames / spec.frame_rate_hz + loud_phase
        )
        pitch_bins = b.quantize_pitch(pitch)

        scales = np.empty((spec.num_scales, t), dtype=np.int64)
        for s, (alpha, beta, gamma) in enumerate(spec.scale_weights):
            route = rng.random(t)
            noise = rng.integers(0, spec.codec_cardinality, size=t, dtype=np.int64)
            tok = noise.copy()
            tok = np.where(route < alpha + beta + gamma, truth.pitch_tables[s][pitch_bins], tok)
            tok = np.where(route < alpha + beta, truth.speaker_tables[s][spk], tok)
            tok = np.where(route < alpha, truth.content_tables[s][content], tok)
            scales[s] = tok

        utterances.append(
            Utterance(
                id=f"utt{u_index:05d}",
                codec=CodecStream(
                    name=spec.codec_name,
                    frame_rate_hz=spec.frame_rate_hz,
                    num_scales=spec.num_scales,
                    cardinality=spec.codec_cardinality,
                    tokens=scales,
                ),
                attributes=AttributeStreams(
                    content_tokens=content,
                    content_rate_hz=spec.frame_rate_hz,
                    content_cardinality=spec.content_cardinality,
                    pitch_hz=pitch,
                    pitch_rate_hz=spec.frame_rate_hz,
                    loudness_db=loudness,
                    loudness_rate_hz=spec.frame_rate_hz,
                    speaker_id=truth.speaker_ids[spk],
                    speaker_embedding=truth.speaker_embeddings[spk],
                ),
            )
        )
    return TokenCorpus(utterances=utterances), truth


# ---------------------------------------------------------------------------
# analytic structure
# ---------------------------------------------------------------------------

def pitch_bin_distribution(truth, speaker=None):
    """Exact per-frame pitch-bin probabilities, optionally per speaker.

    A voiced frame's pitch is base + amp * sin(x) with x uniform on
    [0, 2pi), so P(pitch in [a, b)) = (arcsin(cb) - arcsin(ca)) / pi with
    c* the clipped normalized edges. Bin 0 carries the unvoiced mass.
    """
    spec = truth.spec
    b = spec.binning
    lo, hi = b.pitch_range_hz
    edges = lo * np.exp(np.arange(b.pitch_bins + 1) * (np.log(hi) - np.log(lo)) / b.pitch_bins)
    # clamping maps everything below the first inner edge to bin 1 and
    # everything above the last inner edge to the top bin
    lower = np.concatenate([[-np.inf], edges[1:-1]])
    upper = np.concatenate([edges[1:-1], [np.inf]])

    def per_speaker(base):
        amp = spec.contour_amp_hz
        ca = np.clip((lower - base) / amp, -1.0, 1.0)
        cb = np.clip((upper - base) / amp, -1.0, 1.0)
        voiced_mass = (np.arcsin(cb) - np.arcsin(ca)) / np.pi
        dist = np.zeros(b.pitch_vocab)
        dist[0] = 1.0 - spec.voiced_prob
        dist[1:] = spec.voiced_prob * voiced_mass
        return dist

    if speaker is not None:
        return per_speaker(truth.speaker_base_f0[speaker])
    stack = np.stack([per_speaker(f0) for f0 in truth.speaker_base_f0])
    return stack.mean(axis=0)


def _one_hot_rows(table, n_codec):
    eye = np.eye(n_codec)
    return eye[table]


def joint_distribution(truth, scale, attribute):
    """Exact joint p(attribute value, codec token) for one scale."""
    spec = truth.spec
    alpha, beta, gamma = spec.scale_weights[scale]
    noise = 1.0 - alpha - beta - gamma
    n = spec.codec_cardinality
    v = spec.content_cardinality
    s = spec.num_speakers
    pv = spec.binning.pitch_vocab

    if attribute not in ("content", "speaker", "pitch_bin"):
        raise SynthSpecError(f"unknown attribute {attribute!r}")
    domain = {"content": v, "speaker": s, "pitch_bin": pv}[attribute]
    if domain * n > ENUMERATION_LIMIT:
        raise SynthSpecError(
            f"joint enumeration of {domain} x {n} cells exceeds {ENUMERATION_LIMIT}; use a smaller spec"
        )

    content_hot = _one_hot_rows(truth.content_tables[scale], n)  # (V, N)
    speaker_hot = _one_hot_rows(truth.speaker_tables[scale], n)  # (S, N)
    pitch_hot = _one_hot_rows(truth.pitch_tables[scale], n)  # (PV, N)

    content_marg = content_hot.mean(axis=0)
    speaker_marg = speaker_hot.mean(axis=0)
    pk_given_s = np.stack([pitch_bin_distribution(truth, sp) for sp in range(s)])  # (S, PV)
    pk = pk_given_s.mean(axis=0)
    pitch_marg = pk @ pitch_hot

    base = noise / n
    if attribute == "content":
        cond = alpha * content_hot + beta * speaker_marg + gamma * pitch_marg + base
        weights = np.full(v, 1.0 / v)
    elif attribute == "speaker":
        cond = alpha * content_marg + beta * speaker_hot + gamma * (pk_given_s @ pitch_hot) + base
        weights = np.full(s, 1.0 / s)
    else:  # pitch_bin
        # p(speaker | bin) by Bayes over the uniform speaker prior
        ps_given_k = (pk_given_s / s).T  # (PV, S) joint, normalize per bin below
        norm = ps_given_k.sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        ps_given_k = ps_given_k / safe
        cond = alpha * content_marg + beta * (ps_given_k @ speaker_hot) + gamma * pitch_hot + base
        weights = pk
    return weights[:, None] * cond


def analytic_mi(truth, scale, attribute):
    """Exact MI in nats between one codec scale and one attribute."""
    joint = joint_distribution(truth, scale, attribute)
    pa = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    ratio = np.ones_like(joint)
    np.divide(joint, pa * pc, out=ratio, where=mask)
    mi = float(np.sum(joint[mask] * np.log(ratio[mask])))
    return max(mi, 0.0)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def two_scale_disentangled_spec(seed=0):
    """Scale 0 is a pure injective function of content, scale 1 of speaker.

    Content and speaker are exactly recoverable in both directions, so a
    trained token model can saturate analysis and generation. Small
    attribute vocabularies and a large codec vocabulary keep the toy
    training budget short.
    """
    return GroundTruthSpec(
        seed=seed,
        num_speakers=4,
        content_cardinality=6,
        codec_cardinality=512,
        scale_weights=[(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
        frame_rate_hz=25.0,
        min_frames=24,
        max_frames=40,
        binning=BinningConfig(pitch_bins=6, loudness_bins=6),
    )


def semantic_first_spec(seed=0, pitch_weight=0.02):
    """Content concentrated in scale 0, identity in the middle scales,
    pitch dependency scarce everywhere."""
    w = pitch_weight
    return GroundTruthSpec(
        seed=seed,
        num_speakers=24,
        content_cardinality=100,
        codec_cardinality=128,
        scale_weights=[(0.9, 0.05, w), (0.3, 0.5, 0.05), (0.1, 0.3, 0.05), (0.05, 0.2, 0.05)],
        frame_rate_hz=50.0,
        min_frames=80,
        max_frames=120,
    )


def noise_spec(seed=0, num_scales=2):
    """Every scale is uniform noise: all MIs are exactly zero."""
    return GroundTruthSpec(
        seed=seed,
        num_speakers=4,
        content_cardinality=8,
        codec_cardinality=16,
        scale_weights=[(0.0, 0.0, 0.0)] * num_scales,
        min_frames=40,
        max_frames=60,
    )
