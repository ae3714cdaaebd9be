"""Toy-scale masked encoder-decoder transformer over concatenated codec and
attribute token streams.

The sequence is packed in the fixed order codec, content, pitch, loudness,
speaker (one fused frame embedding per codec time step regardless of the
number of RVQ scales, so every frame-rate stream contributes T positions
and the speaker stream one). Visible tokens are embedded and encoded;
learned per-stream mask vectors (plus stream and position embeddings) fill
the masked slots of the full-length decoder input. Cross-entropy is taken
over masked positions only, one linear head per codec scale and one per
attribute stream, stream losses equally weighted.

Analysis masks every attribute position, generation masks every codec
position; both are mode-forced specializations of the training-time
masking and decode greedily, so inference is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .corpus import BinningConfig

STREAMS = ("codec", "content", "pitch", "loudness", "speaker")


class AncogenError(ValueError):
    pass


@dataclass(frozen=True)
class StreamLayout:
    num_scales: int
    codec_cardinality: int
    content_cardinality: int
    pitch_vocab: int
    loudness_vocab: int
    speaker_vocab: int

    def vocab(self, stream):
        return {
            "codec": self.codec_cardinality,
            "content": self.content_cardinality,
            "pitch": self.pitch_vocab,
            "loudness": self.loudness_vocab,
            "speaker": self.speaker_vocab,
        }[stream]

    @staticmethod
    def from_corpus(corpus, binning):
        return StreamLayout(
            num_scales=corpus.num_scales,
            codec_cardinality=corpus.codec_cardinality,
            content_cardinality=corpus.content_cardinality,
            pitch_vocab=binning.pitch_vocab,
            loudness_vocab=binning.loudness_vocab,
            speaker_vocab=len(corpus.speaker_table()),
        )


@dataclass(eq=False)
class StreamTokens:
    """One utterance's token view: codec (M, T) plus tokenized attributes."""

    codec: np.ndarray
    content: np.ndarray
    pitch: np.ndarray
    loudness: np.ndarray
    speaker: int

    @property
    def num_frames(self):
        return self.codec.shape[1]

    @staticmethod
    def from_aligned(aligned, frames):
        return StreamTokens(
            codec=aligned.codec_tokens,
            content=frames.content,
            pitch=frames.pitch_bins,
            loudness=frames.loudness_bins,
            speaker=frames.speaker_token,
        )

    def stream_targets(self, stream):
        if stream == "speaker":
            return np.array([self.speaker], dtype=np.int64)
        return getattr(self, stream)


@dataclass(eq=False)
class MaskSet:
    """Visibility flags per stream position plus the mode tag."""

    visible: dict  # stream name -> bool array (speaker: shape (1,))
    mode: str

    def __post_init__(self):
        masked = sum(int((~v).sum()) for v in self.visible.values())
        shown = sum(int(v.sum()) for v in self.visible.values())
        if masked == 0 or shown == 0:
            raise AncogenError("mask must leave at least one masked and one visible position")


def analysis_mask(num_frames):
    t = num_frames
    return MaskSet(
        visible={
            "codec": np.ones(t, dtype=bool),
            "content": np.zeros(t, dtype=bool),
            "pitch": np.zeros(t, dtype=bool),
            "loudness": np.zeros(t, dtype=bool),
            "speaker": np.zeros(1, dtype=bool),
        },
        mode="analysis",
    )


def generation_mask(num_frames):
    t = num_frames
    return MaskSet(
        visible={
            "codec": np.zeros(t, dtype=bool),
            "content": np.ones(t, dtype=bool),
            "pitch": np.ones(t, dtype=bool),
            "loudness": np.ones(t, dtype=bool),
            "speaker": np.ones(1, dtype=bool),
        },
        mode="generation",
    )


def make_training_mask(num_frames, rng, mode_weights=(0.25, 0.25, 0.5)):
    """Sample a mask mode: analysis, generation, or per-position random
    masking with a ratio drawn uniformly from [0.15, 0.75] (resampled until
    at least one position is masked and one visible)."""
    if num_frames < 1:
        raise AncogenError("layout with zero positions")
    w = np.asarray(mode_weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise AncogenError("mode weights must be non-negative and sum to 1")
    u = rng.random()
    if u < w[0]:
        return analysis_mask(num_frames)
    if u < w[0] + w[1]:
        return generation_mask(num_frames)
    total = 4 * num_frames + 1
    while True:
        ratio = rng.uniform(0.15, 0.75)
        flat = rng.random(total) >= ratio  # True = visible
        if 0 < flat.sum() < total:
            break
    t = num_frames
    return MaskSet(
        visible={
            "codec": flat[0:t],
            "content": flat[t : 2 * t],
            "pitch": flat[2 * t : 3 * t],
            "loudness": flat[3 * t : 4 * t],
            "speaker": flat[4 * t : 4 * t + 1],
        },
        mode="random",
    )


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    max_frames: int = 4096
    head_init_scale: float = 0.01  # near-uniform logits at init


class AncogenModel:
    """Masked token transformer with per-scale codec heads."""

    def __init__(self, layout, config=None, seed=0, dtype=np.float32):
        self.layout = layout
        self.config = config or ModelConfig()
        self.seed = int(seed)
        self.dtype = dtype
        cfg = self.config
        rng = np.random.default_rng(seed)

        d = cfg.dim
        self.codec_embeds = [
            nn.Embedding(layout.codec_cardinality, d, rng, dtype, f"codec_embed{s}")
            for s in range(layout.num_scales)
        ]
        self.attr_embeds = {
            "content": nn.Embedding(layout.content_cardinality, d, rng, dtype, "content_embed"),
            "pitch": nn.Embedding(layout.pitch_vocab, d, rng, dtype, "pitch_embed"),
            "loudness": nn.Embedding(layout.loudness_vocab, d, rng, dtype, "loudness_embed"),
            "speaker": nn.Embedding(layout.speaker_vocab, d, rng, dtype, "speaker_embed"),
        }
        self.stream_embed = nn.Tensor(
            nn.embedding_init(rng, len(STREAMS), d, dtype), requires_grad=True, name="stream_embed"
        )
        self.mask_embed = nn.Tensor(
            nn.embedding_init(rng, len(STREAMS), d, dtype), requires_grad=True, name="mask_embed"
        )
        self.encoder = [
            nn.TransformerBlock(d, cfg.heads, rng, dtype, name=f"enc{b}") for b in range(cfg.encoder_blocks)
        ]
        self.enc_norm = nn.LayerNorm(d, dtype, "enc_norm")
        self.decoder = [
            nn.TransformerBlock(d, cfg.heads, rng, dtype, name=f"dec{b}") for b in range(cfg.decoder_blocks)
        ]
        self.dec_norm = nn.LayerNorm(d, dtype, "dec_norm")
        hs = cfg.head_init_scale
        self.codec_heads = [
            nn.Linear(d, layout.codec_cardinality, rng, dtype, f"codec_head{s}", init_scale=hs)
            for s in range(layout.num_scales)
        ]
        self.attr_heads = {
            "content": nn.Linear(d, layout.content_cardinality, rng, dtype, "content_head", init_scale=hs),
            "pitch": nn.Linear(d, layout.pitch_vocab, rng, dtype, "pitch_head", init_scale=hs),
            "loudness": nn.Linear(d, layout.loudness_vocab, rng, dtype, "loudness_head", init_scale=hs),
            "speaker": nn.Linear(d, layout.speaker_vocab, rng, dtype, "speaker_head", init_scale=hs),
        }
        self.positions = nn.sinusoidal_positions(cfg.max_frames, d, dtype)

    # -- parameters --

    def named_parameters(self):
        out = []
        for e in self.codec_embeds:
            out.append((e.table.name, e.table))
        for s in ("content", "pitch", "loudness", "speaker"):
            out.append((self.attr_embeds[s].table.name, self.attr_embeds[s].table))
        out.append((self.stream_embed.name, self.stream_embed))
        out.append((self.mask_embed.name, self.mask_embed))
        for block in self.encoder + [self.enc_norm] + self.decoder + [self.dec_norm]:
            for p in block.parameters():
                out.append((p.name, p))
        for h in self.codec_heads:
            for p in h.parameters():
                out.append((p.name, p))
        for s in ("content", "pitch", "loudness", "speaker"):
            for p in self.attr_heads[s].parameters():
                out.append((p.name, p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @property
    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    # -- forward --

    def _check_tokens(self, tokens):
        m = self.layout.num_scales
        if tokens.codec.ndim != 2 or tokens.codec.shape[0] != m:
            raise AncogenError(f"codec tokens must be ({m}, T), got {tokens.codec.shape}")
        t = tokens.num_frames
        if t < 1:
            raise AncogenError("utterance has zero frames")
        if t > self.config.max_frames:
            raise AncogenError(f"{t} frames exceeds the position table ({self.config.max_frames})")
        for stream in ("content", "pitch", "loudness"):
            arr = getattr(tokens, stream)
            if arr.shape != (t,):
                raise AncogenError(f"{stream} stream must have {t} frames, got {arr.shape}")
        for stream in STREAMS:
            tgt = tokens.stream_targets(stream)
            vocab = self.layout.vocab(stream)
            if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
                raise AncogenError(f"{stream} token out of range for vocabulary {vocab}")

    def _offsets(self, t):
        return {"codec": 0, "content": t, "pitch": 2 * t, "loudness": 3 * t, "speaker": 4 * t}

    def _full_embedding(self, tokens):
        t = tokens.num_frames
        pos = self.positions[:t]
        rows = []
        codec = self.codec_embeds[0](tokens.codec[0])
        for s in range(1, self.layout.num_scales):
            codec = nn.add(codec, self.codec_embeds[s](tokens.codec[s]))
        rows.append(self._with_context(codec, 0, pos))
        for i, stream in enumerate(("content", "pitch", "loudness")):
            emb = self.attr_embeds[stream](tokens.stream_targets(stream))
            rows.append(self._with_context(emb, i + 1, pos))
        spk = self.attr_embeds["speaker"](np.array([tokens.speaker]))
        rows.append(self._with_context(spk, 4, self.positions[:1]))
        return nn.concat_rows(rows)

    def _with_context(self, emb, stream_index, pos):
        out = nn.add(emb, nn.take_rows(self.stream_embed, np.array([stream_index])))
        return nn.add_const(out, pos)

    def _mask_rows(self, stream_ids, local_ts):
        rows = nn.add(
            nn.gather_rows(self.mask_embed, stream_ids),
            nn.gather_rows(self.stream_embed, stream_ids),
        )
        return nn.add_const(rows, self.positions[local_ts])

    def _flat_visibility(self, tokens, mask):
        t = tokens.num_frames
        offsets = self._offsets(t)
        flat = np.zeros(4 * t + 1, dtype=bool)
        stream_of = np.zeros(4 * t + 1, dtype=np.int64)
        local_t = np.zeros(4 * t + 1, dtype=np.int64)
        for i, stream in enumerate(STREAMS):
            vis = mask.visible[stream]
            expected = 1 if stream == "speaker" else t
            if vis.shape != (expected,):
                raise AncogenError(f"mask for {stream} must have shape ({expected},), got {vis.shape}")
            sl = slice(offsets[stream], offsets[stream] + expected)
            flat[sl] = vis
            stream_of[sl] = i
            local_t[sl] = np.arange(expected)
        return flat, stream_of, local_t

    def _decode(self, tokens, mask):
        """Encoder over visible rows, decoder over the re-assembled full
        sequence; returns the normalized decoder output (L, dim)."""
        self._check_tokens(tokens)
        full = self._full_embedding(tokens)
        flat, stream_of, local_t = self._flat_visibility(tokens, mask)
        visible_idx = np.nonzero(flat)[0]
        masked_idx = np.nonzero(~flat)[0]

        enc = nn.take_rows(full, visible_idx)
        for block in self.encoder:
            enc = block(enc)
        enc = self.enc_norm(enc)

        masked_rows = self._mask_rows(stream_of[masked_idx], local_t[masked_idx])
        stacked = nn.concat_rows([enc, masked_rows])
        order = np.argsort(np.concatenate([visible_idx, masked_idx]), kind="stable")
        dec = nn.take_rows(stacked, order)
        for block in self.decoder:
            dec = block(dec)
        return self.dec_norm(dec)

    def loss(self, tokens, mask, targets=None):
        """Mean cross-entropy over masked positions, summed across streams
        with equal weight. ``targets`` defaults to the input tokens; passing
        a different StreamTokens exercises only the target side."""
        targets = targets or tokens
        dec = self._decode(tokens, mask)
        t = tokens.num_frames
        offsets = self._offsets(t)
        total = None
        any_masked = False
        for stream in STREAMS:
            hidden_idx = np.nonzero(~mask.visible[stream])[0]
            if hidden_idx.size == 0:
                continue
            any_masked = True
            rows = nn.take_rows(dec, offsets[stream] + hidden_idx)
            if stream == "codec":
                ce = None
                for s in range(self.layout.num_scales):
                    part = nn.cross_entropy(self.codec_heads[s](rows), targets.codec[s][hidden_idx])
                    ce = part if ce is None else nn.add(ce, part)
                ce = nn.scale(ce, 1.0 / self.layout.num_scales)
            else:
                ce = nn.cross_entropy(self.attr_heads[stream](rows), targets.stream_targets(stream)[hidden_idx])
            total = ce if total is None else nn.add(total, ce)
        if not any_masked:
            raise AncogenError("nothing to predict: mask has no masked position")
        return total

    def predict(self, tokens, mask):
        """Greedy argmax for every masked position, per stream."""
        dec = self._decode(tokens, mask)
        t = tokens.num_frames
        offsets = self._offsets(t)
        out = {}
        for stream in STREAMS:
            hidden_idx = np.nonzero(~mask.visible[stream])[0]
            if hidden_idx.size == 0:
                continue
            rows = nn.take_rows(dec, offsets[stream] + hidden_idx)
            if stream == "codec":
                preds = np.stack(
                    [np.argmax(self.codec_heads[s](rows).data, axis=1) for s in range(self.layout.num_scales)]
                )
            else:
                preds = np.argmax(self.attr_heads[stream](rows).data, axis=1)
            out[stream] = (hidden_idx, preds.astype(np.int64))
        return out


# ---------------------------------------------------------------------------
# inference entry points
# ---------------------------------------------------------------------------

def analyze(model, codec_tokens):
    """Predict all attribute tokens from codec tokens (analysis mode)."""
    codec_tokens = np.asarray(codec_tokens, dtype=np.int64)
    if codec_tokens.ndim != 2 or codec_tokens.shape[0] != model.layout.num_scales:
        raise AncogenError(
            f"codec tokens must be ({model.layout.num_scales}, T), got {codec_tokens.shape}"
        )
    t = codec_tokens.shape[1]
    zeros = np.zeros(t, dtype=np.int64)
    tokens = StreamTokens(codec=codec_tokens, content=zeros, pitch=zeros, loudness=zeros, speaker=0)
    preds = model.predict(tokens, analysis_mask(t))
    return StreamTokens(
        codec=codec_tokens,
        content=preds["content"][1],
        pitch=preds["pitch"][1],
        loudness=preds["loudness"][1],
        speaker=int(preds["speaker"][1][0]),
    )


def generate(model, attr_tokens):
    """Predict codec tokens for all scales from attribute tokens."""
    t = attr_tokens.content.shape[0]
    codec = np.zeros((model.layout.num_scales, t), dtype=np.int64)
    tokens = StreamTokens(
        codec=codec,
        content=np.asarray(attr_tokens.content, dtype=np.int64),
        pitch=np.asarray(attr_tokens.pitch, dtype=np.int64),
        loudness=np.asarray(attr_tokens.loudness, dtype=np.int64),
        speaker=int(attr_tokens.speaker),
    )
    preds = model.predict(tokens, generation_mask(t))
    return preds["codec"][1]


def convert_voice(model, codec_tokens, target_speaker):
    """Analysis, speaker swap, generation; greedy throughout."""
    if not 0 <= int(target_speaker) < model.layout.speaker_vocab:
        raise AncogenError(
            f"unknown speaker token {target_speaker} (vocabulary {model.layout.speaker_vocab})"
        )
    attrs = analyze(model, codec_tokens)
    attrs.speaker = int(target_speaker)
    return generate(model, attrs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    mode_weights: tuple = (0.25, 0.25, 0.5)


def training_step(model, batch, masks, optimizer):
    """One optimizer update from a batch of (StreamTokens, MaskSet) pairs.

    The batch loss is the mean of per-utterance losses; gradients
    accumulate across utterances before the single Adam step.
    """
    optimizer.zero_grad()
    total = 0.0
    inv = 1.0 / len(batch)
    for tokens, mask in zip(batch, masks):
        with nn.Graph() as g:
            loss = model.loss(tokens, mask)
            scaled = nn.scale(loss, inv)
        total += float(loss.data)
        g.backward(scaled)
    optimizer.step()
    return total * inv


def train_model(corpus, binning=None, model_config=None, train_config=None):
    """Train on a corpus; deterministic for a given TrainConfig.seed.

    Returns (model, per-step mean losses).
    """
    from .corpus import align_streams, quantize_attributes

    binning = binning or BinningConfig()
    tc = train_config or TrainConfig()
    layout = StreamLayout.from_corpus(corpus, binning)
    table = corpus.speaker_table()
    pool = []
    for u in corpus:
        a = align_streams(u)
        frames = quantize_attributes(a, binning, table)
        pool.append(StreamTokens.from_aligned(a, frames))
    if not pool:
        raise AncogenError("empty corpus")

    model = AncogenModel(layout, model_config, seed=tc.seed)
    opt = nn.Adam(model.parameters(), lr=tc.lr)
    rng = np.random.default_rng(tc.seed)
    losses = []
    for _ in range(tc.steps):
        idx = rng.integers(0, len(pool), size=tc.batch_size)
        batch = [pool[i] for i in idx]
        masks = [make_training_mask(b.num_frames, rng, tc.mode_weights) for b in batch]
        losses.append(training_step(model, batch, masks, opt))
    return model, losses


# ---------------------------------------------------------------------------
# checkpoints: ANC1 parameter file + JSON sidecar with layout and binning
# ---------------------------------------------------------------------------

def sidecar_path(path):
    return str(path) + ".json"


def save_model(model, path, binning=None, speaker_ids=None):
    nn.save_checkpoint(path, [(name, p.data) for name, p in model.named_parameters()])
    b = binning or BinningConfig()
    meta = {
        "layout": asdict(model.layout),
        "model_config": asdict(model.config),
        "seed": model.seed,
        "binning": {
            "pitch_bins": b.pitch_bins,
            "pitch_range_hz": list(b.pitch_range_hz),
            "loudness_bins": b.loudness_bins,
            "loudness_range_db": list(b.loudness_range_db),
        },
        "speaker_ids": list(speaker_ids) if speaker_ids else None,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_model(path):
    """Rebuild a model from a checkpoint.

    Returns (model, BinningConfig, speaker_ids or None)."""
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    layout = StreamLayout(**meta["layout"])
    config = ModelConfig(**meta["model_config"])
    model = AncogenModel(layout, config, seed=meta.get("seed", 0))
    weights = nn.load_checkpoint(path)
    for name, p in model.named_parameters():
        if name not in weights:
            raise AncogenError(f"checkpoint is missing parameter {name}")
        if weights[name].shape != p.data.shape:
            raise AncogenError(f"checkpoint shape mismatch for {name}")
        p.data = weights[name].astype(p.data.dtype)
    b = meta.get("binning", {})
    binning = BinningConfig(
        pitch_bins=b.get("pitch_bins", 64),
        pitch_range_hz=tuple(b.get("pitch_range_hz", (50.0, 500.0))),
        loudness_bins=b.get("loudness_bins", 32),
        loudness_range_db=tuple(b.get("loudness_range_db", (-60.0, 0.0))),
    )
    return model, binning, meta.get("speaker_ids")
