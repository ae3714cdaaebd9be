"""Corpus format, stream alignment and attribute quantization tests."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codec_probe.corpus import (
    AlignedUtterance,
    AttributeStreams,
    BinningConfig,
    CodecStream,
    CorpusError,
    TokenCorpus,
    Utterance,
    align_streams,
    corpora_equal,
    load_corpus,
    quantize_attributes,
    read_codebooks,
    utterance_from_dict,
    write_codebooks,
    write_corpus,
)
from codec_probe import synth


def make_record(uid="u0", codec_rate=25.0, codec_len=10, content_rate=25.0,
                content_len=10, cardinality=8, pitch=None):
    return {
        "id": uid,
        "codec": {
            "name": "toy",
            "frame_rate_hz": codec_rate,
            "num_scales": 2,
            "cardinality": cardinality,
            "tokens": [[i % cardinality for i in range(codec_len)] for _ in range(2)],
        },
        "attributes": {
            "content": {
                "frame_rate_hz": content_rate,
                "cardinality": 5,
                "tokens": [i % 5 for i in range(content_len)],
            },
            "pitch": {
                "frame_rate_hz": content_rate,
                "values_hz": list(pitch) if pitch is not None else [150.0] * content_len,
            },
            "loudness": {"frame_rate_hz": content_rate, "values_db": [-20.0] * content_len},
            "speaker": {"id": "alice", "embedding": None},
        },
    }


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


class TestLoadCorpus:
    def test_single_valid_record(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [make_record()])
        corpus = load_corpus(p)
        assert len(corpus) == 1
        assert corpus.utterances[0].id == "u0"

    def test_token_at_cardinality_is_rejected_with_line_number(self, tmp_path):
        rec = make_record()
        rec["codec"]["tokens"][0][3] = rec["codec"]["cardinality"]
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [make_record("ok"), rec])
        with pytest.raises(CorpusError, match="line 2.*token out of range"):
            load_corpus(p)

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [make_record("same"), make_record("same")])
        with pytest.raises(CorpusError, match="duplicate"):
            load_corpus(p)

    def test_720_utterances_24_speakers_synthetic(self, tmp_path):
        """A corpus of the identity-analysis shape: 720 utterances, 24
        speakers, all distinct speaker ids preserved through a round trip."""
        spec = synth.semantic_first_spec(seed=3)
        spec.min_frames, spec.max_frames = 10, 16  # keep the file small
        corpus, _ = synth.generate_corpus(spec, 720)
        assert len(corpus) == 720
        assert len(corpus.speaker_ids()) == 24
        p = tmp_path / "big.jsonl"
        write_corpus(corpus, p)
        assert len(load_corpus(p)) == 720

    def test_voiced_pitch_range_enforced(self, tmp_path):
        rec = make_record(pitch=[150.0] * 9 + [10.0])
        p = tmp_path / "c.jsonl"
        write_jsonl(p, [rec])
        with pytest.raises(CorpusError, match="20, 2000"):
            load_corpus(p)

    def test_speaker_embedding_norm_enforced(self):
        rec = make_record()
        rec["attributes"]["speaker"]["embedding"] = [1.0, 1.0]
        with pytest.raises(CorpusError, match="unit-norm"):
            utterance_from_dict(rec)

    def test_round_trip_field_by_field(self, tmp_path):
        spec = synth.two_scale_disentangled_spec(seed=1)
        corpus, _ = synth.generate_corpus(spec, 5)
        p = tmp_path / "c.jsonl"
        write_corpus(corpus, p)
        assert corpora_equal(corpus, load_corpus(p))


class TestAlignStreams:
    def test_identity_when_already_aligned(self):
        u = utterance_from_dict(make_record())
        a = align_streams(u)
        assert a.length == 10
        np.testing.assert_array_equal(a.codec_tokens, u.codec.tokens)
        np.testing.assert_array_equal(a.content, u.attributes.content_tokens)

    def test_decimation_indices_at_four_to_one(self):
        """Codec 12.5 Hz / 50 frames, content 50 Hz / 200 frames: content
        keeps every fourth frame (0, 4, 8, ..., 196) and T_a = 50."""
        rec = make_record(codec_rate=12.5, codec_len=50, content_rate=50.0, content_len=200)
        u = utterance_from_dict(rec)
        a = align_streams(u)
        assert a.length == 50
        expected = np.array([i % 5 for i in range(200)])[np.arange(0, 200, 4)]
        np.testing.assert_array_equal(a.content, expected)
        # index-arithmetic oracle: floor(i * 50 / 12.5)
        oracle = [math.floor(i * 50.0 / 12.5) for i in range(50)]
        np.testing.assert_array_equal(np.arange(0, 200, 4), oracle)

    def test_longer_stream_is_trimmed_by_duration(self):
        """content 201 frames at 50 Hz vs codec 200 at 50 Hz: duration is
        min(4.02, 4.0) = 4.0 s, so T_a = floor(4.0 * 50) = 200."""
        rec = make_record(codec_rate=50.0, codec_len=200, content_rate=50.0, content_len=201)
        a = align_streams(utterance_from_dict(rec))
        assert a.length == 200

    def test_hold_repeat_upsampling(self):
        rec = make_record(codec_rate=50.0, codec_len=20, content_rate=25.0, content_len=10)
        a = align_streams(utterance_from_dict(rec))
        assert a.length == 20
        np.testing.assert_array_equal(a.content[:4], [0, 0, 1, 1])

    def test_empty_stream_rejected(self):
        rec = make_record(content_len=0)
        with pytest.raises(CorpusError, match="empty"):
            align_streams(utterance_from_dict(rec))

    def test_idempotent_on_aligned_utterance(self):
        u = utterance_from_dict(make_record(codec_rate=12.5, codec_len=50,
                                            content_rate=50.0, content_len=200))
        a1 = align_streams(u)
        a2 = align_streams(a1, a1.frame_rate_hz)
        assert a2.length == a1.length
        np.testing.assert_array_equal(a1.codec_tokens, a2.codec_tokens)
        np.testing.assert_array_equal(a1.content, a2.content)
        np.testing.assert_array_equal(a1.pitch_hz, a2.pitch_hz)

    @given(
        codec_rate=st.sampled_from([12.5, 25.0, 40.0, 50.0, 75.0]),
        content_rate=st.sampled_from([12.5, 25.0, 50.0, 100.0]),
        codec_len=st.integers(min_value=1, max_value=60),
        content_len=st.integers(min_value=1, max_value=120),
    )
    @settings(max_examples=60, deadline=None)
    def test_resampling_never_invents_tokens(self, codec_rate, content_rate, codec_len, content_len):
        rec = make_record(codec_rate=codec_rate, codec_len=codec_len,
                          content_rate=content_rate, content_len=content_len)
        a = align_streams(utterance_from_dict(rec))
        source = set(rec["attributes"]["content"]["tokens"])
        assert set(a.content.tolist()) <= source
        assert a.codec_tokens.shape[1] == a.content.shape[0] == a.pitch_hz.shape[0]


class TestQuantizeAttributes:
    def make_aligned(self, pitch):
        t = len(pitch)
        return AlignedUtterance(
            id="u",
            frame_rate_hz=25.0,
            codec_tokens=np.zeros((1, t), dtype=np.int64),
            content=np.zeros(t, dtype=np.int64),
            pitch_hz=np.asarray(pitch, dtype=np.float64),
            loudness_db=np.full(t, -30.0),
            speaker_id="alice",
        )

    def test_unvoiced_gets_reserved_bin_zero(self):
        frames = quantize_attributes(self.make_aligned([0.0]), BinningConfig(), {"alice": 0})
        assert frames.pitch_bins[0] == 0

    def test_lower_edge_is_bin_one(self):
        frames = quantize_attributes(self.make_aligned([50.0]), BinningConfig(), {"alice": 0})
        assert frames.pitch_bins[0] == 1

    def test_log_bin_formula_near_the_32_33_edge(self):
        """1 + floor(64 * ln(p/50) / ln 10) recomputed with the direct
        formula: the bin 32/33 edge sits at 50 * sqrt(10) = 158.1139 Hz,
        so 158.1 lands in bin 32 and 158.2 in bin 33."""
        for pitch, expected in ((158.1, 32), (158.2, 33)):
            frames = quantize_attributes(self.make_aligned([pitch]), BinningConfig(), {"alice": 0})
            oracle = 1 + math.floor(64 * (math.log(pitch) - math.log(50.0)) / (math.log(500.0) - math.log(50.0)))
            assert oracle == expected
            assert frames.pitch_bins[0] == expected

    def test_unknown_speaker_listed_in_error(self):
        with pytest.raises(CorpusError, match="alice"):
            quantize_attributes(self.make_aligned([100.0]), BinningConfig(), {"bob": 0})

    @given(st.lists(st.floats(min_value=21.0, max_value=1999.0), min_size=2, max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_pitch_binning_is_monotone(self, pitches):
        cfg = BinningConfig()
        bins = cfg.quantize_pitch(np.asarray(pitches))
        order = np.argsort(pitches, kind="stable")
        assert np.all(np.diff(bins[order]) >= 0)
        assert bins.min() >= 1 and bins.max() <= cfg.pitch_bins

    def test_loudness_binned_linearly_and_clamped(self):
        cfg = BinningConfig()
        bins = cfg.quantize_loudness(np.array([-90.0, -60.0, -30.0, 0.0, 10.0]))
        assert bins[0] == 0 and bins[1] == 0
        assert bins[2] == 16
        assert bins[3] == cfg.loudness_bins - 1 and bins[4] == cfg.loudness_bins - 1


class TestCodebookFile:
    def test_round_trip(self, tmp_path):
        tables = [
            np.random.default_rng(0).normal(size=(16, 8)).astype(np.float32),
            np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32),
        ]
        p = tmp_path / "books.cbk"
        write_codebooks(p, tables)
        loaded = read_codebooks(p)
        assert len(loaded) == 2
        for a, b in zip(tables, loaded):
            assert np.array_equal(a, b)

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "bad.cbk"
        p.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(CorpusError, match="magic"):
            read_codebooks(p)
