"""Synthetic generator tests: determinism, corpus validity, and exact MI
against an independent brute-force enumeration."""

import numpy as np
import pytest

from codec_probe import synth
from codec_probe.corpus import load_corpus, write_corpus
from codec_probe.mi import PairedSamples, plugin_mi, pooled_frames


def small_spec(seed=0, weights=((0.5, 0.2, 0.1),)):
    return synth.GroundTruthSpec(
        seed=seed,
        num_speakers=3,
        content_cardinality=5,
        codec_cardinality=8,
        scale_weights=[tuple(w) for w in weights],
        frame_rate_hz=25.0,
        min_frames=20,
        max_frames=30,
    )


def brute_force_mi(truth, scale, attribute):
    """Independent enumeration of the generative joint distribution with
    plain Python loops (the oracle for analytic_mi)."""
    spec = truth.spec
    n = spec.codec_cardinality
    v = spec.content_cardinality
    s = spec.num_speakers
    pv = spec.binning.pitch_vocab
    alpha, beta, gamma = spec.scale_weights[scale]
    noise = 1.0 - alpha - beta - gamma

    pk_given_s = [synth.pitch_bin_distribution(truth, sp) for sp in range(s)]
    domain = {"content": v, "speaker": s, "pitch_bin": pv}[attribute]
    joint = np.zeros((domain, n))
    for a in range(v):
        for sp in range(s):
            for k in range(pv):
                p_state = (1.0 / v) * (1.0 / s) * pk_given_s[sp][k]
                if p_state == 0.0:
                    continue
                idx = {"content": a, "speaker": sp, "pitch_bin": k}[attribute]
                for c in range(n):
                    p_c = noise / n
                    if truth.content_tables[scale][a] == c:
                        p_c += alpha
                    if truth.speaker_tables[scale][sp] == c:
                        p_c += beta
                    if truth.pitch_tables[scale][k] == c:
                        p_c += gamma
                    joint[idx, c] += p_state * p_c
    pa = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float(np.sum(joint[mask] * np.log(joint[mask] / (pa * pc)[mask])))


class TestGenerator:
    def test_same_seed_is_byte_identical(self, tmp_path):
        spec = small_spec(seed=11)
        c1, _ = synth.generate_corpus(spec, 10)
        c2, _ = synth.generate_corpus(small_spec(seed=11), 10)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_corpus(c1, p1)
        write_corpus(c2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_generated_corpus_passes_validation(self, tmp_path):
        corpus, _ = synth.generate_corpus(small_spec(), 8)
        p = tmp_path / "c.jsonl"
        write_corpus(corpus, p)
        assert len(load_corpus(p)) == 8

    def test_single_speaker_identity_mi_is_zero(self):
        spec = small_spec()
        spec.num_speakers = 1
        truth = synth.derive_ground_truth(spec)
        assert synth.analytic_mi(truth, 0, "speaker") == 0.0

    def test_invalid_weights_rejected(self):
        with pytest.raises(synth.SynthSpecError):
            small_spec(weights=((0.8, 0.3, 0.1),))

    def test_spec_json_round_trip(self):
        spec = synth.semantic_first_spec(seed=5)
        again = synth.GroundTruthSpec.from_json(spec.to_json())
        assert again == spec


class TestAnalyticMi:
    def test_pure_noise_scale_is_zero(self):
        truth = synth.derive_ground_truth(small_spec(weights=((0.0, 0.0, 0.0),)))
        assert synth.analytic_mi(truth, 0, "content") == 0.0
        assert synth.analytic_mi(truth, 0, "speaker") == 0.0

    def test_injective_deterministic_content_gives_log_vocab(self):
        spec = small_spec(weights=((1.0, 0.0, 0.0),))
        truth = synth.derive_ground_truth(spec)
        np.testing.assert_allclose(
            synth.analytic_mi(truth, 0, "content"), np.log(spec.content_cardinality), rtol=1e-12
        )

    @pytest.mark.parametrize("attribute", ["content", "speaker", "pitch_bin"])
    def test_matches_brute_force_enumeration(self, attribute):
        truth = synth.derive_ground_truth(small_spec(seed=4, weights=((0.5, 0.2, 0.1),)))
        fast = synth.analytic_mi(truth, 0, attribute)
        slow = brute_force_mi(truth, 0, attribute)
        np.testing.assert_allclose(fast, slow, atol=1e-10)

    def test_monotone_in_content_weight(self):
        """Raising the content weight (noise renormalized) never lowers
        the content MI: the channel is linear in the weight and MI is
        convex with value 0 at weight 0."""
        previous = -1.0
        for alpha in (0.0, 0.1, 0.3, 0.5, 0.65, 0.75):
            truth = synth.derive_ground_truth(small_spec(seed=2, weights=((alpha, 0.2, 0.05),)))
            value = synth.analytic_mi(truth, 0, "content")
            assert value >= previous - 1e-12
            previous = value

    def test_enumeration_limit_enforced(self):
        spec = small_spec()
        spec.codec_cardinality = 4096
        spec.content_cardinality = 4096
        truth = synth.derive_ground_truth(spec)
        with pytest.raises(synth.SynthSpecError, match="smaller spec"):
            synth.analytic_mi(truth, 0, "content")


class TestEmpiricalAgreement:
    def test_plugin_mi_near_zero_on_pure_noise(self):
        """All weights zero: analytic MI is 0; the plug-in estimate over
        50k frames stays within the small-sample bias bound."""
        spec = synth.noise_spec(seed=6)
        spec.min_frames, spec.max_frames = 60, 80
        corpus, _ = synth.generate_corpus(spec, 720)
        frames = pooled_frames(corpus)
        n = frames["content"].size
        assert n >= 50000
        value = plugin_mi(PairedSamples(frames["codec"][0], frames["content"], discrete_y=True))
        assert value <= 0.02

    def test_plugin_approaches_analytic_on_mixed_scale(self):
        spec = small_spec(seed=9, weights=((0.5, 0.3, 0.0),))
        spec.min_frames, spec.max_frames = 80, 100
        corpus, truth = synth.generate_corpus(spec, 600)
        frames = pooled_frames(corpus)
        n = frames["content"].size
        est = plugin_mi(PairedSamples(frames["codec"][0], frames["content"], discrete_y=True))
        exact = synth.analytic_mi(truth, 0, "content")
        assert abs(est - exact) <= 3.0 / np.sqrt(n)
