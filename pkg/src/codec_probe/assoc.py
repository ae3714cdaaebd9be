"""Co-occurrence statistics between content tokens and codec tokens per RVQ
scale: association rankings, top-k usage curves, predominant mappings and
pitch-conditioned token subsets."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import align_streams


class AssocError(ValueError):
    pass


@dataclass(eq=False)
class CooccurrenceMatrix:
    scale: int
    counts: np.ndarray  # (N_attr, N_codec) int64
    total: int

    def merged_with(self, other):
        if self.scale != other.scale or self.counts.shape != other.counts.shape:
            raise AssocError("cannot merge co-occurrence matrices of different shape or scale")
        return CooccurrenceMatrix(self.scale, self.counts + other.counts, self.total + other.total)


@dataclass(eq=False)
class AssociationRanking:
    """Per codec token: attribute tokens sorted by co-occurrence share.

    ``attr_ids[c]`` / ``shares[c]`` list the attribute tokens observed with
    codec token c, count-descending with ties broken by lower attribute id.
    ``column_support[c]`` is the number of frames carrying codec token c.
    """

    num_attr: int
    attr_ids: list  # per codec token, int64 array
    shares: list  # per codec token, float64 array summing to 1 when used
    column_support: np.ndarray  # (N_codec,) int64

    @property
    def used(self):
        return self.column_support > 0


@dataclass(eq=False)
class PitchConditionedSet:
    """Codec-token statistics over frames matching one content token."""

    filter_token: int
    codec_tokens: np.ndarray  # (K,) int64
    counts: np.ndarray  # (K,) int64
    mean_pitch_hz: np.ndarray  # (K,) float64, NaN if no voiced frame
    std_pitch_hz: np.ndarray  # (K,) float64, population std, NaN if unvoiced


def _count_utterance(u, scale, n_attr, n_codec):
    a = align_streams(u)
    flat = a.content * n_codec + a.codec_tokens[scale]
    return np.bincount(flat, minlength=n_attr * n_codec).reshape(n_attr, n_codec)


def accumulate_cooccurrence(corpus, scale, threads=1):
    """Count aligned frames per (content token, codec token) pair.

    Accumulation is a commutative monoid over utterances; with integer
    counts the result is identical for any reduction order, so the optional
    thread pool cannot change the output.
    """
    if len(corpus) == 0:
        raise AssocError("empty corpus: attribute and codec cardinalities are unknown")
    m = corpus.num_scales
    if not 0 <= scale < m:
        raise AssocError(f"scale out of range: {scale} with {m} scales")
    n_attr = corpus.content_cardinality
    n_codec = corpus.codec_cardinality
    counts = np.zeros((n_attr, n_codec), dtype=np.int64)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(lambda u: _count_utterance(u, scale, n_attr, n_codec), corpus):
                counts += part
    else:
        for u in corpus:
            counts += _count_utterance(u, scale, n_attr, n_codec)
    return CooccurrenceMatrix(scale=scale, counts=counts, total=int(counts.sum()))


def empty_cooccurrence(scale, n_attr, n_codec):
    return CooccurrenceMatrix(scale=scale, counts=np.zeros((n_attr, n_codec), dtype=np.int64), total=0)


def rank_associations(matrix):
    """Sort each codec token's attribute counts into shares.

    Ties break toward the lower attribute index so rankings are
    deterministic across platforms.
    """
    counts = matrix.counts
    n_attr, n_codec = counts.shape
    support = counts.sum(axis=0)
    attr_ids, shares = [], []
    for c in range(n_codec):
        col = counts[:, c]
        nz = np.nonzero(col)[0]
        if nz.size == 0:
            attr_ids.append(np.empty(0, dtype=np.int64))
            shares.append(np.empty(0, dtype=np.float64))
            continue
        order = nz[np.lexsort((nz, -col[nz]))]
        attr_ids.append(order.astype(np.int64))
        shares.append(col[order] / support[c])
    return AssociationRanking(
        num_attr=n_attr, attr_ids=attr_ids, shares=shares, column_support=support
    )


def topk_usage_curve(ranking, k_max, weighted=False):
    """Mean cumulative share of the top-k attribute tokens, in percent.

    Averaged over used codec tokens only; ``weighted=True`` weights each
    token by its frame support instead of uniformly.
    """
    if k_max < 1:
        raise AssocError("k_max must be >= 1")
    used = np.nonzero(ranking.used)[0]
    if used.size == 0:
        raise AssocError("no codec token was ever observed; top-k curve undefined")
    curves = np.empty((used.size, k_max))
    for row, c in enumerate(used):
        cum = np.cumsum(ranking.shares[c])
        if cum.size >= k_max:
            curves[row] = cum[:k_max]
        else:
            curves[row, : cum.size] = cum
            curves[row, cum.size :] = cum[-1]
    if weighted:
        w = ranking.column_support[used].astype(np.float64)
        curve = (curves * w[:, None]).sum(axis=0) / w.sum()
    else:
        curve = curves.mean(axis=0)
    return curve * 100.0


def predominant_mapping(ranking):
    """Map every used codec token to its rank-1 attribute token."""
    out = {}
    for c in np.nonzero(ranking.used)[0]:
        out[int(c)] = int(ranking.attr_ids[c][0])
    return out


def filter_by_content(corpus, scale, attr_token, threads=1):
    """Group frames whose content equals ``attr_token`` by codec token.

    Reports per codec token the frame count plus mean and population
    standard deviation of the voiced pitch values; unvoiced frames are
    counted but excluded from the statistics (NaN when none are voiced).
    """
    if len(corpus) == 0:
        raise AssocError("empty corpus")
    m = corpus.num_scales
    if not 0 <= scale < m:
        raise AssocError(f"scale out of range: {scale} with {m} scales")
    n_attr = corpus.content_cardinality
    if not 0 <= attr_token < n_attr:
        raise AssocError(f"attribute token out of range: {attr_token} with cardinality {n_attr}")
    n_codec = corpus.codec_cardinality

    counts = np.zeros(n_codec, dtype=np.int64)
    voiced_counts = np.zeros(n_codec, dtype=np.int64)
    pitch_sum = np.zeros(n_codec)
    pitch_sq_sum = np.zeros(n_codec)
    for u in corpus:
        a = align_streams(u)
        match = a.content == attr_token
        if not match.any():
            continue
        toks = a.codec_tokens[scale][match]
        pitch = a.pitch_hz[match]
        counts += np.bincount(toks, minlength=n_codec)
        voiced = pitch > 0
        vt = toks[voiced]
        voiced_counts += np.bincount(vt, minlength=n_codec)
        pitch_sum += np.bincount(vt, weights=pitch[voiced], minlength=n_codec)
        pitch_sq_sum += np.bincount(vt, weights=pitch[voiced] ** 2, minlength=n_codec)

    present = np.nonzero(counts)[0]
    if present.size == 0:
        raise AssocError(f"no frames matched content token {attr_token}")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(voiced_counts > 0, pitch_sum / np.maximum(voiced_counts, 1), np.nan)
        var = np.where(
            voiced_counts > 0,
            pitch_sq_sum / np.maximum(voiced_counts, 1) - mean**2,
            np.nan,
        )
    std = np.sqrt(np.maximum(var, 0.0))
    return PitchConditionedSet(
        filter_token=int(attr_token),
        codec_tokens=present.astype(np.int64),
        counts=counts[present],
        mean_pitch_hz=mean[present],
        std_pitch_hz=std[present],
    )


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_cooccurrence_csv(matrix, path):
    """Non-zero cells as ``attr_token,codec_token,count`` rows."""
    rows = np.argwhere(matrix.counts > 0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("attr_token,codec_token,count\n")
        for a, c in rows:
            fh.write(f"{a},{c},{matrix.counts[a, c]}\n")


def write_topk_csv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,mean_share_percent\n")
        for k, v in enumerate(curve, start=1):
            fh.write(f"{k},{v:.6f}\n")


def write_pitch_set_csv(pset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("codec_token,count,mean_pitch_hz,std_pitch_hz\n")
        for c, n, mu, sd in zip(pset.codec_tokens, pset.counts, pset.mean_pitch_hz, pset.std_pitch_hz):
            fh.write(f"{c},{n},{mu:.6f},{sd:.6f}\n")
