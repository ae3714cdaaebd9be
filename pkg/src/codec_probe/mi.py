"""Mutual information between codec tokens and speech attributes.

Two estimators: an exact discrete plug-in over empirical frequencies (the
oracle) and a variational conditional model q(y|x) evaluated contrastively
(an upper-bound-style estimate at the variational optimum):

    estimate = mean_i ln q(y_i | x_i)
             - mean over ordered pairs (i, j), i != j, of ln q(y_j | x_i)

Both terms are combined pairwise as (lnq_ii - lnq_ij) + (lnq_jj - lnq_ji)
so that a q that ignores x cancels to exactly 0.0 in floating point. For
n > EXACT_PAIR_LIMIT the full U-statistic is replaced by a seeded random
pairing (each i contrasted against one partner), which keeps the same
cancellation property.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import align_streams, BinningConfig

LN_2PI = float(np.log(2.0 * np.pi))
EXACT_PAIR_LIMIT = 4096
PAIR_BLOCK = 1024


class MiError(ValueError):
    pass


@dataclass(eq=False)
class PairedSamples:
    """x: codec tokens (one scale); y: discrete tokens or real scalars."""

    x: np.ndarray
    y: np.ndarray
    discrete_y: bool

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64 if self.discrete_y else np.float64)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise MiError(f"x and y must be equal-length vectors, got {self.x.shape} vs {self.y.shape}")
        if self.n < 1:
            raise MiError("empty sample set")

    @property
    def n(self):
        return self.x.size


def plugin_mi(samples):
    """Plug-in MI in nats from the empirical joint of two discrete vectors."""
    if not samples.discrete_y:
        raise MiError("plug-in estimator requires discrete y")
    xv, xi = np.unique(samples.x, return_inverse=True)
    yv, yi = np.unique(samples.y, return_inverse=True)
    joint = np.bincount(xi * yv.size + yi, minlength=xv.size * yv.size).reshape(xv.size, yv.size)
    joint = joint / samples.n
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    ratio = np.ones_like(joint)
    np.divide(joint, px * py, out=ratio, where=mask)
    return max(float(np.sum(joint[mask] * np.log(ratio[mask]))), 0.0)


def empirical_entropy(values):
    """Entropy in nats of the empirical distribution of a discrete vector."""
    _, counts = np.unique(values, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# variational conditional model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ClubConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    lr: float = 1e-3
    batch_size: int = 256
    label_smoothing: float = 1e-3
    logvar_clamp: float = 10.0


class ClubEstimator:
    """q(y|x): token embedding -> hidden layer (GELU) -> head.

    The head is categorical over y's cardinality for discrete y, or a
    Gaussian mean/log-variance pair for continuous y (fitted on internally
    standardized y; the contrastive estimate is invariant to that affine
    map because both of its terms shift equally).
    """

    def __init__(self, x_cardinality, y_kind, y_cardinality=None, seed=0, config=None, dtype=np.float32):
        if y_kind not in ("categorical", "gaussian"):
            raise MiError(f"unknown head kind {y_kind!r}")
        if y_kind == "categorical" and (y_cardinality is None or y_cardinality < 1):
            raise MiError("categorical head needs a positive y cardinality")
        self.x_cardinality = int(x_cardinality)
        self.y_kind = y_kind
        self.y_cardinality = None if y_cardinality is None else int(y_cardinality)
        self.seed = int(seed)
        self.config = config or ClubConfig()
        self.dtype = dtype
        self.y_shift = 0.0
        self.y_scale = 1.0
        self.training_log = []

        rng = np.random.default_rng(seed)
        cfg = self.config
        self.embed = nn.Embedding(self.x_cardinality, cfg.embed_dim, rng, dtype, "club.embed")
        self.fc = nn.Linear(cfg.embed_dim, cfg.hidden_dim, rng, dtype, "club.fc")
        if y_kind == "categorical":
            self.head = nn.Linear(cfg.hidden_dim, self.y_cardinality, rng, dtype, "club.head")
            self.head_logvar = None
        else:
            self.head = nn.Linear(cfg.hidden_dim, 1, rng, dtype, "club.head_mean")
            self.head_logvar = nn.Linear(cfg.hidden_dim, 1, rng, dtype, "club.head_logvar")

    def parameters(self):
        params = self.embed.parameters() + self.fc.parameters() + self.head.parameters()
        if self.head_logvar is not None:
            params += self.head_logvar.parameters()
        return params

    def _hidden(self, x_ids):
        return nn.gelu(self.fc(self.embed(x_ids)))

    def joint_nll(self, x_ids, y):
        """Mean negative log-likelihood of joint pairs (a Tensor)."""
        h = self._hidden(x_ids)
        if self.y_kind == "categorical":
            return nn.cross_entropy(self.head(h), y, label_smoothing=self.config.label_smoothing)
        c = self.config.logvar_clamp
        y_std = ((np.asarray(y, dtype=np.float64) - self.y_shift) / self.y_scale).astype(self.dtype)
        mu = self.head(h)
        lv = nn.clip(self.head_logvar(h), -c, c)
        diff = nn.sub(mu, y_std[:, None])
        nll = nn.add(nn.mul(nn.mul(diff, diff), nn.exp(nn.scale(lv, -1.0))), lv)
        return nn.scale(nn.add_const(nn.mean_all(nll), LN_2PI), 0.5)

    # -- inference-time log densities (plain numpy) --

    def log_prob_rows(self, x_ids):
        """(n, K) log q(y = k | x_i) for the categorical head."""
        logits = self.head(self._hidden(x_ids)).data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def gaussian_params(self, x_ids):
        """(mu_i, logvar_i) rows in standardized y units."""
        h = self._hidden(x_ids)
        c = self.config.logvar_clamp
        mu = self.head(h).data.astype(np.float64)[:, 0]
        lv = np.clip(self.head_logvar(h).data.astype(np.float64)[:, 0], -c, c)
        return mu, lv

    def check_samples(self, samples):
        if self.y_kind == "categorical":
            if not samples.discrete_y:
                raise MiError("estimator has a categorical head but y is continuous")
            if samples.y.max() >= self.y_cardinality or samples.y.min() < 0:
                raise MiError("y value outside the trained cardinality")
        elif samples.discrete_y:
            raise MiError("estimator has a Gaussian head but y is discrete")
        if samples.x.max() >= self.x_cardinality or samples.x.min() < 0:
            raise MiError("x token outside the trained cardinality")


def club_train(samples, epochs=50, seed=0, config=None):
    """Fit q(y|x) by minimizing joint-pair NLL with Adam; deterministic."""
    if samples.n < 32:
        raise MiError(f"need at least 32 samples to fit q(y|x), got {samples.n}")
    if samples.discrete_y:
        est = ClubEstimator(
            x_cardinality=int(samples.x.max()) + 1,
            y_kind="categorical",
            y_cardinality=int(samples.y.max()) + 1,
            seed=seed,
            config=config,
        )
    else:
        est = ClubEstimator(x_cardinality=int(samples.x.max()) + 1, y_kind="gaussian", seed=seed, config=config)
        est.y_shift = float(samples.y.mean())
        est.y_scale = float(max(samples.y.std(), 1e-6))

    opt = nn.Adam(est.parameters(), lr=est.config.lr)
    rng = np.random.default_rng(seed + 1)
    n, bs = samples.n, est.config.batch_size
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            opt.zero_grad()
            with nn.Graph() as g:
                loss = est.joint_nll(samples.x[idx], samples.y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise nn.NumericError(f"non-finite training loss at epoch {epoch}")
            g.backward(loss)
            opt.step()
            total += value * idx.size
        est.training_log.append(total / n)
    return est


def _pair_sum_exact(diag, row_block_fn, n):
    """Sum over unordered pairs of the antisymmetrized contrast.

    ``row_block_fn(lo, hi)`` returns the (hi-lo, n) matrix of
    ln q(y_j | x_i) for i in [lo, hi). Memory stays bounded by PAIR_BLOCK
    rows at a time; diagonal blocks take the strict upper triangle.
    """
    total = 0.0
    starts = list(range(0, n, PAIR_BLOCK))
    for bi, lo_i in enumerate(starts):
        hi_i = min(lo_i + PAIR_BLOCK, n)
        gi = row_block_fn(lo_i, hi_i)  # (Bi, n)
        ci = diag[lo_i:hi_i, None] - gi
        inner = ci[:, lo_i:hi_i]
        paired = inner + inner.T  # fl(a-b) + fl(b-a) cancels exactly
        total += float(np.triu(paired, 1).sum())
        for lo_j in starts[bi + 1 :]:
            hi_j = min(lo_j + PAIR_BLOCK, n)
            cj = diag[lo_j:hi_j, None] - row_block_fn(lo_j, hi_j)
            cross = ci[:, lo_j:hi_j] + cj[:, lo_i:hi_i].T
            total += float(cross.sum())
    return total


def club_estimate(estimator, samples, seed=0):
    """Contrastive estimate in nats; see the module docstring for the form."""
    estimator.check_samples(samples)
    n = samples.n
    if n < 2:
        raise MiError("need at least 2 samples for the contrastive estimate")

    if estimator.y_kind == "categorical":
        rows = estimator.log_prob_rows(samples.x)  # (n, K)
        diag = rows[np.arange(n), samples.y]

        def row_block(lo, hi):
            return rows[lo:hi][:, samples.y]

        def pair_terms(i_idx, j_idx):
            return (diag[i_idx] - rows[i_idx, samples.y[j_idx]]) + (
                diag[j_idx] - rows[j_idx, samples.y[i_idx]]
            )

    else:
        mu, lv = estimator.gaussian_params(samples.x)
        y_std = (samples.y - estimator.y_shift) / estimator.y_scale

        def log_density(mu_i, lv_i, y_j):
            return -0.5 * ((y_j - mu_i) ** 2 * np.exp(-lv_i) + lv_i + LN_2PI)

        diag = log_density(mu, lv, y_std)

        def row_block(lo, hi):
            return log_density(mu[lo:hi, None], lv[lo:hi, None], y_std[None, :])

        def pair_terms(i_idx, j_idx):
            return (diag[i_idx] - log_density(mu[i_idx], lv[i_idx], y_std[j_idx])) + (
                diag[j_idx] - log_density(mu[j_idx], lv[j_idx], y_std[i_idx])
            )

    if n <= EXACT_PAIR_LIMIT:
        total = _pair_sum_exact(diag, row_block, n)
        return total / (n * (n - 1))

    # seeded random pairing: an involution, so the antisymmetric pairwise
    # cancellation (and the exact-zero property for x-independent heads)
    # survives; a leftover odd element contributes an exact zero
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    half = n // 2
    i_idx, j_idx = perm[:half], perm[half : 2 * half]
    return float(pair_terms(i_idx, j_idx).sum()) / n


# ---------------------------------------------------------------------------
# corpus-level report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiCell:
    scale: int
    attribute: str
    estimator: str  # "plugin" | "club"
    nats: float
    n_samples: int
    seed: int


def pooled_frames(corpus, binning=None):
    """Aligned frame-level arrays pooled over a corpus.

    Returns dict with codec (M, n), content (n,), speaker (n,) tokens and
    pitch_hz (n,). Identity pairs carry the utterance's speaker token on
    every frame.
    """
    binning = binning or BinningConfig()
    table = corpus.speaker_table()
    codec_parts, content_parts, speaker_parts, pitch_parts = [], [], [], []
    for u in corpus:
        a = align_streams(u)
        codec_parts.append(a.codec_tokens)
        content_parts.append(a.content)
        speaker_parts.append(np.full(a.length, table[a.speaker_id], dtype=np.int64))
        pitch_parts.append(a.pitch_hz)
    return {
        "codec": np.concatenate(codec_parts, axis=1),
        "content": np.concatenate(content_parts),
        "speaker": np.concatenate(speaker_parts),
        "pitch_hz": np.concatenate(pitch_parts),
        "binning": binning,
    }


def mi_report(corpus, attributes=("content", "pitch", "identity"), epochs=50, seed=0,
              max_samples=20000, min_frames=1000, threads=1):
    """Per (scale, attribute) cell: plug-in (discrete attributes) and the
    contrastive estimate. Pitch uses ln pitch over voiced frames with the
    Gaussian head; the plug-in row is omitted for it.

    Cells are independent; ``threads`` > 1 runs them in a pool. Output
    order and all values are identical regardless of thread count (tasks
    are seeded per cell and assembled in task order)."""
    frames = pooled_frames(corpus)
    n_total = frames["content"].size
    if n_total < min_frames:
        raise MiError(f"corpus has {n_total} aligned frames; need at least {min_frames}")

    rng = np.random.default_rng(seed)
    if n_total > max_samples:
        keep = np.sort(rng.permutation(n_total)[:max_samples])
    else:
        keep = np.arange(n_total)

    m = frames["codec"].shape[0]
    tasks = [(scale, attr) for scale in range(m) for attr in attributes]

    def run_cell(task):
        scale, attr = task
        x = frames["codec"][scale][keep]
        cell_seed = seed + 1000 * scale + {"content": 1, "pitch": 2, "identity": 3}[attr]
        out = []
        if attr == "pitch":
            voiced = frames["pitch_hz"][keep] > 0
            if voiced.sum() < 32:
                raise MiError("not enough voiced frames for pitch MI")
            s = PairedSamples(x[voiced], np.log(frames["pitch_hz"][keep][voiced]), discrete_y=False)
        else:
            y = frames["content"] if attr == "content" else frames["speaker"]
            s = PairedSamples(x, y[keep], discrete_y=True)
            out.append(MiCell(scale, attr, "plugin", plugin_mi(s), s.n, cell_seed))
        est = club_train(s, epochs=epochs, seed=cell_seed)
        out.append(MiCell(scale, attr, "club", club_estimate(est, s, seed=cell_seed), s.n, cell_seed))
        return out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, tasks))
    else:
        results = [run_cell(t) for t in tasks]
    return [cell for group in results for cell in group]


def write_mi_csv(cells, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scale,attribute,estimator,nats,n_samples,seed\n")
        for c in cells:
            fh.write(f"{c.scale},{c.attribute},{c.estimator},{c.nats:.6f},{c.n_samples},{c.seed}\n")
