"""Two-component t-SNE of codebook vectors and utterance-averaged
embeddings, with deterministic CSV/SVG emission.

The gradient descent deviates from the classic adaptive-gains scheme in one
way: after the early-exaggeration phase every step is accepted only if it
does not increase KL(P||Q); otherwise the step size is halved (eventually
dropping the momentum term), which makes the recorded KL trace provably
non-increasing from iteration 251 on. Exact mode recomputes the dense
Student-t kernel per evaluation; barnes_hut mode sparsifies the attraction to
the 3*perplexity strongest affinities per point and approximates the
repulsion with a quadtree opened by the s/d < theta criterion. Exact mode
is the correctness oracle; the reported final KL is always computed
exactly, so the two modes are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import NumericError


class ProjectionError(ValueError):
    pass


MAX_BRACKET_STEPS = 200
MAX_BISECT_STEPS = 50
MAX_HALVINGS = 60
DROP_MOMENTUM_AFTER = 20


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration_factor: float = 12.0
    early_exaggeration_iters: int = 250
    step_size: float = 200.0
    momentum_start: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0
    mode: str = "exact"  # "exact" | "barnes_hut"
    theta: float = 0.5

    def __post_init__(self):
        if self.iterations < 250:
            raise ProjectionError("iterations must be >= 250")
        if self.mode not in ("exact", "barnes_hut"):
            raise ProjectionError(f"unknown mode {self.mode!r}")
        if self.theta < 0:
            raise ProjectionError("theta must be >= 0")


@dataclass(eq=False)
class Embedding2D:
    coords: np.ndarray  # (N, 2) float64
    kl: float
    trace: list = field(default_factory=list)  # (iteration, kl) pairs


def _squared_distances(x):
    sq = (x**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _row_perplexity(d2_row, beta):
    """Conditional distribution and its perplexity (2^H, H in bits)."""
    shifted = d2_row - d2_row.min()
    p = np.exp(-beta * shifted)
    total = p.sum()
    p /= total
    nz = p > 0
    h_bits = float(-(p[nz] * np.log2(p[nz])).sum())
    return p, 2.0**h_bits


def pairwise_affinities(x, perplexity, tol=1e-5, return_sigmas=False):
    """Symmetric affinity matrix with per-point Gaussian bandwidths.

    For each point a binary search finds the bandwidth whose conditional
    distribution has the target perplexity within ``tol`` relative
    tolerance (or stops after 50 bisections). Geometries where no
    bandwidth can reach the target (e.g. all neighbors equidistant) raise
    "unreachable perplexity". The result is symmetrized and normalized to
    total sum 1 with a zero diagonal.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ProjectionError("need at least 2 points")
    n = x.shape[0]
    if not 1.0 <= perplexity <= n - 1:
        raise ProjectionError(f"perplexity {perplexity} outside [1, {n - 1}]")
    d2 = _squared_distances(x)
    cond = np.zeros((n, n))
    sigmas = np.zeros(n)
    others = [np.delete(np.arange(n), i) for i in range(n)]

    for i in range(n):
        row = d2[i, others[i]]
        beta, beta_lo, beta_hi = 1.0, None, None
        p, perp = _row_perplexity(row, beta)
        for _ in range(MAX_BRACKET_STEPS):
            if abs(perp - perplexity) <= tol * perplexity:
                break
            if perp > perplexity:
                beta_lo = beta
                if beta_hi is None:
                    beta *= 2.0
                    p, perp = _row_perplexity(row, beta)
                    continue
            else:
                beta_hi = beta
                if beta_lo is None:
                    beta /= 2.0
                    p, perp = _row_perplexity(row, beta)
                    continue
            break
        if abs(perp - perplexity) > tol * perplexity and (beta_lo is None or beta_hi is None):
            raise ProjectionError(
                f"unreachable perplexity: point {i} cannot bracket target {perplexity}"
            )
        for _ in range(MAX_BISECT_STEPS):
            if abs(perp - perplexity) <= tol * perplexity:
                break
            beta = 0.5 * (beta_lo + beta_hi)
            p, perp = _row_perplexity(row, beta)
            if perp > perplexity:
                beta_lo = beta
            else:
                beta_hi = beta
        cond[i, others[i]] = p
        sigmas[i] = np.sqrt(0.5 / beta)

    p_joint = (cond + cond.T) / (2.0 * n)
    p_joint /= p_joint.sum()
    if return_sigmas:
        return p_joint, sigmas
    return p_joint


# ---------------------------------------------------------------------------
# quadtree for the repulsive term
# ---------------------------------------------------------------------------

class _QuadTree:
    """Flat quadtree over 2-D points with center-of-mass summaries.

    Leaves hold up to ``leaf_size`` points and are evaluated exactly;
    internal cells are accepted when side / distance < theta.
    """

    def __init__(self, points, leaf_size=16):
        self.points = points
        self.leaf_size = leaf_size
        self.com = []
        self.count = []
        self.side = []
        self.children = []  # 4-tuples of node ids, -1 for empty
        self.leaf_idx = []
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        center = (lo + hi) / 2.0
        half = float(max((hi - lo).max() / 2.0, 1e-12)) * 1.0001
        self._build(np.arange(points.shape[0]), center, half)

    def _build(self, idx, center, half):
        node = len(self.com)
        pts = self.points[idx]
        self.com.append(pts.mean(axis=0))
        self.count.append(idx.size)
        self.side.append(2.0 * half)
        self.children.append(None)
        self.leaf_idx.append(None)
        if idx.size <= self.leaf_size:
            self.leaf_idx[node] = idx
            return node
        east = pts[:, 0] > center[0]
        north = pts[:, 1] > center[1]
        quads = [~east & ~north, east & ~north, ~east & north, east & north]
        shifts = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]) * half
        kids = []
        for q, sh in zip(quads, shifts):
            sub = idx[q]
            if sub.size == 0:
                kids.append(-1)
            elif sub.size == idx.size:
                # all points share a quadrant (coincident-ish); force a leaf
                self.leaf_idx[node] = idx
                self.children[node] = None
                return node
            else:
                kids.append(self._build(sub, center + sh, half / 2.0))
        self.children[node] = kids
        return node

    def repulsion(self, theta):
        """Per-point sums of w^2 * (y_i - y_cell) and of w, w = 1/(1+d^2)."""
        pts = self.points
        n = pts.shape[0]
        force = np.zeros((n, 2))
        zrow = np.zeros(n)
        theta2 = theta * theta
        stack = [(0, np.arange(n))]
        while stack:
            node, active = stack.pop()
            leaf = self.leaf_idx[node]
            if leaf is not None:
                diff = pts[active][:, None, :] - pts[leaf][None, :, :]
                d2 = (diff**2).sum(axis=2)
                w = 1.0 / (1.0 + d2)
                w[d2 == 0.0] = 0.0  # self (and exactly coincident) pairs
                zrow[active] += w.sum(axis=1)
                force[active] += ((w**2)[:, :, None] * diff).sum(axis=1)
                continue
            diff = pts[active] - self.com[node]
            d2 = (diff**2).sum(axis=1)
            far = (self.side[node] ** 2 < theta2 * d2) & (d2 > 0.0)
            if far.any():
                w = 1.0 / (1.0 + d2[far])
                cnt = self.count[node]
                zrow[active[far]] += cnt * w
                force[active[far]] += cnt * (w**2)[:, None] * diff[far]
            near = active[~far]
            if near.size:
                for child in self.children[node]:
                    if child >= 0:
                        stack.append((child, near))
        return force, zrow


# ---------------------------------------------------------------------------
# objective evaluation
# ---------------------------------------------------------------------------

class _ExactObjective:
    def __init__(self, p):
        self.p = p
        nz = p > 0
        self.p_log_p = float((p[nz] * np.log(p[nz])).sum())

    def kl_and_cache(self, y):
        w = 1.0 / (1.0 + _squared_distances(y))
        np.fill_diagonal(w, 0.0)
        z = w.sum()
        kl = self.p_log_p - float((self.p * np.log(np.maximum(w, 1e-300))).sum()) + np.log(z)
        return kl, (w, z)

    def gradient(self, y, cache, exaggeration):
        w, z = cache
        q = w / z
        g = (exaggeration * self.p - q) * w
        grad = 4.0 * (g.sum(axis=1)[:, None] * y - g @ y)
        return grad


class _BarnesHutObjective:
    """Sparse attraction + quadtree repulsion; same interface as exact."""

    def __init__(self, p, perplexity, theta):
        self.theta = theta
        n = p.shape[0]
        k = min(n - 1, max(1, int(3 * perplexity)))
        keep = np.zeros_like(p, dtype=bool)
        cols = np.argsort(-p, axis=1)[:, :k]
        keep[np.arange(n)[:, None], cols] = True
        keep |= keep.T
        sparse = np.where(keep, p, 0.0)
        sparse /= sparse.sum()
        self.rows, self.cols = np.nonzero(sparse)
        self.vals = sparse[self.rows, self.cols]
        self.p_log_p = float((self.vals * np.log(self.vals)).sum())

    def kl_and_cache(self, y):
        diff = y[self.rows] - y[self.cols]
        w_edge = 1.0 / (1.0 + (diff**2).sum(axis=1))
        tree = _QuadTree(y)
        force, zrow = tree.repulsion(self.theta)
        z = float(zrow.sum())
        kl = self.p_log_p - float((self.vals * np.log(w_edge)).sum()) + np.log(z)
        return kl, (diff, w_edge, force, z)

    def gradient(self, y, cache, exaggeration):
        diff, w_edge, force, z = cache
        n = y.shape[0]
        attract = np.zeros((n, 2))
        np.add.at(attract, self.rows, (exaggeration * self.vals * w_edge)[:, None] * diff)
        return 4.0 * (attract - force / z)


def tsne(x, cfg=None):
    """Project rows of ``x`` to 2-D by t-SNE; deterministic given the seed.

    Returns an Embedding2D whose trace holds one (iteration, kl) pair per
    iteration; the final ``kl`` field is always the exact value.
    """
    cfg = cfg or TsneConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise ProjectionError("t-SNE needs at least 4 points")
    n = x.shape[0]
    if not 1.0 <= cfg.perplexity <= (n - 1) / 3.0:
        raise ProjectionError(f"perplexity {cfg.perplexity} outside [1, {(n - 1) / 3:.2f}] for {n} points")
    if not np.all(np.isfinite(x)):
        raise ProjectionError("input contains non-finite values")

    p = pairwise_affinities(x, cfg.perplexity)
    exact_obj = _ExactObjective(p)
    obj = exact_obj if cfg.mode == "exact" else _BarnesHutObjective(p, cfg.perplexity, cfg.theta)

    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    eta = cfg.step_size
    ee_iters = cfg.early_exaggeration_iters
    trace = []
    kl_cur, cache = obj.kl_and_cache(y)

    for t in range(1, cfg.iterations + 1):
        if t <= ee_iters:
            grad = obj.gradient(y, cache, cfg.early_exaggeration_factor)
            velocity = cfg.momentum_start * velocity - eta * grad
            y = y + velocity
            kl_cur, cache = obj.kl_and_cache(y)
            if t == ee_iters:
                # fresh start for the guarded phase
                velocity = np.zeros_like(velocity)
                eta = cfg.step_size
        else:
            grad = obj.gradient(y, cache, 1.0)
            v_try = velocity
            accepted = False
            halved = False
            for attempt in range(MAX_HALVINGS):
                candidate = y + cfg.momentum_late * v_try - eta * grad
                kl_c, cache_c = obj.kl_and_cache(candidate)
                if np.isfinite(kl_c) and kl_c <= kl_cur:
                    velocity = candidate - y
                    y = candidate
                    kl_cur, cache = kl_c, cache_c
                    accepted = True
                    break
                eta *= 0.5
                halved = True
                if attempt + 1 == DROP_MOMENTUM_AFTER:
                    v_try = np.zeros_like(velocity)
            if not accepted:
                velocity = np.zeros_like(velocity)  # stuck; keep y (KL unchanged)
            elif not halved:
                # clean acceptance: recover step size (the accepted step
                # already satisfied the non-increase contract)
                eta = min(eta * 1.1, cfg.step_size)
        if not np.isfinite(kl_cur) or not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite layout at iteration {t}")
        trace.append((t, float(kl_cur)))

    final_kl, _ = exact_obj.kl_and_cache(y)
    return Embedding2D(coords=y, kl=float(final_kl), trace=trace)


# ---------------------------------------------------------------------------
# utterance-level embeddings and labeling
# ---------------------------------------------------------------------------

def utterance_mean_embeddings(corpus, table, scale):
    """Per utterance: time-average of the codebook rows its tokens select.

    Returns (means, speaker_ids) where means is (num_utterances, dim).
    """
    from .corpus import align_streams

    table = np.asarray(table, dtype=np.float64)
    means, speakers = [], []
    for u in corpus:
        a = align_streams(u)
        toks = a.codec_tokens[scale]
        if toks.size and toks.max() >= table.shape[0]:
            raise ProjectionError(
                f"token {int(toks.max())} outside codebook with {table.shape[0]} rows"
            )
        means.append(table[toks].mean(axis=0))
        speakers.append(a.speaker_id)
    return np.asarray(means), speakers


def load_category_file(path):
    """CSV of ``attr_token,category`` rows (optional header, may be empty)."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ProjectionError(f"category file line {lineno}: expected 2 columns")
            token, category = parts[0].strip(), parts[1].strip()
            if lineno == 1 and token == "attr_token":
                continue
            try:
                out[int(token)] = category
            except ValueError:
                raise ProjectionError(f"category file line {lineno}: bad token {token!r}") from None
    return out


@dataclass(frozen=True)
class LabeledPoint:
    id: str
    x: float
    y: float
    label: str
    category: str


def color_by_mapping(points, mapping, categories=None, ids=None):
    """Attach attribute labels (and optional sound categories) to points.

    ``mapping`` maps a point's integer id (codec token) to an attribute
    token; points without a mapping are labeled "unmapped".
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    ids = list(range(n)) if ids is None else list(ids)
    categories = categories or {}
    rows = []
    for i in range(n):
        pid = ids[i]
        if isinstance(pid, (int, np.integer)) and int(pid) in mapping:
            attr = mapping[int(pid)]
            label = str(attr)
            category = categories.get(attr, "")
        else:
            label, category = "unmapped", ""
        rows.append(LabeledPoint(str(pid), float(points[i, 0]), float(points[i, 1]), label, category))
    return rows


# ---------------------------------------------------------------------------
# deterministic file emission
# ---------------------------------------------------------------------------

PALETTE = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#d62728",
]


def write_points_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,x,y,label,category\n")
        for r in rows:
            fh.write(f"{r.id},{r.x:.6f},{r.y:.6f},{r.label},{r.category}\n")


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,kl\n")
        for it, kl in trace:
            fh.write(f"{it},{kl:.9f}\n")


def scatter_svg(rows, title="", size=720, margin=48, radius=4.0):
    """Categorical scatter as an SVG string (bytes are reproducible)."""
    xs = np.array([r.x for r in rows])
    ys = np.array([r.y for r in rows])
    span_x = max(float(xs.max() - xs.min()), 1e-9) if rows else 1.0
    span_y = max(float(ys.max() - ys.min()), 1e-9) if rows else 1.0
    inner = size - 2 * margin

    color_keys = sorted({(r.category or r.label) for r in rows})
    color_of = {k: PALETTE[i % len(PALETTE)] for i, k in enumerate(color_keys)}

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{size / 2:.1f}" y="24" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="16">{title}</text>')
    for r in rows:
        px = margin + (r.x - float(xs.min())) / span_x * inner
        py = size - margin - (r.y - float(ys.min())) / span_y * inner
        key = r.category or r.label
        parts.append(
            f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{radius}" fill="{color_of[key]}" '
            f'fill-opacity="0.8"><title>{r.id}: {r.label}</title></circle>'
        )
    for i, key in enumerate(color_keys[:24]):
        ly = margin + 16 * i
        parts.append(f'<circle cx="{margin / 2:.1f}" cy="{ly}" r="5" fill="{color_of[key]}"/>')
        parts.append(f'<text x="{margin / 2 + 10:.1f}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="10">{key}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_scatter_svg(rows, path, title=""):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scatter_svg(rows, title=title))
