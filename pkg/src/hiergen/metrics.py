"""Evaluation metrics: surface sampling, Chamfer/EMD, normalized tree edit
distance, coverage/quality and the Frechet feature distance."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree


class MetricError(ValueError):
    pass


# -- point sampling ------------------------------------------------------------


def sample_surface(mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic per seed."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if mesh.faces.size == 0 or total <= 0:
        raise MetricError("sample_surface: degenerate mesh with no area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]
    return (1 - u - v)[:, None] * tri[:, 0] + u[:, None] * tri[:, 1] + v[:, None] * tri[:, 2]


# -- point-set distances ---------------------------------------------------------


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer: empty point set")
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float((d_ab ** 2).mean() + (d_ba ** 2).mean())


def emd(a: np.ndarray, b: np.ndarray, exact_limit: int = 256,
        epsilon_factor: float = 0.01) -> float:
    """Mean distance under the best bijection between equal-size point sets.

    Exact Hungarian assignment up to `exact_limit` points; above that an
    auction approximation whose final epsilon keeps the total cost within
    about n*eps (eps = epsilon_factor * mean pairwise distance / n) of optimal.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) != len(b):
        raise MetricError(f"emd: size mismatch {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise MetricError("emd: empty point set")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    if len(a) <= exact_limit:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    assignment = _auction_assignment(cost, epsilon_factor)
    return float(cost[np.arange(len(a)), assignment].mean())


def _auction_assignment(cost: np.ndarray, epsilon_factor: float) -> np.ndarray:
    """Bertsekas forward auction with epsilon scaling (minimization)."""
    n = cost.shape[0]
    value = -cost  # auction maximizes value
    eps_final = epsilon_factor * max(cost.mean(), 1e-12) / n
    eps = max(value.max() - value.min(), eps_final) / 2.0
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.int64)
    assigned = np.full(n, -1, dtype=np.int64)
    while True:
        owner[:] = -1
        assigned[:] = -1
        unassigned = list(range(n))
        while unassigned:
            i = unassigned.pop()
            gains = value[i] - prices
            j = int(np.argmax(gains))
            best = gains[j]
            gains[j] = -np.inf
            second = gains.max() if n > 1 else best
            prices[j] += best - second + eps
            prev = owner[j]
            owner[j] = i
            assigned[i] = j
            if prev >= 0:
                assigned[prev] = -1
                unassigned.append(prev)
        if eps <= eps_final:
            return assigned
        eps = max(eps / 4.0, eps_final)


# -- tree edit distance -----------------------------------------------------------


class _AnnotatedTree:
    """Post-order labels, leftmost-leaf indices and keyroots (Zhang-Shasha)."""

    def __init__(self, root, label_of, children_of):
        self.labels: list = []
        self.lmld: list[int] = []  # leftmost leaf descendant, post-order ids
        idx_of = {}
        order = []
        visit = [(root, False)]
        while visit:
            node, processed = visit.pop()
            if processed:
                order.append(node)
                continue
            visit.append((node, True))
            for ch in reversed(children_of(node)):
                visit.append((ch, False))
        for i, node in enumerate(order):
            idx_of[id(node)] = i
            self.labels.append(label_of(node))
            kids = children_of(node)
            if kids:
                self.lmld.append(self.lmld[idx_of[id(kids[0])]])
            else:
                self.lmld.append(i)
        seen = set()
        keyroots = []
        for i in range(len(order) - 1, -1, -1):
            if self.lmld[i] not in seen:
                seen.add(self.lmld[i])
                keyroots.append(i)
        self.keyroots = sorted(keyroots)

    def __len__(self):
        return len(self.labels)


def tree_edit_distance(tree_a, tree_b, label_of=None, children_of=None,
                       normalized: bool = True) -> float:
    """Zhang-Shasha ordered tree edit distance with unit costs.

    Accepts any node objects via `label_of` / `children_of`; defaults work for
    objects exposing `.label` and `.children`.  Normalization divides by the
    larger node count.
    """
    label_of = label_of or (lambda n: n.label)
    children_of = children_of or (lambda n: n.children)
    ta = _AnnotatedTree(tree_a, label_of, children_of)
    tb = _AnnotatedTree(tree_b, label_of, children_of)
    dist = np.zeros((len(ta), len(tb)))

    for i in ta.keyroots:
        for j in tb.keyroots:
            _tree_dist(ta, tb, i, j, dist)

    raw = float(dist[len(ta) - 1, len(tb) - 1])
    if not normalized:
        return raw
    return raw / max(len(ta), len(tb))


def _tree_dist(ta, tb, i, j, dist):
    li, lj = ta.lmld[i], tb.lmld[j]
    m, n = i - li + 2, j - lj + 2
    fd = np.zeros((m, n))
    fd[1:, 0] = np.arange(1, m)
    fd[0, 1:] = np.arange(1, n)
    for x in range(1, m):
        for y in range(1, n):
            ai, bj = li + x - 1, lj + y - 1
            if ta.lmld[ai] == li and tb.lmld[bj] == lj:
                relabel = 0.0 if ta.labels[ai] == tb.labels[bj] else 1.0
                fd[x, y] = min(fd[x - 1, y] + 1.0,
                               fd[x, y - 1] + 1.0,
                               fd[x - 1, y - 1] + relabel)
                dist[ai, bj] = fd[x, y]
            else:
                p = ta.lmld[ai] - li
                q = tb.lmld[bj] - lj
                fd[x, y] = min(fd[x - 1, y] + 1.0,
                               fd[x, y - 1] + 1.0,
                               fd[p, q] + dist[ai, bj])


# -- set-level generation scores -----------------------------------------------------


def coverage_quality(generated: list, real: list, distance_fn,
                     reference: tuple[float, float] | None = None) -> tuple[float, float]:
    """Coverage: mean over real of distance to the closest generated shape.
    Quality: mean over generated of distance to the closest real shape.
    Optionally normalized by a reference method's (coverage, quality)."""
    if not generated or not real:
        raise MetricError("coverage_quality: empty shape set")
    matrix = np.array([[distance_fn(g, r) for r in real] for g in generated])
    coverage = float(matrix.min(axis=0).mean())
    quality = float(matrix.min(axis=1).mean())
    if reference is not None:
        coverage /= reference[0]
        quality /= reference[1]
    return coverage, quality


# -- Frechet feature distance ----------------------------------------------------------


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     shrinkage: float = 1e-6) -> float:
    """|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)) between Gaussian fits.

    The matrix square root is taken by eigendecomposition of the symmetrized
    product sqrt(Sa) Sb sqrt(Sa); tiny negative round-off is clamped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"frechet_distance: dimension mismatch {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim) + shrinkage * np.eye(dim)
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim) + shrinkage * np.eye(dim)

    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0, None))) @ vecs_a.T
    product = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh(0.5 * (product + product.T))
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()

    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)
