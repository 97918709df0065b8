"""Graph construction: Laplacian operators, synthetic generation, file loading.

Two fixed spectral operators drive everything downstream:

  * ``l_hat(L) = L - I`` with spectrum inside [-1, 1] (stable domain);
  * ``l_scaled(L) = 0.5 * L`` with spectrum inside [0, 1] (adaptive domain);

both derived from the symmetric normalized Laplacian ``L = I - D^{-1/2} A
D^{-1/2}`` whose spectrum lies in [0, 2].  The maps ``+I`` and ``*0.5`` are
exact in binary floating point, so ``l_hat(L) + I == L`` and
``2 * l_scaled(L) == L`` hold bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .linalg import CsrMatrix
from .seeding import substream

__all__ = [
    "Graph",
    "SbmConfig",
    "edge_homophily",
    "generate_sbm",
    "l_hat",
    "l_scaled",
    "load_graph",
    "make_folds",
    "save_graph",
    "stratified_split",
    "sym_laplacian",
]

MASK_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Graph:
    """Undirected graph with node features, labels and named boolean masks."""

    n: int
    adjacency: CsrMatrix
    features: np.ndarray
    labels: np.ndarray
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.adjacency.n != self.n:
            raise ValueError("adjacency size does not match node count")
        if not self.adjacency.symmetric:
            raise ValueError("adjacency must be flagged symmetric")
        if np.any(self.adjacency.col_idx == self.adjacency.row_expansion()):
            raise ValueError("adjacency must have a zero diagonal")
        if self.features.shape[0] != self.n or self.labels.shape != (self.n,):
            raise ValueError("features/labels do not match node count")
        if self.n and (self.labels.min() < 0):
            raise ValueError("labels must be nonnegative class indices")
        overlap = np.zeros(self.n, dtype=np.int64)
        for name in MASK_NAMES:
            if name in self.masks:
                m = np.asarray(self.masks[name], dtype=bool)
                if m.shape != (self.n,):
                    raise ValueError(f"mask {name!r} has wrong length")
                self.masks[name] = m
                overlap += m
        if np.any(overlap > 1):
            raise ValueError("train/val/test masks overlap")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SbmConfig:
    """Planted-partition generator settings.

    ``homophily`` is the expected fraction of a node's neighbors that share
    its class: intra/inter edge probabilities are solved from it and from the
    expected average degree.
    """

    n: int
    c: int
    homophily: float
    avg_degree: float
    f: int
    feature_noise: float
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.homophily <= 1.0):
            raise ValueError("homophily must lie in [0, 1]")
        if self.avg_degree >= self.n:
            raise ValueError("avg_degree must be smaller than n")
        if self.c < 2 or self.n < self.c:
            raise ValueError("need at least 2 classes and n >= c")
        if self.f < self.c:
            raise ValueError("feature dim must be at least the class count")


def sym_laplacian(adjacency: CsrMatrix) -> CsrMatrix:
    """Symmetric normalized Laplacian ``I - D^{-1/2} A D^{-1/2}``.

    Isolated nodes get a diagonal entry of exactly 1 (their degree-scaling
    terms are defined as 0), keeping the spectrum inside [0, 2].
    """
    if not adjacency.symmetric:
        raise ValueError("sym_laplacian requires a symmetric adjacency")
    n = adjacency.n
    rows = adjacency.row_expansion()
    if np.any(rows == adjacency.col_idx):
        raise ValueError("adjacency must not carry self-loops")
    deg = np.zeros(n)
    np.add.at(deg, rows, adjacency.vals)
    with np.errstate(divide="ignore"):
        dinv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    off_vals = -adjacency.vals * dinv_sqrt[rows] * dinv_sqrt[adjacency.col_idx]
    all_rows = np.concatenate([rows, np.arange(n, dtype=np.int64)])
    all_cols = np.concatenate([adjacency.col_idx, np.arange(n, dtype=np.int64)])
    all_vals = np.concatenate([off_vals, np.ones(n)])
    return CsrMatrix.from_coo(n, all_rows, all_cols, all_vals, symmetric=True)


def l_hat(l_sym: CsrMatrix) -> CsrMatrix:
    """Shift the Laplacian spectrum into [-1, 1]: subtract 1 from the diagonal."""
    vals = l_sym.vals.copy()
    on_diag = l_sym.row_expansion() == l_sym.col_idx
    vals[on_diag] -= 1.0
    return l_sym.with_values(vals)


def l_scaled(l_sym: CsrMatrix) -> CsrMatrix:
    """Scale the Laplacian spectrum into [0, 1]: multiply every entry by 0.5."""
    return l_sym.with_values(0.5 * l_sym.vals)


def generate_sbm(cfg: SbmConfig) -> Graph:
    """Sample a planted-partition graph with controlled homophily.

    Features are the one-hot class centroid plus isotropic Gaussian noise.
    A default stratified 60/20/20 split is attached.  Fully deterministic
    given ``cfg.seed``.
    """
    n, c = cfg.n, cfg.c
    m = n / c
    denom = (m - 1.0) * cfg.homophily + (n - m) * (1.0 - cfg.homophily) / (c - 1)
    if denom <= 0:
        raise ValueError("degenerate SBM configuration")
    s = cfg.avg_degree / denom
    p_in = cfg.homophily * s
    p_out = (1.0 - cfg.homophily) * s / (c - 1)
    if p_in > 1.0 or p_out > 1.0:
        raise ValueError(
            f"infeasible edge probabilities p_in={p_in:.3f} p_out={p_out:.3f}"
        )

    rng = substream(cfg.seed, seeding.GRAPH)
    labels = np.arange(n, dtype=np.int64) % c
    labels = labels[rng.permutation(n)]

    iu, ju = np.triu_indices(n, k=1)
    p_edge = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p_edge
    ei, ej = iu[keep], ju[keep]
    rows = np.concatenate([ei, ej])
    cols = np.concatenate([ej, ei])
    adjacency = CsrMatrix.from_coo(n, rows, cols, np.ones(len(rows)), symmetric=True)

    features = cfg.feature_noise * rng.standard_normal((n, cfg.f))
    features[np.arange(n), labels] += 1.0

    masks = stratified_split(labels, (0.6, 0.2), substream(cfg.seed, seeding.SPLIT))
    return Graph(n, adjacency, features, labels, masks)


def edge_homophily(g: Graph) -> float:
    """Fraction of edges joining same-class endpoints."""
    rows = g.adjacency.row_expansion()
    cols = g.adjacency.col_idx
    if len(rows) == 0:
        return 0.0
    return float(np.mean(g.labels[rows] == g.labels[cols]))


def stratified_split(
    labels: np.ndarray,
    ratios: tuple[float, float],
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """One stratified train/val/test split; test takes the remainder."""
    r_train, r_val = ratios
    if r_train < 0 or r_val < 0 or r_train + r_val >= 1.0:
        raise ValueError("ratios must be nonnegative and sum below 1")
    n = len(labels)
    masks = {name: np.zeros(n, dtype=bool) for name in MASK_NAMES}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(r_train * len(idx)))
        n_va = int(round(r_val * len(idx)))
        n_va = min(n_va, len(idx) - n_tr)
        masks["train"][idx[:n_tr]] = True
        masks["val"][idx[n_tr : n_tr + n_va]] = True
        masks["test"][idx[n_tr + n_va :]] = True
    return masks


def make_folds(
    g: Graph,
    k: int,
    ratios: tuple[float, float] = (0.6, 0.2),
    seed: int = 0,
) -> list[dict[str, np.ndarray]]:
    """``k`` repeated stratified random splits (default 60/20/20).

    Each fold's masks are mutually disjoint.  Deterministic per seed: fold i
    always draws from the same substream regardless of how many folds run.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    counts = np.bincount(g.labels)
    if np.any(counts < k):
        small = int(np.argmin(counts))
        raise ValueError(f"class {small} has {counts[small]} nodes, fewer than k={k}")
    return [stratified_split(g.labels, ratios, substream(seed, seeding.FOLDS, i)) for i in range(k)]


def save_graph(g: Graph, out_dir: str | Path) -> None:
    """Write the on-disk format read back by :func:`load_graph`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = g.adjacency.row_expansion()
    cols = g.adjacency.col_idx
    upper = rows < cols
    with open(out / "edges.txt", "w") as fh:
        fh.write("# undirected edge list: one 'i j' pair per line\n")
        for i, j in zip(rows[upper], cols[upper]):
            fh.write(f"{i} {j}\n")
    with open(out / "features.txt", "w") as fh:
        for i in range(g.n):
            feats = " ".join(repr(float(v)) for v in g.features[i])
            fh.write(f"{feats} {g.labels[i]}\n")
    if g.masks:
        payload = {
            name: np.flatnonzero(mask).tolist() for name, mask in g.masks.items()
        }
        with open(out / "masks.json", "w") as fh:
            json.dump(payload, fh, indent=0, sort_keys=True)


def load_graph(
    path: str | Path,
    edges: str = "edges.txt",
    features: str = "features.txt",
    masks: str | None = "masks.json",
) -> Graph:
    """Load a graph from an edge-list + features directory.

    The edge list is symmetrized and deduplicated; self-loops are dropped.
    ``masks.json`` (named index arrays) is optional.
    """
    base = Path(path)
    feats, labels = _parse_features(base / features)
    n = len(labels)
    pairs = _parse_edges(base / edges, n)
    if pairs.size:
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        dup = np.zeros(len(rows), dtype=bool)
        dup[1:] = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        rows, cols = rows[~dup], cols[~dup]
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    adjacency = CsrMatrix.from_coo(n, rows, cols, np.ones(len(rows)), symmetric=True)

    mask_dict: dict[str, np.ndarray] = {}
    if masks is not None and (base / masks).exists():
        with open(base / masks) as fh:
            payload = json.load(fh)
        for name in MASK_NAMES:
            if name in payload:
                idx = np.asarray(payload[name], dtype=np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise ValueError(f"mask {name!r} index out of range")
                m = np.zeros(n, dtype=bool)
                m[idx] = True
                mask_dict[name] = m
    return Graph(n, adjacency, feats, labels, mask_dict)


def _parse_edges(path: Path, n: int) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path.name}:{lineno}: expected two node ids")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path.name}:{lineno}: malformed node id") from exc
            if i < 0 or j < 0 or i >= n or j >= n:
                raise ValueError(f"{path.name}:{lineno}: node id out of range [0, {n})")
            if i == j:
                continue  # self-loops are dropped
            pairs.append((min(i, j), max(i, j)))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _parse_features(path: Path) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path.name}:{lineno}: expected floats plus a label")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ValueError(f"{path.name}:{lineno}: inconsistent column count")
            try:
                row = [float(v) for v in parts[:-1]]
                label = int(parts[-1])
            except ValueError as exc:
                raise ValueError(f"{path.name}:{lineno}: malformed value") from exc
            if label < 0:
                raise ValueError(f"{path.name}:{lineno}: label out of range")
            feats.append(row)
            labels.append(label)
    if not feats:
        raise ValueError(f"{path.name}: no feature rows")
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64)
