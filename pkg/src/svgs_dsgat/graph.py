"""Feature graphs over image patch grids, plus a portable seeded RNG."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finaliser."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class RngStream:
    """SplitMix64 generator.

    Pure integer arithmetic, so a given seed and call sequence produces the
    same numbers on every platform. ``substream(*keys)`` derives an
    independent stream from the seed alone (not the position), which is how
    per-node sampling stays deterministic regardless of evaluation order.
    """

    algorithm = "splitmix64"

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._state = self.seed
        self.position = 0

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & MASK64
        self.position += 1
        return mix64(self._state)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        # rejection keeps the draw exactly uniform
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def substream(self, *keys: int) -> RngStream:
        s = self.seed
        for k in keys:
            s = mix64(s ^ mix64((int(k) + GOLDEN_GAMMA) & MASK64))
        return RngStream(s)


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    patch_size: int


@dataclass(frozen=True, eq=False)
class FeatureGraph:
    """Nodes with feature rows and symmetric neighbor lists.

    A graph built from one image carries one :class:`GridSpec`. A batch made
    by :func:`batch_graphs` is the disjoint union of several grids; ``offsets``
    marks where each component's nodes start.
    """

    features: np.ndarray
    neighbors: tuple[np.ndarray, ...]
    intensities: np.ndarray
    grids: tuple[GridSpec, ...] = ()
    offsets: tuple[int, ...] = ()
    labels: np.ndarray | None = None
    image_ids: tuple = ()

    def __post_init__(self):
        n = self.features.shape[0]
        if len(self.neighbors) != n or self.intensities.shape != (n,):
            raise ValueError("features, neighbors and intensities disagree on node count")
        if self.labels is not None:
            if self.labels.shape[0] != n:
                raise ValueError("labels need one row per node")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValueError("labels must be 0/1 indicators")
        if self.grids and not self.offsets:
            object.__setattr__(self, "offsets", (0, n))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def grid(self) -> GridSpec | None:
        return self.grids[0] if len(self.grids) == 1 else None

    @property
    def has_grid(self) -> bool:
        return bool(self.grids)

    def degree(self, v: int) -> int:
        return len(self.neighbors[v])

    @cached_property
    def max_degree(self) -> int:
        return max((len(nb) for nb in self.neighbors), default=0)

    @cached_property
    def segment_ids(self) -> np.ndarray:
        """Component index of every node (all zeros for a single graph)."""
        seg = np.zeros(self.num_nodes, dtype=np.intp)
        for s, (a, b) in enumerate(zip(self.offsets[:-1], self.offsets[1:])):
            seg[a:b] = s
        return seg

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.intp)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(dst, src) pairs, one per neighbor; isolated nodes get a self edge."""
        n = self.num_nodes
        nbrs = [nb if len(nb) else np.array([v], dtype=np.intp) for v, nb in enumerate(self.neighbors)]
        counts = np.array([len(nb) for nb in nbrs], dtype=np.intp)
        src = np.concatenate(nbrs).astype(np.intp) if n else np.zeros(0, np.intp)
        return np.repeat(np.arange(n, dtype=np.intp), counts), src

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        rows = np.repeat(np.arange(n, dtype=np.intp), self.degrees)
        cols = np.concatenate(list(self.neighbors) + [np.zeros(0, np.intp)]).astype(np.intp)
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    @cached_property
    def stencils(self) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
        """Central-difference x/y gradient and 5-point Laplacian operators.

        Borders use replicate padding. Block-diagonal over batch components.
        """
        if not self.grids:
            raise ValueError("graph has no grid geometry")
        blocks = [_grid_stencils(g.rows, g.cols) for g in self.grids]
        return tuple(sp.block_diag([b[i] for b in blocks], format="csr") for i in range(3))

    @cached_property
    def stencil_index(self) -> np.ndarray:
        """(4, N) global indices of the left, right, up and down neighbor of
        every node, with borders replicated (a missing neighbor is the node itself)."""
        if not self.grids:
            raise ValueError("graph has no grid geometry")
        parts = [np.stack(_grid_directions(g.rows, g.cols)) + start for g, start in zip(self.grids, self.offsets)]
        return np.concatenate(parts, axis=1)

    def validate(self) -> None:
        """Raise ValueError when a structural invariant is broken."""
        n = self.num_nodes
        sets = []
        for v, nb in enumerate(self.neighbors):
            nb = list(nb)
            if nb != sorted(set(nb)):
                raise ValueError(f"neighbors of {v} are not sorted and unique")
            if any(u < 0 or u >= n for u in nb):
                raise ValueError(f"neighbor index out of range at node {v}")
            if v in nb:
                raise ValueError(f"self-loop at node {v}")
            sets.append(set(nb))
        for v, s in enumerate(sets):
            for u in s:
                if v not in sets[u]:
                    raise ValueError(f"asymmetric edge {v}->{u}")
        if self.grids:
            if self.offsets[-1] != n:
                raise ValueError("component offsets do not cover the graph")
            for g, start in zip(self.grids, self.offsets):
                ref = grid_neighbors(g.rows, g.cols)
                for i, nb in enumerate(ref):
                    if sets[start + i] != {start + u for u in nb}:
                        raise ValueError(f"node {start + i} is not a 4-neighborhood")


@lru_cache(maxsize=64)
def _grid_directions(rows: int, cols: int):
    r, c = np.divmod(np.arange(rows * cols), cols)
    left = r * cols + np.maximum(c - 1, 0)
    right = r * cols + np.minimum(c + 1, cols - 1)
    up = np.maximum(r - 1, 0) * cols + c
    down = np.minimum(r + 1, rows - 1) * cols + c
    return left, right, up, down


@lru_cache(maxsize=64)
def _grid_stencils(rows: int, cols: int):
    n = rows * cols
    left, right, up, down = _grid_directions(rows, cols)
    idx = np.arange(n)

    def build(cols_, vals):
        rows_ = np.concatenate([idx] * len(cols_))
        # duplicates (replicated borders) are summed by the csr conversion
        return sp.csr_matrix((np.concatenate(vals), (rows_, np.concatenate(cols_))), shape=(n, n))

    half = np.full(n, 0.5)
    one = np.ones(n)
    gx = build([right, left], [half, -half])
    gy = build([down, up], [half, -half])
    lap = build([left, right, up, down, idx], [one, one, one, one, -4.0 * one])
    return gx, gy, lap


def grid_neighbors(rows: int, cols: int) -> tuple[np.ndarray, ...]:
    out = []
    for r in range(rows):
        for c in range(cols):
            nb = []
            if r > 0:
                nb.append((r - 1) * cols + c)
            if c > 0:
                nb.append(r * cols + c - 1)
            if c < cols - 1:
                nb.append(r * cols + c + 1)
            if r < rows - 1:
                nb.append((r + 1) * cols + c)
            out.append(np.array(nb, dtype=np.intp))
    return tuple(out)


def from_image_grid(img, patch_size: int = 8, labels: np.ndarray | None = None, image_id=None) -> FeatureGraph:
    """One node per ``patch_size`` square, row-major.

    Node features are ``[mean per channel, std per channel, row, col]`` with
    row/col scaled to [0, 1]; ``intensities`` holds the channel-averaged patch
    mean.
    """
    h, w, ch = img.height, img.width, img.channels
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(
            f"image {w}x{h} is not divisible by patch size {patch_size}"
        )
    rows, cols = h // patch_size, w // patch_size
    px = img.array().reshape(rows, patch_size, cols, patch_size, ch).transpose(0, 2, 1, 3, 4)
    px = px.reshape(rows * cols, patch_size * patch_size, ch)
    means = px.mean(axis=1)
    stds = px.std(axis=1)
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    rnorm = rr / (rows - 1) if rows > 1 else np.zeros(rows * cols)
    cnorm = cc / (cols - 1) if cols > 1 else np.zeros(rows * cols)
    feats = np.column_stack([means, stds, rnorm, cnorm])
    return FeatureGraph(
        features=feats,
        neighbors=grid_neighbors(rows, cols),
        intensities=px.mean(axis=(1, 2)),
        grids=(GridSpec(rows, cols, patch_size),),
        labels=labels,
        image_ids=(image_id,) if image_id is not None else (),
    )


def from_edges(features: np.ndarray, edges: Sequence[tuple[int, int]], intensities: np.ndarray | None = None,
               labels: np.ndarray | None = None) -> FeatureGraph:
    """Build an undirected graph without grid geometry from an edge list."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for a, b in edges:
        if a == b:
            continue
        nbrs[a].add(b)
        nbrs[b].add(a)
    if intensities is None:
        intensities = features.mean(axis=1)
    return FeatureGraph(
        features=features,
        neighbors=tuple(np.array(sorted(s), dtype=np.intp) for s in nbrs),
        intensities=np.asarray(intensities, dtype=np.float64),
        labels=labels,
    )


def batch_graphs(graphs: Sequence[FeatureGraph]) -> FeatureGraph:
    """Disjoint union of grid graphs; component order is preserved."""
    if not graphs:
        raise ValueError("cannot batch zero graphs")
    offsets = [0]
    neighbors: list[np.ndarray] = []
    grids: list[GridSpec] = []
    for g in graphs:
        if len(g.grids) != 1 and len(graphs) > 1:
            raise ValueError("only single-image graphs can be batched")
        neighbors.extend(nb + offsets[-1] for nb in g.neighbors)
        grids.extend(g.grids)
        offsets.append(offsets[-1] + g.num_nodes)
    labels = None
    if all(g.labels is not None for g in graphs):
        labels = np.concatenate([g.labels for g in graphs])
    return FeatureGraph(
        features=np.concatenate([g.features for g in graphs]),
        neighbors=tuple(neighbors),
        intensities=np.concatenate([g.intensities for g in graphs]),
        grids=tuple(grids),
        offsets=tuple(offsets),
        labels=labels,
        image_ids=tuple(i for g in graphs for i in g.image_ids),
    )


def sample_neighbors(g: FeatureGraph, v: int, k: int, rng: RngStream,
                     order: np.ndarray | None = None) -> list[int]:
    """Fixed-size neighbor sample of node ``v``.

    Degree <= k returns every neighbor once; larger neighborhoods give k
    distinct neighbors drawn uniformly without replacement (partial
    Fisher-Yates). An isolated node returns itself k times. ``order``, when
    given, is a per-node key that fixes the candidate order before drawing.
    """
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range for {g.num_nodes} nodes")
    if k < 1:
        raise ValueError("k must be >= 1")
    nb = g.neighbors[v]
    if len(nb) == 0:
        return [v] * k
    if len(nb) <= k:
        return [int(u) for u in nb]
    cand = [int(u) for u in nb]
    if order is not None:
        cand.sort(key=lambda u: order[u])
    for i in range(k):
        j = i + rng.randbelow(len(cand) - i)
        cand[i], cand[j] = cand[j], cand[i]
    return cand[:k]
