"""Sample-and-aggregate node embedding (GraphSage)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import FeatureGraph, RngStream, sample_neighbors
from .numerics import ShapeError, Tensor

AGGREGATORS = ("mean", "maxpool")
ACTIVATIONS = {"relu": nx.relu, "sigmoid": nx.sigmoid, "identity": nx.identity}


def glorot(rng: RngStream, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) from the portable stream."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    vals = [rng.uniform(-bound, bound) for _ in range(fan_out * fan_in)]
    return np.array(vals).reshape(fan_out, fan_in)


@dataclass
class SageLayer:
    weight: Tensor  # (F_out, 2 * F_in): self half then neighbor half
    aggregator: str = "mean"
    activation: str = "relu"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] % 2:
            raise ShapeError("SageLayer weight needs an even column count (concat contract)")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1] // 2

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, f_in: int, f_out: int, rng: RngStream, **kw) -> SageLayer:
        return cls(Tensor(glorot(rng, f_out, 2 * f_in), requires_grad=True), **kw)


@dataclass
class SageStack:
    layers: list[SageLayer] = field(default_factory=list)
    k: int = 5

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_features != b.in_features:
                raise ShapeError("SageStack layer widths do not chain")

    @property
    def out_features(self) -> int | None:
        return self.layers[-1].out_features if self.layers else None

    def parameters(self) -> list[Tensor]:
        return [layer.weight for layer in self.layers]

    @classmethod
    def init(cls, widths: Sequence[int], rng: RngStream, k: int = 5, aggregator: str = "mean",
             activation: str = "relu") -> SageStack:
        layers = [
            SageLayer.init(a, b, rng.substream(100 + i), aggregator=aggregator, activation=activation)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        return cls(layers, k)


def aggregate(features: Sequence, kind: str = "mean") -> Tensor:
    """Coordinatewise mean or max over a list of equal-width vectors."""
    if len(features) == 0:
        raise nx.ContractError("aggregate needs at least one vector")
    rows = [nx.reshape(nx.as_tensor(f), (1, -1)) for f in features]
    if len({r.shape[1] for r in rows}) != 1:
        raise ShapeError("aggregate: vectors differ in width")
    stacked = nx.concat(rows, axis=0)
    if kind == "mean":
        return nx.tsum(stacked, axis=0) * (1.0 / len(rows))
    if kind == "maxpool":
        return nx.tmax(stacked, axis=0)
    raise ValueError(f"unknown aggregator {kind!r}")


def sampled_neighborhoods(g: FeatureGraph, k: int, rng: RngStream, layer_index: int = 0,
                          node_keys: np.ndarray | None = None) -> list[list[int]]:
    """Neighbor sample for every node.

    Node ``v`` draws from ``rng.substream(layer_index, key(v))`` where
    ``key(v) = node_keys[v]`` (default ``v``); nodes whose degree is at most
    ``k`` never touch the stream.
    """
    keys = np.arange(g.num_nodes) if node_keys is None else np.asarray(node_keys)
    out = []
    for v in range(g.num_nodes):
        if 0 < g.degree(v) <= k:
            out.append([int(u) for u in g.neighbors[v]])
        else:
            sub = rng.substream(layer_index, int(keys[v]))
            out.append(sample_neighbors(g, v, k, sub, order=keys))
    return out


def _neighbor_index(g: FeatureGraph, k: int, rng: RngStream, layer_index: int,
                    node_keys: np.ndarray | None, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Padded (N, width) neighbor index and per-node sample sizes.

    Padding points at row N (a zero row) for the mean and repeats the first
    sample for maxpool, since the max ignores repeats.
    """
    n = g.num_nodes
    deg = g.degrees
    if n and deg.min() > 0 and deg.max() <= k:
        # no node needs the sampler: every neighborhood is used whole
        flat = np.concatenate(g.neighbors).astype(np.intp)
        starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
        rows = np.repeat(np.arange(n), deg)
        cols = np.arange(flat.size) - np.repeat(starts, deg)
        fill = flat[starts] if kind == "maxpool" else np.full(n, n)
        idx = np.repeat(fill[:, None], deg.max(), axis=1)
        idx[rows, cols] = flat
        return idx, deg.astype(np.float64)
    samples = sampled_neighborhoods(g, k, rng, layer_index, node_keys)
    width = max(len(s) for s in samples)
    idx = np.empty((n, width), dtype=np.intp)
    for v, s in enumerate(samples):
        idx[v, :len(s)] = s
        idx[v, len(s):] = s[0] if kind == "maxpool" else n
    return idx, np.array([len(s) for s in samples], dtype=np.float64)


def sage_layer_forward(layer: SageLayer, g: FeatureGraph, h, rng: RngStream, k: int,
                       layer_index: int = 0, node_keys: np.ndarray | None = None) -> Tensor:
    """One round of sample, aggregate, concat, linear map and activation.

    The mean aggregate sums neighbor rows in sample order and then divides by
    the count.
    """
    h = nx.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != layer.in_features:
        raise ShapeError(f"layer expects width {layer.in_features}, got {h.shape}")
    idx, counts = _neighbor_index(g, k, rng, layer_index, node_keys, layer.aggregator)
    if layer.aggregator == "mean":
        padded = nx.concat([h, Tensor(np.zeros((1, h.shape[1])))], axis=0)
        summed = nx.tsum(nx.gather_rows(padded, idx), axis=1)
        agg = summed / Tensor(counts[:, None])
    else:
        agg = nx.tmax(nx.gather_rows(h, idx), axis=1)
    cat = nx.concat([h, agg], axis=1)
    return ACTIVATIONS[layer.activation](nx.matmul(cat, nx.transpose(layer.weight)))


def sage_embed(stack: SageStack, g: FeatureGraph, rng: RngStream, node_keys: np.ndarray | None = None,
               h0=None) -> Tensor:
    h = nx.as_tensor(g.features if h0 is None else h0)
    if stack.layers and h.shape[1] != stack.layers[0].in_features:
        raise ShapeError(f"graph features have width {h.shape[1]}, first layer expects {stack.layers[0].in_features}")
    for i, layer in enumerate(stack.layers):
        h = sage_layer_forward(layer, g, h, rng, stack.k, layer_index=i, node_keys=node_keys)
    return h
