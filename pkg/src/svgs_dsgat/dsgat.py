"""Graph attention driven by feature difference and cosine similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph import FeatureGraph, RngStream
from .graphsage import ACTIVATIONS, glorot
from .numerics import EPS, ShapeError, Tensor


@dataclass
class DsgatLayer:
    weight: Tensor  # (F_out, F_in)
    beta1: Tensor  # scalar, weight on the Euclidean difference
    beta2: Tensor  # scalar, weight on the cosine similarity
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.beta1.shape != () or self.beta2.shape != ():
            raise ShapeError("beta1 and beta2 must be scalars")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.beta1, self.beta2]

    @classmethod
    def init(cls, f_in: int, f_out: int, rng: RngStream, activation: str = "relu") -> DsgatLayer:
        return cls(
            Tensor(glorot(rng, f_out, f_in), requires_grad=True),
            Tensor(-0.1, requires_grad=True),
            Tensor(0.1, requires_grad=True),
            activation,
        )


def pairwise_difference(h_i, h_j) -> float:
    a, b = np.asarray(h_i, dtype=np.float64), np.asarray(h_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("pairwise_difference: widths differ")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_similarity(h_i, h_j) -> float:
    """Cosine of the angle, clamped to [-1, 1]; 0 if either norm is below 1e-12."""
    a, b = np.asarray(h_i, dtype=np.float64), np.asarray(h_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity: widths differ")
    na, nb = np.sqrt(np.sum(a * a)), np.sqrt(np.sum(b * b))
    if na < EPS or nb < EPS:
        return 0.0
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def edge_scores(h, g: FeatureGraph) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Difference and similarity for every (dst, src) edge of ``g``."""
    h = nx.as_tensor(h)
    dst, src = g.edges
    hi = nx.gather_rows(h, dst)
    hj = nx.gather_rows(h, src)
    D = nx.sqrt(nx.tsum(nx.square(hi - hj), axis=1))
    ni = nx.l2norm(hi, axis=1)
    nj = nx.l2norm(hj, axis=1)
    live = (ni.data >= EPS) & (nj.data >= EPS)
    cos = nx.tsum(hi * hj, axis=1) / (ni * nj) * Tensor(live.astype(np.float64))
    return D, nx.clip(cos, -1.0, 1.0), dst, src


def attention_weights(layer: DsgatLayer, h, g: FeatureGraph) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Softmax of beta1*D + beta2*S over each node's neighborhood.

    Returns (alpha per edge, dst, src); isolated nodes attend to themselves.
    """
    D, S, dst, src = edge_scores(h, g)
    logits = layer.beta1 * D + layer.beta2 * S
    return nx.segment_softmax(logits, dst, g.num_nodes), dst, src


def dsgat_forward(layer: DsgatLayer, h, g: FeatureGraph, return_attention: bool = False):
    """h'_i = act(sum over neighbors j of alpha_ij W h_j); no self term."""
    h = nx.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != layer.in_features:
        raise ShapeError(f"dsgat expects width {layer.in_features}, got {h.shape}")
    alpha, dst, src = attention_weights(layer, h, g)
    wh = nx.linear(h, layer.weight)
    msg = nx.gather_rows(wh, src) * nx.reshape(alpha, (-1, 1))
    out = ACTIVATIONS[layer.activation](nx.scatter_add_rows(msg, dst, g.num_nodes))
    if return_attention:
        return out, (alpha.data, dst, src)
    return out


def attention_matrix(alpha: np.ndarray, dst: np.ndarray, src: np.ndarray, n: int) -> np.ndarray:
    """Dense (n, n) matrix with alpha_ij at [dst, src]."""
    m = np.zeros((n, n))
    m[dst, src] = alpha
    return m


def bce_loss(y, y_hat) -> Tensor:
    """Mean binary cross-entropy over every node and class; y_hat is clamped
    into [1e-12, 1 - 1e-12]."""
    y, y_hat = nx.as_tensor(y), nx.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"bce_loss: {y.shape} vs {y_hat.shape}")
    p = nx.clip(y_hat, EPS, 1.0 - EPS)
    ll = y * nx.log(p) + (1.0 - y) * nx.log(1.0 - p)
    return -nx.mean(ll)
