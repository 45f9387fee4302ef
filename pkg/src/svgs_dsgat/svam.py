"""Saliency-guided visual attention over grid feature maps.

The chain runs saliency -> attention map -> feature enhancement -> edge
enhancement -> gated output. Saliency follows the intensity formula literally,
so patches whose intensity is closest to the image mean score highest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph import FeatureGraph, RngStream
from .graphsage import glorot
from .numerics import ContractError, ShapeError, Tensor

SIGMA_FLOOR = 1e-6
EXP_CLAMP = 30.0


@dataclass
class SvamParams:
    alpha: Tensor  # (F,)
    beta: Tensor  # (F,)
    w_f: Tensor  # (F, F)
    b_f: Tensor  # (F,)
    gamma: Tensor  # scalar
    w_o: Tensor  # (F, F)
    b_o: Tensor  # (F,)

    FIELDS = ("alpha", "beta", "w_f", "b_f", "gamma", "w_o", "b_o")

    def __post_init__(self):
        f = self.alpha.shape[0]
        expect = {"alpha": (f,), "beta": (f,), "w_f": (f, f), "b_f": (f,), "gamma": (), "w_o": (f, f), "b_o": (f,)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"SvamParams.{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def width(self) -> int:
        return self.alpha.shape[0]

    def parameters(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.FIELDS]

    @classmethod
    def init(cls, f: int, rng: RngStream) -> SvamParams:
        def p(a):
            return Tensor(a, requires_grad=True)

        return cls(
            alpha=p(np.ones(f)),
            beta=p(np.ones(f)),
            w_f=p(glorot(rng.substream(1), f, f)),
            b_f=p(np.zeros(f)),
            gamma=p(1.0),
            w_o=p(glorot(rng.substream(2), f, f)),
            b_o=p(np.zeros(f)),
        )


@dataclass
class SvamTrace:
    mu_s: np.ndarray  # per component
    sigma_s: np.ndarray
    z_s: np.ndarray
    z_a: np.ndarray  # per node
    z_e: np.ndarray  # per component x channel
    S: np.ndarray
    A: np.ndarray
    F_enh: np.ndarray
    E: np.ndarray
    O: np.ndarray


def saliency_map(intensities) -> tuple[np.ndarray, float, float, float]:
    """Normalised Gaussian-of-deviation saliency; returns (S, mu, sigma, Z)."""
    x = np.asarray(intensities, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("saliency_map needs a nonempty vector")
    mu = x.mean()
    sigma = max(x.std(), SIGMA_FLOOR)
    raw = np.exp(-((x - mu) ** 2) / (2.0 * sigma * sigma))
    z = raw.sum()
    return raw / z, float(mu), float(sigma), float(z)


def _component_saliency(g: FeatureGraph):
    if not g.offsets:
        s, mu, sig, z = saliency_map(g.intensities)
        return s, np.array([mu]), np.array([sig]), np.array([z])
    parts = [saliency_map(g.intensities[a:b]) for a, b in zip(g.offsets[:-1], g.offsets[1:])]
    return (
        np.concatenate([p[0] for p in parts]),
        np.array([p[1] for p in parts]),
        np.array([p[2] for p in parts]),
        np.array([p[3] for p in parts]),
    )


def attention_map(S, h, p: SvamParams) -> tuple[Tensor, Tensor]:
    """a_ij = alpha_j exp(beta_j s_i h_ij), normalised per node by sum_j |a_ij|.

    Returns (A, Z_a). The exponent is clamped to [-30, 30].
    """
    h = nx.as_tensor(h)
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != p.width or S.shape != (h.shape[0],):
        raise ShapeError("attention_map: widths disagree")
    arg = nx.clip(h * Tensor(S[:, None]) * p.beta, -EXP_CLAMP, EXP_CLAMP)
    a = p.alpha * nx.exp(arg)
    z = nx.tsum(nx.tabs(a), axis=1, keepdims=True) + nx.EPS
    return a / z, z


def _unit_rows(x: Tensor) -> Tensor:
    return x / nx.l2norm(x, axis=1, keepdims=True)


def feature_enhance(A, S, h, g: FeatureGraph, p: SvamParams) -> Tensor:
    """W_f (A_i + gamma * sum over grid neighbors of unit(s_k h_k)) + b_f."""
    if not g.has_grid:
        raise ContractError("feature_enhance needs grid geometry")
    h = nx.as_tensor(h)
    S = np.asarray(S, dtype=np.float64)
    scaled = _unit_rows(h * Tensor(S[:, None]))
    neighbor_sum = nx.spmm(g.adjacency, scaled)
    return nx.linear(nx.as_tensor(A) + p.gamma * neighbor_sum, p.w_f, p.b_f)


def edge_enhance(F_enh, g: FeatureGraph) -> tuple[Tensor, Tensor]:
    """Laplacian over (1 + |grad|^2), gated by relu(F), max-abs normalised per channel.

    Returns (E, Z_e) with Z_e of shape (components, F).
    """
    if not g.has_grid:
        raise ContractError("edge_enhance needs grid geometry")
    F_enh = nx.as_tensor(F_enh)
    gx, gy, _ = g.stencils
    grad_sq = nx.square(nx.spmm(gx, F_enh)) + nx.square(nx.spmm(gy, F_enh))
    # the Laplacian as a sum of neighbor differences is exactly zero on flat
    # maps; the matrix form leaves rounding residue that Z_e would amplify
    diffs = [nx.gather_rows(F_enh, d) - F_enh for d in g.stencil_index]
    lap = (diffs[0] + diffs[1]) + (diffs[2] + diffs[3])
    raw = lap / (1.0 + grad_sq) * nx.relu(F_enh)
    seg = g.segment_ids
    z = nx.segment_max(nx.tabs(raw), seg, len(g.grids)) + nx.EPS
    return raw / nx.gather_rows(z, seg), z


def svam_output(E, F_enh, p: SvamParams) -> Tensor:
    E, F_enh = nx.as_tensor(E), nx.as_tensor(F_enh)
    if E.shape != F_enh.shape:
        raise ShapeError("svam_output: E and F differ in shape")
    u = _unit_rows(E * F_enh)
    return nx.sigmoid(nx.linear(u, p.w_o, p.b_o))


def svam_forward(h, g: FeatureGraph, p: SvamParams) -> tuple[Tensor, SvamTrace]:
    S, mu, sigma, z_s = _component_saliency(g)
    A, z_a = attention_map(S, h, p)
    F_enh = feature_enhance(A, S, h, g, p)
    E, z_e = edge_enhance(F_enh, g)
    O = svam_output(E, F_enh, p)
    trace = SvamTrace(mu, sigma, z_s, z_a.data[:, 0], z_e.data, S, A.data, F_enh.data, E.data, O.data)
    return O, trace
