"""Registry of finite-difference gradient checks over every differentiable piece.

Each case builds a scalar objective from a few leaf tensors. The analytic
gradient from the tape is compared against central differences taken by
perturbing each leaf in place. Elementwise operations are held to a tighter
tolerance than composite ones.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataio import ImageBuffer
from .graph import RngStream, from_edges, from_image_grid
from .numerics import Tensor

ELEMENTWISE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
STEP = 1e-6


@dataclass
class GradCase:
    name: str
    module: str
    build: Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]
    elementwise: bool = False


@dataclass
class GradResult:
    name: str
    module: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _leaf(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _rand(shape, seed: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def _away_from_zero(shape, seed: int, margin: float = 0.1) -> np.ndarray:
    """Values in +-[margin, 1]; keeps kinks of relu/abs out of the stencil's reach."""
    r = np.random.default_rng(seed)
    return r.uniform(margin, 1.0, size=shape) * r.choice([-1.0, 1.0], size=shape)


def check_case(objective: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = STEP) -> float:
    """Largest relative error between tape and central-difference gradients."""
    nx.zero_grad(leaves)
    out = objective()
    nx.backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with nx.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = objective().item()
                flat[i] = orig - h
                fm = objective().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
        worst = max(worst, nx.max_relative_error(analytic, numeric, floor=1e-6))
    nx.zero_grad(leaves)
    return worst


# ---------------------------------------------------------------------------
# case builders
# ---------------------------------------------------------------------------


def _weighted(t: Tensor, seed: int) -> Tensor:
    """Sum of t times fixed random weights, so every entry gets a distinct cotangent."""
    return nx.tsum(t * Tensor(_rand(t.shape, seed)))


def _unary(op, values):
    def build():
        x = _leaf(values)
        return (lambda: _weighted(op(x), 99)), [x]
    return build


def _binary(op, a_vals, b_vals):
    def build():
        a, b = _leaf(a_vals), _leaf(b_vals)
        return (lambda: _weighted(op(a, b), 98)), [a, b]
    return build


def _numerics_cases() -> list[GradCase]:
    shape = (3, 4)
    pos = _rand(shape, 1, 0.2, 2.0)
    signed = _away_from_zero(shape, 2)
    other = _away_from_zero(shape, 3, margin=0.3)
    E = True
    cases = [
        GradCase("add", "numerics", _binary(nx.add, signed, other), E),
        GradCase("add_broadcast", "numerics", _binary(nx.add, signed, _rand((4,), 4)), E),
        GradCase("sub", "numerics", _binary(nx.sub, signed, other), E),
        GradCase("mul", "numerics", _binary(nx.mul, signed, other), E),
        GradCase("div", "numerics", _binary(nx.div, signed, other), E),
        GradCase("neg", "numerics", _unary(nx.neg, signed), E),
        GradCase("exp", "numerics", _unary(nx.exp, signed), E),
        GradCase("log", "numerics", _unary(nx.log, pos), E),
        GradCase("sqrt", "numerics", _unary(nx.sqrt, pos), E),
        GradCase("square", "numerics", _unary(nx.square, signed), E),
        GradCase("abs", "numerics", _unary(nx.tabs, signed), E),
        GradCase("relu", "numerics", _unary(nx.relu, signed), E),
        # inputs between 2h and 1e-4 from the kink: the stencil never straddles it
        GradCase("relu_kink", "numerics", _unary(nx.relu, _away_from_zero(shape, 5, margin=0.02) * 1e-4), E),
        GradCase("sigmoid", "numerics", _unary(nx.sigmoid, signed * 3), E),
        GradCase("clip", "numerics", _unary(lambda x: nx.clip(x, -0.5, 0.5), _rand(shape, 6, -0.45, 0.45)), E),
        GradCase("sum", "numerics", _unary(lambda x: nx.tsum(x, axis=0), signed)),
        GradCase("mean", "numerics", _unary(lambda x: nx.mean(x, axis=1, keepdims=True), signed)),
        GradCase("l2norm", "numerics", _unary(lambda x: nx.l2norm(x, axis=1), signed)),
        GradCase("max", "numerics", _unary(lambda x: nx.tmax(x, axis=0), signed)),
        GradCase("concat", "numerics", _binary(lambda a, b: nx.concat([a, b], axis=1), signed, other)),
        GradCase("reshape", "numerics", _unary(lambda x: nx.reshape(x, (2, 6)), signed)),
        GradCase("transpose", "numerics", _unary(nx.transpose, signed)),
        GradCase("matmul", "numerics", _binary(nx.matmul, signed, _rand((4, 2), 7))),
        GradCase("linear", "numerics", _binary(lambda x, w: nx.linear(x, w, Tensor(_rand((2,), 8))),
                                              signed, _rand((2, 4), 9))),
        GradCase("gather_rows", "numerics", _unary(lambda x: nx.gather_rows(x, np.array([2, 0, 2, 1])), signed)),
        GradCase("scatter_add_rows", "numerics",
                 _unary(lambda x: nx.scatter_add_rows(x, np.array([1, 0, 1]), 2), signed)),
        GradCase("spmm", "numerics",
                 _unary(lambda x: nx.spmm(np.array([[0.0, 1.0, 2.0], [1.0, 0.0, -1.0]]), x), signed)),
        GradCase("softmax", "numerics", _unary(nx.softmax, signed.reshape(-1))),
        GradCase("segment_softmax", "numerics",
                 _unary(lambda x: nx.segment_softmax(x, np.array([0, 0, 1, 1, 1, 2, 0, 2, 1, 0, 2, 2]), 3),
                        signed.reshape(-1))),
        GradCase("segment_max", "numerics",
                 _unary(lambda x: nx.segment_max(x, np.array([0, 1, 0]), 2), signed)),
    ]
    return cases


def _small_grid(seed: int = 11, size: int = 24, patch: int = 8):
    """A 3x3 patch grid built from a random RGB image."""
    img = np.random.default_rng(seed).uniform(0.0, 1.0, size=(size, size, 3))
    return from_image_grid(ImageBuffer.from_array(img), patch)


def _six_node_graph():
    """A 2x3 grid graph, two classes, fixed labels."""
    img = np.random.default_rng(21).uniform(0.0, 1.0, size=(16, 24, 3))
    labels = np.array([[1, 0], [0, 0], [0, 1], [1, 1], [0, 0], [0, 1]], dtype=np.float64)
    return from_image_grid(ImageBuffer.from_array(img), 8, labels)


def _sage_case(aggregator: str):
    def build():
        from .graphsage import SageLayer, sage_layer_forward

        g = from_edges(_rand((7, 3), 31), [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (4, 5), (5, 6), (6, 1), (2, 5)])
        layer = SageLayer.init(3, 4, RngStream(5), aggregator=aggregator, activation="sigmoid")
        h = _leaf(g.features)
        rng = RngStream(3)
        return (lambda: _weighted(sage_layer_forward(layer, g, h, rng, k=2), 41)), [layer.weight, h]
    return build


def _svam_case():
    from .svam import SvamParams, svam_forward

    g = _small_grid()
    p = SvamParams.init(4, RngStream(12))
    # move away from the symmetric defaults so every field matters
    p.alpha.data = _rand((4,), 13, 0.5, 1.5)
    p.beta.data = _rand((4,), 14, 0.5, 1.5)
    p.b_f.data = _rand((4,), 15, 0.2, 0.8)
    p.b_o.data = _rand((4,), 16)
    h = _leaf(_rand((g.num_nodes, 4), 17, 0.1, 1.0))
    return (lambda: nx.tsum(svam_forward(h, g, p)[0])), p.parameters() + [h]


def _dsgat_case():
    from .dsgat import DsgatLayer, dsgat_forward

    g = from_edges(_rand((6, 3), 51), [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5)])
    layer = DsgatLayer.init(3, 2, RngStream(52), activation="sigmoid")
    layer.beta1.data = np.array(-0.7)
    layer.beta2.data = np.array(0.4)
    h = _leaf(g.features)
    return (lambda: _weighted(dsgat_forward(layer, h, g), 53)), layer.parameters() + [h]


def _bce_case():
    from .dsgat import bce_loss

    y = Tensor((_rand((5, 2), 61) > 0).astype(np.float64))
    p = _leaf(_rand((5, 2), 62, 0.05, 0.95))
    return (lambda: bce_loss(y, p)), [p]


def _loss_case():
    from .training import ModelConfig, SvgsDsgatModel, total_loss

    g = _six_node_graph()
    cfg = ModelConfig(in_features=g.num_features, num_classes=2, sage_widths=(4, 4), dsgat_out=3,
                      k=2, sage_activation="sigmoid", dsgat_activation="sigmoid", seed=3)
    m = SvgsDsgatModel(cfg)
    m.svam.b_f.data = _rand(m.svam.b_f.shape, 71, 0.2, 0.8)
    seed = RngStream(77)  # frozen sampling stream, reused for every evaluation
    return (lambda: total_loss(m, g, g.labels, seed, 1e-3)), m.parameters()


def registry() -> list[GradCase]:
    return _numerics_cases() + [
        GradCase("sage_mean", "graphsage", _sage_case("mean")),
        GradCase("sage_maxpool", "graphsage", _sage_case("maxpool")),
        GradCase("svam_forward", "svam", _svam_case),
        GradCase("dsgat_forward", "dsgat", _dsgat_case),
        GradCase("bce_loss", "dsgat", _bce_case),
        GradCase("total_loss", "training", _loss_case),
    ]


MODULES = ("numerics", "graphsage", "svam", "dsgat", "training")


def run(modules: Sequence[str] | None = None, tolerance: float | None = None) -> list[GradResult]:
    """Run every case whose module is in ``modules`` (all when empty or None).

    ``tolerance`` overrides both default tolerances.
    """
    wanted = set(modules or MODULES)
    unknown = wanted - set(MODULES)
    if unknown:
        raise ValueError(f"unknown gradcheck module(s): {', '.join(sorted(unknown))}")
    results = []
    for case in registry():
        if case.module not in wanted:
            continue
        tol = tolerance if tolerance is not None else (ELEMENTWISE_TOL if case.elementwise else COMPOSITE_TOL)
        t0 = time.perf_counter()
        objective, leaves = case.build()
        err = check_case(objective, leaves)
        results.append(GradResult(case.name, case.module, err, tol, time.perf_counter() - t0))
    return results
