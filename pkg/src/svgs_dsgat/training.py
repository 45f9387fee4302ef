"""Model composition, optimisation and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dsgat import DsgatLayer, bce_loss, dsgat_forward
from .graph import FeatureGraph, RngStream, batch_graphs
from .graphsage import SageStack, glorot, sage_embed
from .numerics import Tensor
from .svam import SvamParams, svam_forward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "svgs-dsgat-checkpoint/1"
LOSS_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")

# learning-rate presets: prose value (default) and the parameter-table value
LR_PRESETS = {"prose": 0.001, "table": 0.01}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_features: int = 8
    num_classes: int = 4
    sage_widths: tuple[int, ...] = (32, 32)
    k: int = 5
    aggregator: str = "mean"
    sage_activation: str = "relu"
    dsgat_out: int = 32
    dsgat_activation: str = "identity"
    use_sage: bool = True
    use_svam: bool = True
    use_dsgat: bool = True
    seed: int = 42

    def to_json(self) -> dict:
        d = asdict(self)
        d["sage_widths"] = list(self.sage_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["sage_widths"] = tuple(d.get("sage_widths", (32, 32)))
        return cls(**d)


class SvgsDsgatModel:
    """GraphSage -> SVAM -> DSGAT -> per-class sigmoid head.

    A disabled stage is an identity pass-through and downstream widths follow
    whatever arrives.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = RngStream(config.seed)
        width = config.in_features
        self.sage = SageStack([], config.k)
        self.svam = None
        self.dsgat = None
        if config.use_sage:
            widths = (width,) + tuple(config.sage_widths)
            self.sage = SageStack.init(widths, rng.substream(1), config.k, config.aggregator, config.sage_activation)
            width = widths[-1]
        if config.use_svam:
            self.svam = SvamParams.init(width, rng.substream(2))
        if config.use_dsgat:
            self.dsgat = DsgatLayer.init(width, config.dsgat_out, rng.substream(3), config.dsgat_activation)
            width = config.dsgat_out
        self.head_w = Tensor(glorot(rng.substream(4), config.num_classes, width), requires_grad=True)
        self.head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    @property
    def ablation(self) -> dict[str, bool]:
        c = self.config
        return {"use_sage": c.use_sage, "use_svam": c.use_svam, "use_dsgat": c.use_dsgat}

    def named_parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, module) triples in a fixed order."""
        out = [(f"sage.{i}.weight", layer.weight, "sage") for i, layer in enumerate(self.sage.layers)]
        if self.svam is not None:
            out += [(f"svam.{n}", getattr(self.svam, n), "svam") for n in SvamParams.FIELDS]
        if self.dsgat is not None:
            out += [("dsgat.weight", self.dsgat.weight, "dsgat"), ("dsgat.beta1", self.dsgat.beta1, "dsgat"),
                    ("dsgat.beta2", self.dsgat.beta2, "dsgat")]
        out += [("head.weight", self.head_w, "head"), ("head.bias", self.head_b, "head")]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def weight_matrices(self) -> list[Tensor]:
        """Parameters that the L2 penalty covers: every matrix, no biases or scalars."""
        return [t for _, t, _ in self.named_parameters() if t.ndim == 2]

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())


def model_forward(m: SvgsDsgatModel, g: FeatureGraph, rng: RngStream, trace: dict | None = None) -> Tensor:
    """Per-node class probabilities, shape (N, C)."""
    if g.num_features != m.config.in_features:
        raise ConfigError(f"graph has {g.num_features} features, model expects {m.config.in_features}")
    h = Tensor(g.features)
    if m.sage.layers:
        h = sage_embed(m.sage, g, rng)
    if m.svam is not None:
        h, svam_trace = svam_forward(h, g, m.svam)
        if trace is not None:
            trace["svam"] = svam_trace
    if m.dsgat is not None:
        h, att = dsgat_forward(m.dsgat, h, g, return_attention=True)
        if trace is not None:
            trace["attention"] = att
    return nx.sigmoid(nx.linear(h, m.head_w, m.head_b))


def total_loss(m: SvgsDsgatModel, g: FeatureGraph, labels, rng: RngStream, weight_decay: float) -> Tensor:
    """Mean BCE plus weight_decay times the sum of squared weight-matrix entries."""
    loss = bce_loss(Tensor(labels), model_forward(m, g, rng))
    if weight_decay:
        reg = None
        for w in m.weight_matrices():
            term = nx.tsum(nx.square(w))
            reg = term if reg is None else reg + term
        if reg is not None:
            loss = loss + weight_decay * reg
    return loss


def param_count(m: SvgsDsgatModel) -> dict:
    by_module: dict[str, int] = {"sage": 0, "svam": 0, "dsgat": 0, "head": 0}
    for _, t, module in m.named_parameters():
        by_module[module] += t.size
    return {"total": sum(by_module.values()), "by_module": by_module}


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(opt: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None = None) -> None:
    """In-place Adam update with bias correction.

    ``weight_decay`` adds the classic coupled L2 term ``wd * p`` to the
    gradient. Missing gradients count as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not opt.m:
        opt.m = [np.zeros_like(p.data) for p in params]
        opt.v = [np.zeros_like(p.data) for p in params]
    if len(opt.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    opt.t += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for i, p in enumerate(params):
        g = np.zeros_like(p.data) if grads[i] is None else grads[i]
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g
        step = opt.lr * (opt.m[i] / c1) / (np.sqrt(opt.v[i] / c2) + opt.eps)
        p.data = p.data - step


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 200
    seed: int = 42
    early_stop: bool = True
    patience: int = 20
    val_fraction: float = 0.1
    image_size: int = 64
    patch_size: int = 8
    weight_decay: float = 1e-4

    def __post_init__(self):
        for name in ("batch_size", "epochs", "image_size", "patch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    model: SvgsDsgatModel
    log: list[dict]
    best_epoch: int
    stopped_early: bool

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in self.log:
            w.writerow([row["epoch"], repr(row["train_loss"]),
                        "" if row["val_loss"] is None else repr(row["val_loss"]), repr(row["lr"])])
        return buf.getvalue()


def _split(n: int, cfg: TrainConfig) -> tuple[list[int], list[int]]:
    if not cfg.early_stop or cfg.val_fraction == 0 or n < 2:
        return list(range(n)), []
    n_val = max(1, int(round(n * cfg.val_fraction)))
    # the last n_val graphs are held out for early stopping
    return list(range(n - n_val)), list(range(n - n_val, n))


def _batches(idx: list[int], size: int, order: list[int]) -> list[list[int]]:
    shuffled = [idx[i] for i in order]
    return [shuffled[i:i + size] for i in range(0, len(shuffled), size)]


def _mean_loss(m, graphs, batches, cfg, rng) -> float:
    total, count = 0.0, 0
    with nx.no_grad():
        for b, ids in enumerate(batches):
            g = batch_graphs([graphs[i] for i in ids])
            loss = total_loss(m, g, g.labels, rng.substream(b), cfg.weight_decay)
            total += loss.item() * len(ids)
            count += len(ids)
    return total / count


def train(m: SvgsDsgatModel, dataset: Sequence[FeatureGraph], cfg: TrainConfig,
          progress=None) -> TrainResult:
    """Minibatch Adam on total_loss.

    Row 0 of the log holds the losses of the untrained model. With early
    stopping on, the last ``val_fraction`` of the dataset is held out, training
    stops after ``patience`` epochs without a validation improvement, and the
    best-validation weights are restored.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if any(g.labels is None for g in dataset):
        raise ValueError("every training graph needs node labels")
    root = RngStream(cfg.seed).substream(7)
    train_idx, val_idx = _split(len(dataset), cfg)
    params = m.parameters()
    opt = AdamState(lr=cfg.lr)
    eval_train = _batches(train_idx, cfg.batch_size, list(range(len(train_idx))))
    eval_val = _batches(val_idx, cfg.batch_size, list(range(len(val_idx))))

    def val_loss():
        return _mean_loss(m, dataset, eval_val, cfg, root.substream(2)) if val_idx else None

    history = [{"epoch": 0, "train_loss": _mean_loss(m, dataset, eval_train, cfg, root.substream(1)),
                "val_loss": val_loss(), "lr": cfg.lr}]
    best = history[0]["val_loss"]
    best_epoch = 0
    best_params = [p.data.copy() for p in params]
    stale = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        erng = root.substream(3, epoch)
        order = erng.permutation(len(train_idx))
        total, count = 0.0, 0
        for b, ids in enumerate(_batches(train_idx, cfg.batch_size, order)):
            g = batch_graphs([dataset[i] for i in ids])
            m.zero_grad()
            loss = total_loss(m, g, g.labels, erng.substream(b), cfg.weight_decay)
            nx.backward(loss)
            adam_step(opt, params)
            total += loss.item() * len(ids)
            count += len(ids)
        row = {"epoch": epoch, "train_loss": total / count, "val_loss": val_loss(), "lr": cfg.lr}
        history.append(row)
        if progress is not None:
            progress(row)
        if row["val_loss"] is not None:
            if row["val_loss"] < best:
                best, best_epoch, stale = row["val_loss"], epoch, 0
                best_params = [p.data.copy() for p in params]
            else:
                stale += 1
                if stale >= cfg.patience:
                    stopped = True
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    if val_idx:
        for p, saved in zip(params, best_params):
            p.data = saved
    else:
        best_epoch = history[-1]["epoch"]
    m.zero_grad()
    return TrainResult(m, history, best_epoch, stopped)


def predict(m: SvgsDsgatModel, g: FeatureGraph, seed: int = 0, trace: dict | None = None) -> np.ndarray:
    with nx.no_grad():
        return model_forward(m, g, RngStream(seed).substream(9), trace).data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _hex(a: np.ndarray) -> list[str]:
    bits = np.ascontiguousarray(a, dtype=np.float64).reshape(-1).view(np.uint64)
    return [format(int(u), "016x") for u in bits]


def _unhex(values: list[str], shape) -> np.ndarray:
    bits = np.array([int(v, 16) for v in values], dtype=np.uint64)
    return bits.view(np.float64).reshape(shape)


def checkpoint_document(m: SvgsDsgatModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": m.config.to_json(),
        "ablation": m.ablation,
        "params": [
            {"name": name, "shape": list(t.shape), "data": _hex(t.data)}
            for name, t, _ in m.named_parameters()
        ],
    }


def save_checkpoint(m: SvgsDsgatModel, path) -> None:
    """JSON document; every float is stored as its IEEE-754 bit pattern in hex."""
    Path(path).write_text(json.dumps(checkpoint_document(m), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> SvgsDsgatModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint document: {exc}") from None
    if not isinstance(doc, dict) or "format" not in doc:
        raise CheckpointError("malformed checkpoint document: no format field")
    if doc["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint version {doc['format']!r}")
    try:
        m = SvgsDsgatModel(ModelConfig.from_json(doc["config"]))
        if doc["ablation"] != m.ablation:
            raise CheckpointError("ablation flags disagree with the stored config")
        stored = {p["name"]: p for p in doc["params"]}
        names = [n for n, _, _ in m.named_parameters()]
        if sorted(stored) != sorted(names):
            raise CheckpointError("parameter names do not match the model layout")
        for name, t, _ in m.named_parameters():
            entry = stored[name]
            if tuple(entry["shape"]) != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {entry['shape']} vs {list(t.shape)}")
            if len(entry["data"]) != t.size:
                raise CheckpointError(f"{name} holds {len(entry['data'])} values, expected {t.size}")
            t.data = _unhex(entry["data"], t.shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint document: {exc}") from None
    return m
