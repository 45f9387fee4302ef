import csv
import io
import itertools
import json
import math

import numpy as np
import pytest

from oracles import adam_script, dsgat_oracle, sage_stack_oracle, svam_oracle
from svgs_dsgat import numerics as nx
from svgs_dsgat.dataio import load_dataset
from svgs_dsgat.dsgat import bce_loss
from svgs_dsgat.graph import RngStream, from_edges
from svgs_dsgat.numerics import Tensor
from svgs_dsgat.svam import SvamParams
from svgs_dsgat.training import (
    LOSS_COLUMNS,
    AdamState,
    CheckpointError,
    ConfigError,
    ModelConfig,
    SvgsDsgatModel,
    TrainConfig,
    adam_step,
    load_checkpoint,
    model_forward,
    param_count,
    predict,
    save_checkpoint,
    total_loss,
    train,
)
from conftest import image_graph

SMALL = dict(in_features=8, num_classes=4, sage_widths=(6,), k=4, dsgat_out=5)


def small_model(**kw):
    return SvgsDsgatModel(ModelConfig(**{**SMALL, **kw}))


@pytest.fixture(scope="module")
def graphs(small_dataset):
    return load_dataset(small_dataset, patch_size=8)[1]


# -- composition -----------------------------------------------------------------


def test_everything_disabled_with_zero_head_is_one_half():
    m = small_model(use_sage=False, use_svam=False, use_dsgat=False)
    m.head_w.data = np.zeros_like(m.head_w.data)
    out = model_forward(m, image_graph(0), RngStream(0))
    np.testing.assert_array_equal(out.data, 0.5)


@pytest.mark.parametrize("flags", list(itertools.product([True, False], repeat=3)))
def test_output_shape_for_every_ablation(flags):
    m = small_model(use_sage=flags[0], use_svam=flags[1], use_dsgat=flags[2])
    out = model_forward(m, image_graph(1, rows=2, cols=3), RngStream(0))
    assert out.shape == (6, 4)
    assert np.all((out.data > 0) & (out.data < 1))


def test_feature_width_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        model_forward(small_model(in_features=5), image_graph(0), RngStream(0))


def test_pipeline_equals_chained_module_oracles():
    g = image_graph(3, rows=2, cols=2, patch=4)
    m = small_model(k=2, num_classes=2)
    got = predict(m, g)
    h = sage_stack_oracle(g.features, g.neighbors, [lyr.weight.data for lyr in m.sage.layers], "mean", "relu", 2)
    h = svam_oracle(h, g.intensities, 2, 2, {k: getattr(m.svam, k).data for k in SvamParams.FIELDS})["O"]
    h, _ = dsgat_oracle(h, g.neighbors, m.dsgat.weight.data, m.dsgat.beta1.item(), m.dsgat.beta2.item(),
                        m.dsgat.activation)
    want = 1 / (1 + np.exp(-(h @ m.head_w.data.T + m.head_b.data)))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-13)


# -- loss ------------------------------------------------------------------------


def test_no_penalty_equals_bce():
    g = image_graph(2, labels=np.eye(4)[np.arange(9) % 4])
    m = small_model()
    y = model_forward(m, g, RngStream(5))
    assert total_loss(m, g, g.labels, RngStream(5), 0.0).item() == bce_loss(Tensor(g.labels), y).item()


def test_zero_weights_make_the_penalty_vanish():
    g = image_graph(2, labels=np.zeros((9, 4)))
    m = small_model()
    for w in m.weight_matrices():
        w.data = np.zeros_like(w.data)
    with_pen = total_loss(m, g, g.labels, RngStream(5), 0.5).item()
    assert with_pen == total_loss(m, g, g.labels, RngStream(5), 0.0).item()


def test_penalty_covers_matrices_only():
    m = small_model()
    names = {n for n, t, _ in m.named_parameters() if t.ndim == 2}
    assert {id(t) for t in m.weight_matrices()} == {id(t) for n, t, _ in m.named_parameters() if n in names}
    assert all(t.ndim == 2 for t in m.weight_matrices())


def test_two_parameter_model_by_hand():
    m = SvgsDsgatModel(ModelConfig(in_features=1, num_classes=1, use_sage=False, use_svam=False, use_dsgat=False))
    m.head_w.data = np.array([[0.5]])
    m.head_b.data = np.array([0.25])
    g = from_edges(np.array([[1.0], [-2.0]]), [(0, 1)])
    labels = np.array([[1.0], [0.0]])
    # logits 0.75 and -0.75; both terms equal log(1 + e^-0.75); penalty 1e-2 * 0.5^2
    want = math.log1p(math.exp(-0.75)) + 1e-2 * 0.25
    assert total_loss(m, g, labels, RngStream(0), 1e-2).item() == pytest.approx(want, rel=1e-14)


# -- optimiser -------------------------------------------------------------------


def test_first_step_moves_by_the_learning_rate():
    p = Tensor(np.array([0.3, -2.0, 5.0]), requires_grad=True)
    adam_step(AdamState(lr=0.001), [p], [np.ones(3)])
    np.testing.assert_allclose(p.data - [0.3, -2.0, 5.0], -0.001, atol=1e-6)


def test_zero_gradient_only_decays():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    adam_step(AdamState(lr=0.01), [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -1.0])
    q = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    adam_step(AdamState(lr=0.01, weight_decay=0.1), [q], [None])
    assert q.data[0] < 1.0 and q.data[1] > -1.0


def test_three_steps_on_a_square_match_a_scripted_adam():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = AdamState(lr=0.1)
    grads, trace = [], []
    for _ in range(3):
        w.grad = None
        nx.backward(nx.square(w))
        grads.append(float(w.grad))
        assert w.grad == 2 * w.data
        adam_step(opt, [w])
        trace.append(float(w.data))
    np.testing.assert_allclose(trace, adam_script(1.0, grads, lr=0.1), rtol=1e-15)


def test_state_must_match_params():
    a = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamState()
    adam_step(opt, [a], [np.ones(2)])
    with pytest.raises(ValueError):
        adam_step(opt, [a, a], [np.ones(2), np.ones(2)])


# -- training loop ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        train(small_model(), [], TrainConfig(epochs=1))


def test_zero_learning_rate_keeps_weights(graphs):
    m = small_model()
    before = [p.data.copy() for p in m.parameters()]
    train(m, graphs, TrainConfig(lr=0.0, epochs=2, batch_size=4, early_stop=False))
    for a, p in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_same_seed_same_log_and_weights(graphs):
    cfg = TrainConfig(epochs=3, batch_size=4, early_stop=False, seed=11)
    r1 = train(small_model(), graphs, cfg)
    r2 = train(small_model(), graphs, cfg)
    assert r1.loss_csv() == r2.loss_csv()
    for a, b in zip(r1.model.parameters(), r2.model.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_different_seed_changes_the_run(graphs):
    r1 = train(small_model(), graphs, TrainConfig(epochs=2, batch_size=4, early_stop=False, seed=1))
    r2 = train(small_model(), graphs, TrainConfig(epochs=2, batch_size=4, early_stop=False, seed=2))
    assert r1.loss_csv() != r2.loss_csv()


@pytest.mark.slow
def test_fifty_epochs_reduce_the_loss(graphs):
    r = train(small_model(), graphs, TrainConfig(epochs=50, batch_size=4, lr=0.01, early_stop=False))
    losses = [row["train_loss"] for row in r.log]
    best = np.minimum.accumulate(losses)
    assert np.all(np.diff(best) <= 0)
    assert losses[-1] < losses[0]


def test_loss_csv_layout(graphs):
    r = train(small_model(), graphs, TrainConfig(epochs=3, batch_size=5))
    rows = list(csv.reader(io.StringIO(r.loss_csv())))
    assert tuple(rows[0]) == LOSS_COLUMNS
    assert [int(x[0]) for x in rows[1:]] == [0, 1, 2, 3]
    for row, logged in zip(rows[1:], r.log):
        assert float(row[1]) == logged["train_loss"]
        assert float(row[2]) == logged["val_loss"]


def test_early_stop_after_patience_without_improvement(graphs):
    # with lr = 0 the validation loss never improves on its initial value
    r = train(small_model(), graphs, TrainConfig(lr=0.0, epochs=50, patience=3, batch_size=6))
    assert r.stopped_early
    assert len(r.log) == 1 + 3
    assert r.best_epoch == 0


def test_best_weights_are_restored(graphs):
    cfg = TrainConfig(lr=0.05, epochs=6, patience=2, batch_size=4, val_fraction=0.25)
    r = train(small_model(), graphs, cfg)
    vals = [row["val_loss"] for row in r.log]
    assert r.best_epoch == int(np.argmin(vals))
    # re-evaluating the held-out loss with the restored weights gives the logged best
    from svgs_dsgat.training import _batches, _mean_loss, _split
    _, val_idx = _split(len(graphs), cfg)
    again = _mean_loss(r.model, graphs, _batches(val_idx, cfg.batch_size, list(range(len(val_idx)))), cfg,
                       RngStream(cfg.seed).substream(7).substream(2))
    assert again == min(vals)


# -- parameter counts ------------------------------------------------------------


def test_single_linear_head_count():
    m = SvgsDsgatModel(ModelConfig(in_features=4, num_classes=3, use_sage=False, use_svam=False, use_dsgat=False))
    assert param_count(m)["total"] == 15


def test_default_count_by_hand():
    sage = 32 * 16 + 32 * 64
    svam = 32 + 32 + 32 * 32 + 32 + 1 + 32 * 32 + 32
    dsgat = 32 * 32 + 2
    head = 4 * 32 + 4
    pc = param_count(SvgsDsgatModel(ModelConfig()))
    assert pc["by_module"] == {"sage": sage, "svam": svam, "dsgat": dsgat, "head": head}
    assert pc["total"] == 5895


def test_disabling_any_module_strictly_lowers_the_count():
    def count(flags):
        return param_count(SvgsDsgatModel(ModelConfig(use_sage=flags[0], use_svam=flags[1],
                                                      use_dsgat=flags[2])))["total"]

    for flags in itertools.product([True, False], repeat=3):
        for i in range(3):
            if flags[i]:
                off = list(flags)
                off[i] = False
                assert count(tuple(off)) < count(flags)


# -- checkpoints -----------------------------------------------------------------


def test_round_trip_is_bitwise(tmp_path):
    m = small_model(seed=3)
    m.head_b.data = np.array([np.pi, -0.0, 1e-300, 5e-324])
    save_checkpoint(m, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    for (n1, a, _), (n2, b, _) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2
        assert a.data.tobytes() == b.data.tobytes()


def test_ablated_checkpoint_keeps_its_flags(tmp_path):
    m = small_model(use_svam=False)
    save_checkpoint(m, tmp_path / "c.json")
    assert load_checkpoint(tmp_path / "c.json").ablation == {"use_sage": True, "use_svam": False, "use_dsgat": True}


def test_truncated_checkpoint(tmp_path):
    save_checkpoint(small_model(), tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text()
    (tmp_path / "c.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "c.json")


def _edit(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_version_and_shape_errors(tmp_path):
    p = tmp_path / "c.json"
    save_checkpoint(small_model(), p)
    _edit(p, lambda d: d.update(format="svgs-dsgat-checkpoint/0"))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    save_checkpoint(small_model(), p)
    _edit(p, lambda d: d["params"][0].update(shape=[1, 1]))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(p)
    save_checkpoint(small_model(), p)
    _edit(p, lambda d: d["params"].pop())
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_training_twice_gives_identical_checkpoints(graphs, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4)
    save_checkpoint(train(small_model(), graphs, cfg).model, tmp_path / "a.json")
    save_checkpoint(train(small_model(), graphs, cfg).model, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
