"""End-to-end acceptance criteria 1-8.

Each test records a one-line verdict that is printed in the terminal summary
under "acceptance criteria". Criteria 5 and 6 share one desk-scale training run
of a few minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import random_graph, record_acceptance
from oracles import ap_oracle, map_oracle, mot_oracle, sage_stack_oracle
from scenarios import as_records, detection_scenario, tracked, tracking_scenario
from svgs_dsgat import gradcheck
from svgs_dsgat.cli import main
from svgs_dsgat.dataio import ImageBuffer
from svgs_dsgat.dsgat import DsgatLayer, attention_weights
from svgs_dsgat.graph import RngStream, from_image_grid
from svgs_dsgat.graphsage import SageStack, sage_embed
from svgs_dsgat.metrics import METRIC_COLUMNS, average_precision, clear_mot, map_suite
from svgs_dsgat.numerics import Tensor
from svgs_dsgat.svam import SvamParams, svam_forward
from svgs_dsgat.training import ModelConfig, SvgsDsgatModel, param_count

pytestmark = pytest.mark.acceptance

E2E = {"epochs": 200, "batch_size": 32, "lr": 0.001, "seed": 42, "weight_decay": 1e-5,
       "train_start": 0, "train_stop": 200}


def _same(a, b):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= 1e-12


# -- 1: gradient integrity ---------------------------------------------------------


def test_1_gradient_integrity():
    t0 = time.perf_counter()
    results = gradcheck.run()
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error / r.tolerance for r in results)
    ok = not failed and elapsed < 60
    record_acceptance(1, ok, f"{len(results) - len(failed)}/{len(results)} cases, worst err/tol {worst:.2g}, "
                             f"{elapsed:.1f}s")
    assert not failed, failed
    assert elapsed < 60


# -- 2: attention normalization ----------------------------------------------------


def _dsgat_layer(rng, f_in, f_out, b1, b2):
    return DsgatLayer(Tensor(rng.normal(size=(f_out, f_in))), Tensor(float(b1)), Tensor(float(b2)),
                      str(rng.choice(["relu", "sigmoid", "identity"])))


def test_2_attention_rows_are_normalized():
    worst, uniform_ok = 0.0, True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, f=int(rng.integers(1, 6)))
        h = g.features * rng.uniform(0.01, 100)
        f_in, f_out = h.shape[1], int(rng.integers(1, 5))
        alpha, dst, _ = attention_weights(_dsgat_layer(rng, f_in, f_out, *rng.normal(scale=5, size=2)), h, g)
        sums = np.bincount(dst, weights=alpha.data, minlength=g.num_nodes)
        worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        alpha0, dst0, _ = attention_weights(_dsgat_layer(rng, f_in, f_out, 0.0, 0.0), h, g)
        row_len = np.bincount(dst0, minlength=g.num_nodes)  # an isolated node's row holds only itself
        uniform_ok &= bool(np.array_equal(alpha0.data, 1.0 / row_len[dst0]))
    ok = worst <= 1e-12 and uniform_ok
    record_acceptance(2, ok, f"max |row sum - 1| = {worst:.1e} over 1000 graphs, zero betas uniform: {uniform_ok}")
    assert worst <= 1e-12
    assert uniform_ok


# -- 3: saliency normalization -----------------------------------------------------


def _svam_params(rng, f):
    vals = dict(alpha=rng.uniform(0.1, 2.0, f), beta=rng.normal(scale=2, size=f), w_f=rng.normal(size=(f, f)),
                b_f=rng.normal(size=f), gamma=np.array(rng.uniform(0.0, 1.0)), w_o=rng.normal(size=(f, f)),
                b_o=rng.normal(size=f))
    return SvamParams(**{k: Tensor(np.asarray(v, dtype=float)) for k, v in vals.items()})


def _pixel_grid(values):
    return from_image_grid(ImageBuffer.from_array(np.asarray(values, dtype=float)), 1)


def test_3_saliency_and_output_ranges():
    sum_err, uniform_err, e_max = 0.0, 0.0, 0.0
    o_inside = True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        rows, cols, f = (int(v) for v in rng.integers(1, 7, size=3))
        g = _pixel_grid(rng.uniform(size=(rows, cols)))
        h = rng.normal(size=(rows * cols, f)) * rng.uniform(0.01, 50)
        p = _svam_params(rng, f)
        O, tr = svam_forward(h, g, p)
        sum_err = max(sum_err, abs(float(tr.S.sum()) - 1.0))
        e_max = max(e_max, float(np.max(np.abs(tr.E))))
        o_inside &= bool(np.all((O.data > 0) & (O.data < 1)))
        flat = _pixel_grid(np.full((rows, cols), rng.uniform()))
        _, tr0 = svam_forward(h, flat, p)
        uniform_err = max(uniform_err, float(np.max(np.abs(tr0.S - 1.0 / (rows * cols)))))
    ok = sum_err <= 1e-9 and uniform_err == 0.0 and e_max <= 1.0 and o_inside
    record_acceptance(3, ok, f"max |sum S - 1| = {sum_err:.1e}, constant-input deviation {uniform_err:.1e}, "
                             f"max |E| = {e_max:.3f}, O in (0,1): {o_inside}")
    assert sum_err <= 1e-9
    assert uniform_err == 0.0
    assert e_max <= 1.0
    assert o_inside


# -- 4: oracle equivalence ---------------------------------------------------------


def test_4_oracle_equivalence():
    sage_bad = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = random_graph(rng)
        aggregator = ("mean", "maxpool")[seed % 2]
        activation = ("relu", "sigmoid")[(seed // 2) % 2]
        stack = SageStack.init([3, 5, 4], RngStream(seed), k=max(g.max_degree, 1) + seed % 3,
                               aggregator=aggregator, activation=activation)
        got = sage_embed(stack, g, RngStream(seed + 1)).data
        want = sage_stack_oracle(g.features, g.neighbors, [lyr.weight.data for lyr in stack.layers],
                                 aggregator, activation, stack.k)
        if not np.array_equal(got, want):
            sage_bad.append(seed)

    metric_bad = []
    for seed in range(200):
        dets, gts, classes = detection_scenario(seed)
        D, G = as_records(dets, gts)
        suite, want = map_suite(D, G, classes=classes), map_oracle(dets, gts, classes)
        ok = all(_same(suite[k], want[k]) for k in METRIC_COLUMNS)
        for c in classes:
            ok &= _same(average_precision(D, G, c, 0.5), ap_oracle(dets, gts, c, 0.5))
        hyp, gt = tracking_scenario(seed)
        got_mot, want_mot = clear_mot(tracked(hyp), tracked(gt)), mot_oracle(hyp, gt)
        ok &= all(got_mot[k] == want_mot[k] for k in ("IDSW", "FP", "FN"))
        ok &= _same(got_mot["MOTA"], want_mot["MOTA"]) and _same(got_mot["MOTP"], want_mot["MOTP"])
        if not ok:
            metric_bad.append(seed)
    ok = not sage_bad and not metric_bad
    record_acceptance(4, ok, f"GraphSage bitwise {100 - len(sage_bad)}/100, metric scenarios "
                             f"{200 - len(metric_bad)}/200")
    assert not sage_bad, sage_bad
    assert not metric_bad, metric_bad


# -- 5 and 6: desk-scale training run ------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert main(["synth", str(root / "data"), "--seed", "42", "--n", "250", "--size", "64"]) == 0
    cfg = root / "config.json"
    cfg.write_text(json.dumps({**E2E, "data_dir": str(root / "data"), "out_dir": str(root / "run")}))
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    assert main(["eval", "--data", str(root / "data"), "--start", "200", "--checkpoint",
                 str(root / "run" / "checkpoint.json"), "--out", str(root / "metrics.json")]) == 0
    elapsed = time.perf_counter() - t0
    manifest = json.loads((root / "run" / "run-manifest.json").read_text())
    metrics = json.loads((root / "metrics.json").read_text())
    return {"root": root, "elapsed": elapsed, "result": manifest["result"], "metrics": metrics}


def test_5_desk_scale_end_to_end(desk_run):
    ap50 = desk_run["metrics"]["metrics"]["AP50"]
    first, last = desk_run["result"]["initial_loss"], desk_run["result"]["final_loss"]
    elapsed = desk_run["elapsed"]
    ok = ap50 >= 0.70 and last < 0.3 * first and elapsed <= 600
    record_acceptance(5, ok, f"held-out AP50 {ap50:.3f} (mAP {desk_run['metrics']['metrics']['mAP']:.3f}), "
                             f"loss {first:.4f} -> {last:.4f}, {elapsed:.0f}s")
    assert desk_run["metrics"]["images"] == 50
    assert ap50 >= 0.70
    assert last < 0.3 * first
    assert elapsed <= 600


def test_6_tracking_sanity(desk_run):
    seq = desk_run["root"] / "motion"
    assert main(["synth", str(seq), "--motion", "--seed", "42", "--frames", "30", "--tracks", "3",
                 "--size", "96"]) == 0
    gt_out, model_out = desk_run["root"] / "track_gt.json", desk_run["root"] / "track_model.json"
    assert main(["track-eval", "--data", str(seq), "--gt-as-detections", "--out", str(gt_out)]) == 0
    assert main(["track-eval", "--data", str(seq), "--checkpoint", str(desk_run["root"] / "run" / "checkpoint.json"),
                 "--out", str(model_out)]) == 0
    gt, model = json.loads(gt_out.read_text()), json.loads(model_out.read_text())
    ok = gt["MOTA"] == 1.0 and gt["IDSW"] == 0 and model["MOTA"] >= 0.5
    record_acceptance(6, ok, f"ground truth MOTA {gt['MOTA']} IDSW {gt['IDSW']}, trained MOTA {model['MOTA']:.3f} "
                             f"(IDSW {model['IDSW']}, FP {model['FP']}, FN {model['FN']})")
    assert gt["frames"] == 30
    assert gt["MOTA"] == 1.0 and gt["IDSW"] == 0
    assert model["MOTA"] >= 0.5


# -- 7: determinism -----------------------------------------------------------------


def test_7_reruns_are_bitwise_identical(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", str(data), "--seed", "7", "--n", "24", "--size", "32"]) == 0
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"data_dir": str(data), "out_dir": str(tmp_path / "first"), "epochs": 6,
                               "batch_size": 8, "sage_widths": [8], "dsgat_out": 8, "train_stop": 16,
                               "score_threshold": 0.3}))
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    manifest = tmp_path / "first" / "run-manifest.json"
    outputs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "--config", str(manifest), "--out", str(run), "--quiet"]) == 0
        assert main(["eval", "--data", str(data), "--start", "16", "--checkpoint", str(run / "checkpoint.json"),
                     "--threshold", "0.3", "--out", str(run / "metrics.json")]) == 0
        outputs.append({f: (run / f).read_bytes() for f in ("checkpoint.json", "metrics.json", "loss.csv")})
    same = {f: outputs[0][f] == outputs[1][f] for f in outputs[0]}
    same["first run checkpoint"] = (tmp_path / "first" / "checkpoint.json").read_bytes() == outputs[0]["checkpoint.json"]
    ok = all(same.values())
    record_acceptance(7, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok, same


# -- 8: ablation mechanics -------------------------------------------------------------


PARTIAL = [(True, True, False), (True, False, True), (False, True, True),
           (True, False, False), (False, True, False), (False, False, True)]


def test_8_ablation_mechanics(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", str(data), "--seed", "8", "--n", "12", "--size", "32"]) == 0
    trained = []
    for sage, svam, dsgat in PARTIAL:
        out = tmp_path / f"run_{int(sage)}{int(svam)}{int(dsgat)}"
        cfg = tmp_path / f"{out.name}.json"
        cfg.write_text(json.dumps({"data_dir": str(data), "out_dir": str(out), "epochs": 3, "batch_size": 4,
                                   "use_sage": sage, "use_svam": svam, "use_dsgat": dsgat}))
        code = main(["train", "--config", str(cfg), "--quiet"])
        result = json.loads((out / "run-manifest.json").read_text())["result"] if code == 0 else {}
        trained.append(code == 0 and all(math.isfinite(result[k]) for k in ("initial_loss", "final_loss")))

    def count(flags):
        cfg = ModelConfig(in_features=8, num_classes=4, use_sage=flags[0], use_svam=flags[1], use_dsgat=flags[2])
        return param_count(SvgsDsgatModel(cfg))["total"]

    subsets = [(a, b, c) for a in (True, False) for b in (True, False) for c in (True, False)]
    drops = []
    for flags in subsets:
        for i in range(3):
            if flags[i]:
                off = tuple(v and j != i for j, v in enumerate(flags))
                drops.append(count(off) < count(flags))
    ok = all(trained) and all(drops)
    record_acceptance(8, ok, f"partial configs trained {sum(trained)}/6, strict param drops {sum(drops)}/{len(drops)}"
                             f" (full model {count((True, True, True))} parameters)")
    assert all(trained)
    assert all(drops)
