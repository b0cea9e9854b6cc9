"""Acceptance suite: one marked test (or group) per criterion.

A per-criterion PASS/FAIL line is printed in the terminal summary.
"""

import csv
import hashlib
import math
import time

import numpy as np
import pytest
from conftest import smooth_texture
from test_flow import block_matching, interior, shifted_pair
from test_nn import LAYER_TOL, MODEL_TOL, STEP, _block_fn, analytic_param_count, check_grads, direct_conv

from spermnet import synthetic
from spermnet.cli import main
from spermnet.dataset import (
    ChunkSpec,
    DatasetFile,
    InMemoryDataset,
    build_d2_sample,
    build_video_samples,
    load_labels,
    write_dataset,
)
from spermnet.flow import FarnebackParams, estimate_flow, polynomial_expansion
from spermnet.media import GrayFrame, open_video, write_image_sequence
from spermnet.nn import (
    BasicBlock,
    ModelConfig,
    adaptive_avg_pool,
    backward,
    batch_norm2d,
    build_model,
    conv2d,
    dropout,
    linear,
    max_pool2d,
    relu,
)
from spermnet.nn.gradcheck import max_relative_error, numerical_grad
from spermnet.training import (
    AdamState,
    MetricsReport,
    TrainConfig,
    adam_step,
    evaluate,
    mae,
    run_cross_validation,
    train,
)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1, "flow zero-case: identical 256x256 frames give |flow| <= 1e-3 in < 1 s")
def test_c01_flow_zero_case():
    g = GrayFrame.from_array(smooth_texture(256, 11))
    estimate_flow(g, g)  # warm-up (imports, allocator)
    t0 = time.perf_counter()
    f = estimate_flow(g, g)
    elapsed = time.perf_counter() - t0
    assert max(np.abs(f.u).max(), np.abs(f.v).max()) <= 1e-3
    assert elapsed < 1.0, elapsed


# 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2, "flow recovery: (3,1) shift, >= 80% interior within 0.5 px, median vs block matching, < 5 s")
def test_c02_flow_recovery():
    a, b = shifted_pair(128, 3, 1, seed=21)
    t0 = time.perf_counter()
    f = estimate_flow(a, b)
    elapsed = time.perf_counter() - t0
    err = np.hypot(interior(f.u) - 3, interior(f.v) - 1)
    assert (err <= 0.5).mean() >= 0.8
    med = np.median(block_matching(a.data, b.data), axis=0)
    assert abs(np.median(interior(f.u)) - med[0]) <= 0.5
    assert abs(np.median(interior(f.v)) - med[1]) <= 0.5
    assert elapsed < 5.0, elapsed


# 3 -------------------------------------------------------------------------


@pytest.mark.criterion(3, "polynomial expansion exact on quadratics within 1e-5")
@pytest.mark.parametrize("poly_n", [5, 7])
def test_c03_polynomial_exactness(poly_n):
    rng = np.random.default_rng(poly_n)
    ys, xs = np.mgrid[0:40, 0:40].astype(float)
    for _ in range(5):
        c0, bx, by, qxx, qxy, qyy = rng.uniform(-0.01, 0.01, 6)
        f = c0 + bx * xs + by * ys + qxx * xs**2 + 2 * qxy * xs * ys + qyy * ys**2
        e = polynomial_expansion(GrayFrame.from_array(f), FarnebackParams(poly_n=poly_n))
        sl = np.s_[poly_n:-poly_n, poly_n:-poly_n]
        checks = {
            "c": (e.c, f),
            "b1": (e.b1, bx + 2 * qxx * xs + 2 * qxy * ys),
            "b2": (e.b2, by + 2 * qyy * ys + 2 * qxy * xs),
            "a11": (e.a11, np.full_like(f, qxx)),
            "a12": (e.a12, np.full_like(f, qxy)),
            "a22": (e.a22, np.full_like(f, qyy)),
        }
        for name, (got, want) in checks.items():
            assert np.abs(got[sl] - want[sl]).max() <= 1e-5, name


# 4 -------------------------------------------------------------------------


@pytest.mark.criterion(4, "gradient suite: layers < 1e-4, residual block < 1e-4, tiny model < 1e-3, all in < 60 s")
def test_c04_gradient_suite():
    rng = np.random.default_rng(40)
    t0 = time.perf_counter()
    x = rng.normal(size=(2, 3, 7, 6))
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        check_grads(lambda a, w, b: conv2d(a, w, b, stride, pad),
                    [x, rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)], rng, LAYER_TOL)
    for training in (True, False):
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, 2)
        check_grads(lambda a, g, b: batch_norm2d(a, g, b, rm.copy(), rv.copy(), training),
                    [rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2), rng.normal(size=2)], rng, LAYER_TOL)
    check_grads(linear, [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)], rng, LAYER_TOL)
    xr = rng.normal(size=(3, 8))
    xr[np.abs(xr) < 0.01] = 0.5
    check_grads(relu, [xr], rng, LAYER_TOL)
    xp = rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) / 10.0
    check_grads(lambda a: max_pool2d(a, 3, 2, 1), [xp], rng, LAYER_TOL)
    check_grads(adaptive_avg_pool, [rng.normal(size=(2, 3, 4, 5))], rng, LAYER_TOL)
    mask = rng.random((4, 6)) >= 0.5
    check_grads(lambda a: dropout(a, 0.5, True, mask=mask), [rng.normal(size=(4, 6))], rng, LAYER_TOL)

    for stride, cin, cout in [(1, 3, 3), (2, 3, 4)]:
        block = BasicBlock(cin, cout, stride, rng).astype(np.float64)
        params, fn = _block_fn(block)
        arrays = [rng.normal(size=(2, cin, 6, 6))] + [p.data.copy() for p in params]
        check_grads(lambda *t: fn(t[0], *t[1:]), arrays, rng, LAYER_TOL, max_entries=25)

    model = build_model(ModelConfig(variant="tiny", head="M2"), seed=41).astype(np.float64)
    model.train()
    xm = rng.normal(size=(2, 9, 16, 16))
    weights = rng.normal(size=(2, 3))

    def loss():
        model.reseed_dropout(5)
        return float((model(xm).data * weights).sum())

    model.reseed_dropout(5)
    grads = backward(model, model(xm), weights)
    worst, checked, sampled = 0.0, 0, 0
    for name, p in model.named_parameters():
        idx = rng.choice(p.data.size, min(p.data.size, 6), replace=False)
        num, valid = numerical_grad(loss, p.data, STEP, idx, track_kinks=True)
        keep = idx[valid.reshape(-1)[idx]]
        worst = max(worst, max_relative_error(grads[name].reshape(-1)[keep], num.reshape(-1)[keep]))
        checked += keep.size
        sampled += idx.size
    assert checked >= 0.5 * sampled
    assert worst < MODEL_TOL, worst
    assert time.perf_counter() - t0 < 60.0


# 5 -------------------------------------------------------------------------


@pytest.mark.criterion(5, "conv2d matches direct convolution on 20 random shapes within 1e-6")
def test_c05_conv_oracle():
    rng = np.random.default_rng(50)
    for _ in range(20):
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
        kh = kw = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h, w = rng.integers(kh, 10, size=2)
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(k, c, kh, kw))
        b = rng.normal(size=k)
        got = conv2d(x, wt, b, stride, pad).data
        assert np.abs(got - direct_conv(x, wt, b, stride, pad)).max() <= 1e-6


# 6 -------------------------------------------------------------------------


@pytest.mark.criterion(6, "Adam: 10 steps on a scalar quadratic match a hand recurrence within 1e-9; zero grad is a no-op")
def test_c06_adam_oracle():
    def hand(theta, steps, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        for t in range(1, steps + 1):
            g = 2.0 * (theta + 1.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        return theta

    params = {"theta": np.array([0.75])}
    state = AdamState()
    for _ in range(10):
        adam_step(params, {"theta": 2.0 * (params["theta"] + 1.0)}, state)
    assert abs(params["theta"][0] - hand(0.75, 10)) <= 1e-9

    fresh = {"w": np.array([0.3, -1.2])}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(fresh["w"], [0.3, -1.2])


# 7 -------------------------------------------------------------------------


@pytest.mark.criterion(7, "overfit: 8 synthetic videos, D2, tiny M2, 200 epochs -> train MAE < 2.0 in < 10 min")
@pytest.mark.slow
def test_c07_overfit(tmp_path):
    t0 = time.perf_counter()
    corpus = synthetic.make_corpus(tmp_path, n_videos=8, seed=0)
    samples = []
    for rec in load_labels(corpus["labels"]):
        src = open_video(corpus["videos"] / rec.video_id)
        samples += list(build_video_samples(src, "D2", rec, "motility", n_chunks=1))
    ds = InMemoryDataset(samples)
    assert len(ds) == 8
    cfg = TrainConfig(epochs=200, batch_size=2, seed=0, dataset_kind="D2",
                      model=ModelConfig(variant="tiny", head="M2", dropout_probs=[0.0, 0.0]))
    result = train(cfg, ds)
    train_mae = mae(evaluate(result.model, ds, np.arange(8)), ds.targets)
    elapsed = time.perf_counter() - t0
    print(f"overfit train MAE {train_mae:.3f} (best epoch {result.best_epoch}) in {elapsed:.0f} s")
    assert train_mae < 2.0
    assert elapsed < 600
    # loss decreases on 10-epoch windows, allowing local noise
    mse = np.array([l.train_mse for l in result.logs]).reshape(-1, 10).mean(axis=1)
    assert mse[-1] < 0.05 * mse[0]
    assert np.all(np.minimum.accumulate(mse)[1:] <= mse[:-1] * 1.5)


# 8 -------------------------------------------------------------------------


@pytest.mark.criterion(8, "dataset: 250 chunks per video, 9x256x256 samples, D2 channel ordering, bit-exact round trip")
def test_c08_dataset_construction(tmp_path):
    rng = np.random.default_rng(80)
    base = smooth_texture(24, 80)
    frames = [np.rint(255 * np.stack([np.roll(base, i, axis=1)] * 3, -1)).astype(np.uint8) for i in range(13)]
    src = open_video(write_image_sequence(frames, tmp_path / "vid"))
    samples = list(build_video_samples(src, "D2", None))
    assert len(samples) == 250
    assert all(s.data.shape == (9, 256, 256) and s.data.dtype == np.float32 for s in samples)

    altered = list(frames)
    altered[10] = np.roll(frames[10], 2, axis=0)
    src_b = open_video(write_image_sequence(altered, tmp_path / "alt"))
    a = build_d2_sample(src, ChunkSpec("x", 0)).data
    b = build_d2_sample(src_b, ChunkSpec("x", 0)).data
    np.testing.assert_array_equal(a[:6], b[:6])
    assert np.abs(a[6:] - b[6:]).max() > 0

    subset = [samples[i] for i in rng.choice(250, 20, replace=False)]
    write_dataset(subset, tmp_path / "d.sprm")
    back = DatasetFile(tmp_path / "d.sprm")
    for s, t in zip(subset, back):
        assert s.data.tobytes() == t.data.tobytes() and s.target.tobytes() == t.target.tobytes()
        assert (s.video_id, s.start_frame) == (t.video_id, t.start_frame)


# 9 and 10 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert main(["synth", "--out", str(root), "--videos", "3", "--frames", "13", "--size", "32", "--seed", "5"]) == 0
    return root


def _preprocess(root, kind, task, out, extra=()):
    return main(["preprocess", "--videos", str(root / "videos"), "--labels", str(root / "labels.csv"),
                 "--folds", str(root / "folds.csv"), "--kind", kind, "--task", task,
                 "--set", "n_chunks=2", *extra, "--out", str(out)])


@pytest.mark.criterion(9, "determinism: same seeds reproduce dataset hashes and MetricsReport values (1e-6)")
def test_c09_determinism(tmp_path, cli_corpus):
    for name in ("a", "b"):
        assert _preprocess(cli_corpus, "D2", "motility", tmp_path / f"{name}.sprm",
                           ["--set", "random_chunks=true", "--seed", "17"]) == 0
    assert sha256(tmp_path / "a.sprm") == sha256(tmp_path / "b.sprm")

    ds = DatasetFile(tmp_path / "a.sprm")
    folds = {"v01": 0, "v02": 1, "v03": 2}
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3, model=ModelConfig(variant="tiny", head="M2"))
    first = run_cross_validation(cfg, ds, folds).report
    second = run_cross_validation(cfg, ds, folds).report
    assert first.entries.keys() == second.entries.keys()
    for key in first.entries:
        assert abs(first.entries[key] - second.entries[key]) <= 1e-6


@pytest.mark.criterion(10, "report: Fold 1-3 + Average per DxM cell, motility and morphology tables, average = mean (1e-9)")
def test_c10_report_format(tmp_path, cli_corpus, capsys):
    outs = []
    for kind in ("D1", "D2"):
        for task in ("motility", "morphology"):
            data = tmp_path / f"{kind}_{task}.sprm"
            assert _preprocess(cli_corpus, kind, task, data) == 0
            for head in ("M1", "M2"):
                out = tmp_path / f"cv_{kind}_{head}_{task}"
                rc = main(["cv", "--dataset", str(data), "--set", "epochs=1", "--set", "batch_size=2",
                           "--set", 'model.variant="tiny"', "--set", f'model.head="{head}"', "--out", str(out)])
                assert rc == 0
                outs.append(out)
    capsys.readouterr()
    assert main(["report", *map(str, outs), "--out", str(tmp_path / "report")]) == 0
    table = capsys.readouterr().out

    with open(tmp_path / "report" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    for task in ("motility", "morphology"):
        task_rows = [r for r in rows if r["task"] == task]
        assert len(task_rows) == 4 * (3 + 1)
        for kind in ("D1", "D2"):
            for head in ("M1", "M2"):
                cell = [r for r in task_rows if r["input"] == kind and r["method"] == head]
                assert [r["fold"] for r in cell] == ["1", "2", "3", "average"]
                folds = [float(r["mae"]) for r in cell[:3]]
                assert abs(float(cell[3]["mae"]) - sum(folds) / 3) <= 1e-9

    sections = {block.splitlines()[0]: block for block in table.strip().split("\n\n")}
    assert set(sections) == {"Motility MAE", "Morphology MAE"}
    for section in sections.values():
        for kind in ("D1", "D2"):
            for head in ("M1", "M2"):
                lines = [l for l in section.splitlines() if l.startswith(f"{kind:<6} {head:<7}")]
                assert [l[15:22].strip() for l in lines] == ["Fold 1", "Fold 2", "Fold 3", "Average"]
    report = MetricsReport.from_csv((tmp_path / "report" / "metrics.csv").read_text())
    assert len(report.cells()) == 8


# 11 ------------------------------------------------------------------------


@pytest.mark.criterion(11, "dropout p=0.5 over 1e4 trials: survivors 0.5 +/- 0.02, mean within 2%")
def test_c11_dropout_statistics():
    rng = np.random.default_rng(110)
    x = rng.uniform(0.5, 1.5, 10_000)
    out = dropout(x, 0.5, True, rng).data
    assert abs((out != 0).mean() - 0.5) <= 0.02
    assert abs(out.mean() - x.mean()) <= 0.02 * x.mean()
    np.testing.assert_allclose(out[out != 0], 2 * x[out != 0])


# 12 ------------------------------------------------------------------------


@pytest.mark.criterion(12, "resnet34 (9 ch, M1) parameter total equals analytic sum; 3 -> 9 channels adds 64*6*7*7")
def test_c12_parameter_count():
    nine = build_model(ModelConfig(variant="resnet34", in_channels=9, head="M1"), seed=0).num_parameters()
    three = build_model(ModelConfig(variant="resnet34", in_channels=3, head="M1"), seed=0).num_parameters()
    assert nine == analytic_param_count((3, 4, 6, 3), (64, 128, 256, 512), 9, "M1")
    assert nine - three == 64 * 6 * 7 * 7
