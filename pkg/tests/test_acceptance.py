"""Acceptance criteria, one test each.  The terminal summary prints a PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest
from helpers import ConvTapModel, micro_model_gradient_errors, op_gradient_errors, overfit_losses
from metric_oracle import brute_ap, brute_auc, brute_metrics, random_instance
from sklearn.metrics import silhouette_score

from lret import autodiff as ad
from lret.autodiff import Tensor
from lret.checkpoint import (
    CheckpointError,
    checkpoint_from_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from lret.data import (
    DataLoader,
    LoaderConfig,
    Record,
    SynthSpec,
    benchmark,
    load_manifest,
    save_manifest,
    synth_generate,
)
from lret.data.images import read_image, to_float
from lret.embed import FeatureSet, average_by_k, tsne
from lret.explain import METHODS, explain, grad_cam, normalize_map, quadrant_mass, score_cam
from lret.metrics import (
    compute_metrics,
    read_confusion_csv,
    read_curve_csv,
    threshold_report,
    write_confusion_csv,
    write_pr_csv,
    write_roc_csv,
)
from lret.model import BackboneSpec, ModelSpec, build_model, estimate_flops, hfe_model_spec
from lret.resizers import GlrSpec, HfeSpec, StaticResizeSpec, build_glr, build_hfe
from lret.train import CHECKPOINT_NAME, TrainConfig, predict, train


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def images(n, size, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3)).astype(np.float32)


def away_from_zero(x, margin=0.1):
    return x + margin * np.sign(x)


def _bn(training):
    def op(x, g, b):
        c = x.shape[-1]
        return ad.batch_norm(x, g, b, np.ones(c) * 0.2, np.ones(c) * 1.7, training=training)
    return op


def _dropout(x):
    return ad.dropout(x, 0.4, training=True, rng=np.random.default_rng(3))


OP_CASES = {
    "add": (ad.add, {"a": rand(3, 4), "b": rand(4, seed=1)}, {}),
    "sub": (ad.sub, {"a": rand(3, 4), "b": rand(3, 1, seed=1)}, {}),
    "mul": (ad.mul, {"a": rand(2, 3, 4), "b": rand(3, 4, seed=1)}, {}),
    "sum": (ad.sum, {"x": rand(3, 5)}, {}),
    "mean": (ad.mean, {"x": rand(2, 3, 4)}, {}),
    "reshape": (lambda x: ad.reshape(x, (4, 6)), {"x": rand(2, 3, 4)}, {}),
    "index": (lambda x: ad.index(x, (slice(None), slice(1, 3))), {"x": rand(3, 5)}, {}),
    "relu": (ad.relu, {"x": away_from_zero(rand(4, 5))}, {}),
    "leaky_relu": (lambda x: ad.leaky_relu(x, 0.2), {"x": away_from_zero(rand(4, 5))}, {}),
    "conv2d same s1": (ad.conv2d, {"x": rand(2, 6, 5, 3), "k": rand(3, 3, 3, 4, seed=1), "b": rand(4, seed=2)}, {}),
    "conv2d same s2": (ad.conv2d, {"x": rand(1, 7, 8, 2), "k": rand(3, 3, 2, 3, seed=1), "b": rand(3, seed=2)},
                       {"stride": 2}),
    "conv2d valid 7x7": (ad.conv2d, {"x": rand(1, 9, 9, 2), "k": rand(7, 7, 2, 2, seed=1), "b": rand(2, seed=2)},
                         {"padding": "valid"}),
    "max_pool": (ad.max_pool, {"x": rand(2, 7, 6, 3)}, {}),
    "global_avg_pool": (ad.global_avg_pool, {"x": rand(2, 4, 5, 3)}, {}),
    "dense": (ad.dense, {"x": rand(4, 5), "w": rand(5, 3, seed=1), "b": rand(3, seed=2)}, {}),
    "batch_norm train": (_bn(True), {"x": rand(4, 3, 3, 2), "g": rand(2, seed=1) + 1.5, "b": rand(2, seed=2)}, {}),
    "batch_norm infer": (_bn(False), {"x": rand(4, 3, 3, 2), "g": rand(2, seed=1) + 1.5, "b": rand(2, seed=2)}, {}),
    "dropout": (_dropout, {"x": rand(6, 5)}, {}),
    "softmax_cross_entropy": (lambda z: ad.softmax_cross_entropy(z, [0, 2, 1, 2], [1.0, 0.5, 2.0])[0],
                              {"z": rand(4, 3)}, {}),
    "bilinear_resize down": (lambda x: ad.bilinear_resize(x, 3, 4), {"x": rand(1, 7, 9, 2)}, {}),
    "bilinear_resize up": (lambda x: ad.bilinear_resize(x, 9, 5), {"x": rand(2, 4, 3, 1)}, {}),
}


@pytest.mark.criterion(1, "gradient suite")
def test_criterion_01_gradients(record_property):
    t0 = time.perf_counter()
    worst = {}
    for name, (op, arrays, kwargs) in OP_CASES.items():
        errs = op_gradient_errors(op, arrays, **kwargs)
        worst[name] = max(errs.values())
    e2e = max(micro_model_gradient_errors(np.float64).values())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(OP_CASES)} op cases, worst per-op {max(worst.values()):.1e}, "
                              f"end-to-end {e2e:.1e}, {elapsed:.1f}s")
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, bad
    assert e2e < 1e-2
    assert elapsed < 120


@pytest.mark.criterion(2, "shape contract")
def test_criterion_02_shapes(record_property):
    for size in (512, 768, 1024):
        hfe = build_hfe(HfeSpec((size, size, 3), 256))
        assert hfe(Tensor(images(1, size)), training=False).shape == (1, 256, 256, 8)
    for size, t in ((64, 16), (128, 32), (256, 64)):
        hfe = build_hfe(HfeSpec((size, size, 3), t))
        assert hfe(Tensor(images(1, size)), training=False).shape == (1, t, t, 8)
    for target in (224, 299):
        glr = build_glr(GlrSpec((512, 512, 3), (target, target), filters=4))
        assert glr(Tensor(images(1, 512)), training=False).shape == (1, target, target, 3)
    full = build_model(hfe_model_spec(1024, 256, 4, channels=(16, 32, 64, 64)))
    fen = full.forward(images(1, 1024)).taps["fen"]
    assert fen.shape[1:3] == (8, 8)  # 256 / 32
    ablation = build_model(ModelSpec((1024, 1024, 3), 4, resizer=None, backbone=BackboneSpec(input_channels=3),
                                     head_width=64))
    bottleneck = ablation.forward(images(1, 1024)).taps["fen"]
    assert bottleneck.shape[1:3] == (32, 32)  # 1024 / 32
    record_property("detail", f"FEN {tuple(fen.shape[1:])}, no-resizer bottleneck {tuple(bottleneck.shape[1:])}")


@pytest.mark.criterion(3, "GLR skip identity")
def test_criterion_03_glr_identity(record_property):
    for size, target in ((256, (224, 224)), (320, (299, 299))):
        glr = build_glr(GlrSpec((size, size, 3), target, filters=4), np.random.default_rng(1))
        for name, p in glr.named_parameters():
            if not name.endswith("gamma"):
                p.data[...] = 0
        x = Tensor(images(2, size, seed=2))
        np.testing.assert_array_equal(glr(x, training=True).data, ad.resize_bilinear_array(x.data, *target))
    record_property("detail", "bit-exact at 224 and 299")


@pytest.mark.criterion(4, "cache and prefetch efficiency")
def test_criterion_04_pipeline(tmp_path, record_property):
    t0 = time.perf_counter()
    m = load_manifest(synth_generate(SynthSpec(4, 50, 64, seed=4), tmp_path))
    m = m.with_records([Record(r.path, r.label, "train") for r in m.records])
    assert len(m.subset("train")) == 200
    base = LoaderConfig(batch_size=16, simulated_io_latency_ms=5.0, decode_workers=2)
    on, on_digests = benchmark(m, "train", base, epochs=2)
    off, off_digests = benchmark(m, "train", LoaderConfig(**{**base.to_dict(), "cache": False}), epochs=2)
    assert on[1].wall_ms < 0.5 * on[0].wall_ms
    assert on[1].wall_ms < 0.5 * off[1].wall_ms
    orders = {tuple(on_digests), tuple(off_digests)}
    for workers in (1, 2, 4):
        for cache in (True, False):
            cfg = LoaderConfig(**{**base.to_dict(), "decode_workers": workers, "cache": cache})
            orders.add(tuple(benchmark(m, "train", cfg, epochs=2)[1]))
    assert len(orders) == 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 180
    record_property("detail", f"epoch1 {on[0].wall_ms:.0f} ms, cached epoch2 {on[1].wall_ms:.0f} ms, "
                              f"uncached epoch2 {off[1].wall_ms:.0f} ms, {elapsed:.0f}s")


def _test_accuracy(ckpt, manifest):
    return predict(model_from_checkpoint(ckpt), DataLoader(manifest, "test", LoaderConfig(shuffle=False))).accuracy


@pytest.mark.criterion(5, "HFE beats static resize on fine-grained evidence")
def test_criterion_05_hfe_vs_static(tmp_path, record_property):
    results = []
    for seed in (0, 1, 2):
        m = load_manifest(synth_generate(SynthSpec(4, 50, 256, seed=seed, style="fine"), tmp_path / str(seed)))
        hfe_spec = hfe_model_spec(256, 64, 4)
        static_spec = ModelSpec((256, 256, 3), 4, resizer=StaticResizeSpec((64, 64)),
                                backbone=BackboneSpec(input_channels=3), head_width=64)
        accs = []
        for spec in (hfe_spec, static_spec):
            t0 = time.perf_counter()
            ckpt, _ = train(build_model(spec, seed=seed), m, LoaderConfig(shuffle_seed=seed),
                            TrainConfig(epochs=10, batch_size=16, seed=seed))
            assert time.perf_counter() - t0 < 600
            accs.append(_test_accuracy(ckpt, m))
        results.append(accs)
    wins = sum(h - s >= 0.05 for h, s in results)
    record_property("detail", "HFE/static test acc " + ", ".join(f"{h:.3f}/{s:.3f}" for h, s in results))
    assert wins >= 2, results


@pytest.mark.criterion(6, "no-resizer epoch cost at least 2x HFE")
def test_criterion_06_cost(tmp_path, record_property):
    m = load_manifest(synth_generate(SynthSpec(4, 16, 256, seed=6, style="fine"), tmp_path))
    channels, blocks = (32, 64, 128, 256), 2  # ResNet-like widths; the front end is not the bottleneck
    hfe = hfe_model_spec(256, 64, 4, channels=channels)
    hfe.backbone.blocks_per_stage = blocks
    none = ModelSpec((256, 256, 3), 4, resizer=None,
                     backbone=BackboneSpec(input_channels=3, channels=channels, blocks_per_stage=blocks),
                     head_width=hfe.head_width)
    walls, flops = {}, {}
    for name, spec in (("hfe", hfe), ("none", none)):
        model = build_model(spec)
        _, logs = train(model, m, LoaderConfig(), TrainConfig(epochs=2, batch_size=16))
        walls[name] = logs[1].wall_s  # epoch 2: decoded images cached for both
        flops[name] = estimate_flops(model)
    ratio = walls["none"] / walls["hfe"]
    record_property("detail", f"epoch time ratio {ratio:.2f}x, FLOP ratio {flops['none'] / flops['hfe']:.2f}x")
    assert ratio >= 2
    assert flops["none"] > flops["hfe"]


@pytest.mark.criterion(7, "training sanity")
def test_criterion_07_training(synth_texture64, tmp_path, record_property):
    losses = overfit_losses(20)
    assert losses[20] < 0.1 * losses[0]
    model = build_model(hfe_model_spec(64, 16, 4, channels=(16, 32)), seed=0)
    ckpt, logs = train(model, synth_texture64, LoaderConfig(),
                       TrainConfig(epochs=10, batch_size=16, checkpoint_dir=str(tmp_path)))
    acc = _test_accuracy(ckpt, synth_texture64)
    assert acc >= 0.9
    vals = [l.val_acc for l in logs]
    best_epoch = int(np.argmax(vals)) + 1  # first maximum: only strict improvements replace
    saved = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    assert ckpt.epoch == saved.epoch == best_epoch
    assert saved.best_val_acc == max(vals)
    assert [l.improved for l in logs] == [v > max(vals[:i], default=-1) for i, v in enumerate(vals)]
    record_property("detail", f"overfit {losses[20] / losses[0]:.3f}x, test acc {acc:.3f}, best epoch {best_epoch}")


@pytest.mark.criterion(8, "metrics oracle")
def test_criterion_08_metrics(record_property):
    rng = np.random.default_rng(8)
    for i in range(100):
        p, y, k = random_instance(rng, quantize=i % 4 == 0)
        r = compute_metrics(p, y)
        b = brute_metrics(p, list(y), k)
        np.testing.assert_array_equal(r.confusion, b["cm"])
        for got, want in ((r.accuracy, b["accuracy"]), (r.weighted_precision, b["wp"]),
                          (r.weighted_recall, b["wr"]), (r.weighted_f1, b["wf1"])):
            assert abs(got - want) < 1e-9
        assert abs(r.weighted_recall - r.accuracy) < 1e-9
        for c, curve in r.curves.roc.items():
            assert abs(curve.area - brute_auc(list(p[:, c]), list(y == c))) < 1e-9
            assert abs(r.curves.pr[c].area - brute_ap(list(p[:, c]), list(y == c))) < 1e-9
        t = threshold_report(p, y, 1e-12)
        assert t.coverage == 1 and t.accuracy == r.accuracy and t.weighted_f1 == r.weighted_f1
    record_property("detail", "100 instances within 1e-9")


@pytest.mark.criterion(9, "class activation maps")
def test_criterion_09_cams(localized_model, record_property):
    analytic = ConvTapModel(channels=1)
    image = np.random.default_rng(9).random((8, 8, 3))
    expected, _ = normalize_map(analytic.channel_map(image))
    for method in METHODS:
        np.testing.assert_allclose(explain(analytic, image, 0, 8, method).values, expected, atol=1e-12)

    model, manifest, regions = localized_model
    masses = {m: [] for m in METHODS}
    for r in manifest.subset("test"):
        x = to_float(read_image(manifest.resolve(r)))
        for method in METHODS:
            hm = explain(model, x, manifest.class_index[r.label], 32, method)
            assert hm.values.min() >= 0 and hm.values.max() <= 1
            assert hm.all_zero or hm.values.max() == 1
            masses[method].append(quadrant_mass(hm.upsampled, regions[r.path]))
    mean = {m: float(np.mean(v)) for m, v in masses.items()}
    record_property("detail", "evidence-quadrant mass " + ", ".join(f"{m} {v:.3f}" for m, v in mean.items()))
    assert mean["gradcam"] >= 0.6

    x = to_float(read_image(manifest.resolve(manifest.subset("test")[0])))
    a = score_cam(model, x, 1, 32)
    b = score_cam(model, x, 1, 32, batch_size=1, order=list(range(len(a.channel_weights)))[::-1])
    np.testing.assert_allclose(b.channel_weights, a.channel_weights, rtol=1e-5)
    np.testing.assert_allclose(b.values, a.values, atol=1e-5)
    assert grad_cam(model, x, 1, 32).values.shape == model.tap_shapes()[model.tap_equivalents[32]][:2]


@pytest.mark.criterion(10, "embedding")
def test_criterion_10_embedding(record_property):
    rng = np.random.default_rng(10)
    x = np.r_[rng.normal(0, 1, (60, 10)), rng.normal(8, 1, (60, 10))]
    y = np.r_[np.zeros(60, int), np.ones(60, int)]
    r = tsne(x, seed=0)  # perplexity 40, 300 iterations
    assert any(f.startswith("perplexity_capped") for f in r.flags) and r.perplexity == pytest.approx(119 / 3)
    sil = silhouette_score(r.embedding, y)
    assert sil > 0.5
    np.testing.assert_array_equal(r.P, r.P.T)
    assert np.abs(r.realized_perplexity - r.perplexity).max() < 1e-3
    fs = FeatureSet(rng.random((23 + 9 + 30, 4)), np.r_[np.zeros(23, int), np.ones(9, int), np.full(30, 2)])
    assert np.bincount(average_by_k(fs, 3, seed=1).labels).tolist() == [7, 3, 10]
    record_property("detail", f"silhouette {sil:.3f}, max perplexity error "
                              f"{np.abs(r.realized_perplexity - r.perplexity).max():.1e}")


@pytest.mark.criterion(11, "persistence")
def test_criterion_11_persistence(synth_texture64, tmp_path, record_property):
    model = build_model(hfe_model_spec(64, 16, 4, channels=(16, 32)), seed=3)
    train(model, synth_texture64, LoaderConfig(), TrainConfig(epochs=1, batch_size=16))
    x = images(4, 64, seed=11)
    save_checkpoint(tmp_path / "m.lret", checkpoint_from_model(model))
    restored = model_from_checkpoint(load_checkpoint(tmp_path / "m.lret"))
    np.testing.assert_array_equal(restored.forward(x).logits.data, model.forward(x).logits.data)

    buf = bytearray(encode_checkpoint(checkpoint_from_model(model)))
    rng = np.random.default_rng(11)
    for pos in rng.choice(len(buf), 20, replace=False):
        bad = bytearray(buf)
        bad[pos] ^= 0x10
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(bad))

    save_manifest(synth_texture64, tmp_path / "manifest.csv")
    again = load_manifest(tmp_path / "manifest.csv")
    assert again.records == synth_texture64.records and again.classes == synth_texture64.classes

    p, labels, k = random_instance(np.random.default_rng(12), n=40, k=3)
    names = ["a", "b", "c"]
    rep = compute_metrics(p, labels, names)
    write_roc_csv(tmp_path / "roc.csv", rep)
    write_pr_csv(tmp_path / "pr.csv", rep)
    write_confusion_csv(tmp_path / "cm.csv", rep.confusion, names)
    roc, pr = read_curve_csv(tmp_path / "roc.csv"), read_curve_csv(tmp_path / "pr.csv")
    for c, curve in rep.curves.roc.items():
        np.testing.assert_array_equal(roc[names[c]]["fpr"], curve.x)
        np.testing.assert_array_equal(roc[names[c]]["tpr"], curve.y)
        np.testing.assert_array_equal(pr[names[c]]["precision"], rep.curves.pr[c].y)
        np.testing.assert_array_equal(pr[names[c]]["recall"], rep.curves.pr[c].x)
    cm, cm_names = read_confusion_csv(tmp_path / "cm.csv")
    np.testing.assert_array_equal(cm, rep.confusion)
    assert cm_names == names
    record_property("detail", "forward bit-exact, 20/20 corruptions detected, files round-trip")
