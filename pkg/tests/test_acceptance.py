"""End-to-end acceptance checks.

Each test records one criterion; conftest prints a pass/fail line per
criterion at the end of the run. The training runs behind criteria 5 and 6
are shared module fixtures, and criterion 7 repeats them from scratch.
"""
import struct
import time

import numpy as np
import pytest

from fabcorrect.autodiff import (
    Tensor,
    add,
    concat_channels,
    conv1x1,
    conv2d,
    grad_check,
    maxpool2x2,
    mean_all,
    mul,
    relu,
    scale,
    sigmoid,
    sum_all,
    upsample2x,
    weighted_sum,
)
from fabcorrect.classical import otsu_threshold, segment_threshold
from fabcorrect.data import build_benchmark, patchify, split_and_shuffle, stitch
from fabcorrect.errors import GdsError
from fabcorrect.fab import FabParams, SemRenderParams, dilate, erode, fabricate
from fabcorrect.layout import png_decode, png_encode, rasterize, read_gds, vectorize, write_gds
from fabcorrect.losses import bce_loss, dice_loss, iou
from fabcorrect.models import UNetConfig, build_model, checkpoint_hash, load_checkpoint, save_checkpoint
from fabcorrect.train import SchedulerConfig, TrainConfig, train

from oracles import bce_loops, conv2d_loops, dice_loops, dilate_sweep, erode_sweep, iou_loops, otsu_exhaustive

pytestmark = pytest.mark.acceptance


def criterion(record_property, number, title):
    record_property("criterion", f"{number} {title}")


# -- 1: gradient check ----------------------------------------------------------------
def _primitive_checks(rng):
    def param(shape, name):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    def proj(shape):
        return rng.standard_normal(shape)

    w3, b3 = param((2, 1, 3, 3), "w"), param((2,), "b")
    w1, b1 = param((3, 1, 1, 1), "w"), param((3,), "b")
    ws, bs = param((2, 1, 1, 1), "w"), param((2,), "b")
    other = param((1, 2, 4, 4), "other")
    target = (proj((1, 1, 4, 4)) > 0).astype(float)
    gate = param((1, 1, 4, 4), "gate")

    def check(fn, out_shape, params=None):
        p = proj(out_shape)
        return lambda: (params or {}, lambda x: weighted_sum(fn(x), p))

    return {
        "conv2d": (check(lambda x: conv2d(x, w3, b3), (1, 2, 6, 6), {"w": w3, "b": b3}), (1, 1, 6, 6)),
        "conv1x1": (check(lambda x: conv1x1(x, w1, b1), (1, 3, 4, 4), {"w": w1, "b": b1}), (1, 1, 4, 4)),
        "conv1x1_stride2": (check(lambda x: conv1x1(x, ws, bs, stride=2), (1, 2, 2, 2), {"w": ws, "b": bs}), (1, 1, 4, 4)),
        "relu": (check(relu, (1, 2, 4, 4)), (1, 2, 4, 4)),
        "sigmoid": (check(sigmoid, (1, 2, 4, 4)), (1, 2, 4, 4)),
        "maxpool2x2": (check(maxpool2x2, (1, 2, 2, 2)), (1, 2, 4, 4)),
        "upsample2x": (check(upsample2x, (1, 2, 8, 8)), (1, 2, 4, 4)),
        "concat_channels": (check(lambda x: concat_channels(x, other), (1, 4, 4, 4), {"other": other}), (1, 2, 4, 4)),
        "add": (check(lambda x: add(x, other), (1, 2, 4, 4), {"other": other}), (1, 2, 4, 4)),
        "mul_broadcast": (check(lambda x: mul(x, gate), (1, 2, 4, 4), {"gate": gate}), (1, 2, 4, 4)),
        "scale": (check(lambda x: scale(x, 2.5, 0.5), (1, 2, 4, 4)), (1, 2, 4, 4)),
        "sum_all": (lambda: ({}, lambda x: sum_all(mul(x, x))), (1, 1, 3, 3)),
        "mean_all": (lambda: ({}, lambda x: mean_all(mul(x, x))), (1, 1, 3, 3)),
        "bce_loss": (lambda: ({}, lambda x: bce_loss(sigmoid(x), target)), (1, 1, 4, 4)),
        "dice_loss": (lambda: ({}, lambda x: dice_loss(sigmoid(x), target)), (1, 1, 4, 4)),
    }


def test_criterion_1_gradient_check(record_property):
    criterion(record_property, 1, "gradient check")
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst, failed = 0.0, []
    for name, (builder, shape) in _primitive_checks(rng).items():
        report = grad_check(builder, shape, seed=1)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failed.append(name)
    model = build_model(UNetConfig(depth=2, base_filters=4, use_attention_gates=True, seed=0))
    proj = rng.standard_normal((1, 1, 16, 16))
    report = grad_check(lambda: (model.params, lambda x: weighted_sum(model.forward(x), proj)), (1, 1, 16, 16),
                        seed=2, max_entries=64)
    worst = max(worst, report.max_rel_error)
    if not report.passed:
        failed.append("attention_unet")
    elapsed = time.time() - t0
    record_property("detail", f"max rel err {worst:.2e} over {len(model.params)} unet tensors, {elapsed:.0f}s")
    assert not failed, failed
    assert worst < 1e-2
    assert elapsed < 60


# -- 2: oracle equivalence ------------------------------------------------------------
def test_criterion_2_oracle_equivalence(record_property):
    criterion(record_property, 2, "oracle equivalence")
    t0 = time.time()
    rng = np.random.default_rng(2024)
    for k in range(100):
        h, w = rng.integers(1, 12, size=2)
        a, b = rng.random((h, w)) > rng.random(), rng.random((h, w)) > rng.random()
        assert iou(a, b) == pytest.approx(iou_loops(a, b), abs=1e-12), ("iou", k)

        img = rng.integers(0, 256, size=tuple(rng.integers(2, 10, size=2)))
        expected = otsu_exhaustive(img)
        got = otsu_threshold(img)
        assert got.degenerate if expected is None else got.threshold == expected, ("otsu", k)

        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        ks = int(rng.choice([1, 3]))
        x = rng.standard_normal((n, cin, *rng.integers(3, 7, size=2))).astype(np.float32)
        wt = rng.standard_normal((cout, cin, ks, ks)).astype(np.float32)
        bias = rng.standard_normal(cout).astype(np.float32)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(wt), Tensor(bias)).data, conv2d_loops(x, wt, bias),
                                   rtol=1e-5, atol=1e-5, err_msg=f"conv2d {k}")

        m = rng.random(tuple(rng.integers(1, 14, size=2))) > 0.5
        r = int(rng.integers(0, 4))
        np.testing.assert_array_equal(dilate(m, r), dilate_sweep(m, r), err_msg=f"dilate {k}")
        np.testing.assert_array_equal(erode(m, r), erode_sweep(m, r), err_msg=f"erode {k}")

        p = rng.random((1, 1, *rng.integers(1, 8, size=2)))
        y = (rng.random(p.shape) > 0.5).astype(np.float64)
        p32 = p.astype(np.float32)
        assert float(bce_loss(Tensor(p), y).data) == pytest.approx(bce_loops(p32, y), rel=1e-6, abs=1e-7)
        assert float(dice_loss(Tensor(p), y).data) == pytest.approx(dice_loops(p32, y), rel=1e-6, abs=1e-7)
    elapsed = time.time() - t0
    record_property("detail", f"100 instances each of iou, otsu, conv2d, dilate, erode, bce, dice, {elapsed:.0f}s")
    assert elapsed < 120


# -- 3: tandem freeze -----------------------------------------------------------------
def test_criterion_3_tandem_freeze(record_property):
    criterion(record_property, 3, "tandem freeze")
    t0 = time.time()
    pairs = build_benchmark(6, 64, FabParams(), seed=5)
    split = split_and_shuffle(pairs, 0.2, seed=0)
    predictor = build_model(UNetConfig(depth=3, base_filters=8, seed=1))
    corrector = build_model(UNetConfig(depth=3, base_filters=8, seed=2, use_attention_gates=True))
    p_before, c_before = checkpoint_hash(predictor), checkpoint_hash(corrector)
    params_before = {k: v.data.copy() for k, v in corrector.params.items()}
    cfg = TrainConfig(task="tandem", epochs=100, batch_size=2, learning_rate=4e-4, early_stop_patience=None,
                      max_steps=100)
    _, log = train("tandem", corrector, split, cfg, predictor=predictor)
    steps = log.epochs[-1].steps
    changed = sum(not np.array_equal(v.data, params_before[k]) for k, v in corrector.params.items())
    elapsed = time.time() - t0
    record_property("detail", f"{steps} steps, predictor hash kept, {changed} corrector tensors moved, {elapsed:.0f}s")
    assert steps == 100
    assert checkpoint_hash(predictor) == p_before
    assert checkpoint_hash(corrector) != c_before and changed > 0
    assert elapsed < 120


# -- 4: round trips -------------------------------------------------------------------
def test_criterion_4_round_trips(record_property):
    criterion(record_property, 4, "round trips")
    t0 = time.time()
    rng = np.random.default_rng(4)
    for k in range(200):
        m = rng.random(tuple(rng.integers(1, 24, size=2))) > rng.random()
        origin = (int(rng.integers(-50, 50)), int(rng.integers(-50, 50)))
        ps = vectorize(m, layer=int(rng.integers(0, 64)), dbu_nm=float(rng.choice([1.0, 2.0, 0.5])), origin=origin)
        np.testing.assert_array_equal(rasterize(ps, m.shape, origin), m)
        if ps.polygons:
            data = write_gds([ps])
            back = read_gds(data)
            assert back == [ps]
            assert write_gds(back) == data

        img = rng.integers(0, 256, tuple(rng.integers(1, 40, size=2))).astype(np.uint8)
        patch = int(rng.integers(1, 16))
        np.testing.assert_array_equal(stitch(patchify(img, patch)), img)
        np.testing.assert_array_equal(png_decode(png_encode(img)), img)
        np.testing.assert_array_equal(png_decode(png_encode(m), as_mask=True), m)
    elapsed = time.time() - t0
    record_property("detail", f"200 random masks and images, {elapsed:.0f}s")
    assert elapsed < 60


# -- 5: segmentation -------------------------------------------------------------------
SEG_MODEL = UNetConfig(depth=3, base_filters=8)
SEG_TRAIN = TrainConfig(task="segmentation", epochs=12, batch_size=8, learning_rate=3e-3, loss="bce",
                        early_stop_patience=None, scheduler=SchedulerConfig("plateau"))


def segmentation_run():
    t0 = time.time()
    pairs = build_benchmark(29, 128, FabParams(), seed=0, sem_params=SemRenderParams(noise_sigma=40))[:200]
    split = split_and_shuffle(pairs, 0.2, seed=0)
    model, log = train("segmentation", build_model(SEG_MODEL), split, SEG_TRAIN)
    unet = float(np.mean([iou(model.predict(p.sem / 255.0) >= 0.5, p.fabricated) for p in split.val]))
    thr = float(np.mean([iou(segment_threshold(p.sem), p.fabricated) for p in split.val]))
    return {"log": log, "hash": checkpoint_hash(model), "unet": unet, "threshold": thr, "time": time.time() - t0}


@pytest.fixture(scope="module")
def seg_run():
    return segmentation_run()


def test_criterion_5_segmentation(record_property, seg_run):
    criterion(record_property, 5, "segmentation")
    r = seg_run
    record_property("detail", f"unet IoU {r['unet']:.4f} vs threshold {r['threshold']:.4f}, "
                              f"{len(r['log'].epochs)} epochs, {r['time']:.0f}s")
    assert len(r["log"].epochs) <= 30
    assert r["unet"] >= 0.97
    assert r["unet"] > r["threshold"]
    assert r["time"] <= 600


# -- 6: correction ---------------------------------------------------------------------
def _cfg(task, epochs, lr):
    return TrainConfig(task=task, epochs=epochs, batch_size=4, learning_rate=lr, loss="combined",
                       early_stop_patience=None)


def correction_run(tmp_path):
    t0 = time.time()
    fab = FabParams()
    pairs = build_benchmark(43, 64, fab, seed=0)[:300]
    split = split_and_shuffle(pairs, 0.2, seed=0)
    predictor, pred_log = train("predictor", build_model(UNetConfig(depth=3, base_filters=8, seed=1)), split,
                                _cfg("predictor", 15, 1e-3))
    corrector, cor_log = train(
        "corrector", build_model(UNetConfig(depth=3, base_filters=8, seed=2, use_attention_gates=True)), split,
        _cfg("corrector", 15, 1e-3))
    # the tandem corrector starts from the supervised corrector's weights
    save_checkpoint(corrector, tmp_path / "corrector.ckpt")
    tandem, tan_log = train("tandem", load_checkpoint(tmp_path / "corrector.ckpt"), split,
                            _cfg("tandem", 8, 3e-4), predictor=predictor)

    def score(model):
        out = []
        for p in split.val:
            corrected = model.predict(p.design[None, None].astype(np.float32))[0, 0] >= 0.5
            out.append(iou(fabricate(corrected, fab), p.design))
        return float(np.mean(out))

    return {
        "logs": [pred_log, cor_log, tan_log],
        "hashes": [checkpoint_hash(m) for m in (predictor, corrector, tandem)],
        "uncorrected": float(np.mean([iou(p.fabricated, p.design) for p in split.val])),
        "corrector": score(corrector),
        "tandem": score(tandem),
        "time": time.time() - t0,
    }


@pytest.fixture(scope="module")
def cor_run(tmp_path_factory):
    return correction_run(tmp_path_factory.mktemp("cor"))


def test_criterion_6_correction(record_property, cor_run):
    criterion(record_property, 6, "correction")
    r = cor_run
    record_property("detail", f"tandem {r['tandem']:.4f}, corrector {r['corrector']:.4f}, "
                              f"uncorrected {r['uncorrected']:.4f}, {r['time']:.0f}s")
    assert r["tandem"] >= 0.90
    assert r["tandem"] > r["uncorrected"]
    assert r["tandem"] > r["corrector"]
    assert r["time"] <= 900


# -- 7: determinism --------------------------------------------------------------------
def _losses(log):
    return log.train_losses(), log.val_losses()


def test_criterion_7_determinism(record_property, seg_run, cor_run, tmp_path):
    criterion(record_property, 7, "determinism")
    seg2 = segmentation_run()
    cor2 = correction_run(tmp_path)
    record_property("detail", "segmentation and correction runs repeated with identical seeds")
    assert _losses(seg2["log"]) == _losses(seg_run["log"])
    assert seg2["hash"] == seg_run["hash"]
    assert [_losses(l) for l in cor2["logs"]] == [_losses(l) for l in cor_run["logs"]]
    assert cor2["hashes"] == cor_run["hashes"]


# -- 8: robustness ---------------------------------------------------------------------
def _rec(key, payload=b""):
    return struct.pack(">HH", 4 + len(payload), key) + payload


def _mutants(rng, n):
    """Yield (kind, bytes) mutants of random valid libraries."""
    kinds = ("truncated", "odd_length", "sref", "aref", "flipped")
    for k in range(n):
        m = rng.random((int(rng.integers(4, 16)), int(rng.integers(4, 16)))) > 0.5
        m[0, 0] = True
        data = write_gds([vectorize(m, layer=int(rng.integers(0, 10)))])
        kind = kinds[k % len(kinds)]
        if kind == "truncated":
            yield kind, data[: int(rng.integers(0, len(data) - 4))]
        elif kind == "odd_length":
            # make one record header claim an odd length
            offsets, pos = [], 0
            while pos < len(data):
                offsets.append(pos)
                pos += struct.unpack(">H", data[pos : pos + 2])[0]
            at = int(rng.choice(offsets))
            length = struct.unpack(">H", data[at : at + 2])[0]
            yield kind, data[:at] + struct.pack(">H", length | 1) + data[at + 2 :]
        elif kind in ("sref", "aref"):
            key = 0x0A00 if kind == "sref" else 0x0B00
            body = _rec(key) + _rec(0x1206, b"CELL") + _rec(0x1003, struct.pack(">2i", 0, 0)) + _rec(0x1100)
            pos = data.rfind(_rec(0x0700))
            yield kind, data[:pos] + body + data[pos:]
        else:
            buf = bytearray(data)
            for _ in range(int(rng.integers(1, 4))):
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
            yield kind, bytes(buf)


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_criterion_8_robustness(record_property):
    criterion(record_property, 8, "robustness")
    t0 = time.time()
    rng = np.random.default_rng(8)
    counts = {}
    for kind, data in _mutants(rng, 1500):
        try:
            read_gds(data)
        except GdsError as err:
            assert err.offset is not None and 0 <= err.offset <= len(data), (kind, err)
            counts[kind] = counts.get(kind, 0) + 1
            continue
        # only random byte flips may still be a valid stream
        assert kind == "flipped", kind
    elapsed = time.time() - t0
    record_property("detail", f"1500 mutants, structured errors {counts}, {elapsed:.0f}s")
    assert sum(counts.values()) >= 1000
    assert elapsed < 120
