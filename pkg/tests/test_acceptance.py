"""Acceptance criteria, each reported as one PASS/FAIL line in the terminal summary.

Training artefacts (loss CSVs, figures, held-out metrics) land in ``acceptance_out/`` at the
repository root, or wherever ``QSAMNET_ACCEPTANCE_OUT`` points.
"""

import csv
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import hamilton_sum_oracle, naive_ssim
from qsamnet.autograd import Tensor, no_grad
from qsamnet.checkpoint import CheckpointError, ChecksumError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from qsamnet.cli import PAPER_HINET_PARAMS, PAPER_QSAMNET_PARAMS
from qsamnet.gradsuite import run_suite
from qsamnet.layers import qconv2d
from qsamnet.metrics import psnr, rgb_to_y, ssim
from qsamnet.model import NetConfig, QSAMNet, count_params
from qsamnet.plotting import plot_loss_curves, plot_psnr_comparison
from qsamnet.quaternion import I, J, K, Quaternion, decode_image, encode_batch, encode_image, hamilton, hamilton_array
from qsamnet.synth import RainParams, make_dataset, procedural_scene, synthesize, write_scenes
from qsamnet.training import (
    Adam,
    PairedDataset,
    TrainConfig,
    cosine_lr,
    make_checkpoint,
    mse_loss,
    restore,
    restore_images,
    smoothed,
    train,
)

OUT = Path(os.environ.get("QSAMNET_ACCEPTANCE_OUT", Path(__file__).resolve().parents[1] / "acceptance_out"))

# Desk-scale network for the training criteria; the default widths cost ~15x more per step.
TOY_NET = NetConfig(widths=(4, 8, 16), blocks=2, seed=0)
TOY_LR = 2e-4
OVERFIT_LR = 2e-3


def test_algebra_suite(criteria):
    t0 = time.perf_counter()
    minus_one = Quaternion(-1.0)
    basis = all(hamilton(q, q) == minus_one for q in (I, J, K)) and hamilton(hamilton(I, J), K) == minus_one
    rng = np.random.default_rng(2024)
    x, y, z = rng.normal(size=(3, 1000, 4))
    nx, ny, nz = (np.linalg.norm(v, axis=1) for v in (x, y, z))
    norm_err = np.max(np.abs(np.linalg.norm(hamilton_array(x, y), axis=1) - nx * ny) / (nx * ny))
    left = hamilton_array(hamilton_array(x, y), z)
    right = hamilton_array(x, hamilton_array(y, z))
    assoc_err = np.max(np.linalg.norm(left - right, axis=1) / (nx * ny * nz))
    elapsed = time.perf_counter() - t0
    ok = basis and norm_err < 1e-12 and assoc_err < 1e-12 and elapsed < 1.0
    criteria.record(
        "algebra suite", ok,
        f"basis exact={basis}, norm rel err {norm_err:.1e}, assoc rel err {assoc_err:.1e}, {elapsed:.3f}s",
    )
    assert ok


def test_convolution_equivalence(criteria):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst32 = worst64 = 0.0
    for case in range(20):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(3, 11, size=2)
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(b, 4 * cin, h, w))
        banks = [rng.normal(size=(cout, cin, k, k)) for _ in range(4)]
        bias = rng.normal(size=(4, cout))
        ref = hamilton_sum_oracle(x, banks, bias, stride)
        scale = np.max(np.abs(ref))
        got64 = qconv2d(Tensor(x), *map(Tensor, banks), Tensor(bias), stride=stride).data
        f32 = lambda a: Tensor(a.astype(np.float32))  # noqa: E731
        got32 = qconv2d(f32(x), *map(f32, banks), f32(bias), stride=stride).data
        worst64 = max(worst64, np.max(np.abs(got64 - ref)) / scale)
        worst32 = max(worst32, np.max(np.abs(got32 - ref)) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst32 < 1e-5 and worst64 < 1e-10 and elapsed < 30
    criteria.record(
        "convolution equivalence", ok,
        f"20 cases, rel err float32 {worst32:.1e}, float64 {worst64:.1e}, {elapsed:.1f}s",
    )
    assert ok


def test_gradient_suite(criteria):
    t0 = time.perf_counter()
    results = run_suite(seed=0, probes=3)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    probes_ok = all(len(r.errors) >= 3 for r in results)
    ok = all(r.passed(1e-4) for r in results) and probes_ok and elapsed < 300
    criteria.record(
        "gradient suite", ok,
        f"{len(results)} ops x 3 probes, worst {worst.name} {worst.max_error:.1e} (< 1e-4), {elapsed:.0f}s",
    )
    assert ok


def test_parameter_claims(criteria):
    counts = count_params(QSAMNet(NetConfig()))
    exact_four = all(r == 4.0 for r in counts.per_conv_ratios)
    published_ratio = PAPER_HINET_PARAMS / PAPER_QSAMNET_PARAMS
    # the params command must print the same total on every run
    run = lambda: subprocess.run(  # noqa: E731
        [sys.executable, "-m", "qsamnet.cli", "params", "--config", "default"], capture_output=True, text=True, check=True
    ).stdout
    first, second = run(), run()
    ok = (
        exact_four
        and round(published_ratio, 2) == 3.98
        and first == second
        and f"{counts.total:,d}" in first
        and "22,278,819" in first
    )
    criteria.record(
        "parameter claims", ok,
        f"{len(counts.per_conv_ratios)} convs all ratio 4 = {exact_four}; default total {counts.total:,d} "
        f"(published 22,278,819, not asserted); 88,669,702/22,278,819 = {published_ratio:.4f}",
    )
    assert ok


def test_identity_property(criteria):
    rng = np.random.default_rng(3)
    cases = [(NetConfig(), (1, 16, 32)), (NetConfig(), (2, 48, 16)), (TOY_NET, (3, 8, 20))]
    exact = True
    for cfg, (b, h, w) in cases:
        net = QSAMNet(cfg).zero_()
        img = rng.random((b, 4, h, w)).astype(np.float32)
        with no_grad():
            x1, x2 = net(img)
        exact &= x1.data.tobytes() == img.tobytes() and x2.data.tobytes() == img.tobytes()
    criteria.record("identity property", exact, f"{len(cases)} inputs, X1 == X2 == I bit-exact: {exact}")
    assert exact


def test_overfit_single_pair(criteria):
    # a dark scene keeps clean + streaks below 1, so no pixel is clipped and the pair is invertible
    clean = 0.4 * procedural_scene(64, 64, np.random.default_rng(0))
    rainy, streaks = synthesize(clean, RainParams(seed=0))
    assert np.all(clean + streaks <= 1.0)
    x, y = encode_image(rainy)[None].astype(np.float32), encode_image(clean)[None].astype(np.float32)
    net = QSAMNet(TOY_NET)
    opt = Adam(dict(net.named_parameters()))
    iters = 500
    t0 = time.perf_counter()
    for it in range(iters):
        net.zero_grad()
        x1, x2 = net(x)
        loss = mse_loss(x1, y) + mse_loss(x2, y)
        loss.backward()
        opt.step(cosine_lr(it, iters, OVERFIT_LR))
    with no_grad():
        x1, x2 = net(x)
        final = float((mse_loss(x1, y) + mse_loss(x2, y)).data)
    elapsed = time.perf_counter() - t0
    ok = final < 1e-4 and elapsed < 600
    criteria.record("overfit sanity", ok, f"loss after {iters} iterations {final:.2e} (< 1e-4), {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def toy_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_scenes(root / "scenes_train", 200, 64, seed=1)
    write_scenes(root / "scenes_test", 20, 64, seed=2)
    make_dataset(root / "scenes_train", RainParams(seed=11), 200, root / "train")
    make_dataset(root / "scenes_test", RainParams(seed=12), 20, root / "test")
    return PairedDataset(root / "train"), PairedDataset(root / "test")


def _held_out_psnr(net, test):
    pairs = [test[i] for i in range(len(test))]
    _, x2 = restore_images(net, encode_batch([p[0] for p in pairs]))
    rainy = [psnr(rgb_to_y(r), rgb_to_y(c)) for r, c in pairs]
    restored = [psnr(rgb_to_y(decode_image(x2[i])), rgb_to_y(c)) for i, (_, c) in enumerate(pairs)]
    return float(np.mean(rainy)), float(np.mean(restored))


def test_toy_training_improvement(criteria, toy_sets):
    train_set, test_set = toy_sets
    cfg = TrainConfig(iterations=2000, batch=2, patch=64, lr_start=TOY_LR, seed=0)
    runs = {}
    for kind in ("quaternion", "real"):
        t0 = time.perf_counter()
        net_cfg = TOY_NET if kind == "quaternion" else TOY_NET.twin()
        result = train(train_set, cfg, net_cfg, out_dir=OUT / f"toy_{kind}")
        losses = np.array([r.loss_total for r in result.records])
        rainy_db, restored_db = _held_out_psnr(result.net, test_set)
        runs[kind] = dict(
            losses=losses, rainy=rainy_db, restored=restored_db, seconds=time.perf_counter() - t0,
            params=result.net.num_parameters(),
        )

    plot_loss_curves({f"{k} ({v['params']:,d} params)": v["losses"] for k, v in runs.items()}, OUT / "toy_loss.png")
    plot_psnr_comparison(
        {"rainy input": runs["quaternion"]["rainy"], "quaternion": runs["quaternion"]["restored"],
         "real twin": runs["real"]["restored"]},
        OUT / "toy_psnr.png",
    )
    with open(OUT / "toy_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network", "params", "rainy_psnr_db", "restored_psnr_db", "smoothed_loss_it50", "smoothed_loss_end", "seconds"])
        for k, v in runs.items():
            sm = smoothed(v["losses"], 50)
            w.writerow([k, v["params"], f"{v['rainy']:.3f}", f"{v['restored']:.3f}", f"{sm[49]:.6g}", f"{sm[-1]:.6g}", f"{v['seconds']:.0f}"])

    q = runs["quaternion"]
    sm = smoothed(q["losses"], 50)
    gain = q["restored"] - q["rainy"]
    ok = gain >= 2.0 and sm[-1] < sm[49] and q["seconds"] < 45 * 60
    criteria.record(
        "toy-training improvement", ok,
        f"held-out PSNR {q['rainy']:.2f} -> {q['restored']:.2f} dB (+{gain:.2f}, need +2), smoothed loss "
        f"{sm[49]:.4g} -> {sm[-1]:.4g}, {q['seconds'] / 60:.1f} min; real twin {runs['real']['restored']:.2f} dB "
        f"(comparison only)",
    )
    assert ok


def test_metrics(criteria):
    rng = np.random.default_rng(11)
    x = rng.random((40, 36)) * 0.8
    closed = abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    ident = ssim(x, x) == 1.0
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    mse = sum((a - b) ** 2 for a, b in zip(x.ravel().tolist(), y.ravel().tolist())) / x.size
    psnr_err = abs(psnr(x, y) - 10 * np.log10(1 / mse))
    ssim_err = abs(ssim(x, y) - naive_ssim(x, y))
    ok = closed and ident and psnr_err < 1e-9 and ssim_err < 1e-6
    criteria.record(
        "metrics", ok,
        f"20 dB case {closed}, SSIM(x,x)=1 {ident}, PSNR oracle err {psnr_err:.1e} dB, SSIM oracle err {ssim_err:.1e}; "
        "Test100 check skipped (dataset not supplied)",
    )
    assert ok


def test_persistence(criteria, tmp_path, toy_sets):
    train_set, _ = toy_sets
    cfg_net = NetConfig(widths=(2, 4), blocks=1, seed=5)
    cfg = TrainConfig(iterations=8, batch=2, patch=32, seed=9)

    full = train(train_set, cfg, cfg_net)
    half = train(train_set, cfg, cfg_net, stop_at=4, out_dir=tmp_path / "run")
    resumed = train(train_set, cfg, resume=load_checkpoint(tmp_path / "run" / "final.qsam"), out_dir=tmp_path / "run")
    trace_exact = [r.loss_total for r in half.records + resumed.records] == [r.loss_total for r in full.records]

    save_checkpoint(tmp_path / "net.qsam", make_checkpoint(full.net, full.optimizer, cfg, 8))
    loaded, _, _ = restore(load_checkpoint(tmp_path / "net.qsam"))
    img = np.random.default_rng(1).random((1, 4, 16, 16)).astype(np.float32)
    with no_grad():
        a, b = full.net(img), loaded(img)
    forward_exact = all(u.data.tobytes() == v.data.tobytes() for u, v in zip(a, b))

    buf = to_bytes(make_checkpoint(full.net, full.optimizer, cfg, 8))
    positions = np.random.default_rng(0).choice(np.arange(8, len(buf)), size=300, replace=False)
    detected = checksum = 0
    for pos in positions:
        bad = bytearray(buf)
        bad[pos] ^= 0x5A
        try:
            from_bytes(bytes(bad))
        except ChecksumError:
            detected += 1
            checksum += 1
        except CheckpointError:
            detected += 1
    ok = trace_exact and forward_exact and detected == len(positions)
    criteria.record(
        "persistence", ok,
        f"resumed trace exact {trace_exact}, reload forward bit-exact {forward_exact}, "
        f"corruption detected {detected}/{len(positions)} ({checksum} as CRC mismatch)",
    )
    assert ok
