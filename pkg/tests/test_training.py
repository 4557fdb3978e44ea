import math

import numpy as np
import pytest
from PIL import Image

from qsamnet.autograd import Parameter, Tensor
from qsamnet.checkpoint import (
    BadMagicError,
    Checkpoint,
    ChecksumError,
    TruncatedError,
    VersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from qsamnet.model import NetConfig, QSAMNet
from qsamnet.synth import RainParams, make_dataset, write_scenes
from qsamnet.training import (
    Adam,
    NonFiniteError,
    PairedDataset,
    TrainConfig,
    adam_step,
    cosine_lr,
    make_checkpoint,
    make_batch,
    mse_loss,
    restore,
    sample_patch,
    smoothed,
    train,
)

TINY = NetConfig(widths=(2, 4), blocks=1, seed=0)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_scenes(root / "scenes", 6, size=32, seed=1)
    make_dataset(root / "scenes", RainParams(seed=2), 6, root / "pairs")
    return root / "pairs"


def test_mse_loss_value():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert float(mse_loss(a, np.array([[1.0, 0.0], [3.0, 0.0]])).data) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        mse_loss(a, np.zeros(3))


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written out in plain Python floats."""
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    theta = list(theta)
    for t in range(1, len(grads) + 1):
        g = grads[t - 1](theta)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh, vh = m[i] / (1 - b1**t), v[i] / (1 - b2**t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta


def test_adam_matches_reference_ten_steps():
    target = np.array([0.3, -1.2, 2.0])
    p = Parameter(np.array([1.0, 1.0, -1.0]))
    opt = Adam({"p": p})
    for _ in range(10):
        p.grad = None
        ((p - target) * (p - target)).sum().backward()
        adam_step({"p": p}, opt, 1e-2)
    grad_fn = lambda th: [2 * (th[i] - target[i]) for i in range(3)]  # noqa: E731
    expected = reference_adam([1.0, 1.0, -1.0], [grad_fn] * 10, 1e-2)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-10)
    assert opt.t == 10


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([0.0, 0.0]))
    p.grad = np.array([3.0, -1e-3])
    Adam({"p": p}).step(0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-4)


def test_adam_rejects_non_finite_gradient():
    p = Parameter(np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError):
        Adam({"p": p}).step(1e-3)
    assert not p.data.any()


def test_cosine_schedule():
    assert cosine_lr(0, 100) == 2e-4
    assert cosine_lr(100, 100) == 1e-7
    assert cosine_lr(500, 100) == 1e-7
    assert cosine_lr(50, 100) == pytest.approx((2e-4 + 1e-7) / 2)
    lrs = [cosine_lr(t, 100) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(-1, 100)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch=40)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-7, lr_end=1e-6)


def test_smoothed_trailing_mean():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


def test_sample_patch_aligned_crop_and_flip_rate():
    rng = np.random.default_rng(0)
    h, w = 20, 24
    rainy = rng.random((h, w, 3))
    clean = rainy * 0.5
    flips = 0
    n = 10_000
    for _ in range(n):
        r, c = sample_patch(rainy, clean, 16, rng)
        assert r.shape == (16, 16, 3)
        np.testing.assert_array_equal(c, r * 0.5)
        # a crop is flipped iff its first row is found reversed in the source
        row = r[0, :, 0]
        flips += not any(np.array_equal(rainy[i, j:j + 16, 0], row) for i in range(h - 15) for j in range(w - 15))
    assert 0.48 <= flips / n <= 0.52


def test_sample_patch_pads_small_images():
    img = np.random.default_rng(1).random((10, 12, 3))
    r, c = sample_patch(img, img, 16, np.random.default_rng(2))
    assert r.shape == c.shape == (16, 16, 3)


def test_dataset_pairs_by_name(dataset_dir, tmp_path):
    ds = PairedDataset(dataset_dir)
    assert len(ds) == 6
    rainy, clean = ds[0]
    assert rainy.shape == clean.shape == (32, 32, 3)
    assert np.all(rainy >= clean - 1 / 255)

    (tmp_path / "rainy").mkdir()
    (tmp_path / "clean").mkdir()
    Image.new("RGB", (8, 8)).save(tmp_path / "rainy" / "a.png")
    with pytest.raises(FileNotFoundError):
        PairedDataset(tmp_path)
    Image.new("RGB", (8, 6)).save(tmp_path / "clean" / "a.png")
    with pytest.raises(ValueError):
        PairedDataset(tmp_path)[0]
    with pytest.raises(FileNotFoundError):
        PairedDataset(tmp_path / "nowhere")


def test_batches_depend_only_on_seed_and_iteration(dataset_dir):
    ds = PairedDataset(dataset_dir)
    a = make_batch(ds, 2, 16, seed=3, iteration=7)
    make_batch(ds, 2, 16, seed=3, iteration=8)
    b = make_batch(ds, 2, 16, seed=3, iteration=7)
    assert a[0].dtype == np.float32 and a[0].shape == (2, 4, 16, 16)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_training_is_deterministic(dataset_dir):
    ds = PairedDataset(dataset_dir)
    cfg = TrainConfig(iterations=3, batch=2, patch=16, seed=1)
    r1 = train(ds, cfg, TINY)
    r2 = train(ds, cfg, TINY)
    assert [r.loss_total for r in r1.records] == [r.loss_total for r in r2.records]


def test_train_writes_csv_and_checkpoints(dataset_dir, tmp_path):
    ds = PairedDataset(dataset_dir)
    cfg = TrainConfig(iterations=4, batch=1, patch=16, checkpoint_every=2)
    train(ds, cfg, TINY, out_dir=tmp_path)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,lr,loss_stage1,loss_stage2,loss_total"
    assert len(lines) == 5
    assert (tmp_path / "ckpt_0000002.qsam").exists() and (tmp_path / "final.qsam").exists()
    assert load_checkpoint(tmp_path / "final.qsam").iteration == 4


def test_resume_reproduces_uninterrupted_run(dataset_dir):
    ds = PairedDataset(dataset_dir)
    cfg = TrainConfig(iterations=6, batch=2, patch=16, seed=4)
    full = train(ds, cfg, TINY)
    first = train(ds, cfg, TINY, stop_at=3)
    ckpt = from_bytes(to_bytes(first.checkpoint))
    rest = train(ds, cfg, resume=ckpt)
    trace = [r.loss_total for r in first.records + rest.records]
    assert trace == [r.loss_total for r in full.records]
    for (n, p), (_, q) in zip(full.net.named_parameters(), rest.net.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_checkpoint_round_trip(tmp_path):
    net = QSAMNet(TINY)
    opt = Adam(dict(net.named_parameters()))
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape).astype(np.float32)
    ckpt = make_checkpoint(net, opt, TrainConfig(patch=16), 11)
    path = tmp_path / "c.qsam"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.iteration == 11 and back.config == ckpt.config and back.rng_state == ckpt.rng_state
    net2, _, _ = restore(back)
    for (n, p), (_, q) in zip(net.named_parameters(), net2.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def _sample_bytes():
    ckpt = Checkpoint({"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"m/w": np.ones(2, np.float32)}, 5, b"rng")
    return to_bytes(ckpt)


def test_checkpoint_corruption_is_detected():
    buf = bytearray(_sample_bytes())
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        from_bytes(bytes(buf))


def test_checkpoint_bad_magic_and_version():
    buf = _sample_bytes()
    with pytest.raises(BadMagicError):
        from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(VersionError):
        from_bytes(buf[:4] + (99).to_bytes(4, "little") + buf[8:])


@pytest.mark.parametrize("cut", [3, 10, 30, -5, -1])
def test_checkpoint_truncation(cut):
    buf = _sample_bytes()
    with pytest.raises((TruncatedError, BadMagicError)):
        from_bytes(buf[:cut])
    if cut > 8:
        with pytest.raises(TruncatedError):
            from_bytes(buf[:cut])
