from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankdist import model as M
from rankdist.dataset import OrderedPair
from rankdist.distortion import DistortionSpec
from rankdist.errors import CorruptData, EmptyBatch, EmptySplit, UnknownArch, VersionMismatch
from rankdist.imaging import Patch

from gradcheck import relative_error, smooth_case


def intensity_model(epsilon=0.1):
    """tiny-v1 wired so the score is the mean pixel intensity."""
    m = M.init_model("tiny-v1", 0, epsilon, dtype=np.float64)
    for p in m.params:
        p[...] = 0
    m.params[0][0, :, 1, 1] = 1 / 3
    m.params[2][0, 0] = 1.0
    return m


def const_patch(v):
    return Patch(np.full((32, 32, 3), float(v)), (0, 0, 32, 32))


def pair_of(a, b):
    return OrderedPair(const_patch(a), const_patch(b), DistortionSpec("lca", 1.0), DistortionSpec("lca", 2.0))


# -- init / forward ----------------------------------------------------------


def test_init_is_deterministic():
    a = M.init_model("small-v1", 7)
    b = M.init_model("small-v1", 7)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(not p.any() for p in a.params[1::2])


def test_unknown_arch():
    with pytest.raises(UnknownArch):
        M.init_model("resnet-104", 0)


def test_forward_returns_one_real(rng):
    m = M.init_model("small-v1", 3)
    s = M.forward(m, Patch(rng.random((32, 32, 3)), (0, 0, 32, 32)))
    assert isinstance(s, float) and np.isfinite(s)


def test_zero_weights_score_zero(rng):
    m = M.init_model("small-v1", 3)
    for p in m.params:
        p[...] = 0
    assert not m.score(rng.random((5, 32, 32, 3))).any()


def test_forward_repeatable(rng):
    m = M.init_model("small-v1", 11)
    x = rng.random((32, 32, 3))
    assert M.forward(m, x) == M.forward(m, x)


def _scalar_conv(x, w, b, stride):
    h, wd, cin = x.shape
    cout = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for ky in range(3):
                    for kx in range(3):
                        y, xx = i * stride + ky - 1, j * stride + kx - 1
                        if 0 <= y < h and 0 <= xx < wd:
                            for c in range(cin):
                                acc += w[o, c, ky, kx] * x[y, xx, c]
                out[i, j, o] = acc
    return out


def _scalar_forward(model, x):
    pi = 0
    for spec in model.layers:
        if spec[0] == "conv":
            x = _scalar_conv(x, model.params[pi], model.params[pi + 1], spec[3])
            pi += 2
        elif spec[0] == "relu":
            x = np.maximum(x, 0)
        elif spec[0] == "gap":
            x = x.reshape(-1, x.shape[-1]).mean(axis=0)
        else:
            x = model.params[pi] @ x + model.params[pi + 1]
            pi += 2
    return float(x[0])


def test_constant_patch_identity_conv():
    m = intensity_model()
    assert M.forward(m, const_patch(0.3)) == pytest.approx(0.3, abs=1e-12)
    assert _scalar_forward(m, np.full((32, 32, 3), 0.3)) == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("arch", ["tiny-v2", "tiny-v3"])
def test_forward_matches_scalar_oracle(arch, rng):
    m = M.init_model(arch, 5, dtype=np.float64)
    for p in m.params[1::2]:
        p[...] = rng.normal(0, 0.2, p.shape)
    x = rng.random((32, 32, 3))
    assert M.forward(m, x) == pytest.approx(_scalar_forward(m, x), rel=1e-12, abs=1e-12)


def test_concurrent_forward_is_identical(rng):
    m = M.init_model("small-v1", 2)
    x = rng.random((64, 32, 32, 3)).astype(np.float32)
    ref = m.score(x)
    with ThreadPoolExecutor(8) as ex:
        outs = list(ex.map(lambda _: m.score(x), range(16)))
    assert all(np.array_equal(o, ref) for o in outs)


# -- loss ---------------------------------------------------------------------


def test_pair_loss_examples():
    m = intensity_model()
    assert M.pair_loss(m, pair_of(0, 1), 0.5) == 0.0
    assert M.pair_loss(m, pair_of(1, 0), 0.05) == pytest.approx(1.1025, abs=1e-12)
    for c in (0.0, 0.25, 0.9):
        assert M.pair_loss(m, pair_of(c, c), 0.2) == pytest.approx(0.04, abs=1e-12)


def test_batch_loss_examples():
    m = intensity_model(epsilon=0.05)
    assert M.batch_loss(m, [pair_of(1, 0)]) == M.pair_loss(m, pair_of(1, 0))
    assert M.batch_loss(m, [pair_of(0, 1), pair_of(1, 0)]) == pytest.approx(0.55125, abs=1e-12)
    assert M.batch_loss(m, [pair_of(0, 1), pair_of(0.2, 0.5)]) == 0.0
    with pytest.raises(EmptyBatch):
        M.batch_loss(m, [])


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 2), st.floats(-10, 10))
def test_hinge_properties(sa, sb, eps, c):
    loss = float(M.hinge(sa, sb, eps) ** 2)
    assert (loss == 0.0) == (sb >= sa + eps)
    assert float(M.hinge(sa + c, sb + c, eps) ** 2) == pytest.approx(loss, abs=1e-9)


def test_dense_bias_shift_keeps_orderings(rng):
    m = M.init_model("small-v1", 4)
    x = rng.random((40, 32, 32, 3)).astype(np.float32)
    before = np.sign(np.subtract.outer(m.score(x), m.score(x)))
    m.params[-1] += 3.0
    after = np.sign(np.subtract.outer(m.score(x), m.score(x)))
    assert np.array_equal(before, after)


# -- gradients ----------------------------------------------------------------


def test_satisfied_margin_gives_zero_gradients():
    m = intensity_model(epsilon=0.1)
    loss, grads = M.backward(m, [pair_of(0.1, 0.8), pair_of(0.3, 0.5)])
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_duplicated_pair_gradient_equals_single(rng):
    m = M.init_model("tiny-v2", 1, dtype=np.float64)
    xa, xb = rng.random((1, 32, 32, 3)), rng.random((1, 32, 32, 3)) + 0.5
    m.epsilon = 5.0
    l1, g1 = M.backward(m, (xb, xa))
    l2, g2 = M.backward(m, (np.repeat(xb, 2, 0), np.repeat(xa, 2, 0)))
    assert l1 > 0 and l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    model, xa, xb, eps, fd = smooth_case(np.random.default_rng(seed))
    loss, grads = M.backward(model, (xa, xb), eps)
    assert loss == pytest.approx(M.batch_loss(model, (xa, xb), eps), rel=1e-12)
    for g, f in zip(grads, fd):
        assert relative_error(g, f).max() < 1e-4


def test_backward_loss_gradient_on_small_v1(rng):
    # spot-check a few random coordinates of the full model
    m = M.init_model("small-v1", 9, dtype=np.float64, epsilon=1.0)
    xa, xb = rng.random((4, 32, 32, 3)), rng.random((4, 32, 32, 3))
    _, grads = M.backward(m, (xa, xb))
    h = 1e-6
    for pi in (0, 2, 4, 6, 7):
        idx = tuple(rng.integers(s) for s in m.params[pi].shape)
        old = m.params[pi][idx]
        m.params[pi][idx] = old + h
        up = M.batch_loss(m, (xa, xb))
        m.params[pi][idx] = old - h
        down = M.batch_loss(m, (xa, xb))
        m.params[pi][idx] = old
        assert (up - down) / (2 * h) == pytest.approx(grads[pi][idx], rel=1e-4, abs=1e-8)


# -- training -----------------------------------------------------------------


def test_overfit_one_batch(rng):
    m = M.init_model("small-v1", 0, dtype=np.float64)
    xa = rng.random((8, 32, 32, 3))
    xb = rng.random((8, 32, 32, 3))
    v = [np.zeros_like(p) for p in m.params]
    losses = []
    for _ in range(500):
        loss, grads = M.backward(m, (xa, xb))
        losses.append(loss)
        if loss < 1e-3:
            break
        for p, g, vv in zip(m.params, grads, v):
            vv *= 0.9
            vv -= 0.01 * g
            p += vv
    assert losses[-1] < 1e-3


def _intensity_pairs(rng, n):
    lo = rng.uniform(0.05, 0.7, n)
    hi = lo + rng.uniform(0.05, 0.25, n)
    noise = lambda: rng.normal(0, 0.03, (n, 32, 32, 3))  # noqa: E731
    xa = np.clip(lo[:, None, None, None] + noise(), 0, 1).astype(np.float32)
    xb = np.clip(hi[:, None, None, None] + noise(), 0, 1).astype(np.float32)
    return xa, xb


def test_separable_toy_task():
    rng = np.random.default_rng(0)
    train = _intensity_pairs(rng, 1000)
    val = _intensity_pairs(rng, 300)
    cfg = M.TrainConfig(epochs=8, batch_size=32, eval_every=10, seed=1)
    best, history = M.train_arrays(M.init_model("small-v1", 0), train, val, cfg)
    assert history[-1]["val_tp"] >= 99.0
    assert M.evaluate_tp(best, *val) >= 99.0


def test_zero_epochs_returns_initial(rng):
    m = M.init_model("small-v1", 5)
    data = _intensity_pairs(rng, 10)
    best, history = M.train_arrays(m, data, data, M.TrainConfig(epochs=0))
    assert history == []
    assert all(np.array_equal(p, q) for p, q in zip(best.params, m.params))


def test_training_is_deterministic(rng):
    data = _intensity_pairs(rng, 100)
    cfg = M.TrainConfig(epochs=2, batch_size=16, eval_every=3, seed=4)
    runs = [M.train_arrays(M.init_model("small-v1", 2), data, data, cfg) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(p, q) for p, q in zip(runs[0][0].params, runs[1][0].params))


def test_empty_splits_raise(rng):
    data = _intensity_pairs(rng, 4)
    empty = (data[0][:0], data[1][:0])
    m = M.init_model("small-v1", 0)
    with pytest.raises(EmptySplit):
        M.train_arrays(m, empty, data, M.TrainConfig())
    with pytest.raises(EmptySplit):
        M.train_arrays(m, data, empty, M.TrainConfig())


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = M.init_model("small-v1", 8, epsilon=0.25)
    M.save_checkpoint(m, tmp_path / "m.bin")
    back = M.load_checkpoint(tmp_path / "m.bin")
    assert back.arch_id == "small-v1" and back.epsilon == 0.25
    assert all(p.tobytes() == q.tobytes() for p, q in zip(m.params, back.params))
    M.save_checkpoint(back, tmp_path / "again.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_truncated_checkpoint(tmp_path):
    M.save_checkpoint(M.init_model("small-v1", 8), tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        (tmp_path / "t.bin").write_bytes(data[:cut])
        with pytest.raises((CorruptData, VersionMismatch)):
            M.load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "t.bin").write_bytes(data + b"\0")
    with pytest.raises(CorruptData):
        M.load_checkpoint(tmp_path / "t.bin")


def test_bad_magic(tmp_path):
    M.save_checkpoint(M.init_model("tiny-v1", 0), tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatch):
        M.load_checkpoint(tmp_path / "m.bin")
