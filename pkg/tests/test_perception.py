import math

import numpy as np
import pytest

from evrlab.harness.metrics import iou_mask
from evrlab.perception import (
    BOX_STD,
    MASK_SIZE,
    N_CLASSES,
    DegenerateBox,
    HeadOutput,
    PerceptionModel,
    Targets,
    decode,
    decode_deltas,
    encode_deltas,
    make_targets,
    mask_target,
    paste_mask,
    perception_loss,
)
from evrlab.render import Camera
from evrlab.tensor import core as T

from gradcheck import coordinate_check

SMALL = Camera(width=40, height=32, border_pad=4)


def _tiny(seed: int, camera: Camera = SMALL) -> PerceptionModel:
    return PerceptionModel(np.random.default_rng(seed), camera, channels=(2, 3, 3, 3), fc=6)


def _images(rng, n, s, camera=SMALL):
    return rng.random((n, s, 3, camera.height, camera.width))


# -- f_base ----------------------------------------------------------------------
def test_features_deterministic_and_shaped():
    rng = np.random.default_rng(0)
    m = PerceptionModel(rng).eval()
    x = _images(rng, 2, 1, Camera())[:, 0]
    x[1] = x[0]
    f = m.extract(x).data
    assert f.shape == (2,) + m.feature_shape == (2, 32, 8, 10)
    np.testing.assert_array_equal(f[0], f[1])


def test_features_respond_to_content():
    rng = np.random.default_rng(1)
    m = PerceptionModel(rng).eval()
    blank = np.full((1, 3, 64, 80), 0.5)
    obj = blank.copy()
    obj[:, :, 20:40, 30:50] = [[[0.9]], [[0.1]], [[0.1]]]
    assert not np.allclose(m.extract(blank).data, m.extract(obj).data)


def test_wrong_image_size_rejected():
    m = PerceptionModel(np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        m.extract(np.zeros((1, 3, 32, 80)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("training", [True, False])
def test_base_gradient(seed, training):
    rng = np.random.default_rng(seed)
    m = _tiny(seed).train(training)
    x = T.Tensor(_images(rng, 2, 1)[:, 0], requires_grad=True)
    assert coordinate_check(lambda: T.mean(m.extract(x)), [x] + m.parameters(), seed=seed) < 1e-3


# -- f_fuse ------------------------------------------------------------------------
def _conv_same(x, w, b):
    """Plain loop 3x3 'same' convolution of one (C, H, W) map."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + sum(
                    w[o, c, u, v] * xp[c, i + u, j + v] for c in range(c_in) for u in range(k) for v in range(k))
    return out


def _gru_oracle(cell, x, h):
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    k = cell.c_hidden
    gx = _conv_same(x, cell.x2h.weight.data, cell.x2h.bias.data)
    gh = _conv_same(h, cell.h2h.weight.data, cell.h2h.bias.data)
    out = np.zeros_like(h)
    for c in range(k):
        for i in range(h.shape[1]):
            for j in range(h.shape[2]):
                r = sig(gx[c, i, j] + gh[c, i, j])
                z = sig(gx[k + c, i, j] + gh[k + c, i, j])
                n = math.tanh(gx[2 * k + c, i, j] + r * gh[2 * k + c, i, j])
                out[c, i, j] = (1 - z) * n + z * h[c, i, j]
    return out


def test_fuse_matches_scalar_oracle_over_two_steps():
    rng = np.random.default_rng(3)
    m = _tiny(3)
    for p in m.gru.parameters():
        p.data = rng.normal(scale=0.5, size=p.shape)
    x0, x1 = rng.normal(size=(2, 1, 3, 4, 5))
    h0 = m.fuse(None, T.Tensor(x0))
    h1 = m.fuse(h0, T.Tensor(x1))
    o0 = _gru_oracle(m.gru, x0[0], np.zeros((3, 4, 5)))
    o1 = _gru_oracle(m.gru, x1[0], o0)
    np.testing.assert_allclose(h0.data[0], o0, atol=1e-12)
    np.testing.assert_allclose(h1.data[0], o1, atol=1e-12)


def test_fuse_first_step_depends_only_on_first_frame():
    rng = np.random.default_rng(4)
    m = _tiny(4).eval()
    imgs = _images(rng, 1, 3)
    other = imgs.copy()
    other[:, 1:] = rng.random(other[:, 1:].shape)
    b0 = np.array([[5.0, 5.0, 20.0, 20.0]])
    a = m.run(imgs, b0, steps=[0])[0]
    b = m.run(other, b0, steps=[0])[0]
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    np.testing.assert_array_equal(a.mask.data, b.mask.data)


def test_saturated_update_gate_keeps_state():
    rng = np.random.default_rng(5)
    m = _tiny(5)
    k = m.gru.c_hidden
    m.gru.x2h.bias.data[k:2 * k] = 1e3
    h = T.Tensor(rng.normal(size=(1, 3, 4, 5)))
    out = m.fuse(h, T.Tensor(rng.normal(size=(1, 3, 4, 5))))
    np.testing.assert_allclose(out.data, h.data, atol=1e-12)


def test_fuse_shape_mismatch():
    m = _tiny(0)
    with pytest.raises(T.ShapeError):
        m.fuse(T.Tensor(np.zeros((1, 3, 4, 5))), T.Tensor(np.zeros((1, 3, 4, 4))))


# -- boxes and masks ------------------------------------------------------------------
def test_zero_deltas_decode_to_reference():
    ref = np.array([3.0, 4.0, 17.0, 30.0])
    np.testing.assert_allclose(decode_deltas(np.zeros(4), ref), ref)


def test_log2_deltas_double_size_about_centre():
    ref = np.array([10.0, 20.0, 14.0, 26.0])
    out = decode_deltas(np.array([0, 0, math.log(2), math.log(2)]), ref)
    np.testing.assert_allclose(out, [8.0, 17.0, 16.0, 29.0])


def test_encode_decode_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(200):
        ref = np.sort(rng.uniform(0, 90, size=(2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]] + [0, 0, 1, 1]
        box = np.sort(rng.uniform(0, 90, size=(2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]] + [0, 0, 1, 1]
        np.testing.assert_allclose(decode_deltas(encode_deltas(box, ref), ref), box, atol=1e-9)


def test_degenerate_b0_rejected():
    m = _tiny(0)
    with pytest.raises(DegenerateBox):
        m.head(T.Tensor(np.zeros((1, 3, 4, 5))), np.array([[4.0, 4.0, 4.0, 9.0]]))


def test_half_mask_pastes_as_empty():
    truth = np.zeros((48, 56), bool)
    truth[10:30, 10:40] = True
    pasted = paste_mask(np.full((MASK_SIZE, MASK_SIZE), 0.5), np.array([8.0, 8.0, 42.0, 33.0]), truth.shape)
    assert not pasted.any()
    assert iou_mask(pasted, truth) == 0.0


def test_mask_target_round_trip_for_rectangle():
    canvas = np.zeros((48, 56), bool)
    canvas[7:35, 14:42] = True
    box = np.array([14.0, 7.0, 42.0, 35.0])
    grid = mask_target(canvas, box)
    assert grid.all()
    np.testing.assert_array_equal(paste_mask(grid, box, canvas.shape), canvas)


# -- loss ---------------------------------------------------------------------------
def _targets(rng, n):
    cls = rng.integers(0, N_CLASSES, size=n)
    deltas = rng.normal(size=(n, 4))
    mask = (rng.random((n, MASK_SIZE, MASK_SIZE)) > 0.5).astype(float)
    return Targets(cls, deltas, mask)


def _random_output(rng, n):
    return HeadOutput(T.Tensor(rng.normal(size=(n, N_CLASSES))), T.Tensor(rng.normal(size=(n, 4)) * 2),
                      T.Tensor(rng.uniform(0.01, 0.99, size=(n, MASK_SIZE, MASK_SIZE))))


def test_perfect_prediction_loss_below_floor():
    rng = np.random.default_rng(7)
    tg = _targets(rng, 3)
    logits = np.full((3, N_CLASSES), -50.0)
    logits[np.arange(3), tg.cls] = 50.0
    perfect = HeadOutput(T.Tensor(logits), T.Tensor(tg.deltas.copy()), T.Tensor(tg.mask.copy()))
    assert perception_loss([perfect] * 4, tg).item() < 1e-6


def test_single_step_is_unaveraged_sum():
    rng = np.random.default_rng(8)
    tg = _targets(rng, 2)
    out = _random_output(rng, 2)
    one = perception_loss([out], tg).item()
    both = perception_loss([out, out], tg).item()
    assert one == pytest.approx(both, rel=1e-14)


def _scalar_loss(outputs, tg):
    total = 0.0
    for out in outputs:
        logits, deltas, mask = out.logits.data, out.deltas.data, out.mask.data
        n = len(tg.cls)
        ce = 0.0
        for i in range(n):
            zmax = max(logits[i])
            lse = zmax + math.log(sum(math.exp(v - zmax) for v in logits[i]))
            ce += lse - logits[i, tg.cls[i]]
        sl = 0.0
        for d in (deltas - tg.deltas).ravel():
            sl += 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5
        bce = 0.0
        for p, y in zip(mask.ravel(), tg.mask.ravel()):
            bce -= y * math.log(p) + (1 - y) * math.log(1 - p)
        total += ce / n + sl / deltas.size + bce / mask.size
    return total / len(outputs)


@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    tg = _targets(rng, 3)
    outs = [_random_output(rng, 3) for _ in range(4)]
    assert perception_loss(outs, tg).item() == pytest.approx(_scalar_loss(outs, tg), rel=1e-10)


def test_empty_step_list_rejected():
    with pytest.raises(ValueError):
        perception_loss([], _targets(np.random.default_rng(0), 1))


def test_targets_constant_across_steps():
    """The same first-frame target is used at every step: the loss over k
    copies of one output equals the loss of that output alone, and the target
    tensors are built once per episode."""
    rng = np.random.default_rng(9)
    canvas = np.zeros((48, 56), bool)
    canvas[10:30, 12:40] = True
    boxes = np.array([[12.0, 10.0, 40.0, 30.0]])
    tg = make_targets(np.array([2]), boxes, [canvas], np.array([[15.0, 12.0, 30.0, 25.0]]))
    m = _tiny(9, Camera(width=40, height=32, border_pad=8))
    outs = m.run(_images(rng, 1, 4), np.array([[7.0, 4.0, 22.0, 17.0]]))
    per_step = [perception_loss([o], tg).item() for o in outs]
    assert perception_loss(outs, tg).item() == pytest.approx(np.mean(per_step), rel=1e-12)
    np.testing.assert_allclose(tg.deltas * BOX_STD, encode_deltas(boxes, np.array([[15.0, 12.0, 30.0, 25.0]])))


# -- whole network ---------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_full_network_gradient(seed):
    rng = np.random.default_rng(seed)
    m = _tiny(seed)
    imgs = _images(rng, 2, 3)
    b0 = np.array([[4.0, 3.0, 20.0, 18.0], [10.0, 9.0, 33.0, 30.0]])
    tg = _targets(rng, 2)

    def loss():
        return perception_loss(m.run(imgs, b0), tg)
    assert coordinate_check(loss, m.parameters(), seed=seed) < 1e-3


def test_decode_applies_box_scaling():
    out = HeadOutput(T.Tensor(np.zeros((1, N_CLASSES))), T.Tensor(np.array([[1.0, 0.0, 0.0, 0.0]])),
                     T.Tensor(np.full((1, MASK_SIZE, MASK_SIZE), 0.7)))
    pred = decode(out, np.array([[10.0, 10.0, 30.0, 20.0]]))[0]
    np.testing.assert_allclose(pred.box, [12.0, 10.0, 32.0, 20.0])
    np.testing.assert_allclose(pred.class_probs, 1 / N_CLASSES)
