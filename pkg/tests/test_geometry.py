import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from mdet3d import tensor as T
from mdet3d.geometry import (
    Box3D,
    BoxBatch,
    BoxEncoding,
    decode_box,
    decode_boxes,
    diou_distance,
    diou_distance_t,
    encode_box,
    iou,
    iou_t,
    nms,
    normalize_yaw,
)

from oracles import aligned_iou, greedy_nms, monte_carlo_iou

coord = st.floats(-3, 3, allow_nan=False)
extent = st.floats(0.2, 2.0, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def boxes(draw, yawed=True):
    return Box3D(
        (draw(coord), draw(coord), draw(coord)),
        (draw(extent), draw(extent), draw(extent)),
        draw(angle) if yawed else 0.0,
    )


UNIT = Box3D((0, 0, 0), (1, 1, 1))


def test_iou_identity():
    assert iou(UNIT, UNIT) == 1.0


def test_iou_half_shift():
    assert iou(UNIT, Box3D((0.5, 0, 0), (1, 1, 1))) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_square_footprint_quarter_turn():
    b = Box3D((0.3, 0.1, 0), (2, 2, 1), 0.0)
    assert iou(b, Box3D(b.center, b.size, math.pi / 2)) == pytest.approx(1.0, abs=1e-12)


def test_diou_identical_is_zero():
    assert diou_distance(UNIT, UNIT) == 0.0


def test_diou_separated_cubes():
    # IoU 0, rho^2 = 9, enclosing box 4x1x1 so c^2 = 18
    assert diou_distance(UNIT, Box3D((3, 0, 0), (1, 1, 1))) == pytest.approx(1.5, abs=1e-15)


def test_diou_concentric():
    assert diou_distance(UNIT, Box3D((0, 0, 0), (0.5, 0.5, 0.5))) == pytest.approx(0.875, abs=1e-15)


def test_box_invariants():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1))
    assert Box3D((0, 0, 0), (1, 1, 1), 3 * math.pi).yaw == pytest.approx(math.pi)
    assert normalize_yaw(-math.pi) == pytest.approx(math.pi)


def test_decode_symmetric_distances():
    b = decode_box(BoxEncoding((1, 1, 1, 1, 2, 2), (0, 1)), (1, 2, 3))
    assert b.center == (1, 2, 3) and b.size == (2, 2, 4) and b.yaw == 0.0


def test_decode_rotation_channel():
    b = decode_box((1, 1, 1, 1, 1, 1, 1, 0), (0, 0, 0))
    assert b.yaw == pytest.approx(math.pi / 2)


def test_encode_outside_reference_rejected():
    with pytest.raises(ValueError, match="not strictly inside"):
        encode_box(UNIT, (2.0, 0, 0))


def test_encode_decode_roundtrip_at_center(rng):
    for _ in range(200):
        b = Box3D(rng.uniform(-5, 5, 3), rng.uniform(0.1, 3, 3), rng.uniform(-math.pi, math.pi))
        back = decode_box(encode_box(b, b.center), b.center)
        assert np.max(np.abs(back.as_array() - b.as_array())) < 1e-9


@given(boxes(), st.floats(0.05, 0.45), st.floats(0.05, 0.45), st.floats(0.05, 0.45))
def test_encode_decode_roundtrip_any_inner_ref(b, fx, fy, fz):
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    lx, ly, lz = (f * 2 - 0.5 + 0.5 * (1 - 2 * f) for f in (fx, fy, fz))  # inside (-0.5, 0.5)
    lx, ly, lz = lx * b.size[0] * 0.9, ly * b.size[1] * 0.9, lz * b.size[2] * 0.9
    ref = (b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly, b.center[2] + lz)
    back = decode_box(encode_box(b, ref), ref)
    assert np.max(np.abs(back.as_array() - b.as_array())) < 1e-9


def test_nms_identical_same_class():
    assert nms([(UNIT, 0.9, 0), (UNIT, 0.8, 0)], 0.5) == [0]
    assert nms([(UNIT, 0.8, 0), (UNIT, 0.9, 0)], 0.5) == [1]


def test_nms_identical_different_class():
    assert sorted(nms([(UNIT, 0.9, 0), (UNIT, 0.8, 1)], 0.5)) == [0, 1]
    assert nms([(UNIT, 0.9, 0), (UNIT, 0.8, 1)], 0.5, class_agnostic=True) == [0]


def test_nms_matches_greedy_oracle(rng):
    for _ in range(100):
        dets = [
            (Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.5, 1.5, 3), rng.uniform(-3, 3)), float(rng.uniform()), 0)
            for _ in range(5)
        ]
        assert nms(dets, 0.25) == greedy_nms(dets, 0.25)


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([(UNIT, 1.0, 0)], 1.5)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0


@given(boxes(), boxes(), coord, coord, coord, angle)
def test_iou_rigid_invariance(a, b, tx, ty, tz, theta):
    c, s = math.cos(theta), math.sin(theta)

    def move(box):
        x, y, z = box.center
        return Box3D((c * x - s * y + tx, s * x + c * y + ty, z + tz), box.size, box.yaw + theta)

    assert abs(iou(move(a), move(b)) - iou(a, b)) < 1e-9


@given(boxes(yawed=False), boxes(yawed=False))
def test_aligned_iou_exact(a, b):
    assert iou(a, b) == aligned_iou(a, b)


@given(boxes(), boxes())
def test_diou_symmetric(a, b):
    assert diou_distance(a, b) == diou_distance(b, a)
    assert diou_distance(a, a) == 0.0
    assert 0.0 <= diou_distance(a, b) < 2.0


@given(boxes(), extent, extent, extent, angle)
def test_diou_concentric_equals_one_minus_iou(a, w, l, h, yaw):
    b = Box3D(a.center, (w, l, h), yaw)
    assert diou_distance(a, b) == 1.0 - iou(a, b)


@given(st.lists(st.tuples(boxes(), st.floats(0, 1), st.integers(0, 2)), max_size=8), st.floats(0, 1))
def test_nms_idempotent(dets, thr):
    kept = nms(dets, thr)
    sub = [dets[k] for k in kept]
    assert [kept[k] for k in nms(sub, thr)] == kept


@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8), coord, coord, coord)
def test_decode_output_valid(raw, x, y, z):
    raw = np.array(raw)
    assume(np.hypot(raw[6], raw[7]) > 1e-6)
    b = decode_box(np.r_[np.exp(raw[:6]), raw[6:]], (x, y, z))
    assert min(b.size) > 0 and -math.pi < b.yaw <= math.pi


def test_rotated_iou_matches_monte_carlo(rng):
    worst = 0.0
    for seed in range(10):
        a = Box3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.6, 1.4, 3), rng.uniform(-math.pi, math.pi))
        b = Box3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.6, 1.4, 3), rng.uniform(-math.pi, math.pi))
        worst = max(worst, abs(iou(a, b) - monte_carlo_iou(a, b, 18, seed)))
    assert worst < 4e-3


def _batch(bs):
    return BoxBatch.from_boxes(bs)


def test_differentiable_iou_agrees_with_exact(rng):
    a_list, b_list = [], []
    for _ in range(300):
        a_list.append(Box3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.3, 1.5, 3), rng.uniform(-math.pi, math.pi)))
        b_list.append(Box3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.3, 1.5, 3), rng.uniform(-math.pi, math.pi)))
    # include identical, touching, nested and axis-aligned cases
    a_list += [UNIT, UNIT, UNIT, UNIT]
    b_list += [UNIT, Box3D((1, 0, 0), (1, 1, 1)), Box3D((0, 0, 0), (0.5, 0.5, 0.5)), Box3D((0.5, 0.2, 0), (1, 1, 1))]
    got = iou_t(_batch(a_list), _batch(b_list)).data
    want = np.array([iou(a, b) for a, b in zip(a_list, b_list)])
    np.testing.assert_allclose(got, want, atol=1e-10)
    got_d = diou_distance_t(_batch(a_list), _batch(b_list)).data
    want_d = np.array([diou_distance(a, b) for a, b in zip(a_list, b_list)])
    np.testing.assert_allclose(got_d, want_d, atol=1e-10)


def test_decode_boxes_matches_scalar_decode(rng):
    raw = rng.normal(size=(6, 8))
    refs = rng.normal(size=(6, 3))
    bb = decode_boxes(T.Tensor(raw), refs).to_boxes()
    for i in range(6):
        want = decode_box(np.r_[np.exp(raw[i, :6]), raw[i, 6:]], refs[i])
        np.testing.assert_allclose(bb[i].as_array(), want.as_array(), atol=1e-12)


def test_diou_distance_gradient(rng):
    gt = _batch([Box3D((0.1, 0.0, 0.2), (1.0, 0.8, 1.2), 0.4)])
    refs = np.array([[0.0, 0.1, 0.0]])
    for _ in range(20):
        raw0 = np.r_[rng.uniform(-0.8, 0.0, 6), rng.normal(size=2)]
        rep = T.grad_check(lambda r: T.sum(diou_distance_t(decode_boxes(T.reshape(r, (1, 8)), refs), gt)),
                           raw0, tol=1e-4)
        assert rep.passed, rep.max_rel_error
