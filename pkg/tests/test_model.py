import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhmtl import autodiff as ad
from mhmtl.autodiff import ShapeError, Tensor
from mhmtl.losses import composite
from mhmtl.model import (
    ModelConfig,
    MultiTaskNet,
    RoutingError,
    decode_cell,
    decode_detection,
    encode_detection_target,
)
from mhmtl.tasks import ConfigError, Kind, TaskSpec


def net(tasks, size=64, **kw):
    return MultiTaskNet(ModelConfig(input_size=(size, size), tasks=tasks, **kw))


def images(n=2, size=64, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 1, size, size)).astype(np.float32)


# -- encoder / FPN shapes --------------------------------------------------


@pytest.mark.parametrize("downsample", ["pool", "stride"])
def test_stage_strides_256(downsample):
    m = net([], size=256, downsample=downsample)
    pyr = m.encode(images(1, 256))
    for s, c in enumerate(pyr.levels(), start=1):
        assert c.shape == (1, m.config.encoder_widths[s - 1], 256 >> s, 256 >> s)
    assert pyr.C5.shape[2:] == (8, 8)


def test_desk_input_c5_is_2x2():
    assert net([]).encode(images()).C5.shape[2:] == (2, 2)


def test_zero_input_finite():
    m = net([])
    pyr = m.encode(np.zeros((1, 1, 64, 64), np.float32))
    p = m.fpn(pyr)
    assert all(np.all(np.isfinite(c.data)) for c in pyr.levels())
    assert np.all(np.isfinite(p.data))


def test_p_out_shape():
    m = net([])
    assert m.fpn(m.encode(images(3))).shape == (3, 32, 16, 16)


def test_p_out_constant_from_smooth_bias():
    m = net([])
    for level in range(2, 6):
        m.params[f"fpn.lateral{level}.weight"].data[:] = 0
    b = np.linspace(-1, 1, 32).astype(np.float32)
    m.params["fpn.smooth.bias"].data[:] = b
    p = m.fpn(m.encode(images())).data
    np.testing.assert_allclose(p, np.broadcast_to(b[None, :, None, None], p.shape))


def test_fpn_lateral_gradient_matches_finite_difference():
    m = net([]).astype(np.float64)
    x = images(1).astype(np.float64)
    w = m.params["fpn.lateral5.weight"]
    ad.backward(ad.mean(m.fpn(m.encode(x))))
    analytic = w.grad.copy()
    numeric = np.zeros_like(analytic)
    h = 1e-5
    for idx in itertools.islice(np.ndindex(w.shape), 40):
        orig = w.data[idx]
        w.data[idx] = orig + h
        up = ad.mean(m.fpn(m.encode(x))).item()
        w.data[idx] = orig - h
        down = ad.mean(m.fpn(m.encode(x))).item()
        w.data[idx] = orig
        numeric[idx] = (up - down) / (2 * h)
    mask = np.zeros(w.shape, bool)
    for idx in itertools.islice(np.ndindex(w.shape), 40):
        mask[idx] = True
    a, n = analytic[mask], numeric[mask]
    assert np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)) < 1e-3


@settings(max_examples=8, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3))
def test_stride_contract(h, w):
    m = MultiTaskNet(ModelConfig(input_size=(32 * h, 32 * w), encoder_widths=(2, 2, 2, 2, 2), fpn_channels=4))
    x = np.zeros((1, 1, 32 * h, 32 * w), np.float32)
    pyr = m.encode(x)
    for s, c in enumerate(pyr.levels(), start=1):
        assert c.shape[2:] == (32 * h >> s, 32 * w >> s)
    assert m.fpn(pyr).shape[2:] == (8 * h, 8 * w)


# -- heads -----------------------------------------------------------------


def test_classification_head():
    m = net([TaskSpec("c", "Classification", num_classes=3)])
    out = m(images(4), "c")
    assert out.shape == (4, 3)
    np.testing.assert_allclose(ad.softmax(out, axis=1).data.sum(axis=1), 1.0, atol=1e-6)


def test_regression_head_bounded():
    m = net([TaskSpec("r", "Regression", num_keypoints=2)])
    out = m(images(3), "r").data
    assert out.shape == (3, 4)
    assert np.all((out > 0) & (out < 1))


def test_zero_weight_head_is_constant():
    m = net([TaskSpec("c", "Classification", num_classes=3)])
    m.params["heads.c.fc.weight"].data[:] = 0
    m.params["heads.c.fc.bias"].data[:] = [0.5, -1.0, 2.0]
    out = m(images(5), "c").data
    np.testing.assert_array_equal(out, np.tile([0.5, -1.0, 2.0], (5, 1)).astype(np.float32))


def test_segmentation_head_full_resolution():
    m = net([TaskSpec("s", "Segmentation", num_classes=2)])
    out = m(images(2), "s")
    assert out.shape == (2, 2, 64, 64)
    np.testing.assert_allclose(ad.softmax(out, axis=1).data.sum(axis=1), 1.0, atol=1e-6)


def test_segmentation_bilinear_option():
    m = net([TaskSpec("s", "Segmentation", num_classes=3)], seg_upsample="bilinear")
    assert m(images(1), "s").shape == (1, 3, 64, 64)


def test_detection_grid_matches_p_out():
    m = net([TaskSpec("d", "Detection")])
    out = m(images(2), "d").data
    assert out.shape == (2, 5, 16, 16)
    assert np.all((out[:, :4] >= 0) & (out[:, :4] <= 1))


def test_dropout_only_in_training():
    m = net([TaskSpec("c", "Classification", num_classes=3)])
    x = images(2)
    a = m(x, "c").data
    b = m(x, "c").data
    assert a.tobytes() == b.tobytes()
    c = m(x, "c", train=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, c)


# -- routing ---------------------------------------------------------------


def test_global_path_skips_fpn(four_tasks):
    m = net(four_tasks)
    m(images(1), "cls")
    m(images(1), "kp")
    assert m.counters["encode"] == 2 and m.counters["fpn"] == 0
    m(images(1), "seg")
    assert m.counters["fpn"] == 1


@pytest.mark.parametrize("active", ["seg", "cls", "det", "kp"])
def test_backward_touches_only_the_active_head(four_tasks, active):
    from mhmtl.data import collate, generate, resize_to_model

    m = net(four_tasks)
    task = next(t for t in four_tasks if t.subtask_id == active)
    batch = collate([resize_to_model(s, (64, 64)) for s in generate(0, task, 2, size_range=(64, 96))])
    ad.backward(composite(batch, m(batch.images, active)))
    for name, p in m.params.items():
        if name.startswith("heads.") and not name.startswith(f"heads.{active}."):
            assert p.grad is None or not np.any(p.grad), name
    assert all(p.grad is not None for p in m.head_params(active).values())
    fpn_touched = m.params["fpn.smooth.weight"].grad is not None
    assert fpn_touched == task.kind.is_dense


def test_unknown_subtask(four_tasks):
    with pytest.raises(RoutingError):
        net(four_tasks)(images(1), "nope")


def test_wrong_path_for_kind(four_tasks):
    m = net(four_tasks)
    with pytest.raises(RoutingError):
        m.forward_global(images(1), "seg")
    with pytest.raises(RoutingError):
        m.forward_dense(images(1), "cls")


def test_wrong_input_size():
    with pytest.raises(ShapeError):
        net([TaskSpec("c", "Classification", num_classes=2)])(images(1, 96), "c")


def test_config_validation():
    with pytest.raises(ConfigError, match="input_size"):
        ModelConfig(input_size=(60, 64))
    with pytest.raises(ConfigError, match="duplicate|subtask"):
        ModelConfig(tasks=[TaskSpec("a", "Detection"), TaskSpec("a", "Detection")])
    with pytest.raises(ConfigError, match="kind"):
        TaskSpec("a", "Ranking")
    with pytest.raises(ConfigError, match="num_classes"):
        TaskSpec("a", "Classification")
    with pytest.raises(ConfigError, match="num_keypoints"):
        TaskSpec("a", "Regression")


def test_heads_are_per_subtask():
    tasks = [TaskSpec("a", "Classification", num_classes=2), TaskSpec("b", "Classification", num_classes=2)]
    m = net(tasks)
    assert set(m.head_params("a")) == {"heads.a.fc.weight", "heads.a.fc.bias"}
    assert not np.array_equal(m.params["heads.a.fc.weight"].data, m.params["heads.b.fc.weight"].data)


def test_init_is_seeded_and_biases_zero(four_tasks):
    a, b = net(four_tasks), net(four_tasks)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        if k.endswith(".bias"):
            assert not np.any(a.params[k].data)
    c = net(four_tasks, init_seed=1)
    assert not np.array_equal(a.params["fpn.smooth.weight"].data, c.params["fpn.smooth.weight"].data)


def test_trunk_init_bound():
    m = net([])
    w = m.params["encoder.stage2.conv1.weight"].data
    bound = math.sqrt(6.0 / (8 * 9))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound


def test_state_dict_roundtrip(four_tasks):
    a = net(four_tasks)
    b = net(four_tasks, init_seed=7)
    b.load_state_dict(a.state_dict())
    x = images(1)
    for sid in ("seg", "cls", "det", "kp"):
        assert a(x, sid).data.tobytes() == b(x, sid).data.tobytes()
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_digest_tracks_config(four_tasks):
    a = ModelConfig(input_size=(64, 64), tasks=four_tasks)
    assert a.digest() == ModelConfig.from_dict(a.to_dict()).digest()
    assert a.digest() != ModelConfig(input_size=(64, 64), tasks=four_tasks[:3]).digest()


@pytest.mark.parametrize("kind", ["seg", "cls", "det", "kp"])
def test_full_model_gradient_matches_finite_difference(four_tasks, kind):
    from mhmtl.data import collate, generate, resize_to_model

    m = MultiTaskNet(ModelConfig(input_size=(32, 32), encoder_widths=(3, 4, 4, 5, 6), fpn_channels=4, tasks=four_tasks))
    m.astype(np.float64)
    task = next(t for t in four_tasks if t.subtask_id == kind)
    batch = collate([resize_to_model(s, (32, 32)) for s in generate(1, task, 2, size_range=(40, 60))], dtype=np.float64)
    loss = lambda: composite(batch, m(batch.images, kind))
    ad.backward(loss())
    rng = np.random.default_rng(0)
    h = 1e-5
    errs = []
    for name, p in m.params.items():
        if p.grad is None:
            continue
        picks = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]
        a, n = [], []
        for idx in picks:
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss().item()
            p.data[idx] = orig - h
            down = loss().item()
            p.data[idx] = orig
            a.append(p.grad[idx])
            n.append((up - down) / (2 * h))
        a, n = np.array(a), np.array(n)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errs.append(0.0 if scale < 1e-10 else np.linalg.norm(a - n) / scale)
    assert max(errs) < 1e-3


# -- detection grid ----------------------------------------------------------


def test_encode_examples():
    assert encode_detection_target(0.5, 0.5, 64, 64) == (32, 32)
    assert encode_detection_target(0.0, 0.0, 64, 64) == (0, 0)
    assert encode_detection_target(0.999, 0.999, 16, 16) == (15, 15)


def test_encode_clamps_out_of_range(caplog):
    assert encode_detection_target(1.0, 1.0, 16, 16) == (15, 15)
    assert "clamping" in caplog.text


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(0, 1, exclude_max=True),
    y=st.floats(0, 1, exclude_max=True),
    gh=st.integers(1, 64),
    gw=st.integers(1, 64),
)
def test_encode_is_floor(x, y, gh, gw):
    i, j = encode_detection_target(x, y, gh, gw)
    assert i <= y * gh < i + 1 and j <= x * gw < j + 1


def test_decode_ties_go_to_origin():
    pred = np.zeros((1, 5, 8, 8))
    pred[0, :4] = np.arange(64).reshape(8, 8) / 64
    box, score = decode_detection(pred)
    assert box == (0.0, 0.0, 0.0, 0.0)
    assert score == 0.5


def test_decode_one_hot_peak():
    pred = np.zeros((1, 5, 16, 16))
    pred[0, 4, 7, 2] = 5.0
    pred[0, :4, 7, 2] = [0.5, 0.5, 0.25, 0.25]
    box, score = decode_detection(pred)
    assert box == (0.5, 0.5, 0.25, 0.25)
    assert score == pytest.approx(1 / (1 + math.exp(-5)))


def test_decode_hand_set_peak_at_3_5():
    m = net([TaskSpec("d", "Detection")])
    out = m(images(1), "d").data.copy()
    out[0, 4] = -3.0
    out[0, 4, 3, 5] = 3.0
    assert decode_cell(out) == (3, 5)
    assert decode_detection(out)[0] == tuple(float(v) for v in out[0, :4, 3, 5])


def test_decode_equals_exhaustive_scan():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gh, gw = rng.integers(1, 12, size=2)
        pred = rng.integers(-3, 3, size=(1, 5, gh, gw)).astype(np.float64)  # many ties
        best, cell = -np.inf, None
        for i in range(gh):
            for j in range(gw):
                if pred[0, 4, i, j] > best:
                    best, cell = pred[0, 4, i, j], (i, j)
        assert decode_cell(pred) == cell
        assert decode_detection(pred)[0] == tuple(pred[0, :4, cell[0], cell[1]])


def test_encode_then_decode_one_hot_target():
    for i, j in [(0, 0), (3, 9), (15, 15)]:
        x, y = (j + 0.5) / 16, (i + 0.5) / 16
        target = np.zeros((1, 5, 16, 16))
        target[0, 4][encode_detection_target(x, y, 16, 16)] = 1
        assert decode_cell(target) == (i, j)


def test_decode_rejects_batches():
    with pytest.raises(ShapeError):
        decode_detection(np.zeros((2, 5, 4, 4)))
