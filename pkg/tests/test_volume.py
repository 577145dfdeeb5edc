import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from zssmnet import volume as V
from zssmnet.volume import (CaseRecord, MalformedHeaderError, PayloadSizeError,
                            TruncatedPayloadError, Volume, ZonalMask)


def test_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((2, 4, 4, 4)), (3.0, 0.5, 0.5))
    V.save_volume(v, tmp_path / "a.zvol")
    assert V.load_volume(tmp_path / "a.zvol") == v
    assert (tmp_path / "a.zvol").read_bytes().startswith(b"ZVOL1 2 4 4 4 3.0 0.5 0.5\n")


@given(arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
                                    st.integers(1, 3)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)),
       st.tuples(*[st.floats(0.1, 9.0)] * 3))
def test_roundtrip_byte_identical(data, spacing):
    buf = V.dumps_volume(Volume(data, spacing))
    again = V.loads_volume(buf)
    assert V.dumps_volume(again) == buf
    np.testing.assert_array_equal(again.data, data)


def test_distinct_format_errors():
    good = V.dumps_volume(Volume(np.zeros((1, 2, 2, 2))))
    header = good[:good.index(b"\n") + 1]
    with pytest.raises(PayloadSizeError):
        V.loads_volume(header + b"\0" * 28)  # 7 values, 8 required
    with pytest.raises(TruncatedPayloadError):
        V.loads_volume(header + b"\0" * 30)
    with pytest.raises(MalformedHeaderError):
        V.loads_volume(b"ZVOL2 1 2 2 2 1 1 1\n" + b"\0" * 32)
    with pytest.raises(MalformedHeaderError):
        V.loads_volume(b"ZVOL1 1 2 2\n")
    with pytest.raises(MalformedHeaderError):
        V.loads_volume(b"ZVOL1 1 2 2 2 1 -1 1\n" + b"\0" * 32)
    with pytest.raises(MalformedHeaderError):
        V.loads_volume(b"no newline")
    assert len({PayloadSizeError, TruncatedPayloadError, MalformedHeaderError}) == 3


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.array([[[[np.nan]]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1)), (0, 1, 1))
    v = Volume(np.zeros((2, 3, 3)))
    assert v.channels == 1 and v.dims == (2, 3, 3)
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1
    with pytest.raises(ValueError):
        ZonalMask(np.full((1, 1, 1), 3))


def test_resample_identity_is_same_object_values():
    v = Volume(np.random.default_rng(0).random((1, 3, 5, 5)), (3.0, 0.5, 0.5))
    assert V.resample(v, (3.0, 0.5, 0.5)) == v


def test_resample_ramp_midpoint():
    v = Volume(np.array([0.0, 1.0]).reshape(1, 1, 1, 2), (1.0, 1.0, 1.0))
    out = V.resample(v, (1.0, 1.0, 0.5))
    assert out.dims == (1, 1, 4)
    assert 0.5 in out.data.ravel().tolist()
    np.testing.assert_allclose(out.data.ravel(), [0, 0.5, 1, 1])


@given(st.integers(1, 9), st.sampled_from([0.5, 0.7, 1.0, 1.5, 3.0]),
       st.sampled_from([0.4, 0.5, 1.0, 2.0, 3.0]))
def test_resample_dims_and_range(n, s_in, s_out):
    r = np.random.default_rng(n)
    v = Volume(r.random((1, 2, 3, n)), (1.0, 1.0, s_in))
    out = V.resample(v, (1.0, 1.0, s_out))
    assert out.dims[2] == max(1, int(np.floor(n * s_in / s_out + 0.5)))
    assert out.data.min() >= v.data.min() and out.data.max() <= v.data.max()
    labels = ZonalMask(r.integers(0, 3, (2, 3, n)), (1.0, 1.0, s_in))
    m = V.resample(labels, (1.0, 1.0, s_out), "nearest")
    assert set(np.unique(m.labels)) <= set(np.unique(labels.labels))


def test_resample_mask_needs_nearest():
    with pytest.raises(ValueError):
        V.resample(ZonalMask(np.zeros((2, 2, 2))), (1, 1, 1), "trilinear")
    with pytest.raises(ValueError):
        V.resample(Volume(np.zeros((1, 2, 2))), (1, -1, 1))


def test_normalize_examples():
    const = Volume(np.full((1, 2, 2, 2), 7.0))
    assert not V.normalize(const, "zscore").data.any()
    two = Volume(np.array([0.0, 10.0] * 4).reshape(1, 2, 2, 2))
    out = V.normalize(two, "unit_range", (0, 100)).data
    assert set(np.unique(out)) == {0.0, 1.0}
    ramp = Volume(np.arange(100.0).reshape(1, 1, 10, 10))
    # percentile by direct linear interpolation on the sorted values
    p_lo, p_hi = 0.005 * 99, 0.995 * 99
    out = V.normalize(ramp, "unit_range", (0.5, 99.5)).data.ravel()
    np.testing.assert_allclose(out[0], 0.0)
    np.testing.assert_allclose(out[-1], 1.0)
    np.testing.assert_allclose(out[50], (50 - p_lo) / (p_hi - p_lo), rtol=1e-6)
    with pytest.raises(ValueError):
        V.normalize(ramp, "unit_range", (60, 40))


@given(arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_properties(data):
    v = Volume(data)
    u = V.normalize(v, "unit_range").data
    assert u.min() >= 0 and u.max() <= 1
    z = V.normalize(v, "zscore").data.astype(np.float64)
    for c in range(2):
        if data[c].std() > 1e-3:
            assert abs(z[c].mean()) <= 1e-5 and abs(z[c].std() - 1) <= 1e-4


def test_one_hot():
    m = ZonalMask(np.zeros((2, 2, 2)))
    oh = V.one_hot(m).data
    assert oh[0].all() and not oh[1:].any()
    lab = np.zeros((2, 2, 2), int)
    lab[1, 0, 1] = 1
    oh = V.one_hot(ZonalMask(lab)).data
    assert oh[1].sum() == 1 and oh[1, 1, 0, 1] == 1
    lab = np.random.default_rng(0).integers(0, 3, (3, 4, 5))
    oh = V.one_hot(ZonalMask(lab)).data
    assert (oh.sum(axis=0) == 1).all()
    np.testing.assert_array_equal(oh.argmax(axis=0), lab)


def _case(labels, spacing=(3.0, 0.5, 0.5)):
    lab = np.asarray(labels)
    img = Volume(np.random.default_rng(1).random((3,) + lab.shape), spacing)
    return CaseRecord("c", img, ZonalMask(lab, spacing), lab > 0, True)


def test_crop_box_examples():
    lab = np.zeros((5, 7, 7), int)
    lab[2, 3, 4] = 1
    assert V.crop_box(ZonalMask(lab), 0) == ((2, 3), (3, 4), (4, 5))
    out = V.roi_crop(_case(lab), 0)
    assert out.dims == (1, 1, 1) and out.lesions.shape == (1, 1, 1)
    # 25 mm at (3, .5, .5) dilates by (8, 50, 50), here clamped to the volume
    big = np.zeros((20, 120, 120), int)
    big[10, 60, 60] = 2
    assert V.crop_box(ZonalMask(big), 25.0) == ((2, 19), (10, 111), (10, 111))
    edge = np.zeros((4, 6, 6), int)
    edge[0, 0, 0] = 1
    assert V.crop_box(ZonalMask(edge), 25.0) == ((0, 4), (0, 6), (0, 6))
    with pytest.raises(V.EmptyMaskError):
        V.crop_box(ZonalMask(np.zeros((2, 2, 2))))


@given(st.integers(0, 10 ** 6), st.floats(0, 6))
def test_roi_crop_keeps_prostate(seed, margin):
    r = np.random.default_rng(seed)
    lab = np.zeros((4, 8, 8), int)
    lab[tuple(r.integers(0, s) for s in lab.shape)] = 2
    lab[tuple(r.integers(0, s) for s in lab.shape)] = 1
    case = _case(lab, (1.0, 1.0, 1.0))
    out = V.roi_crop(case, margin)
    assert (out.zones.labels > 0).sum() == (lab > 0).sum()
    assert out.image.dims == out.zones.dims == out.lesions.shape


def test_center_crop_or_pad_examples():
    a = np.arange(4.0).reshape(1, 1, 1, 4)
    v = Volume(a)
    assert V.center_crop_or_pad(v, (1, 1, 4)) == v
    np.testing.assert_array_equal(V.center_crop_or_pad(v, (1, 1, 6)).data.ravel(),
                                  [0, 0, 1, 2, 3, 0])
    b = Volume(np.arange(5.0).reshape(1, 1, 1, 5))
    np.testing.assert_array_equal(V.center_crop_or_pad(b, (1, 1, 3)).data.ravel(), [1, 2, 3])
    m = V.center_crop_or_pad(ZonalMask(np.ones((1, 1, 2))), (1, 1, 4))
    np.testing.assert_array_equal(m.labels.ravel(), [0, 1, 1, 0])


def test_case_manifest_roundtrip(tmp_path):
    lab = np.zeros((2, 4, 4), int)
    lab[1, 1:3, 1:3] = 2
    case = _case(lab)
    entry = V.save_case(case, tmp_path)
    V.write_manifest(tmp_path / "m.jsonl", [entry])
    (back,) = V.load_cases(tmp_path / "m.jsonl")
    assert back.image == case.image and back.zones == case.zones
    np.testing.assert_array_equal(back.lesions, case.lesions)
    assert back.label is True and back.case_id == "c"
    (tmp_path / "bad.jsonl").write_text('{"case_id": "x"}\n')
    with pytest.raises(ValueError, match="missing keys"):
        V.read_manifest(tmp_path / "bad.jsonl")


def test_case_record_shape_check():
    with pytest.raises(ValueError):
        CaseRecord("x", Volume(np.zeros((3, 2, 2, 2))), ZonalMask(np.zeros((2, 2, 3))))


def test_network_input_channels():
    lab = np.zeros((2, 4, 4), int)
    lab[0] = 1
    x = V.network_input(_case(lab), "unit_range")
    assert x.shape == (6, 2, 4, 4) and x.dtype == np.float32
    assert (x[3:].sum(axis=0) == 1).all()
