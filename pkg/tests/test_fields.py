import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srvit.errors import ConfigurationError, DataError, FormatError
from srvit.fields import (DEFAULT_NORMALIZATION, GridField, SyntheticSceneSpec, denormalize,
                          encode_gfd, generate_scene, iter_gfd, iter_gfd_headers, normalize,
                          quality_check, read_gfd, read_pgm, to_pgm_bytes, write_gfd,
                          write_gfd_stream, write_pgm)


def refc(values, normalized=False):
    return GridField(np.asarray(values, dtype=np.float64).reshape(1, 1, -1), ("REFC",),
                     normalized)


# ---------------------------------------------------------------- GridField

def test_gridfield_is_float32_and_read_only():
    gf = GridField(np.zeros((2, 3)), ("REFC",))
    assert gf.values.dtype == np.float32 and gf.values.shape == (1, 2, 3)
    with pytest.raises(ValueError):
        gf.values[0, 0, 0] = 1.0


def test_gridfield_rejects_bad_names():
    with pytest.raises(ConfigurationError):
        GridField(np.zeros((2, 2, 2)), ("A",))
    with pytest.raises(ConfigurationError):
        GridField(np.zeros((1, 2, 2)), ("",))


# ---------------------------------------------------------------- normalization

@pytest.mark.parametrize("dbz, expected", [(0.0, 0.0), (60.0, 1.0), (30.0, 0.5)])
def test_normalize_refc(dbz, expected):
    assert normalize(refc([dbz])).values[0, 0, 0] == expected


@pytest.mark.parametrize("x, expected", [(0.5, 30.0), (0.0, 0.0)])
def test_denormalize_refc(x, expected):
    assert denormalize(refc([x], normalized=True)).values[0, 0, 0] == expected


def test_normalize_clamps_out_of_range():
    assert normalize(refc([-5.0, 75.0])).values.ravel().tolist() == [0.0, 1.0]


def test_normalize_errors():
    with pytest.raises(ConfigurationError):
        normalize(refc([1.0], normalized=True))
    with pytest.raises(DataError):
        normalize(refc([np.nan]))
    with pytest.raises(ConfigurationError):
        normalize(GridField(np.zeros((1, 1, 1)), ("XYZ",)))


@given(arrays(np.float64, (1, 3, 3), elements=st.floats(0, 60, width=32)))
def test_normalize_round_trip(x):
    back = denormalize(normalize(GridField(x, ("REFC",)), DEFAULT_NORMALIZATION)).values
    np.testing.assert_allclose(back, x.astype(np.float32), rtol=1e-6, atol=1e-5)


# ---------------------------------------------------------------- quality

def test_quality_all_zero_rejected():
    qc = quality_check(refc(np.zeros(100), normalized=True))
    assert qc.nonzero_fraction == 0.0 and not qc.accepted


def test_quality_coverage_count():
    x = np.zeros(1000)
    x[:92] = 0.4
    qc = quality_check(refc(x, normalized=True))
    assert qc.nonzero_fraction == 0.092 and qc.accepted


def test_quality_nan():
    assert not quality_check(refc([0.1, np.nan], normalized=True)).value_range_ok


def test_quality_out_of_range_physical():
    assert not quality_check(refc([0.0, 61.0])).value_range_ok
    assert quality_check(refc([0.0] * 50 + [59.0] * 5)).value_range_ok


# ---------------------------------------------------------------- generator

def test_empty_scene():
    inputs, target = generate_scene(SyntheticSceneSpec(n_cells=0, noise=0.0))
    assert not target.values.any()
    assert not inputs.channel("GLM").any()


def test_scene_determinism():
    a = generate_scene(SyntheticSceneSpec(seed=7))
    b = generate_scene(SyntheticSceneSpec(seed=7))
    assert encode_gfd(a[0]) == encode_gfd(b[0]) and encode_gfd(a[1]) == encode_gfd(b[1])


def test_scene_contract():
    inputs, target = generate_scene(SyntheticSceneSpec(seed=3, size=(32, 48)))
    assert inputs.channel_names == ("C07", "C09", "C13", "GLM")
    assert inputs.values.shape == (4, 32, 48) and target.values.shape == (1, 32, 48)
    assert inputs.normalized and target.normalized
    for gf in (inputs, target):
        assert np.all(np.isfinite(gf.values))
        assert gf.values.min() >= 0.0 and gf.values.max() <= 1.0
    assert set(np.unique(inputs.channel("GLM"))) <= {0.0, 1.0}


def test_generator_calibrated_coverage():
    cov = [quality_check(generate_scene(SyntheticSceneSpec(seed=s))[1]).nonzero_fraction
           for s in range(100)]
    assert 0.05 <= np.mean(cov) <= 0.15


# ---------------------------------------------------------------- GFD

def test_golden_gfd_bytes():
    gf = GridField(np.array([[[1.0, 2.0], [3.0, 4.0]]]), ("REFC",))
    expected = (b"GFD1" + bytes([1, 0, 0, 0]) + struct.pack("<III", 1, 2, 2)
                + b"\x04REFC" + struct.pack("<4f", 1.0, 2.0, 3.0, 4.0))
    data = encode_gfd(gf)
    assert data == expected
    assert data[-16:] == bytes.fromhex("0000803f" "00000040" "00004040" "00008040")


def test_gfd_normalized_flag(tmp_path):
    write_gfd(refc([0.5], normalized=True), tmp_path / "a.gfd")
    assert (tmp_path / "a.gfd").read_bytes()[5] == 1
    assert read_gfd(tmp_path / "a.gfd").normalized


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False)))
def test_gfd_round_trip_bitwise(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("gfd") / "f.gfd"
    gf = GridField(x, tuple(f"c{i}" for i in range(x.shape[0])))
    write_gfd(gf, path)
    back = read_gfd(path)
    assert back.values.tobytes() == gf.values.tobytes()
    assert back.channel_names == gf.channel_names


def test_gfd_wrong_magic(tmp_path):
    path = tmp_path / "bad.gfd"
    path.write_bytes(b"GFD2" + encode_gfd(refc([1.0]))[4:])
    with pytest.raises(FormatError) as info:
        read_gfd(path)
    assert info.value.offset == 0


@pytest.mark.parametrize("cut", [3, 14, 18, 22])
def test_gfd_truncated(tmp_path, cut):
    path = tmp_path / "t.gfd"
    path.write_bytes(encode_gfd(refc([1.0, 2.0]))[:cut])
    with pytest.raises(FormatError):
        read_gfd(path)


def test_gfd_trailing_bytes(tmp_path):
    path = tmp_path / "t.gfd"
    path.write_bytes(encode_gfd(refc([1.0])) + b"\0")
    with pytest.raises(FormatError):
        read_gfd(path)


def test_gfd_reserved_and_flags(tmp_path):
    good = bytearray(encode_gfd(refc([1.0])))
    for pos, value in ((5, 2), (6, 1), (4, 2)):
        bad = bytearray(good)
        bad[pos] = value
        (tmp_path / "x.gfd").write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            read_gfd(tmp_path / "x.gfd")


def test_gfd_stream(tmp_path):
    fields = [refc([1.0]), GridField(np.ones((2, 2, 3)), ("a", "bb"), True)]
    write_gfd_stream(fields, tmp_path / "s.gfd")
    back = list(iter_gfd(tmp_path / "s.gfd"))
    assert [f.channel_names for f in back] == [("REFC",), ("a", "bb")]
    offsets = [o for o, _ in iter_gfd_headers(tmp_path / "s.gfd")]
    assert offsets == [0, len(encode_gfd(fields[0]))]


# ---------------------------------------------------------------- PGM

def test_pgm_values(tmp_path):
    x = np.array([[0.0, 1.0, 0.5]])
    write_pgm(x, tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n3 1\n65535\n")
    assert data.endswith(bytes.fromhex("0000" "ffff" "8000"))
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 65535, 32768]]


def test_pgm_zero():
    assert to_pgm_bytes(np.zeros((2, 2))).endswith(b"\0" * 8)


def test_pgm_rejects_out_of_range():
    with pytest.raises(DataError):
        to_pgm_bytes(np.array([[1.5]]))
    with pytest.raises(ConfigurationError):
        to_pgm_bytes(np.zeros(3))
