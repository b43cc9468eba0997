import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from advpath import io as IO
from advpath import model as M
from advpath.exceptions import FormatError, LoadError


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=False)))
def test_tensor_round_trip_bit_exact(a):
    b = IO.decode_tensor(IO.encode_tensor(a))
    assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_tensor_layout():
    buf = IO.encode_tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    assert buf[:5] == b"ADVT1" and buf[5] == 2
    assert buf[6:14] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert buf[14:] == np.array([1, 2], dtype="<f4").tobytes()


def test_tensor_bad_magic_and_truncation():
    with pytest.raises(FormatError):
        IO.decode_tensor(b"XXXXX\x00")
    buf = IO.encode_tensor(np.ones(4, dtype=np.float32))
    with pytest.raises(FormatError):
        IO.decode_tensor(buf[:-1])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = M.build_model(M.ModelSpec(), seed=9)
    m.epochs = 3
    path = tmp_path / "m.advp"
    IO.save_checkpoint(path, m)
    back = IO.load_checkpoint(path)
    assert back.spec == m.spec and back.seed == 9 and back.epochs == 3
    assert back.flat_params().tobytes() == m.flat_params().tobytes()
    assert IO.encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    buf = IO.encode_checkpoint(M.build_model(M.ModelSpec(), 0))
    with pytest.raises(FormatError):
        IO.decode_checkpoint(buf[:-4])
    with pytest.raises(FormatError):
        IO.decode_checkpoint(buf + b"\0")
    with pytest.raises(FormatError):
        IO.decode_checkpoint(b"ADVT1" + buf[5:])
    with pytest.raises(LoadError):
        IO.load_checkpoint(tmp_path / "missing.advp")


def test_dumps_json_canonical():
    assert IO.dumps_json({"b": np.int64(1), "a": np.float32(0.5)}) == '{\n  "a": 0.5,\n  "b": 1\n}\n'


def test_staged_dir_commits_on_success(tmp_path):
    out = tmp_path / "out"
    with IO.staged_dir(out) as d:
        (d / "x.txt").write_text("hi")
        assert not out.exists()
    assert (out / "x.txt").read_text() == "hi"


def test_staged_dir_leaves_nothing_on_failure(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with IO.staged_dir(out) as d:
            (d / "x.txt").write_text("hi")
            raise RuntimeError
    assert list(tmp_path.iterdir()) == []
