"""Binary containers and small file helpers.

Two little-endian formats are used:

* ``ADVT1`` tensors: magic, ``u8`` rank, ``rank`` x ``u32`` dims, float32 blob.
* ``ADVP1`` checkpoints: magic, ``u32`` header length, UTF-8 JSON header
  (model spec, seed, epoch count, parameter shapes), then every parameter
  as a float32 blob in spec order.
"""

import json
import os
import shutil
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .exceptions import FormatError, LoadError

TENSOR_MAGIC = b"ADVT1"
CHECKPOINT_MAGIC = b"ADVP1"
_F32 = np.dtype("<f4")


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def decode_tensor(buf, source="<bytes>"):
    if buf[:5] != TENSOR_MAGIC:
        raise FormatError(f"{source}: not an ADVT1 tensor file")
    try:
        rank = buf[5]
        dims = struct.unpack_from(f"<{rank}I", buf, 6)
    except (IndexError, struct.error) as exc:
        raise FormatError(f"{source}: truncated tensor header") from exc
    start = 6 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - start != 4 * n:
        raise FormatError(f"{source}: expected {4 * n} data bytes, found {len(buf) - start}")
    return np.frombuffer(buf, dtype=_F32, count=n, offset=start).astype(np.float32).reshape(dims)


def write_tensor(path, arr):
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    return decode_tensor(buf, str(path))


def dumps_json(obj):
    """Canonical JSON used wherever byte-identical reruns matter."""
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


@contextmanager
def staged_dir(final):
    """Yield a scratch directory that replaces ``final`` only if the block succeeds."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        # merge into an existing output directory file by file
        for src in sorted(tmp.rglob("*")):
            dst = final / src.relative_to(tmp)
            if src.is_dir():
                dst.mkdir(parents=True, exist_ok=True)
            else:
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
        shutil.rmtree(tmp, ignore_errors=True)
    else:
        os.replace(tmp, final)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def encode_checkpoint(model):
    header = {
        "spec": model.spec.to_dict(),
        "seed": int(model.seed),
        "epochs": int(model.epochs),
        "param_shapes": [list(p.shape) for p in model.params],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(p.data, dtype=_F32).tobytes() for p in model.params)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + blobs


def decode_checkpoint(buf, source="<bytes>"):
    from .model import Model, ModelSpec
    from .engine import Tensor

    if buf[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not an ADVP1 checkpoint")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 5)
        header = json.loads(buf[9:9 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header") from exc
    spec = ModelSpec.from_dict(header["spec"])
    shapes = [tuple(s) for s in header["param_shapes"]]
    if shapes != spec.param_shapes():
        raise FormatError(f"{source}: parameter shapes do not match the stored spec")
    off = 9 + hlen
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        if off + 4 * n > len(buf):
            raise FormatError(f"{source}: truncated parameter data")
        arr = np.frombuffer(buf, dtype=_F32, count=n, offset=off).astype(np.float32).reshape(shape)
        params.append(Tensor(arr, dtype=np.float32))
        off += 4 * n
    if off != len(buf):
        raise FormatError(f"{source}: {len(buf) - off} trailing bytes")
    return Model(spec, params, header["seed"], header["epochs"])


def save_checkpoint(path, model):
    atomic_write_bytes(path, encode_checkpoint(model))


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(buf, str(path))
