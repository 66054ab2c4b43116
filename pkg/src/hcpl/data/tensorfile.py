"""Binary tensor container.

Layout (little-endian)::

    b"HCPL" | version u8 | dtype u8 | rank u8 | dims u32 * rank | payload

dtype code 1 is float32, the only payload type. A rank-0 file holds a scalar.
"""

import struct

import numpy as np

MAGIC = b"HCPL"
VERSION = 1
DTYPE_F32 = 1


class TensorFileError(ValueError):
    pass


def encode_tensor(array):
    arr = np.asarray(array)
    if not np.issubdtype(arr.dtype, np.number) and arr.dtype != bool:
        raise TensorFileError(f"cannot store dtype {arr.dtype}")
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf):
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFileError("bad magic")
    version, dtype, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFileError(f"dtype code {dtype} is not float32")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise TensorFileError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * n:
        raise TensorFileError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
