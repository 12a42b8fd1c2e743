import io
import logging
import struct
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np

from rainbowssd.exceptions import DimensionError, ParseError

LOGGER = logging.getLogger(__name__)

RT4_MAGIC = b"RT4\0"
_RT4_HEADER = struct.Struct("<4s4I")

_DEFAULT_DTYPE = np.dtype(np.float64)

ArrayLike = Union[np.ndarray, float, list, tuple]


def default_dtype() -> np.dtype:
    """The float dtype new tensors and parameters are created with"""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """
    Switch the default float precision, returning the previous value. Only
    float32 and float64 are accepted; gradient checks require float64.
    """
    global _DEFAULT_DTYPE  # pylint: disable=global-statement
    new_dtype = np.dtype(dtype)
    if new_dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {new_dtype}")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = new_dtype
    return prev


class Tensor:
    """
    Dense array participating in gradient recording. The wrapped numpy array
    lives in `data`; parameters are tensors whose `data` an optimizer updates
    in place between forward passes.
    """

    __slots__ = ("data", "name", "requires_grad", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        *,
        name: str = "",
        requires_grad: bool = True,
        dtype=None,
    ) -> None:
        self.data = np.asarray(data, dtype=default_dtype() if dtype is None else dtype)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return the underlying array"""
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{label} shape={self.shape}>"


class Tensor4(Tensor):
    """
    Rank-4 tensor in (n, c, h, w) row-major layout. Every dimension must be at
    least one.
    """

    __slots__ = ()

    def __init__(
        self,
        data: ArrayLike,
        *,
        name: str = "",
        requires_grad: bool = True,
        dtype=None,
    ) -> None:
        super().__init__(data, name=name, requires_grad=requires_grad, dtype=dtype)
        check_rank4(self.data, name or "tensor")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]


def check_rank4(data: np.ndarray, what: str) -> None:
    """Raise a DimensionError unless `data` is a valid (n, c, h, w) array"""
    if data.ndim != 4:
        raise DimensionError(f"{what} must have rank 4 (n, c, h, w), got {data.shape}")
    for axis, dim in zip("nchw", data.shape):
        if dim < 1:
            raise DimensionError(f"{what} axis {axis} must be >= 1, got {dim}")


def as_tensor4(x: Union[Tensor, np.ndarray], *, requires_grad: bool = False) -> Tensor4:
    """Wrap arrays, re-validate tensors"""
    if isinstance(x, Tensor4):
        return x
    if isinstance(x, Tensor):
        check_rank4(x.data, x.name or "tensor")
        return x  # type: ignore[return-value]
    return Tensor4(x, requires_grad=requires_grad)


def write_tensor(fobj: BinaryIO, x: Union[Tensor, np.ndarray]) -> None:
    """
    Serialize a rank-4 array: magic "RT4\\0", four little-endian u32 dims and
    then the values as little-endian float64 in row-major order.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim > 4:
        raise DimensionError(f"cannot serialize rank {data.ndim} array as RT4")
    # Lower ranks are left-padded with unit axes.
    shape = (1,) * (4 - data.ndim) + tuple(data.shape)
    fobj.write(_RT4_HEADER.pack(RT4_MAGIC, *shape))
    fobj.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_tensor(fobj: BinaryIO, *, dtype=None) -> np.ndarray:
    """Read one RT4 record written by `write_tensor`"""
    header = fobj.read(_RT4_HEADER.size)
    if len(header) != _RT4_HEADER.size:
        raise ParseError("truncated RT4 header")
    magic, *shape = _RT4_HEADER.unpack(header)
    if magic != RT4_MAGIC:
        raise ParseError(f"bad RT4 magic {magic!r}")
    count = int(np.prod(shape))
    payload = fobj.read(count * 8)
    if len(payload) != count * 8:
        raise ParseError(
            f"truncated RT4 payload, expected {count * 8} bytes got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return data.astype(default_dtype() if dtype is None else dtype)


def tensor_to_bytes(x: Union[Tensor, np.ndarray]) -> bytes:
    """Serialize to an in-memory RT4 record"""
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(
    data: bytes, *, shape: Optional[Tuple[int, ...]] = None, dtype=None
) -> np.ndarray:
    """Inverse of `tensor_to_bytes`, optionally restoring a lower-rank shape"""
    result = read_tensor(io.BytesIO(data), dtype=dtype)
    if shape is not None:
        result = result.reshape(shape)
    return result
