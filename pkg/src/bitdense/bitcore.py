"""Bit-packed ±1 tensors and exact xnor-popcount linear algebra.

Values are encoded one bit per element: bit 1 means +1, bit 0 means -1.
Rows along the innermost dimension are packed into little-endian 64-bit
words (element j of a row lives in word j//64, bit j%64) and padded with
zero bits up to the word boundary.  Because both operands of a dot
product carry zero padding, mismatches can be counted with a plain XOR
(pad ^ pad = 0 never counts), which makes the popcount kernels exact
without per-row masks:

    dot(a, b) = n - 2 * popcount(a ^ b) = 2 * popcount(xnor(a, b)) - n
"""

from __future__ import annotations

import math

import numpy as np

WORD_BITS = 64
_WORD_BYTES = WORD_BITS // 8


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 uint8 array into uint64 words along the last axis."""
    n = bits.shape[-1]
    pad = (-n) % WORD_BITS
    if pad:
        bits = np.concatenate(
            [bits, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(np.uint64)


def _unpack_bit_rows(packed: np.ndarray, n: int) -> np.ndarray:
    """Inverse of _pack_bit_rows; returns a 0/1 uint8 array of row length n."""
    as_bytes = np.ascontiguousarray(packed).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :n]


class BitTensor:
    """Immutable bit-packed ±1 tensor."""

    __slots__ = ("shape", "packed")

    def __init__(self, shape: tuple[int, ...], packed: np.ndarray):
        self.shape = tuple(int(d) for d in shape)
        packed = np.ascontiguousarray(packed, dtype=np.uint64)
        packed.flags.writeable = False
        self.packed = packed

    @classmethod
    def from_sign_values(cls, values: np.ndarray) -> "BitTensor":
        """Pack a ±1 (or boolean-like nonnegative = +1) array."""
        values = np.asarray(values)
        bits = (values >= 0).astype(np.uint8).reshape(values.shape)
        if bits.ndim == 0:
            bits = bits.reshape(1)
            return cls((), _pack_bit_rows(bits))
        return cls(values.shape, _pack_bit_rows(bits))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def words_per_row(self) -> int:
        return self.packed.shape[-1]

    @property
    def storage_bytes(self) -> int:
        """Bytes actually held, including per-row word padding."""
        return self.packed.nbytes

    @property
    def payload_bytes(self) -> int:
        """Meaningful bytes: ceil(row_len/8) summed over rows."""
        if not self.shape:
            return 1
        rows = self.size // self.shape[-1] if self.shape[-1] else 0
        return rows * math.ceil(self.shape[-1] / 8)

    def unpack_bits(self) -> np.ndarray:
        """Return the 0/1 uint8 array of logical elements."""
        if not self.shape:
            return _unpack_bit_rows(self.packed, 1).reshape(())
        return _unpack_bit_rows(self.packed, self.shape[-1])

    def unpack(self) -> np.ndarray:
        """Return the logical ±1 values as float64."""
        bits = self.unpack_bits()
        return bits.astype(np.float64) * 2.0 - 1.0

    def reshape(self, shape: tuple[int, ...]) -> "BitTensor":
        size = int(np.prod(shape, dtype=np.int64))
        if size != self.size:
            raise ValueError(f"cannot reshape {self.shape} to {shape}")
        bits = self.unpack_bits().reshape(shape)
        return BitTensor(tuple(shape), _pack_bit_rows(bits))

    def __repr__(self) -> str:
        return f"BitTensor(shape={self.shape})"


class IntTensor:
    """Integer accumulator produced by the binary kernels."""

    __slots__ = ("shape", "values")

    def __init__(self, values: np.ndarray):
        values = np.ascontiguousarray(values)
        if not np.issubdtype(values.dtype, np.integer):
            raise ValueError(f"IntTensor requires integer values, got {values.dtype}")
        self.values = values
        self.shape = values.shape

    def __repr__(self) -> str:
        return f"IntTensor(shape={self.shape}, dtype={self.values.dtype})"


def sign_quantize(t: np.ndarray) -> BitTensor:
    """Binarize a float tensor elementwise: +1 where t >= 0, else -1."""
    t = np.asarray(t, dtype=np.float64)
    if np.isnan(t).any():
        raise ValueError("sign_quantize: input contains NaN")
    return BitTensor.from_sign_values(t)


def _xnor_popcount_mm(a_packed: np.ndarray, bt_packed: np.ndarray, n_bits: int) -> np.ndarray:
    """Popcount matmul core: a_packed is [M, W], bt_packed is [N, W] (B
    pre-transposed so the reduction axis is packed in both operands).
    Returns the exact ±1 dot products as int32 [M, N]."""
    m = a_packed.shape[0]
    n = bt_packed.shape[0]
    w = a_packed.shape[1]
    mismatch = np.zeros((m, n), dtype=np.int32)
    xor_buf = np.empty((m, n), dtype=np.uint64)
    cnt_buf = np.empty((m, n), dtype=np.uint8)
    for word in range(w):
        np.bitwise_xor(a_packed[:, word, None], bt_packed[None, :, word], out=xor_buf)
        np.bitwise_count(xor_buf, out=cnt_buf)
        mismatch += cnt_buf
    return (n_bits - 2 * mismatch).astype(np.int32)


def xnor_popcount_dot(a: BitTensor, b: BitTensor) -> int:
    """Exact dot product of two 1-D ±1 vectors via xnor + popcount."""
    if len(a.shape) != 1 or len(b.shape) != 1:
        raise ValueError("xnor_popcount_dot expects 1-D BitTensors")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    mismatches = int(np.bitwise_count(a.packed ^ b.packed).sum())
    return n - 2 * mismatches


def binary_gemm(a: BitTensor, b: BitTensor) -> IntTensor:
    """Exact matrix product of ±1 matrices: [M,K] x [K,N] -> int32 [M,N]."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError("binary_gemm expects 2-D BitTensors")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimension mismatch: {a.shape} x {b.shape}")
    # Repack B transposed so its reduction axis is bit-packed too.
    bt_bits = np.ascontiguousarray(b.unpack_bits().T)
    bt_packed = _pack_bit_rows(bt_bits)
    return IntTensor(_xnor_popcount_mm(a.packed, bt_packed, k))


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride}, padding {padding} "
            f"does not fit input extent {size}"
        )
    return out


def extract_bit_patches(
    input_bits: np.ndarray, kh: int, kw: int, stride: int, padding: int
) -> tuple[np.ndarray, int, int]:
    """im2col in the bit domain.  Padding inserts 0 bits, i.e. -1 values,
    keeping the ±1 algebra closed.  Returns ([N*OH*OW, C*kh*kw], OH, OW)."""
    n, c, h, w = input_bits.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if padding:
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.uint8)
        padded[:, :, padding : padding + h, padding : padding + w] = input_bits
    else:
        padded = input_bits
    sn, sc, sh, sw = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw), oh, ow


def binary_conv2d(
    input_bt: BitTensor,
    weight_bt: BitTensor,
    stride: int = 1,
    padding: int = 0,
) -> IntTensor:
    """Exact 2-D convolution of ±1 tensors, lowered to patch extraction
    plus the popcount GEMM core.  Spatial padding uses the -1 value."""
    if len(input_bt.shape) != 4 or len(weight_bt.shape) != 4:
        raise ValueError("binary_conv2d expects NCHW input and OCHW weight")
    n, c, h, w = input_bt.shape
    o, c2, kh, kw = weight_bt.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input C={c}, weight C={c2}")
    patches, oh, ow = extract_bit_patches(input_bt.unpack_bits(), kh, kw, stride, padding)
    a_packed = _pack_bit_rows(np.ascontiguousarray(patches))
    w_packed = _pack_bit_rows(
        np.ascontiguousarray(weight_bt.unpack_bits().reshape(o, c * kh * kw))
    )
    flat = _xnor_popcount_mm(a_packed, w_packed, c * kh * kw)
    out = flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return IntTensor(np.ascontiguousarray(out))


def memory_footprint(fp_param_count: float, binary_param_count: float) -> float:
    """Bytes to store fp32 parameters plus bit-packed binary parameters."""
    if fp_param_count < 0 or binary_param_count < 0:
        raise ValueError("parameter counts must be >= 0")
    return 4.0 * fp_param_count + math.ceil(binary_param_count / 8)


def ops_estimate(fp_flops: float, binary_ops: float) -> float:
    """Effective FLOPs with binary ops weighted 1/64 (xnor-bitcount
    accounting convention, not a measured kernel figure)."""
    if fp_flops < 0 or binary_ops < 0:
        raise ValueError("op counts must be >= 0")
    return fp_flops + binary_ops / 64.0
