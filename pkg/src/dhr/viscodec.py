"""Visibility bitmap serialization and LZ4 block-format compression.

The LZ4 codec produces and consumes raw *block* streams (no frame header,
no checksums); sizes travel in the wire layer.  Encoding is a greedy
single-probe hash-chain-free matcher, which is enough for the coherent bit
planes it is fed.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from .raytrace import VisibilityBitmap

MIN_MATCH = 4
LAST_LITERALS = 5  # the final 5 bytes of a block are always literals
MF_LIMIT = 12  # the last match must start at least 12 bytes before the end
MAX_OFFSET = 65535
HASH_BITS = 12
MAX_INPUT = 2**31


class CodecError(ValueError):
    """Malformed bitmap payload or LZ4 stream."""


def pack_bitmap(vis):
    """Concatenate the bit-planes in light order."""
    return np.ascontiguousarray(vis.planes, dtype=np.uint8).tobytes()


def unpack_bitmap(data, width, height, n_lights, frame_id=0):
    plane = VisibilityBitmap.plane_bytes(width, height)
    if not 1 <= n_lights <= 64:
        raise CodecError(f"n_lights {n_lights} outside 1..64")
    if len(data) != n_lights * plane:
        raise CodecError(f"bitmap payload is {len(data)} bytes, expected {n_lights * plane}")
    planes = np.frombuffer(bytes(data), dtype=np.uint8).reshape(n_lights, plane).copy()
    return VisibilityBitmap(width, height, n_lights, planes, frame_id)


def max_compressed_size(n):
    return n + n // 255 + 16


def _compress_py(src, dst):
    n = len(src)
    op = 0
    anchor = 0
    if n >= MF_LIMIT + 1:
        table = np.full(1 << HASH_BITS, -1, dtype=np.int64)
        ip = 0
        limit = n - MF_LIMIT
        match_limit = n - LAST_LITERALS
        while ip < limit:
            seq = src[ip] | (src[ip + 1] << 8) | (src[ip + 2] << 16) | (src[ip + 3] << 24)
            h = ((seq * 2654435761) & 0xFFFFFFFF) >> (32 - HASH_BITS)
            ref = table[h]
            table[h] = ip
            if (
                ref < 0
                or ip - ref > MAX_OFFSET
                or src[ref] != src[ip]
                or src[ref + 1] != src[ip + 1]
                or src[ref + 2] != src[ip + 2]
                or src[ref + 3] != src[ip + 3]
            ):
                ip += 1
                continue
            mlen = MIN_MATCH
            while ip + mlen < match_limit and src[ref + mlen] == src[ip + mlen]:
                mlen += 1
            lit = ip - anchor
            ml = mlen - MIN_MATCH
            token = op
            op += 1
            if lit >= 15:
                rest = lit - 15
                while rest >= 255:
                    dst[op] = 255
                    op += 1
                    rest -= 255
                dst[op] = rest
                op += 1
                tok_hi = 15
            else:
                tok_hi = lit
            for i in range(lit):
                dst[op + i] = src[anchor + i]
            op += lit
            off = ip - ref
            dst[op] = off & 0xFF
            dst[op + 1] = off >> 8
            op += 2
            if ml >= 15:
                rest = ml - 15
                while rest >= 255:
                    dst[op] = 255
                    op += 1
                    rest -= 255
                dst[op] = rest
                op += 1
                tok_lo = 15
            else:
                tok_lo = ml
            dst[token] = (tok_hi << 4) | tok_lo
            ip += mlen
            anchor = ip
    lit = n - anchor
    token = op
    op += 1
    if lit >= 15:
        rest = lit - 15
        while rest >= 255:
            dst[op] = 255
            op += 1
            rest -= 255
        dst[op] = rest
        op += 1
        dst[token] = 15 << 4
    else:
        dst[token] = lit << 4
    for i in range(lit):
        dst[op + i] = src[anchor + i]
    op += lit
    return op


# decoder status codes
OK = 0
ERR_TRUNCATED = 1
ERR_OVERFLOW = 2
ERR_OFFSET = 3
ERR_SIZE = 4

_ERRORS = {
    ERR_TRUNCATED: "truncated LZ4 stream",
    ERR_OVERFLOW: "LZ4 stream decodes past expected size",
    ERR_OFFSET: "LZ4 match offset out of range",
    ERR_SIZE: "LZ4 output size mismatch",
}


def _decompress_py(src, dst):
    n = len(src)
    cap = len(dst)
    ip = 0
    op = 0
    while True:
        if ip >= n:
            return ERR_TRUNCATED, op
        token = src[ip]
        ip += 1
        lit = token >> 4
        if lit == 15:
            while True:
                if ip >= n:
                    return ERR_TRUNCATED, op
                b = src[ip]
                ip += 1
                lit += b
                if b != 255:
                    break
        if lit > n - ip:
            return ERR_TRUNCATED, op
        if lit > cap - op:
            return ERR_OVERFLOW, op
        for i in range(lit):
            dst[op + i] = src[ip + i]
        ip += lit
        op += lit
        if ip == n:
            # a block ends right after the literals of its last sequence
            if op != cap:
                return ERR_SIZE, op
            return OK, op
        if n - ip < 2:
            return ERR_TRUNCATED, op
        off = src[ip] | (src[ip + 1] << 8)
        ip += 2
        if off == 0 or off > op:
            return ERR_OFFSET, op
        mlen = token & 15
        if mlen == 15:
            while True:
                if ip >= n:
                    return ERR_TRUNCATED, op
                b = src[ip]
                ip += 1
                mlen += b
                if b != 255:
                    break
        mlen += MIN_MATCH
        if mlen > cap - op:
            return ERR_OVERFLOW, op
        ref = op - off
        # byte-wise copy: overlapping matches replicate the pattern
        for i in range(mlen):
            dst[op + i] = dst[ref + i]
        op += mlen


_compress_nb = _accel.njit(_compress_py)
_decompress_nb = _accel.njit(_decompress_py)


def compress(data, use_numba=None):
    """Encode ``data`` as a single LZ4 block."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    if len(data) > MAX_INPUT:
        raise CodecError("input larger than 2**31 bytes")
    data = bytes(data)
    cap = max_compressed_size(len(data))
    if use_numba:
        dst = np.zeros(cap, dtype=np.uint8)
        n = _compress_nb(np.frombuffer(data, dtype=np.uint8).astype(np.int64), dst)
        return dst[:n].tobytes()
    dst = [0] * cap
    n = _compress_py(data, dst)
    return bytes(dst[:n])


def decompress(data, expected_size, use_numba=None):
    """Decode an LZ4 block whose output must be exactly ``expected_size`` bytes."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    expected_size = int(expected_size)
    if expected_size < 0 or expected_size > MAX_INPUT:
        raise CodecError("expected_size out of range")
    data = bytes(data)
    if not data:
        if expected_size == 0:
            return b""
        raise CodecError(_ERRORS[ERR_TRUNCATED])
    if use_numba:
        dst = np.zeros(expected_size, dtype=np.uint8)
        status, _ = _decompress_nb(np.frombuffer(data, dtype=np.uint8).astype(np.int64), dst)
    else:
        dst = [0] * expected_size
        status, _ = _decompress_py(data, dst)
    if status != OK:
        raise CodecError(_ERRORS[status])
    return bytes(dst)
