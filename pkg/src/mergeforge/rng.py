"""Deterministic seeded randomness for drop-and-rescale sparsification.

The construction below is normative for this package and is what makes
merge output independent of thread scheduling: every (tensor, model) pair
gets its own stream, and elements consume that stream in flat-index order.

Construction (bit-exact, reimplementable from this description alone):

1. ``fnv1a64(name)``: FNV-1a over the UTF-8 bytes of the tensor name,
   offset basis 0xcbf29ce484222325, prime 0x100000001b3, mod 2**64.
2. ``sub_seed = splitmix64_mix(global_seed XOR fnv1a64(name) XOR model_index)``
   where ``splitmix64_mix(x)`` is one output step of a splitmix64 generator
   whose state is ``x``: add the golden-gamma constant 0x9e3779b97f4a7c15,
   then scramble with the (30, 0xbf58476d1ce4e5b9), (27, 0x94d049bb133111eb),
   (31) xorshift-multiply finalizer.
3. The element stream is the splitmix64 sequence continuing from state
   ``sub_seed``: the i-th draw (i = 0, 1, ...) is
   ``scramble(sub_seed + (i + 1) * 0x9e3779b97f4a7c15)``.
4. Element i is dropped iff ``(draw_i >> 11) / 2**53 < p``.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(name: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of `name`."""
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def splitmix64_mix(x: int) -> int:
    """One splitmix64 output step from state `x`."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def dare_sub_seed(global_seed: int, tensor_name: str, model_index: int) -> int:
    return splitmix64_mix((global_seed ^ fnv1a64(tensor_name) ^ model_index) & _MASK64)


def splitmix64_stream(state: int, n: int) -> np.ndarray:
    """First `n` splitmix64 draws continuing from `state`, as uint64.

    Vectorized: draw i equals scramble(state + (i + 1) * GOLDEN) mod 2**64.
    """
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = (np.uint64(state & _MASK64) + np.uint64(_GOLDEN) * idx).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def dare_drop_mask(
    n: int, drop_prob: float, global_seed: int, tensor_name: str, model_index: int
) -> np.ndarray:
    """Boolean mask of length `n`: True where the element is dropped.

    Element i is dropped iff (draw_i >> 11) / 2**53 < drop_prob, with draws
    from the per-(tensor, model) stream described in the module docstring.
    """
    if n == 0:
        return np.zeros(0, dtype=bool)
    draws = splitmix64_stream(dare_sub_seed(global_seed, tensor_name, model_index), n)
    return (draws >> np.uint64(11)).astype(np.float64) / float(1 << 53) < drop_prob
