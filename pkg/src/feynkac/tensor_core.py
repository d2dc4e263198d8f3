"""Dense float64 kernels and a counter-based random source.

Normals are produced by the paired Box-Muller transform applied to Philox
uniforms: draw ``2i`` and ``2i + 1`` are built from uniforms ``2i`` and
``2i + 1``, so every normal consumes exactly one uniform and any offset into a
stream can be reached by advancing the Philox counter.
"""

from __future__ import annotations

import hashlib

import numpy as np

DTYPE = np.float64
MASK64 = (1 << 64) - 1


class ContractViolation(ValueError):
    """Raised when a caller breaks a documented precondition."""


def splitmix64(value: int) -> int:
    """One round of the SplitMix64 finalizer (Steele, Lea & Flood)."""
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def label_id(*labels) -> int:
    """Stable 64-bit id for a tuple of labels (str/int), platform independent."""
    text = "/".join(str(x) for x in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def affine(weights: np.ndarray, inputs: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Row-wise ``weights @ x + bias`` for ``inputs`` of shape (B, in).

    ``weights`` has shape (out, in), as in the usual matrix-vector convention.
    """
    weights = np.asarray(weights, dtype=DTYPE)
    inputs = np.asarray(inputs, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weights.ndim != 2 or inputs.ndim != 2 or bias.ndim != 1:
        raise ContractViolation(
            f"affine expects 2-D weights/inputs and 1-D bias, got weights "
            f"{weights.shape}, input {inputs.shape}, bias {bias.shape}"
        )
    if weights.shape[1] != inputs.shape[1] or bias.shape[0] != weights.shape[0]:
        raise ContractViolation(
            f"shape mismatch: weights {weights.shape} vs input {inputs.shape} "
            f"(bias {bias.shape})"
        )
    return inputs @ weights.T + bias


class RngStream:
    """Reproducible stream of uniforms/normals keyed by ``(seed, stream_id)``.

    The pair is used directly as the 128-bit Philox key, so equal keys give
    equal sequences on every platform and different stream ids never share a
    counter space. Draw ``i`` of a stream is a pure function of
    ``(seed, stream_id, i)``; the object only tracks the position. Not safe to
    share between concurrent workers: hand each worker a :meth:`child` or a
    :meth:`copy` advanced with :meth:`skip`.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        self.position = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, position={self.position})"

    def child(self, *labels) -> "RngStream":
        """Independent sub-stream identified by ``labels`` (e.g. ``"train", 17``)."""
        return RngStream(self.seed, splitmix64(self.stream_id ^ label_id(*labels)))

    def copy(self) -> "RngStream":
        out = RngStream(self.seed, self.stream_id)
        out.position = self.position
        return out

    def skip(self, count: int) -> "RngStream":
        if count < 0:
            raise ContractViolation("cannot skip a negative number of draws")
        self.position += int(count)
        return self

    def _raw(self, start: int, count: int) -> np.ndarray:
        # Philox yields 4 doubles per counter increment
        start, count = int(start), int(count)
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        bitgen.advance(start // 4)
        lead = start % 4
        return np.random.Generator(bitgen).random(lead + count)[lead:]

    def uniforms(self, count: int) -> np.ndarray:
        """``count`` draws from the half-open interval (0, 1]."""
        out = 1.0 - self._raw(self.position, count)
        self.position += count
        return out

    def normals(self, count: int) -> np.ndarray:
        return sample_standard_normals(self, count)


def sample_standard_normals(rng: RngStream, count: int) -> np.ndarray:
    """``count`` i.i.d. N(0, 1) draws via the paired Box-Muller transform."""
    if count < 0:
        raise ContractViolation(f"count must be >= 0, got {count}")
    if count == 0:
        return np.empty(0, dtype=DTYPE)
    first = rng.position - rng.position % 2
    stop = rng.position + count
    stop += stop % 2
    u = 1.0 - rng._raw(first, stop - first)
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = 2.0 * np.pi * u[1::2]
    z = np.empty(stop - first, dtype=DTYPE)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    lead = rng.position - first
    rng.position += count
    return z[lead : lead + count]
