"""Factor model: one K x S_i matrix per tensor dimension, plus cached Grams.

A cell of the reconstructed tensor is the sum over features of the product
of the corresponding matrix columns, i.e. the inner product of the Hadamard
product of one column per dimension with the all-ones vector. The Gram
matrices M M^T are cached because the solvers combine them to account for
all unobserved cells at once; they are refreshed eagerly whenever a matrix
is replaced through the public API.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"ITALS\x01"

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _CRC64_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class ModelFormatError(ValueError):
    """Raised when a model file is corrupt or has the wrong format."""


class FactorModel:
    """D factor matrices of shape (K, S_i) with cached Gram matrices.

    Reads (predict/score) are safe concurrently; replacing a matrix needs
    exclusive access to the model.
    """

    def __init__(self, matrices: Sequence[np.ndarray], dim_roles: Sequence[str]):
        matrices = [np.array(m, dtype=np.float64, order="C") for m in matrices]
        if len(matrices) < 2:
            raise ValueError("need at least two factor matrices")
        k = matrices[0].shape[0]
        for m in matrices:
            if m.ndim != 2 or m.shape[0] != k:
                raise ValueError("all matrices must share the feature count K")
            if not np.isfinite(m).all():
                raise ValueError("factor matrices must be finite")
        if len(dim_roles) != len(matrices):
            raise ValueError("one role label per dimension required")
        self.matrices = matrices
        self.dim_roles = [str(r) for r in dim_roles]
        self.grams = [m @ m.T for m in matrices]

    @property
    def ndim(self) -> int:
        return len(self.matrices)

    @property
    def n_features(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.matrices)

    def refresh_gram(self, dim: int) -> None:
        m = self.matrices[dim]
        self.grams[dim] = m @ m.T

    def set_matrix(self, dim: int, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != self.matrices[dim].shape:
            raise ValueError("replacement matrix must keep its shape")
        self.matrices[dim] = np.array(matrix, order="C")
        self.refresh_gram(dim)

    def copy(self) -> "FactorModel":
        return FactorModel([m.copy() for m in self.matrices], list(self.dim_roles))

    def predict(self, indices: Sequence[int]) -> float:
        """Reconstructed value at one cell: sum_k prod_d M[d][k, i_d]."""
        if len(indices) != self.ndim:
            raise ValueError(f"expected {self.ndim} indices, got {len(indices)}")
        prod = np.ones(self.n_features)
        for dim, idx in enumerate(indices):
            size = self.matrices[dim].shape[1]
            if not 0 <= idx < size:
                raise IndexError(f"index {idx} out of range for dimension {dim}")
            prod *= self.matrices[dim][:, idx]
        return float(prod.sum())

    def mixed_column(self, dim: int, weighted_states) -> np.ndarray:
        """Weighted combination of columns of dimension ``dim``."""
        vec = np.zeros(self.n_features)
        for state, weight in weighted_states:
            vec += weight * self.matrices[dim][:, state]
        return vec

    def score_items(self, item_dim: int, fixed: dict) -> np.ndarray:
        """Scores for every entity of ``item_dim`` with all other dims fixed.

        ``fixed`` maps each remaining dimension to either a column index or
        a length-K vector (e.g. a blended context vector). Computed as one
        K-vector Hadamard product followed by a matrix product, so
        ``scores[j] == predict(..., j, ...)`` for every j.
        """
        missing = [d for d in range(self.ndim) if d != item_dim and d not in fixed]
        if missing:
            raise ValueError(f"missing assignment for dimensions {missing}")
        weights = np.ones(self.n_features)
        for dim, value in fixed.items():
            if dim == item_dim:
                continue
            if isinstance(value, (int, np.integer)):
                size = self.matrices[dim].shape[1]
                if not 0 <= value < size:
                    raise IndexError(f"index {value} out of range for dimension {dim}")
                weights *= self.matrices[dim][:, value]
            else:
                vec = np.asarray(value, dtype=np.float64)
                if vec.shape != (self.n_features,):
                    raise ValueError("vector assignments must have length K")
                weights *= vec
        return weights @ self.matrices[item_dim]


def init_model(sizes: Sequence[int], k: int, seed: int) -> FactorModel:
    """Seeded random model: entries i.i.d. uniform on [0, 1/sqrt(K)).

    The scale keeps initial predictions O(1) regardless of the feature
    count. Same seed, same model, bit for bit.
    """
    if k < 1:
        raise ValueError("feature count K must be >= 1")
    sizes = tuple(int(s) for s in sizes)
    if any(s < 1 for s in sizes):
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(k)
    matrices = [rng.random((k, s)) * scale for s in sizes]
    roles = _default_roles(len(sizes))
    return FactorModel(matrices, roles)


def _default_roles(ndim: int) -> list[str]:
    roles = ["user", "item"]
    roles += [f"context{i}" for i in range(1, ndim - 1)]
    return roles[:ndim]


def save_model(model: FactorModel, sink: BinaryIO | str) -> None:
    """Write a model: magic, text header, column-major float64 matrices, CRC.

    Header line: ``D K S_1 ... S_D role_1 ... role_D``. Matrices are stored
    column-major as little-endian IEEE-754 doubles; the trailing 8 bytes are
    a little-endian CRC-64 of everything between the magic and the checksum.
    """
    for role in model.dim_roles:
        if any(ch.isspace() for ch in role):
            raise ValueError(f"role labels cannot contain whitespace: {role!r}")
    header = " ".join(
        [str(model.ndim), str(model.n_features)]
        + [str(s) for s in model.sizes]
        + list(model.dim_roles)
    )
    payload = bytearray()
    payload += header.encode("ascii") + b"\n"
    for m in model.matrices:
        payload += np.asarray(m, dtype="<f8").tobytes(order="F")
    blob = MAGIC + bytes(payload) + struct.pack("<Q", crc64(bytes(payload)))
    if isinstance(sink, str):
        with open(sink, "wb") as fh:
            fh.write(blob)
    else:
        sink.write(blob)


def load_model(source: BinaryIO | str | bytes) -> FactorModel:
    """Read a model written by :func:`save_model`; the round trip is exact.

    Raises:
        ModelFormatError: on bad magic, truncation, checksum mismatch,
            malformed header, or non-finite matrix entries.
    """
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()

    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise ModelFormatError("not a model file (bad magic or truncated)")
    payload, crc_bytes = data[len(MAGIC) : -8], data[-8:]
    (stored_crc,) = struct.unpack("<Q", crc_bytes)
    if crc64(payload) != stored_crc:
        raise ModelFormatError("checksum mismatch (corrupt or truncated payload)")

    stream = io.BytesIO(payload)
    header = stream.readline()
    if not header.endswith(b"\n"):
        raise ModelFormatError("truncated header")
    fields = header.decode("ascii", errors="replace").split()
    if len(fields) < 2:
        raise ModelFormatError("malformed header")
    try:
        ndim, k = int(fields[0]), int(fields[1])
        sizes = [int(f) for f in fields[2 : 2 + ndim]]
    except ValueError as err:
        raise ModelFormatError(f"malformed header: {err}") from None
    roles = fields[2 + ndim : 2 + 2 * ndim]
    if ndim < 2 or k < 1 or len(sizes) != ndim or len(roles) != ndim:
        raise ModelFormatError("malformed header")

    matrices = []
    for size in sizes:
        raw = stream.read(8 * k * size)
        if len(raw) != 8 * k * size:
            raise ModelFormatError("truncated matrix payload")
        flat = np.frombuffer(raw, dtype="<f8")
        matrices.append(np.array(flat.reshape((k, size), order="F")))
    if stream.read(1):
        raise ModelFormatError("trailing bytes after matrices")
    for m in matrices:
        if not np.isfinite(m).all():
            raise ModelFormatError("non-finite values in stored matrices")
    return FactorModel(matrices, roles)
