"""Shared-parameter linear dual encoder.

Queries and documents go through the same map ``x -> W x`` and are scored
by dot product, so ``s(q, d) = q^T W^T W d / scale`` and

    ds/dW = W (q d^T + d q^T) / scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mpdr.errors import InputError, ParseError

MAGIC = b"MPDR1"
_HEADER = struct.Struct("<5sII")


@dataclass(frozen=True)
class EncoderParams:
    weight: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or 0 in w.shape:
            raise InputError(f"weight must be a non-empty matrix, got shape {w.shape}")
        if not np.isfinite(w).all():
            raise InputError("weight contains non-finite entries")
        object.__setattr__(self, "weight", w)

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return self.weight.shape == other.weight.shape and np.array_equal(self.weight, other.weight)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, self.embed_dim, self.input_dim)
        return header + self.weight.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> EncoderParams:
        if len(blob) < _HEADER.size:
            raise ParseError("encoder file is truncated")
        magic, embed_dim, input_dim = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}")
        expected = _HEADER.size + 8 * embed_dim * input_dim
        if len(blob) != expected:
            raise ParseError(f"encoder file has {len(blob)} bytes, expected {expected}")
        w = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(embed_dim, input_dim)
        return cls(w.astype(np.float64))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> EncoderParams:
        return cls.from_bytes(Path(path).read_bytes())


def init_params(input_dim: int = 32, embed_dim: int = 16, seed: int = 0) -> EncoderParams:
    """Glorot-uniform initialisation, U[-a, a] with a = sqrt(6 / (in + out))."""
    if input_dim < 1 or embed_dim < 1:
        raise InputError("dimensions must be positive")
    bound = np.sqrt(6.0 / (input_dim + embed_dim))
    rng = np.random.default_rng(seed)
    return EncoderParams(rng.uniform(-bound, bound, size=(embed_dim, input_dim)))


def _check_vec(params, x, what="feature vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.input_dim,):
        raise InputError(f"{what} has dimension {x.shape[-1:]}, encoder expects {params.input_dim}")
    return x


def encode(params: EncoderParams, x) -> np.ndarray:
    """Embed one vector (or a stack of row vectors)."""
    x = _check_vec(params, x)
    return x @ params.weight.T


def score(params: EncoderParams, q, d, scale: float = 1.0) -> float:
    return float(encode(params, q) @ encode(params, d)) / scale


def score_matrix(params: EncoderParams, queries, docs, scale: float = 1.0) -> np.ndarray:
    """All pairwise scores between query rows and document rows."""
    return (encode(params, queries) @ encode(params, docs).T) / scale


def backward(params: EncoderParams, query, passages, score_grads, scale: float = 1.0) -> np.ndarray:
    """dL/dW given dL/ds for the scores of ``query`` against each passage."""
    q = _check_vec(params, query, "query")
    passages = _check_vec(params, np.atleast_2d(np.asarray(passages, dtype=np.float64)), "passage")
    g = np.asarray(score_grads, dtype=np.float64)
    if g.shape != (passages.shape[0],):
        raise InputError(f"{g.shape[0] if g.ndim else 0} score gradients for {passages.shape[0]} passages")
    u = g @ passages
    return params.weight @ (np.outer(q, u) + np.outer(u, q)) / scale


def backward_batch(params: EncoderParams, queries, docs, grad_matrix, scale: float = 1.0) -> np.ndarray:
    """dL/dW when ``grad_matrix[b, j]`` is dL/ds(query_b, doc_j).

    The reduction is a fixed sequence of matrix products, so the result does
    not depend on how per-query gradients were produced.
    """
    queries = _check_vec(params, queries, "query")
    docs = _check_vec(params, docs, "document")
    grad_matrix = np.asarray(grad_matrix, dtype=np.float64)
    if grad_matrix.shape != (queries.shape[0], docs.shape[0]):
        raise InputError(f"grad matrix shape {grad_matrix.shape} does not match "
                         f"{queries.shape[0]} queries x {docs.shape[0]} documents")
    u = grad_matrix @ docs
    inner = queries.T @ u
    return params.weight @ (inner + inner.T) / scale
