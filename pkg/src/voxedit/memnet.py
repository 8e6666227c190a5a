"""Residual key-value memory over the shared text/voice embedding space.

Three slot matrices share dimension D:

* ``M_mv`` (M x D) main voice values, the describable part of a voice,
* ``M_rv`` (N x D) residual voice values, what descriptors cannot express,
* ``M_k``  (M x D) descriptor keys, paired one-to-one with ``M_mv`` rows.

A query is compared to slots by cosine similarity, the similarities are
softmax-normalised across slots (after scaling by ``tau``), and the recalled
vector is the weighted sum of value slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import COSINE_EPS, Node, Tape, cosine_matrix, softmax
from .errors import DataError, NumericalError

QUERY_EPS = 1e-8


@dataclass
class ResMemParams:
    M_mv: np.ndarray
    M_rv: np.ndarray
    M_k: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        if self.M_mv.shape != self.M_k.shape:
            raise DataError(f"M_mv {self.M_mv.shape} and M_k {self.M_k.shape} must match")
        if self.M_rv.shape[1] != self.M_mv.shape[1]:
            raise DataError("M_rv slot dimension differs from M_mv")
        if self.tau <= 0:
            raise DataError("tau must be positive")

    @property
    def dim(self) -> int:
        return self.M_mv.shape[1]

    def check_slots(self, eps: float = QUERY_EPS) -> None:
        for name in ("M_mv", "M_rv", "M_k"):
            norms = np.linalg.norm(getattr(self, name), axis=1)
            if np.any(norms <= eps):
                raise NumericalError(f"{name} slot {int(np.argmin(norms))} collapsed to zero norm")


@dataclass
class DescriptorEncoderParams:
    """Embedding table followed by one linear layer and a ReLU."""

    table: np.ndarray  # (V, D)
    W: np.ndarray  # (D, D)
    b: np.ndarray  # (D,)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


@dataclass
class Readout:
    weights: np.ndarray
    recalled: np.ndarray


def init_params(M: int, N: int, D: int, V: int, rng: np.random.Generator, tau: float = 1.0):
    """Uniform(-1/sqrt(D), 1/sqrt(D)) slots and weights, zero bias."""
    if min(M, N, D, V) < 1:
        raise DataError("M, N, D and V must all be >= 1")
    bound = 1.0 / np.sqrt(D)

    def u(*shape):
        return rng.uniform(-bound, bound, shape)

    mem = ResMemParams(M_mv=u(M, D), M_rv=u(N, D), M_k=u(M, D), tau=tau)
    enc = DescriptorEncoderParams(table=u(V, D), W=u(D, D), b=np.zeros(D))
    mem.check_slots()
    return mem, enc


def encode_descriptor(params: DescriptorEncoderParams, x: int) -> np.ndarray:
    if not 0 <= x < params.vocab_size:
        raise DataError(f"descriptor id {x} outside [0, {params.vocab_size})")
    return np.maximum(params.W @ params.table[x] + params.b, 0.0)


def _readout(query, keys, values, tau) -> Readout:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (keys.shape[1],):
        raise DataError(f"query shape {query.shape} does not match slot dimension {keys.shape[1]}")
    if np.linalg.norm(query) <= QUERY_EPS:
        raise DataError("zero-norm query")
    w = softmax(tau * cosine_matrix(query[None, :], keys, COSINE_EPS))[0]
    return Readout(w, w @ values)


def readout_main(params: ResMemParams, s) -> Readout:
    return _readout(s, params.M_mv, params.M_mv, params.tau)


def readout_residual(params: ResMemParams, s) -> Readout:
    return _readout(s, params.M_rv, params.M_rv, params.tau)


def readout_descriptor(params: ResMemParams, t) -> Readout:
    """Address with descriptor keys, recall from the main voice values."""
    return _readout(t, params.M_k, params.M_mv, params.tau)


def recall_speaker(params: ResMemParams, s):
    """Return ``(s_main, s_res, s_main + s_res)``."""
    s_m = readout_main(params, s).recalled
    s_r = readout_residual(params, s).recalled
    return s_m, s_r, s_m + s_r


# -- tape builders (batched) ------------------------------------------------

def tape_readout(tape: Tape, query: Node, keys: Node, values: Node, tau: float):
    """Return ``(weights, recalled)`` nodes for a batch of queries."""
    w = tape.softmax(tape.cosine(query, keys), scale=tau)
    return w, tape.slot_sum(w, values)


def tape_encode(tape: Tape, table: Node, W: Node, b: Node, ids) -> Node:
    return tape.relu(tape.affine(tape.gather(table, ids), W, b))
