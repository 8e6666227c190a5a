"""Editing-degree prediction from a (source, target, descriptor) triple.

The three embeddings are concatenated, passed through one ReLU hidden layer,
and two linear heads give the mean and log-variance of a Gaussian over a
pre-sigmoid logit. A reparameterised sample is squashed to ``alpha`` in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, stable_sigmoid
from .errors import DataError


@dataclass
class VadpParams:
    W1: np.ndarray  # (H, 3D)
    b1: np.ndarray  # (H,)
    w_mu: np.ndarray  # (1, H)
    b_mu: np.ndarray  # (1,)
    w_lv: np.ndarray  # (1, H)
    b_lv: np.ndarray  # (1,)

    @property
    def dim(self) -> int:
        return self.W1.shape[1] // 3


@dataclass
class DegreeSample:
    alpha: float
    mu: float
    logvar: float
    eps: float


def init_vadp(D: int, H: int, rng: np.random.Generator) -> VadpParams:
    if D < 1 or H < 1:
        raise DataError("D and H must be >= 1")
    b_in, b_h = 1.0 / np.sqrt(3 * D), 1.0 / np.sqrt(H)
    return VadpParams(
        W1=rng.uniform(-b_in, b_in, (H, 3 * D)),
        b1=np.zeros(H),
        w_mu=rng.uniform(-b_h, b_h, (1, H)),
        b_mu=np.zeros(1),
        w_lv=rng.uniform(-b_h, b_h, (1, H)),
        b_lv=np.zeros(1),
    )


def predict_degree(params: VadpParams, s_a, s_b, t, eps: float = 0.0) -> DegreeSample:
    s_a, s_b, t = (np.asarray(v, dtype=np.float64) for v in (s_a, s_b, t))
    if not s_a.shape == s_b.shape == t.shape == (params.dim,):
        raise DataError(f"expected three vectors of dimension {params.dim}")
    h = np.maximum(params.W1 @ np.concatenate([s_a, s_b, t]) + params.b1, 0.0)
    mu = (params.w_mu @ h + params.b_mu).item()
    logvar = (params.w_lv @ h + params.b_lv).item()
    z = mu + np.exp(0.5 * logvar) * eps
    return DegreeSample(float(stable_sigmoid(z)), mu, logvar, float(eps))


def tape_degree(tape: Tape, p: dict[str, Node], s_a: Node, s_b: Node, t: Node, eps) -> Node:
    """Batched alpha node of shape (B, 1); ``p`` maps ``vadp.*`` names to nodes."""
    h = tape.relu(tape.affine(tape.concat([s_a, s_b, t]), p["vadp.W1"], p["vadp.b1"]))
    mu = tape.affine(h, p["vadp.w_mu"], p["vadp.b_mu"])
    logvar = tape.affine(h, p["vadp.w_lv"], p["vadp.b_lv"])
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, 1)
    return tape.sigmoid(tape.reparam(mu, logvar, eps))
