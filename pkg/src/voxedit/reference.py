"""Straight-line re-implementation of the training objective.

Loops over batch items and memory slots with no tape and no batching, so it
shares no code path with the differentiated graph. Evaluated in extended
precision it serves as the finite-difference oracle: central differences of a
loss near 300 in float64 carry ~1e-9 of round-off noise, which swamps the
smallest gradient entries; ``longdouble`` cuts that noise by about 2000x.
"""

from __future__ import annotations

import numpy as np

from .autodiff import COSINE_EPS, KL_CLAMP

EXTENDED = np.longdouble


def _relu(v):
    return np.where(v > 0, v, 0)


def _readout(q, keys, values, tau):
    nq = np.sqrt(q @ q) + COSINE_EPS
    z = np.array([tau * (q @ k) / (nq * (np.sqrt(k @ k) + COSINE_EPS)) for k in keys])
    e = np.exp(z - z.max())
    w = e / e.sum()
    out = np.zeros_like(values[0])
    for j in range(len(values)):
        out = out + w[j] * values[j]
    return w, out


def _sq(v):
    return v @ v


def _kl(p, q):
    p = np.maximum(p, KL_CLAMP)
    q = np.maximum(q, KL_CLAMP)
    return np.sum(p * np.log(p / q))


def _sigmoid(z):
    return 1 / (1 + np.exp(-z)) if z >= 0 else np.exp(z) / (1 + np.exp(z))


def reference_loss(params: dict, s_a, s_b, x, eps, cfg, dtype=EXTENDED) -> tuple[float, float, float]:
    """Return ``(total, rec, align)`` for one batch, computed item by item."""
    P = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    s_a, s_b = np.asarray(s_a, dtype=dtype), np.asarray(s_b, dtype=dtype)
    eps = np.asarray(eps, dtype=dtype).reshape(-1)
    tau = dtype(cfg.tau)
    B = len(s_a)
    rec_sum, align_sum = dtype(0), dtype(0)
    for i in range(B):
        a, b = s_a[i], s_b[i]
        t = _relu(P["enc.W"] @ P["enc.table"][int(x[i])] + P["enc.b"])
        if cfg.mode == "no_resmem":
            rec_sum += _sq(a + t - b)
            continue
        w_a, m_a = _readout(a, P["M_mv"], P["M_mv"], tau)
        w_b, m_b = _readout(b, P["M_mv"], P["M_mv"], tau)
        if cfg.mode == "no_voice_res":
            rec_sum += (_sq(a - m_a) + _sq(b - m_b)) / 2
        else:
            _, r_a = _readout(a, P["M_rv"], P["M_rv"], tau)
            _, r_b = _readout(b, P["M_rv"], P["M_rv"], tau)
            rec_sum += (_sq(a - m_a - r_a) + _sq(a - m_a) + _sq(b - m_b - r_b) + _sq(b - m_b)) / 2
        w_t, _ = _readout(t, P["M_k"], P["M_mv"], tau)
        if cfg.mode == "no_vadp":
            mix = (w_t + w_a) / 2
        else:
            h = _relu(P["vadp.W1"] @ np.concatenate([a, b, t]) + P["vadp.b1"])
            mu = (P["vadp.w_mu"] @ h + P["vadp.b_mu"])[0]
            lv = (P["vadp.w_lv"] @ h + P["vadp.b_lv"])[0]
            alpha = _sigmoid(mu + np.exp(lv / 2) * eps[i])
            mix = alpha * w_t + (1 - alpha) * w_a
        align_sum += _kl(w_b, mix)
    rec, align = rec_sum / B, align_sum / B
    total = dtype(cfg.lambda_rec) * rec + dtype(cfg.lambda_align) * align
    return total, rec, align


def relu_margin(params: dict, s_a, s_b, x, cfg) -> float:
    """Smallest |pre-activation| over every ReLU the batch passes through.

    Central differences straddle the kink when this is below the step size.
    """
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    pre = [P["enc.W"] @ P["enc.table"][int(j)] + P["enc.b"] for j in x]
    m = min(float(np.abs(z).min()) for z in pre)
    if cfg.mode in ("full", "no_voice_res"):
        for a, b, z in zip(s_a, s_b, pre):
            t = np.maximum(z, 0)
            hz = P["vadp.W1"] @ np.concatenate([a, b, t]) + P["vadp.b1"]
            m = min(m, float(np.abs(hz).min()))
    return m
