"""Scalar losses over 1-D prediction vectors.

Every function returns ``(loss, grad)`` where ``grad`` has the shape of the
prediction argument (or a tuple of grads when several inputs are trainable).
Losses are batch means, so gradients carry a 1/n factor.
"""
from __future__ import annotations

import numpy as np

ADV_WEIGHT_CLIP = 20.0


def _vec(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


def mse(pred, target, weights=None):
    p, t = _vec(pred), _vec(target)
    w = np.ones_like(p) if weights is None else _vec(weights)
    d = p - t
    n = p.size
    return float(np.sum(w * d * d) / n), 2.0 * w * d / n


def expectile(pred, target, tau: float):
    """Asymmetric squared loss |tau - 1(u < 0)| u^2 with u = target - pred."""
    p, t = _vec(pred), _vec(target)
    u = t - p
    w = np.where(u < 0.0, 1.0 - tau, tau)
    n = p.size
    return float(np.sum(w * u * u) / n), -2.0 * w * u / n


def expectile_of(samples, tau: float, tol: float = 1e-14) -> float:
    """Root of sum |tau - 1(x < v)| (x - v) = 0 by bisection."""
    x = np.sort(_vec(samples))
    lo, hi = float(x[0]), float(x[-1])

    def f(v):
        w = np.where(x < v, 1.0 - tau, tau)
        return float(np.sum(w * (x - v)))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def advantage_weights(adv, beta: float, clip: float = ADV_WEIGHT_CLIP):
    """min(exp(beta * A), clip); computed in log space to avoid overflow."""
    a = _vec(adv) * beta
    return np.exp(np.minimum(a, np.log(clip)))


def awr(pred, target, weights):
    return mse(pred, target, weights)


def fidelity_penalty(action, base, signal_mask):
    a, b = _vec(action), _vec(base)
    m = _vec(signal_mask)
    d = a - b
    n = a.size
    return float(np.sum(m * np.abs(d)) / n), m * np.sign(d) / n


def reversal_penalty(action, base, signal_mask):
    a, b = _vec(action), _vec(base)
    m = _vec(signal_mask)
    s = np.sign(b)
    h = -a * s
    n = a.size
    active = (h > 0.0) * m
    return float(np.sum(m * np.maximum(h, 0.0)) / n), -s * active / n


def entry_penalty(action, silence_mask, tau_entry: float):
    a = _vec(action)
    m = _vec(silence_mask)
    h = np.abs(a) - tau_entry
    n = a.size
    active = (h > 0.0) * m
    return float(np.sum(m * np.maximum(h, 0.0)) / n), np.sign(a) * active / n


def bc_anchor(delta, offset, behavior, anchor_w: float):
    """mean((offset + delta - behavior)^2) + anchor_w * mean(delta^2) as a
    function of delta; the composed action is ``offset + delta``."""
    d = _vec(delta)
    loss_fit, g_fit = mse(_vec(offset) + d, behavior)
    n = d.size
    return loss_fit + anchor_w * float(np.sum(d * d) / n), g_fit + 2.0 * anchor_w * d / n


def cql_regularizer(q_samples, q_data, alpha: float = 1.0, temperature: float = 1.0):
    """alpha * mean(T * logsumexp(Q_k / T) - Q(s, a_data)).

    Returns ``(loss, (grad_samples, grad_data))``.
    """
    qs = np.asarray(q_samples, dtype=np.float64)
    qd = _vec(q_data)
    n = qd.size
    z = qs / temperature
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = (zmax[:, 0] + np.log(e.sum(axis=1))) * temperature
    soft = e / e.sum(axis=1, keepdims=True)
    loss = alpha * float(np.mean(lse - qd))
    return loss, (alpha * soft / n, -alpha * np.ones(n) / n)


def td3bc_actor(q_pi, action, behavior, alpha: float = 2.5):
    """-lambda * mean(Q) + mean((a - a_beh)^2) with lambda = alpha / mean|Q|
    treated as a constant. Returns ``(loss, (grad_q, grad_action), lambda)``."""
    q = _vec(q_pi)
    n = q.size
    lam = alpha / (float(np.mean(np.abs(q))) + 1e-12)
    bc, g_a = mse(action, behavior)
    return -lam * float(np.mean(q)) + bc, (-lam * np.ones(n) / n, g_a), lam
