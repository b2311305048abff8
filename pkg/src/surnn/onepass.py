"""Single-pass selective GRU via a skip-drive input and forced z-head wiring.

The gate enters as ``H`` extra input channels carrying ``1 - g``.  The z-head
block on those channels is pinned to ``C * I`` (``C < 0``) and the r/n blocks
to zero, so on carry steps the z preactivation is shifted by ``C`` and the
update amount becomes ``sigmoid(z_org + C)``, an exponentially small leak.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import GruParams, StepCache, gru_hidden_step, init_gru
from .numerics import Rng, linear, sigmoid

C_FLOOR = -15.0
LN_EPS = 1e-5


@dataclass
class OnePassGru:
    """GRU over the augmented input [x; 1 - g] with wired gate channels."""

    base: GruParams  # W_ih is [3H, D + H]
    C: float
    D: int
    layer_norm: bool = False  # normalize the unshifted z preactivation across units

    def __post_init__(self):
        if self.C >= 0:
            raise ValueError("wiring constant C must be negative")
        if self.base.D != self.D + self.base.H:
            raise ValueError("augmented input width must be D + H")

    @property
    def H(self) -> int:
        return self.base.H

    def W_x(self) -> np.ndarray:
        return np.ascontiguousarray(self.base.W_ih[:, :self.D])

    def W_g(self) -> np.ndarray:
        return self.base.W_ih[:, self.D:]

    def gate_block(self, head: str) -> np.ndarray:
        H = self.H
        k = "rzn".index(head)
        return self.base.W_ih[k * H:(k + 1) * H, self.D:]

    def wiring_ok(self) -> bool:
        H = self.H
        return (np.all(self.gate_block("r") == 0.0) and np.all(self.gate_block("n") == 0.0)
                and np.array_equal(self.gate_block("z"), self.C * np.eye(H)))

    def blocks(self) -> dict[str, np.ndarray]:
        return self.base.blocks()


def init_onepass(rng: Rng, D: int, H: int, C: float, layer_norm: bool = False) -> OnePassGru:
    p = OnePassGru(init_gru(rng, D + H, H), float(C), D, layer_norm)
    # input init is scaled for the real inputs only
    bound = 1.0 / np.sqrt(D)
    p.base.W_ih[:, :D] = rng.uniform(-bound, bound, (3 * H, D))
    enforce_wiring(p)
    return p


def augment_input(x, g) -> np.ndarray:
    """Concatenate the skip drive: ``[x; 1 - g]`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("gate must be binary")
    g = np.broadcast_to(g, x.shape[:-1] + g.shape[-1:])
    return np.concatenate([x, 1.0 - g], axis=-1)


def enforce_wiring(p: OnePassGru) -> None:
    """Project the gate-channel blocks back to (0, C*I, 0) in place."""
    H = p.H
    p.gate_block("r")[...] = 0.0
    p.gate_block("n")[...] = 0.0
    zb = p.gate_block("z")
    zb[...] = 0.0
    zb[np.arange(H), np.arange(H)] = p.C


def input_projection(p: OnePassGru, x, g) -> np.ndarray:
    """``W_ih @ [x; 1 - g] + b_ih``, evaluated blockwise over the input partition.

    Splitting the product keeps the real-input part identical to a plain GRU
    with weights ``W_x``; the gate-channel part is exactly zero when g == 1.
    """
    s = augment_input(x, g)[..., p.D:]
    return linear(np.asarray(x, dtype=np.float64), p.W_x()) + linear(s, p.W_g()) + p.base.b_ih


def normalize_units(v):
    """Zero-mean, unit-variance across the last axis; returns (normalized, 1 / std)."""
    mu = v.mean(axis=-1, keepdims=True)
    c = v - mu
    inv_sd = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
    return c * inv_sd, inv_sd


def _normalized_step(p: OnePassGru, h, x, g):
    """Wired step with the z preactivation normalized before the shift is added."""
    H = p.H
    base = p.base
    gi = linear(np.asarray(x, dtype=np.float64), p.W_x()) + base.b_ih
    gh = linear(h, base.W_hh, base.b_hh)
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z_org, inv_sd = normalize_units(gi[..., H:2 * H] + gh[..., H:2 * H])
    z_pre = z_org + p.C * augment_input(x, g)[..., p.D:]
    z = sigmoid(z_pre)
    gh_n = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * gh_n)
    f = h + z * (n - h)
    heads = {"r": r, "z": z, "n": n, "gh_n": gh_n, "z_pre": z_pre, "inv_sd": inv_sd}
    return f, StepCache("gru", h, x, f, f, heads=heads, params=base)


def _wired_step(p: OnePassGru, h, x, g):
    if p.layer_norm:
        return _normalized_step(p, h, x, g)
    # per-step projection keeps the g == 1 path bitwise equal to a plain GRU step
    return gru_hidden_step(p.base, h, x, input_projection(p, x, g))


def onepass_step(p: OnePassGru, h, x, g):
    if not p.wiring_ok():
        raise ValueError("forced wiring violated; call enforce_wiring first")
    f, cache = _wired_step(p, np.asarray(h, dtype=np.float64), x, g)
    cache.g = None
    cache.heads["gate"] = np.asarray(g, dtype=np.float64)
    return f, cache


def onepass_forward(p: OnePassGru, xs, gs, h0=None) -> tuple[np.ndarray, list[StepCache]]:
    """Run the wired GRU over a whole stream. ``xs`` is [T, D] (or [T, B, D])."""
    if not p.wiring_ok():
        raise ValueError("forced wiring violated; call enforce_wiring first")
    xs = np.asarray(xs, dtype=np.float64)
    T = xs.shape[0]
    h = np.zeros(xs.shape[1:-1] + (p.H,)) if h0 is None else np.asarray(h0, dtype=np.float64)
    hs, caches = [], []
    for t in range(T):
        h, cache = _wired_step(p, h, xs[t], gs[t])
        cache.heads["gate"] = np.asarray(gs[t], dtype=np.float64)
        hs.append(h)
        caches.append(cache)
    return np.stack(hs), caches


def effective_update(z_org, g, C: float):
    """Update amount implied by the wiring: g*sig(z) + (1-g)*sig(z + C)."""
    g = np.asarray(g, dtype=np.float64)
    return g * sigmoid(z_org) + (1.0 - g) * sigmoid(z_org + C)


@dataclass
class RetentionSpec:
    L: int
    rho: float
    a_min: float = 0.0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("carry-run length must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("retention loss rho must lie in (0, 1)")


def retention_bound_C(spec: RetentionSpec) -> float:
    """Largest C with sigmoid(a_min - C)^L >= 1 - rho, floored at -15."""
    # logit(q) with q = (1 - rho)^(1/L), evaluated without cancellation near q = 1
    log_q = np.log1p(-spec.rho) / spec.L
    bound = spec.a_min - float(log_q - np.log(-np.expm1(log_q)))
    return max(bound, C_FLOOR)


def retained_mass(z_updates) -> float:
    """prod (1 - z') over a carry run."""
    return float(np.prod(1.0 - np.asarray(z_updates, dtype=np.float64)))
