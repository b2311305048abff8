"""Recurrent backbones (tanh RNN, residual-form GRU) and the selective-update step.

All step functions accept a single state ``h`` of shape [H] or a batch [B, H].
The GRU uses the residual convention ``h' = h + z * (n - h)`` so ``z`` is the
amount of update, with head order (r, z, n) in every stacked weight.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Rng, linear, orthogonal, sigmoid


@dataclass
class RnnParams:
    W_xh: np.ndarray  # [H, D]
    W_hh: np.ndarray  # [H, H]
    b: np.ndarray     # [H]

    def __post_init__(self):
        H, D = self.W_xh.shape
        if H == 0 or D == 0:
            raise ValueError("degenerate RNN dimensions")
        if self.W_hh.shape != (H, H) or self.b.shape != (H,):
            raise ValueError("inconsistent RNN parameter shapes")

    @property
    def H(self) -> int:
        return self.W_hh.shape[0]

    @property
    def D(self) -> int:
        return self.W_xh.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {"W_xh": self.W_xh, "W_hh": self.W_hh, "b": self.b}


@dataclass
class GruParams:
    W_ih: np.ndarray  # [3H, D]
    W_hh: np.ndarray  # [3H, H]
    b_ih: np.ndarray  # [3H]
    b_hh: np.ndarray  # [3H]

    def __post_init__(self):
        H3, D = self.W_ih.shape
        if H3 == 0 or D == 0 or H3 % 3:
            raise ValueError("degenerate GRU dimensions")
        H = H3 // 3
        if self.W_hh.shape != (H3, H) or self.b_ih.shape != (H3,) or self.b_hh.shape != (H3,):
            raise ValueError("inconsistent GRU parameter shapes")

    @property
    def H(self) -> int:
        return self.W_hh.shape[1]

    @property
    def D(self) -> int:
        return self.W_ih.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}


def init_rnn(rng: Rng, D: int, H: int) -> RnnParams:
    if D < 1 or H < 1:
        raise ValueError("D and H must be positive")
    bound = 1.0 / np.sqrt(D)
    return RnnParams(rng.uniform(-bound, bound, (H, D)), orthogonal(rng, H), np.zeros(H))


def init_gru(rng: Rng, D: int, H: int) -> GruParams:
    if D < 1 or H < 1:
        raise ValueError("D and H must be positive")
    bound = 1.0 / np.sqrt(D)
    W_hh = np.concatenate([orthogonal(rng, H) for _ in range(3)], axis=0)
    return GruParams(rng.uniform(-bound, bound, (3 * H, D)), W_hh,
                     np.zeros(3 * H), np.zeros(3 * H))


@dataclass
class StepCache:
    """Everything a completed step needs for its Jacobian and for BPTT."""

    kind: str
    h_prev: np.ndarray
    x: np.ndarray
    f: np.ndarray            # backbone output f(h_prev, x)
    h_next: np.ndarray
    g: np.ndarray | None = None
    heads: dict = field(default_factory=dict)
    params: object = None

    @property
    def delta(self) -> np.ndarray:
        """Residual proposal f(h_prev, x) - h_prev."""
        return self.f - self.h_prev


def _check_dims(h, x, H, D):
    if h.shape[-1] != H or x.shape[-1] != D:
        raise ValueError(f"state/input dims {h.shape}/{x.shape} do not match H={H}, D={D}")


def rnn_step(p: RnnParams, h, x):
    h, x = np.asarray(h, dtype=np.float64), np.asarray(x, dtype=np.float64)
    _check_dims(h, x, p.H, p.D)
    pre = linear(x, p.W_xh, p.b) + linear(h, p.W_hh)
    f = np.tanh(pre)
    return f, StepCache("rnn", h, x, f, f, heads={"pre": pre}, params=p)


def gru_step(p: GruParams, h, x, z_shift=None):
    """One GRU step; ``z_shift`` is added to the z preactivation."""
    h, x = np.asarray(h, dtype=np.float64), np.asarray(x, dtype=np.float64)
    _check_dims(h, x, p.H, p.D)
    return gru_hidden_step(p, h, x, linear(x, p.W_ih, p.b_ih), z_shift)


def gru_hidden_step(p: GruParams, h, x, gi, z_shift=None):
    """GRU step from a precomputed input projection ``gi = W_ih x + b_ih``."""
    H = p.H
    gh = linear(h, p.W_hh, p.b_hh)
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z_pre = gi[..., H:2 * H] + gh[..., H:2 * H]
    if z_shift is not None:
        z_pre = z_pre + z_shift
    z = sigmoid(z_pre)
    gh_n = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * gh_n)
    f = h + z * (n - h)
    heads = {"r": r, "z": z, "n": n, "gh_n": gh_n, "z_pre": z_pre}
    return f, StepCache("gru", h, x, f, f, heads=heads, params=p)


def _check_binary(g):
    g = np.asarray(g, dtype=np.float64)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("selective gate must be binary")
    return g


def selective_step(backbone_step: Callable, h, x, g):
    """Apply the backbone where ``g == 1`` and carry ``h`` bitwise where ``g == 0``."""
    g = _check_binary(g)
    f, cache = backbone_step(h, x)
    h_next = np.where(g == 1.0, f, cache.h_prev)
    cache.g = g
    cache.h_next = h_next
    return h_next, cache


def backbone_jacobian(cache: StepCache) -> np.ndarray:
    """d f / d h_prev for a single (unbatched) step, shape [H, H]."""
    if cache.h_prev.ndim != 1:
        raise ValueError("Jacobians are defined per sequence; pass an unbatched step")
    p = cache.params
    if cache.kind == "rnn":
        return (1.0 - cache.f ** 2)[:, None] * p.W_hh
    H = p.H
    r, z, n, gh_n = (cache.heads[k] for k in ("r", "z", "n", "gh_n"))
    W_r, W_z, W_n = p.W_hh[:H], p.W_hh[H:2 * H], p.W_hh[2 * H:]
    dn = (1.0 - n ** 2)[:, None] * (r[:, None] * W_n + (gh_n * r * (1.0 - r))[:, None] * W_r)
    dz = (z * (1.0 - z))[:, None] * W_z
    return np.diag(1.0 - z) + (n - cache.h_prev)[:, None] * dz + z[:, None] * dn


def step_jacobian(cache: StepCache) -> np.ndarray:
    """Analytic d h_next / d h_prev. Rows of gated-off units are exactly e_i."""
    J_f = backbone_jacobian(cache)
    if cache.g is None:
        return J_f
    eye = np.eye(J_f.shape[0])
    return np.where(cache.g[:, None] == 1.0, J_f, eye)


def sensitivity_product(caches: list[StepCache], H: int | None = None) -> np.ndarray:
    """d h_t / d h_s = J_t ... J_{s+1} for a contiguous list of step caches."""
    if not caches:
        if H is None:
            raise ValueError("empty span needs H")
        return np.eye(H)
    M = np.eye(caches[0].h_prev.shape[-1])
    for c in caches:
        M = step_jacobian(c) @ M
    return M


MAX_EXPANSION_SPAN = 20


def ensemble_expand(caches: list[StepCache], H: int | None = None) -> np.ndarray:
    """Sum over all subsets S of the span of prod_{tau in S, descending} D_tau (J_f - I).

    Exponential in the span length; an oracle for :func:`sensitivity_product`.
    """
    span = len(caches)
    if span > MAX_EXPANSION_SPAN:
        raise ValueError(f"span {span} too long for subset expansion (max {MAX_EXPANSION_SPAN})")
    if span == 0:
        if H is None:
            raise ValueError("empty span needs H")
        return np.eye(H)
    n = caches[0].h_prev.shape[-1]
    eye = np.eye(n)
    terms = []
    for c in caches:
        d = np.ones(n) if c.g is None else c.g
        terms.append(d[:, None] * (backbone_jacobian(c) - eye))
    total = np.zeros((n, n))
    for size in range(span + 1):
        for subset in itertools.combinations(range(span), size):
            prod = eye
            for k in sorted(subset, reverse=True):
                prod = prod @ terms[k]
            total += prod
    return total
