"""Binary update gates: rhythmic generator, Heaviside + surrogate, ablation schedules.

Time is 1-indexed throughout: step ``t`` of a length-``T`` sequence runs over
``1..T`` and row ``t - 1`` of every ``[T, ...]`` array.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, sigmoid

DEFAULT_SLOPE = 2.0


@dataclass
class GateProgram:
    """Sinusoidal-mixture gate generator for one layer of ``H`` units."""

    omega: np.ndarray  # [K], shared across the layer
    alpha: np.ndarray  # [H, K]
    phi: np.ndarray    # [H, K]
    bias: np.ndarray   # [H]
    slope: float = DEFAULT_SLOPE
    learn_omega: bool = False
    learn_alpha: bool = True
    learn_phi: bool = True
    learn_bias: bool = True

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=np.float64))
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64)
        K = self.omega.shape[0]
        if K < 1:
            raise ValueError("GateProgram needs at least one frequency")
        if np.any(self.omega <= 0) or np.any(np.diff(self.omega) <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        if self.slope <= 0:
            raise ValueError("surrogate slope must be positive")
        H = self.bias.shape[0]
        if self.alpha.shape != (H, K) or self.phi.shape != (H, K):
            raise ValueError(f"alpha/phi must be [{H}, {K}]")

    @property
    def H(self) -> int:
        return self.bias.shape[0]

    @property
    def K(self) -> int:
        return self.omega.shape[0]

    def learnable(self) -> dict[str, np.ndarray]:
        names = [("omega", self.learn_omega), ("alpha", self.learn_alpha),
                 ("phi", self.learn_phi), ("bias", self.learn_bias)]
        return {n: getattr(self, n) for n, on in names if on}

    def copy(self) -> "GateProgram":
        return GateProgram(self.omega.copy(), self.alpha.copy(), self.phi.copy(),
                           self.bias.copy(), self.slope, self.learn_omega,
                           self.learn_alpha, self.learn_phi, self.learn_bias)


def init_program(rng: Rng, H: int, max_len: int, K: int | None = None,
                 slope: float = DEFAULT_SLOPE, learn_omega: bool = False,
                 bias: float = 0.0, amp_scale: float = 1.0,
                 target_rate: float | None = None) -> GateProgram:
    """Log-spaced frequencies on [2*pi/max_len, pi]; alpha ~ N(0, 1/sqrt(K)),
    phases uniform on [0, 2*pi).

    With ``target_rate`` the per-unit bias is set so that each unit opens on
    that fraction of steps 1..max_len (overrides ``bias``).
    """
    K = H if K is None else K
    if K > 1 and max_len < 3:
        raise ValueError("a multi-frequency grid needs max_len >= 3")
    if K == 1:
        omega = np.array([2 * np.pi / max_len])
    else:
        omega = np.geomspace(2 * np.pi / max_len, np.pi, K)
    alpha = amp_scale * rng.normal(0.0, 1.0 / np.sqrt(K), (H, K))
    phi = rng.uniform(0.0, 2 * np.pi, (H, K))
    prog = GateProgram(omega, alpha, phi, np.full(H, float(bias)), slope,
                       learn_omega=learn_omega)
    if target_rate is not None:
        prog.bias[:] = rate_bias(prog, max_len, target_rate)
    return prog


def rate_bias(prog: GateProgram, T: int, rate: float) -> np.ndarray:
    """Per-unit bias opening exactly round(rate * T) of the steps 1..T."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("target rate must lie in (0, 1]")
    a = preactivation_table(prog, T) - prog.bias
    k = int(round(rate * T))
    if k >= T:
        return -a.min(axis=0) + 1.0
    srt = -np.sort(-a, axis=0)  # descending per unit
    # threshold halfway between the k-th and (k+1)-th largest values
    return -0.5 * (srt[k - 1] + srt[k]) if k > 0 else -srt[0] - 1.0


def preactivation(prog: GateProgram, t: int) -> np.ndarray:
    """Gate preactivation for all units at step ``t`` (direct formula)."""
    if t < 1:
        raise ValueError("gate time index is 1-based")
    return prog.bias + np.sum(prog.alpha * np.sin(prog.omega * t + prog.phi), axis=1)


def time_tables(omega: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Precomputed ``sin(omega_k t)`` and ``cos(omega_k t)`` for t = 1..T, shape [T, K]."""
    wt = np.outer(np.arange(1, T + 1, dtype=np.float64), omega)
    return np.sin(wt), np.cos(wt)


def preactivation_table(prog: GateProgram, T: int, tables=None, exact: bool = False) -> np.ndarray:
    """All preactivations [T, H].

    The default evaluates the mixture through the angle-sum identity from the
    precomputed sin/cos tables: two [T,K]x[K,H] products, agreeing with
    :func:`preactivation` to ~1e-13. ``exact=True`` repeats the direct formula's
    arithmetic over a precomputed ``omega * t`` table and matches it bitwise,
    at O(T H K) sine evaluations.
    """
    if exact:
        wt = np.arange(1, T + 1, dtype=np.float64)[:, None] * prog.omega[None, :]
        return prog.bias + np.sum(prog.alpha * np.sin(wt[:, None, :] + prog.phi), axis=-1)
    s, c = tables if tables is not None else time_tables(prog.omega, T)
    amp_c = prog.alpha * np.cos(prog.phi)
    amp_s = prog.alpha * np.sin(prog.phi)
    return prog.bias + s @ amp_c.T + c @ amp_s.T


def program_backward(prog: GateProgram, d_a: np.ndarray, tables=None) -> dict[str, np.ndarray]:
    """Chain a gradient w.r.t. preactivations [T, H] into the program parameters."""
    T = d_a.shape[0]
    s, c = tables if tables is not None else time_tables(prog.omega, T)
    cos_p, sin_p = np.cos(prog.phi), np.sin(prog.phi)
    das = d_a.T @ s  # [H, K]
    dac = d_a.T @ c
    # d/d alpha: sin(wt + phi) = s cos(phi) + c sin(phi)
    grads = {"bias": d_a.sum(axis=0),
             "alpha": das * cos_p + dac * sin_p,
             "phi": prog.alpha * (dac * cos_p - das * sin_p)}
    if prog.learn_omega:
        tt = np.arange(1, T + 1, dtype=np.float64)[:, None]
        das_t = d_a.T @ (s * tt)
        dac_t = d_a.T @ (c * tt)
        grads["omega"] = np.sum(prog.alpha * (dac_t * cos_p - das_t * sin_p), axis=0)
    return {k: v for k, v in grads.items() if k in prog.learnable()}


def binarize(a) -> np.ndarray:
    """Strict Heaviside: 1 where a > 0, 0 otherwise (ties carry)."""
    return (np.asarray(a) > 0).astype(np.float64)


def surrogate_grad(a, slope: float = DEFAULT_SLOPE):
    """Derivative of the tempered sigmoid sigma(slope * a)."""
    if slope <= 0:
        raise ValueError("surrogate slope must be positive")
    # evaluated at |a| so the result is exactly even in a
    s = sigmoid(slope * np.abs(np.asarray(a, dtype=np.float64)))
    return slope * s * (1.0 - s)


# -- schedules --------------------------------------------------------------

@dataclass
class Rhythmic:
    program: GateProgram
    frozen: bool = False


def FixedRandomRhythmic(program: GateProgram) -> Rhythmic:
    return Rhythmic(program, frozen=True)


@dataclass
class EveryKSteps:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("EveryKSteps needs k >= 1")


@dataclass
class FixedRandomBernoulli:
    p: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("Bernoulli rate must lie in [0, 1]")


@dataclass
class InputThreshold:
    pass


@dataclass
class LearnableTable:
    logits: np.ndarray  # [H, T]
    slope: float = DEFAULT_SLOPE
    frozen: bool = False

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)


@dataclass
class Dense:
    """Every unit updates every step; the ungated backbone."""


@dataclass
class GateMask:
    """Binary mask ``g`` and the preactivations it was thresholded from.

    Shapes are [T, H] for input-independent schedules and [T, B, H] for
    input-driven ones.
    """

    g: np.ndarray
    a: np.ndarray
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        if not np.array_equal(self.g, binarize(self.a)):
            raise AssertionError("gate mask is not the Heaviside of its preactivations")


def generate_mask(schedule, T: int, H: int, inputs: np.ndarray | None = None,
                  tables=None) -> GateMask:
    """Build the [T, H] (or [T, B, H]) mask for one layer and sequence length.

    ``inputs`` is the layer input stream [T, B, D] and is only read by
    :class:`InputThreshold`.
    """
    if T < 1 or H < 1:
        raise ValueError("T and H must be positive")
    if isinstance(schedule, Rhythmic):
        if schedule.program.H != H:
            raise ValueError("gate program width does not match layer width")
        a = preactivation_table(schedule.program, T, tables)
    elif isinstance(schedule, EveryKSteps):
        t = np.arange(1, T + 1)
        a = np.where(t % schedule.k == 0, 1.0, -1.0)[:, None].repeat(H, axis=1)
    elif isinstance(schedule, FixedRandomBernoulli):
        u = Rng(schedule.seed).uniform(0.0, 1.0, (T, H))
        a = schedule.p - u
    elif isinstance(schedule, InputThreshold):
        if inputs is None:
            raise ValueError("InputThreshold gating needs the input stream")
        peak = np.max(inputs, axis=-1)  # [T, B]
        a = np.repeat(peak[..., None], H, axis=-1)
    elif isinstance(schedule, LearnableTable):
        if schedule.logits.shape != (H, T):
            raise ValueError(f"table is {schedule.logits.shape}, need {(H, T)}")
        a = schedule.logits.T.copy()
    elif isinstance(schedule, Dense):
        a = np.ones((T, H))
    else:
        raise TypeError(f"unknown gate schedule {schedule!r}")
    return GateMask(binarize(a), a)


def schedule_slope(schedule) -> float:
    if isinstance(schedule, Rhythmic):
        return schedule.program.slope
    if isinstance(schedule, LearnableTable):
        return schedule.slope
    return DEFAULT_SLOPE


def is_trainable(schedule) -> bool:
    return (isinstance(schedule, Rhythmic) and not schedule.frozen) or \
        (isinstance(schedule, LearnableTable) and not schedule.frozen)


def update_rate(mask) -> float:
    """Fraction of open (t, i) pairs."""
    g = mask.g if isinstance(mask, GateMask) else np.asarray(mask)
    if g.size == 0:
        raise ValueError("empty mask")
    return float(g.mean())


def dump_mask_csv(mask: GateMask, path, batch_index: int = 0) -> None:
    """Write ``t,i,a,g`` rows (t 1-based) for spatio-temporal plots."""
    g, a = mask.g, mask.a
    if g.ndim == 3:
        g, a = g[:, batch_index], a[:, batch_index]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "i", "a", "g"])
        for t in range(g.shape[0]):
            for i in range(g.shape[1]):
                w.writerow([t + 1, i, repr(float(a[t, i])), int(g[t, i])])
