"""Taped batched layer recurrences and their hand-written reverse pass.

Layers run time-major: inputs ``[T, B, D]``, states ``[T + 1, B, H]`` with
``h[0]`` the initial state. Gates are ``[T, 1, H]`` when they do not depend on
the input (shared by the batch) and ``[T, B, H]`` otherwise.

With hard gates the reverse recursion is

    dL/dh_{t-1} = dL/dh_t * (1 - g_t) + J_f^T (dL/dh_t * g_t) + dl_{t-1}/dh_{t-1}

so a gated-off unit hands its adjoint straight back to itself, and parameter
gradients only collect terms from open (t, i) pairs.  The gate generator sees
``(dL/dh_t) * (f_t - h_{t-1})`` through a sigmoid surrogate of the Heaviside.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gates as gates_mod
from .cells import GruParams, RnnParams, StepCache
from .gates import GateMask
from .numerics import sigmoid, sigmoid_fast
from .onepass import OnePassGru, normalize_units

KINDS = ("rnn", "gru", "su-rnn", "su-gru", "onepass-su-gru")


@dataclass
class Layer:
    kind: str
    params: RnnParams | GruParams | OnePassGru
    schedule: object = None
    soft: bool = False  # relaxed gates sigma(slope * a) in the forward pass

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}; expected one of {KINDS}")
        if self.gated and self.schedule is None:
            raise ValueError(f"{self.kind} layer needs a gate schedule")
        if self.kind == "onepass-su-gru" and not isinstance(self.params, OnePassGru):
            raise TypeError("onepass layer needs OnePassGru params")

    @property
    def gated(self) -> bool:
        return self.kind.startswith("su-") or self.kind.startswith("onepass")

    @property
    def backbone(self) -> str:
        return "rnn" if self.kind.endswith("rnn") else "gru"

    @property
    def H(self) -> int:
        return self.params.H

    @property
    def D(self) -> int:
        return self.params.D

    def param_blocks(self) -> dict[str, np.ndarray]:
        return self.params.blocks()

    def gate_values(self, mask: GateMask) -> np.ndarray:
        """Gate values fed to the recurrence: binary mask, or sigma(slope*a) when soft."""
        if self.soft:
            return sigmoid(gates_mod.schedule_slope(self.schedule) * mask.a)
        return mask.g


@dataclass
class Tape:
    """Forward cache of one layer over one batch of sequences."""

    layer: Layer
    x: np.ndarray                 # [T, B, D]
    h: np.ndarray                 # [T + 1, B, H]
    mask: GateMask | None = None  # [T, 1|B, H]
    g: np.ndarray | None = None   # gate values actually applied
    f: np.ndarray | None = None   # backbone output per step
    heads: dict = field(default_factory=dict)
    skip: np.ndarray | None = None  # one-pass skip drive 1 - g
    tables: tuple | None = None

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def record(self, t: int, b: int = 0) -> StepCache:
        """StepCache of step ``t`` (1-based) for sequence ``b``."""
        if not 1 <= t <= self.T:
            raise IndexError(t)
        k = t - 1
        heads = {name: arr[k, b] for name, arr in self.heads.items()}
        params = self.layer.params
        g = None
        if self.layer.kind in ("su-rnn", "su-gru"):
            g = self.g[k, min(b, self.g.shape[1] - 1)]
        if isinstance(params, OnePassGru):
            params = params.base
        kind = self.layer.backbone
        return StepCache(kind, self.h[k, b], self.x[k, b], self.f[k, b], self.h[k + 1, b],
                         g=g, heads=heads, params=params)


def _expand_mask(mask: GateMask) -> GateMask:
    """Lift [T, H] masks to [T, 1, H]."""
    if mask.g.ndim == 2:
        return GateMask(mask.g[:, None, :], mask.a[:, None, :], mask.meta)
    return mask


def layer_mask(layer: Layer, x: np.ndarray, tables=None) -> GateMask | None:
    if not layer.gated:
        return None
    T = x.shape[0]
    return _expand_mask(gates_mod.generate_mask(layer.schedule, T, layer.H, inputs=x,
                                                tables=tables))


def layer_forward(layer: Layer, x: np.ndarray, h0: np.ndarray | None = None,
                  mask: GateMask | None = None, tables=None) -> tuple[np.ndarray, Tape]:
    """Run one layer over ``x`` [T, B, D]; returns states [T, B, H] and the tape."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != layer.D:
        raise ValueError(f"layer expects [T, B, {layer.D}] input, got {x.shape}")
    T, B, _ = x.shape
    H = layer.H
    if layer.gated and mask is None:
        mask = layer_mask(layer, x, tables)
    if mask is not None:
        mask = _expand_mask(mask)
        if mask.g.shape[0] != T or mask.g.shape[2] != H:
            raise ValueError("gate mask shape does not match the layer")
    g = layer.gate_values(mask) if mask is not None else None
    hs = np.empty((T + 1, B, H))
    hs[0] = 0.0 if h0 is None else h0
    f_all = np.empty((T, B, H))
    tape = Tape(layer, x, hs, mask=mask, g=g, f=f_all, tables=tables)
    hard = layer.kind in ("su-rnn", "su-gru") and not layer.soft
    soft = layer.kind in ("su-rnn", "su-gru") and layer.soft

    if layer.backbone == "rnn":
        p = layer.params
        xw = x @ p.W_xh.T + p.b
        pre_all = np.empty((T, B, H))
        for t in range(T):
            h = hs[t]
            pre = xw[t] + h @ p.W_hh.T
            f = np.tanh(pre)
            pre_all[t] = pre
            f_all[t] = f
            if hard:
                hs[t + 1] = np.where(g[t] == 1.0, f, h)
            elif soft:
                hs[t + 1] = h + g[t] * (f - h)
            else:
                hs[t + 1] = f
        tape.heads = {"pre": pre_all}
        return hs[1:], tape

    normed = False
    if layer.kind == "onepass-su-gru":
        op = layer.params
        p = op.base
        skip = np.broadcast_to(1.0 - g, (T, B, H))
        normed = op.layer_norm
        if normed:
            # the shift C * skip is added after normalization
            gi_all = x @ op.W_x().T + p.b_ih
            zn_all, isd_all = np.empty((T, B, H)), np.empty((T, B, 1))
        else:
            gi_all = x @ op.W_x().T + skip @ op.W_g().T + p.b_ih
        tape.skip = skip
    else:
        p = layer.params
        gi_all = x @ p.W_ih.T + p.b_ih
    r_all, z_all, n_all, ghn_all = (np.empty((T, B, H)) for _ in range(4))
    for t in range(T):
        h = hs[t]
        gi = gi_all[t]
        gh = h @ p.W_hh.T + p.b_hh
        if normed:
            r = sigmoid_fast(gi[:, :H] + gh[:, :H])
            zn, isd = normalize_units(gi[:, H:2 * H] + gh[:, H:2 * H])
            z = sigmoid_fast(zn + op.C * skip[t])
            zn_all[t], isd_all[t] = zn, isd
        else:
            rz = sigmoid_fast(gi[:, :2 * H] + gh[:, :2 * H])
            r, z = rz[:, :H], rz[:, H:]
        gh_n = gh[:, 2 * H:]
        n = np.tanh(gi[:, 2 * H:] + r * gh_n)
        f = h + z * (n - h)
        r_all[t], z_all[t], n_all[t], ghn_all[t], f_all[t] = r, z, n, gh_n, f
        if hard:
            hs[t + 1] = np.where(g[t] == 1.0, f, h)
        elif soft:
            hs[t + 1] = h + g[t] * (f - h)
        else:
            hs[t + 1] = f
    tape.heads = {"r": r_all, "z": z_all, "n": n_all, "gh_n": ghn_all}
    if normed:
        tape.heads.update(zn=zn_all, inv_sd=isd_all)
    return hs[1:], tape


@dataclass
class LayerGrads:
    params: dict[str, np.ndarray]
    gate: dict[str, np.ndarray]
    d_a: np.ndarray | None        # dL/d gate preactivation [T, 1|B, H]
    dx: np.ndarray                # [T, B, D]
    adjoint: np.ndarray           # dL/dh_t for t = 0..T, [T + 1, B, H]


def layer_backward(tape: Tape, dh_direct: np.ndarray) -> LayerGrads:
    """Reverse pass of one layer given direct loss gradients dL/dh_t, t = 1..T."""
    layer = tape.layer
    T, B, _ = tape.x.shape
    H = layer.H
    if dh_direct.shape != (T, B, H):
        raise ValueError(f"expected state gradient {(T, B, H)}, got {dh_direct.shape}")
    hs, g = tape.h, tape.g
    su = layer.kind in ("su-rnn", "su-gru")
    adjoint = np.empty((T + 1, B, H))
    d_gate = np.zeros((T, B, H)) if layer.gated else None
    dh = np.zeros((B, H))

    if layer.backbone == "rnn":
        p = layer.params
        f_all = tape.f
        dpre_all = np.empty((T, B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + dh_direct[t]
            adjoint[t + 1] = dh
            if su:
                df = dh * g[t]
                d_gate[t] = dh * (f_all[t] - hs[t])
                carry = dh * (1.0 - g[t])
            else:
                df = dh
                carry = 0.0
            dpre = df * (1.0 - f_all[t] ** 2)
            dpre_all[t] = dpre
            dh = carry + dpre @ p.W_hh
        adjoint[0] = dh
        flat = dpre_all.reshape(T * B, H)
        grads = {"W_xh": flat.T @ tape.x.reshape(T * B, -1),
                 "W_hh": flat.T @ hs[:-1].reshape(T * B, H),
                 "b": flat.sum(axis=0)}
        dx = dpre_all @ p.W_xh
    else:
        onepass = layer.kind == "onepass-su-gru"
        p = layer.params.base if onepass else layer.params
        normed = onepass and layer.params.layer_norm
        r_all, z_all, n_all, ghn_all = (tape.heads[k] for k in ("r", "z", "n", "gh_n"))
        if normed:
            zn_all, isd_all = tape.heads["zn"], tape.heads["inv_sd"]
            d_shifted = np.empty((T, B, H))
        dgi_all = np.empty((T, B, 3 * H))
        dgh_all = np.empty((T, B, 3 * H))
        for t in range(T - 1, -1, -1):
            dh = dh + dh_direct[t]
            adjoint[t + 1] = dh
            h = hs[t]
            r, z, n, gh_n = r_all[t], z_all[t], n_all[t], ghn_all[t]
            if su:
                df = dh * g[t]
                d_gate[t] = dh * (tape.f[t] - h)
                carry = dh * (1.0 - g[t])
            else:
                df = dh
                carry = 0.0
            dpre_n = df * z * (1.0 - n * n)
            dpre_z = df * (n - h) * z * (1.0 - z)
            dpre_r = dpre_n * gh_n * r * (1.0 - r)
            if normed:
                d_shifted[t] = dpre_z
                zn = zn_all[t]
                dpre_z = isd_all[t] * (dpre_z - dpre_z.mean(axis=-1, keepdims=True)
                                       - zn * (dpre_z * zn).mean(axis=-1, keepdims=True))
            dgi = dgi_all[t]
            dgi[:, :H] = dpre_r
            dgi[:, H:2 * H] = dpre_z
            dgi[:, 2 * H:] = dpre_n
            dgh = dgh_all[t]
            dgh[:, :2 * H] = dgi[:, :2 * H]
            dgh[:, 2 * H:] = dpre_n * r
            dh = carry + df * (1.0 - z) + dgh @ p.W_hh
        adjoint[0] = dh
        dgi_flat = dgi_all.reshape(T * B, 3 * H)
        dgh_flat = dgh_all.reshape(T * B, 3 * H)
        grads = {"W_hh": dgh_flat.T @ hs[:-1].reshape(T * B, H),
                 "b_hh": dgh_flat.sum(axis=0),
                 "b_ih": dgi_flat.sum(axis=0)}
        if onepass:
            op = layer.params
            d_wx = dgi_flat.T @ tape.x.reshape(T * B, -1)
            # gradients into the wired gate-channel blocks are discarded
            grads["W_ih"] = np.concatenate([d_wx, np.zeros((3 * H, H))], axis=1)
            dx = dgi_all @ op.W_x()
            if normed:
                d_gate = -op.C * d_shifted
            else:
                d_gate = -(dgi_all @ op.W_g())
        else:
            grads["W_ih"] = dgi_flat.T @ tape.x.reshape(T * B, -1)
            dx = dgi_all @ p.W_ih

    d_a, gate_grads = None, {}
    if layer.gated:
        d_a, gate_grads = gate_backward(tape, d_gate)
    return LayerGrads(grads, gate_grads, d_a, dx, adjoint)


def gate_backward(tape: Tape, d_gate: np.ndarray):
    """Surrogate chain rule from dL/dg [T, B, H] to the gate generator parameters.

    For stepwise layers ``d_gate = (dL/dh_t) * (f_t - h_{t-1})``; the one-pass
    layer passes ``-dL/d(skip drive)``.
    """
    layer = tape.layer
    sched = layer.schedule
    a = tape.mask.a
    slope = gates_mod.schedule_slope(sched)
    if a.shape[1] == 1:
        d_gate = d_gate.sum(axis=1, keepdims=True)
    d_a = d_gate * gates_mod.surrogate_grad(a, slope)
    grads = {}
    if gates_mod.is_trainable(sched):
        if isinstance(sched, gates_mod.Rhythmic):
            grads = gates_mod.program_backward(sched.program, d_a[:, 0, :], tape.tables)
        elif isinstance(sched, gates_mod.LearnableTable):
            grads = {"logits": d_a[:, 0, :].T.copy()}
    return d_a, grads


def grad_trace(adjoint: np.ndarray) -> np.ndarray:
    """Per-step adjoint norms ||dL/dh_tau||_2 for tau = 0..T, averaged over the batch.

    Returns [T + 1, 2] rows of (tau, norm); zeros stay zeros.
    """
    norms = np.linalg.norm(adjoint, axis=-1).mean(axis=-1)
    return np.column_stack([np.arange(adjoint.shape[0]), norms])


def nonidentity_count(tape: Tape) -> tuple[np.ndarray, float]:
    """Open-gate count per unit (batch-averaged) and the update rate."""
    if tape.g is None:
        counts = np.full(tape.layer.H, float(tape.T))
        return counts, 1.0
    g = tape.mask.g
    counts = g.sum(axis=0).mean(axis=0)
    return counts, float(g.mean())


@dataclass
class GradReport:
    params: list[dict[str, np.ndarray]]
    gate: list[dict[str, np.ndarray]]
    readout: dict[str, np.ndarray]
    adjoint_norms: list[np.ndarray]     # per layer, [T + 1, 2]
    nonidentity: list[np.ndarray]       # per layer, [H]
    update_rates: list[float]
