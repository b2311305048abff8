"""Instruments for gradient profiles, effective depth, retention, PCA and gate dumps.

Everything here emits plain arrays and CSV files; plotting lives in :mod:`surnn.plots`.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gates as gates_mod
from .bptt import Layer, grad_trace, layer_backward, layer_forward
from .cells import RnnParams, rnn_step, selective_step, sensitivity_product
from .numerics import Rng, orthogonal, spectral_norm
from .onepass import OnePassGru, effective_update
from .tasks import CopyTask

log = logging.getLogger(__name__)


# -- gradient profiles --------------------------------------------------------

@dataclass
class TraceBundle:
    """Adjoint-norm series keyed by (model tag, delay)."""

    traces: dict = field(default_factory=dict)   # (tag, T) -> [T + 1, 2]
    gate_tags: dict = field(default_factory=dict)

    def add(self, tag: str, delay: int, trace: np.ndarray, gate_tag: str = "") -> None:
        if (tag, delay) in self.traces:
            raise ValueError(f"duplicate series for {tag} at delay {delay}")
        self.traces[(tag, delay)] = trace
        self.gate_tags[tag] = gate_tag

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "gate", "delay", "tau", "grad_norm"])
            for (tag, T), tr in sorted(self.traces.items()):
                for tau, norm in tr:
                    w.writerow([tag, self.gate_tags.get(tag, ""), T, int(tau), repr(float(norm))])


def _gate_tag(model) -> str:
    s = model.layers[0].schedule
    return "dense" if s is None else type(s).__name__


def profile_once(model, batch, layer: int = -1) -> np.ndarray:
    """Forward + backward on one batch; the adjoint-norm trace of ``layer``."""
    from .trainer import backward_model, compute_loss, forward_model

    class _Loss:
        loss = "ce"

    fwd = forward_model(model, batch.inputs)
    _, d_out = compute_loss(_Loss, fwd.outputs, batch)
    report = backward_model(model, fwd, d_out)
    return report.adjoint_norms[layer]


def run_grad_profile(models: dict, delays, batch_size: int = 16, seed: int = 0,
                     layer: int = -1) -> TraceBundle:
    """Copying-memory gradient profiles for every (model, delay) pair."""
    bundle = TraceBundle()
    for T in delays:
        batch = CopyTask(T).sample(Rng(seed).spawn(T), batch_size)
        for tag, model in models.items():
            bundle.add(tag, T, profile_once(model, batch, layer), _gate_tag(model))
    return bundle


def trace_ratio(trace: np.ndarray) -> float:
    """max / min adjoint norm over the series (inf when a norm is zero)."""
    norms = trace[:, 1]
    lo = norms.min()
    return math.inf if lo == 0 else float(norms.max() / lo)


def trailing_fraction(trace: np.ndarray, span: int = 10) -> float:
    """Mean norm over the earliest ``span`` steps relative to the latest ``span``."""
    norms = trace[:, 1]
    head = norms[-span:].mean()
    return float(norms[:span].mean() / head) if head > 0 else 0.0


# -- effective depth ----------------------------------------------------------

@dataclass
class DepthFit:
    samples: np.ndarray  # [n, 2] rows (p * T, log ||dh_T / dh_0||)
    slope: float
    intercept: float
    r2: float

    def __post_init__(self):
        if self.samples.shape[0] < 5:
            raise ValueError("a depth fit needs at least 5 samples")


def scaled_backbone(rng: Rng, H: int, rho: float) -> RnnParams:
    """Vanilla RNN whose recurrent matrix has every singular value equal to ``rho``.

    Input weights and bias are zero, so from h = 0 every step has J_f = W_hh.
    """
    Q = orthogonal(rng, H)
    W = rho * Q / spectral_norm(Q)
    return RnnParams(np.zeros((H, 1)), W, np.zeros(H))


def sensitivity_norm(params: RnnParams, mask: np.ndarray) -> float:
    """||dh_T / dh_0||_2 of the selective vanilla RNN under ``mask`` [T, H], from h = 0."""
    T, H = mask.shape
    h = np.zeros(H)
    x = np.zeros(1)
    caches = []
    for t in range(T):
        h, c = selective_step(lambda hh, xx: rnn_step(params, hh, xx), h, x, mask[t])
        caches.append(c)
    return float(np.linalg.norm(sensitivity_product(caches), 2))


def fit_line(xs, ys) -> DepthFit:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 5:
        raise ValueError("a depth fit needs at least 5 samples")
    if np.var(xs) == 0.0:
        raise ValueError("degenerate fit: all samples share the same update count")
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = np.sum((ys - ys.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return DepthFit(np.column_stack([xs, ys]), float(slope), float(intercept), float(r2))


def fit_effective_depth(rho: float = 0.9, rates=(0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
                        T: int = 200, H: int = 32, seeds=(0, 1, 2),
                        schedule: str = "bernoulli") -> DepthFit:
    """Regress log ||dh_T/dh_0|| on the number of updates p * T.

    ``schedule`` is ``bernoulli`` (independent per (t, i) draws) or ``rhythmic``
    (a random gate program whose bias is tuned to the target rate).
    Rate 0 is skipped: its log-norm is exactly 0 and carries no slope information.
    """
    xs, ys = [], []
    for seed in seeds:
        params = scaled_backbone(Rng(seed), H, rho)
        for p in rates:
            if p <= 0:
                continue
            mask = depth_mask(schedule, p, T, H, seed)
            xs.append(mask.mean() * T)
            ys.append(math.log(sensitivity_norm(params, mask)))
    return fit_line(xs, ys)


def depth_mask(schedule: str, p: float, T: int, H: int, seed: int) -> np.ndarray:
    if schedule == "bernoulli":
        return gates_mod.generate_mask(gates_mod.FixedRandomBernoulli(p, seed + 1000), T, H).g
    if schedule == "rhythmic":
        prog = gates_mod.init_program(Rng(seed).spawn(7), H, T)
        a = gates_mod.preactivation_table(prog, T)
        # per-unit bias that opens exactly the target fraction of steps
        k = int(round(p * T))
        if k >= T:
            return np.ones((T, H))
        thresh = -np.sort(-a, axis=0)[k]
        return (a > thresh).astype(np.float64)
    raise ValueError(f"unknown depth schedule {schedule!r}")


# -- retention audit ----------------------------------------------------------

@dataclass
class RetentionViolation:
    unit: int
    start: int       # first carry step, 1-based
    length: int
    retained: float
    min_margin: float


@dataclass
class RetentionReport:
    runs: list           # (unit, start, length, retained, min_margin)
    violations: list
    rho: float
    checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def carry_runs(mask: np.ndarray):
    """Maximal runs of g == 0 per unit: yields (unit, start_index, length), 0-based start."""
    T, H = mask.shape
    for i in range(H):
        col = mask[:, i]
        t = 0
        while t < T:
            if col[t] == 0:
                s = t
                while t < T and col[t] == 0:
                    t += 1
                yield i, s, t - s
            else:
                t += 1


def audit_retention(params: OnePassGru, z_pre: np.ndarray, mask: np.ndarray, rho: float,
                    a_min: float = 0.0, design_len: int | None = None) -> RetentionReport:
    """Measured prod(1 - z') over every carry run against the 1 - rho guarantee.

    ``z_pre`` [T, H] is the unshifted z preactivation. The guarantee covers runs
    whose margins ``a = -z_pre`` stay at or above ``a_min`` and whose length does
    not exceed the design length; runs breaking the margin are reported but not
    counted as violations of the bound.
    """
    z_eff = effective_update(z_pre, mask, params.C)
    runs, violations = [], []
    checked = 0
    for i, s, L in carry_runs(mask):
        seg = z_eff[s:s + L, i]
        retained = float(np.prod(1.0 - seg))
        margin = float(np.min(-z_pre[s:s + L, i]))
        runs.append((i, s + 1, L, retained, margin))
        if margin >= a_min and (design_len is None or L <= design_len):
            checked += 1
            if retained < 1.0 - rho:
                violations.append(RetentionViolation(i, s + 1, L, retained, margin))
    return RetentionReport(runs, violations, rho, checked)


def onepass_z_preactivations(params: OnePassGru, xs: np.ndarray, gs: np.ndarray,
                             h0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unshifted z preactivations and states of a wired layer over one stream [T, D]."""
    from .onepass import onepass_forward

    hs, caches = onepass_forward(params, xs, gs, h0)
    C = params.C
    z_pre = np.stack([c.heads["z_pre"] - C * (1.0 - c.heads["gate"]) for c in caches])
    return z_pre, hs


# -- PCA -------------------------------------------------------------------------

@dataclass
class Pca:
    projected: np.ndarray   # [B, T, k]
    components: np.ndarray  # [k, H]
    eigenvalues: np.ndarray  # all eigenvalues, descending
    mean: np.ndarray


def pca_trajectories(states: np.ndarray, k: int = 2) -> Pca:
    """Project hidden states [B, T, H] onto the top-k covariance eigenvectors.

    Signs are fixed so each component's largest-magnitude entry is positive.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3:
        raise ValueError("expected states [B, T, H]")
    B, T, H = states.shape
    if B * T < k:
        raise ValueError("need at least k samples")
    X = states.reshape(B * T, H)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (B * T)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, V = np.clip(w[order], 0.0, None), V[:, order]
    rank = int(np.sum(w > 1e-12 * max(w[0], 1e-300)))
    if rank < k:
        log.warning("covariance has rank %d < %d; returning %d components", rank, k, max(rank, 0))
        k_eff = rank
    else:
        k_eff = k
    comps = V[:, :k_eff].T.copy()
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1.0
    proj = (Xc @ comps.T).reshape(B, T, k_eff)
    return Pca(proj, comps, w, mean)


def dump_pca_csv(pca: Pca, labels, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        k = pca.projected.shape[2]
        w.writerow(["seq", "label", "t"] + [f"pc{j + 1}" for j in range(k)])
        for b in range(pca.projected.shape[0]):
            for t in range(pca.projected.shape[1]):
                w.writerow([b, labels[b] if labels is not None else "", t + 1]
                           + [repr(float(v)) for v in pca.projected[b, t]])


# -- spatio-temporal dumps ----------------------------------------------------------

def spatiotemporal_maps(model, inputs: np.ndarray, dims: tuple[int, int]) -> list[dict]:
    """Per layer: batch/unit-mean gate activity and signed increments, reshaped to ``dims``."""
    from .trainer import forward_model

    T = inputs.shape[1]
    if int(np.prod(dims)) != T:
        raise ValueError(f"sequence length {T} does not factor as {dims}")
    fwd = forward_model(model, inputs)
    out = []
    for tape in fwd.tapes:
        dh = np.diff(tape.h, axis=0)           # [T, B, H] increments h_t - h_{t-1}
        inc = dh.mean(axis=(1, 2))
        g = np.ones((T, 1, 1)) if tape.mask is None else tape.mask.g
        act = g.mean(axis=(1, 2))
        out.append({"gate": act.reshape(dims), "increment": inc.reshape(dims),
                    "increment_abs": np.abs(dh).mean(axis=(1, 2)).reshape(dims)})
    return out


def dump_spatiotemporal(model, inputs: np.ndarray, dims: tuple[int, int], out_dir,
                        header: str | None = None) -> list[Path]:
    """Write ``layer{l}_{gate,increment}.csv`` grids (rows x cols as in ``dims``)."""
    maps = spatiotemporal_maps(model, inputs, dims)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for l, m in enumerate(maps):
        for name in ("gate", "increment"):
            p = out_dir / f"layer{l}_{name}.csv"
            with open(p, "w", newline="") as f:
                if header:
                    f.write(f"# {header}\n")
                w = csv.writer(f)
                w.writerow(["row"] + [f"c{j}" for j in range(dims[1])])
                for r, row in enumerate(m[name]):
                    w.writerow([r] + [repr(float(v)) for v in row])
            paths.append(p)
    return paths
