"""Stacked recurrent models, losses, Adam and the training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import gates as gates_mod
from .bptt import GradReport, Layer, Tape, grad_trace, layer_backward, layer_forward, layer_mask, nonidentity_count
from .cells import init_gru, init_rnn
from .numerics import Rng, load_checkpoint, save_checkpoint
from .onepass import OnePassGru, RetentionSpec, enforce_wiring, init_onepass, retention_bound_C

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# -- configuration ----------------------------------------------------------

@dataclass
class LayerConfig:
    kind: str = "su-gru"
    H: int = 128
    gate: dict = field(default_factory=lambda: {"type": "rhythmic"})
    C: float | None = None      # one-pass wiring constant; None -> retention bound
    soft: bool = False
    layer_norm: bool = False    # one-pass only: normalize the z preactivation


@dataclass
class ModelConfig:
    layers: list[LayerConfig]
    input_dim: int
    outputs: int
    max_len: int = 1024
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerConfig) else LayerConfig(**l) for l in self.layers]
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for l in self.layers:
            if l.H < 1:
                raise ValueError("layer width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def build_schedule(gate: dict, H: int, T: int, rng: Rng):
    """Gate schedule from its config dict (``type`` plus variant options)."""
    kind = gate.get("type", "rhythmic")
    if kind in ("rhythmic", "fixed-rhythmic"):
        prog = gates_mod.init_program(
            rng, H, gate.get("max_len", T), K=gate.get("K"),
            slope=gate.get("slope", gates_mod.DEFAULT_SLOPE),
            learn_omega=gate.get("learn_omega", False),
            bias=gate.get("bias", 0.0), amp_scale=gate.get("amp_scale", 1.0),
            target_rate=gate.get("target_rate"))
        return gates_mod.Rhythmic(prog, frozen=(kind == "fixed-rhythmic"))
    if kind == "every-k":
        return gates_mod.EveryKSteps(int(gate.get("k", 3)))
    if kind == "bernoulli":
        return gates_mod.FixedRandomBernoulli(float(gate.get("p", 0.5)),
                                              int(gate.get("seed", rng.integers(0, 2**31))))
    if kind == "input-threshold":
        return gates_mod.InputThreshold()
    if kind == "table":
        logits = rng.normal(0.0, 1.0, (H, gate.get("length", T)))
        return gates_mod.LearnableTable(logits, gate.get("slope", gates_mod.DEFAULT_SLOPE))
    if kind == "dense":
        return gates_mod.Dense()
    raise ValueError(f"unknown gate type {kind!r}")


class Model:
    """Stacked recurrent layers with a linear readout on the top layer."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        self.layers: list[Layer] = []
        D = cfg.input_dim
        for i, lc in enumerate(cfg.layers):
            lr = rng.spawn(i)
            if lc.kind in ("rnn", "su-rnn"):
                params = init_rnn(lr, D, lc.H)
            elif lc.kind in ("gru", "su-gru"):
                params = init_gru(lr, D, lc.H)
            elif lc.kind == "onepass-su-gru":
                C = lc.C if lc.C is not None else retention_bound_C(RetentionSpec(cfg.max_len, 0.01, 0.0))
                params = init_onepass(lr, D, lc.H, C, layer_norm=lc.layer_norm)
            else:
                raise ValueError(f"unknown cell kind {lc.kind!r}")
            schedule = None
            if lc.kind.startswith(("su-", "onepass")):
                schedule = build_schedule(lc.gate, lc.H, cfg.max_len, lr.spawn(1000))
            self.layers.append(Layer(lc.kind, params, schedule, soft=lc.soft))
            D = lc.H
        bound = 1.0 / math.sqrt(D)
        ro = rng.spawn(10_000)
        self.W_o = ro.uniform(-bound, bound, (cfg.outputs, D))
        self.b_o = np.zeros(cfg.outputs)
        self._tables: dict = {}

    # parameters -----------------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.param_blocks().items():
                out[f"layer{i}.{k}"] = v
            if layer.gated and gates_mod.is_trainable(layer.schedule):
                for k, v in self._gate_params(layer.schedule).items():
                    out[f"layer{i}.gate.{k}"] = v
        out["readout.W"] = self.W_o
        out["readout.b"] = self.b_o
        return out

    @staticmethod
    def _gate_params(schedule) -> dict[str, np.ndarray]:
        if isinstance(schedule, gates_mod.Rhythmic):
            return schedule.program.learnable()
        if isinstance(schedule, gates_mod.LearnableTable):
            return {"logits": schedule.logits}
        return {}

    def all_blocks(self) -> dict[str, np.ndarray]:
        """Every array needed to restore the model, frozen gate state included."""
        out = dict(self.named_params())
        for i, layer in enumerate(self.layers):
            s = layer.schedule
            if isinstance(s, gates_mod.Rhythmic):
                p = s.program
                for k in ("omega", "alpha", "phi", "bias"):
                    out[f"layer{i}.gate.{k}"] = getattr(p, k)
            elif isinstance(s, gates_mod.LearnableTable):
                out[f"layer{i}.gate.logits"] = s.logits
        return out

    def load_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        for name, arr in self.all_blocks().items():
            if name in blocks:
                arr[...] = blocks[name]

    def tables(self, layer: Layer, T: int):
        s = layer.schedule
        if not isinstance(s, gates_mod.Rhythmic):
            return None
        key = (id(s.program), T)
        cached = self._tables.get(key)
        if cached is None or (s.program.learn_omega and cached[0] != s.program.omega.tobytes()):
            cached = (s.program.omega.tobytes(), gates_mod.time_tables(s.program.omega, T))
            self._tables[key] = cached
        return cached[1]

    def enforce_constraints(self) -> None:
        for layer in self.layers:
            if isinstance(layer.params, OnePassGru):
                enforce_wiring(layer.params)


@dataclass
class Forward:
    outputs: np.ndarray          # [B, T, O]
    tapes: list[Tape]
    dropout_masks: list
    states: list[np.ndarray]     # per layer [T, B, H]


def forward_model(model: Model, inputs: np.ndarray, rng: Rng | None = None,
                  train: bool = False) -> Forward:
    """Run the stack on ``inputs`` [B, T, D]; gate masks are drawn once per batch."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[2] != model.cfg.input_dim:
        raise ValueError(f"expected [B, T, {model.cfg.input_dim}] inputs, got {inputs.shape}")
    x = np.ascontiguousarray(inputs.transpose(1, 0, 2))
    T = x.shape[0]
    tapes, drops, states = [], [], []
    p = model.cfg.dropout
    for i, layer in enumerate(model.layers):
        tables = model.tables(layer, T)
        mask = layer_mask(layer, x, tables)
        h, tape = layer_forward(layer, x, mask=mask, tables=tables)
        tapes.append(tape)
        states.append(h)
        drop = None
        if train and p > 0 and i < len(model.layers) - 1:
            drop = (rng.uniform(0.0, 1.0, h.shape) >= p) / (1.0 - p)
            h = h * drop
        drops.append(drop)
        x = h
    out = x @ model.W_o.T + model.b_o
    return Forward(out.transpose(1, 0, 2), tapes, drops, states)


def backward_model(model: Model, fwd: Forward, d_out: np.ndarray) -> GradReport:
    """Reverse pass from dL/d outputs [B, T, O] to every parameter."""
    d_out_t = np.ascontiguousarray(d_out.transpose(1, 0, 2))  # [T, B, O]
    T, B, O = d_out_t.shape
    top = fwd.states[-1]
    if fwd.dropout_masks[-1] is not None:
        top = top * fwd.dropout_masks[-1]
    readout = {"readout.W": d_out_t.reshape(T * B, O).T @ top.reshape(T * B, -1),
               "readout.b": d_out_t.reshape(T * B, O).sum(axis=0)}
    dh = d_out_t @ model.W_o
    params, gate, norms, counts, rates = [], [], [], [], []
    for i in range(len(model.layers) - 1, -1, -1):
        if fwd.dropout_masks[i] is not None:
            dh = dh * fwd.dropout_masks[i]
        lg = layer_backward(fwd.tapes[i], dh)
        params.append(lg.params)
        gate.append(lg.gate)
        norms.append(grad_trace(lg.adjoint))
        c, rate = nonidentity_count(fwd.tapes[i])
        counts.append(c)
        rates.append(rate)
        dh = lg.dx
    rev = slice(None, None, -1)
    return GradReport(params[rev], gate[rev], readout, norms[rev], counts[rev], rates[rev])


def flat_grads(model: Model, report: GradReport) -> dict[str, np.ndarray]:
    out = {}
    for i, (pg, gg) in enumerate(zip(report.params, report.gate)):
        for k, v in pg.items():
            out[f"layer{i}.{k}"] = v
        for k, v in gg.items():
            out[f"layer{i}.gate.{k}"] = v
    out.update(report.readout)
    return out


# -- losses -----------------------------------------------------------------

def _check_mask(mask):
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        raise ValueError("loss mask selects no positions")
    return mask, n


def loss_ce(outputs, targets, mask):
    """Mean softmax cross-entropy over masked positions; returns (loss, dL/d outputs)."""
    mask, n = _check_mask(mask)
    lse = logsumexp(outputs, axis=-1, keepdims=True)
    logp = outputs - lse
    tgt = np.asarray(targets).astype(np.int64)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked * mask) / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt[..., None],
                      np.take_along_axis(grad, tgt[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask / n)[..., None]
    return loss, grad


def loss_mse(outputs, targets, mask):
    """Mean squared error over masked positions of a single-output readout."""
    mask, n = _check_mask(mask)
    diff = outputs[..., 0] - np.asarray(targets, dtype=np.float64)
    loss = float(np.sum(diff ** 2 * mask) / n)
    grad = (2.0 * diff * mask / n)[..., None]
    return loss, grad


def accuracy(outputs, targets, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    pred = outputs.argmax(axis=-1)
    return float(np.mean(pred[mask] == np.asarray(targets)[mask]))


# -- optimizer --------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0
    gate_weight_decay: float = 0.0  # decoupled decay on gate-generator parameters only
    gate_clip: float | None = None  # gate params are clipped separately, never by `clip`
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(opt: OptimState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              model: Model | None = None) -> bool:
    """Clip, then one bias-corrected Adam update in place. Returns False if skipped."""
    gate_names = {k for k in grads if ".gate." in k}
    norm = global_norm({k: g for k, g in grads.items() if k not in gate_names})
    gate_norm = global_norm({k: grads[k] for k in gate_names})
    if not (math.isfinite(norm) and math.isfinite(gate_norm)):
        log.warning("non-finite gradient norm at step %d; update skipped", opt.step)
        return False
    scale = gate_scale = 1.0
    if opt.clip is not None and norm > opt.clip:
        scale = opt.clip / norm
    if opt.gate_clip is not None and gate_norm > opt.gate_clip:
        gate_scale = opt.gate_clip / gate_norm
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        g = g * (gate_scale if name in gate_names else scale)
        m = opt.m.setdefault(name, np.zeros_like(p))
        v = opt.v.setdefault(name, np.zeros_like(p))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / b1c) / (np.sqrt(v / b2c) + opt.eps)
        if opt.gate_weight_decay and ".gate." in name:
            p -= opt.lr * opt.gate_weight_decay * p
    if model is not None:
        model.enforce_constraints()
    return True


# -- training ---------------------------------------------------------------

def compute_loss(task, outputs, batch):
    if task.loss == "ce":
        return loss_ce(outputs, batch.targets, batch.loss_mask)
    return loss_mse(outputs, batch.targets, batch.loss_mask)


def evaluate(model: Model, task, batch, chunk: int = 256) -> dict:
    losses, metrics, weights = [], [], []
    B = batch.inputs.shape[0]
    for s in range(0, B, chunk):
        sub = batch.slice(s, min(B, s + chunk))
        fwd = forward_model(model, sub.inputs)
        loss, _ = compute_loss(task, fwd.outputs, sub)
        w = float(np.sum(sub.loss_mask))
        losses.append(loss * w)
        weights.append(w)
        if task.loss == "ce":
            metrics.append(accuracy(fwd.outputs, sub.targets, sub.loss_mask) * w)
    W = sum(weights)
    out = {"loss": sum(losses) / W}
    out["metric"] = sum(metrics) / W if metrics else out["loss"]
    return out


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    clip: float | None = 1.0
    gate_weight_decay: float = 0.0
    gate_clip: float | None = None
    eval_every: int = 100
    seed: int = 0
    target_loss: float | None = None   # stop early once eval loss drops below
    target_metric: float | None = None  # stop early once eval metric reaches
    log_path: str | None = None
    checkpoint_dir: str | None = None
    epochs: int | None = None           # iterate over a finite training set instead
    time_budget_s: float | None = None  # stop (after a final eval) once this much wall time is spent


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


LOG_FIELDS = ["step", "train_loss", "eval_loss", "eval_metric", "update_rate", "grad_norm", "elapsed_s"]


def train(model: Model, task, tc: TrainConfig, header: str | None = None) -> list[dict]:
    """Optimize ``model`` on ``task``; returns the metrics log (also written as CSV)."""
    rng = Rng(tc.seed)
    opt = OptimState(lr=tc.lr, clip=tc.clip, gate_weight_decay=tc.gate_weight_decay,
                     gate_clip=tc.gate_clip)
    params = model.named_params()
    eval_batch = task.eval_batch()
    rows: list[dict] = []
    best = math.inf
    nan_streak = 0
    t0 = time.perf_counter()
    last_loss = math.nan
    last_rate = _current_rate(model, task)
    last_norm = math.nan

    def log_row(step):
        nonlocal best
        ev = evaluate(model, task, eval_batch)
        row = {"step": step, "train_loss": last_loss, "eval_loss": ev["loss"],
               "eval_metric": ev["metric"], "update_rate": last_rate, "grad_norm": last_norm,
               "elapsed_s": time.perf_counter() - t0}
        rows.append(row)
        log.info("step %d train %.4f eval %.4f metric %.4f rate %.3f", step, last_loss,
                 ev["loss"], ev["metric"], last_rate)
        if tc.checkpoint_dir and ev["loss"] < best:
            best = ev["loss"]
            save_checkpoint(tc.checkpoint_dir, model.all_blocks(),
                            meta={"step": step, "eval_loss": ev["loss"]})
        return ev

    batches = _batch_stream(task, tc, rng)
    log_row(0)
    for step, batch in enumerate(batches, start=1):
        fwd = forward_model(model, batch.inputs, rng=rng, train=True)
        loss, d_out = compute_loss(task, fwd.outputs, batch)
        if not math.isfinite(loss):
            nan_streak += 1
            if nan_streak >= 2:
                dump = None
                if tc.checkpoint_dir:
                    dump = str(Path(tc.checkpoint_dir) / "nan_dump")
                    save_checkpoint(dump, model.all_blocks(), meta={"step": step})
                _write_log(rows, tc.log_path, header)
                raise NumericAbort(f"loss is non-finite at steps {step - 1} and {step}", dump)
            continue
        nan_streak = 0
        report = backward_model(model, fwd, d_out)
        grads = flat_grads(model, report)
        last_norm = global_norm(grads)
        adam_step(opt, params, grads, model)
        last_loss = loss
        last_rate = float(np.mean(report.update_rates))
        if step % tc.eval_every == 0 or step == _total_steps(task, tc):
            ev = log_row(step)
            if tc.target_loss is not None and ev["loss"] < tc.target_loss:
                break
            if tc.target_metric is not None and ev["metric"] >= tc.target_metric:
                break
        if tc.time_budget_s is not None and time.perf_counter() - t0 > tc.time_budget_s:
            if rows[-1]["step"] != step:
                log_row(step)
            log.info("wall-time budget of %.0fs spent at step %d", tc.time_budget_s, step)
            break
    _write_log(rows, tc.log_path, header)
    return rows


def _current_rate(model: Model, task) -> float:
    T = task.length
    rates = []
    for layer in model.layers:
        if layer.gated and not isinstance(layer.schedule, gates_mod.InputThreshold):
            m = gates_mod.generate_mask(layer.schedule, T, layer.H, tables=model.tables(layer, T))
            rates.append(gates_mod.update_rate(m))
        else:
            rates.append(1.0)
    return float(np.mean(rates))


def _total_steps(task, tc: TrainConfig) -> int:
    if tc.epochs is None:
        return tc.steps
    n = task.train_size
    return tc.epochs * ((n + tc.batch_size - 1) // tc.batch_size)


def _batch_stream(task, tc: TrainConfig, rng: Rng):
    if tc.epochs is None:
        for _ in range(tc.steps):
            yield task.sample(rng, tc.batch_size)
        return
    n = task.train_size
    for _ in range(tc.epochs):
        order = rng.perm(n)
        for s in range(0, n, tc.batch_size):
            yield task.train_batch(order[s:s + tc.batch_size])


def _write_log(rows, path, header=None):
    if not path:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def restore(model: Model, checkpoint_dir) -> dict:
    blocks, meta = load_checkpoint(checkpoint_dir)
    model.load_blocks(blocks)
    return meta


# -- finite-difference certification -----------------------------------------

def gradcheck_model(model: Model, inputs, targets, mask, loss: str = "ce",
                    eps: float = 1e-5) -> dict[str, float]:
    """Central-difference check of every differentiable parameter group.

    Returns ``max|analytic - fd| / max|fd|`` per group. Gate parameters of hard
    (binarized) layers are skipped: their true derivative is zero almost
    everywhere and the reverse pass deliberately returns the surrogate instead.
    Wired one-pass blocks are skipped as well (they are projected, not trained).
    """
    loss_fn = loss_ce if loss == "ce" else loss_mse

    def value():
        return loss_fn(forward_model(model, inputs).outputs, targets, mask)[0]

    fwd = forward_model(model, inputs)
    _, d_out = loss_fn(fwd.outputs, targets, mask)
    grads = flat_grads(model, backward_model(model, fwd, d_out))
    errors = {}
    for name, p in model.named_params().items():
        layer_idx = int(name[5:name.index(".")]) if name.startswith("layer") else None
        layer = model.layers[layer_idx] if layer_idx is not None else None
        if ".gate." in name and not layer.soft:
            continue
        an = grads[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = value()
            p[idx] = old - eps
            down = value()
            p[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        if isinstance(getattr(layer, "params", None), OnePassGru) and name.endswith("W_ih"):
            D = layer.params.D
            an, fd = an[:, :D], fd[:, :D]
        scale = np.max(np.abs(fd))
        diff = np.max(np.abs(an - fd))
        errors[name] = float(diff / scale) if scale > 0 else float(diff)
    return errors
