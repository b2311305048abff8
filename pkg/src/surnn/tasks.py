"""Benchmark data: copying memory, selective copy, Mackey-Glass, pixel-sequential MNIST."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, rand_perm

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
PSMNIST_SEED = 42


@dataclass
class TaskBatch:
    inputs: np.ndarray     # [B, T, D]
    targets: np.ndarray    # [B, T] class indices or regression values
    loss_mask: np.ndarray  # [B, T] in {0, 1}

    def __post_init__(self):
        B, T = self.targets.shape
        if self.inputs.shape[:2] != (B, T) or self.loss_mask.shape != (B, T):
            raise ValueError("inputs, targets and loss_mask disagree on [B, T]")

    def slice(self, lo: int, hi: int) -> "TaskBatch":
        return TaskBatch(self.inputs[lo:hi], self.targets[lo:hi], self.loss_mask[lo:hi])

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def _one_hot(tokens: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros(tokens.shape + (depth,))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


# -- copying memory ---------------------------------------------------------

def gen_copy_memory(rng: Rng, B: int, T: int, prefix_len: int = 10, alphabet: int = 8) -> TaskBatch:
    """Prefix of symbols 1..alphabet, T blanks, delimiter, then recall the prefix.

    Token 0 is the blank and ``alphabet + 1`` the delimiter; inputs are one-hot
    over ``alphabet + 2`` tokens. Targets are class indices ``symbol - 1``.
    """
    if T < 0:
        raise ValueError("delay must be non-negative")
    if B < 1 or prefix_len < 1 or alphabet < 1:
        raise ValueError("batch, prefix and alphabet sizes must be positive")
    L = prefix_len + T + 1 + prefix_len
    prefix = rng.integers(1, alphabet + 1, (B, prefix_len))
    tokens = np.zeros((B, L), dtype=np.int64)
    tokens[:, :prefix_len] = prefix
    tokens[:, prefix_len + T] = alphabet + 1
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, L - prefix_len:] = prefix - 1
    mask = np.zeros((B, L))
    mask[:, L - prefix_len:] = 1.0
    return TaskBatch(_one_hot(tokens, alphabet + 2), targets, mask)


# -- selective copy ---------------------------------------------------------

def gen_selective_copy(rng: Rng, B: int, T: int, n_tokens: int = 16, alphabet: int = 8) -> TaskBatch:
    """Marked symbols scattered in a length-T blank stream; recall them in order afterwards.

    Channels: ``alphabet`` symbol one-hots, a mark flag on symbol positions and
    a recall cue on the ``n_tokens`` output slots that follow the stream.
    """
    if n_tokens >= T:
        raise ValueError(f"n_tokens ({n_tokens}) must be smaller than the stream length ({T})")
    if n_tokens < 1 or B < 1:
        raise ValueError("need at least one token and one sequence")
    L = T + n_tokens
    D = alphabet + 2
    inputs = np.zeros((B, L, D))
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    symbols = rng.integers(0, alphabet, (B, n_tokens))
    for b in range(B):
        pos = np.sort(rng.perm(T)[:n_tokens])
        inputs[b, pos, symbols[b]] = 1.0
        inputs[b, pos, alphabet] = 1.0
    inputs[:, T:, alphabet + 1] = 1.0
    targets[:, T:] = symbols
    mask[:, T:] = 1.0
    return TaskBatch(inputs, targets, mask)


def marked_positions(batch: TaskBatch, alphabet: int = 8) -> list[np.ndarray]:
    return [np.flatnonzero(batch.inputs[b, :, alphabet]) for b in range(batch.inputs.shape[0])]


# -- Mackey-Glass -----------------------------------------------------------

@dataclass
class MgConfig:
    beta: float = 0.2
    gamma: float = 0.1
    n: float = 10.0
    tau: float = 17.0
    dt: float = 1.0
    horizon: int = 10
    history: float = 1.2

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("delay tau must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class MgSeries:
    values: np.ndarray
    mean: float
    std: float

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean


def mackey_glass_raw(cfg: MgConfig, length: int, warmup: int = 1000,
                     history: float | None = None) -> np.ndarray:
    """RK4 integration of dx/dt = beta x(t - tau) / (1 + x(t - tau)^n) - gamma x.

    The delayed value at half steps is linearly interpolated on the grid; the
    history before t = 0 is constant.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    h0 = cfg.history if history is None else history
    dt = cfg.dt
    lag = cfg.tau / dt          # delay in grid steps
    total = warmup + length
    x = np.empty(total + 1)
    x[0] = h0

    def delayed(s):
        # value at grid position s (may be fractional or negative)
        if s <= 0:
            return h0 if s < 0 else x[0]
        i = int(np.floor(s))
        w = s - i
        return x[i] if w == 0.0 else (1.0 - w) * x[i] + w * x[i + 1]

    def rhs(xv, xd):
        return cfg.beta * xd / (1.0 + xd ** cfg.n) - cfg.gamma * xv

    for k in range(total):
        d0 = delayed(k - lag)
        dh = delayed(k + 0.5 - lag)
        d1 = delayed(k + 1 - lag)
        xk = x[k]
        k1 = rhs(xk, d0)
        k2 = rhs(xk + 0.5 * dt * k1, dh)
        k3 = rhs(xk + 0.5 * dt * k2, dh)
        k4 = rhs(xk + dt * k3, d1)
        x[k + 1] = xk + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return x[warmup + 1:]


def gen_mackey_glass(cfg: MgConfig, length: int, warmup: int = 1000,
                     normalize: bool = True) -> MgSeries:
    raw = mackey_glass_raw(cfg, length, warmup)
    if not normalize:
        return MgSeries(raw, 0.0, 1.0)
    mean = float(raw.mean())
    std = float(raw.std())
    if std == 0.0:
        std = 1.0
    return MgSeries((raw - mean) / std, mean, std)


def mg_windows(series: np.ndarray, starts: np.ndarray, window: int, horizon: int,
               washout: int = 0) -> TaskBatch:
    """Input x(t), target x(t + horizon) over windows of ``window`` steps."""
    idx = np.asarray(starts)[:, None] + np.arange(window)[None, :]
    if idx.max() + horizon >= len(series):
        raise ValueError("window plus horizon runs past the series")
    inputs = series[idx][..., None]
    targets = series[idx + horizon]
    mask = np.ones(idx.shape)
    mask[:, :washout] = 0.0
    return TaskBatch(inputs, targets, mask)


# -- IDX / MNIST ------------------------------------------------------------

class IdxFormatError(ValueError):
    pass


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read an IDX image (0x803, [N, rows, cols]) or label (0x801, [N]) file, gzip allowed."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 8:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimensions at byte offset {len(data)}")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    if any(d == 0 for d in dims):
        raise IdxFormatError(f"{path}: zero dimension in header at byte offset 4")
    need = header + int(np.prod(dims))
    if len(data) != need:
        off = min(len(data), need)
        raise IdxFormatError(f"{path}: payload is {len(data) - header} bytes, expected "
                             f"{need - header} (mismatch at byte offset {off})")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("IDX writer supports [N, rows, cols] images or [N] labels")
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def psmnist_permutation(length: int = 784) -> np.ndarray:
    return rand_perm(Rng(PSMNIST_SEED), length)


def make_sequential(images: np.ndarray, labels: np.ndarray,
                    permutation: np.ndarray | None = None) -> TaskBatch:
    """Pixels scaled to [0, 1] as a length rows*cols sequence, label at the last step."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("expected images [N, rows, cols] and labels [N]")
    N = images.shape[0]
    T = images.shape[1] * images.shape[2]
    seq = images.reshape(N, T).astype(np.float64) / 255.0
    if permutation is not None:
        permutation = np.asarray(permutation)
        if sorted(permutation.tolist()) != list(range(T)):
            raise ValueError("permutation must be a bijection of the pixel indices")
        seq = seq[:, permutation]
    targets = np.zeros((N, T), dtype=np.int64)
    targets[:, -1] = labels
    mask = np.zeros((N, T))
    mask[:, -1] = 1.0
    return TaskBatch(seq[..., None], targets, mask)


# -- task wrappers for the trainer -------------------------------------------

@dataclass
class CopyTask:
    delay: int
    eval_size: int = 256
    eval_seed: int = 12345
    prefix_len: int = 10
    alphabet: int = 8
    loss: str = "ce"

    @property
    def input_dim(self):
        return self.alphabet + 2

    @property
    def outputs(self):
        return self.alphabet

    @property
    def length(self):
        return 2 * self.prefix_len + self.delay + 1

    def sample(self, rng: Rng, B: int) -> TaskBatch:
        return gen_copy_memory(rng, B, self.delay, self.prefix_len, self.alphabet)

    def eval_batch(self) -> TaskBatch:
        return self.sample(Rng(self.eval_seed), self.eval_size)


@dataclass
class SelectiveCopyTask:
    T: int
    n_tokens: int = 16
    eval_size: int = 256
    eval_seed: int = 12345
    alphabet: int = 8
    loss: str = "ce"

    @property
    def input_dim(self):
        return self.alphabet + 2

    @property
    def outputs(self):
        return self.alphabet

    @property
    def length(self):
        return self.T + self.n_tokens

    def sample(self, rng: Rng, B: int) -> TaskBatch:
        return gen_selective_copy(rng, B, self.T, self.n_tokens, self.alphabet)

    def eval_batch(self) -> TaskBatch:
        return self.sample(Rng(self.eval_seed), self.eval_size)


@dataclass
class MackeyGlassTask:
    """Random training windows from the head of the series, fixed test windows from the tail."""

    cfg: MgConfig = field(default_factory=MgConfig)
    window: int = 200
    washout: int = 20
    series_len: int = 12000
    test_frac: float = 0.2
    eval_size: int = 64
    loss: str = "mse"
    input_dim: int = 1
    outputs: int = 1

    def __post_init__(self):
        self.series = gen_mackey_glass(self.cfg, self.series_len)
        self.split = int(self.series_len * (1.0 - self.test_frac))

    @property
    def length(self):
        return self.window

    def sample(self, rng: Rng, B: int) -> TaskBatch:
        hi = self.split - self.window - self.cfg.horizon
        return mg_windows(self.series.values, rng.integers(0, hi, B), self.window,
                          self.cfg.horizon, self.washout)

    def eval_batch(self) -> TaskBatch:
        hi = self.series_len - self.window - self.cfg.horizon - 1
        starts = np.linspace(self.split, hi, self.eval_size).astype(np.int64)
        return mg_windows(self.series.values, starts, self.window, self.cfg.horizon, self.washout)


@dataclass
class SequentialImageTask:
    """Fixed train/test image sets fed pixel by pixel; epochs iterate the train set."""

    train: TaskBatch
    test: TaskBatch
    loss: str = "ce"
    outputs: int = 10
    input_dim: int = 1

    @classmethod
    def from_arrays(cls, train_images, train_labels, test_images, test_labels, permuted=True):
        T = train_images.shape[1] * train_images.shape[2]
        perm = psmnist_permutation(T) if permuted else None
        return cls(make_sequential(train_images, train_labels, perm),
                   make_sequential(test_images, test_labels, perm))

    @property
    def length(self):
        return self.train.inputs.shape[1]

    @property
    def train_size(self):
        return self.train.inputs.shape[0]

    def train_batch(self, idx) -> TaskBatch:
        return TaskBatch(self.train.inputs[idx], self.train.targets[idx], self.train.loss_mask[idx])

    def sample(self, rng: Rng, B: int) -> TaskBatch:
        return self.train_batch(rng.integers(0, self.train_size, B))

    def eval_batch(self) -> TaskBatch:
        return self.test
