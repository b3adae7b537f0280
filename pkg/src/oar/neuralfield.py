"""Sinusoidal coordinate network mapping a point to its displacement.

Architecture is fixed: 3 -> 128 -> 128 -> 128 -> 3 with ``sin(omega0 * .)``
after each hidden affine layer and a linear output layer. The deformed
position of ``p`` is ``p + nu(p)``.

Gradients are derived by hand for this architecture; :func:`backward`
consumes the gradient of a scalar loss with respect to the displacements
and returns gradients for every weight and bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeMismatch

LAYER_SIZES = (3, 128, 128, 128, 3)
DEFAULT_OMEGA0 = 30.0

CHECKPOINT_MAGIC = b"OARN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sId")


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    omega0: float = DEFAULT_OMEGA0

    def __post_init__(self):
        if len(self.weights) != len(LAYER_SIZES) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("network must have exactly four layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (LAYER_SIZES[i + 1], LAYER_SIZES[i])
            if w.shape != want or b.shape != (want[0],):
                raise ShapeMismatch(f"layer {i}: got W{w.shape} b{b.shape}, expected W{want} b{(want[0],)}")

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order W1, b1, W2, b2, W3, b3, W4, b4."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, omega0: float) -> "NetworkParams":
        arrays = list(arrays)
        return cls(weights=arrays[0::2], biases=arrays[1::2], omega0=omega0)

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays([a.copy() for a in self.arrays()], self.omega0)

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams.from_arrays([np.zeros_like(a) for a in self.arrays()], self.omega0)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, omega0: float) -> "NetworkParams":
        flat = np.asarray(flat, dtype=np.float64)
        arrays, pos = [], 0
        for i in range(len(LAYER_SIZES) - 1):
            n_in, n_out = LAYER_SIZES[i], LAYER_SIZES[i + 1]
            arrays.append(flat[pos:pos + n_out * n_in].reshape(n_out, n_in).copy())
            pos += n_out * n_in
            arrays.append(flat[pos:pos + n_out].copy())
            pos += n_out
        if pos != flat.size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, expected {pos}")
        return cls.from_arrays(arrays, omega0)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def n_parameters() -> int:
    return sum(LAYER_SIZES[i] * LAYER_SIZES[i + 1] + LAYER_SIZES[i + 1] for i in range(len(LAYER_SIZES) - 1))


def init_network(seed: int, omega0: float = DEFAULT_OMEGA0) -> NetworkParams:
    """Periodic-activation initialization.

    First layer weights are uniform on ``[-1/fan_in, 1/fan_in]``; later
    layers on ``[-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0]``. Biases
    start at zero.
    """
    if not omega0 > 0:
        raise ValueError("omega0 must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i in range(len(LAYER_SIZES) - 1):
        fan_in, fan_out = LAYER_SIZES[i], LAYER_SIZES[i + 1]
        bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, float(omega0))


@dataclass
class ForwardRecord:
    inputs: np.ndarray
    phases: list[np.ndarray]       # omega0 * (W h + b) per hidden layer
    activations: list[np.ndarray]  # sin(phase) per hidden layer


def _affine(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum without BLAS keeps each row's summation order independent of
    # the batch size, so a point's output does not depend on its batch.
    return np.einsum("ni,oi->no", h, w, optimize=False) + b


def forward(params: NetworkParams, points) -> tuple[np.ndarray, ForwardRecord]:
    """Displacements for each row of ``points`` plus the record for backward."""
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    pts = np.atleast_2d(pts)
    h = pts
    phases, acts = [], []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        phase = params.omega0 * _affine(h, w, b)
        h = np.sin(phase)
        phases.append(phase)
        acts.append(h)
    disp = _affine(h, params.weights[-1], params.biases[-1])
    return disp, ForwardRecord(pts, phases, acts)


def backward(params: NetworkParams, record: ForwardRecord, grad_disp,
             grad_deformed=None) -> NetworkParams:
    """Reverse pass for a scalar loss.

    ``grad_disp`` and ``grad_deformed`` are the loss gradients with respect
    to the displacements and to the deformed points ``p + nu``; since the
    inputs are constants both reach the parameters identically.
    """
    n = record.inputs.shape[0]
    g = np.zeros((n, 3)) if grad_disp is None else np.asarray(grad_disp, dtype=np.float64)
    if grad_deformed is not None:
        g = g + np.asarray(grad_deformed, dtype=np.float64)
    if g.shape != (n, 3):
        raise ShapeMismatch(f"upstream gradient has shape {g.shape}, expected {(n, 3)}")

    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    layer_inputs = [record.inputs] + record.activations
    for layer in range(n_layers - 1, -1, -1):
        if layer < n_layers - 1:
            # through sin(omega0 * z)
            g = g * (params.omega0 * np.cos(record.phases[layer]))
        grad_w[layer] = g.T @ layer_inputs[layer]
        grad_b[layer] = g.sum(axis=0)
        if layer > 0:
            g = g @ params.weights[layer]
    return NetworkParams(grad_w, grad_b, params.omega0)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: NetworkParams, **kwargs) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kwargs)


def adam_step(state: AdamState, params: NetworkParams, grads: NetworkParams,
              lr: float) -> tuple[AdamState, NetworkParams]:
    """One bias-corrected Adam update; returns new state and parameters."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(g_arrays) != len(p_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ShapeMismatch("gradient shapes do not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    return (replace(state, m=new_m, v=new_v, t=t),
            NetworkParams.from_arrays(new_p, params.omega0))


@dataclass
class SchedulerState:
    """Reduce-on-plateau learning-rate schedule (minimizing mode)."""

    lr: float
    patience: int = 1
    factor: float = 0.1
    min_lr: float = 1e-7
    threshold: float = 1e-4
    best: float = float("inf")
    bad_epochs: int = 0
    history: list[float] = field(default_factory=list)


def scheduler_step(state: SchedulerState, epoch_loss: float) -> SchedulerState:
    """Relative-threshold plateau detection; reduces after ``patience`` bad epochs."""
    best, bad, lr = state.best, state.bad_epochs, state.lr
    if epoch_loss < best * (1.0 - state.threshold):
        best, bad = float(epoch_loss), 0
    else:
        bad += 1
    if bad > state.patience:
        lr = max(lr * state.factor, state.min_lr)
        bad = 0
    return replace(state, lr=lr, best=best, bad_epochs=bad, history=state.history + [lr])


def save_checkpoint(params: NetworkParams, path) -> None:
    blob = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, float(params.omega0))
    blob += params.to_flat().astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> NetworkParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, omega0 = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = blob[_HEADER.size:]
    if len(body) != 8 * n_parameters():
        raise CheckpointError(f"checkpoint body has {len(body)} bytes, expected {8 * n_parameters()}")
    return NetworkParams.from_flat(np.frombuffer(body, dtype="<f8"), omega0)
