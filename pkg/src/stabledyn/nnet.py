"""Minimal dense-network core: SiLU MLPs with bounded sigmoidal outputs,
hand-rolled reverse-mode gradients, Adam, and a plateau LR scheduler.

Parameters for one MLP live in a single flat float64 vector. Layout, per
layer: weight matrix (rows = output units) flattened row-major, then the
bias vector. Everything here is a pure function of its explicit inputs,
so forward/backward are safe to evaluate concurrently over shared params.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class NonFiniteError(RuntimeError):
    """Raised when a numerical routine encounters NaN/inf."""


@dataclass(frozen=True)
class MlpSpec:
    """Topology of one MLP: layer sizes, hidden activation, output bounds.

    Outputs are mapped through ``lo + (hi - lo) * sigmoid(z)``, so they are
    strictly inside ``(lo, hi)`` for every input.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "silu"
    output_bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must have >=2 entries, all >=1: {sizes}")
        if self.activation != "silu":
            raise ValueError(f"unsupported activation: {self.activation!r}")
        lo, hi = self.output_bounds
        if not (lo < hi):
            raise ValueError(f"output bounds require lo < hi, got ({lo}, {hi})")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


def param_count(spec: MlpSpec) -> int:
    sizes = spec.layer_sizes
    return sum(sizes[l] * sizes[l + 1] + sizes[l + 1] for l in range(len(sizes) - 1))


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = spec.layer_sizes
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _layout(spec: MlpSpec) -> list[tuple[int, int, int, int]]:
    """(w_offset, b_offset, n_out, n_in) per layer; cached per spec."""
    cached = _LAYOUTS.get(spec)
    if cached is None:
        cached = []
        off = 0
        sizes = spec.layer_sizes
        for l in range(len(sizes) - 1):
            n_in, n_out = sizes[l], sizes[l + 1]
            cached.append((off, off + n_out * n_in, n_out, n_in))
            off += n_out * n_in + n_out
        _LAYOUTS[spec] = cached
    return cached


_LAYOUTS: dict[MlpSpec, list] = {}


def split_params(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat vector; W has shape (out, in)."""
    if params.shape != (param_count(spec),):
        raise ValueError(
            f"param vector has length {params.shape}, spec needs {param_count(spec)}"
        )
    return [
        (params[w_off:b_off].reshape(n_out, n_in), params[b_off : b_off + n_out])
        for w_off, b_off, n_out, n_in in _layout(spec)
    ]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exponent capped below the overflow threshold; deep-negative z then
    # yields ~1e-308 instead of exactly 0, which is what we want anyway
    return 1.0 / (1.0 + np.exp(np.minimum(-z, 709.0)))


# Output-layer sigmoids are clamped this far from {0,1} so bounded outputs
# stay strictly inside (lo, hi) even when the pre-activation saturates.
_SAT = 1e-13


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{what} must have trailing dimension {dim}, got shape {arr.shape}")
    return arr, single


def forward_cached(spec: MlpSpec, params: np.ndarray, x2d: np.ndarray, layers=None):
    """Batched forward pass returning (outputs, cache) for backward reuse.

    ``x2d`` is (N, in_dim); outputs are (N, out_dim). The cache holds layer
    inputs, hidden pre-activations with their sigmoids, and the output-layer
    sigmoid values. Callers in hot loops may pass pre-split ``layers``.
    """
    if layers is None:
        layers = split_params(spec, params)
    acts = [x2d]
    hidden = []
    a = x2d
    for w, b in layers[:-1]:
        z = a @ w.T + b
        s = _sigmoid(z)
        a = z * s  # SiLU
        hidden.append((z, s))
        acts.append(a)
    w, b = layers[-1]
    z = a @ w.T + b
    s_out = np.clip(_sigmoid(z), _SAT, 1.0 - _SAT)
    lo, hi = spec.output_bounds
    y = lo + (hi - lo) * s_out
    return y, (layers, acts, hidden, s_out)


def backward_from_cache(spec: MlpSpec, cache, cotangent2d: np.ndarray):
    """Reverse pass of <cotangent, forward(x)>: flat param grad summed over
    the batch plus per-row input gradients."""
    layers, acts, hidden, s_out = cache
    lo, hi = spec.output_bounds
    delta = cotangent2d * ((hi - lo) * s_out * (1.0 - s_out))
    flat = np.empty(param_count(spec))
    layout = _layout(spec)
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        w_off, b_off, n_out, n_in = layout[l]
        np.matmul(delta.T, acts[l], out=flat[w_off:b_off].reshape(n_out, n_in))
        flat[b_off : b_off + n_out] = delta.sum(axis=0)
        da = delta @ w
        if l > 0:
            z, s = hidden[l - 1]
            delta = da * (s + z * (s * (1.0 - s)))
    return flat, da


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network; accepts a single input vector or an (N, d) batch."""
    x2d, single = _as_batch(x, spec.in_dim, "input")
    y, _ = forward_cached(spec, params, x2d)
    return y[0] if single else y


def mlp_backward(spec: MlpSpec, params: np.ndarray, x, cotangent):
    """Exact reverse-mode gradient of <cotangent, mlp_forward(x)>.

    Returns (param_gradient, input_gradient); for batched inputs the param
    gradient is summed over rows and the input gradient is per-row.
    """
    x2d, single = _as_batch(x, spec.in_dim, "input")
    c2d, csingle = _as_batch(cotangent, spec.out_dim, "cotangent")
    if single != csingle or c2d.shape[0] != x2d.shape[0]:
        raise ValueError("input and cotangent batch shapes disagree")
    _, cache = forward_cached(spec, params, x2d)
    pgrad, xgrad = backward_from_cache(spec, cache, c2d)
    return (pgrad, xgrad[0]) if single else (pgrad, xgrad)


# --- Adam ------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float) -> AdamState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, float(lr))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


# --- ReduceLROnPlateau-style scheduler --------------------------------------

@dataclass(frozen=True)
class PlateauState:
    lr: float
    best_loss: float = math.inf
    epochs_since_improve: int = 0
    patience: int = 25
    factor: float = 0.5
    min_lr: float = 1e-5
    rel_threshold: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.factor < 1.0):
            raise ValueError("factor must be in (0,1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def plateau_step(state: PlateauState, epoch_loss: float) -> PlateauState:
    """Reduce lr by `factor` after `patience` epochs without relative
    improvement above `rel_threshold`, never going below `min_lr`."""
    if not math.isfinite(epoch_loss):
        raise NonFiniteError("non-finite epoch loss passed to plateau_step")
    if epoch_loss < state.best_loss * (1.0 - state.rel_threshold) or not math.isfinite(
        state.best_loss
    ):
        return replace(state, best_loss=min(epoch_loss, state.best_loss), epochs_since_improve=0)
    stagnant = state.epochs_since_improve + 1
    if stagnant >= state.patience:
        return replace(
            state,
            lr=max(state.lr * state.factor, state.min_lr),
            epochs_since_improve=0,
        )
    return replace(state, epochs_since_improve=stagnant)


# --- checkpointing -----------------------------------------------------------

def checkpoint_to_dict(spec: MlpSpec, params: np.ndarray, seed: int | None = None) -> dict:
    return {
        "layer_sizes": list(spec.layer_sizes),
        "activation": spec.activation,
        "bounds": [spec.output_bounds[0], spec.output_bounds[1]],
        "values": [float(v) for v in params],
        "seed": seed,
    }


def checkpoint_from_dict(doc: dict) -> tuple[MlpSpec, np.ndarray, int | None]:
    spec = MlpSpec(
        layer_sizes=tuple(doc["layer_sizes"]),
        activation=doc.get("activation", "silu"),
        output_bounds=(doc["bounds"][0], doc["bounds"][1]),
    )
    params = np.asarray(doc["values"], dtype=float)
    if params.shape != (param_count(spec),):
        raise ValueError("checkpoint value count does not match layer sizes")
    return spec, params, doc.get("seed")


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, seed: int | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_to_dict(spec, params, seed), fh)


def load_checkpoint(path) -> tuple[MlpSpec, np.ndarray, int | None]:
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))
