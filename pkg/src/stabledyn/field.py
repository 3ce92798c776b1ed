"""The structured vector field: velocity(x,u) = decay(x) * (x - target(x,u)).

`decay` is an MLP bounded strictly below zero, so every component of the
state is pulled toward the matching component of `target`, the implicit
equilibrium map. Scalar benchmarks may featurize the state with cosine
modes before it enters the target net; the control vector is appended raw.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import nnet
from .nnet import MlpSpec


@dataclass(frozen=True)
class Featurizer:
    """Cosine state features: x -> (x, cos(k^2 pi (x-a)/(b-a)), k=1..num_modes)."""

    a: float
    b: float
    num_modes: int = 4
    enabled: bool = True

    def __post_init__(self):
        if not (self.a < self.b):
            raise ValueError("featurizer requires a < b")
        if self.num_modes < 0:
            raise ValueError("num_modes must be >= 0")
        ks = np.arange(1, self.num_modes + 1, dtype=float)
        object.__setattr__(self, "_freqs", ks * ks * math.pi / (self.b - self.a))

    @property
    def out_dim(self) -> int:
        return 1 + self.num_modes if self.enabled else 1

    def frequencies(self) -> np.ndarray:
        return self._freqs


def featurize(x, cfg: Featurizer) -> np.ndarray:
    """Feature vector for scalar state(s) x; shape (..., 1 + num_modes)."""
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    col = arr.reshape(-1, 1)
    if not cfg.enabled:
        out = col
    else:
        out = np.concatenate([col, np.cos(cfg.frequencies() * (col - cfg.a))], axis=1)
    if scalar:
        return out[0]
    return out.reshape(arr.shape + (out.shape[1],))


def featurize_dx(x, cfg: Featurizer) -> np.ndarray:
    """d(features)/dx, same trailing shape as featurize."""
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0
    col = arr.reshape(-1, 1)
    ones = np.ones_like(col)
    if not cfg.enabled:
        out = ones
    else:
        w = cfg.frequencies()
        out = np.concatenate([ones, -w * np.sin(w * (col - cfg.a))], axis=1)
    if scalar:
        return out[0]
    return out.reshape(arr.shape + (out.shape[1],))


@dataclass
class StructuredField:
    """A trained or fresh model: two MLPs plus featurization and a domain box."""

    dim: int
    control_dim: int
    decay_spec: MlpSpec
    decay_params: np.ndarray
    target_spec: MlpSpec
    target_params: np.ndarray
    featurizer: Featurizer | None = None
    domain: np.ndarray | None = None  # (dim, 2) lo/hi

    def __post_init__(self):
        if self.decay_spec.in_dim != self.dim or self.decay_spec.out_dim != self.dim:
            raise ValueError("decay net must map state dim to state dim")
        # outputs are strictly inside the bounds, so hi = 0 still keeps decay < 0
        if self.decay_spec.output_bounds[1] > 0:
            raise ValueError("decay net upper bound must be <= 0")
        if self.featurizer is not None and self.featurizer.enabled and self.dim != 1:
            raise ValueError("cosine featurization is defined for scalar states only")
        feat_len = self.feature_dim
        if self.target_spec.in_dim != feat_len + self.control_dim:
            raise ValueError(
                f"target net input must be {feat_len}+{self.control_dim}, "
                f"got {self.target_spec.in_dim}"
            )
        if self.target_spec.out_dim != self.dim:
            raise ValueError("target net must output the state dim")
        if self.domain is not None:
            self.domain = np.asarray(self.domain, dtype=float).reshape(self.dim, 2)
        self._decay_layers = None
        self._target_layers = None

    def decay_layers(self):
        if self._decay_layers is None:
            self._decay_layers = nnet.split_params(self.decay_spec, self.decay_params)
        return self._decay_layers

    def target_layers(self):
        if self._target_layers is None:
            self._target_layers = nnet.split_params(self.target_spec, self.target_params)
        return self._target_layers

    @property
    def feature_dim(self) -> int:
        if self.featurizer is not None and self.featurizer.enabled:
            return self.featurizer.out_dim
        return self.dim

    # flat parameter vector over both nets, decay first
    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.decay_params, self.target_params])

    def with_params(self, vec: np.ndarray) -> "StructuredField":
        n_f = nnet.param_count(self.decay_spec)
        n_g = nnet.param_count(self.target_spec)
        if vec.shape != (n_f + n_g,):
            raise ValueError("parameter vector length mismatch")
        return replace(self, decay_params=vec[:n_f].copy(), target_params=vec[n_f:].copy())


def _batch_xu(field: StructuredField, x, u):
    x2d, xs = nnet._as_batch(x, field.dim, "state")
    u2d, us = nnet._as_batch(u, field.control_dim, "control")
    if x2d.shape[0] != u2d.shape[0]:
        if u2d.shape[0] == 1:
            u2d = np.broadcast_to(u2d, (x2d.shape[0], field.control_dim))
        else:
            raise ValueError("state and control batch sizes disagree")
    return x2d, u2d, xs and us


def target_input(field: StructuredField, x2d: np.ndarray, u2d: np.ndarray) -> np.ndarray:
    if field.featurizer is not None and field.featurizer.enabled:
        feats = featurize(x2d[:, 0], field.featurizer)
    else:
        feats = x2d
    return np.concatenate([feats, u2d], axis=1)


def _decay_raw(field: StructuredField, x2d: np.ndarray) -> np.ndarray:
    y, _ = nnet.forward_cached(field.decay_spec, field.decay_params, x2d,
                               layers=field.decay_layers())
    return y


def _target_raw(field: StructuredField, x2d: np.ndarray, u2d: np.ndarray) -> np.ndarray:
    y, _ = nnet.forward_cached(field.target_spec, field.target_params,
                               target_input(field, x2d, u2d),
                               layers=field.target_layers())
    return y


def eval_decay(field: StructuredField, x) -> np.ndarray:
    """decay(x); strictly negative elementwise."""
    x2d, single = nnet._as_batch(x, field.dim, "state")
    y = _decay_raw(field, x2d)
    return y[0] if single else y


def eval_target(field: StructuredField, x, u) -> np.ndarray:
    """target(x,u); the implicit equilibrium map."""
    x2d, u2d, single = _batch_xu(field, x, u)
    y = _target_raw(field, x2d, u2d)
    return y[0] if single else y


def eval_velocity(field: StructuredField, x, u) -> np.ndarray:
    """velocity(x,u) = decay(x) * (x - target(x,u)), elementwise."""
    x2d, u2d, single = _batch_xu(field, x, u)
    v = _decay_raw(field, x2d) * (x2d - _target_raw(field, x2d, u2d))
    return v[0] if single else v


def residual(field: StructuredField, x, u) -> np.ndarray:
    """x - target(x,u); zero exactly at implicit equilibria."""
    x2d, u2d, single = _batch_xu(field, x, u)
    r = x2d - _target_raw(field, x2d, u2d)
    return r[0] if single else r


def _target_input_vjp(field: StructuredField, x2d: np.ndarray, gin_grad: np.ndarray):
    """Map a gradient on the target-net input rows back to (x_grad, u_grad)."""
    feat_len = field.feature_dim
    gfeat = gin_grad[:, :feat_len]
    gu = gin_grad[:, feat_len:]
    if field.featurizer is not None and field.featurizer.enabled:
        dfeat = featurize_dx(x2d[:, 0], field.featurizer)  # (N, feat_len)
        gx = np.sum(gfeat * dfeat, axis=1, keepdims=True)
    else:
        gx = gfeat
    return gx, gu


def target_vjp(field: StructuredField, x, u, cotangent):
    """Reverse-mode grads of <cotangent, target(x,u)>.

    Returns (target_param_grad, x_grad, u_grad); param grad summed over the
    batch, state/control grads per row (squeezed for single inputs).
    """
    x2d, u2d, single = _batch_xu(field, x, u)
    c2d = np.asarray(cotangent, dtype=float).reshape(x2d.shape[0], field.dim)
    gin = target_input(field, x2d, u2d)
    _, cache = nnet.forward_cached(field.target_spec, field.target_params, gin)
    pgrad, gin_grad = nnet.backward_from_cache(field.target_spec, cache, c2d)
    gx, gu = _target_input_vjp(field, x2d, gin_grad)
    if single:
        return pgrad, gx[0], gu[0]
    return pgrad, gx, gu


def velocity_vjp(field: StructuredField, x, u, cotangent):
    """Reverse-mode grads of <cotangent, velocity(x,u)>.

    Returns (decay_param_grad, target_param_grad, x_grad, u_grad).
    """
    x2d, u2d, single = _batch_xu(field, x, u)
    c2d = np.asarray(cotangent, dtype=float).reshape(x2d.shape[0], field.dim)

    f, f_cache = nnet.forward_cached(field.decay_spec, field.decay_params, x2d)
    gin = target_input(field, x2d, u2d)
    g, g_cache = nnet.forward_cached(field.target_spec, field.target_params, gin)
    diff = x2d - g

    fgrad, fx = nnet.backward_from_cache(field.decay_spec, f_cache, c2d * diff)
    ggrad, gin_grad = nnet.backward_from_cache(field.target_spec, g_cache, -(c2d * f))
    gx_t, gu = _target_input_vjp(field, x2d, gin_grad)
    gx = c2d * f + fx + gx_t
    if single:
        return fgrad, ggrad, gx[0], gu[0]
    return fgrad, ggrad, gx, gu


def velocity_param_vjp(field: StructuredField, x2d, u2d, cotangent2d) -> np.ndarray:
    """Flat gradient (decay params then target params) of <cot, velocity>."""
    fgrad, ggrad, _, _ = velocity_vjp(field, x2d, u2d, cotangent2d)
    return np.concatenate([fgrad, ggrad])


def velocity_cached(field: StructuredField, x2d: np.ndarray, u2d: np.ndarray):
    """Batched velocity plus the caches needed to replay the reverse pass.

    Hot path for unrolled solvers: no dim re-validation, 2-d arrays only.
    """
    f, f_cache = nnet.forward_cached(field.decay_spec, field.decay_params, x2d,
                                     layers=field.decay_layers())
    g, g_cache = nnet.forward_cached(field.target_spec, field.target_params,
                                     target_input(field, x2d, u2d),
                                     layers=field.target_layers())
    diff = x2d - g
    return f * diff, (x2d, f, diff, f_cache, g_cache)


def velocity_vjp_cached(field: StructuredField, cache, cotangent2d: np.ndarray):
    """Reverse pass over a `velocity_cached` evaluation.

    Returns (flat_param_grad, x_grad); the flat gradient covers decay params
    then target params, summed over the batch.
    """
    x2d, f, diff, f_cache, g_cache = cache
    fgrad, fx = nnet.backward_from_cache(field.decay_spec, f_cache, cotangent2d * diff)
    ggrad, gin_grad = nnet.backward_from_cache(field.target_spec, g_cache, -(cotangent2d * f))
    gx_t, _ = _target_input_vjp(field, x2d, gin_grad)
    return np.concatenate([fgrad, ggrad]), cotangent2d * f + fx + gx_t


# --- checkpointing -----------------------------------------------------------

def field_to_dict(field: StructuredField, seed: int | None = None) -> dict:
    feat = None
    if field.featurizer is not None:
        feat = {
            "a": field.featurizer.a,
            "b": field.featurizer.b,
            "num_modes": field.featurizer.num_modes,
            "enabled": field.featurizer.enabled,
        }
    return {
        "dim": field.dim,
        "control_dim": field.control_dim,
        "decay": nnet.checkpoint_to_dict(field.decay_spec, field.decay_params, seed),
        "target": nnet.checkpoint_to_dict(field.target_spec, field.target_params, seed),
        "featurizer": feat,
        "domain": None if field.domain is None else field.domain.tolist(),
    }


def field_from_dict(doc: dict) -> StructuredField:
    f_spec, f_params, _ = nnet.checkpoint_from_dict(doc["decay"])
    g_spec, g_params, _ = nnet.checkpoint_from_dict(doc["target"])
    feat = None
    if doc.get("featurizer") is not None:
        fd = doc["featurizer"]
        feat = Featurizer(fd["a"], fd["b"], fd["num_modes"], fd.get("enabled", True))
    return StructuredField(
        dim=doc["dim"],
        control_dim=doc["control_dim"],
        decay_spec=f_spec,
        decay_params=f_params,
        target_spec=g_spec,
        target_params=g_params,
        featurizer=feat,
        domain=None if doc.get("domain") is None else np.asarray(doc["domain"]),
    )


def save_field(path, field: StructuredField, seed: int | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(field_to_dict(field, seed), fh)


def load_field(path) -> StructuredField:
    with open(path) as fh:
        return field_from_dict(json.load(fh))
