"""Desk-scale editable model: a stack of residual feed-forward blocks.

Each block computes h_{l+1} = h_l + W_l · sigma(A_l · h_l).  The activation
output k = sigma(A_l · h_l) is the layer's *key* and the down-projection W_l
is the sole edit target.  Models are immutable values; an edit produces a new
model sharing every weight except the one replaced W_l.

Save/load round-trips through a JSON document holding the config and the
weight matrices as nested number lists, which preserves float64 exactly.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, SchemaMismatch

_ACTIVATIONS = ("relu", "tanh")


def activation_fn(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise InvalidConfig(f"unknown activation {name!r}")


def activation_deriv(name: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative at pre-activation z (relu uses subgradient 0 at 0)."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    raise InvalidConfig(f"unknown activation {name!r}")


@dataclass(frozen=True)
class ToyModelConfig:
    num_layers: int = 8
    d_model: int = 32
    d_ffn: int = 64
    activation: str = "relu"
    init_scale: float | None = None  # None means 1/sqrt(d_model)
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise InvalidConfig(f"num_layers must be >= 1, got {self.num_layers}")
        if self.d_model < 2 or self.d_ffn < 2:
            raise InvalidConfig(
                f"d_model and d_ffn must be >= 2, got {self.d_model}, {self.d_ffn}"
            )
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfig(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )
        if self.init_scale is None:
            object.__setattr__(self, "init_scale", 1.0 / float(np.sqrt(self.d_model)))
        if not (self.init_scale > 0.0 and np.isfinite(self.init_scale)):
            raise InvalidConfig(f"init_scale must be positive, got {self.init_scale}")
        if self.seed < 0:
            raise InvalidConfig(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "activation": self.activation,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ToyModel:
    """Immutable weight container; use with_down_proj for copy-on-edit."""

    config: ToyModelConfig
    up_projs: tuple[np.ndarray, ...]  # per layer, d_ffn x d_model
    down_projs: tuple[np.ndarray, ...]  # per layer, d_model x d_ffn

    def __post_init__(self):
        cfg = self.config
        if len(self.up_projs) != cfg.num_layers or len(self.down_projs) != cfg.num_layers:
            raise DimensionMismatch("weight count does not match num_layers")
        for ell, (a, w) in enumerate(zip(self.up_projs, self.down_projs)):
            if a.shape != (cfg.d_ffn, cfg.d_model):
                raise DimensionMismatch(
                    f"up_proj[{ell}] has shape {a.shape}, want {(cfg.d_ffn, cfg.d_model)}"
                )
            if w.shape != (cfg.d_model, cfg.d_ffn):
                raise DimensionMismatch(
                    f"down_proj[{ell}] has shape {w.shape}, want {(cfg.d_model, cfg.d_ffn)}"
                )
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
                raise InvalidConfig(f"layer {ell} weights contain non-finite entries")
        object.__setattr__(self, "up_projs", tuple(_readonly(a) for a in self.up_projs))
        object.__setattr__(self, "down_projs", tuple(_readonly(w) for w in self.down_projs))

    def with_down_proj(self, layer: int, w_new: np.ndarray) -> "ToyModel":
        """New model with W_layer replaced; every other weight is shared."""
        self._check_layer(layer)
        downs = list(self.down_projs)
        downs[layer] = np.asarray(w_new, dtype=np.float64)
        return ToyModel(self.config, self.up_projs, tuple(downs))

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.config.num_layers:
            raise DimensionMismatch(
                f"layer {layer} out of range for {self.config.num_layers}-layer model"
            )


@dataclass(frozen=True)
class ForwardTrace:
    """Everything a single forward pass produces.

    hiddens[l] is the block input h_l (hiddens[0] == x), hiddens[-1] the
    output; keys[l] == sigma(A_l · hiddens[l]).
    """

    output: np.ndarray
    keys: tuple[np.ndarray, ...]
    hiddens: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class PreservationBasis:
    """Preserved-key sample K0 and its regularized second moment C0."""

    layer: int
    K0: np.ndarray  # d_ffn x n_samples
    C0: np.ndarray  # d_ffn x d_ffn, SPD
    n_samples: int
    ridge_eps: float
    seed: int = field(default=0, compare=False)


def init_model(config: ToyModelConfig) -> ToyModel:
    """Draw all weights i.i.d. Gaussian(0, init_scale^2); deterministic in seed."""
    rng = np.random.default_rng(config.seed)
    ups, downs = [], []
    for _ in range(config.num_layers):
        ups.append(config.init_scale * rng.standard_normal((config.d_ffn, config.d_model)))
        downs.append(config.init_scale * rng.standard_normal((config.d_model, config.d_ffn)))
    return ToyModel(config, tuple(ups), tuple(downs))


def _check_vector(x, dim: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (dim,):
        raise DimensionMismatch(f"{name} must have shape ({dim},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def forward(model: ToyModel, x) -> ForwardTrace:
    """Run all blocks on a single input vector, recording keys and hiddens."""
    cfg = model.config
    h = _check_vector(x, cfg.d_model, "x")
    act = cfg.activation
    hiddens = [h]
    keys = []
    for a, w in zip(model.up_projs, model.down_projs):
        k = activation_fn(act, a @ h)
        keys.append(k)
        h = h + w @ k
        hiddens.append(h)
    return ForwardTrace(output=h, keys=tuple(keys), hiddens=tuple(hiddens))


def forward_from(model: ToyModel, layer: int, h, v_override=None) -> np.ndarray:
    """Run blocks layer..end starting from hidden state h.

    When v_override is given, layer's FFN contribution is replaced by it:
    h_{layer+1} = h + v_override.  Later blocks always run normally.
    """
    cfg = model.config
    model._check_layer(layer)
    h = _check_vector(h, cfg.d_model, "h")
    act = cfg.activation
    if v_override is not None:
        h = h + _check_vector(v_override, cfg.d_model, "v_override")
        start = layer + 1
    else:
        start = layer
    for ell in range(start, cfg.num_layers):
        h = h + model.down_projs[ell] @ activation_fn(act, model.up_projs[ell] @ h)
    return h


def estimate_preservation(
    model: ToyModel,
    layer: int,
    n_samples: int,
    ridge_eps: float = 1e-6,
    seed: int = 0,
) -> PreservationBasis:
    """Sample preserved keys at `layer` from Gaussian inputs and form C0.

    C0 = (1/N)·K0·K0ᵀ + ridge_eps·I, explicitly symmetrized, so it is always
    symmetric positive definite.
    """
    model._check_layer(layer)
    if n_samples < 1:
        raise InvalidConfig(f"n_samples must be >= 1, got {n_samples}")
    if not ridge_eps > 0.0:
        raise InvalidConfig(f"ridge_eps must be positive, got {ridge_eps}")
    cfg = model.config
    if n_samples < cfg.d_ffn:
        warnings.warn(
            f"n_samples={n_samples} < d_ffn={cfg.d_ffn}: C0 is ridge-dominated",
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    cols = []
    for _ in range(n_samples):
        x = rng.standard_normal(cfg.d_model)
        cols.append(forward(model, x).keys[layer])
    K0 = np.stack(cols, axis=1)
    second_moment = (K0 @ K0.T) / float(n_samples)
    second_moment = 0.5 * (second_moment + second_moment.T)
    C0 = second_moment + ridge_eps * np.eye(cfg.d_ffn)
    return PreservationBasis(
        layer=layer, K0=K0, C0=C0, n_samples=n_samples, ridge_eps=ridge_eps, seed=seed
    )


def save_model(model: ToyModel, path: str) -> None:
    """Write the model as JSON (config + weight arrays); atomic replace."""
    doc = {
        "format": "pmedit-toy-model",
        "version": 1,
        "config": model.config.to_dict(),
        "up_projs": [a.tolist() for a in model.up_projs],
        "down_projs": [w.tolist() for w in model.down_projs],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> ToyModel:
    """Read a model written by save_model, validating schema and shapes."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != "pmedit-toy-model":
        raise SchemaMismatch(f"{path}: not a toy-model document")
    try:
        config = ToyModelConfig(**doc["config"])
        ups = tuple(np.asarray(a, dtype=np.float64) for a in doc["up_projs"])
        downs = tuple(np.asarray(w, dtype=np.float64) for w in doc["down_projs"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: malformed model document ({exc})") from None
    try:
        return ToyModel(config, ups, downs)
    except DimensionMismatch as exc:
        raise SchemaMismatch(f"{path}: {exc}") from None
