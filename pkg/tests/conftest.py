"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's linear-algebra paths:
ref_forward runs the block recurrence with pure-Python loops, and
central_diff_grad estimates gradients numerically.  Tests compare library
outputs against these, never against the library itself.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from pmedit import EditBatchMatrices, ToyModelConfig, init_model


def ref_forward(up_projs, down_projs, activation: str, x):
    """Reference forward pass in pure Python: h <- h + W sigma(A h)."""

    def act(v: float) -> float:
        if activation == "relu":
            return v if v > 0.0 else 0.0
        return math.tanh(v)

    h = [float(v) for v in x]
    keys = []
    for a, w in zip(up_projs, down_projs):
        z = [sum(float(a[i][j]) * h[j] for j in range(len(h))) for i in range(a.shape[0])]
        k = [act(v) for v in z]
        keys.append(k)
        h = [h[i] + sum(float(w[i][j]) * k[j] for j in range(len(k))) for i in range(len(h))]
    return np.array(h), [np.array(k) for k in keys]


def central_diff_grad(f, v, step: float = 1e-5):
    """Central finite-difference gradient of scalar f at v."""
    v = np.asarray(v, dtype=np.float64)
    grad = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = step
        grad[i] = (f(v + e) - f(v - e)) / (2.0 * step)
    return grad


def min_preact_margin(model, layer: int, h_layer, v) -> float:
    """Smallest |pre-activation| seen in blocks layer+1..end from h_layer + v.

    Finite-difference checks on relu models must only use points where this
    is comfortably above the step size (the subgradient convention at 0 makes
    the analytic and numeric answers differ at kinks).
    """
    h = np.asarray(h_layer) + np.asarray(v)
    margin = np.inf
    for ell in range(layer + 1, model.config.num_layers):
        z = model.up_projs[ell] @ h
        if z.size:
            margin = min(margin, float(np.abs(z).min()))
        h = h + model.down_projs[ell] @ np.maximum(z, 0.0)
    return margin


def sample_off_kink(model, layer, h_layer, rng, scale=1.0, margin=1e-3):
    """Draw a value vector whose downstream pre-activations avoid relu kinks."""
    for _ in range(1000):
        v = scale * rng.standard_normal(model.config.d_model)
        if min_preact_margin(model, layer, h_layer, v) > margin:
            return v
    raise AssertionError("could not sample a kink-free point; widen the margin")


def make_edit_instance(seed: int, d_model: int = 32, d_ffn: int = 64, E: int = 4, n0: int = 256):
    """Random (W0, K0, C0, batch) tuple for editor-level tests."""
    rng = np.random.default_rng(seed)
    K0 = rng.standard_normal((d_ffn, n0))
    C0 = K0 @ K0.T / n0 + 1e-6 * np.eye(d_ffn)
    W0 = rng.standard_normal((d_model, d_ffn)) / np.sqrt(d_ffn)
    K_E = rng.standard_normal((d_ffn, E))
    V_E = rng.standard_normal((d_model, E))
    return W0, K0, C0, EditBatchMatrices(K_E=K_E, V_E=V_E)


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""

    def ranks(vals):
        order = np.argsort(vals, kind="stable")
        r = np.empty(len(vals))
        i = 0
        vals = np.asarray(vals, dtype=np.float64)
        while i < len(vals):
            j = i
            while j + 1 < len(vals) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = float(np.sqrt((rx @ rx) * (ry @ ry)))
    if denom == 0.0:
        return 0.0
    return float((rx @ ry) / denom)


@pytest.fixture(scope="session")
def bench_config():
    return ToyModelConfig()  # 8 layers, d_model 32, d_ffn 64, relu, seed 0


@pytest.fixture(scope="session")
def bench_model(bench_config):
    return init_model(bench_config)


@pytest.fixture(scope="session")
def small_config():
    return ToyModelConfig(num_layers=3, d_model=8, d_ffn=12, seed=2)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config)
