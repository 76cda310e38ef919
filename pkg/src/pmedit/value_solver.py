"""Target-value optimization for edits.

Given an input x, a layer, and a desired model output, find the vector v_e
that layer's FFN should emit so the remaining blocks carry the hidden state
to the target.  Plain gradient descent with a halving line search keeps the
loss monotone and the whole solve deterministic; the gamma penalty anchors
v_e near the unedited FFN output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Diverged, InvalidConfig
from .model import ToyModel, activation_deriv, activation_fn, forward, _check_vector

_MAX_HALVINGS = 60


@dataclass(frozen=True)
class ValueSolveOptions:
    max_iters: int = 500
    step_size: float = 0.05
    decay: float = 1e-3  # gamma, weight on ||v - v_init||^2
    grad_tol: float = 1e-7
    target_tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidConfig(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size > 0.0:
            raise InvalidConfig(f"step_size must be positive, got {self.step_size}")
        if self.decay < 0.0:
            raise InvalidConfig(f"decay must be >= 0, got {self.decay}")


@dataclass(frozen=True)
class ValueSolveResult:
    v_e: np.ndarray
    final_loss: float
    iters: int
    status: str  # "target_tol" | "grad_tol" | "max_iters" | "stalled"
    initial_loss: float


def value_loss_grad(
    model: ToyModel,
    layer: int,
    h_layer,
    v,
    target,
    gamma: float,
    v_init,
) -> tuple[float, np.ndarray]:
    """Loss ||F(v) - target||^2 + gamma ||v - v_init||^2 and its exact gradient.

    F runs blocks layer+1..end from h_layer + v.  The gradient is analytic
    backpropagation through those blocks; relu contributes subgradient 0 at
    exactly 0.
    """
    cfg = model.config
    model._check_layer(layer)
    h_layer = _check_vector(h_layer, cfg.d_model, "h_layer")
    v = _check_vector(v, cfg.d_model, "v")
    target = _check_vector(target, cfg.d_model, "target")
    v_init = _check_vector(v_init, cfg.d_model, "v_init")
    act = cfg.activation

    h = h_layer + v
    preacts = []
    for ell in range(layer + 1, cfg.num_layers):
        z = model.up_projs[ell] @ h
        preacts.append(z)
        h = h + model.down_projs[ell] @ activation_fn(act, z)

    residual = h - target
    dv = v - v_init
    loss = float(residual @ residual + gamma * (dv @ dv))

    g = 2.0 * residual
    for ell in range(cfg.num_layers - 1, layer, -1):
        z = preacts[ell - (layer + 1)]
        g = g + model.up_projs[ell].T @ (
            activation_deriv(act, z) * (model.down_projs[ell].T @ g)
        )
    grad = g + 2.0 * gamma * dv
    return loss, grad


def solve_value(
    model: ToyModel,
    layer: int,
    x,
    target,
    opts: ValueSolveOptions | None = None,
) -> ValueSolveResult:
    """Minimize the value loss by monotone gradient descent.

    Starts at v_init = W_layer · sigma(A_layer · h_layer).  Each iteration
    takes a step along -grad, halving the step until the loss does not
    increase; a step that cannot descend within 60 halvings stops the solve
    ("stalled").  Raises Diverged only if the loss turns non-finite.
    """
    opts = opts or ValueSolveOptions()
    cfg = model.config
    model._check_layer(layer)
    x = _check_vector(x, cfg.d_model, "x")
    target = _check_vector(target, cfg.d_model, "target")

    trace = forward(model, x)
    h_layer = trace.hiddens[layer]
    v_init = model.down_projs[layer] @ trace.keys[layer]
    gamma = opts.decay

    v = v_init.copy()
    loss, grad = value_loss_grad(model, layer, h_layer, v, target, gamma, v_init)
    if not np.isfinite(loss):
        raise Diverged(f"initial loss is non-finite at layer {layer}")
    initial_loss = loss

    def mismatch_norm(current_loss: float, current_v: np.ndarray) -> float:
        dv = current_v - v_init
        return float(np.sqrt(max(current_loss - gamma * float(dv @ dv), 0.0)))

    status = "max_iters"
    step = opts.step_size
    iters = 0
    for _ in range(opts.max_iters):
        if mismatch_norm(loss, v) <= opts.target_tol:
            status = "target_tol"
            break
        if float(np.linalg.norm(grad)) <= opts.grad_tol:
            status = "grad_tol"
            break
        accepted = False
        for _halving in range(_MAX_HALVINGS):
            candidate = v - step * grad
            cand_loss, cand_grad = value_loss_grad(
                model, layer, h_layer, candidate, target, gamma, v_init
            )
            if np.isfinite(cand_loss) and cand_loss <= loss:
                v, loss, grad = candidate, cand_loss, cand_grad
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not np.isfinite(cand_loss):
                raise Diverged("loss became non-finite during line search")
            status = "stalled"
            break
        iters += 1
        step = min(step * 2.0, opts.step_size)
    else:
        status = "max_iters"
    # Termination checks run before the step, so re-check after the last one.
    if status == "max_iters":
        if mismatch_norm(loss, v) <= opts.target_tol:
            status = "target_tol"
        elif float(np.linalg.norm(grad)) <= opts.grad_tol:
            status = "grad_tol"

    return ValueSolveResult(
        v_e=v, final_loss=loss, iters=iters, status=status, initial_loss=initial_loss
    )
