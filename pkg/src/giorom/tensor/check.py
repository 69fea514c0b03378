"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, recording
from .params import ParamStore, gradient


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, index, step: float = 1e-6) -> float:
    """d fn / d arr[index] by central differences; ``arr`` is perturbed in place."""
    orig = arr[index]
    arr[index] = orig + step
    fp = fn()
    arr[index] = orig - step
    fm = fn()
    arr[index] = orig
    return (fp - fm) / (2.0 * step)


def check_params(loss_fn: Callable[[], Tensor], params: ParamStore, samples_per_param: int | None = None,
                 step: float = 1e-6, seed: int = 0, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter between taped and finite-difference gradients.

    ``loss_fn`` builds a scalar loss from the parameters in ``params``. With
    ``samples_per_param`` set, only that many random entries per tensor are probed.
    The error is normwise over the probed entries:
    ``max|a - n| / max(max|a|, max|n|, floor)``.
    """
    with recording() as tape:
        loss = loss_fn()
        gradient(loss, params, tape)
    rng = np.random.default_rng(seed)

    def value() -> float:
        return loss_fn().item()

    errors: dict[str, float] = {}
    for name, t in params.items():
        flat_n = t.size
        if samples_per_param is None or samples_per_param >= flat_n:
            probe = np.arange(flat_n)
        else:
            probe = rng.choice(flat_n, size=samples_per_param, replace=False)
        analytic = params.grads[name].reshape(-1)[probe]
        view = t.data.reshape(-1)
        numeric = np.array([numeric_grad(value, view, int(k), step) for k in probe])
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return errors


def check_inputs(fn: Callable[..., Tensor], inputs: list[np.ndarray], step: float = 1e-6) -> float:
    """Max relative error of d sum(w * fn(inputs)) over every entry of every input."""
    rng = np.random.default_rng(1)
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    probe_out = fn(*tensors)
    weights = rng.standard_normal(probe_out.shape)

    def objective(ts):
        out = fn(*ts)
        return (out * Tensor(weights)).sum()

    store = ParamStore()
    for i, t in enumerate(tensors):
        store._params[f"in{i}"] = t
        store.grads[f"in{i}"] = np.zeros_like(t.data)
    errs = check_params(lambda: objective(tensors), store, step=step)
    return max(errs.values())
