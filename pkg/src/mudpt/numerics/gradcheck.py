from __future__ import annotations

import logging
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import InvalidInputError, NumericError
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

MAX_COORDS_PER_TENSOR = 256


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"param{i}": p for i, p in enumerate(params)}


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-4, max_coords: int = MAX_COORDS_PER_TENSOR, seed: int = 0) -> float:
    """Compare reverse-mode gradients against central differences.

    ``loss_fn`` takes no arguments and reads the current values of ``params``.
    At most ``max_coords`` coordinates per tensor are probed, drawn uniformly
    without replacement by a generator seeded with ``seed``.  Returns the max
    over probed coordinates of ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise InvalidInputError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    named = _as_named(params)
    for p in named.values():
        p.grad = None

    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the base point")
    if loss.requires_grad:
        loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in named.items()}

    rng = np.random.default_rng(seed)
    worst, worst_at = 0.0, None
    for name, p in named.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                f_plus = float(loss_fn().data)
                flat[c] = orig - eps
                f_minus = float(loss_fn().data)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                idx = np.unravel_index(c, p.shape)
                raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}")
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst, worst_at = rel, (name, np.unravel_index(c, p.shape))
    log.debug("grad_check worst relative error %.3e at %s", worst, worst_at)
    return worst
