from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, backward


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-3,
    *,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per component is ``|ad - fd| / (|fd| + 1e-6)``.  ``x`` keeps
    its dtype (pass float64 to separate formula errors from float32 noise).
    With ``max_components`` only a random subset of entries is perturbed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x)
    if base.dtype not in (np.float32, np.float64):
        base = base.astype(np.float32)

    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    ad = backward(tape, out)[leaf].astype(np.float64).reshape(-1)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_components is not None and flat.size > max_components:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_components, replace=False)

    worst = 0.0
    for k in idx:
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += h
        minus[k] -= h
        fp = float(np.sum(f(Tensor(plus.reshape(base.shape))).data, dtype=np.float64))
        fm = float(np.sum(f(Tensor(minus.reshape(base.shape))).data, dtype=np.float64))
        # divide by the step that was actually representable
        fd = (fp - fm) / float(plus[k] - minus[k])
        worst = max(worst, abs(ad[k] - fd) / (abs(fd) + 1e-6))
    return worst
