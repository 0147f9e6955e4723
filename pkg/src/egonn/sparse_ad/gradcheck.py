"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Parameter, Tape, Var


def _loss_value(builder: Callable[[], Var]) -> float:
    out = builder()
    v = float(np.asarray(out.value if isinstance(out, Var) else out).reshape(()))
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite loss {v}")
    return v


def grad_check(builder: Callable[[], Var], params: Sequence[Parameter], h: float = 1e-5,
               n_samples: int = 64, rng: np.random.Generator | None = None,
               floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    See :func:`grad_check_report` for the sampling and error definition.
    """
    return grad_check_report(builder, params, h, n_samples, rng, floor)[0]


def grad_check_report(builder: Callable[[], Var], params: Sequence[Parameter], h: float = 1e-5,
                      n_samples: int = 64, rng: np.random.Generator | None = None,
                      floor: float = 1e-7, kink_tol: float | None = None,
                      max_skip_frac: float = 0.25) -> tuple[float, int]:
    """Return the max relative error between analytic and central-difference gradients.

    ``builder`` must rebuild the scalar loss from the current parameter values
    each time it is called. When the parameters hold more than ``n_samples``
    scalars, a random subset of ``n_samples`` coordinates is checked (at least
    one per parameter). Parameters must be double precision. Relative errors
    use ``max(|analytic|, |numeric|, floor)`` as denominator, with ``floor``
    raised to the round-off level of the difference quotient.

    With ``kink_tol`` set, coordinates whose forward and backward one-sided
    quotients disagree by more than ``kink_tol`` (relative) are skipped: the
    loss is not differentiable within ``±h`` there, so the central quotient
    says nothing about the analytic gradient. Returns ``(max error, skipped)``
    and raises if more than ``max_skip_frac`` of the coordinates were skipped.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name!r} is {p.value.dtype}")
        p.zero_grad()
    with Tape() as tape:
        loss = builder()
        if not np.isfinite(loss.value).all():
            raise FloatingPointError("non-finite loss")
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    # denominators below the finite-difference round-off level are meaningless
    floor = max(floor, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(float(loss.value))) / h)

    coords: list[tuple[int, int]] = []
    total = sum(p.value.size for p in params)
    if total <= n_samples:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    else:
        for i, p in enumerate(params):
            coords.append((i, int(rng.integers(p.value.size))))
        sizes = np.array([p.value.size for p in params], dtype=float)
        extra = max(n_samples - len(coords), 0)
        which = rng.choice(len(params), size=extra, p=sizes / sizes.sum())
        for i in which:
            coords.append((int(i), int(rng.integers(params[i].value.size))))

    f0 = float(loss.value)
    worst, skipped = 0.0, 0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = _loss_value(builder)
        flat[j] = orig - h
        fm = _loss_value(builder)
        flat[j] = orig
        num = (fp - fm) / (2 * h)
        if kink_tol is not None:
            dp, dm = (fp - f0) / h, (f0 - fm) / h
            if abs(dp - dm) / max(abs(dp), abs(dm), floor) > kink_tol:
                skipped += 1
                continue
        ana = analytic[i].reshape(-1)[j]
        err = abs(num - ana) / max(abs(num), abs(ana), floor)
        worst = max(worst, err)
    if skipped > max_skip_frac * len(coords):
        raise FloatingPointError(f"{skipped} of {len(coords)} coordinates sit on kinks")
    return worst, skipped
