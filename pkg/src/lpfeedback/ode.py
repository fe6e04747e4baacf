"""Embedded Runge-Kutta 5(4) (Dormand-Prince) for batches of trajectories.

All trajectories in a batch share one step size; the step is accepted when
the worst member passes the error test.  Output is produced at prescribed
sample times by landing steps exactly on them, so samples carry the full
fifth-order accuracy instead of an interpolation error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Dormand-Prince coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class IntegrationError(RuntimeError):
    pass


@dataclass
class BatchSolution:
    t: np.ndarray            # (T,)
    y: np.ndarray            # (N, T, d); NaN after a trajectory stopped
    stopped_at: np.ndarray   # (N,) index of the last valid sample, T-1 if complete
    n_steps: int
    n_rejected: int


def integrate_batch(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_samples: np.ndarray,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    stop: Callable[[np.ndarray], np.ndarray] | None = None,
    h0: float | None = None,
    max_steps: int = 200000,
    error_mask: np.ndarray | None = None,
) -> BatchSolution:
    """Integrate ``dy/dt = rhs(t, y)`` for every row of ``y0``.

    ``t_samples`` must start at the initial time and be strictly monotone
    (decreasing times integrate backwards).  ``stop(y)`` returns a boolean
    mask of rows to freeze (e.g. escaped trajectories); frozen rows yield NaN
    from the next sample on.  ``error_mask`` selects the state components that
    take part in step-size control (default: all).
    """
    t_samples = np.asarray(t_samples, dtype=float)
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim == 1:
        y = y[None, :]
    N, d = y.shape
    T = len(t_samples)
    out = np.full((N, T, d), np.nan)
    out[:, 0] = y
    stopped_at = np.full(N, T - 1)
    active = np.ones(N, dtype=bool)
    emask = np.ones(d, dtype=bool) if error_mask is None else np.asarray(error_mask, dtype=bool)
    if T == 1:
        return BatchSolution(t_samples, out, stopped_at, 0, 0)

    direction = np.sign(t_samples[-1] - t_samples[0])
    t = t_samples[0]
    k1 = rhs(t, y)
    span = abs(t_samples[-1] - t_samples[0])
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d0 = np.sqrt(np.mean((y / scale)[:, emask] ** 2))
        d1 = np.sqrt(np.mean((k1 / scale)[:, emask] ** 2))
        h0 = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
        h0 = min(h0, span)
    h = abs(h0)
    err_prev = 1.0
    n_steps = n_rej = 0
    j = 1  # next sample index
    while j < T:
        target = t_samples[j]
        last = False
        if h >= abs(target - t) * (1 - 1e-12):
            h_try = abs(target - t)
            last = True
        else:
            h_try = h
        hs = direction * h_try
        ks = [k1]
        for s in range(1, 7):
            ys = y + hs * sum(a * k for a, k in zip(_A[s], ks) if a != 0.0)
            ks.append(rhs(t + _C[s] * hs, ys))
        y_new = y + hs * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = hs * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = (err_vec / scale)[:, emask]
        if np.any(active):
            per_row = np.sqrt(np.mean(ratio[active] ** 2, axis=1))
            err = float(np.max(per_row)) if per_row.size else 0.0
        else:
            err = 0.0
        if not np.isfinite(err):
            err = 1e10
        n_steps += 1
        if err <= 1.0:
            t = target if last else t + hs
            y_new[~active] = y[~active]
            y = y_new
            k1 = ks[6]
            k1[~active] = 0.0
            if stop is not None:
                newly = stop(y) & active
                if np.any(newly):
                    active &= ~newly
                    stopped_at[newly] = j - 1
                    k1[newly] = 0.0
            if last:
                out[active, j] = y[active]
                j += 1
            fac = 0.9 * max(err, 1e-10) ** (-0.7 / 5) * err_prev ** (0.4 / 5)
            fac = min(5.0, max(0.2, fac))
            if not last:
                h = h_try * fac
            else:
                h = max(h, h_try * fac) if h_try < h else h_try * fac
            err_prev = max(err, 1e-4)
            if not np.any(active):
                break
        else:
            n_rej += 1
            h = h_try * max(0.1, 0.9 * err ** (-1 / 5))
        if h < 1e-13 * max(1.0, abs(t)):
            raise IntegrationError(f"step size underflow at t={t}")
        if n_steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded")
    return BatchSolution(t_samples, out, stopped_at, n_steps, n_rej)
