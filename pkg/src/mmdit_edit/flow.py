"""Rectified-flow scheduling, Euler integration and controlled (inversion) ODEs.

Time runs from ``t=1`` (noise) to ``t=0`` (data).  The straight path between
a data point ``x0`` and a noise point ``x1`` is ``(1 - t) x0 + t x1``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SingularityError, StepError

TOWARD_NOISE = "toward_noise"
TOWARD_DATA = "toward_data"


@dataclass
class FlowState:
    latent: np.ndarray
    t: float

    def __post_init__(self):
        self.t = float(min(max(self.t, 0.0), 1.0))
        if not np.isfinite(self.latent).all():
            raise ValueError(f"non-finite latent at t={self.t}")


@dataclass(frozen=True)
class TimeGrid:
    """Strictly monotone knots; ``steps`` Euler steps between ``steps + 1`` knots."""

    knots: tuple

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a time grid needs at least two knots")
        d = np.diff(k)
        if not ((d < 0).all() or (d > 0).all()):
            raise ValueError("time grid knots must be strictly monotone")
        if k.min() < 0 or k.max() > 1:
            raise ValueError("time grid knots must lie in [0, 1]")
        object.__setattr__(self, "knots", tuple(float(v) for v in k))

    @property
    def steps(self):
        return len(self.knots) - 1

    @property
    def descending(self):
        return self.knots[0] > self.knots[-1]

    def fraction(self, k):
        """Fraction of the schedule completed before step ``k``."""
        return k / self.steps

    @classmethod
    def uniform(cls, steps):
        """Sampling grid ``1 = t_0 > ... > t_T = 0``."""
        if steps < 1:
            raise ValueError("need at least one step")
        knots = [1.0 - k / steps for k in range(steps + 1)]
        knots[-1] = 0.0
        return cls(tuple(knots))

    @classmethod
    def inversion(cls, steps):
        """Ascending grid ``0 -> 1 - delta`` with ``delta = 1 / (2T)``."""
        if steps < 1:
            raise ValueError("need at least one step")
        end = 1.0 - guard_delta(steps)
        return cls(tuple(end * k / steps for k in range(steps + 1)))


def guard_delta(steps):
    return 1.0 / (2 * steps)


def interpolate(x0, x1, t):
    """Point at time ``t`` on the straight path from ``x0`` (t=0) to ``x1`` (t=1)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def conditional_velocity(x, t, anchor, direction):
    """Straight-line velocity toward a fixed endpoint.

    ``toward_noise``: ``(anchor - x) / (1 - t)`` (anchor is the noise end);
    ``toward_data``: ``(x - anchor) / t`` (anchor is the data end).
    """
    x = np.asarray(x, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if direction == TOWARD_NOISE:
        if t >= 1.0:
            raise SingularityError(f"toward_noise velocity is singular at t={t}")
        return (anchor - x) / (1.0 - t)
    if direction == TOWARD_DATA:
        if t <= 0.0:
            raise SingularityError(f"toward_data velocity is singular at t={t}")
        return (x - anchor) / t
    raise ValueError(f"unknown direction {direction!r}")


def euler_sample(start, grid, velocity_fn):
    """Explicit Euler over the grid knots; returns the full trajectory (``T + 1`` states).

    ``x_{k+1} = x_k + (t_{k+1} - t_k) * velocity_fn(x_k, t_k)``
    """
    if not isinstance(start, FlowState):
        start = FlowState(np.asarray(start, dtype=np.float64), grid.knots[0])
    if start.t != grid.knots[0]:
        raise ValueError(f"start time {start.t} differs from the first knot {grid.knots[0]}")
    x = start.latent
    traj = [FlowState(x, grid.knots[0])]
    for k in range(grid.steps):
        t, t_next = grid.knots[k], grid.knots[k + 1]
        try:
            v = velocity_fn(x, t)
        except Exception as exc:
            raise StepError(k, exc) from exc
        x = x + (t_next - t) * v
        traj.append(FlowState(x, t_next))
    return traj


def _mix(model_v, cond_v, weight):
    # exact endpoints keep weight 0/1 free of the other field's rounding
    if weight == 1.0:
        return cond_v()
    if weight == 0.0:
        return model_v()
    vm = model_v()
    return vm + weight * (cond_v() - vm)


def _check_weight(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def invert(x0, x1, gamma, grid, velocity_fn):
    """Controlled forward ODE from data ``x0`` toward the regulator noise ``x1``.

    ``v = v_model(x, t) + gamma * ((x1 - x) / (1 - t) - v_model(x, t))``,
    where ``velocity_fn`` is the model evaluated on the null prompt.  The grid
    must ascend from 0 and stop at or before ``1 - 1/(2T)``.  Returns the
    trajectory; its last state is the inverted latent.
    """
    _check_weight("gamma", gamma)
    if grid.descending or grid.knots[0] != 0.0:
        raise ValueError("inversion grid must ascend from t=0")
    limit = 1.0 - guard_delta(grid.steps)
    if grid.knots[-1] > limit + 1e-15:
        raise SingularityError(f"inversion grid ends at {grid.knots[-1]}, past the guard {limit}")
    x1 = np.asarray(x1, dtype=np.float64)

    def field(x, t):
        return _mix(lambda: velocity_fn(x, t), lambda: conditional_velocity(x, t, x1, TOWARD_NOISE), gamma)

    return euler_sample(FlowState(np.asarray(x0, dtype=np.float64), 0.0), grid, field)


def guided_sample(x_start, x0, eta_rev, grid, velocity_fn):
    """Controlled reverse ODE from ``t=1`` back to data, pulled toward reference ``x0``.

    ``v = v_model(x, t) + eta_rev * ((x - x0) / t - v_model(x, t))`` with
    ``velocity_fn`` the model on the target prompt.  Every evaluated knot must
    stay at or above ``delta = 1/(2T)``.
    """
    _check_weight("eta_rev", eta_rev)
    if not grid.descending or grid.knots[0] != 1.0:
        raise ValueError("guided sampling grid must descend from t=1")
    delta = guard_delta(grid.steps)
    if min(grid.knots[:-1]) < delta - 1e-15:
        raise SingularityError(f"guided grid evaluates below the guard t={delta}")
    x0 = np.asarray(x0, dtype=np.float64)

    def field(x, t):
        return _mix(lambda: velocity_fn(x, t), lambda: conditional_velocity(x, t, x0, TOWARD_DATA), eta_rev)

    return euler_sample(FlowState(np.asarray(x_start, dtype=np.float64), 1.0), grid, field)


def cfm_residual(velocity_fn, x0, x1, t):
    """Squared error between the straight-path target ``x1 - x0`` and the model at ``X_t``.

    A diagnostic only; nothing in the package optimises it.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")
    x_t = interpolate(x0, x1, t)
    target = conditional_velocity(x_t, t, x1, TOWARD_NOISE)
    diff = target - velocity_fn(x_t, t)
    return float(np.sum(diff * diff))
