"""Uniformly-accelerated rectilinear motion over one interval.

This closed form is the single kinematics model in the system: the merge
environment steps vehicles with it and data fusion extrapolates stale road
user descriptions with it, so both stay mutually consistent.
"""

from __future__ import annotations

import math


def advance(x: float, y: float, speed: float, acceleration: float,
            heading: float, dt: float) -> tuple[float, float, float]:
    """Advance a point mass by ``dt`` seconds of constant acceleration.

    Displacement is (v*dt + a*dt^2/2) along the heading; the returned speed
    is clamped at zero (no reversing).
    """
    disp = speed * dt + 0.5 * acceleration * dt * dt
    nx = x + disp * math.cos(heading)
    ny = y + disp * math.sin(heading)
    nspeed = max(0.0, speed + acceleration * dt)
    return nx, ny, nspeed
