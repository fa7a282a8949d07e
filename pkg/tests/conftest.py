"""Shared fixtures: the speedway-style oval is expensive to optimize, so it
is built once per session and shared across test modules."""
from __future__ import annotations

import pytest

from racestack import track


@pytest.fixture(scope="session")
def oval_boundaries():
    return track.make_oval_boundaries()


@pytest.fixture(scope="session")
def oval_path(oval_boundaries):
    return track.optimize_min_curvature(oval_boundaries, 1.5)


@pytest.fixture(scope="session")
def oval_raceline(oval_boundaries, oval_path):
    import numpy as np

    params = track.VelocityProfileParams()
    v = track.compute_velocity_profile(oval_path, params, closed=True)
    s_center = track.polyline_arclength(oval_boundaries.centerline)
    s_path = track.polyline_arclength(oval_path)
    scale = s_path[-1] / s_center[-1]
    banking = np.column_stack(
        [s_center * scale, oval_boundaries.bank_at_station(s_center)]
    )
    return track.fit_quintic_spline(
        np.column_stack([oval_path, v]), closed=True, banking=banking
    )
