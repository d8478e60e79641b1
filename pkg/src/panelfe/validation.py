"""Input-validation helpers shared by the estimator and projection code."""

from __future__ import annotations

import numpy as np

from .errors import DisconnectedPanelError, InputError


def check_obs_arrays(unit, period, n_units, n_periods):
    """Validate dense 0-based id arrays; returns them as int64."""
    unit = np.asarray(unit, dtype=np.int64)
    period = np.asarray(period, dtype=np.int64)
    if unit.shape != period.shape or unit.ndim != 1:
        raise InputError("unit and period must be equal-length 1-d arrays")
    if unit.size == 0:
        raise InputError("empty observation set")
    if unit.min() < 0 or unit.max() >= n_units:
        raise InputError("unit ids out of range")
    if period.min() < 0 or period.max() >= n_periods:
        raise InputError("period ids out of range")
    return unit, period


def check_column(values, n):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != n:
        raise InputError(f"column length {values.shape[0]} != number of observations {n}")
    if not np.all(np.isfinite(values)):
        raise InputError("non-finite values in data column")
    return values


def check_weights(weights, n, floor=0.0):
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise InputError("weights must be one value per observation")
    if not np.all(np.isfinite(weights)) or np.any(weights <= floor):
        raise InputError("weights must be finite and positive")
    return weights


def connected_components(unit, period, n_units, n_periods):
    """Components of the bipartite unit-period incidence graph.

    Returns a list of dicts with 'units' and 'periods' index sets, one per
    component. A single component means all effect levels are comparable.
    """
    import scipy.sparse
    import scipy.sparse.csgraph

    n_nodes = n_units + n_periods
    rows = np.asarray(unit, dtype=np.int64)
    cols = np.asarray(period, dtype=np.int64) + n_units
    ones = np.ones(rows.shape[0], dtype=np.int8)
    graph = scipy.sparse.coo_matrix((ones, (rows, cols)), shape=(n_nodes, n_nodes))
    n_comp, labels = scipy.sparse.csgraph.connected_components(graph, directed=False)
    comps = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        comps.append({
            "units": set(members[members < n_units].tolist()),
            "periods": set((members[members >= n_units] - n_units).tolist()),
        })
    return comps


def check_connected(unit, period, n_units, n_periods):
    if len(unit) == n_units * n_periods:
        return  # balanced: the incidence graph is complete bipartite
    comps = connected_components(unit, period, n_units, n_periods)
    if len(comps) > 1:
        raise DisconnectedPanelError(comps)
