"""Piecewise-linear scattered-data interpolation over a Delaunay triangulation."""

from __future__ import annotations

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import Delaunay, QhullError, cKDTree


class ScatteredField:
    """Vector-valued interpolant ``f(x, y)`` through scattered sites.

    Inside the convex hull of the sites the field is linear on every
    Delaunay triangle, so affine maps are reproduced exactly. Outside the
    hull it takes the value of the nearest site. Queries that coincide with
    a site return that site's value bit-for-bit.
    """

    def __init__(self, sites: np.ndarray, values: np.ndarray):
        sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64)
        values = values.reshape(len(sites), -1)
        _, first = np.unique(sites, axis=0, return_index=True)
        first.sort()
        sites, values = sites[first], values[first]
        if len(sites) < 3:
            raise ValueError("mapping underdetermined")
        centred = sites - sites.mean(axis=0)
        if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
            raise ValueError("mapping underdetermined")
        try:
            tri = Delaunay(sites)
        except QhullError:
            raise ValueError("mapping underdetermined") from None
        self.sites = sites
        self.values = values
        self._linear = LinearNDInterpolator(tri, values)
        self._tree = cKDTree(sites)

    def __len__(self) -> int:
        return len(self.sites)

    def __call__(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate at (M, 2) points; returns (values (M, k), inside_hull (M,))."""
        q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
        out = self._linear(q).reshape(len(q), -1)
        inside = ~np.isnan(out).any(axis=1)
        dist, nearest = self._tree.query(q)
        outside = ~inside
        out[outside] = self.values[nearest[outside]]
        exact = dist == 0
        out[exact] = self.values[nearest[exact]]
        return out, inside
