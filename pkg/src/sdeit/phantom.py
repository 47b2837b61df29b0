"""Analytic conductivity phantoms for simulation studies.

The default phantom lives in a 14 cm disk: two elliptical lungs and a circular
heart over a uniform background (0.25 / 1.0 / 1.5 mS/cm).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import GridImage, Mesh, grid_coords, normalization_transform, rasterize_field


@dataclass
class LungsHeartPhantom:
    """Geometry in cm and region conductivities in mS/cm. Heart wins overlaps."""

    background: float = 1.0
    lung_value: float = 0.25
    heart_value: float = 1.5
    lung_centers: tuple = ((-6.0, 0.0), (6.0, 0.0))
    lung_semi_axes: tuple = (3.5, 6.0)
    heart_center: tuple = (0.0, 4.5)
    heart_radius: float = 3.0

    def values_at(self, points_cm: np.ndarray) -> np.ndarray:
        """Conductivity at arbitrary (n, 2) points in cm."""
        pts = np.asarray(points_cm, dtype=float)
        out = np.full(pts.shape[0], self.background)
        ax, ay = self.lung_semi_axes
        for cx, cy in self.lung_centers:
            inside = ((pts[:, 0] - cx) / ax) ** 2 + ((pts[:, 1] - cy) / ay) ** 2 <= 1.0
            out[inside] = self.lung_value
        hx, hy = self.heart_center
        inside = (pts[:, 0] - hx) ** 2 + (pts[:, 1] - hy) ** 2 <= self.heart_radius**2
        out[inside] = self.heart_value
        return out

    def nodal_field(self, mesh: Mesh) -> np.ndarray:
        return self.values_at(mesh.nodes)

    def truth_grid(self, mesh: Mesh, width: int, height: int) -> GridImage:
        """Ground-truth raster: analytic values at pixel centers, background outside."""
        center, scale = normalization_transform(mesh)
        pts = grid_coords(height, width).points * scale + center
        vals = self.values_at(pts).reshape(height, width)
        mask = rasterize_field(mesh, np.zeros(mesh.n_nodes), width, height).mask
        vals[~mask] = self.background
        return GridImage(values=vals, mask=mask)
