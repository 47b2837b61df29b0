"""Voltage sensitivities with respect to nodal conductivity.

The Jacobian is assembled by the adjoint method: one extra multi-RHS solve
with the measurement selectors as electrode current loads, then

    J[m, n] = -sum over elements T containing n of (area_T / 3) * grad(u_d) . grad(w_s)

with u_d the drive solution and w_s the selector (adjoint) solution. Entries
come out in mV per (mS/cm).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError
from .fem import CemOperator, MeasurementFrame, StimPatternSet, _MA_TO_A
from .mesh import Mesh


def _node_scatter(mesh: Mesh) -> sp.csr_matrix:
    """(n_elements, n_nodes) matrix with 1 at (element, each of its nodes)."""
    m = mesh.n_elements
    rows = np.repeat(np.arange(m), 3)
    cols = mesh.elements.ravel()
    return sp.csr_matrix((np.ones(3 * m), (rows, cols)), shape=(m, mesh.n_nodes))


def conductivity_jacobian(
    mesh: Mesh,
    sigma: np.ndarray,
    z: np.ndarray | float,
    patterns: StimPatternSet,
    operator: CemOperator | None = None,
) -> np.ndarray:
    """Jacobian of the predicted voltage vector wrt nodal conductivity.

    Shape (n_measurements, n_nodes), in mV per (mS/cm). A pre-built operator
    for the same (mesh, sigma, z) can be passed to reuse its factorization.
    """
    op = operator if operator is not None else CemOperator(mesh, sigma, z)

    u, _ = op.solve_electrode_loads(patterns.injections * _MA_TO_A)
    grad_u = op.element_gradients(u)  # (n_inj, m, 2)

    # Unique selectors across injections share one adjoint solve each.
    unique: dict[tuple[int, int], int] = {}
    for sel in patterns.selectors:
        for p, q in sel:
            unique.setdefault((int(p), int(q)), len(unique))
    loads = np.zeros((len(unique), patterns.n_electrodes))
    for (p, q), idx in unique.items():
        loads[idx, p] = 1.0
        loads[idx, q] = -1.0
    w, _ = op.solve_electrode_loads(loads)
    grad_w = op.element_gradients(w)  # (n_sel, m, 2)

    third_area = op.areas / 3.0
    scatter = _node_scatter(mesh)
    rows = []
    for k, sel in enumerate(patterns.selectors):
        if len(sel) == 0:
            continue
        idx = np.array([unique[(int(p), int(q))] for p, q in sel])
        dots = np.einsum("me,sme->sm", grad_u[k], grad_w[idx])
        rows.append(-(dots * third_area) @ scatter)
    if not rows:
        return np.zeros((0, mesh.n_nodes))
    return np.vstack(rows)


def data_loss_grad(
    frame: MeasurementFrame, predicted: np.ndarray, jac: np.ndarray
) -> np.ndarray:
    """Gradient of ||predicted - measured||^2 wrt nodal conductivity: 2 J^T (U - V)."""
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != frame.voltages.shape:
        raise DimensionMismatchError(
            f"predicted has {predicted.size} entries, frame has {frame.voltages.size}"
        )
    if jac.shape[0] != predicted.size:
        raise DimensionMismatchError(
            f"jacobian has {jac.shape[0]} rows for {predicted.size} measurements"
        )
    return 2.0 * (jac.T @ (predicted - frame.voltages))
