"""Complete Electrode Model forward solver.

Assembles the standard P1 FEM system for the CEM: nodal potential unknowns
plus one unknown per electrode, contact impedances on the electrode boundary
terms, and the zero-sum constraint on electrode potentials eliminated through
a reduced basis (which keeps the system symmetric positive definite).

Interface units are cm, mS/cm, mA, Ω·cm and mV; internally the solve runs in
(cm, S/cm, A, V).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    AssemblyError,
    DimensionMismatchError,
    MeshParseError,
    NumericError,
)
from .mesh import Mesh, signed_areas, validate_mesh

_SOLVE_RTOL = 1e-10
_MS_TO_S = 1e-3  # mS/cm -> S/cm
_MA_TO_A = 1e-3
_V_TO_MV = 1e3


@dataclass
class StimPatternSet:
    """Current injections and voltage-difference selectors.

    injections : (n_inj, n_electrodes) float array in mA, each row sums to zero.
    selectors : per injection, an (m, 2) int array of (plus, minus) electrode
        indices; predicted voltage = U[plus] - U[minus].
    """

    injections: np.ndarray
    selectors: list[np.ndarray]

    def __post_init__(self):
        self.injections = np.asarray(self.injections, dtype=float)
        self.selectors = [np.asarray(s, dtype=np.int64).reshape(-1, 2) for s in self.selectors]
        if self.injections.ndim != 2:
            raise DimensionMismatchError("injections must be (n_inj, n_electrodes)")
        if len(self.selectors) != self.injections.shape[0]:
            raise DimensionMismatchError("one selector list per injection required")
        if not np.allclose(self.injections.sum(axis=1), 0.0, atol=1e-12):
            raise AssemblyError("every injection current vector must sum to zero")
        n_e = self.injections.shape[1]
        for k, sel in enumerate(self.selectors):
            if sel.size and (sel.min() < 0 or sel.max() >= n_e):
                raise DimensionMismatchError(f"selector list {k} references invalid electrodes")

    @property
    def n_electrodes(self) -> int:
        return self.injections.shape[1]

    @property
    def n_measurements(self) -> int:
        return sum(len(s) for s in self.selectors)


@dataclass
class MeasurementFrame:
    """Stimulation pattern plus a flat voltage vector (mV), injection-major."""

    pattern: StimPatternSet
    voltages: np.ndarray
    noise_snr_db: float | None = None

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float)
        if self.voltages.shape != (self.pattern.n_measurements,):
            raise DimensionMismatchError(
                f"frame has {self.voltages.size} voltages but the pattern defines "
                f"{self.pattern.n_measurements} measurements"
            )


@dataclass
class CemSolution:
    """Per-injection nodal potentials and electrode potentials (mV), plus z (Ω·cm)."""

    potentials: np.ndarray
    electrode_potentials: np.ndarray
    contact_impedances: np.ndarray


def adjacent_patterns(
    n_electrodes: int, amplitude: float = 1.0, skip_injecting: bool = False
) -> StimPatternSet:
    """Adjacent stimulation/measurement protocol.

    Injection k drives +amplitude on electrode k and -amplitude on k+1 (mod N).
    Selectors measure U[m] - U[m+1 mod N]; with skip_injecting, the selectors
    touching the current-carrying pair are dropped (3 per injection).
    """
    if amplitude <= 0:
        raise AssemblyError(f"amplitude must be positive, got {amplitude}")
    if skip_injecting and n_electrodes < 3:
        raise AssemblyError("skip_injecting needs at least 3 electrodes")
    n = n_electrodes
    injections = np.zeros((n, n))
    selectors = []
    for k in range(n):
        injections[k, k] = amplitude
        injections[k, (k + 1) % n] = -amplitude
        sel = []
        for m in range(n):
            if skip_injecting and ({m, (m + 1) % n} & {k, (k + 1) % n}):
                continue
            sel.append((m, (m + 1) % n))
        selectors.append(np.array(sel, dtype=np.int64))
    return StimPatternSet(injections=injections, selectors=selectors)


def _p1_geometry(mesh: Mesh):
    """Element areas (cm^2) and constant P1 basis gradients (1/cm)."""
    p = mesh.nodes[mesh.elements]  # (m, 3, 2)
    areas = signed_areas(mesh.nodes, mesh.elements)
    if np.any(areas <= 0):
        t = int(np.nonzero(areas <= 0)[0][0])
        raise AssemblyError(f"element {t} has non-positive area")
    # grad phi_i = (opposite edge rotated by 90°) / (2 A)
    b = np.empty((mesh.n_elements, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        b[:, i, 0] = p[:, j, 1] - p[:, k, 1]
        b[:, i, 1] = p[:, k, 0] - p[:, j, 0]
    b /= (2.0 * areas)[:, None, None]
    return areas, b


class CemOperator:
    """Factorized CEM system for one (mesh, sigma, z); shared by forward and adjoint solves.

    The electrode zero-sum constraint is eliminated with the basis
    U = [beta_0, ..., beta_{Ne-2}, -sum(beta)].
    """

    def __init__(self, mesh: Mesh, sigma: np.ndarray, z: np.ndarray | float):
        validate_mesh(mesh)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mesh.n_nodes,):
            raise DimensionMismatchError(
                f"sigma has {sigma.size} values for {mesh.n_nodes} nodes"
            )
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise AssemblyError("conductivity must be positive and finite everywhere")
        n_e = mesh.n_electrodes
        z = np.broadcast_to(np.asarray(z, dtype=float), (n_e,)).copy()
        if np.any(z <= 0):
            raise AssemblyError("contact impedances must be positive")

        self.mesh = mesh
        self.sigma = sigma
        self.z = z
        self.areas, self.basis_grads = _p1_geometry(mesh)

        n = mesh.n_nodes
        sigma_si = sigma * _MS_TO_S
        sigma_bar = sigma_si[mesh.elements].mean(axis=1)

        local = np.einsum("m,mie,mje->mij", sigma_bar * self.areas, self.basis_grads, self.basis_grads)
        rows = np.repeat(mesh.elements, 3, axis=1).ravel()
        cols = np.tile(mesh.elements, (1, 3)).ravel()
        entries = [(rows, cols, local.ravel())]

        electrode_lengths = np.zeros(n_e)
        w_cols: list[np.ndarray] = []
        for q, group in enumerate(mesh.electrodes):
            i, j = group[:, 0], group[:, 1]
            ell = np.hypot(
                mesh.nodes[i, 0] - mesh.nodes[j, 0], mesh.nodes[i, 1] - mesh.nodes[j, 1]
            )
            if np.any(ell <= 0):
                raise AssemblyError(f"electrode {q} has a zero-length edge")
            electrode_lengths[q] = ell.sum()
            c = 1.0 / self.z[q]
            er = np.concatenate([i, i, j, j])
            ec = np.concatenate([i, j, i, j])
            ev = np.concatenate([ell / 3.0, ell / 6.0, ell / 6.0, ell / 3.0]) * c
            entries.append((er, ec, ev))
            w = np.zeros(n)
            np.add.at(w, i, -0.5 * ell * c)
            np.add.at(w, j, -0.5 * ell * c)
            w_cols.append(w)
        if np.any(electrode_lengths <= 0):
            raise AssemblyError("zero-measure electrode makes the system singular")
        self.electrode_lengths = electrode_lengths

        rows = np.concatenate([e[0] for e in entries])
        cols = np.concatenate([e[1] for e in entries])
        vals = np.concatenate([e[2] for e in entries])
        block_nn = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))

        w_mat = np.column_stack(w_cols)  # (n, n_e)
        d_diag = electrode_lengths / self.z
        # Reduced electrode basis C = [I; -1^T]
        w_red = w_mat[:, : n_e - 1] - w_mat[:, [n_e - 1]]
        d_red = np.diag(d_diag[: n_e - 1]) + d_diag[n_e - 1]

        system = sp.bmat(
            [
                [block_nn, sp.csc_matrix(w_red)],
                [sp.csc_matrix(w_red.T), sp.csc_matrix(d_red)],
            ],
            format="csc",
        )
        self._system = system
        # Extended-precision copy: refinement residuals must resolve digits the
        # float64 matvec cannot, or the refinement stalls at kappa * eps.
        self._system_ext = system.astype(np.longdouble)
        # Symmetric Jacobi equilibration: electrode 1/z terms dwarf the
        # conductivity block, so factorize D^-1 A D^-1 instead of A.
        diag = system.diagonal()
        if np.any(diag <= 0):
            raise AssemblyError("system diagonal is not positive; degenerate assembly")
        self._dscale = 1.0 / np.sqrt(diag)
        scaled = sp.diags(self._dscale) @ system @ sp.diags(self._dscale)
        self._norm1 = sp.linalg.norm(system, 1)
        try:
            self._lu = splu(scaled.tocsc())
        except RuntimeError as exc:
            raise AssemblyError(f"CEM system factorization failed: {exc}") from exc

    def solve_electrode_loads(self, loads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve for electrode current loads (rows, in A); returns (u [V], U [V]).

        Results come back in extended precision: the solution is refined with
        extended-precision residuals (plain LU leaves forward error ~ kappa*eps,
        which finite-difference oracles downstream would see), and selector
        differences of nearly equal electrode potentials keep their digits.
        """
        loads = np.atleast_2d(np.asarray(loads, dtype=float))
        n, n_e = self.mesh.n_nodes, self.mesh.n_electrodes
        rhs = np.zeros((self._system.shape[0], loads.shape[0]))
        rhs[n:, :] = (loads[:, : n_e - 1] - loads[:, [n_e - 1]]).T
        d = self._dscale[:, None]
        x = (d * self._lu.solve(d * rhs)).astype(np.longdouble)
        rhs_ext = rhs.astype(np.longdouble)
        for _ in range(3):
            resid = np.asarray(rhs_ext - self._system_ext @ x, dtype=float)
            dx = d * self._lu.solve(d * resid)
            x = x + dx
            if np.linalg.norm(dx) <= 1e-16 * np.linalg.norm(x.astype(float)):
                break
        resid = np.asarray(rhs_ext - self._system_ext @ x, dtype=float)
        xf = x.astype(float)
        denom = self._norm1 * np.linalg.norm(xf) + np.linalg.norm(rhs)
        backward = np.linalg.norm(resid) / denom if denom > 0 else 0.0
        if backward > _SOLVE_RTOL:
            raise NumericError(
                f"linear solve backward error {backward:.2e} exceeds tolerance {_SOLVE_RTOL:.0e}"
            )
        u = x[:n, :].T
        beta = x[n:, :].T
        electrode_u = np.column_stack([beta, -beta.sum(axis=1)])
        return u, electrode_u

    def element_gradients(self, nodal: np.ndarray) -> np.ndarray:
        """Constant per-element gradient of a P1 field; nodal (..., n_nodes) -> (..., m, 2)."""
        vals = np.asarray(nodal, dtype=float)[..., self.mesh.elements]  # (..., m, 3)
        return np.einsum("...mi,mie->...me", vals, self.basis_grads)

    def electrode_currents(self, potentials_mv: np.ndarray, electrode_mv: np.ndarray) -> np.ndarray:
        """Currents (mA) through each electrode, from the Robin condition (U - u)/z."""
        u = np.atleast_2d(potentials_mv)
        big_u = np.atleast_2d(electrode_mv)
        out = np.zeros_like(big_u)
        for q, group in enumerate(self.mesh.electrodes):
            i, j = group[:, 0], group[:, 1]
            ell = np.hypot(
                self.mesh.nodes[i, 0] - self.mesh.nodes[j, 0],
                self.mesh.nodes[i, 1] - self.mesh.nodes[j, 1],
            )
            line_integral = (0.5 * ell * (u[:, i] + u[:, j])).sum(axis=1)
            out[:, q] = (big_u[:, q] * self.electrode_lengths[q] - line_integral) / self.z[q]
        return out


def assemble_and_solve(
    mesh: Mesh,
    sigma: np.ndarray,
    z: np.ndarray | float,
    patterns: StimPatternSet,
) -> tuple[CemSolution, np.ndarray]:
    """Solve the CEM for every injection and apply the measurement selectors.

    Returns the solution (potentials in mV) and the predicted voltage vector
    (mV, injection-major then selector order).
    """
    if patterns.n_electrodes != mesh.n_electrodes:
        raise DimensionMismatchError(
            f"pattern assumes {patterns.n_electrodes} electrodes, mesh has {mesh.n_electrodes}"
        )
    op = CemOperator(mesh, sigma, z)
    u, electrode_u = op.solve_electrode_loads(patterns.injections * _MA_TO_A)
    predicted = np.concatenate(
        [
            electrode_u[k, sel[:, 0]] - electrode_u[k, sel[:, 1]]
            for k, sel in enumerate(patterns.selectors)
        ]
    ).astype(float) * _V_TO_MV
    solution = CemSolution(
        potentials=u.astype(float) * _V_TO_MV,
        electrode_potentials=electrode_u.astype(float) * _V_TO_MV,
        contact_impedances=op.z,
    )
    return solution, predicted


def add_noise(frame: MeasurementFrame, snr_db: float, seed: int) -> MeasurementFrame:
    """Add i.i.d. Gaussian noise with std = rms(V) * 10^(-snr_db/20); seeded."""
    if frame.voltages.size == 0:
        raise DimensionMismatchError("cannot add noise to an empty frame")
    if np.isinf(snr_db):
        return MeasurementFrame(
            pattern=frame.pattern, voltages=frame.voltages.copy(), noise_snr_db=float(snr_db)
        )
    rms = float(np.sqrt(np.mean(frame.voltages**2)))
    std = rms * 10.0 ** (-snr_db / 20.0)
    rng = np.random.default_rng(seed)
    noisy = frame.voltages + rng.normal(0.0, std, size=frame.voltages.size)
    return MeasurementFrame(pattern=frame.pattern, voltages=noisy, noise_snr_db=float(snr_db))


def save_frame(frame: MeasurementFrame, path, protocol: dict | None = None) -> None:
    """Write the measurement JSON schema.

    Only adjacent-protocol frames are representable; `protocol` supplies the
    amplitude/skip flags used to rebuild the pattern on load.
    """
    if protocol is None:
        protocol = {"type": "adjacent", "amplitude_mA": 1.0, "skip_injecting": False}
    doc = {
        "n_electrodes": frame.pattern.n_electrodes,
        "protocol": protocol,
        "voltages": [float(v) for v in frame.voltages],
        "snr_db": frame.noise_snr_db if frame.noise_snr_db is not None else None,
    }
    Path(path).write_text(json.dumps(doc))


def load_frame(path) -> MeasurementFrame:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise MeshParseError(f"cannot read measurement file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"measurement file {path} is not valid JSON: {exc}") from exc
    try:
        n_e = int(doc["n_electrodes"])
        proto = doc["protocol"]
        if proto["type"] != "adjacent":
            raise MeshParseError(f"unsupported protocol type {proto['type']!r}")
        pattern = adjacent_patterns(
            n_e,
            amplitude=float(proto.get("amplitude_mA", 1.0)),
            skip_injecting=bool(proto.get("skip_injecting", False)),
        )
        voltages = np.array(doc["voltages"], dtype=float)
        snr = doc.get("snr_db")
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshParseError(f"measurement file {path} is malformed: {exc}") from exc
    return MeasurementFrame(
        pattern=pattern, voltages=voltages, noise_snr_db=None if snr is None else float(snr)
    )
