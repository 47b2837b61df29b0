"""Reconstruction drivers.

reconstruct_sdeit runs the guided INR optimization: every iteration evaluates
the network at the FE nodes (and the image grid once guidance is active),
solves the forward problem, assembles the data gradient through the adjoint
Jacobian, adds the TV term, and — from iteration n_pre on — obtains a guidance
image from the provider and adds the SSIM alignment term. Parameters update
by Adam. With alpha1 = 0 the provider is never invoked and the loop reduces
to plain INR+TV.

reconstruct_tv is the conventional baseline: Gauss-Newton on nodal
conductivity with a lagged-diffusivity TV Hessian and Armijo backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GuidanceError, NumericError
from .fem import CemOperator, MeasurementFrame, _MA_TO_A, _V_TO_MV
from .guidance import (
    DEFAULT_PROMPT,
    GuidanceRequest,
    RemoteProvider,
    StubProvider,
    normalize_with_vjp,
)
from .inr import (
    adam_init,
    adam_step,
    default_widths,
    load_checkpoint,
    make_encoder,
    mlp_forward_tape,
    mlp_init,
    save_checkpoint,
    encode,
)
from .mesh import GridImage, Mesh, grid_coords, normalized_node_coords, rasterize_field
from .regularizers import SsimConfig, TvConfig, ssim_loss_grad, tv_diffusion_matrix, tv_loss_grad
from .sensitivity import conductivity_jacobian, data_loss_grad

logger = logging.getLogger(__name__)

# Loss bookkeeping runs on voltages in volts (frames store mV): the default
# regularization weights balance the terms at that scale, and log-losses then
# land in the familiar -2..-5 decade range.
_MV2_TO_V2 = 1e-6


@dataclass
class GuidanceSettings:
    """Provider selection plus the (C, D, T, G, seed) request parameters."""

    provider: str = "stub"  # stub | remote
    prompt: str = DEFAULT_PROMPT
    strength: float = 0.4
    steps: int = 50
    guidance_scale: float = 0.8
    seed: int = 0
    endpoint: str | None = None
    timeout: float = 60.0
    stub_levels: int = 4
    stub_blur_sigma: float = 3.0
    guide_every: int = 1

    def build_provider(self):
        if self.provider == "stub":
            return StubProvider(levels=self.stub_levels, blur_sigma=self.stub_blur_sigma)
        if self.provider == "remote":
            if not self.endpoint:
                raise ValueError("remote guidance requires an endpoint")
            return RemoteProvider(self.endpoint, timeout=self.timeout)
        raise ValueError(f"unknown guidance provider {self.provider!r}")


@dataclass
class ReconConfig:
    alpha0: float = 1e-6
    alpha1: float = 1e-2
    n_pre: int = 800
    n_total: int = 1200
    lr: float = 0.01
    grid_height: int = 128
    grid_width: int = 128
    enc_n: int = 128
    enc_bandwidth: float = 1.0
    enc_seed: int = 0
    mlp_seed: int = 1
    hidden_width: int = 128
    n_hidden: int = 4
    sigma_floor: float = 1e-3
    sigma_scale: float = 1.0
    contact_impedance: float = 1e-2
    tv: TvConfig = field(default_factory=TvConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    log_every: int = 100
    checkpoint_every: int = 100

    def __post_init__(self):
        if not 0 <= self.n_pre <= self.n_total:
            raise ValueError(f"need 0 <= n_pre <= n_total, got {self.n_pre}, {self.n_total}")
        if self.alpha0 < 0 or self.alpha1 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.guidance.guide_every < 1:
            raise ValueError("guide_every must be >= 1")


@dataclass
class ReconResult:
    sigma_meas: np.ndarray
    sigma_grid: GridImage
    sigma_dm: GridImage | None
    loss_history: np.ndarray  # columns: iteration, data, tv, ssim, total
    iterations_run: int
    warning: str | None = None
    provider_calls: int = 0


def _predicted_voltages(op: CemOperator, frame: MeasurementFrame) -> np.ndarray:
    pattern = frame.pattern
    u, electrode_u = op.solve_electrode_loads(pattern.injections * _MA_TO_A)
    predicted = np.concatenate(
        [
            electrode_u[k, sel[:, 0]] - electrode_u[k, sel[:, 1]]
            for k, sel in enumerate(pattern.selectors)
        ]
    ).astype(float) * _V_TO_MV
    return predicted


def reconstruct_sdeit(
    mesh: Mesh,
    frame: MeasurementFrame,
    cfg: ReconConfig,
    provider=None,
    run_dir=None,
    resume_from=None,
) -> ReconResult:
    """Guided INR reconstruction (plain INR+TV when cfg.alpha1 == 0)."""
    use_guidance = cfg.alpha1 > 0
    if provider is None and use_guidance:
        provider = cfg.guidance.build_provider()

    coords_nodes = normalized_node_coords(mesh).points
    n_nodes = mesh.n_nodes
    h, w = cfg.grid_height, cfg.grid_width

    start_step = 0
    if resume_from is not None:
        encoder, params, state, start_step = load_checkpoint(resume_from)
        if encoder.feature_dim != 2 * cfg.enc_n:
            raise NumericError(
                f"checkpoint encoder has {encoder.feature_dim // 2} frequencies, "
                f"config asks for {cfg.enc_n}"
            )
    else:
        encoder = make_encoder(cfg.enc_n, cfg.enc_bandwidth, cfg.enc_seed)
        params = mlp_init(
            default_widths(encoder, cfg.hidden_width, cfg.n_hidden),
            cfg.mlp_seed,
            sigma_floor=cfg.sigma_floor,
            sigma_scale=cfg.sigma_scale,
        )
        state = adam_init(params)

    feats_nodes = encode(encoder, coords_nodes)
    if use_guidance:
        feats_all = np.vstack([feats_nodes, encode(encoder, grid_coords(h, w).points)])
    else:
        feats_all = feats_nodes
    grid_mask = rasterize_field(mesh, np.zeros(n_nodes), w, h).mask

    run_dir = Path(run_dir) if run_dir is not None else None
    history = []
    last_dm: GridImage | None = None
    provider_calls = 0
    warning = None

    sigma_all, backward = None, None
    for e in range(start_step, cfg.n_total):
        sigma_all, backward = mlp_forward_tape(params, feats_all)
        sigma_meas = sigma_all[:n_nodes]

        op = CemOperator(mesh, sigma_meas, cfg.contact_impedance)
        predicted = _predicted_voltages(op, frame)
        jac = conductivity_jacobian(mesh, sigma_meas, cfg.contact_impedance,
                                    frame.pattern, operator=op)
        residual = predicted - frame.voltages
        data_term = float(residual @ residual) * _MV2_TO_V2
        g_data = data_loss_grad(frame, predicted, jac) * _MV2_TO_V2

        tv_term, g_tv = tv_loss_grad(mesh, sigma_meas, cfg.tv)

        ssim_term = 0.0
        grid_cot = None
        if use_guidance and e >= cfg.n_pre:
            grid_vals = sigma_all[n_nodes:].reshape(h, w)
            norm_vals, lo, hi, vjp = normalize_with_vjp(grid_vals)
            if (e - cfg.n_pre) % cfg.guidance.guide_every == 0 or last_dm is None:
                req = GuidanceRequest(
                    image=GridImage(values=norm_vals, mask=grid_mask),
                    prompt=cfg.guidance.prompt,
                    strength=cfg.guidance.strength,
                    steps=cfg.guidance.steps,
                    guidance_scale=cfg.guidance.guidance_scale,
                    seed=cfg.guidance.seed,
                )
                try:
                    last_dm = provider.guide(req).image
                    provider_calls += 1
                except GuidanceError as err:
                    logger.warning("guidance call failed at iteration %d: %s", e, err)
                    warning = f"guidance failure at iteration {e}: {err}"
            if last_dm is not None:
                ssim_term, g_norm = ssim_loss_grad(
                    GridImage(values=norm_vals, mask=grid_mask), last_dm, cfg.ssim
                )
                grid_cot = cfg.alpha1 * vjp(g_norm).ravel()

        total = data_term + cfg.alpha0 * tv_term + cfg.alpha1 * ssim_term
        history.append((e, data_term, tv_term, ssim_term, total))
        if not np.isfinite(total):
            if run_dir is not None:
                save_checkpoint(run_dir / "diagnostic_checkpoint.npz", encoder, params, state, e)
            raise NumericError(f"non-finite loss {total} at iteration {e}")
        if cfg.log_every and e % cfg.log_every == 0:
            logger.info(
                "iter %5d  data %.6e  tv %.6e  ssim %.6e  total %.6e",
                e, data_term, tv_term, ssim_term, total,
            )

        cot = g_data + cfg.alpha0 * g_tv
        if use_guidance:
            full_cot = np.zeros(feats_all.shape[0])
            full_cot[:n_nodes] = cot
            if grid_cot is not None:
                full_cot[n_nodes:] = grid_cot
        else:
            full_cot = cot
        grads = backward(full_cot)
        state, params = adam_step(state, params, grads, cfg.lr)

        if run_dir is not None and cfg.checkpoint_every and (e + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(run_dir / "checkpoint.npz", encoder, params, state, e + 1)

    # Final fields from the post-update parameters.
    sigma_meas = mlp_forward_tape(params, feats_nodes)[0]
    grid_vals = mlp_forward_tape(params, encode(encoder, grid_coords(h, w).points))[0]
    sigma_grid = GridImage(values=grid_vals.reshape(h, w), mask=grid_mask)
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.npz", encoder, params, state, cfg.n_total)

    return ReconResult(
        sigma_meas=sigma_meas,
        sigma_grid=sigma_grid,
        sigma_dm=last_dm,
        loss_history=np.array(history, dtype=float),
        iterations_run=len(history),
        warning=warning,
        provider_calls=provider_calls,
    )


def fit_constant_conductivity(
    mesh: Mesh, frame: MeasurementFrame, z: float | np.ndarray = 1e-2
) -> float:
    """One-parameter least-squares fit of a homogeneous conductivity to the data.

    Uses the near-exact scaling U(c) ~ U(c0) * c0 / c, iterated twice.
    """
    c = 1.0
    for _ in range(2):
        op = CemOperator(mesh, np.full(mesh.n_nodes, c), z)
        u_c = _predicted_voltages(op, frame)
        denom = float(frame.voltages @ u_c)
        if denom <= 0:
            return c
        c = c * float(u_c @ u_c) / denom
    return c


def reconstruct_tv(
    mesh: Mesh,
    frame: MeasurementFrame,
    alpha: float,
    tv: TvConfig,
    max_iters: int,
    z: float | np.ndarray = 1e-2,
    sigma0: np.ndarray | None = None,
    sigma_floor: float = 1e-3,
    grid_height: int = 128,
    grid_width: int = 128,
    rel_tol: float = 1e-6,
) -> ReconResult:
    """Gauss-Newton TV-regularized reconstruction of nodal conductivity."""
    if sigma0 is None:
        sigma = np.full(mesh.n_nodes, fit_constant_conductivity(mesh, frame, z))
    else:
        sigma = np.asarray(sigma0, dtype=float).copy()

    def objective(s):
        op = CemOperator(mesh, s, z)
        pred = _predicted_voltages(op, frame)
        r = pred - frame.voltages
        tv_val, _ = tv_loss_grad(mesh, s, tv)
        return float(r @ r) * _MV2_TO_V2 + alpha * tv_val, op, pred, r, tv_val

    history = []
    warning = None
    f_val, op, pred, r, tv_val = objective(sigma)
    for it in range(max_iters):
        history.append((it, float(r @ r) * _MV2_TO_V2, tv_val, 0.0, f_val))

        jac = conductivity_jacobian(mesh, sigma, z, frame.pattern, operator=op)
        g = 2.0 * (jac.T @ r) * _MV2_TO_V2
        _, g_tv = tv_loss_grad(mesh, sigma, tv)
        g = g + alpha * g_tv

        h_mat = 2.0 * (jac.T @ jac) * _MV2_TO_V2
        h_mat += alpha * tv_diffusion_matrix(mesh, sigma, tv).toarray()
        h_mat[np.diag_indices_from(h_mat)] += 1e-9 * np.trace(h_mat) / h_mat.shape[0]

        # Nodes pinned at the floor whose gradient pushes further down stay
        # fixed this iteration; projecting the unrestricted Newton step instead
        # can produce an ascent direction.
        bound = (sigma <= sigma_floor * (1 + 1e-9)) & (g > 0)
        delta = np.zeros_like(sigma)
        free = ~bound
        delta[free] = np.linalg.solve(h_mat[np.ix_(free, free)], -g[free])

        t = 1.0
        accepted = False
        for _ in range(30):
            cand = np.maximum(sigma + t * delta, sigma_floor)
            step = cand - sigma
            f_new, op_new, pred_new, r_new, tv_new = objective(cand)
            if f_new <= f_val + 1e-4 * float(g @ step):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            warning = f"line search failed at iteration {it}; returning best iterate"
            logger.warning(warning)
            break
        rel_change = abs(f_val - f_new) / max(abs(f_val), 1e-30)
        sigma, f_val, op, pred, r, tv_val = cand, f_new, op_new, pred_new, r_new, tv_new
        if rel_change < rel_tol:
            history.append((it + 1, float(r @ r) * _MV2_TO_V2, tv_val, 0.0, f_val))
            break

    bg = float(np.mean(sigma[_boundary_nodes(mesh)]))
    sigma_grid = rasterize_field(mesh, sigma, grid_width, grid_height, background=bg)
    return ReconResult(
        sigma_meas=sigma,
        sigma_grid=sigma_grid,
        sigma_dm=None,
        loss_history=np.array(history, dtype=float),
        iterations_run=len(history),
        warning=warning,
    )


def _boundary_nodes(mesh: Mesh) -> np.ndarray:
    from .mesh import boundary_edges

    return np.array(sorted({i for e in boundary_edges(mesh) for i in e}), dtype=np.int64)


def inr_tv_config(cfg: ReconConfig) -> ReconConfig:
    """The alpha1-disabled reduction used by the inr-tv method."""
    return replace(cfg, alpha1=0.0)
