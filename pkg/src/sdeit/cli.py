"""Command-line interface: mesh generation, simulation, reconstruction,
evaluation, and rendering, with reproducible run directories.

Every reconstruct run writes one manifest (resolved config + input paths +
seeds + tool version) into its run directory; rerunning from the manifest
reproduces the loss CSV bit for bit with the stub provider.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import (
    GuidanceError,
    MeshInvariantError,
    MeshLayoutError,
    MeshParseError,
    NumericError,
    SdeitError,
)
from .fem import MeasurementFrame, add_noise, adjacent_patterns, assemble_and_solve, load_frame, save_frame
from .guidance import PROMPT_PRESETS
from .mesh import GridImage, load_grid, load_mesh, make_disk_mesh, save_grid, save_mesh
from .metrics import MetricsReport, evaluate_metrics
from .phantom import LungsHeartPhantom
from .recon import GuidanceSettings, ReconConfig, ReconResult, reconstruct_sdeit, reconstruct_tv
from .regularizers import SsimConfig, TvConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_INVARIANT = 4
EXIT_NUMERIC = 5
EXIT_REMOTE = 6

logger = logging.getLogger(__name__)


def _fail(kind: str, exc: Exception, code: int) -> None:
    click.echo(f"error: {kind}: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map toolkit errors onto distinct exit codes with one-line messages."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as exc:
            _fail("missing-file", exc, EXIT_MISSING_FILE)
        except MeshParseError as exc:
            _fail("parse", exc, EXIT_INVARIANT)
        except (MeshLayoutError, MeshInvariantError) as exc:
            _fail("invariant", exc, EXIT_INVARIANT)
        except GuidanceError as exc:
            _fail("guidance", exc, EXIT_REMOTE)
        except NumericError as exc:
            _fail("numeric", exc, EXIT_NUMERIC)
        except SdeitError as exc:
            _fail("invariant", exc, EXIT_INVARIANT)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.version_option(version=__version__)
def main():
    """Paired-data-free EIT reconstruction toolkit."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")


@main.command("mesh-gen")
@click.option("--radius", type=float, default=14.0, show_default=True, help="Disk radius (cm).")
@click.option("--electrodes", "n_electrodes", type=int, default=16, show_default=True)
@click.option("--electrode-width", type=float, default=2.5, show_default=True, help="Arc width (cm).")
@click.option("--target-elements", type=int, default=2176, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_guarded
def mesh_gen(radius, n_electrodes, electrode_width, target_elements, out_path):
    """Generate a disk mesh with equispaced boundary electrodes."""
    mesh = make_disk_mesh(radius, n_electrodes, electrode_width, target_elements)
    save_mesh(mesh, out_path)
    click.echo(f"wrote {out_path}: {mesh.n_nodes} nodes, {mesh.n_elements} elements")


@main.command()
@click.option("--forward-mesh", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--inverse-mesh", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Mesh intended for reconstruction; must differ from the forward mesh.")
@click.option("--phantom", type=click.Choice(["lungs-heart"]), default="lungs-heart", show_default=True)
@click.option("--amplitude", type=float, default=1.0, show_default=True, help="Current (mA).")
@click.option("--skip-injecting", is_flag=True, default=False)
@click.option("--snr-db", type=float, default=60.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--contact-impedance", type=float, default=1e-2, show_default=True)
@click.option("--allow-inverse-crime", is_flag=True, default=False,
              help="Permit identical forward and inverse meshes.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_guarded
def simulate(forward_mesh, inverse_mesh, phantom, amplitude, skip_injecting,
             snr_db, seed, contact_impedance, allow_inverse_crime, out_path):
    """Simulate a noisy measurement frame from an analytic phantom."""
    fwd = load_mesh(forward_mesh)
    inv = load_mesh(inverse_mesh)
    same_path = Path(forward_mesh).resolve() == Path(inverse_mesh).resolve()
    if (same_path or fwd == inv) and not allow_inverse_crime:
        _fail(
            "invariant",
            MeshInvariantError(
                "forward and inverse meshes are identical; pass --allow-inverse-crime to override"
            ),
            EXIT_INVARIANT,
        )
    ph = LungsHeartPhantom()
    pattern = adjacent_patterns(fwd.n_electrodes, amplitude, skip_injecting)
    _, voltages = assemble_and_solve(fwd, ph.nodal_field(fwd), contact_impedance, pattern)
    frame = MeasurementFrame(pattern=pattern, voltages=voltages)
    frame = add_noise(frame, snr_db, seed)
    save_frame(
        frame,
        out_path,
        protocol={
            "type": "adjacent",
            "amplitude_mA": amplitude,
            "skip_injecting": skip_injecting,
        },
    )
    click.echo(f"wrote {out_path}: {frame.voltages.size} measurements at {snr_db} dB")


def _config_from_options(options: dict) -> ReconConfig:
    guidance = GuidanceSettings(
        provider=options["provider"],
        prompt=PROMPT_PRESETS.get(options["prompt"], options["prompt"]),
        strength=options["strength"],
        steps=options["steps"],
        guidance_scale=options["guidance_scale"],
        seed=options["guidance_seed"],
        endpoint=options["endpoint"],
        timeout=options["timeout"],
        stub_levels=options["stub_levels"],
        stub_blur_sigma=options["stub_blur_sigma"],
        guide_every=options["guide_every"],
    )
    return ReconConfig(
        alpha0=options["alpha0"],
        alpha1=options["alpha1"],
        n_pre=options["n_pre"],
        n_total=options["n_total"],
        lr=options["lr"],
        grid_height=options["grid"],
        grid_width=options["grid"],
        enc_n=options["enc_n"],
        enc_bandwidth=options["enc_s"],
        enc_seed=options["enc_seed"],
        mlp_seed=options["mlp_seed"],
        sigma_floor=options["sigma_floor"],
        sigma_scale=options["sigma_scale"],
        contact_impedance=options["contact_impedance"],
        tv=TvConfig(beta=options["tv_beta"]),
        ssim=SsimConfig(window=options["ssim_window"]),
        guidance=guidance,
        log_every=options["log_every"],
        checkpoint_every=options["checkpoint_every"],
    )


_RECON_DEFAULTS = dict(
    method="sdeit", provider="stub", endpoint=None, timeout=60.0,
    alpha0=1e-6, alpha1=1e-2, n_pre=800, n_total=1200, lr=0.01,
    grid=128, enc_n=128, enc_s=1.0, enc_seed=0, mlp_seed=1,
    sigma_floor=1e-3, sigma_scale=1.0, contact_impedance=1e-2,
    tv_beta=1e-8, ssim_window=7, prompt="basic", strength=0.4, steps=50,
    guidance_scale=0.8, guidance_seed=0, stub_levels=4, stub_blur_sigma=3.0,
    guide_every=1, log_every=100, checkpoint_every=100, tv_alpha=None,
    tv_max_iters=60, seed=None,
)


@main.command()
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--frame", "frame_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", type=click.Choice(["tv", "inr-tv", "sdeit"]), default="sdeit", show_default=True)
@click.option("--provider", type=click.Choice(["stub", "remote"]), default="stub", show_default=True)
@click.option("--endpoint", type=str, default=None, envvar="SDEIT_GUIDANCE_URL",
              help="Guidance service URL (or env SDEIT_GUIDANCE_URL).")
@click.option("--timeout", type=float, default=60.0, show_default=True)
@click.option("--alpha0", type=float, default=1e-6, show_default=True)
@click.option("--alpha1", type=float, default=1e-2, show_default=True)
@click.option("--n-pre", type=int, default=800, show_default=True)
@click.option("--n-total", type=int, default=1200, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--grid", type=int, default=128, show_default=True)
@click.option("--enc-n", type=int, default=128, show_default=True)
@click.option("--enc-s", type=float, default=1.0, show_default=True)
@click.option("--enc-seed", type=int, default=0, show_default=True)
@click.option("--mlp-seed", type=int, default=1, show_default=True)
@click.option("--sigma-floor", type=float, default=1e-3, show_default=True)
@click.option("--sigma-scale", type=float, default=1.0, show_default=True)
@click.option("--contact-impedance", type=float, default=1e-2, show_default=True)
@click.option("--tv-beta", type=float, default=1e-8, show_default=True)
@click.option("--ssim-window", type=int, default=7, show_default=True)
@click.option("--prompt", type=str, default="basic", show_default=True,
              help="Prompt preset name (basic, full) or a literal prompt string.")
@click.option("--strength", type=float, default=0.4, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--guidance-scale", type=float, default=0.8, show_default=True)
@click.option("--guidance-seed", type=int, default=0, show_default=True)
@click.option("--stub-levels", type=int, default=4, show_default=True)
@click.option("--stub-blur-sigma", type=float, default=3.0, show_default=True)
@click.option("--guide-every", type=int, default=1, show_default=True)
@click.option("--log-every", type=int, default=100, show_default=True)
@click.option("--checkpoint-every", type=int, default=100, show_default=True)
@click.option("--tv-alpha", type=float, default=None, help="TV baseline weight (defaults to alpha0).")
@click.option("--tv-max-iters", type=int, default=60, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON config or a run manifest; explicit flags win over it.")
@click.option("--resume-from", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
@_guarded
def reconstruct(ctx, mesh_path, frame_path, config_path, resume_from, out_dir, **options):
    """Reconstruct conductivity from a measurement frame."""
    if config_path is not None:
        doc = json.loads(Path(config_path).read_text())
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # accept a manifest file directly
        for key, value in doc.items():
            key_norm = key.replace("-", "_")
            if key_norm not in options:
                raise MeshParseError(f"unknown config key {key!r}")
            source = ctx.get_parameter_source(key_norm)
            if source is None or source.name != "COMMANDLINE":
                options[key_norm] = value

    mesh = load_mesh(mesh_path)
    frame = load_frame(frame_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    method = options["method"]
    cfg = _config_from_options(options)
    if method == "inr-tv":
        cfg = dataclasses.replace(cfg, alpha1=0.0)

    manifest = {
        "tool_version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "command": "reconstruct",
        "inputs": {"mesh": str(Path(mesh_path).resolve()), "frame": str(Path(frame_path).resolve())},
        "config": {k: options[k] for k in _RECON_DEFAULTS},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    t0 = time.perf_counter()
    if method == "tv":
        alpha = options["tv_alpha"] if options["tv_alpha"] is not None else options["alpha0"]
        result = reconstruct_tv(
            mesh, frame, alpha=alpha, tv=cfg.tv, max_iters=options["tv_max_iters"],
            z=cfg.contact_impedance, sigma_floor=cfg.sigma_floor,
            grid_height=cfg.grid_height, grid_width=cfg.grid_width,
        )
    else:
        result = reconstruct_sdeit(mesh, frame, cfg, run_dir=out, resume_from=resume_from)
    elapsed = time.perf_counter() - t0

    _write_loss_csv(out / "loss.csv", result)
    save_grid(result.sigma_grid, out / "sigma_grid.json")
    np.save(out / "sigma_meas.npy", result.sigma_meas)
    _render_grid(result.sigma_grid, out / "sigma_grid.png")
    if result.sigma_dm is not None:
        save_grid(result.sigma_dm, out / "sigma_dm.json")
        _render_grid(result.sigma_dm, out / "sigma_dm.png")
    if result.warning:
        click.echo(f"warning: {result.warning}", err=True)
    click.echo(
        f"{method}: {result.iterations_run} iterations in {elapsed:.1f}s, "
        f"final data loss {result.loss_history[-1, 1]:.3e}"
    )


def _write_loss_csv(path: Path, result: ReconResult) -> None:
    lines = ["iteration,data,tv,ssim,total"]
    for row in result.loss_history:
        lines.append(f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}")
    path.write_text("\n".join(lines) + "\n")


def _render_grid(grid: GridImage, path: Path, cmap: str = "viridis") -> None:
    """PNG with the fixed colormap; the value range is recorded alongside."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lo, hi = float(grid.values.min()), float(grid.values.max())
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(grid.values, origin="lower", cmap=cmap, vmin=lo, vmax=hi,
                   extent=(-1, 1, -1, 1))
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xticks([]), ax.set_yticks([])
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    Path(str(path) + ".json").write_text(json.dumps({"lo": lo, "hi": hi, "cmap": cmap}))


@main.command()
@click.option("--recon-grid", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--truth-grid", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ssim-window", type=int, default=7, show_default=True)
@click.option("--masked", is_flag=True, default=False, help="Restrict metrics to in-domain pixels.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Append a CSV row here as well.")
@_guarded
def evaluate(recon_grid, truth_grid, ssim_window, masked, out_path, csv_path):
    """Metrics report (mSSIM, PSNR, MSE, CC) for a reconstruction raster."""
    recon = load_grid(recon_grid)
    truth = load_grid(truth_grid)
    report = evaluate_metrics(recon, truth, cfg=SsimConfig(window=ssim_window), masked=masked)
    Path(out_path).write_text(report.to_json())
    if csv_path:
        p = Path(csv_path)
        if not p.exists():
            p.write_text(MetricsReport.CSV_HEADER + "\n")
        with p.open("a") as f:
            f.write(report.csv_row() + "\n")
    click.echo(report.to_json())


@main.command()
@click.option("--grid", "grid_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_guarded
def render(grid_path, out_path):
    """Render a grid JSON file to PNG (fixed colormap, recorded value range)."""
    grid = load_grid(grid_path)
    _render_grid(grid, Path(out_path))
    click.echo(f"wrote {out_path}")


@main.command("truth-grid")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--grid", type=int, default=128, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@_guarded
def truth_grid(mesh_path, grid, out_path):
    """Ground-truth raster of the analytic phantom over a mesh's domain."""
    mesh = load_mesh(mesh_path)
    ph = LungsHeartPhantom()
    save_grid(ph.truth_grid(mesh, grid, grid), out_path)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
