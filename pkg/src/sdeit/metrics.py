"""Reconstruction quality metrics: mSSIM, PSNR, MSE, CC."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConstantImageError, DimensionMismatchError
from .mesh import GridImage
from .regularizers import SsimConfig, mssim


@dataclass
class MetricsReport:
    mssim: float
    psnr_db: float  # +inf when MSE is exactly zero
    mse: float
    cc: float
    width: int
    height: int
    ssim_window: int
    ssim_data_range: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=True)

    CSV_HEADER = "mssim,psnr_db,mse,cc,width,height,ssim_window"

    def csv_row(self) -> str:
        return (
            f"{self.mssim!r},{self.psnr_db!r},{self.mse!r},{self.cc!r},"
            f"{self.width},{self.height},{self.ssim_window}"
        )


def evaluate_metrics(
    recon: GridImage,
    truth: GridImage,
    cfg: SsimConfig | None = None,
    max_i: float | None = None,
    masked: bool | None = None,
) -> MetricsReport:
    """Compare a reconstruction raster against ground truth.

    MSE is the mean squared pixel difference; PSNR uses MAX_I = max of the
    truth unless overridden; CC is the Pearson correlation; mSSIM runs with
    L = value range of the truth. With masked=True, metrics restrict to the
    in-domain pixels (SSIM to fully-inside windows).
    """
    x, y = recon.values, truth.values
    if x.shape != y.shape:
        raise DimensionMismatchError(f"image shapes differ: {x.shape} vs {y.shape}")

    truth_range = float(y.max() - y.min())
    if truth_range <= 0:
        raise ConstantImageError("CC and SSIM are undefined for a constant truth image")

    if cfg is None:
        cfg = SsimConfig()
    use_masked = cfg.masked if masked is None else masked
    cfg = dataclasses.replace(cfg, data_range=truth_range, masked=use_masked)

    if use_masked:
        sel = recon.mask & truth.mask
        xs, ys = x[sel], y[sel]
    else:
        xs, ys = x.ravel(), y.ravel()

    mse = float(np.mean((xs - ys) ** 2))
    peak = float(y.max()) if max_i is None else float(max_i)
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(peak**2 / mse)

    xc = xs - xs.mean()
    yc = ys - ys.mean()
    denom = math.sqrt(float(np.sum(xc**2)) * float(np.sum(yc**2)))
    if denom == 0.0:
        raise ConstantImageError("CC is undefined for a constant reconstruction image")
    cc = float(np.sum(xc * yc)) / denom

    score = mssim(recon, truth, cfg)
    return MetricsReport(
        mssim=score,
        psnr_db=psnr,
        mse=mse,
        cc=cc,
        width=recon.width,
        height=recon.height,
        ssim_window=cfg.window,
        ssim_data_range=cfg.data_range,
    )
