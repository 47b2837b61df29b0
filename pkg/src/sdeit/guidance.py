"""Guidance-provider boundary.

Conductivity rasters are min-max normalized to [0, 1], handed to a provider
(the in-process deterministic stub, or a remote service speaking the wire
protocol), and the returned guidance image is compared against the
reconstruction through the SSIM loss only.

Providers are dimension- and range-preserving; strength 0 is the identity.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
import requests
from scipy.ndimage import gaussian_filter

from .errors import (
    DimensionMismatchError,
    GuidanceBodyError,
    GuidanceInvariantError,
    GuidanceStatusError,
    GuidanceTimeoutError,
    GuidanceTransportError,
)
from .mesh import GridImage

DEFAULT_PROMPT = "Shapes. Clean background. Simple form."
FULL_PROMPT = (
    "Shapes. The one at the upper right is a triangle. "
    "The one at the lower left is a rectangle. Clean background. Simple form."
)
PROMPT_PRESETS = {"basic": DEFAULT_PROMPT, "full": FULL_PROMPT}

_DEGENERATE_RANGE = 1e-12


@dataclass
class GuidanceRequest:
    """Normalized image plus the diffusion-style control parameters (C, D, T, G, seed)."""

    image: GridImage
    prompt: str = DEFAULT_PROMPT
    strength: float = 0.4
    steps: int = 50
    guidance_scale: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise GuidanceInvariantError(f"strength must be in [0, 1], got {self.strength}")
        if self.steps < 1:
            raise GuidanceInvariantError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0.0:
            raise GuidanceInvariantError(
                f"guidance scale must be >= 0, got {self.guidance_scale}"
            )
        v = self.image.values
        if v.size and (v.min() < -_DEGENERATE_RANGE or v.max() > 1.0 + _DEGENERATE_RANGE):
            raise GuidanceInvariantError("request image values must lie in [0, 1]")


@dataclass
class GuidanceResponse:
    image: GridImage
    provider_id: str
    elapsed_s: float


def normalize_image(raster: GridImage) -> tuple[GridImage, float, float]:
    """Affine map [min, max] -> [0, 1]; a degenerate range maps to constant 0.5."""
    v = raster.values
    if not np.all(np.isfinite(v)):
        raise DimensionMismatchError("raster contains non-finite values")
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < _DEGENERATE_RANGE:
        out = np.full_like(v, 0.5)
        return GridImage(values=out, mask=raster.mask.copy(), value_range=(lo, lo)), lo, lo
    out = (v - lo) / (hi - lo)
    return GridImage(values=out, mask=raster.mask.copy(), value_range=(lo, hi)), lo, hi


def denormalize_image(img: GridImage, lo: float, hi: float) -> GridImage:
    return GridImage(values=img.values * (hi - lo) + lo, mask=img.mask.copy())


def normalize_with_vjp(values: np.ndarray):
    """Normalization plus the exact (a.e.) vector-Jacobian product.

    The min and max are functions of the pixels: perturbing the argmin/argmax
    pixel moves every normalized value. The VJP accounts for those terms, so
    finite differences of downstream losses match the analytic chain.
    """
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < _DEGENERATE_RANGE:
        out = np.full_like(values, 0.5)

        def vjp_const(cot: np.ndarray) -> np.ndarray:
            return np.zeros_like(values)

        return out, lo, lo, vjp_const

    span = hi - lo
    i_min = np.unravel_index(int(values.argmin()), values.shape)
    i_max = np.unravel_index(int(values.argmax()), values.shape)
    out = (values - lo) / span

    def vjp(cot: np.ndarray) -> np.ndarray:
        g = cot / span
        # d out_k / d lo = (values_k - hi) / span^2 ; d out_k / d hi = -(values_k - lo) / span^2
        g_lo = float(np.sum(cot * (values - hi))) / span**2
        g_hi = -float(np.sum(cot * (values - lo))) / span**2
        g = g.copy()
        g[i_min] += g_lo
        g[i_max] += g_hi
        return g

    return out, lo, hi, vjp


def stub_guide(
    req: GuidanceRequest, levels: int = 4, blur_sigma: float = 3.0
) -> GuidanceResponse:
    """Deterministic guidance stand-in: Gaussian blur of radius blur_sigma * D,
    then quantization to `levels` values at quantile thresholds.

    Strength 0 returns the input bit-exactly. The prompt and seed are recorded
    but do not influence the pixels.
    """
    if levels < 2:
        raise GuidanceInvariantError(f"need at least 2 quantization levels, got {levels}")
    t0 = time.perf_counter()
    v = req.image.values
    if req.strength == 0.0:
        out = v.copy()
    else:
        blurred = gaussian_filter(v, sigma=blur_sigma * req.strength, mode="reflect")
        qs = np.arange(1, levels) / levels
        thresholds = np.quantile(blurred, qs)
        bins = np.searchsorted(thresholds, blurred, side="right")
        out = np.empty_like(blurred)
        for b in range(levels):
            sel = bins == b
            if sel.any():
                out[sel] = blurred[sel].mean()
    image = GridImage(values=out, mask=req.image.mask.copy())
    return GuidanceResponse(
        image=image,
        provider_id=f"stub(levels={levels},blur_sigma={blur_sigma},seed={req.seed})",
        elapsed_s=time.perf_counter() - t0,
    )


def _validate_response_payload(req: GuidanceRequest, doc: dict) -> GuidanceResponse:
    for key in ("width", "height", "pixels", "provider_id", "elapsed_s"):
        if key not in doc:
            raise GuidanceBodyError(f"response body is missing key '{key}'")
    w, h = int(doc["width"]), int(doc["height"])
    pixels = np.asarray(doc["pixels"], dtype=float)
    if pixels.size != w * h:
        raise GuidanceBodyError(f"response claims {w}x{h} but carries {pixels.size} pixels")
    if (w, h) != (req.image.width, req.image.height):
        raise GuidanceInvariantError(
            f"response dimensions {w}x{h} differ from request "
            f"{req.image.width}x{req.image.height}"
        )
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise GuidanceInvariantError("response pixels fall outside [0, 1]")
    image = GridImage(values=pixels.reshape(h, w), mask=req.image.mask.copy())
    return GuidanceResponse(
        image=image, provider_id=str(doc["provider_id"]), elapsed_s=float(doc["elapsed_s"])
    )


def remote_guide(endpoint: str, req: GuidanceRequest, timeout: float = 60.0) -> GuidanceResponse:
    """POST the wire request to `<endpoint>/v1/guide` and validate the response."""
    body = {
        "width": req.image.width,
        "height": req.image.height,
        "pixels": [float(v) for v in req.image.values.ravel()],
        "prompt": req.prompt,
        "strength": req.strength,
        "steps": req.steps,
        "guidance_scale": req.guidance_scale,
        "seed": req.seed,
    }
    url = endpoint.rstrip("/") + "/v1/guide"
    try:
        resp = requests.post(url, json=body, timeout=timeout)
    except requests.exceptions.Timeout as exc:
        raise GuidanceTimeoutError(f"no response from {url} within {timeout}s") from exc
    except requests.exceptions.RequestException as exc:
        raise GuidanceTransportError(f"cannot reach {url}: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise GuidanceStatusError(resp.status_code, resp.text[:200])
    try:
        doc = resp.json()
    except (json.JSONDecodeError, ValueError) as exc:
        raise GuidanceBodyError(f"response from {url} is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise GuidanceBodyError("response body is not a JSON object")
    return _validate_response_payload(req, doc)


class StubProvider:
    """In-process provider wrapping stub_guide."""

    def __init__(self, levels: int = 4, blur_sigma: float = 3.0):
        self.levels = levels
        self.blur_sigma = blur_sigma

    def guide(self, req: GuidanceRequest) -> GuidanceResponse:
        return stub_guide(req, levels=self.levels, blur_sigma=self.blur_sigma)


class RemoteProvider:
    """HTTP provider speaking the guidance wire protocol."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def guide(self, req: GuidanceRequest) -> GuidanceResponse:
        return remote_guide(self.endpoint, req, timeout=self.timeout)
