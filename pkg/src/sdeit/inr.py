"""Implicit neural representation of the conductivity field.

Random Fourier positional encoding feeding a 4-hidden-layer MLP (width 128,
ReLU) whose raw output maps to a strictly positive conductivity through

    sigma = sigma_floor + sigma_scale * softplus(raw).

Forward evaluation, reverse-mode parameter gradients driven by a per-output
cotangent, and a bias-corrected Adam update are all hand-rolled on numpy so
runs are deterministic and bit-reproducible under fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatchError, NumericError

HIDDEN_WIDTH = 128
N_HIDDEN = 4


@dataclass
class Encoder:
    """Fixed random frequency matrix B (n x 2) with bandwidth s."""

    frequencies: np.ndarray
    bandwidth: float
    seed: int

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.shape[0]

    @property
    def feature_dim(self) -> int:
        return 2 * self.frequencies.shape[0]


def make_encoder(n: int, bandwidth: float, seed: int) -> Encoder:
    if n < 1:
        raise DimensionMismatchError(f"need at least one frequency, got {n}")
    if bandwidth <= 0:
        raise DimensionMismatchError(f"bandwidth must be positive, got {bandwidth}")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, bandwidth, size=(n, 2))
    return Encoder(frequencies=freqs, bandwidth=float(bandwidth), seed=int(seed))


def encode(encoder: Encoder, points: np.ndarray) -> np.ndarray:
    """Feature rows [sin(2 pi B x); cos(2 pi B x)] for points in [-1, 1]^2."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatchError("points must be an (n, 2) array")
    if np.any(np.abs(pts) > 1.0 + 1e-9):
        raise DimensionMismatchError("encoder input must lie inside [-1, 1]^2")
    phase = 2.0 * np.pi * (pts @ encoder.frequencies.T)
    return np.hstack([np.sin(phase), np.cos(phase)])


@dataclass
class MlpParams:
    """Layer weights (in_dim x out_dim) and biases; last pair is the output head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    sigma_floor: float = 1e-3
    sigma_scale: float = 1.0

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def mlp_init(
    widths: list[int],
    seed: int,
    sigma_floor: float = 1e-3,
    sigma_scale: float = 1.0,
) -> MlpParams:
    """Kaiming-uniform hidden layers, small-uniform output head, zero biases."""
    if len(widths) < 2 or widths[-1] != 1:
        raise DimensionMismatchError(f"widths must end in an output dim of 1, got {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == len(widths) - 2:
            bound = 1e-2
        else:
            bound = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights=weights, biases=biases, sigma_floor=sigma_floor, sigma_scale=sigma_scale)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def mlp_forward_tape(params: MlpParams, features: np.ndarray):
    """Forward pass returning (sigma, backward) where backward(cotangent) yields
    the parameter gradients of L = sum_i cotangent_i * sigma_i by reverse
    accumulation over the cached activations."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != params.weights[0].shape[0]:
        raise DimensionMismatchError(
            f"features have dim {features.shape[-1]}, parameters expect "
            f"{params.weights[0].shape[0]}"
        )
    n_layers = len(params.weights)
    hs = [features]
    zs = []
    h = features
    for i in range(n_layers):
        z = h @ params.weights[i] + params.biases[i]
        zs.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        hs.append(h)
    raw = zs[-1][:, 0]
    sigma = params.sigma_floor + params.sigma_scale * _softplus(raw)

    def backward(cotangent: np.ndarray) -> MlpGrads:
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape != sigma.shape:
            raise DimensionMismatchError("cotangent must have one weight per output")
        d = (cot * params.sigma_scale * expit(raw))[:, None]
        g_w = [None] * n_layers
        g_b = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            g_w[i] = hs[i].T @ d
            g_b[i] = d.sum(axis=0)
            if i > 0:
                d = (d @ params.weights[i].T) * (zs[i - 1] > 0.0)
        return MlpGrads(weights=g_w, biases=g_b)

    return sigma, backward


def mlp_eval_grad(
    params: MlpParams,
    features: np.ndarray,
    cotangent: np.ndarray | None = None,
) -> tuple[np.ndarray, MlpGrads | None]:
    """Evaluate sigma at feature rows; optionally reverse-accumulate dL/dtheta.

    With cotangent c, the returned gradients are those of L = sum_i c_i * sigma_i.
    """
    sigma, backward = mlp_forward_tape(params, features)
    if cotangent is None:
        return sigma, None
    return sigma, backward(cotangent)


def mlp_eval(params: MlpParams, features: np.ndarray) -> np.ndarray:
    sigma, _ = mlp_eval_grad(params, features)
    return sigma


@dataclass
class AdamState:
    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    state: AdamState, params: MlpParams, grads: MlpGrads, lr: float
) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update; returns new (state, params)."""
    for g in [*grads.weights, *grads.biases]:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to the optimizer")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    def upd(p, m, v, g):
        m_new = state.beta1 * m + (1.0 - state.beta1) * g
        v_new = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p_new = p - lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + state.eps)
        return p_new, m_new, v_new

    new_w, new_b = [], []
    mw, mb, vw, vb = [], [], [], []
    for p, m, v, g in zip(params.weights, state.m_weights, state.v_weights, grads.weights):
        p2, m2, v2 = upd(p, m, v, g)
        new_w.append(p2), mw.append(m2), vw.append(v2)
    for p, m, v, g in zip(params.biases, state.m_biases, state.v_biases, grads.biases):
        p2, m2, v2 = upd(p, m, v, g)
        new_b.append(p2), mb.append(m2), vb.append(v2)

    new_state = AdamState(
        m_weights=mw, m_biases=mb, v_weights=vw, v_biases=vb,
        step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    new_params = MlpParams(
        weights=new_w, biases=new_b,
        sigma_floor=params.sigma_floor, sigma_scale=params.sigma_scale,
    )
    return new_state, new_params


def save_checkpoint(path, encoder: Encoder, params: MlpParams, state: AdamState, step: int) -> None:
    """Flat npz of the encoder, layer arrays, Adam accumulators, and step count."""
    arrays = {
        "B": encoder.frequencies,
        "bandwidth": np.array(encoder.bandwidth),
        "enc_seed": np.array(encoder.seed),
        "sigma_floor": np.array(params.sigma_floor),
        "sigma_scale": np.array(params.sigma_scale),
        "adam_step": np.array(state.step),
        "adam_consts": np.array([state.beta1, state.beta2, state.eps]),
        "loop_step": np.array(step),
        "n_layers": np.array(len(params.weights)),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        arrays[f"mw{i}"] = state.m_weights[i]
        arrays[f"mb{i}"] = state.m_biases[i]
        arrays[f"vw{i}"] = state.v_weights[i]
        arrays[f"vb{i}"] = state.v_biases[i]
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[Encoder, MlpParams, AdamState, int]:
    with np.load(path) as data:
        enc = Encoder(
            frequencies=data["B"],
            bandwidth=float(data["bandwidth"]),
            seed=int(data["enc_seed"]),
        )
        n = int(data["n_layers"])
        params = MlpParams(
            weights=[data[f"w{i}"] for i in range(n)],
            biases=[data[f"b{i}"] for i in range(n)],
            sigma_floor=float(data["sigma_floor"]),
            sigma_scale=float(data["sigma_scale"]),
        )
        b1, b2, eps = data["adam_consts"]
        state = AdamState(
            m_weights=[data[f"mw{i}"] for i in range(n)],
            m_biases=[data[f"mb{i}"] for i in range(n)],
            v_weights=[data[f"vw{i}"] for i in range(n)],
            v_biases=[data[f"vb{i}"] for i in range(n)],
            step=int(data["adam_step"]),
            beta1=float(b1), beta2=float(b2), eps=float(eps),
        )
        step = int(data["loop_step"])
    return enc, params, state, step


def default_widths(encoder: Encoder, hidden_width: int = HIDDEN_WIDTH, n_hidden: int = N_HIDDEN):
    return [encoder.feature_dim] + [hidden_width] * n_hidden + [1]
