"""Noise-conditioned stochastic imputer.

The imputer is an MLP from [state encoding ++ noise] to a full substitution
vector; sampled completions always pass through `substitute`, so observed
coordinates are preserved bitwise.  Training is self-supervised: hide part of
what is observed, reconstruct it.  The sinusoid variant takes an extra
linear-interpolation channel and carries a Gaussian smoothness penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .masks import MissingState, round_half_up, substitute, substitute_batch

VARIANTS = ("image", "sinusoid")


@dataclass
class ImputerModel:
    """net maps [values, mask (, interpolation)] ++ noise -> substitution."""

    net: nn.DenseNet
    noise_dim: int
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        d = self.net.out_dim
        expected = (3 if self.variant == "sinusoid" else 2) * d + self.noise_dim
        if self.net.in_dim != expected:
            raise ValueError(
                f"net input dim {self.net.in_dim} != {expected} required by "
                f"variant {self.variant!r} with d={d}, noise_dim={self.noise_dim}"
            )

    @property
    def d(self) -> int:
        return self.net.out_dim

    def copy(self) -> "ImputerModel":
        return ImputerModel(self.net.copy(), self.noise_dim, self.variant)


@dataclass
class ImputerLossConfig:
    self_mask_fraction: float = 0.5
    smoothness_weight: float = 0.0
    gaussian_kernel_sigma: float = 1.0
    k_multiple: int = 5

    def __post_init__(self):
        if not (0.0 < self.self_mask_fraction < 1.0):
            raise ValueError("self_mask_fraction must lie strictly inside (0, 1)")
        if self.smoothness_weight < 0.0:
            raise ValueError("smoothness_weight must be >= 0")
        if self.gaussian_kernel_sigma <= 0.0:
            raise ValueError("gaussian_kernel_sigma must be > 0")
        if self.k_multiple < 1:
            raise ValueError("k_multiple must be >= 1")


def build_imputer(
    d: int,
    variant: str,
    noise_dim: int = 8,
    hidden: tuple[int, ...] = (128, 128),
    rng: np.random.Generator | None = None,
) -> ImputerModel:
    in_dim = (3 if variant == "sinusoid" else 2) * d + noise_dim
    out_act = "sigmoid" if variant == "image" else "identity"
    net = nn.DenseNet([in_dim, *hidden, d], hidden_activation="tanh",
                      output_activation=out_act, rng=rng)
    return ImputerModel(net, noise_dim, variant)


def _interp_row(values: np.ndarray, mask: np.ndarray, grid: np.ndarray) -> np.ndarray:
    obs = np.flatnonzero(mask == 1.0)
    if obs.size == 0:
        return np.zeros_like(values)
    # np.interp extrapolates by holding the outermost observed values
    return np.interp(grid, grid[obs], values[obs])


def interpolate_baseline(x_m: MissingState, grid: np.ndarray | None = None) -> np.ndarray:
    """Piecewise-linear fill of the unobserved coordinates; constant tails."""
    if grid is None:
        grid = np.arange(x_m.dim, dtype=np.float64)
    if x_m.observed_count() == 0:
        warnings.warn("interpolation with zero observed coordinates; returning zeros")
        return np.zeros(x_m.dim)
    return _interp_row(x_m.values, x_m.mask, np.asarray(grid, dtype=np.float64))


def interpolate_batch(values: np.ndarray, masks: np.ndarray) -> np.ndarray:
    grid = np.arange(values.shape[1], dtype=np.float64)
    out = np.zeros_like(values)
    for i in range(values.shape[0]):
        out[i] = _interp_row(values[i], masks[i], grid)
    return out


def net_inputs(model: ImputerModel, values: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Non-noise input columns for a (batch, d) state block."""
    cols = [values, masks]
    if model.variant == "sinusoid":
        cols.append(interpolate_batch(values, masks))
    return np.concatenate(cols, axis=1)


def impute_sample(model: ImputerModel, x_m: MissingState, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(model.noise_dim)
    x = np.concatenate([net_inputs(model, x_m.values[None, :], x_m.mask[None, :])[0], z])
    y, _ = nn.forward(model.net, x, mode="eval")
    return substitute(x_m, y)


def impute_multiple(model: ImputerModel, x_m: MissingState, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.stack([impute_sample(model, x_m, rng) for _ in range(k)])


def impute_batch(model: ImputerModel, values: np.ndarray, masks: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """One completion per row; noise drawn as a single (batch, Z) block."""
    z = rng.standard_normal((values.shape[0], model.noise_dim))
    x = np.concatenate([net_inputs(model, values, masks), z], axis=1)
    y, _ = nn.forward(model.net, x, mode="eval")
    return substitute_batch(values, masks, y)


_SMOOTHER_CACHE: dict[tuple[int, float], np.ndarray] = {}


def gaussian_smoother_matrix(d: int, sigma: float) -> np.ndarray:
    """Explicit d x d matrix S with S @ y = Gaussian filter of y.

    Kernel truncated at 3 sigma, normalized to sum 1, reflective boundary
    (mirror about the edge between samples).  The matrix form gives the
    exact adjoint for gradients.
    """
    key = (d, float(sigma))
    cached = _SMOOTHER_CACHE.get(key)
    if cached is not None:
        return cached
    radius = int(3.0 * sigma + 0.5)
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    s = np.zeros((d, d))
    for i in range(d):
        for o, w in zip(offsets, kernel):
            j = i + o
            while j < 0 or j >= d:
                if j < 0:
                    j = -j - 1
                if j >= d:
                    j = 2 * d - j - 1
            s[i, j] += w
    _SMOOTHER_CACHE[key] = s
    return s


def smoothness_penalty(y: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean squared difference from the Gaussian-filtered rows.

    Returns (per-row penalty, gradient wrt y of the per-row penalty).
    """
    d = y.shape[1]
    s = gaussian_smoother_matrix(d, sigma)
    r = y - y @ s.T
    per_row = (r ** 2).mean(axis=1)
    grad = (2.0 / d) * (r - r @ s)
    return per_row, grad


def loss_unsupervised(
    model: ImputerModel,
    values: np.ndarray,
    masks: np.ndarray,
    cfg: ImputerLossConfig,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray], dict]:
    """Self-masking reconstruction loss over a batch, with gradients.

    Per kept example: hide round(rho * n_observed) observed coordinates,
    rebuild from the reduced state, score squared error on the hidden ones
    averaged over their count.  Examples with < 2 observed coordinates are
    skipped and counted.  Batch loss is the mean over kept examples, plus
    the smoothness penalty weighted by cfg.smoothness_weight.
    """
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    n_obs = masks.sum(axis=1).astype(int)
    kept = np.flatnonzero(n_obs >= 2)
    info = {"skipped": int(values.shape[0] - kept.size)}
    zero_grads = [np.zeros_like(p) for p in model.net.params()]
    if kept.size == 0:
        return 0.0, zero_grads, info

    v = values[kept]
    m = masks[kept]
    b = kept.size
    hidden = np.zeros_like(m)
    for i in range(b):
        obs_idx = np.flatnonzero(m[i] == 1.0)
        n_hide = round_half_up(cfg.self_mask_fraction * obs_idx.size)
        if n_hide > 0:
            hidden[i, rng.choice(obs_idx, size=n_hide, replace=False)] = 1.0

    reduced_mask = m - hidden
    reduced_values = v * reduced_mask
    z = rng.standard_normal((b, model.noise_dim))
    x = np.concatenate([net_inputs(model, reduced_values, reduced_mask), z], axis=1)
    y, tape = nn.forward(model.net, x, mode="train", rng=rng)

    counts = hidden.sum(axis=1)
    safe = np.maximum(counts, 1.0)
    diff = (y - v) * hidden
    recon_rows = (diff ** 2).sum(axis=1) / safe
    upstream = 2.0 * diff / safe[:, None] / b

    loss = float(recon_rows.mean())
    if cfg.smoothness_weight > 0.0:
        sm_rows, sm_grad = smoothness_penalty(y, cfg.gaussian_kernel_sigma)
        loss += cfg.smoothness_weight * float(sm_rows.mean())
        upstream = upstream + cfg.smoothness_weight * sm_grad / b

    grads, _ = nn.backward(model.net, tape, upstream)
    info["predictions"] = y
    info["hidden"] = hidden
    return loss, grads, info


def loss_supervised_batch(
    model: ImputerModel,
    values: np.ndarray,
    masks: np.ndarray,
    xbar: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Squared error against known complete vectors on unobserved coordinates.

    Averaged per example over the unobserved count, then over examples with
    at least one unobserved coordinate.  Fully observed rows contribute 0.
    """
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if xbar.shape != values.shape:
        raise ValueError(f"complete-data shape {xbar.shape} != state shape {values.shape}")

    unobs = 1.0 - masks
    counts = unobs.sum(axis=1)
    scored = np.flatnonzero(counts > 0)
    zero_grads = [np.zeros_like(p) for p in model.net.params()]
    if scored.size == 0:
        return 0.0, zero_grads

    v, m, t = values[scored], masks[scored], xbar[scored]
    b = scored.size
    z = rng.standard_normal((b, model.noise_dim))
    x = np.concatenate([net_inputs(model, v, m), z], axis=1)
    y, tape = nn.forward(model.net, x, mode="train", rng=rng)

    w = 1.0 - m
    diff = (y - t) * w
    rows = (diff ** 2).sum(axis=1) / counts[scored]
    upstream = 2.0 * diff / counts[scored][:, None] / b
    grads, _ = nn.backward(model.net, tape, upstream)
    return float(rows.mean()), grads


def loss_supervised(
    model: ImputerModel,
    x_m: MissingState,
    xbar: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    return loss_supervised_batch(
        model, x_m.values[None, :], x_m.mask[None, :],
        np.asarray(xbar, dtype=np.float64)[None, :], rng,
    )


def pretrain(
    model: ImputerModel,
    values: np.ndarray,
    masks: np.ndarray,
    epochs: int,
    opt: nn.OptimizerState,
    cfg: ImputerLossConfig,
    rng: np.random.Generator,
    batch_size: int = 64,
    plateau_tol: float = 1e-4,
    plateau_window: int = 5,
) -> list[float]:
    """Minibatch descent on the self-masking loss until budget or plateau.

    Mutates the model in place and returns the per-epoch mean loss curve.
    Aborts with a diagnostic if the loss goes non-finite.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ValueError("pretraining needs a nonempty dataset")
    n = values.shape[0]
    curve: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads, _ = loss_unsupervised(model, values[idx], masks[idx], cfg, rng)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"pretraining diverged: non-finite loss at epoch {epoch}"
                )
            model.net.step(grads, opt)
            batch_losses.append(loss)
        curve.append(float(np.mean(batch_losses)))
        if len(curve) > plateau_window:
            prev = curve[-1 - plateau_window]
            improvement = (prev - curve[-1]) / max(abs(prev), 1e-12)
            if improvement < plateau_tol:
                break
    return curve


def adapt_step(
    model: ImputerModel,
    miss_values: np.ndarray,
    miss_masks: np.ndarray,
    term_values: np.ndarray,
    term_masks: np.ndarray,
    xbar: np.ndarray,
    alpha: float,
    alpha_prime: float,
    cfg: ImputerLossConfig,
    rng_unsup: np.random.Generator,
    rng_sup: np.random.Generator,
) -> tuple[ImputerModel, dict]:
    """One combined self-masking + known-truth gradient step, non-mutating.

    Returns (fresh parameter set, loss values); the input model is untouched,
    so a caller can evaluate against the adapted imputer and then discard it.
    """
    l_u, g_u, _ = loss_unsupervised(model, miss_values, miss_masks, cfg, rng_unsup)
    l_s, g_s = loss_supervised_batch(model, term_values, term_masks, xbar, rng_sup)
    adapted = model.copy()
    for p, gu, gs in zip(adapted.net.params(), g_u, g_s):
        p -= alpha * gu + alpha_prime * gs
    adapted.net.version += 1
    return adapted, {"unsupervised": l_u, "supervised": l_s}


def save_imputer(model: ImputerModel, path) -> None:
    nn.save_checkpoint(model.net, path, role=nn.ROLE_IMPUTER)


def load_imputer(path) -> ImputerModel:
    net, role = nn.load_checkpoint(path)
    if role != nn.ROLE_IMPUTER:
        raise ValueError(f"checkpoint role {role} is not an imputer checkpoint")
    variant = "image" if net.output_activation == "sigmoid" else "sinusoid"
    d = net.out_dim
    noise_dim = net.in_dim - (3 if variant == "sinusoid" else 2) * d
    if noise_dim < 1:
        raise ValueError(
            f"checkpoint dims {net.layer_dims} inconsistent with an imputer layout"
        )
    return ImputerModel(net, noise_dim, variant)
