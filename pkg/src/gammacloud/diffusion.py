"""Noise schedules and the Gaussian / Gamma diffusion processes.

Arrays in :class:`NoiseSchedule` have length ``T + 1`` and are indexed by
the step number directly; index 0 holds the clean-data values
(alpha_bar = 1, k_bar = 0, theta = theta0).

Gamma process: ``g_t ~ Gamma(k_bar_t, theta_t)`` with
``theta_t = sqrt(alpha_bar_t) * theta0`` and
``k_bar_t = sum_{i<=t} beta_i / (alpha_bar_i * theta0**2)``, so that
``Var(g_t) = k_bar_t * theta_t**2 = 1 - alpha_bar_t`` exactly (telescoping).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .rng import RngStream

MODES = ("ancestral", "paper_literal")
PROCESSES = ("gaussian", "gamma")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    theta0: float
    thetas: np.ndarray
    k_bars: np.ndarray

    def identity_error(self) -> float:
        """max_t |k_bar_t theta_t^2 - (1 - alpha_bar_t)|."""
        return float(np.max(np.abs(self.k_bars * self.thetas ** 2 - (1.0 - self.alpha_bars))))

    def to_json(self, mode: str = "ancestral") -> dict:
        return {"T": self.T, "beta_min": float(self.betas[1]), "beta_max": float(self.betas[-1]),
                "theta0": self.theta0, "mode": mode}


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02, theta0: float = 1.0) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    if theta0 <= 0:
        raise ValueError("theta0 must be positive")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    thetas = np.sqrt(alpha_bars) * theta0
    terms = np.zeros(T + 1)
    terms[1:] = betas[1:] / (alpha_bars[1:] * theta0 ** 2)
    k_bars = np.cumsum(terms)
    return NoiseSchedule(T, betas, alphas, alpha_bars, float(theta0), thetas, k_bars)


def desk_schedule(T: int, theta0: float = 1.0) -> NoiseSchedule:
    """Linear betas rescaled from the T=1000 range so short chains still reach the prior."""
    f = 1000.0 / T
    return make_schedule(T, min(1e-4 * f, 0.5), min(0.02 * f, 0.999), theta0)


def schedule_from_json(d: dict) -> NoiseSchedule:
    return make_schedule(int(d["T"]), float(d.get("beta_min", 1e-4)), float(d.get("beta_max", 0.02)),
                         float(d.get("theta0", 1.0)))


def _check_t(s: NoiseSchedule, t, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > s.T):
        raise ValueError(f"t out of range [{lo}, {s.T}]")
    return t


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast a per-batch-element coefficient over trailing data axes."""
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


# ---------------------------------------------------------------- Gaussian

def gaussian_forward(s: NoiseSchedule, x0: np.ndarray, t, rng: RngStream):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or per leading index."""
    t = _check_t(s, t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.normal(x0.shape)
    ab = _per_sample(s.alpha_bars[t], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def gaussian_reverse_step(s: NoiseSchedule, x_t: np.ndarray, t: int, eps_pred: np.ndarray,
                          rng: RngStream | None = None, mode: str = "ancestral") -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    t = int(_check_t(s, t))
    mean = (x_t - s.betas[t] / np.sqrt(1.0 - s.alpha_bars[t]) * eps_pred) / np.sqrt(s.alphas[t])
    if mode == "ancestral" and t > 1:
        mean = mean + np.sqrt(s.betas[t]) * rng.normal(np.shape(x_t))
    return mean


# ---------------------------------------------------------------- Gamma

def gamma_forward(s: NoiseSchedule, h0: np.ndarray, t, rng: RngStream):
    """h_t = sqrt(abar_t) h0 + (g_t - k_bar_t theta_t); returns (h_t, centered noise)."""
    t = _check_t(s, t)
    h0 = np.asarray(h0, dtype=np.float64)
    k = np.broadcast_to(_per_sample(s.k_bars[t], h0.ndim), h0.shape)
    th = np.broadcast_to(_per_sample(s.thetas[t], h0.ndim), h0.shape)
    g = rng.gamma(k, th, h0.shape)
    noise = g - k * th
    ab = _per_sample(s.alpha_bars[t], h0.ndim)
    return np.sqrt(ab) * h0 + noise, noise


def gamma_reverse_step(s: NoiseSchedule, h_t: np.ndarray, t: int, eps_pred: np.ndarray,
                       rng: RngStream | None = None) -> np.ndarray:
    t = int(_check_t(s, t))
    denom = np.sqrt(1.0 - s.alpha_bars[t])
    out = (h_t - s.betas[t] / denom * eps_pred) / np.sqrt(s.alphas[t])
    if t > 1:
        k, th = s.k_bars[t - 1], s.thetas[t - 1]
        gam = rng.gamma(k, th, np.shape(h_t))
        out = out + s.betas[t] * (gam - th * k) / denom
    return out


# ---------------------------------------------------------------- losses

def _mse(target, pred):
    if isinstance(pred, tn.Tensor):
        if tuple(np.shape(target)) != pred.shape:
            raise ValueError(f"shape mismatch {np.shape(target)} vs {pred.shape}")
        return tn.reduce_mean(tn.square(tn.sub(pred, tn.Tensor(np.asarray(target)))))
    target, pred = np.asarray(target), np.asarray(pred)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {pred.shape}")
    return float(np.mean((target - pred) ** 2))


def sldm_loss(eps, eps_pred):
    """Mean squared error between injected and predicted Gaussian noise."""
    return _mse(eps, eps_pred)


def lpgdm_loss(noise, eps_pred, t, s: NoiseSchedule):
    """Mean squared error against Gamma noise rescaled to unit variance."""
    noise = np.asarray(noise)
    target = noise / np.sqrt(1.0 - _per_sample(s.alpha_bars[np.asarray(t)], noise.ndim))
    return _mse(target, eps_pred)


# ---------------------------------------------------------------- partial chains

EpsPredictor = Callable[[np.ndarray, int], np.ndarray]


def partial_diffuse_denoise(s: NoiseSchedule, x0: np.ndarray, t_attack: int, eps_predictor: EpsPredictor,
                            rng: RngStream, process: str = "gaussian", mode: str = "ancestral") -> np.ndarray:
    """Noise ``x0`` forward to ``t_attack`` then run the reverse chain back to step 0."""
    if process not in PROCESSES:
        raise ValueError(f"unknown process {process!r}")
    if not 0 <= t_attack <= s.T:
        raise ValueError(f"t_attack out of range [0, {s.T}]")
    x0 = np.asarray(x0)
    if t_attack == 0:
        return x0.copy()
    if process == "gaussian":
        x, _ = gaussian_forward(s, x0, t_attack, rng)
        for t in range(t_attack, 0, -1):
            x = gaussian_reverse_step(s, x, t, eps_predictor(x, t), rng, mode)
    else:
        x, _ = gamma_forward(s, x0, t_attack, rng)
        for t in range(t_attack, 0, -1):
            x = gamma_reverse_step(s, x, t, eps_predictor(x, t), rng)
    return x


def schedule_config(s: NoiseSchedule, mode: str = "ancestral") -> str:
    return json.dumps(s.to_json(mode), sort_keys=True)
