"""Uplink radio model.

Path loss, the ergodic log-moment of Rayleigh fading, the per-link energy
factor used by every scheduler, and the high-SNR rate/power inversion.
The inversion ``P = phi * 2**(r / (tau * T_s * B))`` is used uniformly in
the solvers and in realized-energy accounting, so analytical cost
expressions and simulated costs share one model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = float(np.euler_gamma)
LN2 = math.log(2.0)

#: Path-loss distances are clamped below this (meters) to avoid the
#: r**-gamma singularity when a vehicle sits on top of a BS.
DEFAULT_MIN_DISTANCE_M = 1.0


class InfeasibleRate(ValueError):
    """Raised when a requested throughput cannot be carried (e.g. tau == 0)."""


@dataclass(frozen=True)
class RadioParams:
    """Static uplink constants shared by all vehicles and BSs.

    ``noise_plus_interference_w`` is the noise floor with the stationary
    co-channel interference folded in; it may be a scalar or a per-BS tuple.
    """

    bandwidth_hz: float
    path_loss_const: float
    path_loss_exp: float
    noise_plus_interference_w: float | tuple[float, ...]
    fading_mean_power: float
    p_max_w: float
    slot_seconds: float

    @property
    def bits_per_share(self) -> float:
        """Bits carried per unit time share at 1 bit/s/Hz (T_s * B)."""
        return self.slot_seconds * self.bandwidth_hz

    def noise_vector(self, n_bs: int) -> np.ndarray:
        """Noise-plus-interference power as a per-BS array of shape (n_bs,)."""
        sigma2 = np.asarray(self.noise_plus_interference_w, dtype=float)
        if sigma2.ndim == 0:
            return np.full(n_bs, float(sigma2))
        if sigma2.shape != (n_bs,):
            raise ValueError(
                f"noise_plus_interference_w has {sigma2.size} entries, expected {n_bs}"
            )
        return sigma2


def path_loss(l_v, l_bs, const: float, exponent: float,
              min_distance: float = DEFAULT_MIN_DISTANCE_M):
    """Distance-based channel gain ``const / ||l_v - l_bs||^exponent``.

    Distances below ``min_distance`` are clamped rather than faulting.
    Accepts broadcastable coordinate arrays with trailing dimension 2.
    """
    l_v = np.asarray(l_v, dtype=float)
    l_bs = np.asarray(l_bs, dtype=float)
    dist = np.linalg.norm(l_v - l_bs, axis=-1)
    dist = np.maximum(dist, min_distance)
    out = const / dist ** exponent
    return float(out) if np.ndim(out) == 0 else out


def fading_log_moment(mean_power: float, noise_w: float, gain):
    """E[log2(gain * |h|^2 / noise)] for |h|^2 exponential with mean ``mean_power``.

    Closed form for Rayleigh h: log2(gain * nu / sigma^2) - euler_gamma / ln 2.
    """
    gain = np.asarray(gain, dtype=float)
    out = np.log2(gain * mean_power / noise_w) - EULER_GAMMA / LN2
    return float(out) if np.ndim(out) == 0 else out


def phi_factor_from_gain(gain, radio: RadioParams, noise_w=None):
    """Energy factor ``2**(-E[log2(gain |h|^2 / sigma^2)])`` for a given gain.

    Equals ``sigma^2 * e^euler_gamma / (gain * nu)`` under the Rayleigh
    closed form, which is what is computed here.
    """
    if noise_w is None:
        noise_w = np.asarray(self_noise_scalar(radio), dtype=float)
    gain = np.asarray(gain, dtype=float)
    out = np.asarray(noise_w, dtype=float) * math.exp(EULER_GAMMA) / (
        gain * radio.fading_mean_power
    )
    return float(out) if np.ndim(out) == 0 else out


def self_noise_scalar(radio: RadioParams) -> float:
    """Scalar noise power; raises if the params carry per-BS values."""
    sigma2 = np.asarray(radio.noise_plus_interference_w, dtype=float)
    if sigma2.ndim != 0:
        raise ValueError("per-BS noise configured; pass noise_w explicitly")
    return float(sigma2)


def phi_factor(vehicle_pos, bs_pos, radio: RadioParams, noise_w=None,
               min_distance: float = DEFAULT_MIN_DISTANCE_M):
    """Energy factor for a vehicle/BS position pair (watts)."""
    gain = path_loss(vehicle_pos, bs_pos, radio.path_loss_const,
                     radio.path_loss_exp, min_distance)
    return phi_factor_from_gain(gain, radio, noise_w)


def phi_scale(radio: RadioParams, noise_w=None):
    """Position-free part of the energy factor: sigma^2 e^gamma / (G nu).

    Multiplying by ``distance^gamma`` (or its conditional expectation)
    yields the full factor; the factor is linear in the distance moment.
    """
    if noise_w is None:
        noise_w = self_noise_scalar(radio)
    out = np.asarray(noise_w, dtype=float) * math.exp(EULER_GAMMA) / (
        radio.path_loss_const * radio.fading_mean_power
    )
    return float(out) if np.ndim(out) == 0 else out


def power_for_rate(rate_bits, tau, phi, radio: RadioParams):
    """Uplink power required to push ``rate_bits`` in time share ``tau``.

    High-SNR inversion ``phi * 2**(r / (tau * T_s * B))``; r == 0 gives phi.
    tau == 0 with r > 0 is infeasible; tau == 0 with r == 0 costs nothing.
    """
    rate_bits = np.asarray(rate_bits, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any((tau <= 0.0) & (rate_bits > 0.0)):
        raise InfeasibleRate("positive rate with zero time share")
    with np.errstate(divide="ignore", invalid="ignore"):
        exponent = np.where(tau > 0.0, rate_bits / np.maximum(tau, 1e-300), 0.0)
    out = np.where((tau <= 0.0) & (rate_bits <= 0.0), 0.0,
                   np.asarray(phi, dtype=float) * np.exp2(exponent / radio.bits_per_share))
    return float(out) if np.ndim(out) == 0 else out


def max_rate(tau, phi, p_max: float, radio: RadioParams):
    """Largest schedulable throughput (bits) under the peak-power constraint.

    ``tau * T_s * B * log2(p_max / phi)``, floored at zero when p_max < phi.
    """
    tau = np.asarray(tau, dtype=float)
    phi = np.asarray(phi, dtype=float)
    ratio = np.maximum(p_max / phi, 1.0)
    out = tau * radio.bits_per_share * np.log2(ratio)
    return float(out) if np.ndim(out) == 0 else out
