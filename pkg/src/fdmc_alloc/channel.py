"""Random cell drops and noise-normalized channel gains.

Large-scale gains follow a log-distance model anchored at the free-space loss
at 1 m; small-scale fading is unit-power Rayleigh for the DL, UL and
UL-user-to-DL-user links and unit-power Rician for the self-interference path.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ParameterError(ValueError):
    """Raised when a physical parameter or dimension is out of range."""


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


class LinkKind(str, Enum):
    DL = "DL"
    UL = "UL"
    CCI = "CCI"


@dataclass(frozen=True)
class CellGeometry:
    inner_radius_m: float = 30.0
    outer_radius_m: float = 600.0

    def validate(self) -> None:
        if not (0.0 < self.inner_radius_m < self.outer_radius_m):
            raise ParameterError(
                f"need 0 < inner < outer radius, got "
                f"{self.inner_radius_m} / {self.outer_radius_m}"
            )


@dataclass(frozen=True)
class LargeScaleParams:
    carrier_hz: float = 2.5e9
    pathloss_exponent: float = 3.6
    reference_distance_m: float = 1.0
    bs_antenna_gain_db: float = 10.0
    noise_dl_dbm: float = -125.0
    noise_bs_dbm: float = -125.0
    rician_k_db: float = 5.0
    si_cancellation_db: float = -90.0

    def validate(self) -> None:
        if self.pathloss_exponent <= 2.0:
            raise ParameterError("path-loss exponent must exceed 2")
        if self.reference_distance_m <= 0.0 or self.carrier_hz <= 0.0:
            raise ParameterError("reference distance and carrier must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("SI cancellation constant must lie in [0, 1]")

    @property
    def rho(self) -> float:
        return float(db_to_linear(self.si_cancellation_db))

    @property
    def noise_dl_w(self) -> float:
        return float(dbm_to_watt(self.noise_dl_dbm))

    @property
    def noise_bs_w(self) -> float:
        return float(dbm_to_watt(self.noise_bs_dbm))

    @property
    def reference_loss_db(self) -> float:
        """Free-space loss at the reference distance."""
        return 20.0 * math.log10(
            4.0 * math.pi * self.reference_distance_m * self.carrier_hz / SPEED_OF_LIGHT
        )


@dataclass(frozen=True, eq=False)
class ChannelGains:
    """Noise-normalized gains of one network realization.

    Shapes: ``H`` (n_subcarriers, n_dl), ``G`` (n_subcarriers, n_ul),
    ``F`` (n_subcarriers, n_ul, n_dl) indexed ``[i, r, m]``, ``L_SI``
    (n_subcarriers,).
    """

    H: np.ndarray
    G: np.ndarray
    F: np.ndarray
    L_SI: np.ndarray

    def __post_init__(self):
        for name in ("H", "G", "F", "L_SI"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n, k = self.H.shape
        if self.G.ndim != 2 or self.G.shape[0] != n:
            raise ParameterError("G must have shape (n_subcarriers, n_ul)")
        j = self.G.shape[1]
        if self.F.shape != (n, j, k) or self.L_SI.shape != (n,):
            raise ParameterError("F must be (n_subcarriers, n_ul, n_dl) and L_SI (n_subcarriers,)")
        for name in ("H", "G", "F", "L_SI"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ParameterError(f"{name} must be finite and non-negative")

    @property
    def n_subcarriers(self) -> int:
        return self.H.shape[0]

    @property
    def n_dl(self) -> int:
        return self.H.shape[1]

    @property
    def n_ul(self) -> int:
        return self.G.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ChannelGains):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("H", "G", "F", "L_SI")
        )

    def to_csv(self) -> str:
        """Rows ``i, kind, m, r, value`` with -1 in unused index slots."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["i", "kind", "m", "r", "value"])
        n, k, j = self.n_subcarriers, self.n_dl, self.n_ul
        for i in range(n):
            for m in range(k):
                writer.writerow([i, "H", m, -1, repr(float(self.H[i, m]))])
            for r in range(j):
                writer.writerow([i, "G", -1, r, repr(float(self.G[i, r]))])
            for r in range(j):
                for m in range(k):
                    writer.writerow([i, "F", m, r, repr(float(self.F[i, r, m]))])
            writer.writerow([i, "LSI", -1, -1, repr(float(self.L_SI[i]))])
        return buf.getvalue()


def sample_user_positions(geometry: CellGeometry, n_dl: int, n_ul: int,
                          rng: np.random.Generator):
    """Draw DL and UL user positions uniformly over the annulus area.

    Returns two arrays of shape (n_dl, 2) and (n_ul, 2), BS at the origin.
    """
    geometry.validate()
    if n_dl < 1 or n_ul < 1:
        raise ParameterError("need at least one DL and one UL user")

    def draw(count):
        r2 = rng.uniform(geometry.inner_radius_m ** 2, geometry.outer_radius_m ** 2, count)
        radius = np.sqrt(r2)
        # sqrt can round a hair outside the annulus
        radius = np.clip(radius, geometry.inner_radius_m, geometry.outer_radius_m)
        theta = rng.uniform(0.0, 2.0 * np.pi, count)
        return np.column_stack((radius * np.cos(theta), radius * np.sin(theta)))

    return draw(n_dl), draw(n_ul)


def path_gain(distance_m, params: LargeScaleParams, link_kind: LinkKind | str):
    """Linear large-scale power gain at ``distance_m``.

    Distances below the reference distance are clamped to it with a warning.
    The BS antenna gain applies to DL and UL links only.
    """
    kind = LinkKind(link_kind)
    d = np.asarray(distance_m, dtype=float)
    d0 = params.reference_distance_m
    if np.any(d < d0):
        warnings.warn(
            f"distance below reference distance {d0} m clamped", RuntimeWarning, stacklevel=2
        )
        d = np.maximum(d, d0)
    loss_db = params.reference_loss_db + 10.0 * params.pathloss_exponent * np.log10(d / d0)
    gain_db = -loss_db
    if kind is not LinkKind.CCI:
        gain_db = gain_db + params.bs_antenna_gain_db
    out = 10.0 ** (gain_db / 10.0)
    return float(out) if out.ndim == 0 else out


def rayleigh(rng: np.random.Generator, shape):
    """Unit mean-power circularly symmetric complex Gaussian draws."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def rician(rng: np.random.Generator, shape, k_db: float):
    """Unit mean-power Rician draws; LOS phase uniform per draw."""
    k = float(db_to_linear(k_db))
    phase = rng.uniform(0.0, 2.0 * np.pi, shape)
    los = np.sqrt(k / (k + 1.0)) * np.exp(1j * phase)
    return los + np.sqrt(1.0 / (k + 1.0)) * rayleigh(rng, shape)


def sample_channel_realization(geometry: CellGeometry, params: LargeScaleParams,
                               n_subcarriers: int, n_dl: int, n_ul: int,
                               rng: np.random.Generator) -> ChannelGains:
    """One drop: user positions, path gains and i.i.d. per-subcarrier fading."""
    params.validate()
    if n_subcarriers < 1:
        raise ParameterError("need at least one subcarrier")
    dl_pos, ul_pos = sample_user_positions(geometry, n_dl, n_ul, rng)

    varpi = path_gain(np.linalg.norm(dl_pos, axis=1), params, LinkKind.DL)
    varrho = path_gain(np.linalg.norm(ul_pos, axis=1), params, LinkKind.UL)
    # (r, m) user-to-user distances
    d_cci = np.linalg.norm(ul_pos[:, None, :] - dl_pos[None, :, :], axis=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        vartheta = path_gain(d_cci, params, LinkKind.CCI)
    vartheta = np.atleast_2d(vartheta)

    h = rayleigh(rng, (n_subcarriers, n_dl))
    g = rayleigh(rng, (n_subcarriers, n_ul))
    f = rayleigh(rng, (n_subcarriers, n_ul, n_dl))
    l_si = rician(rng, (n_subcarriers,), params.rician_k_db)

    s_dl, s_bs = params.noise_dl_w, params.noise_bs_w
    return ChannelGains(
        H=varpi[None, :] * np.abs(h) ** 2 / s_dl,
        G=varrho[None, :] * np.abs(g) ** 2 / s_bs,
        F=vartheta[None, :, :] * np.abs(f) ** 2 / s_dl,
        L_SI=np.abs(l_si) ** 2 / s_bs,
    )


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Independent PCG64 substream for one Monte Carlo trial."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(trial),))
    return np.random.Generator(np.random.PCG64(seq))
