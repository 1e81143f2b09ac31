"""First-level general linear model.

Design matrices are built by convolving per-trial boxcars with a double-gamma
hemodynamic response on a fine microtime grid. Models are fitted by ordinary
or generalised least squares with an AR(1) working model for the temporal
dependency of the errors and an optional discrete-cosine high-pass filter.

The generalised fit uses the working precision

    G^-1 = W' H0 W

with ``W`` the AR(1) whitener and ``H0`` the residual-forming matrix of the
high-pass basis, i.e. whitening is applied first and filtering second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    DesignError,
    EstimationError,
    FilterError,
    ParameterError,
    SingularDesignError,
)

__all__ = [
    "HrfParams",
    "EventTable",
    "DesignMatrix",
    "NoiseModel",
    "BetaDataset",
    "canonical_hrf",
    "build_design",
    "dct_basis",
    "dct_highpass",
    "ar1_whitener",
    "ar1_covariance",
    "estimate_ar1",
    "design_bcov",
    "gls_fit",
    "fit_two_pass",
    "coefficient_covariance_sandwich",
    "GLSRegression",
]

RHO_MAX = 0.95
RCOND_MIN = 1e-12


# --------------------------------------------------------------------------
# paradigm and design
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma response parameters (seconds unless noted)."""

    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    kernel_length: float = 32.0
    microtime_dt: float = 0.1

    def validate(self, tr: float | None = None) -> None:
        for name in ("peak_delay", "undershoot_delay", "peak_dispersion",
                     "undershoot_dispersion", "kernel_length", "microtime_dt"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"HrfParams.{name} must be positive, "
                                     f"got {getattr(self, name)!r}")
        if self.undershoot_ratio < 0:
            raise ParameterError("HrfParams.undershoot_ratio must be >= 0")
        if tr is not None and not self.microtime_dt < tr:
            raise ParameterError("HrfParams.microtime_dt must be smaller than tr")


def canonical_hrf(params: HrfParams = HrfParams()) -> np.ndarray:
    """Sample the double-gamma response on the microtime grid.

    Each gamma density has shape ``delay / dispersion`` and scale
    ``dispersion``; the undershoot density is subtracted after scaling by
    ``undershoot_ratio``. The kernel is normalised to a peak value of 1 and
    has ``ceil(kernel_length / microtime_dt)`` samples starting at t = 0.
    """
    params.validate()
    n = int(math.ceil(params.kernel_length / params.microtime_dt - 1e-9))
    t = np.arange(n) * params.microtime_dt
    peak = stats.gamma.pdf(t, params.peak_delay / params.peak_dispersion,
                           scale=params.peak_dispersion)
    under = stats.gamma.pdf(t, params.undershoot_delay / params.undershoot_dispersion,
                            scale=params.undershoot_dispersion)
    h = peak - params.undershoot_ratio * under
    top = h.max()
    if not np.isfinite(top) or top <= 0:
        raise ParameterError("HRF kernel has no positive peak")
    return h / top


@dataclass
class EventTable:
    """Trial onsets/durations/labels; trial ``j`` owns regressor ``j``."""

    onsets: np.ndarray
    durations: np.ndarray
    labels: np.ndarray
    n_scans: int
    tr: float

    def __post_init__(self):
        self.onsets = np.asarray(self.onsets, dtype=float).ravel()
        self.durations = np.asarray(self.durations, dtype=float).ravel()
        self.labels = np.asarray(self.labels).ravel()
        self.n_scans = int(self.n_scans)
        self.tr = float(self.tr)
        self.validate()

    @property
    def n_events(self) -> int:
        return self.onsets.size

    def validate(self) -> None:
        if not (self.onsets.size == self.durations.size == self.labels.size):
            raise DesignError("onsets, durations and labels differ in length")
        if self.onsets.size == 0:
            raise DesignError("event table is empty")
        if self.n_scans < 2 or not self.tr > 0:
            raise DesignError("n_scans must be >= 2 and tr > 0")
        if np.any(self.onsets < 0) or np.any(self.durations < 0):
            raise DesignError("onsets and durations must be non-negative")
        if np.any(np.diff(self.onsets) <= 0):
            raise DesignError("onsets must be strictly increasing in regressor order")
        end = self.onsets + self.durations
        if np.any(end > self.n_scans * self.tr + 1e-9):
            j = int(np.argmax(end > self.n_scans * self.tr + 1e-9))
            raise DesignError(f"event {j + 1} ends at {end[j]:g} s, after the last "
                              f"scan window ({self.n_scans * self.tr:g} s)")


@dataclass
class DesignMatrix:
    values: np.ndarray
    stimulus_columns: np.ndarray
    tr: float
    names: list[str] = field(default_factory=list)

    @property
    def n_stimuli(self) -> int:
        return len(self.stimulus_columns)

    @property
    def shape(self):
        return self.values.shape


def _boxcar(onset, duration, dt, n_micro):
    start = int(round(onset / dt))
    stop = max(start + 1, int(round((onset + duration) / dt)))
    box = np.zeros(n_micro)
    box[start:min(stop, n_micro)] = 1.0
    return box


def build_design(events: EventTable, hrf: HrfParams = HrfParams(),
                 nuisance: np.ndarray | None = None) -> DesignMatrix:
    """Convolve one boxcar per event with the HRF and sample at scan onsets.

    Scan ``s`` (1-based) is sampled at ``(s - 1) * tr`` by linear
    interpolation on the microtime grid. Nuisance columns follow the stimulus
    columns; an intercept is always the last column.
    """
    hrf.validate(events.tr)
    kernel = canonical_hrf(hrf)
    dt = hrf.microtime_dt
    scan_times = np.arange(events.n_scans) * events.tr
    n_micro = int(math.ceil(scan_times[-1] / dt)) + 2
    micro_t = np.arange(n_micro) * dt

    cols = []
    for j, (onset, dur) in enumerate(zip(events.onsets, events.durations)):
        conv = np.convolve(_boxcar(onset, dur, dt, n_micro), kernel)[:n_micro]
        col = np.interp(scan_times, micro_t, conv)
        if not np.any(col != 0):
            raise DesignError(f"stimulus column {j + 1} is all zero")
        cols.append(col)
    names = [f"trial{j + 1}" for j in range(len(cols))]

    if nuisance is not None:
        nuisance = np.asarray(nuisance, dtype=float)
        if nuisance.ndim == 1:
            nuisance = nuisance[:, None]
        if nuisance.shape[0] != events.n_scans:
            raise DesignError(f"nuisance has {nuisance.shape[0]} rows, "
                              f"expected n_scans={events.n_scans}")
        cols.extend(nuisance.T)
        names += [f"nuisance{k + 1}" for k in range(nuisance.shape[1])]
    cols.append(np.ones(events.n_scans))
    names.append("intercept")
    return DesignMatrix(values=np.column_stack(cols),
                        stimulus_columns=np.arange(events.n_events),
                        tr=events.tr, names=names)


# --------------------------------------------------------------------------
# noise model
# --------------------------------------------------------------------------


def dct_basis(n_scans: int, tr: float, cutoff: float) -> np.ndarray:
    """Discrete-cosine drift basis with periods longer than ``cutoff``.

    Returns an ``n_scans x k`` matrix with ``k = floor(2 n tr / cutoff) + 1``
    columns, the first one constant.
    """
    if not cutoff > 2 * tr:
        raise FilterError(f"high-pass cutoff {cutoff!r} s must exceed 2*tr = {2 * tr:g} s")
    k = int(math.floor(2.0 * n_scans * tr / cutoff)) + 1
    if k >= n_scans:
        raise FilterError(f"high-pass basis with {k} columns spans all {n_scans} scans")
    t = np.arange(n_scans)
    basis = np.cos(np.pi * np.outer(2 * t + 1, np.arange(k)) / (2 * n_scans))
    basis[:, 0] = 1.0
    return basis


def dct_highpass(n_scans: int, tr: float, cutoff: float | None) -> np.ndarray:
    """Residual-forming matrix ``I - S (S'S)^-1 S'`` of the drift basis.

    ``cutoff=None`` or ``inf`` keeps only the constant, i.e. returns the
    centering matrix.
    """
    if cutoff is None or math.isinf(cutoff):
        s = np.ones((n_scans, 1))
    else:
        s = dct_basis(n_scans, tr, cutoff)
    q, _ = np.linalg.qr(s)
    h0 = np.eye(n_scans) - q @ q.T
    return (h0 + h0.T) / 2


def ar1_whitener(n_scans: int, rho: float) -> np.ndarray:
    """Lower-bidiagonal ``W`` with ``W V W' = I`` for ``V_jk = rho^|j-k|``."""
    if not -1 < rho < 1:
        raise ParameterError(f"AR(1) coefficient must lie in (-1, 1), got {rho!r}")
    s = math.sqrt(1.0 - rho * rho)
    w = np.eye(n_scans) / s
    w[0, 0] = 1.0
    idx = np.arange(1, n_scans)
    w[idx, idx - 1] = -rho / s
    return w


def ar1_covariance(n_scans: int, rho: float) -> np.ndarray:
    lag = np.abs(np.subtract.outer(np.arange(n_scans), np.arange(n_scans)))
    return rho ** lag


@dataclass
class NoiseModel:
    """AR(1) coefficient plus optional high-pass cutoff for one session."""

    n_scans: int
    tr: float
    ar1_rho: float = 0.0
    highpass_cutoff: float | None = None

    def __post_init__(self):
        if not -1 < self.ar1_rho < 1:
            raise ParameterError(f"ar1_rho must lie in (-1, 1), got {self.ar1_rho!r}")
        if self.highpass_cutoff is not None:
            dct_basis(self.n_scans, self.tr, self.highpass_cutoff)  # validates

    @property
    def whitener(self) -> np.ndarray:
        return ar1_whitener(self.n_scans, self.ar1_rho)

    @property
    def residual_former(self) -> np.ndarray:
        if self.highpass_cutoff is None:
            return np.eye(self.n_scans)
        return dct_highpass(self.n_scans, self.tr, self.highpass_cutoff)

    @property
    def operator(self) -> np.ndarray:
        """``H0 W``; applied to data and design before least squares."""
        return self.residual_former @ self.whitener

    @property
    def g_inv(self) -> np.ndarray:
        w = self.whitener
        return w.T @ self.residual_former @ w

    def to_dict(self) -> dict:
        return {"n_scans": self.n_scans, "tr": self.tr, "ar1_rho": self.ar1_rho,
                "highpass_cutoff": self.highpass_cutoff}


def estimate_ar1(residuals: np.ndarray) -> float:
    """Pooled lag-1 autocorrelation of residual time series.

    ``residuals`` is ``n_scans x n_voxels``. The estimate is
    ``sum e_t e_{t-1} / sum e_t^2`` over all voxels, clamped to [0, 0.95].
    """
    e = np.asarray(residuals, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] < 2 or e.shape[1] < 1:
        raise EstimationError("AR(1) estimation needs >= 2 scans and >= 1 voxel")
    den = float(np.sum(e * e))
    if not den > 0:
        raise EstimationError("residuals have zero energy; AR(1) is undefined")
    num = float(np.sum(e[1:] * e[:-1]))
    return min(max(num / den, 0.0), RHO_MAX)


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class BetaDataset:
    """Fitted coefficients for a set of voxels.

    ``betas`` is ``n_voxels x k`` over all design columns kept in the fit;
    ``bcov`` is the matching ``k x k`` matrix ``(X'G^-1 X)^-1``.
    """

    betas: np.ndarray
    sigma2: np.ndarray
    bcov: np.ndarray
    stimulus_columns: np.ndarray
    dof: float
    noise: NoiseModel | None = None
    column_names: list[str] = field(default_factory=list)
    dropped_columns: list[int] = field(default_factory=list)

    @property
    def stimulus_betas(self) -> np.ndarray:
        return self.betas[:, self.stimulus_columns]

    @property
    def stimulus_bcov(self) -> np.ndarray:
        idx = self.stimulus_columns
        return self.bcov[np.ix_(idx, idx)]

    @property
    def n_stimuli(self) -> int:
        return len(self.stimulus_columns)


def _as_design(X) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if isinstance(X, DesignMatrix):
        return X.values, np.asarray(X.stimulus_columns), list(X.names)
    values = np.asarray(X, dtype=float)
    return values, np.arange(values.shape[1]), []


def _whitened_design(values, stim, noise):
    """Apply ``H0 W`` to the design; drop annihilated nuisance columns.

    Returns the transformed design, kept column indices, stimulus positions
    among the kept columns and ``(X'G^-1X)^-1``.
    """
    xt = noise.operator @ values
    norms = np.linalg.norm(xt, axis=0)
    dead = norms <= 1e-8 * np.maximum(np.linalg.norm(values, axis=0), 1e-300)
    if np.any(dead[stim]):
        j = int(stim[np.argmax(dead[stim])])
        raise SingularDesignError(f"stimulus column {j + 1} is removed by the filter")
    keep = np.flatnonzero(~dead)
    xt = xt[:, keep]
    remap = {int(j): i for i, j in enumerate(keep)}
    stim_kept = np.array([remap[int(j)] for j in stim], dtype=int)
    m = xt.T @ xt
    rcond = 1.0 / np.linalg.cond(m)
    if not rcond >= RCOND_MIN:
        raise SingularDesignError(f"X'G^-1X is singular (rcond={rcond:.3g})")
    bcov = np.linalg.inv(m)
    return xt, keep, stim_kept, (bcov + bcov.T) / 2


def design_bcov(X, noise: NoiseModel | None = None) -> np.ndarray:
    """Stimulus block of ``(X'G^-1X)^-1`` for a design and noise model."""
    values, stim, _ = _as_design(X)
    if noise is None:
        noise = NoiseModel(n_scans=values.shape[0], tr=1.0)
    _, _, stim_kept, bcov = _whitened_design(values, stim, noise)
    return bcov[np.ix_(stim_kept, stim_kept)]


_BLOCK = 256


def gls_fit(data: np.ndarray, X, noise: NoiseModel | None = None,
            chunk_size: int | None = None) -> BetaDataset:
    """Fit ``beta_i = (X'G^-1X)^-1 X'G^-1 y_i`` for every column of ``data``.

    Parameters
    ----------
    data : array, shape (n_scans, n_voxels)
    X : DesignMatrix or array, shape (n_scans, k)
    noise : NoiseModel, optional
        Defaults to ordinary least squares (rho 0, no filter).
    chunk_size : int, optional
        Upper bound on voxels held in memory at once, rounded up to a
        multiple of the fixed internal block. Results do not depend on it.

    Notes
    -----
    Nuisance columns annihilated by the high-pass filter (e.g. the intercept
    when the constant lies in the drift basis) are dropped and listed in
    ``dropped_columns``. A stimulus column being annihilated, or a
    reciprocal condition number of ``X'G^-1X`` below 1e-12, raises
    :class:`SingularDesignError`.
    """
    values, stim, names = _as_design(X)
    y = np.asarray(data, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = values.shape[0]
    if y.shape[0] != n:
        raise DesignError(f"data has {y.shape[0]} scans, design has {n}")
    if noise is None:
        noise = NoiseModel(n_scans=n, tr=1.0)
    if noise.n_scans != n:
        raise DesignError("noise model and design disagree on n_scans")

    op = noise.operator
    xt, keep, stim_kept, bcov = _whitened_design(values, stim, noise)
    m = xt.T @ xt
    dropped = [j for j in range(values.shape[1]) if j not in set(keep.tolist())]
    k = xt.shape[1]
    dof = float(np.trace(noise.residual_former)) - k
    if not dof > 0:
        raise SingularDesignError("no residual degrees of freedom left")
    pinv = np.linalg.solve(m, xt.T)

    p = y.shape[1]
    betas = np.empty((p, k))
    sigma2 = np.empty(p)
    # BLAS results can depend on operand width, so every voxel is always
    # computed inside the same aligned block; chunk_size only groups blocks.
    step = _BLOCK * max(1, -(-int(chunk_size or p) // _BLOCK))
    for outer in range(0, p, step):
        for lo in range(outer, min(outer + step, p), _BLOCK):
            hi = min(lo + _BLOCK, p)
            yt = op @ y[:, lo:hi]
            b = pinv @ yt
            r = yt - xt @ b
            betas[lo:hi] = b.T
            sigma2[lo:hi] = np.einsum("ij,ij->j", r, r) / dof

    return BetaDataset(betas=betas, sigma2=sigma2, bcov=bcov,
                       stimulus_columns=stim_kept, dof=dof, noise=noise,
                       column_names=[names[j] for j in keep] if names else [],
                       dropped_columns=dropped)


def fit_two_pass(data: np.ndarray, X, tr: float,
                 highpass_cutoff: float | None = None,
                 rho: float | str = "estimate") -> BetaDataset:
    """OLS -> pooled AR(1) estimate -> GLS refit.

    ``rho`` may be a number to skip estimation.
    """
    values, _, _ = _as_design(X)
    n = values.shape[0]
    if isinstance(rho, str):
        if rho != "estimate":
            raise ParameterError(f"rho must be a number or 'estimate', got {rho!r}")
        first = gls_fit(data, X, NoiseModel(n, tr, 0.0, highpass_cutoff))
        op = first.noise.operator
        kept = np.delete(values, first.dropped_columns, axis=1)
        resid = op @ np.asarray(data, dtype=float).reshape(n, -1) - (op @ kept) @ first.betas.T
        rho = estimate_ar1(resid)
    return gls_fit(data, X, NoiseModel(n, tr, float(rho), highpass_cutoff))


def coefficient_covariance_sandwich(X, G: np.ndarray | None, gamma: np.ndarray,
                                    g_inv: np.ndarray | None = None) -> np.ndarray:
    """Coefficient covariance of GLS under a misspecified working model.

    Returns ``(X'G^-1X)^-1 X'G^-1 Gamma G^-1X (X'G^-1X)^-1`` where ``G`` is the
    working covariance and ``gamma`` the true one. ``g_inv`` may be passed
    instead of ``G`` when the working precision is singular (filtered
    models).
    """
    values, _, _ = _as_design(X)
    if g_inv is None:
        if G is None:
            raise ParameterError("either G or g_inv is required")
        g_inv = np.linalg.inv(np.asarray(G, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    n = values.shape[0]
    if g_inv.shape != (n, n) or gamma.shape != (n, n):
        raise DesignError("G and gamma must be n_scans x n_scans")
    a = values.T @ g_inv
    m = a @ values
    if not 1.0 / np.linalg.cond(m) >= RCOND_MIN:
        raise SingularDesignError("X'G^-1X is singular")
    lin = np.linalg.solve(m, a)
    out = lin @ gamma @ lin.T
    return (out + out.T) / 2


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


class GLSRegression(RegressorMixin, BaseEstimator):
    """Mass-univariate GLS with pooled AR(1) errors and DCT high-pass.

    Parameters
    ----------
    tr : float
        Repetition time in seconds.
    rho : float or 'estimate', default=0.0
        AR(1) coefficient of the working model. ``'estimate'`` runs the
        two-pass procedure (OLS residuals pooled over voxels).
    highpass_cutoff : float or None, default=None
        High-pass period cutoff in seconds.
    stimulus_columns : sequence of int or None
        Columns whose coefficients form the RSA set. Defaults to all.

    Attributes
    ----------
    coef_ : ndarray, shape (n_voxels, n_kept_columns)
    sigma2_ : ndarray, shape (n_voxels,)
    bcov_ : ndarray, shape (n_kept_columns, n_kept_columns)
    rho_ : float
    result_ : BetaDataset
    """

    def __init__(self, tr=2.26, rho=0.0, highpass_cutoff=None,
                 stimulus_columns: Sequence[int] | None = None):
        self.tr = tr
        self.rho = rho
        self.highpass_cutoff = highpass_cutoff
        self.stimulus_columns = stimulus_columns

    def fit(self, X, y):
        """Fit on design ``X`` (n_scans x k) and data ``y`` (n_scans x n_voxels)."""
        if isinstance(X, DesignMatrix):
            design = X
        else:
            values = check_array(X, dtype=np.float64)
            stim = (np.arange(values.shape[1]) if self.stimulus_columns is None
                    else np.asarray(self.stimulus_columns, dtype=int))
            design = DesignMatrix(values=values, stimulus_columns=stim, tr=self.tr)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        res = fit_two_pass(y, design, self.tr, self.highpass_cutoff, self.rho)
        self.result_ = res
        self.coef_ = res.betas
        self.sigma2_ = res.sigma2
        self.bcov_ = res.bcov
        self.rho_ = res.noise.ar1_rho
        self.n_features_in_ = design.values.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        values = X.values if isinstance(X, DesignMatrix) else check_array(X)
        values = np.delete(values, self.result_.dropped_columns, axis=1)
        return values @ self.coef_.T

    def score(self, X, y, sample_weight=None):
        # mean R^2 over voxels
        y = np.asarray(y, dtype=float).reshape(np.shape(y)[0], -1)
        resid = y - self.predict(X)
        ss_tot = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
        return float(np.mean(1.0 - np.sum(resid ** 2, axis=0) / ss_tot))
