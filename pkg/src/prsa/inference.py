"""Bias diagnostics, smoothing and second-level (group) inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .exceptions import DegenerateModelError, DegenerateSignal, InferenceError, ParameterError
from .volumes import VolumeGeometry

__all__ = [
    "RsaMap",
    "GroupResult",
    "LabelPermutationResult",
    "average_volume_correlation",
    "fwhm_to_sigma",
    "smooth_gaussian",
    "group_ttest",
    "permutation_maxt",
    "label_permutation_diagnostic",
    "bcov_label_permutation",
]


@dataclass
class RsaMap:
    """Searchlight correlation map; NaN marks missing voxels."""

    values: np.ndarray
    geometry: VolumeGeometry
    subject_id: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.geometry.dims:
            raise ParameterError(f"map shape {self.values.shape} does not match "
                                 f"{self.geometry.dims}")

    @property
    def present(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass
class GroupResult:
    t_map: np.ndarray
    df: int
    corrected_threshold: float = float("nan")
    maxt_distribution: np.ndarray | None = None
    rejected: np.ndarray | None = None
    p_corrected: np.ndarray | None = None


def average_volume_correlation(rsa_map) -> float:
    """Mean of the non-missing searchlight correlations."""
    values = rsa_map.values if isinstance(rsa_map, RsaMap) else np.asarray(rsa_map, float)
    present = values[np.isfinite(values)]
    if present.size == 0:
        raise InferenceError("map has no non-missing voxels")
    return float(present.mean())


def fwhm_to_sigma(fwhm: float) -> float:
    return fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def smooth_gaussian(rsa_map, fwhm_mm: float, voxel_size=None):
    """Mask-normalised separable Gaussian smoothing.

    ``value * indicator`` and ``indicator`` are smoothed separately and
    divided, so edges are not attenuated. Missing voxels stay missing.
    Accepts an :class:`RsaMap` (returns a new one) or a 3D array plus
    ``voxel_size``.
    """
    if fwhm_mm < 0:
        raise ParameterError("fwhm must be >= 0")
    if isinstance(rsa_map, RsaMap):
        values, vox = rsa_map.values, rsa_map.geometry.voxel_size
    else:
        values = np.asarray(rsa_map, dtype=float)
        vox = voxel_size if voxel_size is not None else (1.0,) * values.ndim
    ind = np.isfinite(values)
    if fwhm_mm == 0:
        out = values.copy()
    else:
        sigma = [fwhm_to_sigma(fwhm_mm) / v for v in vox]
        num = ndimage.gaussian_filter(np.where(ind, values, 0.0), sigma, mode="constant")
        den = ndimage.gaussian_filter(ind.astype(float), sigma, mode="constant")
        out = np.full(values.shape, np.nan)
        out[ind] = num[ind] / den[ind]
    if isinstance(rsa_map, RsaMap):
        prov = dict(rsa_map.provenance, smoothing_fwhm_mm=float(fwhm_mm))
        return RsaMap(out, rsa_map.geometry, rsa_map.subject_id, prov)
    return out


def _stack(maps) -> tuple[np.ndarray, tuple]:
    arrays = [m.values if isinstance(m, RsaMap) else np.asarray(m, dtype=float) for m in maps]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise InferenceError(f"subject maps differ in shape: {sorted(shapes)}")
    shape = arrays[0].shape
    return np.stack([a.ravel() for a in arrays]), shape


def _tstats(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / math.sqrt(n))
    t[~(sd > 0)] = np.nan
    return t


def group_ttest(maps: Sequence, fisher_z: bool = False) -> GroupResult:
    """One-sample t test over subjects at each voxel.

    Voxels missing in any subject, or with zero standard deviation, are
    missing in the t map.
    """
    x, shape = _stack(maps)
    n = x.shape[0]
    if n < 3:
        raise InferenceError(f"group t test needs >= 3 subjects, got {n}")
    if fisher_z:
        x = np.arctanh(np.clip(x, -1 + 1e-15, 1 - 1e-15))
    complete = np.all(np.isfinite(x), axis=0)
    t = np.full(x.shape[1], np.nan)
    t[complete] = _tstats(x[:, complete])
    return GroupResult(t_map=t.reshape(shape), df=n - 1)


def _flip_signs(seed: int, index: int, n: int) -> np.ndarray:
    if index == 0:
        return np.ones(n)
    rng = np.random.default_rng([int(seed), int(index)])
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def permutation_maxt(maps: Sequence, n_perm: int = 2000, alpha: float = 0.05,
                     seed: int = 0, fisher_z: bool = False,
                     chunk: int = 256) -> GroupResult:
    """Sign-flipping max-|t| permutation test (strong FWE control).

    The distribution has ``n_perm`` members; member 0 is the unflipped
    (observed) data, the others flip each subject's map with a fair coin
    drawn from a stream seeded by ``(seed, permutation index)``. The
    corrected threshold is the ``1 - alpha`` quantile (``higher`` order
    statistic) of the max-|t| distribution.
    """
    if n_perm < 100:
        raise ParameterError("n_perm must be >= 100")
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    res = group_ttest(maps, fisher_z=fisher_z)
    x, shape = _stack(maps)
    if fisher_z:
        x = np.arctanh(np.clip(x, -1 + 1e-15, 1 - 1e-15))
    t_obs = res.t_map.ravel()
    use = np.isfinite(t_obs)
    x = x[:, use]
    n = x.shape[0]
    sumsq = np.sum(x * x, axis=0)

    maxt = np.zeros(n_perm)
    for lo in range(0, n_perm, chunk):
        idx = range(lo, min(lo + chunk, n_perm))
        signs = np.stack([_flip_signs(seed, i, n) for i in idx])
        if x.shape[1] == 0:
            continue
        mean = signs @ x / n
        var = (sumsq - n * mean * mean) / (n - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.abs(mean) / np.sqrt(var / n)
        t[~(var > 0)] = np.nan
        m = np.nanmax(np.where(np.isnan(t), -np.inf, t), axis=1)
        maxt[lo:lo + len(idx)] = np.where(np.isfinite(m), m, 0.0)

    threshold = float(np.quantile(maxt, 1 - alpha, method="higher"))
    abs_t = np.abs(t_obs)
    rejected = np.zeros(t_obs.size, dtype=bool)
    rejected[use] = abs_t[use] > threshold
    p = np.full(t_obs.size, np.nan)
    p[use] = (maxt[None, :] >= abs_t[use, None] - 1e-12 * abs_t[use, None]).mean(axis=1)
    return GroupResult(t_map=res.t_map, df=res.df, corrected_threshold=threshold,
                       maxt_distribution=maxt, rejected=rejected.reshape(shape),
                       p_corrected=p.reshape(shape))


@dataclass
class LabelPermutationResult:
    distribution: np.ndarray
    observed: dict
    n_resampled: int
    bcov_vector: np.ndarray


def label_permutation_diagnostic(events, noise_model=None, patterns=None, n_perm=2000,
                                 seed=0, hrf=None, rule=None, nuisance=None
                                 ) -> LabelPermutationResult:
    """Correlate randomly relabelled stimulus models with the design BCOV.

    Builds the design for ``events`` and its stimulus coefficient
    covariance under ``noise_model``, then calls :func:`bcov_label_permutation`.
    ``patterns`` defaults to the event labels.
    """
    from .glm import HrfParams, build_design, design_bcov

    design = build_design(events, hrf or HrfParams(), nuisance)
    if not patterns:
        patterns = {"events": np.asarray(events.labels)}
    return bcov_label_permutation(design_bcov(design, noise_model), patterns, n_perm,
                                  seed, rule)


def bcov_label_permutation(bcov, patterns: dict, n_perm=2000, seed=0, rule=None
                           ) -> LabelPermutationResult:
    """Permutation distribution of corr(stimulus model, BCOV) off-diagonals.

    ``patterns`` maps names to label vectors; their correlations with the
    vectorized BCOV are returned as ``observed``. The permutation
    distribution shuffles the labels of the first pattern. Draws giving a
    degenerate stimulus model are redrawn and counted. If BCOV has no
    off-diagonal structure (orthogonal design) every value is NaN.
    """
    from .rsa import VectorizationRule, pearson, stimulus_similarity, vectorize

    rule = rule or VectorizationRule()
    bcov = np.asarray(bcov, dtype=float)
    # entries at rounding level are structural zeros
    scale = np.abs(np.diag(bcov)).max()
    bcov = np.where(np.abs(bcov) <= 1e-12 * scale, 0.0, bcov)
    target = vectorize(bcov, rule)

    def corr(labels):
        return pearson(vectorize(stimulus_similarity(labels), rule), target)

    defined = np.ptp(target) > 0
    observed = {name: (corr(lab) if defined else float("nan"))
                for name, lab in patterns.items()}
    base = np.asarray(next(iter(patterns.values())))
    rng = np.random.default_rng(seed)
    dist = np.full(n_perm, np.nan)
    resampled = 0
    for i in range(n_perm):
        if not defined:
            break
        while True:
            try:
                dist[i] = corr(rng.permutation(base))
                break
            except (DegenerateModelError, DegenerateSignal):
                resampled += 1
                if resampled > 100 * n_perm:
                    raise InferenceError("label permutations are all degenerate")
    return LabelPermutationResult(distribution=dist, observed=observed,
                                  n_resampled=resampled, bcov_vector=target)
