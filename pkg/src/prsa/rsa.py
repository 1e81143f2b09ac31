"""Similarity matrices, confounder estimators and (partial) correlation RSA.

The brain similarity of a searchlight is by default the sum of squares and
cross-products of its stimulus coefficients, ``sum_i b_i b_i'``. Under a
non-orthogonal design its expectation contains ``sum_i sigma_i^2 BCOV``, so
the concordance with a stimulus model is computed as a partial correlation
over the off-diagonal terms, with confounder matrices (BCOV, the volume
covariance ``svar`` or the volume cross-product ``bb``) partialled out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    CollinearityError,
    DegenerateModelError,
    DegenerateSignal,
    EstimationError,
    ParameterError,
)
from .glm import BetaDataset
from .inference import RsaMap
from .volumes import Mask, SearchlightSpec, searchlight_matrix

__all__ = [
    "SimilarityMatrix",
    "VectorizationRule",
    "ConfounderSet",
    "stimulus_similarity",
    "brain_sscp",
    "brain_neg_correlation",
    "volume_svar",
    "volume_bb",
    "vectorize",
    "pearson",
    "spearman",
    "partial_correlation",
    "build_confounders",
    "searchlight_rsa",
    "SearchlightRSA",
]

KINDS = ("stimulus-model", "brain-sscp", "brain-neg-correlation",
         "confounder-bcov", "confounder-svar", "confounder-bb")
CONFOUNDER_KINDS = ("bcov", "svar", "bb")
METHODS = ("pearson", "spearman")
SIMILARITIES = ("sscp", "neg-correlation")

_DEGENERATE_TOL = 1e-12


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    kind: str = "stimulus-model"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ParameterError(f"similarity matrix must be square, got {v.shape}")
        if self.kind not in KINDS:
            raise ParameterError(f"unknown similarity kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("similarity matrix has non-finite entries")
        scale = max(np.abs(v).max(), 1.0)
        if np.abs(v - v.T).max() > 1e-12 * scale:
            raise ParameterError("similarity matrix is not symmetric")
        self.values = v

    @property
    def q(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class VectorizationRule:
    """Upper-triangle pairs ``(i, j)`` with ``j - i >= offset``, row-major.

    ``offset=1`` keeps all off-diagonal terms; larger offsets drop pairs of
    temporally adjacent trials.
    """

    offset: int = 1

    def pairs(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        if int(self.offset) < 1:
            raise ParameterError("vectorization offset must be >= 1")
        if self.offset >= q:
            raise ParameterError(f"offset {self.offset} leaves no pairs for q={q}")
        rows, cols = np.triu_indices(q, k=int(self.offset))
        if rows.size < 3:
            raise ParameterError(f"offset {self.offset} leaves {rows.size} pairs for "
                                 f"q={q}; at least 3 are needed")
        return rows, cols

    def length(self, q: int) -> int:
        return len(self.pairs(q)[0])


@dataclass
class ConfounderSet:
    matrices: list[SimilarityMatrix] = field(default_factory=list)

    def __post_init__(self):
        for m in self.matrices:
            if not m.kind.startswith("confounder-"):
                raise ParameterError(f"{m.kind!r} is not a confounder kind")
        if len({m.q for m in self.matrices}) > 1:
            raise ParameterError("confounder matrices differ in size")

    def __len__(self):
        return len(self.matrices)

    @property
    def kinds(self) -> list[str]:
        return [m.kind.removeprefix("confounder-") for m in self.matrices]

    def vectorized(self, rule: VectorizationRule) -> np.ndarray:
        """``m x k`` matrix of vectorized confounders (``k`` may be 0)."""
        if not self.matrices:
            return np.empty((0, 0))
        return np.column_stack([vectorize(m, rule) for m in self.matrices])


# --------------------------------------------------------------------------
# similarity matrices
# --------------------------------------------------------------------------


def stimulus_similarity(labels: Sequence) -> SimilarityMatrix:
    """1 for pairs of the same category (and on the diagonal), 0 otherwise."""
    labels = np.asarray(labels).ravel()
    s = (labels[:, None] == labels[None, :]).astype(float)
    off = s[np.triu_indices(len(labels), k=1)]
    if off.size == 0 or np.all(off == off[0]):
        raise DegenerateModelError("stimulus model has constant off-diagonal terms "
                                   "(all labels equal or all distinct)")
    return SimilarityMatrix(s, "stimulus-model")


def _betas(b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    return b


def brain_sscp(betas: np.ndarray) -> SimilarityMatrix:
    """``sum_i b_i b_i'`` over the rows (voxels) of a ``p x q`` array."""
    b = _betas(betas)
    s = b.T @ b
    return SimilarityMatrix((s + s.T) / 2, "brain-sscp")


def brain_neg_correlation(betas: np.ndarray) -> SimilarityMatrix:
    """Negated correlation across voxels between stimulus coefficient rows."""
    b = _betas(betas)
    c = b - b.mean(axis=0)
    ss = np.einsum("ij,ij->j", c, c)
    if np.any(ss <= _DEGENERATE_TOL * np.maximum(np.einsum("ij,ij->j", b, b), 1e-300)):
        raise DegenerateSignal("a stimulus has zero variance across searchlight voxels")
    r = (c.T @ c) / np.sqrt(np.outer(ss, ss))
    r = (r + r.T) / 2
    np.fill_diagonal(r, 1.0)
    return SimilarityMatrix(-np.clip(r, -1, 1), "brain-neg-correlation")


def volume_svar(betas: np.ndarray) -> SimilarityMatrix:
    """Covariance of coefficient vectors over in-mask voxels (divisor v)."""
    b = _betas(betas)
    if b.shape[0] < 2:
        raise EstimationError("volume covariance needs at least 2 voxels")
    c = b - b.mean(axis=0)
    s = c.T @ c / b.shape[0]
    return SimilarityMatrix((s + s.T) / 2, "confounder-svar")


def volume_bb(betas: np.ndarray) -> SimilarityMatrix:
    """Uncentered mean cross-product ``v^-1 B B'`` over in-mask voxels."""
    b = _betas(betas)
    if b.shape[0] < 1:
        raise EstimationError("volume cross-product needs at least 1 voxel")
    s = b.T @ b / b.shape[0]
    return SimilarityMatrix((s + s.T) / 2, "confounder-bb")


def vectorize(m, rule: VectorizationRule = VectorizationRule()) -> np.ndarray:
    values = m.values if isinstance(m, SimilarityMatrix) else np.asarray(m, dtype=float)
    rows, cols = rule.pairs(values.shape[0])
    return values[rows, cols]


# --------------------------------------------------------------------------
# correlations
# --------------------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ParameterError(f"vectors differ in length ({a.size} vs {b.size})")
    if a.size < 3:
        raise ParameterError("correlation needs at least 3 pairs")
    return a, b


def pearson(a, b) -> float:
    a, b = _check_pair(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na <= _DEGENERATE_TOL * np.linalg.norm(a) or nb <= _DEGENERATE_TOL * np.linalg.norm(b):
        raise DegenerateSignal("constant input to correlation")
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))


def spearman(a, b) -> float:
    a, b = _check_pair(a, b)
    return pearson(rankdata(a), rankdata(b))


def _confounder_matrix(confounders, m: int) -> np.ndarray:
    if confounders is None:
        return np.empty((m, 0))
    if isinstance(confounders, ConfounderSet):
        raise ParameterError("vectorize the ConfounderSet before calling partial_correlation")
    c = np.asarray(confounders, dtype=float)
    if c.size == 0:
        return np.empty((m, 0))
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] != m and c.shape[1] == m:
        c = c.T
    if c.shape[0] != m:
        raise ParameterError(f"confounders have {c.shape[0]} rows, vectors have {m}")
    return c


def _nuisance_basis(conf: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``[1, conf]``; raises on collinearity."""
    m, k = conf.shape
    z = np.column_stack([np.ones(m), conf])
    if m < k + 3:
        raise CollinearityError(f"{m} pairs cannot support {k} confounders (need >= k + 3)")
    q, r = np.linalg.qr(z)
    d = np.abs(np.diag(r))
    if d.min() <= 1e-10 * d.max():
        raise CollinearityError("confounder vectors and intercept are linearly dependent")
    return q


def partial_correlation(a, b, confounders=None) -> float:
    """Correlation of ``a`` and ``b`` after regressing both on confounders.

    ``confounders`` is an ``m x k`` array (or a list of length-``m`` vectors);
    an intercept is always included. With no confounders the result equals
    :func:`pearson`.
    """
    a, b = _check_pair(a, b)
    conf = _confounder_matrix(confounders, a.size)
    if conf.shape[1] == 0:
        return pearson(a, b)
    _nuisance_basis(conf)  # collinearity check
    z = np.column_stack([np.ones(a.size), conf])
    ra = a - z @ np.linalg.lstsq(z, a, rcond=None)[0]
    rb = b - z @ np.linalg.lstsq(z, b, rcond=None)[0]
    if np.linalg.norm(ra) <= _DEGENERATE_TOL * np.linalg.norm(a):
        raise DegenerateSignal("first vector is explained by the confounders")
    if np.linalg.norm(rb) <= _DEGENERATE_TOL * np.linalg.norm(b):
        raise DegenerateSignal("second vector is explained by the confounders")
    return pearson(ra, rb)


# --------------------------------------------------------------------------
# searchlight engine
# --------------------------------------------------------------------------


def build_confounders(kinds: Iterable[str], stimulus_betas: np.ndarray,
                      bcov: np.ndarray | None = None) -> ConfounderSet:
    """Assemble confounders by name (``bcov``, ``svar``, ``bb``), in order.

    Volume estimators use all rows of ``stimulus_betas`` (the in-mask voxels).
    """
    mats = []
    for kind in kinds:
        if kind == "bcov":
            if bcov is None:
                raise ParameterError("confounder 'bcov' requested but no BCOV supplied")
            mats.append(SimilarityMatrix(bcov, "confounder-bcov"))
        elif kind == "svar":
            mats.append(volume_svar(stimulus_betas))
        elif kind == "bb":
            mats.append(volume_bb(stimulus_betas))
        else:
            raise ParameterError(f"unknown confounder {kind!r}; choose from {CONFOUNDER_KINDS}")
    return ConfounderSet(mats)


def _pair_products(betas, rows, cols, members, chunk=128):
    out = np.empty((members.shape[0], len(rows)))
    for lo in range(0, len(rows), chunk):
        r, c = rows[lo:lo + chunk], cols[lo:lo + chunk]
        out[:, lo:lo + chunk] = members @ (betas[:, r] * betas[:, c])
    return out


def searchlight_similarities(betas: np.ndarray, members: sparse.spmatrix,
                             rows: np.ndarray, cols: np.ndarray,
                             similarity: str = "sscp") -> np.ndarray:
    """Vectorized brain similarity for every searchlight.

    Returns an ``n_centers x n_pairs`` array; rows of degenerate
    searchlights (``neg-correlation`` with a zero-variance stimulus) are NaN.
    """
    if similarity == "sscp":
        return _pair_products(betas, rows, cols, members)
    if similarity != "neg-correlation":
        raise ParameterError(f"unknown brain similarity {similarity!r}")
    n = np.asarray(members.sum(axis=1)).ravel()[:, None]
    mean = (members @ betas) / n
    sq = (members @ (betas * betas)) / n
    var = sq - mean ** 2
    bad = np.any(var <= _DEGENERATE_TOL * np.maximum(sq, 1e-300), axis=1)
    var[bad] = 1.0
    cov = _pair_products(betas, rows, cols, members) / n - mean[:, rows] * mean[:, cols]
    corr = np.clip(cov / np.sqrt(var[:, rows] * var[:, cols]), -1.0, 1.0)
    corr[bad] = np.nan
    return -corr


def correlate_rows(brain: np.ndarray, model: np.ndarray,
                   confounders: np.ndarray | None = None,
                   method: str = "pearson") -> np.ndarray:
    """(Partial) correlation of each row of ``brain`` with ``model``.

    Rows that are constant, non-finite, or fully explained by the
    confounders yield NaN.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {METHODS}")
    brain = np.atleast_2d(np.asarray(brain, dtype=float))
    model = np.asarray(model, dtype=float).ravel()
    m = model.size
    conf = _confounder_matrix(confounders, m)
    finite = np.all(np.isfinite(brain), axis=1)
    brain = np.where(finite[:, None], brain, 0.0)
    if method == "spearman":
        brain = rankdata(brain, axis=1)
        model = rankdata(model)
        if conf.shape[1]:
            conf = rankdata(conf, axis=0)
    q = _nuisance_basis(conf)
    ar = model - q @ (q.T @ model)
    na = np.linalg.norm(ar)
    if na <= _DEGENERATE_TOL * np.linalg.norm(model):
        raise DegenerateModelError("stimulus model is explained by the confounders")
    br = brain - (brain @ q) @ q.T
    nb = np.linalg.norm(br, axis=1)
    ok = finite & (nb > _DEGENERATE_TOL * np.linalg.norm(brain, axis=1))
    r = np.full(brain.shape[0], np.nan)
    r[ok] = np.clip((br[ok] @ ar) / (nb[ok] * na), -1.0, 1.0)
    return r


def _as_similarity(model, kind="stimulus-model") -> SimilarityMatrix:
    if isinstance(model, SimilarityMatrix):
        return model
    arr = np.asarray(model)
    if arr.ndim == 1:
        return stimulus_similarity(arr)
    return SimilarityMatrix(arr, kind)


def searchlight_rsa(betas, mask: Mask, spec: SearchlightSpec, model,
                    confounders: ConfounderSet | None = None,
                    rule: VectorizationRule = VectorizationRule(),
                    method: str = "pearson", similarity: str = "sscp",
                    subject_id: str = "", members=None) -> RsaMap:
    """Searchlight RSA map over a mask.

    Parameters
    ----------
    betas : BetaDataset or array, shape (n_in_mask, q)
        Stimulus coefficients of in-mask voxels, in mask voxel order. For a
        :class:`BetaDataset` only the stimulus columns are used.
    model : SimilarityMatrix, labels, or q x q array
    confounders : ConfounderSet, optional
    members : tuple, optional
        Precomputed ``searchlight_matrix(mask, spec)``.

    Returns
    -------
    RsaMap
        Correlation at each admitted center; NaN at omitted or degenerate
        centers. ``provenance`` records settings and searchlight counts.
    """
    if isinstance(betas, BetaDataset):
        b = betas.stimulus_betas
    else:
        b = np.asarray(betas, dtype=float)
    if b.shape[0] != mask.voxel_count:
        raise ParameterError(f"{b.shape[0]} beta rows for {mask.voxel_count} in-mask voxels")
    model = _as_similarity(model)
    q = b.shape[1]
    if model.q != q:
        raise ParameterError(f"model is {model.q} x {model.q}, betas have q={q}")
    confounders = confounders or ConfounderSet()
    if confounders.matrices and confounders.matrices[0].q != q:
        raise ParameterError("confounders do not match q")
    rows, cols = rule.pairs(q)
    centers, mem = members if members is not None else searchlight_matrix(mask, spec)

    brain = searchlight_similarities(b, mem, rows, cols, similarity)
    conf = confounders.vectorized(rule) if len(confounders) else None
    r = correlate_rows(brain, model.values[rows, cols], conf, method)

    flat = np.full(mask.voxel_count, np.nan)
    flat[centers] = r
    n_deg = int(np.sum(np.isnan(r)))
    provenance = {
        "confounders": confounders.kinds,
        "offset": int(rule.offset),
        "method": method,
        "similarity": similarity,
        "radius_mm": float(spec.radius_mm),
        "min_voxels": int(spec.min_voxels),
        "n_pairs": int(len(rows)),
        "n_searchlights": int(len(centers)),
        "n_degenerate": n_deg,
    }
    return RsaMap(values=mask.unmask(flat), geometry=mask.geometry,
                  subject_id=subject_id, provenance=provenance)


class SearchlightRSA(TransformerMixin, BaseEstimator):
    """Searchlight (partial) correlation RSA as a transformer.

    ``fit`` estimates the volume-level confounders from the in-mask
    stimulus coefficients; ``transform`` returns one correlation per in-mask
    voxel (NaN where no admitted searchlight is centred).

    Parameters
    ----------
    mask : Mask
    model : array-like
        Category labels (length q) or a q x q similarity matrix.
    confounders : sequence of {'bcov', 'svar', 'bb'}
    bcov : ndarray, shape (q, q), optional
        Required when ``'bcov'`` is among the confounders.
    radius_mm, min_voxels : searchlight geometry.
    offset : int
        Smallest ``j - i`` of the similarity pairs entering the correlation.
    method : {'pearson', 'spearman'}
    similarity : {'sscp', 'neg-correlation'}
    """

    def __init__(self, mask=None, model=None, confounders=("bcov",), bcov=None,
                 radius_mm=8.0, min_voxels=27, offset=1, method="pearson",
                 similarity="sscp"):
        self.mask = mask
        self.model = model
        self.confounders = confounders
        self.bcov = bcov
        self.radius_mm = radius_mm
        self.min_voxels = min_voxels
        self.offset = offset
        self.method = method
        self.similarity = similarity

    def _spec(self):
        return SearchlightSpec(self.radius_mm, self.min_voxels)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.mask is None:
            raise ParameterError("SearchlightRSA needs a mask")
        self.model_ = _as_similarity(self.model)
        self.confounders_ = build_confounders(self.confounders or (), X, self.bcov)
        self.rule_ = VectorizationRule(self.offset)
        self.members_ = searchlight_matrix(self.mask, self._spec())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "members_")
        X = check_array(X, dtype=np.float64)
        return self.to_map(X).values[self.mask.included]

    def to_map(self, X, subject_id="") -> RsaMap:
        check_is_fitted(self, "members_")
        return searchlight_rsa(X, self.mask, self._spec(), self.model_,
                               self.confounders_, self.rule_, self.method,
                               self.similarity, subject_id, members=self.members_)
