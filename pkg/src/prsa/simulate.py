"""Synthetic block-design experiment on white-noise volumes.

Six blocks of four 3-s trials (24 regressors) separated by 12-s baselines.
Two labellings of the same trials produce opposite global biases when the
RSA is fitted to pure noise:

* pattern A alternates the two categories within each block;
* pattern B gives all trials of a block the same category, alternating
  across blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DesignError, ParameterError
from .glm import EventTable, HrfParams, build_design, gls_fit
from .inference import (
    average_volume_correlation,
    label_permutation_diagnostic,
)
from .rsa import (
    VectorizationRule,
    build_confounders,
    searchlight_rsa,
    stimulus_similarity,
)
from .volumes import Mask, SearchlightSpec, VolumeGeometry, searchlight_matrix

__all__ = [
    "Fig1Design",
    "LabelPattern",
    "pattern_labels",
    "make_fig1_events",
    "generate_noise_volume",
    "generate_noise_volumes",
    "SimulationConfig",
    "confounder_set_name",
    "simulate_subject",
    "summarize",
    "run_fig1_experiment",
]


@dataclass(frozen=True)
class Fig1Design:
    n_blocks: int = 6
    trials_per_block: int = 4
    stimulus_duration: float = 3.0
    block_duration: float = 12.0
    baseline_duration: float = 12.0
    tr: float = 2.26
    n_scans: int = 65

    @property
    def q(self) -> int:
        return self.n_blocks * self.trials_per_block

    def validate(self) -> None:
        if min(self.n_blocks, self.trials_per_block, self.n_scans) < 1:
            raise ParameterError("block/trial/scan counts must be positive")
        if self.trials_per_block * self.stimulus_duration > self.block_duration + 1e-9:
            raise DesignError("trials do not fit in a block")
        period = self.block_duration + self.baseline_duration
        end = (self.n_blocks - 1) * period + self.block_duration
        if end > self.n_scans * self.tr + 1e-9:
            raise DesignError(f"paradigm ends at {end:g} s, beyond "
                              f"{self.n_scans} x {self.tr:g} s of scanning")


@dataclass(frozen=True)
class LabelPattern:
    name: str
    labels: tuple

    @classmethod
    def named(cls, name: str, design: Fig1Design = Fig1Design()) -> "LabelPattern":
        return cls(name, tuple(pattern_labels(name, design)))


def pattern_labels(name: str, design: Fig1Design = Fig1Design()) -> np.ndarray:
    """Category labels (1/2) in trial order for pattern ``'A'`` or ``'B'``."""
    trial = np.tile(np.arange(design.trials_per_block), design.n_blocks)
    block = np.repeat(np.arange(design.n_blocks), design.trials_per_block)
    if name == "A":
        return trial % 2 + 1
    if name == "B":
        return block % 2 + 1
    raise ParameterError(f"unknown pattern {name!r}; expected 'A' or 'B'")


def make_fig1_events(design: Fig1Design = Fig1Design(), labels=None) -> EventTable:
    """Block ``b`` starts at ``(b-1) * (block + baseline)`` s; trials every 3 s."""
    design.validate()
    period = design.block_duration + design.baseline_duration
    step = design.block_duration / design.trials_per_block
    onsets = [b * period + k * step
              for b in range(design.n_blocks) for k in range(design.trials_per_block)]
    if labels is None:
        labels = pattern_labels("A", design)
    return EventTable(onsets=onsets, durations=[design.stimulus_duration] * design.q,
                      labels=labels, n_scans=design.n_scans, tr=design.tr)


def _subject_rng(seed: int, subject: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(subject)])


def generate_noise_volume(geometry: VolumeGeometry, n_scans: int, seed: int,
                          subject: int) -> np.ndarray:
    """One subject's i.i.d. N(0, 1) 4D data, shape ``dims + (n_scans,)``."""
    rng = _subject_rng(seed, subject)
    return rng.standard_normal(geometry.dims + (int(n_scans),))


def generate_noise_volumes(n_subjects: int, geometry: VolumeGeometry, n_scans: int,
                           seed: int) -> list[np.ndarray]:
    if min(n_subjects, n_scans) < 1:
        raise ParameterError("n_subjects and n_scans must be positive")
    return [generate_noise_volume(geometry, n_scans, seed, s) for s in range(n_subjects)]


@dataclass
class SimulationConfig:
    patterns: tuple = ("A", "B")
    confounder_sets: tuple = ((), ("bcov",))
    dims: tuple = (16, 16, 16)
    voxel_size: tuple = (2.0, 2.0, 2.0)
    n_subjects: int = 30
    seed: int = 0
    method: str = "pearson"
    similarity: str = "sscp"
    radius_mm: float = 8.0
    min_voxels: int = 27
    offset: int = 1
    design: Fig1Design = field(default_factory=Fig1Design)
    hrf: HrfParams = field(default_factory=HrfParams)
    n_label_perm: int = 0

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(tuple(self.dims), tuple(self.voxel_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patterns"] = list(self.patterns)
        d["confounder_sets"] = [list(c) for c in self.confounder_sets]
        d["dims"] = list(self.dims)
        d["voxel_size"] = list(self.voxel_size)
        return d


def confounder_set_name(kinds) -> str:
    return "+".join(kinds) if kinds else "none"


def simulate_subject(config: SimulationConfig, subject: int, design_matrix=None,
                     members=None, mask=None) -> list[dict]:
    """Fit OLS to one noise subject and return one row per analysis cell."""
    geom = config.geometry
    mask = mask or Mask.full(geom)
    spec = SearchlightSpec(config.radius_mm, config.min_voxels)
    if design_matrix is None:
        design_matrix = build_design(make_fig1_events(config.design), config.hrf)
    if members is None:
        members = searchlight_matrix(mask, spec)
    vol = generate_noise_volume(geom, config.design.n_scans, config.seed, subject)
    y = vol[mask.included].T
    fit = gls_fit(y, design_matrix)
    betas = fit.stimulus_betas
    rule = VectorizationRule(config.offset)

    rows = []
    for name in config.patterns:
        model = stimulus_similarity(pattern_labels(name, config.design))
        for kinds in config.confounder_sets:
            conf = build_confounders(kinds, betas, fit.stimulus_bcov)
            rmap = searchlight_rsa(betas, mask, spec, model, conf, rule, config.method,
                                   config.similarity, subject_id=str(subject),
                                   members=members)
            rows.append({
                "subject": subject,
                "pattern": name,
                "confounder_set": confounder_set_name(kinds),
                "average_volume_correlation": average_volume_correlation(rmap),
                "n_searchlights": rmap.provenance["n_searchlights"],
                "n_degenerate": rmap.provenance["n_degenerate"],
            })
    return rows


def summarize(rows: list[dict]) -> dict:
    """Mean, sd and standard error of the diagnostic per (pattern, set) cell."""
    cells: dict[tuple, list] = {}
    for r in rows:
        cells.setdefault((r["pattern"], r["confounder_set"]), []).append(
            r["average_volume_correlation"])
    out = {}
    for (pattern, cset), vals in cells.items():
        v = np.asarray(vals)
        sd = float(v.std(ddof=1)) if v.size > 1 else float("nan")
        out[f"{pattern}|{cset}"] = {
            "pattern": pattern,
            "confounder_set": cset,
            "n_subjects": int(v.size),
            "mean": float(v.mean()),
            "sd": sd,
            "se": sd / math.sqrt(v.size) if v.size > 1 else float("nan"),
        }
    return out


def run_fig1_experiment(config: SimulationConfig | None = None, n_jobs: int = 1) -> dict:
    """Run the full noise simulation.

    Each subject is fitted by OLS (no filter, no AR(1), intercept only as
    nuisance) and analysed for every pattern x confounder-set cell.

    Returns
    -------
    dict
        ``rows`` (per-subject diagnostics), ``summary`` per cell and, when
        ``n_label_perm > 0``, the label permutation diagnostic.
    """
    config = config or SimulationConfig()
    config.design.validate()
    geom = config.geometry
    mask = Mask.full(geom)
    spec = SearchlightSpec(config.radius_mm, config.min_voxels)
    events = make_fig1_events(config.design)
    design_matrix = build_design(events, config.hrf)
    members = searchlight_matrix(mask, spec)

    subjects = range(config.n_subjects)
    if n_jobs == 1:
        per = [simulate_subject(config, s, design_matrix, members, mask) for s in subjects]
    else:
        from joblib import Parallel, delayed
        per = Parallel(n_jobs=n_jobs)(
            delayed(simulate_subject)(config, s, design_matrix, members, mask)
            for s in subjects)
    rows = [r for sub in per for r in sub]
    report = {"rows": rows, "summary": summarize(rows)}

    if config.n_label_perm:
        pats = {name: pattern_labels(name, config.design) for name in config.patterns}
        diag = label_permutation_diagnostic(events, None, pats, config.n_label_perm,
                                            config.seed, config.hrf,
                                            VectorizationRule(config.offset))
        report["label_permutation"] = diag
    return report
