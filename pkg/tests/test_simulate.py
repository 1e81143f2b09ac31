import numpy as np
import pytest

from prsa.exceptions import DesignError, ParameterError
from prsa.glm import build_design, design_bcov
from prsa.rsa import pearson, stimulus_similarity, vectorize
from prsa.simulate import (
    Fig1Design,
    LabelPattern,
    SimulationConfig,
    generate_noise_volume,
    generate_noise_volumes,
    make_fig1_events,
    pattern_labels,
    run_fig1_experiment,
    simulate_subject,
    summarize,
)
from prsa.volumes import VolumeGeometry

SMALL = VolumeGeometry((10, 10, 10), (2.0, 2.0, 2.0))


class TestDesign:
    def test_onsets(self):
        ev = make_fig1_events()
        assert ev.n_events == 24
        assert ev.onsets[0] == 0.0
        assert ev.onsets[-1] == 129.0
        assert ev.onsets[-1] + ev.durations[-1] <= 65 * 2.26
        np.testing.assert_allclose(ev.onsets[:5], [0, 3, 6, 9, 24])
        np.testing.assert_array_equal(ev.durations, 3.0)

    def test_too_long(self):
        with pytest.raises(DesignError):
            make_fig1_events(Fig1Design(n_scans=50))
        with pytest.raises(DesignError):
            Fig1Design(trials_per_block=5).validate()

    def test_q(self):
        assert Fig1Design().q == 24


class TestPatterns:
    def test_a_alternates_within_blocks(self):
        a = pattern_labels("A")
        np.testing.assert_array_equal(a[:8], [1, 2, 1, 2, 1, 2, 1, 2])

    def test_b_uniform_blocks(self):
        b = pattern_labels("B")
        np.testing.assert_array_equal(b, np.repeat([1, 2, 1, 2, 1, 2], 4))

    def test_named(self):
        p = LabelPattern.named("B")
        assert p.name == "B" and len(p.labels) == 24

    def test_unknown(self):
        with pytest.raises(ParameterError):
            pattern_labels("C")


class TestNoise:
    def test_deterministic_and_distinct(self):
        a = generate_noise_volume(SMALL, 5, seed=3, subject=0)
        b = generate_noise_volume(SMALL, 5, seed=3, subject=0)
        c = generate_noise_volume(SMALL, 5, seed=3, subject=1)
        assert a.shape == (10, 10, 10, 5)
        np.testing.assert_array_equal(a, b)
        assert np.all(a.ravel()[:100] != c.ravel()[:100])

    def test_mean_within_clt_bound(self):
        vols = generate_noise_volumes(1, VolumeGeometry((100, 100, 100), (2, 2, 2)), 1, 0)
        assert abs(vols[0].mean()) < 0.004
        assert vols[0].std() == pytest.approx(1.0, abs=0.004)

    def test_bad_counts(self):
        with pytest.raises(ParameterError):
            generate_noise_volumes(0, SMALL, 5, 0)


def _cfg(**kw):
    base = dict(dims=SMALL.dims, n_subjects=3)
    base.update(kw)
    return SimulationConfig(**base)


def test_unadjusted_sign_and_bcov_correction():
    rep = run_fig1_experiment(_cfg(n_subjects=4))
    s = rep["summary"]
    assert s["A|none"]["mean"] > 0 and s["B|none"]["mean"] < 0
    assert abs(s["A|bcov"]["mean"]) < abs(s["A|none"]["mean"]) / 5
    assert abs(s["B|bcov"]["mean"]) < abs(s["B|none"]["mean"]) / 5
    assert len(rep["rows"]) == 4 * 2 * 2


def test_sign_agrees_with_design_association():
    d = Fig1Design()
    bcov = design_bcov(build_design(make_fig1_events(d)))
    for seed in range(3):
        rep = run_fig1_experiment(_cfg(seed=seed, n_subjects=2, confounder_sets=((),)))
        for name in ("A", "B"):
            assoc = pearson(vectorize(stimulus_similarity(pattern_labels(name, d))),
                            vectorize(bcov))
            assert np.sign(rep["summary"][f"{name}|none"]["mean"]) == np.sign(assoc)


def test_label_swap_is_byte_identical(monkeypatch):
    import prsa.simulate as sim
    cfg = _cfg(n_subjects=1, patterns=("A",))
    a = simulate_subject(cfg, 0)
    monkeypatch.setattr(sim, "pattern_labels",
                        lambda name, design=Fig1Design(): 3 - pattern_labels(name, design))
    b = sim.simulate_subject(cfg, 0)
    assert [r["average_volume_correlation"] for r in a] == \
        [r["average_volume_correlation"] for r in b]


def test_halving_voxels_keeps_sign():
    for seed in range(10):
        rep = run_fig1_experiment(_cfg(dims=(10, 10, 5), seed=seed, n_subjects=1,
                                       confounder_sets=((),)))
        assert rep["summary"]["A|none"]["mean"] > 0
        assert rep["summary"]["B|none"]["mean"] < 0


def test_threads_do_not_change_results():
    cfg = _cfg(n_subjects=3, patterns=("A",))
    a = run_fig1_experiment(cfg, n_jobs=1)
    b = run_fig1_experiment(cfg, n_jobs=2)
    assert a["rows"] == b["rows"]


def test_label_permutation_in_report():
    rep = run_fig1_experiment(_cfg(n_subjects=1, confounder_sets=((),), n_label_perm=100))
    diag = rep["label_permutation"]
    assert diag.distribution.size == 100
    assert set(diag.observed) == {"A", "B"}


def test_summarize():
    rows = [{"pattern": "A", "confounder_set": "none", "average_volume_correlation": v}
            for v in (0.1, 0.2, 0.3)]
    s = summarize(rows)["A|none"]
    assert s["mean"] == pytest.approx(0.2)
    assert s["sd"] == pytest.approx(0.1)
    assert s["se"] == pytest.approx(0.1 / np.sqrt(3))
    assert s["n_subjects"] == 3
