"""Command-line entry point: ``prsa {simulate,glm-fit,rsa,group,perm-labels}``.

Every command takes a JSON config (``--config``) whose leaves may be
overridden with ``--set key.path=value``; the resolved configuration is
written next to the outputs.

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 file format / I/O error, 4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from .exceptions import ConfigError, FormatError, NumericError, PRSAError
from .glm import HrfParams, NoiseModel, build_design, fit_two_pass
from .inference import (
    RsaMap,
    average_volume_correlation,
    label_permutation_diagnostic,
    permutation_maxt,
    smooth_gaussian,
)
from .rsa import (
    VectorizationRule,
    build_confounders,
    searchlight_rsa,
    stimulus_similarity,
)
from .simulate import (
    Fig1Design,
    SimulationConfig,
    generate_noise_volume,
    make_fig1_events,
    pattern_labels,
    run_fig1_experiment,
)
from .tables import read_events, read_labels, read_matrix, write_json, write_matrix, write_rows
from .volumes import (
    Mask,
    SearchlightSpec,
    read_mask,
    read_volume,
    searchlight_matrix,
    write_volume,
)

log = logging.getLogger("prsa")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg)
    return out


def _split_set(name: str) -> tuple:
    return () if name == "none" else tuple(name.split("+"))


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(cfg: dict, threads: int = 1) -> None:
    sl = cfg["searchlight"]
    sim = SimulationConfig(
        patterns=tuple(cfg["patterns"]),
        confounder_sets=tuple(_split_set(s) for s in cfg["confounder_sets"]),
        dims=tuple(cfg["geometry"]["dims"]),
        voxel_size=tuple(cfg["geometry"]["voxel_size"]),
        n_subjects=cfg["n_subjects"], seed=cfg["seed"], method=cfg["method"],
        similarity=cfg["similarity"], radius_mm=sl["radius_mm"],
        min_voxels=sl["min_voxels"], offset=cfg["offset"],
        design=Fig1Design(**cfg["design"]), hrf=HrfParams(**cfg["hrf"]),
        n_label_perm=cfg["n_label_perm"],
    )
    out = _outdir(cfg)
    report = run_fig1_experiment(sim, n_jobs=threads)
    cols = ["subject", "pattern", "confounder_set", "average_volume_correlation",
            "n_searchlights", "n_degenerate"]
    write_rows(out / "diagnostics.csv", cols, ([r[c] for c in cols] for r in report["rows"]))
    write_json(out / "summary.json", report["summary"])
    if "label_permutation" in report:
        diag = report["label_permutation"]
        write_rows(out / "label_permutation.csv", ["permutation", "r"],
                   enumerate(diag.distribution))
        write_json(out / "label_permutation_observed.json",
                   {"observed": diag.observed, "n_resampled": diag.n_resampled})
    if cfg["write_betas"]:
        from .glm import gls_fit
        geom = sim.geometry
        design = build_design(make_fig1_events(sim.design), sim.hrf)
        for s in range(sim.n_subjects):
            vol = generate_noise_volume(geom, sim.design.n_scans, sim.seed, s)
            fit = gls_fit(vol.reshape(-1, vol.shape[-1]).T, design)
            write_volume(out / f"betas_sub-{s:03d}.nii", geom,
                         fit.stimulus_betas.reshape(geom.dims + (-1,)))
    for key, cell in report["summary"].items():
        log.info("%s: mean %.4f (sd %.4f)", key, cell["mean"], cell["sd"])


# --------------------------------------------------------------------------
# glm-fit
# --------------------------------------------------------------------------


def _load_mask(path, geometry, default: np.ndarray) -> Mask:
    if path is None:
        return Mask(geometry, default)
    mask = read_mask(path)
    if mask.geometry.dims != geometry.dims:
        raise FormatError(f"mask dims {mask.geometry.dims} do not match data dims "
                          f"{geometry.dims}")
    return mask


def cmd_glm_fit(cfg: dict, threads: int = 1) -> None:
    geom, data = read_volume(cfg["data"])
    if data.ndim != 4:
        raise FormatError(f"{cfg['data']}: expected a 4D time series")
    n_scans = data.shape[3]
    mask = _load_mask(cfg["mask"], geom, np.any(data != 0, axis=3))
    events = read_events(cfg["events"], n_scans, cfg["tr"])
    nuisance = read_matrix(cfg["nuisance"]) if cfg["nuisance"] else None
    design = build_design(events, HrfParams(**cfg["hrf"]), nuisance)
    noise = cfg["noise"]
    y = data[mask.included].T
    fit = fit_two_pass(y, design, cfg["tr"], noise["highpass_cutoff"], noise["rho"])

    out = _outdir(cfg)
    write_volume(out / "betas.nii", geom, mask.unmask(fit.stimulus_betas))
    write_volume(out / "sigma2.nii", geom, mask.unmask(fit.sigma2))
    write_volume(out / "mask.nii", geom, mask.included.astype(float))
    stim_names = [design.names[j] for j in design.stimulus_columns]
    write_matrix(out / "bcov.csv", fit.stimulus_bcov, stim_names)
    write_matrix(out / "bcov_full.csv", fit.bcov, fit.column_names)
    write_matrix(out / "design.csv", design.values, design.names)
    write_json(out / "noise_model.json",
               dict(fit.noise.to_dict(), dof=fit.dof,
                    dropped_columns=[design.names[j] for j in fit.dropped_columns]))
    log.info("fitted %d voxels, rho=%.4f", mask.voxel_count, fit.noise.ar1_rho)


# --------------------------------------------------------------------------
# rsa
# --------------------------------------------------------------------------


def _labels(spec, q: int) -> np.ndarray:
    if isinstance(spec, list):
        labels = np.asarray(spec)
    else:
        labels = read_labels(spec)
    if labels.size != q:
        raise ConfigError(f"config field labels: {labels.size} labels for {q} beta frames")
    return labels


def cmd_rsa(cfg: dict, threads: int = 1) -> None:
    geom, betas = read_volume(cfg["betas"])
    if betas.ndim != 4:
        raise FormatError(f"{cfg['betas']}: expected one frame per stimulus (4D)")
    mask = _load_mask(cfg["mask"], geom, np.all(np.isfinite(betas), axis=3)
                      & np.any(betas != 0, axis=3))
    b = betas[mask.included]
    if not np.all(np.isfinite(b)):
        raise FormatError(f"{cfg['betas']}: non-finite betas inside the mask")
    q = b.shape[1]
    model = stimulus_similarity(_labels(cfg["labels"], q))
    bcov = read_matrix(cfg["bcov"]) if cfg["bcov"] else None
    if bcov is not None and bcov.shape != (q, q):
        raise FormatError(f"{cfg['bcov']}: BCOV is {bcov.shape}, expected {(q, q)}")
    spec = SearchlightSpec(**cfg["searchlight"])
    rule = VectorizationRule(cfg["offset"])
    members = searchlight_matrix(mask, spec)

    out = _outdir(cfg)
    diagnostics = {}
    for name in cfg["confounder_sets"]:
        conf = build_confounders(_split_set(name), b, bcov)
        rmap = searchlight_rsa(b, mask, spec, model, conf, rule, cfg["method"],
                               cfg["similarity"], cfg["subject_id"], members=members)
        stem = f"rsa_{name}"
        write_volume(out / f"{stem}.nii", geom, rmap.values)
        write_json(out / f"{stem}.json", dict(rmap.provenance, subject_id=rmap.subject_id,
                                             confounder_set=name))
        vals = rmap.values[np.isfinite(rmap.values)]
        diagnostics[name] = {
            "mean": average_volume_correlation(rmap),
            "sd": float(vals.std(ddof=1)) if vals.size > 1 else None,
            "n_searchlights": rmap.provenance["n_searchlights"],
            "n_degenerate": rmap.provenance["n_degenerate"],
        }
        log.info("%s: average volume correlation %.4f", name, diagnostics[name]["mean"])
    write_json(out / "diagnostics.json", diagnostics)


# --------------------------------------------------------------------------
# group
# --------------------------------------------------------------------------


def cmd_group(cfg: dict, threads: int = 1) -> None:
    maps = []
    geom0 = None
    for path in cfg["maps"]:
        geom, values = read_volume(path)
        if values.ndim == 4 and values.shape[3] == 1:
            values = values[..., 0]
        if values.ndim != 3:
            raise FormatError(f"{path}: expected a 3D map")
        if geom0 is None:
            geom0 = geom
        elif geom.dims != geom0.dims:
            raise FormatError(f"{path}: dims {geom.dims} differ from {geom0.dims}")
        maps.append(smooth_gaussian(RsaMap(values, geom, Path(path).stem), cfg["fwhm_mm"]))
    res = permutation_maxt(maps, cfg["n_perm"], cfg["alpha"], cfg["seed"], cfg["fisher_z"])

    out = _outdir(cfg)
    write_volume(out / "tmap.nii", geom0, res.t_map)
    write_volume(out / "rejected.nii", geom0, res.rejected.astype(float))
    write_volume(out / "p_corrected.nii", geom0, res.p_corrected)
    write_rows(out / "maxt.csv", ["permutation", "max_abs_t"],
               enumerate(res.maxt_distribution))
    write_json(out / "threshold.json", {
        "corrected_threshold": res.corrected_threshold, "alpha": cfg["alpha"],
        "df": res.df, "n_perm": cfg["n_perm"], "n_rejected": int(res.rejected.sum()),
    })


# --------------------------------------------------------------------------
# perm-labels
# --------------------------------------------------------------------------


def cmd_perm_labels(cfg: dict, threads: int = 1) -> None:
    design = Fig1Design(**cfg["design"])
    if cfg["events"]:
        events = read_events(cfg["events"], design.n_scans, design.tr)
    else:
        events = make_fig1_events(design)
    noise = cfg["noise"]
    if noise["rho"] == "estimate":
        raise ConfigError("config field noise.rho: must be a number for perm-labels")
    model = NoiseModel(events.n_scans, events.tr, float(noise["rho"]), noise["highpass_cutoff"])
    patterns = {}
    for name, spec in cfg["patterns"].items():
        labels = pattern_labels(spec, design) if isinstance(spec, str) else np.asarray(spec)
        if labels.size != events.n_events:
            raise ConfigError(f"config field patterns.{name}: {labels.size} labels for "
                              f"{events.n_events} events")
        patterns[name] = labels
    diag = label_permutation_diagnostic(events, model, patterns, cfg["n_perm"], cfg["seed"],
                                        HrfParams(**cfg["hrf"]),
                                        VectorizationRule(cfg["offset"]))
    out = _outdir(cfg)
    write_rows(out / "distribution.csv", ["permutation", "r"], enumerate(diag.distribution))
    d = diag.distribution
    write_json(out / "observed.json", {
        "observed": diag.observed, "n_resampled": diag.n_resampled,
        "distribution_min": float(np.nanmin(d)) if np.any(np.isfinite(d)) else None,
        "distribution_max": float(np.nanmax(d)) if np.any(np.isfinite(d)) else None,
    })


COMMANDS = {
    "simulate": cmd_simulate,
    "glm-fit": cmd_glm_fit,
    "rsa": cmd_rsa,
    "group": cmd_group,
    "perm-labels": cmd_perm_labels,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="prsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config leaf (repeatable)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        if name in ("simulate", "group", "perm-labels"):
            p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap; results do not depend on it")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        user = configmod.load(args.config) if args.config else {}
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out={args.out}")
        if getattr(args, "seed", None) is not None:
            overrides.append(f"seed={args.seed}")
        cfg = configmod.resolve(args.command, user, overrides)
        COMMANDS[args.command](cfg, threads=max(1, args.threads))
    except ConfigError as exc:
        print(f"prsa {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"prsa {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"prsa {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PRSAError as exc:
        print(f"prsa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
