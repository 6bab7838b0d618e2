"""Command-line front end: ``cryobench simulate|reconstruct|match|evaluate|describe``.

Exit status: 0 success, 2 usage or configuration error, 3 unreadable or
malformed input, 4 failure during computation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, catalog, imaging, matcher, phantom, recon, spectral, structchem
from .config import (
    DESK_PRESET,
    ConfigError,
    DescribeConfig,
    EvaluateConfig,
    MatchConfig,
    ReconstructConfig,
    SimulateConfig,
    as_dict,
    resolve,
)
from .mrc import MrcError, read_mrc, write_mrc

log = logging.getLogger("cryobench")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3, 4
STRUCTURE_SUFFIXES = (".pdb", ".ent", ".xyz")


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# simulate


def load_catalog(path, voxel_size: float) -> dict:
    """Potentials for every structure file in a directory (class id = stem)."""
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"catalog directory {path} does not exist")
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in STRUCTURE_SUFFIXES)
    if not files:
        raise UsageError(f"catalog directory {path} holds no structure files")
    out = {}
    for f in files:
        try:
            atoms = structchem.parse_structure(f.read_text())
        except structchem.StructureParseError as exc:
            raise structchem.StructureParseError(exc.lineno, f"{f}: {exc}") from None
        out[f.stem] = structchem.molecule_potential(atoms, voxel_size)
    return out


def synthetic_catalog(voxel_size: float) -> dict:
    return {s.name: structchem.molecule_potential(catalog.synthetic_structure(s), voxel_size) for s in catalog.DEFAULT_SYNTHETIC}


def _reference(cfg: SimulateConfig, shape, pixel: float):
    if cfg.reference is None:
        return spectral.synthetic_reference(shape, pixel, cfg.seed)
    ref = Path(cfg.reference)
    if ref.suffix.lower() in (".mrc", ".map", ".mrcs"):
        return read_mrc(ref)
    return np.loadtxt(ref, ndmin=1)


def cmd_simulate(cfg: SimulateConfig) -> dict:
    """Phantom, tilt series, reconstruction and SNR, written to ``cfg.out``."""
    vs = float(cfg.voxel_size)
    box = tuple(float(b) for b in (cfg.box if isinstance(cfg.box, (tuple, list)) else (cfg.box,) * 3))
    for b in box:
        n = round(b / vs)
        if abs(n * vs - b) > 1e-6 or n % cfg.bin_factor:
            raise UsageError(f"box {b} nm is not a multiple of voxel size x bin factor")
    cat = load_catalog(cfg.catalog, vs) if cfg.catalog else synthetic_catalog(vs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    pcfg = phantom.PlacementConfig(
        box=box,
        voxel_size=vs,
        protein_range=tuple(cfg.protein_range),
        fiducial_range=tuple(cfg.fiducial_range),
        vesicle_range=tuple(cfg.vesicle_range),
        fiducial_radius=cfg.fiducial_radius,
        vesicle_radius_range=tuple(cfg.vesicle_radius_range),
        vesicle_wall=cfg.vesicle_wall,
        max_attempts=cfg.max_attempts,
    )
    model = phantom.place_particles(cat, pcfg, cfg.seed)
    log.info("phantom: %d particles in %.1f s", len(model.instances), time.perf_counter() - t0)

    t0 = time.perf_counter()
    optics = imaging.OpticsConfig(**{**cfg.optics, "pixel_size": vs})
    tcfg = imaging.TiltConfig(cfg.min_angle, cfg.max_angle, cfg.n_tilts, tuple(cfg.defocus_range), tuple(cfg.dose_range), cfg.shift_half_range, cfg.use_dqe)
    ts = imaging.simulate_tiltseries(model, cfg.seed, optics, tcfg, threads=cfg.threads)
    if cfg.ring_scale:
        ref = _reference(cfg, ts.projections[0].dims, vs)
        ts.projections = [spectral.ring_scale(p, ref) for p in ts.projections]
        ts.metadata["ring_scaled"] = True
    log.info("tilt series: %d images in %.1f s", len(ts.projections), time.perf_counter() - t0)

    t0 = time.perf_counter()
    tomo = recon.weighted_backprojection(ts, recon.ReconConfig(cfg.weighting, bin_factor=cfg.bin_factor))
    cls_mask, occ = model.labels_at(cfg.bin_factor)
    snr = spectral.estimate_snr(tomo, occ)
    log.info("reconstruction %s in %.1f s, SNR %.3f", tomo.dims, time.perf_counter() - t0, snr.snr)

    paths = {
        "v_el": out / "grandmodel_vel.mrc",
        "v_ab": out / "grandmodel_vab.mrc",
        "class_mask_full": out / "class_mask_full.mrc",
        "occupancy_full": out / "occupancy_mask_full.mrc",
        "class_mask": out / "class_mask.mrc",
        "occupancy": out / "occupancy_mask.mrc",
        "particles": out / "particle_locations.txt",
        "model": out / "model.json",
        "tiltseries": out / "tiltseries.mrc",
        "tomogram": out / "tomogram.mrc",
        "snr": out / "snr.json",
    }
    write_mrc(paths["v_el"], model.potential.v_el)
    write_mrc(paths["v_ab"], model.potential.v_ab)
    write_mrc(paths["class_mask_full"], model.class_mask)
    write_mrc(paths["occupancy_full"], model.occupancy_mask)
    write_mrc(paths["class_mask"], cls_mask)
    write_mrc(paths["occupancy"], occ)
    paths["particles"].write_text(phantom.export_ground_truth(model, cfg.bin_factor))
    counts = {}
    for inst in model.instances:
        counts[inst.class_id] = counts.get(inst.class_id, 0) + 1
    paths["model"].write_text(_dump({"classes": {str(i + 1): c for i, c in enumerate(model.classes)}, "counts": counts, "seed": cfg.seed, "config": as_dict(cfg)}))
    imaging.save_tiltseries(ts, paths["tiltseries"])
    write_mrc(paths["tomogram"], tomo)
    paths["snr"].write_text(_dump({"snr": snr.snr, "var_noise": snr.var_noise, "var_noisy_signal": snr.var_noisy_signal, "var_signal": snr.var_signal, "clamped": snr.clamped}))
    cat_dir = out / "catalog"
    cat_dir.mkdir(exist_ok=True)
    for cid, pm in sorted(cat.items()):
        write_mrc(cat_dir / f"{cid}.mrc", pm.v_el)
        if pm.shape is not None:
            write_mrc(cat_dir / f"{cid}_shape.mrc", pm.shape)
    return {k: str(v) for k, v in paths.items()}


# ---------------------------------------------------------------------------
# reconstruct


def cmd_reconstruct(cfg: ReconstructConfig) -> str:
    if not cfg.tiltseries:
        raise UsageError("--tiltseries is required")
    ts = imaging.load_tiltseries(cfg.tiltseries)
    dims = None
    if cfg.thickness:
        nx, ny = (n // cfg.bin_factor for n in ts.projections[0].dims)
        dims = (nx, ny, int(cfg.thickness))
    tomo = recon.weighted_backprojection(ts, recon.ReconConfig(cfg.weighting, dims, cfg.bin_factor, align=cfg.align))
    write_mrc(cfg.out, tomo)
    return cfg.out


# ---------------------------------------------------------------------------
# match


def _template_sources(directory, classes) -> dict:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"template directory {directory} does not exist")
    out = {}
    for f in sorted(d.glob("*.mrc")):
        if f.stem.endswith("_shape") or f.stem in (catalog.FIDUCIAL, catalog.VESICLE):
            continue
        if classes and f.stem not in classes:
            continue
        v = read_mrc(f)
        shape_file = f.with_name(f.stem + "_shape.mrc")
        shape = read_mrc(shape_file) if shape_file.exists() else None
        out[f.stem] = structchem.PotentialMap(v, v.replace(np.zeros(v.dims)), shape)
    if not out:
        raise UsageError(f"no templates found in {directory}")
    return out


def _descriptors(pm) -> structchem.ShapeDescriptors:
    dens = pm.shape if pm.shape is not None else pm.v_el
    return structchem.shape_descriptors(dens)


def cmd_match(cfg: MatchConfig) -> dict:
    if cfg.variant not in ("tm", "tm-f"):
        raise UsageError(f"unknown variant {cfg.variant!r}")
    if not cfg.tomogram or not Path(cfg.tomogram).exists():
        raise FileNotFoundError(f"tomogram {cfg.tomogram!r} not found")
    tomo = read_mrc(cfg.tomogram)
    sources = _template_sources(cfg.templates, set(cfg.classes))
    prepared = matcher.prepare_tomogram(tomo, cfg.lowpass)
    grid = matcher.orientation_grid(cfg.spacing)
    results = {}
    radii, sphericity = {}, {}
    for cid, pm in sources.items():
        pair = matcher.build_template(pm, cid, cfg.defocus, cfg.lowpass, tomo.voxel_size)
        cm = matcher.match_class(prepared, pair, grid, cfg.n_candidates, threads=cfg.threads)
        results[cid] = cm
        info = catalog.CLASS_INFO.get(cid)
        if info is not None:
            radii[cid], sphericity[cid] = info.effective_radius / tomo.voxel_size, info.sphericity
        else:
            d = _descriptors(pm)
            radii[cid], sphericity[cid] = d.effective_radius / tomo.voxel_size, d.sphericity
        log.info("class %s: %d candidates, %d kept, %.1f s", cid, len(cm.raw), len(cm.kept), cm.seconds)
    kept = [c for cm in results.values() for c in cm.kept]
    if cfg.variant == "tm-f":
        order = sorted(radii, key=lambda c: (-sphericity[c], c))
        kept = matcher.overlap_filter(kept, radii, order)
    kept = sorted(kept, key=lambda c: (-c.score, c.class_id, c.position))
    if cfg.fiducials:
        fid = matcher.log_fiducial_detect(tomo, cfg.fiducial_sigma, cfg.fiducial_polarity)
        kept += [matcher.Candidate(catalog.FIDUCIAL, p, -1, 1.0) for p in fid]
    matcher.write_candidates(cfg.out, kept)
    timing = {cid: {"seconds": round(cm.seconds, 3), "candidates": len(cm.raw), "kept": len(cm.kept), "cutoff": cm.threshold.cutoff if cm.threshold else None} for cid, cm in results.items()}
    Path(cfg.out).with_suffix(".json").write_text(_dump({"variant": cfg.variant, "classes": timing, "total": len(kept)}))
    return {"predictions": cfg.out, "n": len(kept)}


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: EvaluateConfig) -> bench.MetricsReport:
    for name in ("predictions", "particles"):
        if not getattr(cfg, name):
            raise UsageError(f"--{name} is required")
    preds = bench.read_predictions(Path(cfg.predictions), source=cfg.predictions)
    particles = bench.read_particle_list(Path(cfg.particles))
    occ = np.asarray(read_mrc(cfg.occupancy).data).round().astype(np.int64) if cfg.occupancy else None
    gt = bench.GroundTruth(occ, particles)
    classes = list(cfg.classes) or None
    excl = tuple(cfg.exclude_class)
    if occ is None:
        if cfg.radius is None:
            raise UsageError("without --occupancy a --radius for the fallback matcher is required")
        m = bench.match_by_radius(preds, gt, cfg.radius, excl)
        rep = bench.compute_metrics(m, cfg.n_truth)
    else:
        rep = bench.evaluate(preds, gt, classes, excl, cfg.n_truth)
    text = bench.format_report(rep)
    if cfg.out:
        bench.write_report(rep, cfg.out)
    sys.stdout.write(text)
    return rep


# ---------------------------------------------------------------------------
# describe


def cmd_describe(cfg: DescribeConfig) -> dict:
    if not cfg.structure:
        raise UsageError("a structure file is required")
    atoms = structchem.parse_structure(Path(cfg.structure).read_text())
    pot = structchem.gaussian_potential(atoms, cfg.voxel_size)
    d = structchem.shape_descriptors(pot, cfg.threshold, structchem.molecular_weight(atoms))
    out = {"atoms": len(atoms), "volume_nm3": d.volume, "area_nm2": d.area, "sphericity": d.sphericity, "effective_radius_nm": d.effective_radius, "molecular_weight_kda": d.molecular_weight}
    text = _dump(out)
    if cfg.out:
        Path(cfg.out).write_text(text)
    sys.stdout.write(text)
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _triple(s: str) -> tuple:
    parts = [float(v) for v in s.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected one value or three comma-separated values")
    return tuple(parts)


def _pair(kind):
    def parse(s: str) -> tuple:
        parts = [kind(v) for v in s.split(",")]
        if len(parts) != 2:
            raise argparse.ArgumentTypeError("expected two comma-separated values")
        return tuple(parts)

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cryobench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, threads=True):
        sp.add_argument("--config", help="JSON file with parameters (flags take precedence)")
        if seed:
            sp.add_argument("--seed", type=int)
        if threads:
            sp.add_argument("--threads", type=int, help="worker threads (1 = reference behaviour)")

    s = sub.add_parser("simulate", help="phantom -> tilt series -> tomogram")
    common(s)
    s.add_argument("--out")
    s.add_argument("--preset", choices=("full", "desk"), default="full", help="desk: 128 nm box with 30 proteins")
    s.add_argument("--catalog", help="directory of structure files (default: synthetic classes)")
    s.add_argument("--box", type=_triple, help="box size in nm, 'L' or 'X,Y,Z'")
    s.add_argument("--voxel-size", type=float, dest="voxel_size")
    s.add_argument("--protein-range", type=_pair(int), dest="protein_range")
    s.add_argument("--fiducial-range", type=_pair(int), dest="fiducial_range")
    s.add_argument("--vesicle-range", type=_pair(int), dest="vesicle_range")
    s.add_argument("--n-tilts", type=int, dest="n_tilts")
    s.add_argument("--defocus-range", type=_pair(float), dest="defocus_range", help="nm")
    s.add_argument("--dose-range", type=_pair(float), dest="dose_range", help="e/A^2")
    s.add_argument("--bin-factor", type=int, dest="bin_factor")
    s.add_argument("--ring-scale", action="store_true", default=None, dest="ring_scale")
    s.add_argument("--reference", help="reference image (MRC) or radial profile table for ring scaling")

    r = sub.add_parser("reconstruct", help="weighted back-projection of a tilt series")
    common(r, seed=False, threads=False)
    r.add_argument("--tiltseries")
    r.add_argument("--out")
    r.add_argument("--bin-factor", type=int, dest="bin_factor")
    r.add_argument("--weighting", choices=("ramp", "exact", "none"))
    r.add_argument("--thickness", type=int)
    r.add_argument("--no-align", action="store_false", default=None, dest="align")

    m = sub.add_parser("match", help="template matching (TM / TM-F) and LoG fiducials")
    common(m)
    m.add_argument("--tomogram")
    m.add_argument("--templates", help="directory of <class>.mrc potentials")
    m.add_argument("--out")
    m.add_argument("--variant", choices=("tm", "tm-f"))
    m.add_argument("--classes", nargs="+")
    m.add_argument("--spacing", type=float, help="angular spacing in degrees")
    m.add_argument("--n-candidates", type=int, dest="n_candidates")
    m.add_argument("--no-fiducials", action="store_false", default=None, dest="fiducials")
    m.add_argument("--fiducial-polarity", choices=("bright", "dark"), dest="fiducial_polarity")

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(e, seed=False, threads=False)
    e.add_argument("--predictions")
    e.add_argument("--particles", help="ground-truth particle list")
    e.add_argument("--occupancy", help="occupancy mask MRC in the tomogram frame")
    e.add_argument("--out", help="report stem; writes .txt and .json")
    e.add_argument("--exclude-class", action="append", dest="exclude_class")
    e.add_argument("--classes", nargs="+")
    e.add_argument("--n-truth", type=int, dest="n_truth")
    e.add_argument("--radius", type=float, help="use the radius matcher (voxels)")

    d = sub.add_parser("describe", help="shape descriptors of a structure file")
    common(d, seed=False, threads=False)
    d.add_argument("structure")
    d.add_argument("--voxel-size", type=float, dest="voxel_size")
    d.add_argument("--threshold", type=float)
    d.add_argument("--out")
    return p


_COMMANDS = {
    "simulate": (SimulateConfig, cmd_simulate),
    "reconstruct": (ReconstructConfig, cmd_reconstruct),
    "match": (MatchConfig, cmd_match),
    "evaluate": (EvaluateConfig, cmd_evaluate),
    "describe": (DescribeConfig, cmd_describe),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO - 10 * min(args.verbose, 1), format="%(levelname)s %(name)s: %(message)s")
    cls, fn = _COMMANDS[args.command]
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config", "preset")}
    for k in ("classes", "exclude_class"):
        if flags.get(k) is not None:
            flags[k] = tuple(flags[k])
    preset = DESK_PRESET if getattr(args, "preset", None) == "desk" else None
    try:
        cfg = resolve(cls, args.config, flags, preset)
        log.info("resolved %s config: %s", args.command, json.dumps(as_dict(cfg), sort_keys=True))
        fn(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"cryobench {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MrcError, bench.ListParseError, structchem.StructureParseError, structchem.UnknownElementError, json.JSONDecodeError) as exc:
        print(f"cryobench {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - reported as a computation failure
        log.debug("failure", exc_info=True)
        print(f"cryobench {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
