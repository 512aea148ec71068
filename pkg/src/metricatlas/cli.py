"""Command-line pipeline: synthesis, estimation, tracing, registration, atlas.

Every subcommand prints a machine-readable JSON summary (sorted keys) on
stdout and exits 0 on success; any validation or solver failure exits 1
with a single-line diagnostic on stderr.  Where a subcommand takes several
input files they are processed in lexical order so repeated runs with the
same configuration are byte-identical.
"""

from __future__ import annotations

import importlib.resources
import json
import os
import sys

import click
import numpy as np
from jsonschema import ValidationError, validate

from . import __version__
from .atlas import AtlasConfig, atlas_build
from .conformal import TensorImage, alignment_functional, build_connectome_metric
from .ebin import ebin_distance, frechet_mean
from .errors import MetricAtlasError
from .fields import MaskField, MetricField, ScalarField, interpolate
from .geodesics import Curve, SeedSpec, integral_curve, shoot_geodesic
from .grid import Grid
from .mtf import read_header, read_mtf, write_mtf
from .registration import RegistrationConfig, pullback_metric, register
from .render import render_figure
from .synthetic import CubicFamilySpec, cubic_vector_field, default_grid, example_family, make_tensor_image


def _schema(name: str) -> dict:
    ref = importlib.resources.files("metricatlas.schemas") / name
    return json.loads(ref.read_text(encoding="utf-8"))


def _emit(summary: dict) -> None:
    validate(summary, _schema("summary.schema.json"))
    click.echo(json.dumps(summary, sort_keys=True))


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    validate(cfg, _schema("config.schema.json"))
    return cfg


def _read_kind(path: str, *kinds: str):
    field = read_mtf(path)
    if field.mtf_kind not in kinds:
        raise MetricAtlasError(
            f"{path}: expected kind in {kinds}, got {field.mtf_kind!r}"
        )
    return field


def _parse_point(text: str, dim: int | None = None) -> tuple:
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise MetricAtlasError(f"cannot parse coordinates {text!r}") from exc
    if dim is not None and len(vals) != dim:
        raise MetricAtlasError(f"expected {dim} coordinates, got {text!r}")
    return vals


def _full_mask(grid: Grid) -> MaskField:
    return MaskField(grid, np.ones(grid.shape, dtype=bool))


def _write_curve(curve: Curve, path: str) -> None:
    payload = {
        "points": curve.points.tolist(),
        "step": curve.step,
        "terminated_reason": curve.terminated_reason,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def _read_curve(path: str) -> Curve:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return Curve(
        np.asarray(payload["points"], dtype=float),
        payload.get("step", 0.0),
        payload.get("terminated_reason", "completed"),
    )


@click.group()
@click.version_option(version=__version__)
def cli():
    """Riemannian-metric field toolkit."""


@cli.command()
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--size", default=64, show_default=True)
@click.option("--subjects", default=1, show_default=True)
@click.option("--anisotropy", default=6.0, show_default=True)
@click.option("--ratio-mode", default="eigenvalue", show_default=True,
              type=click.Choice(["axis", "eigenvalue"]))
@click.option("--coefficients", default=None,
              help="c3,c2,c1,c0 of the central cubic (single subject only).")
def synth(out_dir, size, subjects, anisotropy, ratio_mode, coefficients):
    """Generate synthetic cubic-band tensor subjects.

    Writes subject_NN_tensors.mtf, subject_NN_mask.mtf and
    subject_NN_vectors.mtf per subject.
    """
    os.makedirs(out_dir, exist_ok=True)
    if anisotropy < 1.0:
        raise MetricAtlasError("anisotropy ratio must be >= 1")
    if subjects == 1:
        kw = dict(anisotropy=anisotropy, ratio_mode=ratio_mode)
        if coefficients is not None:
            kw["coefficients"] = _parse_point(coefficients, 4)
        specs = [CubicFamilySpec(default_grid(size), **kw)]
    else:
        if coefficients is not None:
            raise MetricAtlasError("--coefficients applies to a single subject")
        specs = example_family(subjects, size, ratio_mode)
        for s in specs:
            s.anisotropy = anisotropy
    outputs = []
    for i, spec in enumerate(specs):
        V, mask = cubic_vector_field(spec)
        D = make_tensor_image(spec)
        stem = os.path.join(out_dir, f"subject_{i:02d}")
        for suffix, field in (
            ("tensors", D), ("mask", mask), ("vectors", V)
        ):
            path = f"{stem}_{suffix}.mtf"
            if suffix == "tensors":
                mf = MetricField(D.grid, D.data, spd_flag=True)
                mf.mtf_kind = "tensor"
                write_mtf(mf, path)
            else:
                write_mtf(field, path)
            outputs.append(path)
    _emit({"command": "synth", "outputs": sorted(outputs),
           "n_subjects": subjects, "size": size})


def _tensor_image_from(tensors_path: str, mask_path: str) -> TensorImage:
    tens = _read_kind(tensors_path, "tensor", "metric")
    mask = _read_kind(mask_path, "mask")
    return TensorImage(tens.grid, tens.data, mask)


@cli.command("estimate-metric")
@click.argument("tensors", type=click.Path(exists=True, dir_okay=False))
@click.argument("mask", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--tol", default=1e-8, show_default=True)
def estimate_metric(tensors, mask, out_dir, tol):
    """Estimate the conformally-adapted metric of a tensor image."""
    os.makedirs(out_dir, exist_ok=True)
    D = _tensor_image_from(tensors, mask)
    cm = build_connectome_metric(D, tol=tol)
    f0 = alignment_functional(ScalarField(D.grid, np.zeros(D.grid.shape)), D)
    f1 = alignment_functional(cm.alpha, D)
    outputs = []
    for name, field in (
        ("g_tilde", cm.g_tilde), ("alpha", cm.alpha), ("g_alpha", cm.g_alpha)
    ):
        path = os.path.join(out_dir, f"{name}.mtf")
        write_mtf(field, path)
        outputs.append(path)
    masked = cm.alpha.data[D.mask.data]
    _emit({
        "command": "estimate-metric",
        "outputs": sorted(outputs),
        "functional_initial": f0,
        "functional_final": f1,
        "alpha_min": float(masked.min()),
        "alpha_max": float(masked.max()),
    })


@cli.command()
@click.argument("metric", type=click.Path(exists=True, dir_okay=False))
@click.argument("mask", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", "seeds", multiple=True, required=True,
              help="Seed position 'x,y'; repeatable.")
@click.option("--direction", default="principal", show_default=True,
              help="'dx,dy' or 'principal' (requires --vectors).")
@click.option("--vectors", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Vector field used to resolve the principal direction.")
@click.option("--max-length", default=1.0, show_default=True)
@click.option("--step", default=0.005, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def geodesic(metric, mask, seeds, direction, vectors, max_length, step, out_dir):
    """Shoot geodesics of a metric field from seed points."""
    os.makedirs(out_dir, exist_ok=True)
    g = _read_kind(metric, "metric")
    m = _read_kind(mask, "mask")
    vfield = _read_kind(vectors, "vector") if vectors else None
    if direction == "principal" and vfield is None:
        raise MetricAtlasError("direction 'principal' needs --vectors")
    outputs, infos = [], []
    for i, stext in enumerate(seeds):
        pos = _parse_point(stext, g.grid.dim)
        if direction == "principal":
            d, _ = interpolate(vfield.grid, vfield.data, np.array([pos]))
            d = d[0]
        else:
            d = np.asarray(_parse_point(direction, g.grid.dim))
        curve = shoot_geodesic(g, SeedSpec(pos, d), max_length, step, m)
        path = os.path.join(out_dir, f"geodesic_{i:02d}.json")
        _write_curve(curve, path)
        outputs.append(path)
        infos.append({
            "seed": list(pos),
            "n_points": int(len(curve.points)),
            "length": curve.length,
            "terminated_reason": curve.terminated_reason,
        })
    _emit({"command": "geodesic", "outputs": sorted(outputs), "curves": infos})


@cli.command("integral-curve")
@click.argument("vectors", type=click.Path(exists=True, dir_okay=False))
@click.argument("mask", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", "seeds", multiple=True, required=True)
@click.option("--max-length", default=1.0, show_default=True)
@click.option("--step", default=0.005, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def integral_curve_cmd(vectors, mask, seeds, max_length, step, out_dir):
    """Trace integral curves of a vector field from seed points."""
    os.makedirs(out_dir, exist_ok=True)
    V = _read_kind(vectors, "vector")
    m = _read_kind(mask, "mask")
    outputs, infos = [], []
    for i, stext in enumerate(seeds):
        pos = _parse_point(stext, V.grid.dim)
        curve = integral_curve(V, SeedSpec(pos, None), max_length, step, m)
        path = os.path.join(out_dir, f"curve_{i:02d}.json")
        _write_curve(curve, path)
        outputs.append(path)
        infos.append({
            "seed": list(pos),
            "n_points": int(len(curve.points)),
            "length": curve.length,
            "terminated_reason": curve.terminated_reason,
        })
    _emit({"command": "integral-curve", "outputs": sorted(outputs), "curves": infos})


@cli.command()
@click.argument("metric_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("metric_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", default=None, type=click.Path(exists=True, dir_okay=False))
def distance(metric_a, metric_b, mask):
    """Ebin distance between two metric fields."""
    ga = _read_kind(metric_a, "metric")
    gb = _read_kind(metric_b, "metric")
    m = _read_kind(mask, "mask") if mask else _full_mask(ga.grid)
    _emit({"command": "distance", "dist": ebin_distance(ga, gb, m)})


@cli.command()
@click.argument("inputs", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def mean(inputs, mask, out):
    """Fréchet mean (geodesic marching) of metric fields, in lexical order."""
    paths = sorted(inputs)
    if len(paths) < 2:
        raise MetricAtlasError("mean needs at least 2 input metrics")
    metrics = [_read_kind(p, "metric") for p in paths]
    m = _read_kind(mask, "mask") if mask else _full_mask(metrics[0].grid)
    g = frechet_mean(metrics, m)
    write_mtf(g, out)
    msd = float(np.mean([ebin_distance(g, gi, m) ** 2 for gi in metrics]))
    _emit({"command": "mean", "outputs": [out], "n_inputs": len(paths),
           "mean_squared_distance": msd})


@cli.command("register")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("target", type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--lam", default=100.0, show_default=True)
@click.option("--epsilon", default=1.0, show_default=True)
@click.option("--iterations", default=400, show_default=True)
@click.option("--epsilon-policy", default="energy-adaptive", show_default=True,
              type=click.Choice(["fixed", "energy-adaptive"]))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def register_cmd(source, target, mask, lam, epsilon, iterations,
                 epsilon_policy, out_dir):
    """Register a source metric to a target metric.

    Writes phi.mtf (displacement of the estimated diffeomorphism) and
    warped.mtf (target pulled back to source frame).
    """
    os.makedirs(out_dir, exist_ok=True)
    g0 = _read_kind(source, "metric")
    g1 = _read_kind(target, "metric")
    m = _read_kind(mask, "mask") if mask else _full_mask(g0.grid)
    cfg = RegistrationConfig(lam=lam, epsilon=epsilon, max_iter=iterations,
                             epsilon_policy=epsilon_policy)
    phi, report = register(g0, g1, cfg, m)
    warped = pullback_metric(phi, g1, m)
    phi_path = os.path.join(out_dir, "phi.mtf")
    warped_path = os.path.join(out_dir, "warped.mtf")
    disp = phi.displacement
    disp.mtf_kind = "displacement"
    write_mtf(disp, phi_path)
    write_mtf(warped, warped_path)
    trace_path = os.path.join(out_dir, "trace.json")
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump({
            "total": report.total,
            "deformation": report.deformation,
            "matching": report.matching,
            "accepted": report.accepted,
        }, fh, sort_keys=True)
    _emit({
        "command": "register",
        "outputs": sorted([phi_path, warped_path, trace_path]),
        "energy_initial": report.total[0],
        "energy_final": report.total[-1],
        "iterations": len(report.total),
        "accepted": int(sum(report.accepted)),
    })


def _mask_path_of(tensors_path: str) -> str:
    if not tensors_path.endswith("_tensors.mtf"):
        raise MetricAtlasError(
            f"{tensors_path}: atlas inputs must be *_tensors.mtf files with "
            "*_mask.mtf siblings (as written by 'synth')"
        )
    return tensors_path[: -len("_tensors.mtf")] + "_mask.mtf"


@cli.command("atlas")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def atlas_cmd(config_path):
    """Build a groupwise atlas from the tensor subjects listed in a config.

    The config's 'inputs' are *_tensors.mtf files; each must have a
    *_mask.mtf sibling.  Emits atlas.mtf, per-subject phi_NN.mtf,
    trace.json and atlas.svg into 'output_dir'.
    """
    cfg = _load_config(config_path)
    for key in ("inputs", "output_dir"):
        if key not in cfg:
            raise MetricAtlasError(f"config misses required key {key!r} for atlas")
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    inputs = sorted(cfg["inputs"])
    metrics = []
    for p in inputs:
        D = _tensor_image_from(p, _mask_path_of(p))
        metrics.append(build_connectome_metric(
            D,
            tol=cfg.get("solver_tol", 1e-8),
            max_iter=cfg.get("solver_max_iter"),
        ))
    reg = RegistrationConfig(
        lam=cfg.get("lam", 100.0),
        epsilon=cfg.get("epsilon", 5.0),
        max_iter=cfg.get("registration_iterations", 400),
        epsilon_policy=cfg.get("epsilon_policy", "energy-adaptive"),
    )
    acfg = AtlasConfig(
        outer_iterations=cfg.get("outer_iterations", 400),
        inner_matching_iterations=cfg.get("inner_matching_iterations", 2),
        registration=reg,
    )
    result = atlas_build(metrics, acfg)
    outputs = []
    atlas_path = os.path.join(out_dir, "atlas.mtf")
    write_mtf(result.atlas, atlas_path)
    outputs.append(atlas_path)
    mask_path = os.path.join(out_dir, "union_mask.mtf")
    write_mtf(result.union_mask, mask_path)
    outputs.append(mask_path)
    for i, phi in enumerate(result.diffeomorphisms):
        p = os.path.join(out_dir, f"phi_{i:02d}.mtf")
        disp = phi.displacement
        disp.mtf_kind = "displacement"
        write_mtf(disp, p)
        outputs.append(p)
    trace_path = os.path.join(out_dir, "trace.json")
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump({"objective": result.objective_trace,
                   "skipped": [list(s) for s in result.skipped]}, fh, sort_keys=True)
    outputs.append(trace_path)
    fig_path = os.path.join(out_dir, "atlas.svg")
    render_figure(fig_path, result.atlas, result.union_mask,
                  title="atlas metric")
    outputs.append(fig_path)
    _emit({
        "command": "atlas",
        "outputs": sorted(outputs),
        "objective_initial": result.objective_trace[0],
        "objective_final": result.objective_trace[-1],
        "outer_iterations": len(result.objective_trace),
        "skipped_updates": len(result.skipped),
        "n_subjects": len(metrics),
    })


@cli.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def info(path):
    """Print the header of an MTF file."""
    _emit({"command": "info", "path": path, "header": read_header(path)})


@cli.command("render")
@click.option("--field", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Metric or tensor MTF rendered as ellipse glyphs.")
@click.option("--mask", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--curve", "curve_paths", multiple=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Curve JSON file (as written by geodesic/integral-curve).")
@click.option("--label", "curve_labels", multiple=True)
@click.option("--stride", default=3, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def render_cmd(field, mask, curve_paths, curve_labels, stride, out):
    """Compose a static glyph-and-curve figure (SVG or PNG)."""
    f = _read_kind(field, "metric", "tensor") if field else None
    m = _read_kind(mask, "mask") if mask else None
    curves = [_read_curve(p) for p in curve_paths]
    render_figure(out, f, m, curves, labels=list(curve_labels), stride=stride)
    _emit({"command": "render", "outputs": [out]})


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except (MetricAtlasError, ValidationError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
