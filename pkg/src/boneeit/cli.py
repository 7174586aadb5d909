"""Command-line interface.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
All quantities are SI.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .forward import DEFAULT_CONTACT_IMPEDANCE, adjacent_protocol, load_protocol, read_voltages, write_voltages
from .inverse import (MODES, NONPOSITIVE, alpha_sweep, build_laplacian, raster, read_reconstruction,
                      reconstruct_scaled, region_average, write_pgm, write_reconstruction)
from .material import fit_circuit, fit_report, read_spectrum
from .mesh import generate_disk_mesh, load_mesh, save_mesh
from .phantom import load_scenario, simulate_scenario
from .sensitivity import compute_jacobian

DEFAULT_EDGE = 0.005


class UsageError(Exception):
    pass


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, inputs: dict, outputs: list, seed=None, extra=None) -> Path:
    """JSON run record. Holds no timestamps so reruns are byte-identical."""
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in inputs.items()},
        "outputs": [{"path": str(p), "sha256": sha256(p)} for p in outputs],
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def _positive(text):
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return v


def _nonnegative(text):
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a non-negative number, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return v


def _electrodes(text):
    v = int(text)
    if v < 4:
        raise argparse.ArgumentTypeError(f"need at least 4 electrodes, got {v}")
    return v


def _radii(text):
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated radii in metres, got {text!r}") from None
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise argparse.ArgumentTypeError(f"radii must be positive, got {text!r}")
    return vals


def _point(text):
    try:
        x, y = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y in metres, got {text!r}") from None
    return x, y


def cmd_mesh(args):
    mesh = generate_disk_mesh(args.radius, args.electrodes, args.coverage, args.edge, args.interface_radii)
    out = save_mesh(mesh, args.out)
    write_manifest(f"{out}.manifest.json", "mesh", {}, [out],
                   extra={"flags": {"radius": args.radius, "electrodes": args.electrodes,
                                    "coverage": args.coverage, "edge": args.edge,
                                    "interface_radii": list(args.interface_radii)}})
    print(f"wrote {out}: {mesh.n_nodes} nodes, {mesh.n_elements} elements, {mesh.n_electrodes} electrodes")


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label).strip("_") or "step"


def cmd_simulate(args):
    mesh = load_mesh(args.mesh)
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    protocol = scenario.protocol(mesh.n_electrodes)
    # everything is computed before anything is written
    results = simulate_scenario(scenario, mesh, protocol, seed=seed)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs, steps = [], []
    for k, (label, v) in enumerate(results):
        path = outdir / f"step_{k:02d}_{_slug(label)}.csv"
        write_voltages(path, v, protocol)
        outputs.append(path)
        steps.append({"index": k, "label": label, "path": str(path)})
    inputs = {"mesh": args.mesh}
    if Path(args.scenario).is_file():
        inputs["scenario"] = args.scenario
    write_manifest(outdir / "manifest.json", "simulate", inputs, outputs, seed=seed,
                   extra={"scenario": scenario.name or str(args.scenario), "steps": steps})
    print(f"wrote {len(outputs)} step files to {outdir}")


def cmd_reconstruct(args):
    mesh = load_mesh(args.mesh)
    protocol = (load_protocol(args.protocol, mesh.n_electrodes) if args.protocol
                else adjacent_protocol(mesh.n_electrodes))
    base = read_voltages(args.baseline)
    frame = read_voltages(args.frame)
    n = len(protocol)
    for name, v in (("baseline", base), ("frame", frame)):
        if len(v) != n:
            raise ValueError(f"{name} has {len(v)} voltages, protocol expects {n}")
    jac = compute_jacobian(mesh, args.sigma0, args.contact_impedance, protocol)
    lap = build_laplacian(mesh)
    dv = frame - base
    result = reconstruct_scaled(jac, lap, args.alpha, dv, args.mode)
    outputs = [Path(args.out)]
    write_reconstruction(args.out, result, mesh)
    if args.raster:
        write_pgm(args.raster, raster(mesh, result.delta_sigma, args.raster_size, result.constrained))
        outputs.append(Path(args.raster))
    if args.alpha_sweep:
        pts = alpha_sweep(jac, lap, dv, np.logspace(-4, 1, 10), args.mode)
        with open(args.alpha_sweep, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "data_residual", "roughness"])
            w.writerows([[repr(a), repr(r), repr(s)] for a, r, s in pts])
        outputs.append(Path(args.alpha_sweep))
    inputs = {"mesh": args.mesh, "baseline": args.baseline, "frame": args.frame}
    if args.protocol:
        inputs["protocol"] = args.protocol
    write_manifest(f"{args.out}.manifest.json", "reconstruct", inputs, outputs,
                   extra={"alpha": args.alpha, "mode": args.mode, "sigma0": args.sigma0,
                          "data_residual": result.data_residual, "roughness": result.roughness})
    print(f"wrote {args.out}: min {result.delta_sigma.min():.6g} S/m, max {result.delta_sigma.max():.6g} S/m")


def cmd_avg(args):
    mesh = load_mesh(args.mesh)
    ds = read_reconstruction(args.recon, mesh)
    value = region_average(ds, mesh, args.center, args.diameter)
    metrics = Path(args.metrics) if args.metrics else Path(args.recon).with_name("metrics.csv")
    new = not metrics.exists()
    with open(metrics, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["recon", "center_x_m", "center_y_m", "diameter_m", "average_delta_sigma_S_per_m"])
        w.writerow([args.recon, repr(args.center[0]), repr(args.center[1]), repr(args.diameter), repr(value)])
    print(repr(value))


def cmd_fit_eis(args):
    spec = read_spectrum(args.spectrum)
    fit = fit_circuit(spec)
    Path(args.out).write_text(fit_report(fit, spec))
    write_manifest(f"{args.out}.manifest.json", "fit-eis", {"spectrum": args.spectrum}, [Path(args.out)])
    p = fit.params
    print(f"R_p={p.R_p:.6g} ohm R_s={p.R_s:.6g} ohm C_p={p.C_p:.6g} F L_s={p.L_s:.6g} H residual={fit.residual:.3g} ohm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boneeit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate a disk mesh with boundary electrodes")
    p.add_argument("--radius", type=_positive, default=0.0665, help="tank radius, m")
    p.add_argument("--electrodes", type=_electrodes, default=16)
    p.add_argument("--coverage", type=_fraction, default=0.5, help="fraction of circumference under electrodes")
    p.add_argument("--edge", type=_positive, default=DEFAULT_EDGE, help="target edge length, m")
    p.add_argument("--interface-radii", type=_radii, default=(0.0225,), metavar="R1,R2,...",
                   help="circles the element edges must follow, m; default is the 45 mm inclusion "
                        "boundary, '' for none")
    p.add_argument("--out", default="mesh.json")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("simulate", help="simulate protocol voltages for every scenario step")
    p.add_argument("--mesh", required=True)
    p.add_argument("--scenario", required=True, help="scenario file or bundled preset name")
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the scenario's noise seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="difference image between two voltage frames")
    p.add_argument("--mesh", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--alpha", type=_nonnegative, default=1e-2,
                   help="regularisation weight for unit-norm sensitivity columns")
    p.add_argument("--mode", choices=MODES, default=NONPOSITIVE)
    p.add_argument("--sigma0", type=_positive, default=1e-3, help="background conductivity, S/m")
    p.add_argument("--contact-impedance", type=_positive, default=DEFAULT_CONTACT_IMPEDANCE, help="ohm m")
    p.add_argument("--protocol", default=None, help="protocol JSON; default adjacent drive")
    p.add_argument("--out", required=True)
    p.add_argument("--raster", default=None, help="optional PGM image path")
    p.add_argument("--raster-size", type=int, default=128)
    p.add_argument("--alpha-sweep", default=None, metavar="CSV",
                   help="also write the L-curve over 10 log-spaced alphas in [1e-4, 10]")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("avg", help="area-weighted region average of a reconstruction")
    p.add_argument("--recon", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--center", type=_point, default=(0.0, 0.0), help="x,y in metres")
    p.add_argument("--diameter", type=_positive, default=0.045, help="m")
    p.add_argument("--metrics", default=None, help="metrics CSV to append to")
    p.set_defaults(func=cmd_avg)

    p = sub.add_parser("fit-eis", help="fit the equivalent circuit to an impedance spectrum")
    p.add_argument("--spectrum", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_eis)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"boneeit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
