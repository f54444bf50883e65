"""Experiment orchestration: phantoms, offline/online runs, oracle and output files."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import reduce as rd
from .fem import EMISSION, EXCITATION, OpticalParameters, assemble_system
from .forward import TruthOperator, apply_T, build_truth_operator, operator_norm
from .inverse import (add_noise, choose_alpha_discrepancy, compress, precompress,
                      solve_full_baseline, solve_tensor_baseline, x_norm)
from .mesh import Mesh, disk_mesh

SUPPORT_RADIUS = 0.9


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    amplitudes: tuple = (1.0, 0.6)
    centers: tuple = ((0.3, 0.2), (-0.35, -0.25))
    radii: tuple = (0.25, 0.3)
    support_radius: float = SUPPORT_RADIUS


DEFAULT_PHANTOM = PhantomSpec()


@dataclass(frozen=True)
class Phantom:
    c_dagger: np.ndarray
    support_radius: float
    description: PhantomSpec


def make_phantom(mesh: Mesh, spec: PhantomSpec = DEFAULT_PHANTOM) -> Phantom:
    """Sum of bumps ``a (1 - |x - x_i|² / r_i²)_+²`` at the mesh vertices."""
    if not (len(spec.amplitudes) == len(spec.centers) == len(spec.radii)):
        raise PhantomError("amplitudes, centers and radii must have equal length")
    x = mesh.vertices
    c = np.zeros(mesh.n_vertices)
    for a, x0, r in zip(spec.amplitudes, spec.centers, spec.radii):
        if a < 0 or r <= 0:
            raise PhantomError(f"bump needs a >= 0 and r > 0, got a={a}, r={r}")
        if np.hypot(*x0) + r > spec.support_radius + 1e-12:
            raise PhantomError(f"bump at {x0} with radius {r} leaves the support disk "
                               f"of radius {spec.support_radius}")
        d2 = np.sum((x - np.asarray(x0)) ** 2, axis=1) / r ** 2
        c += a * np.maximum(0.0, 1.0 - d2) ** 2
    return Phantom(c_dagger=c, support_radius=spec.support_radius, description=spec)


# -- offline --------------------------------------------------------------------------------

@dataclass
class LevelRecord:
    level: int
    m: int
    k: int
    delta: float
    xK: int | None = None
    mK: int | None = None
    NK: int | None = None
    N: int | None = None
    norm_T: float | None = None
    Nsvd: int | None = None
    alpha_exponent: int | None = None
    discrepancy: float | None = None
    rel_error: float | None = None
    cg_iterations: int | None = None
    timings: dict = field(default_factory=dict)


@dataclass
class OfflineResult:
    mesh: Mesh
    op: TruthOperator
    model: rd.ReducedModel | None
    record: LevelRecord


def build_operator(mesh: Mesh, gram: str = "L2", coupling: str = "robin",
                   params_x: OpticalParameters = EXCITATION, params_m: OpticalParameters = EMISSION,
                   keep=None) -> TruthOperator:
    sx = assemble_system(mesh, params_x, gram)
    sm = assemble_system(mesh, params_m, gram)
    return build_truth_operator(sx, sm, coupling=coupling, mesh_level=mesh.level,
                                keep_x=keep, keep_m=keep)


def run_offline(level: int, delta: float, epsilon: float = 0.0, gram: str = "L2",
                coupling: str = "robin", norm: bool = True, mesh: Mesh | None = None,
                op: TruthOperator | None = None) -> OfflineResult:
    """mesh -> fem -> forward -> reduce, recording the rank statistics."""
    t = {}
    t0 = time.perf_counter()
    mesh = disk_mesh(level) if mesh is None else mesh
    if op is None:
        op = build_operator(mesh, gram, coupling)
    t["forward"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model = rd.build_reduced_model(op, delta, epsilon, fingerprint=mesh.fingerprint(), level=level)
    t["reduce"] = time.perf_counter() - t0
    rec = LevelRecord(level=level, m=op.m, k=op.k, delta=delta, xK=model.selection.xK,
                      mK=model.selection.mK, NK=model.NK, N=model.N, timings=t)
    if norm:
        t0 = time.perf_counter()
        rec.norm_T = operator_norm(op)
        t["norm"] = time.perf_counter() - t0
    return OfflineResult(mesh, op, model, rec)


def run_structure(level: int, delta: float, epsilon: float = 0.0, gram: str = "L2",
                  coupling: str = "robin", norm: bool = False) -> LevelRecord:
    """Rank statistics only, storing just the retained fields (for fine meshes).

    With ``norm`` the operator norm is estimated on the retained ``mK x xK``
    block, which differs from the full norm by at most the discarded tail.
    """
    t0 = time.perf_counter()
    mesh = disk_mesh(level)
    op = build_operator(mesh, gram, coupling, keep=float(delta))
    t1 = time.perf_counter()
    sel = rd.truncate(op.sx, op.sm, delta)
    K = rd.choose_cross_parameter(sel)
    cross = rd.HyperbolicIndexSet(rd.hyperbolic_pairs(K, sel.mK, sel.xK, epsilon), K, epsilon)
    lam = rd.cross_spectrum(op, sel, cross)
    t2 = time.perf_counter()
    norm_T = operator_norm(op, rows=sel.mKK, cols=sel.xKK) if norm else None
    return LevelRecord(level=level, m=op.m, k=op.k, delta=delta, xK=sel.xK, mK=sel.mK,
                       NK=cross.NK, N=int(np.sum(lam > delta ** 2)), norm_T=norm_T,
                       timings={"forward": t1 - t0, "reduce": t2 - t1,
                                "norm": time.perf_counter() - t2})


# -- online ---------------------------------------------------------------------------------

@dataclass
class OnlineResult:
    reconstruction: object
    alpha_exponent: int
    satisfied: bool
    rel_error: float
    trace: list


def simulate(op: TruthOperator, phantom: Phantom, delta: float, seed: int):
    return add_noise(apply_T(op, phantom.c_dagger), delta, seed)


def run_online(model: rd.ReducedModel, op: TruthOperator, phantom: Phantom, delta: float, seed: int = 0,
               tau: float = 1.5, max_exponent: int = 16, filter: str = "tikhonov",
               meas=None) -> OnlineResult:
    """Simulate noisy data, compress it, and reconstruct with the discrepancy-chosen alpha."""
    meas = simulate(op, phantom, delta, seed) if meas is None else meas
    reduced = compress(precompress(meas, model), model)
    choice = choose_alpha_discrepancy(reduced.data, model, delta, tau, max_exponent, filter)
    c = choice.reconstruction.c
    err = x_norm(c - phantom.c_dagger, op.DD) / x_norm(phantom.c_dagger, op.DD)
    return OnlineResult(choice.reconstruction, choice.exponent, choice.satisfied, err, choice.trace)


def run_baselines(op: TruthOperator, model: rd.ReducedModel, meas, alpha: float, delta: float,
                  tensor: bool = False):
    out = {"full": solve_full_baseline(op, meas, alpha, delta)}
    if tensor:
        out["tensor"] = solve_tensor_baseline(op, model.selection, meas, alpha, delta)
    return out


def run_oracle(model: rd.ReducedModel, op: TruthOperator, size_cap: int = 16_000,
               sigma=None) -> rd.CertificationReport:
    return rd.certify(model, op, size_cap=size_cap, sigma=sigma)


# -- output ---------------------------------------------------------------------------------

TABLES = {
    "table1.csv": ("m", "k", "norm_T"),
    "table4.csv": ("xK", "mK"),
    "table6.csv": ("NK", "N"),
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_tables(records, out_dir) -> list[Path]:
    """One CSV per output table: a ``ref`` header row, then one row per quantity."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.level)
    paths = []
    for name, rows in TABLES.items():
        p = out_dir / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ref"] + [r.level for r in records])
            for q in rows:
                w.writerow([q] + [_fmt(getattr(r, q)) for r in records])
        paths.append(p)
    return paths


def read_table(path) -> dict:
    """Parse a table CSV back into ``{quantity: {level: value}}``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    levels = [int(v) for v in rows[0][1:]]
    out = {}
    for row in rows[1:]:
        vals = {}
        for lev, v in zip(levels, row[1:]):
            if v == "":
                vals[lev] = None
            elif v.lstrip("-").isdigit():
                vals[lev] = int(v)
            else:
                vals[lev] = float(v)
        out[row[0]] = vals
    return out


def emit_oracle(report: rd.CertificationReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for key in ("delta", "N", "Nsvd", "max_error", "max_error_tensor", "max_perturbation"):
            w.writerow([key, _fmt(getattr(report, key))])
        w.writerow(["verdict", report.verdict])
        w.writerow([])
        w.writerow(["index", "sigma", "sigma_cross"])
        n = max(report.Nsvd, report.N) + 1
        for i in range(min(n, report.sigma.size)):
            sc = report.sigma_cross[i] if i < report.sigma_cross.size else None
            w.writerow([i + 1, _fmt(report.sigma[i]), _fmt(sc)])
    return path


IMAGE_SIZE = 512


def rasterize(c: np.ndarray, mesh: Mesh, size: int = IMAGE_SIZE) -> np.ndarray:
    """Piecewise-linear field sampled on a ``size x size`` grid over ``[-1, 1]²``.

    Pixels outside the mesh are NaN. Row 0 is the top (``y = 1``).
    """
    import matplotlib.tri as mtri

    tri = mtri.Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
    interp = mtri.LinearTriInterpolator(tri, np.asarray(c, dtype=float))
    s = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    X, Y = np.meshgrid(s, s[::-1])
    vals = interp(X, Y)
    return np.ma.filled(vals.astype(float), np.nan)


def emit_image(c: np.ndarray, mesh: Mesh, path, size: int = IMAGE_SIZE) -> Path:
    """Binary PGM: ``0 -> 255`` (white) and ``max(c) -> 0`` (black); outside is white."""
    vals = rasterize(c, mesh, size)
    top = float(np.nanmax(vals)) if np.any(np.isfinite(vals)) else 0.0
    img = np.full(vals.shape, 255, dtype=np.uint8)
    inside = np.isfinite(vals)
    if top > 0:
        g = 255.0 * (1.0 - np.clip(vals[inside], 0.0, top) / top)
        img[inside] = np.rint(g).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{size} {size}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_report(records, path, extra: dict | None = None) -> Path:
    payload = {"levels": [asdict(r) for r in records]}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    return Path(path)


# -- sweep ----------------------------------------------------------------------------------

def repro(out_dir, levels=(0, 1, 2), delta: float = 1e-5, epsilon: float = 0.0, tau: float = 1.5,
          max_exponent: int = 16, seed: int = 0, gram: str = "L2", coupling: str = "robin",
          filter: str = "tikhonov", oracle_max_level: int = 2, baselines: bool = False,
          structure_levels=(), log=print) -> list[LevelRecord]:
    """Offline, online, and (optionally) oracle and CG runs per level; writes all outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phantom_spec = DEFAULT_PHANTOM
    records = []
    last = None
    oracle_reports = {}
    for level in levels:
        log(f"level {level}: offline")
        res = run_offline(level, delta, epsilon, gram, coupling)
        rec = res.record
        phantom = make_phantom(res.mesh, phantom_spec)
        log(f"level {level}: online")
        onl = run_online(res.model, res.op, phantom, delta, seed, tau, max_exponent, filter)
        rec.alpha_exponent = onl.alpha_exponent
        rec.discrepancy = onl.reconstruction.discrepancy
        rec.rel_error = onl.rel_error
        if level <= oracle_max_level:
            log(f"level {level}: oracle")
            rep = run_oracle(res.model, res.op)
            rec.Nsvd = rep.Nsvd
            oracle_reports[level] = rep
        if baselines:
            log(f"level {level}: CG baseline")
            meas = simulate(res.op, phantom, delta, seed)
            base = run_baselines(res.op, res.model, meas, onl.reconstruction.alpha, delta)
            rec.cg_iterations = base["full"].iterations
        records.append(rec)
        last = (res, phantom, onl)
        log(f"level {level}: xK={rec.xK} mK={rec.mK} NK={rec.NK} N={rec.N}")
    for level in structure_levels:
        log(f"level {level}: structural run")
        records.append(run_structure(level, delta, epsilon, gram, coupling, norm=True))
    emit_tables(records, out_dir)
    if oracle_reports:
        emit_oracle(oracle_reports[max(oracle_reports)], out_dir / "oracle.csv")
    if last is not None:
        res, phantom, onl = last
        emit_image(phantom.c_dagger, res.mesh, out_dir / "phantom.pgm")
        emit_image(onl.reconstruction.c, res.mesh, out_dir / "reconstruction.pgm")
        rd.save_model(res.model, out_dir / "model")
    write_report(records, out_dir / "report.json")
    return records
