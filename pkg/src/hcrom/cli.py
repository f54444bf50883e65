"""Command line interface: ``hcrom offline|online|oracle|repro``."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import harness as hs
from . import reduce as rd
from .fem import GRAM_VARIANTS
from .forward import COUPLINGS
from .inverse import FILTERS, Measurement
from .linalg import FactorizationError, InconsistencyError
from .mesh import disk_mesh

OUT_ENV = "HCROM_OUT"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CERTIFICATION = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    command: str = "repro"
    level: int = 0
    delta: float = 1e-5
    epsilon: float = 0.0
    tau: float = 1.5
    alpha_grid_max_exponent: int = 16
    seed: int = 0
    gram_variant: str = "L2"
    coupling: str = "robin"
    filter: str = "tikhonov"
    out_dir: str = "out"
    run_id: str = ""
    oracle: bool = False
    baselines: bool = False
    levels: tuple = (0, 1, 2)
    structure_levels: tuple = ()
    model: str = ""
    data: str = ""

    def validate(self) -> "RunConfig":
        if not (isinstance(self.delta, (int, float)) and np.isfinite(self.delta) and self.delta > 0):
            raise ConfigError("delta", f"must be a positive number, got {self.delta!r}")
        if not (isinstance(self.level, int) and self.level >= 0):
            raise ConfigError("level", f"must be a nonnegative integer, got {self.level!r}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon", f"must be nonnegative, got {self.epsilon!r}")
        if not self.tau >= 1:
            raise ConfigError("tau", f"must be >= 1, got {self.tau!r}")
        if not (0 <= self.alpha_grid_max_exponent <= 32):
            raise ConfigError("alpha_grid_max_exponent", f"must be in [0, 32], got "
                              f"{self.alpha_grid_max_exponent!r}")
        if self.gram_variant not in GRAM_VARIANTS:
            raise ConfigError("gram_variant", f"must be one of {GRAM_VARIANTS}")
        if self.coupling not in COUPLINGS:
            raise ConfigError("coupling", f"must be one of {COUPLINGS}")
        if self.filter not in FILTERS:
            raise ConfigError("filter", f"must be one of {FILTERS}")
        for name in ("levels", "structure_levels"):
            vals = getattr(self, name)
            if any((not isinstance(v, int)) or v < 0 for v in vals):
                raise ConfigError(name, f"must be nonnegative integers, got {vals!r}")
        return self

    def to_json(self) -> str:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["structure_levels"] = list(self.structure_levels)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        for name in ("levels", "structure_levels"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        body = self.to_json().encode()
        return f"{self.command}-L{self.level}-{hashlib.sha256(body).hexdigest()[:10]}"

    def run_dir(self) -> Path:
        root = os.environ.get(OUT_ENV) or self.out_dir
        return Path(root) / self.resolved_run_id()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcrom", description="Hyperbolic-cross reduced models for "
                                "fluorescence optical tomography.")
    sub = p.add_subparsers(dest="command", required=True)
    d = RunConfig()

    def common(sp):
        sp.add_argument("--config", help="JSON RunConfig; explicit flags override it")
        sp.add_argument("--level", type=int)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--epsilon", type=float, help=f"hyperbolic exponent (default {d.epsilon})")
        sp.add_argument("--tau", type=float, help=f"discrepancy factor (default {d.tau})")
        sp.add_argument("--alpha-grid-max-exponent", type=int, dest="alpha_grid_max_exponent")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--gram-variant", choices=GRAM_VARIANTS, dest="gram_variant")
        sp.add_argument("--coupling", choices=COUPLINGS,
                        help="boundary source scaling: robin uses rho*q (default), unit uses q")
        sp.add_argument("--filter", choices=FILTERS,
                        help="tsvd keeps eigenvalues lambda_i >= alpha of AN ANt")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--run-id", dest="run_id")
        sp.add_argument("--oracle", action="store_const", const=True)
        sp.add_argument("--baselines", action="store_const", const=True)
        return sp

    common(sub.add_parser("offline", help="build and save a reduced model"))
    on = common(sub.add_parser("online", help="reconstruct with a saved model"))
    on.add_argument("--model", required=True)
    on.add_argument("--data", help="k x k physical-basis data in the container matrix format")
    common(sub.add_parser("oracle", help="certify a model against the dense oracle"))
    rp = common(sub.add_parser("repro", help="sweep levels and write the tables"))
    rp.add_argument("--levels", type=int, nargs="+")
    rp.add_argument("--structure-levels", type=int, nargs="*", dest="structure_levels")
    return p


def resolve_config(argv) -> RunConfig:
    args = _parser().parse_args(argv)
    cfg = RunConfig()
    if args.config:
        try:
            cfg = RunConfig.from_json(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError("config", str(exc)) from exc
    cfg.command = args.command
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "command":
            setattr(cfg, f.name, tuple(v) if isinstance(v, list) else v)
    return cfg.validate()


def _echo(cfg: RunConfig) -> Path:
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    print(f"run directory: {out}")
    return out


def cmd_offline(cfg: RunConfig) -> int:
    out = _echo(cfg)
    res = hs.run_offline(cfg.level, cfg.delta, cfg.epsilon, cfg.gram_variant, cfg.coupling)
    res.mesh.save(out / "mesh.txt")
    rd.save_model(res.model, out / "model")
    hs.emit_tables([res.record], out)
    hs.write_report([res.record], out / "report.json")
    r = res.record
    print(f"level {r.level}: m={r.m} k={r.k} xK={r.xK} mK={r.mK} NK={r.NK} N={r.N} "
          f"norm_T={r.norm_T:.4f}")
    print(f"model written to {out / 'model'}")
    return EXIT_OK


def cmd_online(cfg: RunConfig) -> int:
    out = _echo(cfg)
    manifest = json.loads((Path(cfg.model) / "manifest.json").read_text())
    mesh = disk_mesh(int(manifest["level"]))
    model = rd.load_model(cfg.model, mesh=mesh)
    if abs(model.delta - cfg.delta) > 1e-12 * model.delta:
        print(f"note: model built for delta={model.delta:g}, data delta={cfg.delta:g}")
    op = hs.build_operator(mesh, cfg.gram_variant, cfg.coupling)
    phantom = hs.make_phantom(mesh)
    if cfg.data:
        raw = rd.read_matrix(Path(cfg.data), "data")
        if raw.shape != (op.k, op.k):
            raise ConfigError("data", f"expected a {op.k}x{op.k} block, got {raw.shape}")
        from .inverse import compress, precompress, choose_alpha_discrepancy
        reduced = compress(precompress(Measurement(raw, cfg.delta), model, physical=True), model)
        choice = choose_alpha_discrepancy(reduced.data, model, cfg.delta, cfg.tau,
                                          cfg.alpha_grid_max_exponent, cfg.filter)
        rec, exponent, err = choice.reconstruction, choice.exponent, None
    else:
        onl = hs.run_online(model, op, phantom, cfg.delta, cfg.seed, cfg.tau,
                            cfg.alpha_grid_max_exponent, cfg.filter)
        rec, exponent, err = onl.reconstruction, onl.alpha_exponent, onl.rel_error
        hs.emit_image(phantom.c_dagger, mesh, out / "phantom.pgm")
    hs.emit_image(rec.c, mesh, out / "reconstruction.pgm")
    np.save(out / "reconstruction.npy", rec.c)
    summary = dict(alpha=rec.alpha, alpha_exponent=exponent, discrepancy=rec.discrepancy,
                   rel_error=err, filter=rec.filter)
    (out / "online.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"alpha=1e-{exponent} discrepancy={rec.discrepancy:.3e}"
          + (f" rel_error={err:.3f}" if err is not None else ""))
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    out = _echo(cfg)
    res = hs.run_offline(cfg.level, cfg.delta, cfg.epsilon, cfg.gram_variant, cfg.coupling, norm=False)
    rep = hs.run_oracle(res.model, res.op)
    hs.emit_oracle(rep, out / "oracle.csv")
    print(f"N={rep.N} Nsvd={rep.Nsvd} max_error={rep.max_error / cfg.delta:.2f} delta "
          f"max_perturbation={rep.max_perturbation / cfg.delta:.2f} delta verdict={rep.verdict}")
    return EXIT_OK if rep.quasi_optimal else EXIT_CERTIFICATION


def cmd_repro(cfg: RunConfig) -> int:
    out = _echo(cfg)
    oracle_max = 2 if cfg.oracle else -1
    hs.repro(out, cfg.levels, cfg.delta, cfg.epsilon, cfg.tau, cfg.alpha_grid_max_exponent, cfg.seed,
             cfg.gram_variant, cfg.coupling, cfg.filter, oracle_max, cfg.baselines,
             cfg.structure_levels)
    print(f"tables written to {out}")
    return EXIT_OK


COMMANDS = {"offline": cmd_offline, "online": cmd_online, "oracle": cmd_oracle, "repro": cmd_repro}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, rd.ModelFormatError, hs.PhantomError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FactorizationError, InconsistencyError, rd.TrivialModelError, rd.OracleTooLargeError,
            np.linalg.LinAlgError, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
