"""Command-line entry point: ``nlskam {run-kam, check-melnikov, simulate}``.

Configuration files are flat ``key = value`` lines with dotted section
prefixes; ``#`` starts a comment.  Site lists read ``0,0;1,0`` and site
tables read ``0,0:0.3;1,0:0.11``.

Exit codes: 0 success, 1 invalid configuration or input, 2 empty set of
surviving parameters, 3 iteration did not reach its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_NOT_CONVERGED = 0, 1, 2, 3


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


class ConfigError(ValueError):
    """Invalid configuration text or value."""


def _sites(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(tuple(int(x) for x in part.split(",")) for part in text.split(";") if part.strip())


def _table(text: str) -> dict:
    out = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        site, _, value = part.partition(":")
        if not _:
            raise ValueError(f"table entry {part!r} lacks ':'")
        out[tuple(int(x) for x in site.split(","))] = float(value)
    return out


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# key -> (parser, default); a default of None means "derived"
SCHEMA = {
    "model.d": (int, 2),
    "model.p": (float, 2.0),
    "model.R": (int, 2),
    "model.A": (_sites, ((0, 0), (1, 0))),
    "model.V": (_table, None),
    "model.q": (_table, None),
    "model.epsilon": (float, 1e-5),
    "model.m": (int, 1),
    "model.coefficient": (float, 1.0),
    "model.k_max": (int, 4),
    "model.deg_r": (int, 1),
    "model.deg_z": (int, 2),
    "kam.rho": (float, 0.5),
    "kam.mu": (float, 0.25),
    "kam.sigma": (float, 0.5),
    "kam.gamma": (float, 0.5),
    "kam.tol": (float, 1e-12),
    "kam.m_max": (int, 4),
    "kam.cte": (float, 1.0),
    "kam.grid": (int, 21),
    "kam.grid_kind": (str, "uniform"),
    "kam.delta0": (float, 2.0),
    "kam.kappa_cap": (float, 1e-3),
    "kam.retries": (int, 3),
    "melnikov.kappa": (_floats, (0.1, 0.01, 0.001)),
    "melnikov.delta_prime": (float, 4.0),
    "melnikov.block_delta": (float, 2.0),
    "experiment.delta": (_floats, (1e-3,)),
    "experiment.dt": (float, 1e-2),
    "experiment.T": (_opt_float, None),
    "experiment.n_modes": (int, 8),
    "experiment.record_every": (int, 100),
    "experiment.use_kam": (_bool, True),
    "output.dir": (str, "out"),
    "seed": (int, 0),
    "threads": (int, 1),
}


def parse_config(text: str) -> dict:
    """Parse config text into a dict over :data:`SCHEMA` keys with defaults filled in.

    Raises
    ------
    ConfigError
        On malformed lines, unknown or repeated keys, and unparsable values.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: key '{key}' given twice")
        try:
            values[key] = SCHEMA[key][0](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
    return {key: values.get(key, default) for key, (_, default) in SCHEMA.items()} | {
        "_given": frozenset(values)
    }


def format_config(cfg: dict) -> str:
    """Inverse of :func:`parse_config` for the keys that hold values."""
    lines = []
    for key in SCHEMA:
        v = cfg.get(key)
        if v is None:
            continue
        if key == "model.A":
            v = ";".join(",".join(str(x) for x in s) for s in v)
        elif key in ("model.V", "model.q"):
            v = ";".join(f"{','.join(str(x) for x in s)}:{val!r}" for s, val in v.items())
        elif key in ("melnikov.kappa", "experiment.delta"):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class Model:
    spec: object
    lattice: object
    cfg: dict

    def at(self, w):
        from .nlsmodel import build_hamiltonian

        return build_hamiltonian(self.spec.with_parameters(self.lattice, w), self.lattice)

    def normal_form(self, w):
        from .nlsmodel import normal_form_at

        return normal_form_at(self.spec.with_parameters(self.lattice, w), self.lattice)


def build_model(cfg: dict) -> Model:
    """Validate the model section and build spec and lattice.

    Raises
    ------
    ConfigError
        Naming the offending key.
    """
    from .algebra import Caps, LatticeConfig
    from .errors import ConfigurationError
    from .nlsmodel import NlsSpec

    A = cfg["model.A"]
    if not A:
        raise ConfigError("model.A: the tangential site list is empty")
    if any(len(a) != cfg["model.d"] for a in A):
        raise ConfigError("model.A: every site needs model.d coordinates")
    V = cfg["model.V"]
    if V is None:
        V = {a: 0.3 * math.exp(-math.sqrt(sum(x * x for x in a))) for a in A}
    q = cfg["model.q"]
    if q is None:
        q = {a: 1.0 for a in A}
    for a in A:
        if a not in q:
            raise ConfigError(f"model.q: missing amplitude for tangential site {','.join(map(str, a))}")
        if q[a] <= 0:
            raise ConfigError(f"model.q: amplitude at {','.join(map(str, a))} must be positive")
    try:
        lattice = LatticeConfig(cfg["model.d"], cfg["model.p"], A, cfg["model.R"])
        caps = Caps(cfg["model.k_max"], cfg["model.deg_r"], cfg["model.deg_z"])
        spec = NlsSpec(V_hat=V, epsilon=cfg["model.epsilon"], caps=caps, q=q, m=cfg["model.m"],
                       coefficient=cfg["model.coefficient"])
    except ConfigurationError as exc:
        raise ConfigError(f"model: {exc}") from None
    for key in ("kam.rho", "kam.mu", "kam.sigma", "kam.gamma"):
        if not 0 < cfg[key] < 1:
            raise ConfigError(f"{key}: must lie in (0, 1)")
    if cfg["kam.grid_kind"] not in ("uniform", "sobol"):
        raise ConfigError("kam.grid_kind: expected 'uniform' or 'sobol'")
    if cfg["kam.grid"] < 1 or cfg["kam.m_max"] < 1:
        raise ConfigError("kam.grid and kam.m_max must be positive")
    for d in cfg["experiment.delta"]:
        if not 0 < d < 1:
            raise ConfigError("experiment.delta: every value must lie in (0, 1)")
    if cfg["experiment.dt"] <= 0:
        raise ConfigError("experiment.dt: must be positive")
    if any(k <= 0 for k in cfg["melnikov.kappa"]):
        raise ConfigError("melnikov.kappa: values must be positive")
    return Model(spec, lattice, cfg)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _grid(cfg: dict, n: int):
    from .melnikov import ParameterGrid

    if cfg["kam.grid_kind"] == "sobol":
        m = max(1, int(math.ceil(math.log2(cfg["kam.grid"] ** min(n, 2)))))
        return ParameterGrid.sobol(n, m=m, seed=cfg["seed"])
    return ParameterGrid.uniform(n, per_axis=cfg["kam.grid"])


def _radii(cfg: dict):
    from .algebra import DomainRadii

    return DomainRadii(cfg["kam.rho"], cfg["kam.mu"], cfg["kam.sigma"], cfg["kam.gamma"])


def _csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def run_kam(model: Model, out: Path):
    """Run the outer iteration; returns ``(KamResult, exit code)``."""
    from .kamflow import KamSettings, outer_iterate

    cfg = model.cfg
    grid = _grid(cfg, model.lattice.n_tangential)
    settings = KamSettings(tol=cfg["kam.tol"], m_max=cfg["kam.m_max"], kappa_cap=cfg["kam.kappa_cap"],
                           delta0=cfg["kam.delta0"], cte=cfg["kam.cte"], retries=cfg["kam.retries"])
    h0, f0 = model.at(grid.points[0])
    result = outer_iterate(h0, f0, grid=grid, stop=settings, radii=_radii(cfg), model=model.at,
                           nf_model=model.normal_form)

    out.mkdir(parents=True, exist_ok=True)
    (out / "run_log.jsonl").write_text("".join(line + "\n" for line in result.run_log_lines()))
    (out / "kam_result.json").write_text(result.to_json() + "\n")
    rows = []
    for m in sorted({r["m"] for r in result.records if "j" in r}):
        recs = [r for r in result.records if r.get("m") == m and "j" in r]
        last = recs[-1]
        rows.append([m, _fmt(last["eps_m"]), _fmt(last["kappa"]), _fmt(last["Delta_m"]),
                     _fmt(last["delta_prime"]), len(recs), _fmt(last["survivors"]),
                     _fmt(last["excluded_fraction"]), _fmt(last["low_after"]), _fmt(last["high_norm"]),
                     _fmt(last["omega_drift"]), _fmt(last["H_drift"])])
    header = ["m", "eps_m", "kappa_m", "Delta_m", "delta_prime", "inner_steps", "survivors",
              "excluded_fraction", "low_after", "high_after", "omega_drift", "H_drift"]
    (out / "summary.csv").write_text(_csv(rows, header))
    if result.grid is not None:
        (out / "grid.csv").write_text(result.grid.to_csv())
    code = {"converged": EXIT_OK, "empty_survivors": EXIT_EMPTY}.get(result.status, EXIT_NOT_CONVERGED)
    return result, code


def check_melnikov(model: Model, out: Path, kappas) -> int:
    from .lattice import build_blocks
    from .melnikov import excluded_fraction_sweep, fit_measure_exponent

    cfg = model.cfg
    grid = _grid(cfg, model.lattice.n_tangential)
    blocks = build_blocks(model.lattice, cfg["melnikov.block_delta"])
    sweep = excluded_fraction_sweep(grid, model.normal_form, blocks, cfg["melnikov.delta_prime"], kappas)
    fractions = [sweep["excluded_fraction"][float(k)] for k in kappas]
    exponent = fit_measure_exponent(kappas, fractions)
    rows = [[_fmt(float(k)), int(sweep["survivors"][float(k)].sum()), len(grid.points), _fmt(fr)]
            for k, fr in zip(kappas, fractions)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "melnikov.csv").write_text(_csv(rows, ["kappa", "survivors", "points", "excluded_fraction"]))
    point_rows = [[_fmt(float(x)) for x in w] + [_fmt(float(v))] for w, v in zip(grid.points, sweep["min_divisor"])]
    header = [f"w{i}" for i in range(grid.points.shape[1])] + ["min_divisor"]
    (out / "melnikov_points.csv").write_text(_csv(point_rows, header))
    (out / "melnikov_summary.json").write_text(json.dumps(
        {"kappa": [float(k) for k in kappas], "excluded_fraction": fractions, "fitted_exponent": exponent,
         "points": len(grid.points)}, indent=1) + "\n")
    return EXIT_OK


def simulate(model: Model, out: Path, deltas) -> int:
    from .nlsmodel import stability_experiment

    cfg = model.cfg
    result, code = None, EXIT_OK
    if cfg["experiment.use_kam"] and model.spec.epsilon > 0:
        result, code = run_kam(model, out / "kam")
        if code != EXIT_OK:
            return code
    spec = model.spec if result is None else model.spec.with_parameters(model.lattice, result.w)
    rows = []
    out.mkdir(parents=True, exist_ok=True)
    for i, delta in enumerate(deltas):
        prof = stability_experiment(result, spec, model.lattice, delta, model.lattice.p, dt=cfg["experiment.dt"],
                                    T=cfg["experiment.T"], seed=cfg["seed"], n_modes=cfg["experiment.n_modes"],
                                    record_every=cfg["experiment.record_every"])
        (out / f"profile_{i}.csv").write_text(prof.to_csv())
        rows.append([i, _fmt(float(delta)), _fmt(prof.sup_C), _fmt(prof.energy_drift), _fmt(prof.meta["horizon"])])
    (out / "stability.csv").write_text(_csv(rows, ["index", "delta", "sup_C", "energy_drift", "horizon"]))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlskam", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=("run-kam", "check-melnikov", "simulate"))
    parser.add_argument("--config", type=Path, help="flat key = value configuration file")
    parser.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="random seed (overrides seed)")
    parser.add_argument("--threads", type=int, help="BLAS and FFT thread cap (overrides threads)")
    parser.add_argument("--kappa", help="comma-separated small-divisor floors for check-melnikov")
    parser.add_argument("--delta", help="comma-separated perturbation sizes for simulate")
    return parser


def _cap_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        text = args.config.read_text() if args.config else ""
        cfg = parse_config(text)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        if cfg["threads"] < 1:
            raise ConfigError("threads: must be positive")
        _cap_threads(cfg["threads"])
        kappas = _floats(args.kappa) if args.kappa else cfg["melnikov.kappa"]
        deltas = _floats(args.delta) if args.delta else cfg["experiment.delta"]
        cfg["melnikov.kappa"], cfg["experiment.delta"] = kappas, deltas
        model = build_model(cfg)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"nlskam: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(cfg["output.dir"])

    from .errors import ConfigurationError, ContractError

    try:
        if args.command == "run-kam":
            result, code = run_kam(model, out)
            print(f"{result.status}: {result.summary['outer_steps']} outer steps, "
                  f"low norm {result.summary['low_norm_final']:.3e}")
            return code
        if args.command == "check-melnikov":
            return check_melnikov(model, out, kappas)
        return simulate(model, out, deltas)
    except (ConfigurationError, ContractError) as exc:
        print(f"nlskam: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
