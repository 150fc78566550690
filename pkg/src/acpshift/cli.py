"""Command-line interface: ``acpshift {estimate,simulate,oracle,report}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure
(including a simulation with too many failed replications).

Random streams: ``--seed`` is the only source of randomness. ``estimate``
uses it for fold assignment and learner CV splits and, offset by one, for
bootstrap weights; ``simulate`` uses it as the master seed from which each
replication's data and fold seeds are derived.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import ScoreModel, read_csv
from .estimator import EstimatorConfig, Variant, estimate
from .exceptions import ACPError, InvalidSpec, SolverError, ValidationError
from .inference import BootstrapConfig, perturbation_bootstrap
from .nuisance import LearnerConfig
from .oracle import DgpSpec, cached_bounds
from .simulation import GridPoint, SimConfig, sweep

log = logging.getLogger("acpshift")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
PANELS = {"n_labeled": "n", "n_unlabeled": "N", "alpha": "alpha_signal", "zeta": "zeta"}


class ConfigError(ValidationError):
    pass


# --------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    data = read_csv(args.data)
    model = ScoreModel.from_name(args.estimand, data.p)
    learner = LearnerConfig(fast_mode=args.fast, seed=args.seed)
    config = EstimatorConfig(K=args.k, seed=args.seed, learner=learner, alpha=args.alpha)
    variant = Variant(args.variant)
    result = estimate(data, model, config, variant)
    payload = result.to_dict()
    if args.bootstrap:
        boot = BootstrapConfig(B=args.bootstrap, seed=args.seed + 1,
                               quantiles=(args.alpha / 2, 1 - args.alpha / 2))
        br = perturbation_bootstrap(data, model, config, boot, variant)
        payload["bootstrap"] = {
            "B": boot.B, "failures": br.failures, "flagged": br.flagged,
            "ci": [{"coord": c, "lo": float(lo), "hi": float(hi)}
                   for c, (lo, hi) in zip(result.coord_names, br.ci)],
        }
    _write_json(payload, args.out)
    for name, b, se, (lo, hi) in zip(result.coord_names, result.beta, result.se, result.ci):
        print(f"{name:>12}  estimate {b: .6f}  se {se:.6f}  ci [{lo: .6f}, {hi: .6f}]")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def _parse_list(raw: str, cast, where: str) -> list:
    try:
        out = [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if not out:
        raise ConfigError(f"{where}: no values given")
    return out


def _to_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _typed(section, key: str, cast, default):
    if key not in section:
        return default
    raw = section[key]
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} = {raw!r}: expected {cast.__name__}") from None


_SIM_KEYS = {"n": int, "N": int, "model": str, "replications": int, "K": int,
             "fast_mode": _to_bool, "alpha": float, "target": str, "nuisance": str,
             "mc_n": int, "seed": int}
_DGP_KEYS = {"alpha_signal": float, "zeta": float, "family": str, "p": int}
_LEARNER_KEYS = {"cv_folds": int, "knn_k": int, "tree_depth": int, "eps": float}
_GRID_KEYS = {"panel": str, "n": int, "N": int, "alpha_signal": float, "zeta": float,
              "family": str, "model": str}


def _check_keys(section, allowed):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"[{section.name}] unknown field(s): {', '.join(sorted(unknown))}")


def load_sim_config(path: str | Path) -> tuple[SimConfig, list[GridPoint]]:
    """Parse an INI simulation config.

    Sections ``[sim]``, ``[dgp]`` and ``[learner]`` set the base configuration;
    every ``[grid.NAME]`` section expands the Cartesian product of its
    comma-separated values, filling unset fields from the base.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    known = {"sim", "dgp", "learner"}
    for name in parser.sections():
        if name not in known and not name.startswith("grid."):
            raise ConfigError(f"unknown section [{name}]")
    empty = parser["DEFAULT"]

    sim = parser["sim"] if parser.has_section("sim") else empty
    dgp = parser["dgp"] if parser.has_section("dgp") else empty
    lrn = parser["learner"] if parser.has_section("learner") else empty
    for sec, allowed in ((sim, _SIM_KEYS), (dgp, {**_DGP_KEYS, "xi": str, "eta": str}),
                         (lrn, {**_LEARNER_KEYS, "learners": str})):
        if sec is not empty:
            _check_keys(sec, allowed)

    spec_kw = {k: _typed(dgp, k, c, None) for k, c in _DGP_KEYS.items()}
    for vec in ("xi", "eta"):
        if vec in dgp:
            spec_kw[vec] = tuple(_parse_list(dgp[vec], float, f"[dgp] {vec}"))
    spec_kw = {k: v for k, v in spec_kw.items() if v is not None}
    learner_kw = {k: _typed(lrn, k, c, None) for k, c in _LEARNER_KEYS.items()}
    if "learners" in lrn:
        learner_kw["learners"] = tuple(_parse_list(lrn["learners"], str, "[learner] learners"))
    learner_kw = {k: v for k, v in learner_kw.items() if v is not None}
    sim_kw = {k: _typed(sim, k, c, None) for k, c in _SIM_KEYS.items()}
    sim_kw = {k: v for k, v in sim_kw.items() if v is not None}
    sim_kw.pop("seed", None)
    try:
        base = SimConfig(spec=DgpSpec(**spec_kw), learner=LearnerConfig(**learner_kw), **sim_kw)
    except (InvalidSpec, ValidationError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None

    points = []
    for name in parser.sections():
        if not name.startswith("grid."):
            continue
        sec = parser[name]
        _check_keys(sec, _GRID_KEYS)
        axes = {}
        for key, cast in _GRID_KEYS.items():
            if key in sec:
                axes[key] = _parse_list(sec[key], cast, f"[{name}] {key}")
        panel = axes.pop("panel", [name[len("grid."):]])
        if len(panel) != 1:
            raise ConfigError(f"[{name}] panel must be a single value")
        defaults = {"n": base.n, "N": base.N, "alpha_signal": base.spec.alpha_signal,
                    "zeta": base.spec.zeta, "family": base.spec.family, "model": base.model}
        keys = list(defaults)
        values = [axes.get(k, [defaults[k]]) for k in keys]
        for combo in itertools.product(*values):
            points.append(GridPoint(panel=panel[0], **dict(zip(keys, combo))))
    if not points:
        points.append(GridPoint(panel="all", n=base.n, N=base.N,
                                alpha_signal=base.spec.alpha_signal, zeta=base.spec.zeta,
                                family=base.spec.family, model=base.model))
    for gp in points:
        try:
            gp.config(base)
        except (InvalidSpec, ValidationError) as exc:
            raise ConfigError(f"grid point {gp}: {exc}") from None
    return base, points


def cmd_simulate(args) -> int:
    base, points = load_sim_config(args.config)
    over = {"seed": args.seed, "n_jobs": max(1, args.threads)}
    if args.reps is not None:
        over["replications"] = args.reps
    if args.fast:
        over["fast_mode"] = True
    try:
        base = replace(base, **over)
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summaries = sweep(points, base, out / "are_table.csv")
    payload = {
        "schema_version": 1,
        "base_config": base.to_dict(),
        "grid": [
            {"point": gp.__dict__, "summary": s.to_dict() if s is not None else None}
            for gp, s in zip(points, summaries)
        ],
    }
    for entry in payload["grid"]:
        if entry["summary"] is not None:
            entry["summary"].pop("config", None)
    _write_json(payload, out / "summary.json")
    invalid = [gp for gp, s in zip(points, summaries) if s is None or not s.valid]
    for gp, s in zip(points, summaries):
        if s is None:
            print(f"{gp.panel}: n={gp.n} N={gp.N} alpha={gp.alpha_signal} zeta={gp.zeta}  FAILED")
            continue
        flag = "" if s.valid else "  INVALID"
        if s.low_replication:
            flag += "  low-replication"
        ares = " ".join(f"{c}={a:.3g}" for c, a in zip(s.coord_names, s.are))
        print(f"{gp.panel}: n={gp.n} N={gp.N} alpha={gp.alpha_signal} zeta={gp.zeta}  "
              f"ARE {ares}{flag}")
    return EXIT_SOLVER if invalid else EXIT_OK


# --------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    spec = DgpSpec(alpha_signal=args.alpha_signal, zeta=args.zeta, family=args.family)
    model = ScoreModel.from_name(args.estimand, spec.p)
    ob, path, hit = cached_bounds(spec, model, args.mc_n, args.seed, args.target)
    log.info("oracle %s (%s)", path, "cache hit" if hit else "computed")
    payload = ob.to_dict()
    payload["schema_version"] = 1
    _write_json(payload, args.out)
    print(f"beta0 {np.array2string(ob.beta0, precision=6)}")
    print(f"trace(gain) {np.trace(ob.gain):.6g}  max gain MC SE {ob.mc_se:.3g}  "
          f"routes agree: {ob.consistent()}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report


REPORT_REQUIRED = ("are", "coord", "n", "N", "alpha_signal", "zeta")


def split_panels(rows: list[dict]) -> dict[str, list[dict]]:
    """Rows tagged with a panel go to that panel; rows tagged ``all`` (or
    untagged) go to every panel."""
    out = {p: [] for p in PANELS}
    for row in rows:
        tag = row.get("panel") or "all"
        if tag == "all":
            for p in PANELS:
                out[p].append(row)
        elif tag in PANELS:
            out[tag].append(row)
        else:
            raise ValidationError(f"unknown panel {tag!r}; expected one of "
                                  f"{', '.join(PANELS)} or 'all'")
    return out


def cmd_report(args) -> int:
    path = Path(args.inp)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    missing = [c for c in REPORT_REQUIRED if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    for i, row in enumerate(rows, start=2):
        for col in ("are", "n", "N", "alpha_signal", "zeta"):
            try:
                float(row[col])
            except (TypeError, ValueError):
                raise ValidationError(f"{path} line {i}: {col} = {row[col]!r} is not numeric") from None
    panels = split_panels(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = [c for c in ("mse_with", "mse_without", "coverage_with", "coverage_without",
                         "width_ratio", "family", "model") if c in header]
    for name, axis in PANELS.items():
        sel = sorted(panels[name], key=lambda r: (r["coord"], float(r[axis])))
        cols = [axis, "coord", "are"] + extra + [c for c in ("n", "N", "alpha_signal", "zeta")
                                                  if c != axis]
        with (out / f"are_vs_{name}.csv").open("w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            wr.writeheader()
            wr.writerows(sel)
        print(f"are_vs_{name}.csv: {len(sel)} rows")
    return EXIT_OK


# --------------------------------------------------------------------------


def _write_json(payload: dict, path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="acpshift",
        description="Efficient estimation with automated computational phenotypes "
                    "under covariate shift.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("estimate", help="estimate a parameter from a CSV", formatter_class=fmt)
    p.add_argument("--data", required=True, help="CSV with columns r, y, x1..xp[, yhat]")
    p.add_argument("--estimand", required=True, choices=["mean", "linear", "logistic"])
    p.add_argument("--variant", default="with-acp", choices=[v.value for v in Variant])
    p.add_argument("--k", type=int, default=5, help="cross-fitting folds")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="perturbation bootstrap replicates (0 = off)")
    p.add_argument("--fast", action="store_true", help="GLM-only nuisance learners")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="estimate.json", help="JSON result path ('-' = stdout)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a replication sweep", formatter_class=fmt)
    p.add_argument("--config", required=True, help="INI file with [sim], [dgp], "
                   "[learner] and [grid.NAME] sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--reps", type=int, default=None, help="override replications")
    p.add_argument("--fast", action="store_true", help="force GLM-only nuisances")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="Monte Carlo efficiency bounds", formatter_class=fmt)
    p.add_argument("--alpha-signal", type=float, default=5.0)
    p.add_argument("--zeta", type=float, default=0.0)
    p.add_argument("--family", default="linear", choices=["linear", "logistic"])
    p.add_argument("--estimand", default="mean", choices=["mean", "linear", "logistic"])
    p.add_argument("--target", default="beta", choices=["beta", "theta"])
    p.add_argument("--mc-n", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="oracle.json", help="JSON path ('-' = stdout)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="split a sweep table into per-panel CSVs",
                       formatter_class=fmt)
    p.add_argument("--in", dest="inp", required=True, help="are_table.csv from simulate")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ACPError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
