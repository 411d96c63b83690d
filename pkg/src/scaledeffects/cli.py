"""Command-line interface: ``scaledeffects {estimate,test,simulate}``.

Exit codes: 0 success, 1 data/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .estimate import (
    WeightFunction,
    bootstrap_covariance,
    estimate_effect_modification,
    estimate_quantile_effect,
    estimate_scaled_effects,
    estimate_weighted_summary,
)
from .model import Dataset, DegenerateVarianceError, ValidationError, validate
from .nuisance import ModelSpec, NuisanceConfig
from .sim import SimScenario, run_replications
from .testing import homogeneity_test, pairwise_tests

log = logging.getLogger("scaledeffects")

ESTIMANDS = ("scaled-mean", "quantile", "effect-mod", "weighted-summary")


class ConfigError(ValueError):
    """Bad configuration or unreadable input."""


@dataclass
class AnalysisConfig:
    input: str = ""
    treatment: str = ""
    outcomes: list[str] = field(default_factory=list)
    features: list[str] | None = None
    propensity_features: list[str] | None = None
    mean_features: list[str] | None = None
    eta_features: list[str] | None = None
    quadratic_eta: bool = False
    stratum: str | None = None
    weights: str | None = None
    alpha: float = 0.05
    clip: float = 0.01
    folds: int | None = None
    bootstrap: int | None = None
    seed: int = 0
    estimand: str = "scaled-mean"
    correction: str = "bonferroni"
    quantile_inference: str = "bootstrap"
    output: str | None = None

    def check(self) -> None:
        if not self.input:
            raise ConfigError("--input is required")
        if not self.treatment:
            raise ConfigError("--treatment is required")
        if not self.outcomes:
            raise ConfigError("--outcomes is required")
        if self.estimand not in ESTIMANDS:
            raise ConfigError(f"--estimand must be one of {ESTIMANDS}")
        if self.estimand in ("effect-mod", "weighted-summary") and not self.stratum:
            raise ConfigError(f"estimand {self.estimand} needs --stratum")
        if self.treatment in self.outcomes:
            raise ConfigError("treatment column is also listed as an outcome")
        if len(set(self.outcomes)) != len(self.outcomes):
            raise ConfigError("outcome columns must be distinct")
        for block in (self.features, self.propensity_features, self.mean_features, self.eta_features):
            for name in block or ():
                if name == self.treatment or name in self.outcomes:
                    raise ConfigError(f"column {name!r} cannot be both a feature and treatment/outcome")
        if not 0 < self.alpha < 1:
            raise ConfigError("--alpha must lie in (0, 1)")
        if not 0 <= self.clip < 0.5:
            raise ConfigError("--clip must lie in [0, 0.5)")


# ---------------------------------------------------------------------------
# CSV


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise ConfigError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return value


def read_table(path: str) -> tuple[list[str], np.ndarray]:
    """Header plus an all-numeric body. Rows are numbered from 1 after the header."""
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        if len(set(header)) != len(header):
            raise ConfigError("duplicate column names in header")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ConfigError(f"row {i} has {len(rec)} fields, header has {len(header)}")
            rows.append([_parse_cell(t, i, c) for t, c in zip(rec, header)])
    body = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, body


def read_csv(path: str, config: AnalysisConfig) -> Dataset:
    """Load the columns named in ``config`` into a :class:`Dataset`.

    Covariates are the union of every feature list and the stratum column
    (default: all columns other than treatment and outcomes).
    """
    header, body = read_table(path)
    col = {name: j for j, name in enumerate(header)}
    missing = [c for c in [config.treatment, *config.outcomes] if c not in col]
    covs = covariate_columns(config, header)
    missing += [c for c in covs if c not in col]
    if missing:
        raise ConfigError(f"columns not found in {path}: {', '.join(missing)}")
    return Dataset(
        body[:, [col[c] for c in covs]] if covs else np.empty((body.shape[0], 0)),
        body[:, col[config.treatment]],
        body[:, [col[c] for c in config.outcomes]],
        covs,
        config.outcomes,
    )


def covariate_columns(config: AnalysisConfig, header: Sequence[str]) -> list[str]:
    used = {config.treatment, *config.outcomes}
    lists = [config.features, config.propensity_features, config.mean_features, config.eta_features]
    if all(x is None for x in lists):
        covs = [h for h in header if h not in used]
    else:
        covs = []
        for block in lists:
            for name in block or ():
                if name not in covs:
                    covs.append(name)
    if config.stratum and config.stratum not in covs:
        covs.append(config.stratum)
    return covs


def write_csv(path: str, dataset: Dataset, treatment_name: str = "a") -> None:
    """Write a dataset so that :func:`read_csv` reproduces it exactly."""
    header = [*dataset.covariate_names, treatment_name, *dataset.outcome_names]
    body = np.column_stack([dataset.covariates, dataset.treatment, dataset.outcomes])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in body:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# model specs and weights


def _quadratic_expand(dataset: Dataset, names: Sequence[str]) -> tuple[Dataset, list[str]]:
    x = dataset.columns(names)
    cols, new = [], []
    for i, a in enumerate(names):
        cols.append(x[:, i] ** 2)
        new.append(f"{a}^2")
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            cols.append(x[:, i] * x[:, j])
            new.append(f"{names[i]}*{names[j]}")
    if not cols:
        return dataset, list(names)
    ds = Dataset(
        np.column_stack([dataset.covariates, *cols]),
        dataset.treatment,
        dataset.outcomes,
        dataset.covariate_names + tuple(new),
        dataset.outcome_names,
    )
    return ds, [*names, *new]


def build_model(dataset: Dataset, config: AnalysisConfig) -> tuple[Dataset, NuisanceConfig]:
    base = [c for c in dataset.covariate_names if c != config.stratum] if config.features is None else config.features
    ps = config.propensity_features if config.propensity_features is not None else base
    mean = config.mean_features if config.mean_features is not None else base
    eta = config.eta_features if config.eta_features is not None else mean
    if config.quadratic_eta:
        dataset, eta = _quadratic_expand(dataset, list(eta))
    specs = (
        ModelSpec("propensity", tuple(ps)),
        ModelSpec("mean", tuple(mean)),
        ModelSpec("second_moment", tuple(eta)),
        ModelSpec("cdf", tuple(mean)),
    )
    return dataset, NuisanceConfig(specs, clip=config.clip, folds=config.folds, seed=config.seed)


def parse_weights(spec: str | None, outcome_names: Sequence[str]) -> WeightFunction:
    """Weights from a CSV file (outcome,stratum,weight) or inline ``y1@1=0.5,y2@2=1``.

    Pairs not listed get weight 0. No spec means every weight is 1.
    """
    if not spec:
        return WeightFunction.uniform(1.0)
    entries: list[tuple[str, str, str]] = []
    if os.path.exists(spec):
        with open(spec, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and [c.strip().lower() for c in rows[0]] == ["outcome", "stratum", "weight"]:
            rows = rows[1:]
        for i, r in enumerate(rows, start=1):
            if len(r) != 3:
                raise ConfigError(f"weights row {i} must have 3 fields")
            entries.append((r[0].strip(), r[1].strip(), r[2].strip()))
    else:
        for item in spec.split(","):
            try:
                key, w = item.split("=")
                name, v = key.split("@")
            except ValueError:
                raise ConfigError(f"cannot parse weight entry {item!r}; expected outcome@stratum=weight") from None
            entries.append((name.strip(), v.strip(), w.strip()))
    table = {}
    for name, v, w in entries:
        if name not in outcome_names:
            raise ConfigError(f"weights reference unknown outcome {name!r}")
        table[(name, _parse_cell(v, 0, "stratum"))] = _parse_cell(w, 0, "weight")
    try:
        return WeightFunction(table, 0.0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _report_skeleton(config_echo: dict) -> dict:
    return {
        "config": config_echo,
        "estimates": None,
        "covariance": None,
        "tests": None,
        "simulation": None,
        "diagnostics": {"n": None, "covariance_source": None, "pseudo_inverse": None, "excluded_replicates": None},
    }


def _effect_rows(names, est, se, lo, hi, stratum=None):
    rows = []
    for i, name in enumerate(names):
        rows.append(
            {
                "outcome": name,
                "stratum": stratum,
                "estimate": _num(est[i]),
                "se": _num(se[i]),
                "ci_low": _num(lo[i]),
                "ci_high": _num(hi[i]),
            }
        )
    return rows


def _load(config: AnalysisConfig):
    config.check()
    ds = validate(read_csv(config.input, config))
    ds, model = build_model(ds, config)
    return ds, model


def cmd_estimate(config: AnalysisConfig) -> dict:
    ds, model = _load(config)
    report = _report_skeleton(asdict(config))
    report["diagnostics"]["n"] = ds.n
    if config.estimand == "scaled-mean":
        table = estimate_scaled_effects(ds, model.fit(ds), config.alpha)
        cov = table.covariance
        source = "closed-form"
        se = table.std_errors
        if config.bootstrap:
            cov = bootstrap_covariance(ds, "scaled-mean", config.bootstrap, config.seed, config=model)
            se = np.sqrt(np.diag(cov) / ds.n)
            source = "bootstrap"
        z = table.ci_upper[0] - table.estimates[0]
        z = z / table.std_errors[0] if table.std_errors[0] > 0 else 0.0
        report["estimates"] = _effect_rows(ds.outcome_names, table.estimates, se, table.estimates - z * se, table.estimates + z * se)
        report["covariance"] = cov.tolist()
        report["diagnostics"]["covariance_source"] = source
    elif config.estimand == "quantile":
        fits = model.fit(ds, cdf=True)
        rows = []
        for k in range(ds.K):
            q = estimate_quantile_effect(
                ds, fits, k, config.alpha, config.bootstrap or 1000, model, config.seed, config.quantile_inference
            )
            rows += _effect_rows([q.outcome], [q.estimate], [q.std_error], [q.ci_lower], [q.ci_upper])
        report["estimates"] = rows
        report["diagnostics"]["covariance_source"] = config.quantile_inference
    elif config.estimand == "effect-mod":
        mod = estimate_effect_modification(ds, model.fit(ds), config.stratum, config.alpha)
        rows = []
        for v, t in zip(mod.strata, mod.tables):
            rows += _effect_rows(t.names, t.estimates, t.std_errors, t.ci_lower, t.ci_upper, stratum=v)
        report["estimates"] = rows
        report["covariance"] = {str(v): t.covariance.tolist() for v, t in zip(mod.strata, mod.tables)}
        report["diagnostics"]["covariance_source"] = "closed-form"
    else:
        weights = parse_weights(config.weights, ds.outcome_names)
        s = estimate_weighted_summary(ds, model.fit(ds), config.stratum, weights, config.alpha)
        report["estimates"] = _effect_rows(["weighted-summary"], [s.estimate], [s.std_error], [s.ci_lower], [s.ci_upper])
        report["covariance"] = [[s.std_error**2 * ds.n]]
        report["diagnostics"]["covariance_source"] = "closed-form"
    return report


def cmd_test(config: AnalysisConfig) -> dict:
    ds, model = _load(config)
    if ds.K < 2:
        raise ConfigError("the homogeneity test needs at least 2 outcomes")
    report = _report_skeleton(asdict(config))
    report["diagnostics"]["n"] = ds.n
    table = estimate_scaled_effects(ds, model.fit(ds), config.alpha)
    cov, source = table.covariance, "closed-form"
    if config.bootstrap:
        cov = bootstrap_covariance(ds, "scaled-mean", config.bootstrap, config.seed, config=model)
        source = "bootstrap"
    se = np.sqrt(np.diag(cov) / ds.n)
    z = (table.ci_upper - table.estimates) / np.where(table.std_errors > 0, table.std_errors, 1.0)
    report["estimates"] = _effect_rows(ds.outcome_names, table.estimates, se, table.estimates - z * se, table.estimates + z * se)
    report["covariance"] = cov.tolist()
    result = homogeneity_test(table.estimates, cov, ds.n, covariance_source=source)
    pw = pairwise_tests(table.estimates, cov, ds.n, config.correction, config.alpha)
    report["tests"] = {
        "homogeneity": {
            "statistic": result.statistic,
            "df": result.df,
            "p_value": result.p_value,
            "covariance_source": source,
            "pseudo_inverse": result.pseudo_inverse,
        },
        "pairwise": [
            {
                "outcome_1": ds.outcome_names[j],
                "outcome_2": ds.outcome_names[k],
                "statistic": float(pw.statistics[i]),
                "p_value": float(pw.p_values[i]),
                "adjusted_p_value": float(pw.adjusted[i]),
                "reject": bool(pw.reject[i]),
            }
            for i, (j, k) in enumerate(pw.pairs)
        ],
        "correction": pw.correction,
    }
    report["diagnostics"]["covariance_source"] = source
    report["diagnostics"]["pseudo_inverse"] = result.pseudo_inverse
    return report


def cmd_simulate(scenario: SimScenario, workers: int = 1) -> dict:
    summary = run_replications(scenario, workers=workers)
    report = _report_skeleton(asdict(scenario))
    report["simulation"] = summary.as_dict()
    report["diagnostics"]["n"] = scenario.n
    report["diagnostics"]["excluded_replicates"] = summary.n_failed
    report["diagnostics"]["covariance_source"] = "closed-form"
    return report


# ---------------------------------------------------------------------------
# rendering


def _g(x) -> str:
    return "NA" if x is None else f"{x:.6g}"


def render(report: dict) -> str:
    """Aligned human-readable table(s) for a report."""
    lines = []
    if report["estimates"]:
        head = ("outcome", "stratum", "estimate", "se", "ci_low", "ci_high")
        body = [
            (r["outcome"], "" if r["stratum"] is None else _g(r["stratum"]),
             _g(r["estimate"]), _g(r["se"]), _g(r["ci_low"]), _g(r["ci_high"]))
            for r in report["estimates"]
        ]
        lines += _align(head, body)
    tests = report["tests"]
    if tests:
        h = tests["homogeneity"]
        flag = "  [pseudo-inverse]" if h["pseudo_inverse"] else ""
        lines.append("")
        lines.append(
            f"homogeneity: T_n = {_g(h['statistic'])}, df = {h['df']}, p = {_g(h['p_value'])} "
            f"({h['covariance_source']}){flag}"
        )
        lines.append(f"pairwise ({tests['correction']}):")
        body = [
            (p["outcome_1"], p["outcome_2"], _g(p["statistic"]), _g(p["p_value"]),
             _g(p["adjusted_p_value"]), "yes" if p["reject"] else "no")
            for p in tests["pairwise"]
        ]
        lines += _align(("outcome_1", "outcome_2", "statistic", "p", "adjusted_p", "reject"), body)
    sim = report["simulation"]
    if sim:
        head = ("outcome", "truth", "bias", "sd", "median_se", "rmse", "coverage")
        body = [
            (f"psi{k + 1}", _g(sim["truth"][k]), _g(sim["bias"][k]), _g(sim["sd"][k]),
             _g(sim["median_se"][k]), _g(sim["rmse"][k]), _g(sim["coverage"][k]))
            for k in range(len(sim["bias"]))
        ]
        lines += _align(head, body)
        lines.append("")
        lines.append(f"rejection rate: {_g(sim['rejection_rate'])}")
        lines.append(f"replicates used: {sim['n_ok']}, excluded: {sim['n_failed']}")
    return "\n".join(lines)


def _align(head, body) -> list[str]:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return [fmt.format(*head)] + [fmt.format(*row) for row in body]


# ---------------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _analysis_parser(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="JSON file with the same keys as the flags")
    p.add_argument("--input")
    p.add_argument("--treatment")
    p.add_argument("--outcomes", type=_csv_list)
    p.add_argument("--features", type=_csv_list)
    p.add_argument("--quadratic-eta", action="store_true", default=None)
    p.add_argument("--stratum")
    p.add_argument("--weights", help="CSV file (outcome,stratum,weight) or inline outcome@stratum=w,...")
    p.add_argument("--alpha", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--estimand", choices=ESTIMANDS)
    p.add_argument("--correction", choices=("bonferroni", "bh"))
    p.add_argument("--quantile-inference", choices=("bootstrap", "closed-form"))
    p.add_argument("--output", help="write the structured JSON report here")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaledeffects", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _analysis_parser(sub, "estimate", "estimate scaled effects")
    _analysis_parser(sub, "test", "test homogeneity of scaled effects")
    s = sub.add_parser("simulate", help="run the simulation study")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--n-sim", type=int, default=1000)
    s.add_argument("--lam", type=float, default=2.0)
    s.add_argument("--correct", choices=("both", "trt", "out", "none"), default="both")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip", type=float, default=0.01)
    s.add_argument("--eta-linear-terms", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--output")
    return parser


def config_from_args(args: argparse.Namespace) -> AnalysisConfig:
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        known = {f.name for f in fields(AnalysisConfig)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("outcomes", "features", "propensity_features", "mean_features", "eta_features"):
            if isinstance(values.get(key), str):
                values[key] = _csv_list(values[key])
    for f in fields(AnalysisConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return AnalysisConfig(**values)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        if args.command == "simulate":
            scenario = SimScenario(
                args.n, args.n_sim, args.lam, args.correct, args.seed, args.clip, 0.05, args.eta_linear_terms
            )
            report = cmd_simulate(scenario, args.workers)
            output = args.output
        else:
            config = config_from_args(args)
            report = cmd_estimate(config) if args.command == "estimate" else cmd_test(config)
            output = config.output
    except (ConfigError, ValidationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DegenerateVarianceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    text = json.dumps(report, indent=2, sort_keys=True)
    if output:
        with open(output, "w") as fh:
            fh.write(text + "\n")
    print(render(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
