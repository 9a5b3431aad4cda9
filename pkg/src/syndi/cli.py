"""Command-line front end: fit, simulate, and predict workflows.

Exit codes: 0 success, 1 validation problem, 2 numerical failure, 3 external
predictor failure. Errors land on stderr as one JSON object. Outputs embed
the run configuration and a version string; with a fixed seed they are
byte-identical regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import __version__
from .datamodel import (
    INTERNAL_POP,
    CoefficientModel,
    ExternalModelSpec,
    TargetModelSpec,
    load_dataset,
    load_schema,
)
from .errors import (
    NumericalError,
    ParseError,
    PredictorError,
    SyndiError,
    ValidationError,
)
from .estimate import PipelineConfig, run_comparison, run_syndi, run_syndi_with_bootstrap
from .parallel import default_threads
from .simulate import HarnessConfig, METHODS, get_scenario, run_replicates
from .synth import SubprocessPredictor

_VERSION_STRING: str | None = None


def version_string() -> str:
    global _VERSION_STRING
    if _VERSION_STRING is None:
        _VERSION_STRING = __version__
        try:
            head = subprocess.run(
                ["git", "-C", str(Path(__file__).resolve().parent), "rev-parse", "--short", "HEAD"],
                capture_output=True, text=True, timeout=5,
            )
            if head.returncode == 0 and head.stdout.strip():
                _VERSION_STRING = f"{__version__}+g{head.stdout.strip()}"
        except OSError:
            pass
    return _VERSION_STRING


def _dump_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_external_spec(path) -> ExternalModelSpec:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        pop = raw["population_id"]
        covariates = tuple(raw["covariates"])
        model = raw["model"]
        mtype = model["type"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed external model spec ({exc})") from None
    if mtype == "coefficients":
        payload = CoefficientModel(
            model.get("link", "logit"),
            float(model["intercept"]),
            {k: float(v) for k, v in model["slopes"].items()},
            model.get("sigma"),
        )
    elif mtype == "predictor":
        command = tuple([model["exec"], *model.get("args", [])])
        payload = SubprocessPredictor(command, covariates)
        payload = _predictor_payload(payload)
    else:
        raise ValidationError(f"{path}: unknown external model type {mtype!r}")
    r = raw.get("r")
    return ExternalModelSpec(
        pop, covariates, payload, r=int(r) if r is not None else None,
        study_size=raw.get("study_size"),
    )


def _predictor_payload(predictor: SubprocessPredictor):
    from .datamodel import PredictorModel

    return PredictorModel(predictor, description=" ".join(predictor.command))


def _heterogeneity_spec(selector: str, family: str, specs) -> TargetModelSpec:
    from .datamodel import intercepts_and_slopes, intercepts_only

    if selector == "intercepts":
        return intercepts_only(family, specs)
    if selector == "intercepts+slopes":
        return intercepts_and_slopes(family, specs)
    try:
        explicit = json.loads(selector)
        pattern = {k: tuple(v) for k, v in explicit.items()}
    except (json.JSONDecodeError, AttributeError, TypeError) as exc:
        raise ValidationError(
            f"--heterogeneity must be 'intercepts', 'intercepts+slopes', or a JSON "
            f"object mapping population to slope lists ({exc})"
        ) from None
    pops = tuple(s.population_id for s in specs)
    return TargetModelSpec(family, pops, pattern)


def _run_config(args, r_map) -> dict:
    # execution-only knobs (threads) are deliberately excluded: outputs must
    # not depend on worker count
    return {
        "seed": args.seed,
        "m": args.m,
        "cycles": args.cycles,
        "r": r_map,
        "bootstrap_b": args.bootstrap,
        "strategy": getattr(args, "strategy", "syndi"),
        "heterogeneity": getattr(args, "heterogeneity", None),
        "out": str(getattr(args, "out", "")) or None,
    }


def cmd_fit(args) -> int:
    schema = load_schema(args.schema)
    specs = [load_external_spec(p) for p in args.external]
    if args.r:
        overrides = {}
        for item in args.r:
            pop, _, val = item.partition("=")
            if not val:
                raise ValidationError(f"--r expects POP=INT, got {item!r}")
            overrides[pop] = int(val)
        unknown = set(overrides) - {s.population_id for s in specs}
        if unknown:
            raise ValidationError(f"--r for unknown populations {sorted(unknown)}")
        specs = [
            ExternalModelSpec(
                s.population_id, s.covariates, s.payload,
                r=overrides.get(s.population_id, s.r), study_size=s.study_size,
            )
            for s in specs
        ]
    internal = load_dataset(args.internal, schema, family=args.family)
    target = _heterogeneity_spec(args.heterogeneity, args.family, specs)
    config = PipelineConfig(m=args.m, cycles=args.cycles)
    if args.strategy in ("fcs", "imb"):
        if args.bootstrap > 0:
            raise ValidationError(
                "--bootstrap applies to the syndi strategy; FCS/IMB report "
                "Rubin's-rules variances"
            )
        result = run_comparison(internal, specs, target, args.strategy, config, args.seed)
    elif args.bootstrap > 0:
        result = run_syndi_with_bootstrap(
            internal, specs, target, config, args.seed, args.bootstrap, threads=args.threads
        )
    else:
        result = run_syndi(internal, specs, target, config, args.seed)
    payload = result.to_dict()
    r_map = {s.population_id: s.resolve_r(internal.n_rows) for s in specs}
    payload["run_config"] = _run_config(args, r_map)
    payload["version_string"] = version_string()
    _dump_json(args.out, payload)
    return 0


def cmd_simulate(args) -> int:
    scenario = get_scenario(args.scenario)
    config = HarnessConfig(
        r=args.r_factor, m=args.m, cycles=args.cycles,
        n_internal=args.n_internal, n_test=args.n_test,
        bootstrap_b=args.bootstrap,
    )
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    summary = run_replicates(
        scenario, methods, args.replicates, config, args.seed, threads=args.threads
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = summary.to_dict()
    payload["run_config"] = {
        "seed": args.seed, "m": args.m, "cycles": args.cycles,
        "r": args.r_factor, "bootstrap_b": args.bootstrap,
        "replicates": args.replicates, "scenario": scenario.scenario_id,
    }
    payload["version_string"] = version_string()
    _dump_json(out_dir / "summary.json", payload)
    summary.write_replicates_csv(out_dir / "replicates.csv")
    return 0


def cmd_predict(args) -> int:
    with open(args.fit, encoding="utf-8") as fh:
        fit = json.load(fh)
    try:
        structure = fit["structure"]
        names = fit["names"]
        coefs = {n: fit["coefficients"][n]["est"] for n in names}
        family = fit["family"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{args.fit}: not a fit result ({exc})") from None
    pop = args.population
    populations = structure["populations"]
    if pop != INTERNAL_POP and pop not in populations:
        raise ValidationError(
            f"unknown population {pop!r}; fit covers {[INTERNAL_POP] + populations}"
        )
    cov_names = list(structure["x_names"]) + list(structure["b_names"])
    schema = {n: ("x" if n in structure["x_names"] else "b") for n in cov_names}
    newdata = load_dataset(args.newdata, schema)
    if not newdata.fully_observed():
        raise ValidationError("prediction data must be fully observed")
    eta = np.full(newdata.n_rows, coefs["intercept"])
    if pop != INTERNAL_POP:
        eta += coefs[pop]
    for x in structure["x_names"]:
        slope = coefs[x]
        inter = f"{x}:{pop}"
        if pop != INTERNAL_POP and inter in coefs:
            slope += coefs[inter]
        eta += slope * newdata.column_values(x)
    for b in structure["b_names"]:
        eta += coefs[b] * newdata.column_values(b)
    pred = expit(eta) if family == "binomial" else eta
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("prediction\n")
        for v in pred:
            fh.write(f"{float(v)!r}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syndi",
        description="Fit an expanded GLM that integrates summary-level external models",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="run the full pipeline on an internal CSV")
    p_fit.add_argument("internal", help="internal dataset CSV")
    p_fit.add_argument("schema", help="JSON mapping column name to role y|x|b")
    p_fit.add_argument("external", nargs="*", help="external model spec JSON files")
    p_fit.add_argument("--family", default="binomial", choices=["binomial", "gaussian"])
    p_fit.add_argument("--strategy", default="syndi", choices=["syndi", "fcs", "imb"],
                       help="estimation strategy; fcs/imb are the comparison methods")
    p_fit.add_argument("--heterogeneity", default="intercepts",
                       help="'intercepts', 'intercepts+slopes', or explicit JSON pattern")
    p_fit.add_argument("--seed", type=int, default=20220500)
    p_fit.add_argument("--m", type=int, default=100, help="number of imputations")
    p_fit.add_argument("--cycles", type=int, default=10)
    p_fit.add_argument("--r", action="append", default=[],
                       metavar="POP=INT", help="replication override per population")
    p_fit.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p_fit.add_argument("--threads", type=int, default=None)
    p_fit.add_argument("--out", default="fit.json")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a scenario's replicate harness")
    p_sim.add_argument("scenario", help="simI | simII | simS1 | simS2 | simS3 | simS4a | simS4b")
    p_sim.add_argument("--replicates", type=int, default=100)
    p_sim.add_argument("--r-factor", type=int, default=5, dest="r_factor")
    p_sim.add_argument("--m", type=int, default=20)
    p_sim.add_argument("--cycles", type=int, default=10)
    p_sim.add_argument("--n-internal", type=int, default=200)
    p_sim.add_argument("--n-test", type=int, default=2000)
    p_sim.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p_sim.add_argument("--methods", default=None, help="comma list, default all")
    p_sim.add_argument("--seed", type=int, default=20220500)
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.add_argument("--out", default="sim-output")
    p_sim.set_defaults(func=cmd_simulate)

    p_pred = sub.add_parser("predict", help="predict from a fit.json for one population")
    p_pred.add_argument("fit", help="fit.json produced by the fit command")
    p_pred.add_argument("newdata", help="CSV of covariate columns")
    p_pred.add_argument("--population", default=INTERNAL_POP)
    p_pred.add_argument("--out", default="predictions.csv")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except (ValidationError, ParseError, FileNotFoundError, json.JSONDecodeError) as exc:
        _emit_error(exc, 1)
        return 1
    except PredictorError as exc:
        _emit_error(exc, 3)
        return 3
    except (NumericalError, SyndiError) as exc:
        _emit_error(exc, 2)
        return 2


def _emit_error(exc: Exception, code: int) -> None:
    sys.stderr.write(
        json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})
        + "\n"
    )


if __name__ == "__main__":
    sys.exit(main())
