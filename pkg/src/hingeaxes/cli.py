"""Command-line interface.

Subcommands: fit-subject, fit-map, fit-population, simulate, validate.
Angles cross this boundary in degrees.  Exit codes: 0 success, 2 parse or
file-format error, 3 validation error, 4 fit did not converge, 1 anything
else.  Options may also be given in a ``key = value`` config file via
--config; explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .dataio import Dataset, lag1_autocorrelation, load_dataset, read_config, write_dataset
from .errors import (
    ConvergenceError,
    DataError,
    HingeAxesError,
    ValidationError,
)
from .penalized import PriorSpec, fit_map
from .population import (
    PopulationModel,
    PopulationOptions,
    fit_population,
    flexibility_summary,
    wald_test,
)
from .simulate import SimConfig, run_study, simulate_dataset
from .subject import FitOptions, fit_subject, fit_subject_reduced, residual_angles
from .validation import orthonormality_defect

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_CONVERGENCE = 4


def _use_color() -> bool:
    return os.environ.get("NO_COLOR") is None and sys.stdout.isatty()


def _mark(ok: bool) -> str:
    text = "ok" if ok else "FAIL"
    if not _use_color():
        return text
    return f"\x1b[32m{text}\x1b[0m" if ok else f"\x1b[31m{text}\x1b[0m"


def _angle_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _load(args) -> Dataset:
    data = load_dataset(args.data)
    step = getattr(args, "subsample", 1) or 1
    if step > 1:
        data = data.subsample(step)
    return data


def _pick_subject(data: Dataset, subject_id: Optional[str]) -> int:
    if subject_id is None:
        if data.n_subjects > 1:
            print(
                f"note: {data.n_subjects} subjects in file, using "
                f"{data.subject_ids[0]!r} (pick one with --subject)"
            )
        return 0
    if subject_id not in data.subject_ids:
        raise ValidationError(
            f"subject {subject_id!r} not in file; have {data.subject_ids}"
        )
    return data.subject_ids.index(subject_id)


def _autocorr_note(rotations, angles) -> Optional[str]:
    rho = lag1_autocorrelation(residual_angles(rotations, angles))
    if math.isnan(rho):
        return None
    note = f"lag-1 autocorrelation of offset angles: {rho:+.3f}"
    if rho > 0.2:
        note += "  (serial correlation suspected; consider --subsample)"
    return note


def _angles_payload(result) -> dict:
    names = ["t1", "t2", "s1", "s2", "gamma0"]
    deg = result.angles.to_degrees()
    return {
        "angles_deg": dict(zip(names, deg.tolist())),
        "residual_sd_deg": math.degrees(result.residual_sd),
        "converged": bool(result.converged),
        "n_iter": int(result.n_iter),
        "n_frames": int(result.n_frames),
    }


def cmd_fit_subject(args) -> int:
    data = _load(args)
    idx = _pick_subject(data, args.subject)
    rotations = data.subjects[idx]
    init = np.radians(args.init_deg) if args.init_deg else None
    options = FitOptions(grid_search=args.grid_search)
    fitter = fit_subject if args.model == "full" else fit_subject_reduced
    result = fitter(rotations, init=init, options=options)
    print(f"subject {data.subject_ids[idx]!r}")
    print(result.summary())
    note = _autocorr_note(rotations, result.angles)
    if note:
        print(note)
    if args.json:
        payload = {
            "command": "fit-subject",
            "version": __version__,
            "subject_id": data.subject_ids[idx],
            "model": args.model,
            **_angles_payload(result),
            "se_deg": np.degrees(result.se).tolist(),
            "condition_number": result.condition_number,
        }
        _write_json(args.json, payload)
    return EXIT_OK if result.converged else EXIT_CONVERGENCE


def cmd_fit_map(args) -> int:
    data = _load(args)
    idx = _pick_subject(data, args.subject)
    rotations = data.subjects[idx]
    base = PriorSpec.default(args.residual_sd_deg)
    mean = np.radians(args.prior_mean_deg) if args.prior_mean_deg else base.beta0
    sds = (
        np.radians(args.prior_sd_deg)
        if args.prior_sd_deg
        else np.sqrt(np.diag(base.sigma0))
    )
    prior = PriorSpec.from_moments(mean, sds, base.kappa)
    result = fit_map(rotations, prior)
    names = ["t1", "t2", "s1", "s2", "gamma0"]
    print(f"subject {data.subject_ids[idx]!r}, posterior-mode fit")
    for name, est, se in zip(
        names, result.angles.to_degrees(), np.degrees(result.se)
    ):
        print(f"  {name:>6} = {est:8.3f} deg (posterior sd {se:6.3f})")
    print(f"  residual sd = {math.degrees(result.residual_sd):.4f} deg")
    note = _autocorr_note(rotations, result.angles)
    if note:
        print(note)
    if args.json:
        payload = {
            "command": "fit-map",
            "version": __version__,
            "subject_id": data.subject_ids[idx],
            **_angles_payload(result),
            "posterior_sd_deg": np.degrees(result.se).tolist(),
            "prior_mean_deg": np.degrees(prior.beta0).tolist(),
            "prior_sd_deg": np.degrees(np.sqrt(np.diag(prior.sigma0))).tolist(),
        }
        _write_json(args.json, payload)
    return EXIT_OK if result.converged else EXIT_CONVERGENCE


def cmd_fit_population(args) -> int:
    data = _load(args)
    design = args.design
    if design.startswith("two-sample-"):
        # sugar: two-sample-s1, two-sample-s2, two-sample-s1-s2
        contrasts = tuple(design[len("two-sample-"):].split("-"))
        if args.contrasts != "s1,s2" and set(args.contrasts.split(",")) != set(contrasts):
            raise ValidationError(
                f"--contrasts {args.contrasts!r} conflicts with --design "
                f"{design}, which fixes the contrast set"
            )
        design = "two-sample"
    elif design == "two-sample":
        contrasts = tuple(args.contrasts.split(","))
    else:
        contrasts = ("s1", "s2")
    model = PopulationModel(design=design, contrasts=contrasts)
    options = PopulationOptions(algorithm=args.algorithm, max_outer=args.max_outer)
    fit = fit_population(
        data.subjects, groups=data.groups, model=model, options=options
    )
    print(fit.summary())
    for message in fit.messages:
        print(f"note: {message}")
    tests = []
    if args.test:
        for param in args.test:
            result = wald_test(fit, param)
            print(result)
            tests.append(result)
    flex = None
    if args.flexibility:
        mean, se, _ = flexibility_summary(fit.subject_angles)
        flex = (mean, se)
        print(
            f"flexibility statistic: mean {math.degrees(mean):+.3f} deg "
            f"(se {math.degrees(se):.3f}) over {fit.n_subjects} subjects"
        )
    if args.json:
        payload = {
            "command": "fit-population",
            "version": __version__,
            "algorithm": fit.algorithm,
            "design": model.design,
            "param_names": list(fit.param_names),
            "fixed_deg": np.degrees(fit.fixed).tolist(),
            "se_deg": np.degrees(fit.se_fixed).tolist(),
            "sigma0_deg": np.degrees(fit.sigma0).tolist(),
            "residual_sd_deg": math.degrees(fit.residual_sd),
            "loglik": fit.loglik,
            "converged": bool(fit.converged),
            "n_outer": int(fit.n_outer),
            "boundary": fit.boundary.tolist(),
            "excluded_subjects": fit.excluded,
            "subject_angles_deg": [
                a.to_degrees().tolist() for a in fit.subject_angles
            ],
            "wald_tests": [
                {
                    "param": t.param,
                    "estimate_deg": math.degrees(t.estimate),
                    "se_deg": math.degrees(t.se),
                    "z": t.z,
                    "p_value": t.p_value,
                }
                for t in tests
            ],
        }
        if flex is not None:
            payload["flexibility_mean_deg"] = math.degrees(flex[0])
            payload["flexibility_se_deg"] = math.degrees(flex[1])
        _write_json(args.json, payload)
    return EXIT_OK if fit.converged else EXIT_CONVERGENCE


def cmd_simulate(args) -> int:
    group_effects = None
    if args.group_effect:
        group_effects = {}
        for item in args.group_effect:
            if "=" not in item:
                raise ValidationError(
                    f"--group-effect needs name=degrees, got {item!r}"
                )
            name, value = item.split("=", 1)
            try:
                group_effects[name.strip()] = float(value)
            except ValueError:
                raise ValidationError(f"bad group effect value in {item!r}")
    if args.replicates < 0 or (args.replicates == 0 and not args.dataset_out):
        raise ValidationError(
            "need replicates >= 1 unless only writing --dataset-out"
        )
    config = SimConfig(
        n_subjects=args.subjects,
        n_frames=args.frames,
        # 0 means "write the dataset and stop"; keep the config valid
        replicates=max(args.replicates, 1),
        beta_mean_deg=tuple(args.mean_deg),
        sigma0_deg=tuple(args.sd_deg),
        error_sd_deg=args.error_sd_deg,
        group_effects_deg=group_effects,
        algorithm=args.algorithm,
        seed=args.seed,
        n_jobs=args.jobs,
    )
    if args.dataset_out:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        subjects, groups, _ = simulate_dataset(config, rng)
        ids = [f"sim{i:03d}" for i in range(len(subjects))]
        write_dataset(
            args.dataset_out,
            Dataset(subjects, ids, groups if group_effects else None),
        )
        print(f"wrote synthetic dataset to {args.dataset_out}")
        if args.replicates == 0:
            return EXIT_OK
    report = run_study(config)
    print(report.summary())
    if args.json:
        _write_json(args.json, {"command": "simulate", "version": __version__,
                                **report.to_dict()})
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        raw = load_dataset(args.data, validate=False)
    except (DataError, ValidationError):
        raise
    all_ok = True
    print(f"{args.data}: {raw.n_subjects} subjects")
    for sid, rot in zip(raw.subject_ids, raw.subjects):
        defects = orthonormality_defect(rot)
        dets = np.linalg.det(rot)
        worst = float(defects.max())
        ok = worst <= 1e-6 and bool(np.all(dets > 0.5))
        all_ok = all_ok and ok
        repaired = int(np.sum(defects > 1e-12))
        group = ""
        if raw.groups is not None:
            group = f", group {raw.groups[raw.subject_ids.index(sid)]}"
        print(
            f"  [{_mark(ok)}] {sid!r}: {rot.shape[0]} frames{group}, "
            f"worst orthonormality defect {worst:.2e}"
            + (f", {repaired} frames need re-orthonormalization" if repaired else "")
        )
    if not all_ok:
        raise ValidationError("dataset contains invalid rotation matrices")
    print(f"[{_mark(True)}] dataset is valid")
    return EXIT_OK


def _add_common(parser, with_subsample=True):
    parser.add_argument("--config", help="key = value file with option defaults")
    parser.add_argument("--json", help="write results to this JSON file")
    if with_subsample:
        parser.add_argument(
            "--subsample", type=int, default=1, metavar="N",
            help="keep every N-th frame",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hingeaxes",
        description="Estimate the two rotation axes of a hinge-pair joint "
        "from rotation-matrix sequences.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    p = sub.add_parser("fit-subject", help="maximum-likelihood fit, one subject")
    p.add_argument("data", help="CSV file (matrix or Cardan layout)")
    p.add_argument("--subject", help="subject id to fit (default: first)")
    p.add_argument("--model", choices=["full", "reduced"], default="full")
    p.add_argument("--init-deg", type=_angle_list, metavar="T1,T2,S1,S2,G0")
    p.add_argument("--grid-search", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_fit_subject)
    registry["fit-subject"] = p

    p = sub.add_parser("fit-map", help="posterior-mode fit under a prior")
    p.add_argument("data")
    p.add_argument("--subject")
    p.add_argument("--prior-mean-deg", type=_angle_list, metavar="T1,T2,S1,S2,G0")
    p.add_argument("--prior-sd-deg", type=_angle_list, metavar="SD1,..,SD5")
    p.add_argument(
        "--residual-sd-deg", type=float, default=1.0,
        help="per-frame error sd fixing the concentration",
    )
    _add_common(p)
    p.set_defaults(func=cmd_fit_map)
    registry["fit-map"] = p

    p = sub.add_parser("fit-population", help="mixed-effects fit, many subjects")
    p.add_argument("data")
    p.add_argument("--algorithm", choices=["plme", "lme"], default="plme")
    p.add_argument(
        "--design",
        choices=[
            "one-sample", "two-sample",
            "two-sample-s1", "two-sample-s2", "two-sample-s1-s2",
        ],
        default="one-sample",
        help="suffixed forms fix the contrast set, e.g. two-sample-s1",
    )
    p.add_argument("--contrasts", default="s1,s2",
                   help="comma-separated angles given group contrasts")
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--test", action="append", metavar="PARAM",
                   help="Wald test of a fixed effect (repeatable)")
    p.add_argument("--flexibility", action="store_true",
                   help="report the offset in excess of the axis-implied one")
    _add_common(p)
    p.set_defaults(func=cmd_fit_population)
    registry["fit-population"] = p

    p = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    p.add_argument("--subjects", type=int, default=30)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--error-sd-deg", type=float, default=1.0)
    p.add_argument("--mean-deg", type=_angle_list,
                   default=[8.0, -6.0, 42.0, 23.0, 17.0])
    p.add_argument("--sd-deg", type=_angle_list,
                   default=[7.0, 4.0, 9.0, 11.0, 11.0])
    p.add_argument("--group-effect", action="append", metavar="ANGLE=DEG",
                   help="two-sample generation, e.g. s1=-7.4 (repeatable)")
    p.add_argument("--algorithm", choices=["plme", "lme"], default="plme")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dataset-out", metavar="PATH",
                   help="also write one synthetic dataset as CSV")
    _add_common(p, with_subsample=False)
    p.set_defaults(func=cmd_simulate)
    registry["simulate"] = p

    p = sub.add_parser("validate", help="check a data file without fitting")
    p.add_argument("data")
    p.set_defaults(func=cmd_validate)
    registry["validate"] = p

    parser._subcommand_registry = registry
    return parser


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: str, action) -> object:
    if isinstance(action, argparse._StoreTrueAction):
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise DataError(f"config: {action.dest} must be a boolean, got {value!r}")
    if action.type is not None:
        try:
            return action.type(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise DataError(f"config: bad value for {action.dest}: {exc}")
    return value


def _apply_config(parser, args, argv):
    path = getattr(args, "config", None)
    if not path:
        return args
    values = read_config(path)
    subparser = parser._subcommand_registry.get(args.command)
    if subparser is None:
        return args
    known = {}
    for action in subparser._actions:
        key = action.dest.replace("_", "-")
        if action.dest in values:
            known[action.dest] = _coerce(values[action.dest], action)
        elif key in values:
            known[action.dest] = _coerce(values[key], action)
    unknown = set(values) - {
        a.dest for a in subparser._actions
    } - {a.dest.replace("_", "-") for a in subparser._actions}
    if unknown:
        raise DataError(f"config: unknown keys {sorted(unknown)}")
    subparser.set_defaults(**known)
    # re-parse so explicit command-line flags still take precedence
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except HingeAxesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
