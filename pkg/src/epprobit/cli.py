"""Command line interface: ``epprobit {fit,simulate,predict,ep-check}``.

Settings for ``fit`` come from built-in defaults, then an optional JSON
config file, then command line flags, each overriding the previous one.
``EPPROBIT_THREADS`` sets the default E-step thread count.

Exit codes: 0 success (for ``fit``: converged), 2 usable but incomplete
(``fit`` hit ``max_iters``; ``ep-check`` found a disagreement), 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from . import __version__
from .constraints import ConstraintSystem, build_constraints
from .em import EmConfig, fit
from .ep import EpConfig, ep_moments
from .errors import AcceptanceTooLow, DimensionMismatch, ProbitError
from .io import TraceWriter, read_estimates, read_long_csv, write_estimates, write_long_csv
from .model import MULTIVARIATE, OUTSIDE, REFERENCE, ModelKind
from .predict import choice_probabilities, counterfactual_swap_to_top, outcome_probability
from .simulate import Banded, CompoundSymmetric, RandomPD, SimSpec, generate, gibbs_tmvn, rejection_tmvn

__all__ = ["RunConfig", "main", "build_parser"]

THREADS_ENV = "EPPROBIT_THREADS"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCOMPLETE = 2


@dataclass
class RunConfig:
    kind: str = OUTSIDE
    ref_index: int = 0
    trace_target: Optional[float] = None
    tol_sigma: float = 1e-4
    max_iters: int = 500
    subsample_fraction: float = 1.0
    ep_tol: float = 1e-6
    ep_max_sweeps: int = 60
    ep_damping: float = 1.0
    ep_min_cavity_prec: float = 1e-12
    ep_failure_policy: str = "reuse_last"
    seed: int = 0
    thread_count: int = 1
    chunk_size: int = 128

    @classmethod
    def defaults(cls) -> "RunConfig":
        cfg = cls()
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                cfg.thread_count = int(env)
            except ValueError:
                raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        return cfg

    def update(self, values: dict) -> "RunConfig":
        values = dict(values)
        ep = values.pop("ep", None) or {}
        for k, v in ep.items():
            values[f"ep_{k}" if not k.startswith("ep_") else k] = v
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        for k, v in values.items():
            if v is not None:
                setattr(self, k, v)
        return self

    def model_kind(self) -> ModelKind:
        if self.kind == REFERENCE:
            return ModelKind.reference(self.ref_index)
        return ModelKind(self.kind)

    def em_config(self) -> EmConfig:
        ep = EpConfig(tol=self.ep_tol, max_sweeps=self.ep_max_sweeps, damping=self.ep_damping,
                      min_cavity_prec=self.ep_min_cavity_prec)
        return EmConfig(tol_sigma=self.tol_sigma, max_iters=self.max_iters, trace_target=self.trace_target,
                        subsample_fraction=self.subsample_fraction, seed=self.seed, ep=ep,
                        ep_failure_policy=self.ep_failure_policy, thread_count=self.thread_count,
                        chunk_size=self.chunk_size)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _bound(v, default):
    """Region bound from JSON; ``null`` means unbounded and strings like "inf" are accepted."""
    return default if v is None else float(v)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = RunConfig.defaults()
    if args.config:
        cfg.update(_load_json(args.config))
    cfg.update({f.name: getattr(args, f.name, None) for f in fields(RunConfig)})
    kind = cfg.model_kind()
    em_cfg = cfg.em_config()
    data, _ = read_long_csv(args.data, kind)
    trace_path = args.trace or str(Path(args.out).with_suffix(".trace.ndjson"))
    with TraceWriter(trace_path) as sink:
        model, trace = fit(data, kind, em_cfg, callback=sink)
    target = model.dim if cfg.trace_target is None else cfg.trace_target
    write_estimates(args.out, model, trace, cfg.tol_sigma, target)
    status = "converged" if trace.converged else "reached max_iters"
    print(f"{status} after {len(trace)} iterations; estimates in {args.out}, trace in {trace_path}", file=sys.stderr)
    return EXIT_OK if trace.converged else EXIT_INCOMPLETE


_SIGMA_KINDS = {
    "compound_symmetric": CompoundSymmetric,
    "banded": Banded,
    "random_pd": RandomPD,
}


def sim_spec_from_dict(d: dict) -> SimSpec:
    d = dict(d)
    sig = dict(d.pop("sigma", {"type": "compound_symmetric"}))
    typ = sig.pop("type", "compound_symmetric")
    if typ not in _SIGMA_KINDS:
        raise ValueError(f"unknown sigma type {typ!r}; expected one of {sorted(_SIGMA_KINDS)}")
    kind_tag = d.pop("kind", OUTSIDE)
    ref = d.pop("ref_index", None)
    kind = ModelKind.reference(ref or 0) if kind_tag == REFERENCE else ModelKind(kind_tag)
    beta = d.pop("beta", None)
    known = {"n", "m", "p", "seed"}
    if set(d) - known:
        raise ValueError(f"unknown simulation keys: {', '.join(sorted(set(d) - known))}")
    return SimSpec(n=int(d["n"]), m=int(d["m"]), p=int(d["p"]), beta_true=beta,
                   sigma_kind=_SIGMA_KINDS[typ](**sig), seed=int(d.get("seed", 0)), kind=kind)


def cmd_simulate(args) -> int:
    raw = _load_json(args.spec) if args.spec else {}
    for k in ("n", "m", "p", "seed"):
        if getattr(args, k) is not None:
            raw[k] = getattr(args, k)
    spec = sim_spec_from_dict(raw)
    if spec.n == 0:
        raise ValueError("n must be positive to write a dataset")
    sim = generate(spec)
    write_long_csv(args.out, sim.observations)
    truth_path = args.truth or str(Path(args.out).with_suffix(".truth.json"))
    truth = {
        "model": spec.kind.to_dict(),
        "seed": spec.seed,
        "n": spec.n,
        "m": spec.m,
        "p": spec.p,
        "beta": [float(v) for v in sim.beta],
        "sigma": {"dim": spec.m, "data": [float(v) for v in sim.sigma.ravel()]},
        "sigma_identified": {"dim": int(sim.sigma_identified.shape[0]),
                             "data": [float(v) for v in sim.sigma_identified.ravel()]},
    }
    Path(truth_path).write_text(json.dumps(truth, indent=2) + "\n")
    print(f"wrote {spec.n} observations to {args.out}, ground truth to {truth_path}", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = read_estimates(args.model)
    kind = model.kind
    data, ids = read_long_csv(args.data, kind, require_outcome=False)
    n_sys = model.dim + (1 if kind.tag == REFERENCE else 0)
    for oid, obs in zip(ids, data):
        if obs.x.shape[1] != model.beta.size:
            raise DimensionMismatch(f"obs_id {oid!r}: {obs.x.shape[1]} covariates, model has {model.beta.size}")
        if obs.n_alternatives > n_sys:
            raise DimensionMismatch(f"obs_id {oid!r}: {obs.n_alternatives} alternatives, model has {n_sys}")
    ep_cfg = EpConfig()
    swap = None if args.swap_item is None else int(args.swap_item) - 1

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if kind.tag == MULTIVARIATE:
            w.writerow(["obs_id", "alt_id", "marginal_probability", "observed_outcome_probability"])
            for oid, obs in zip(ids, data):
                pos = None if obs.positions is None else list(obs.positions)
                sig = model.sigma if pos is None else model.sigma[np.ix_(pos, pos)]
                z = obs.x @ model.beta / np.sqrt(np.diag(sig))
                joint = outcome_probability(model, obs.x, obs.outcome, pos, ep_cfg)
                for j in range(obs.n_alternatives):
                    w.writerow([oid, j + 1, repr(float(special.ndtr(z[j]))), repr(joint)])
            return EXIT_OK
        header = ["obs_id", "alt_id", "raw_mass", "probability"]
        if swap is not None:
            header += ["swapped_probability", "uplift"]
        w.writerow(header)
        for oid, obs in zip(ids, data):
            pos = None if obs.positions is None else list(obs.positions)
            if swap is not None:
                if not 0 <= swap < obs.n_alternatives:
                    raise ValueError(f"obs_id {oid!r}: swap item {swap + 1} outside 1..{obs.n_alternatives}")
                base, swapped, uplift = counterfactual_swap_to_top(model, obs.x, swap, pos, ep_cfg)
            else:
                base = choice_probabilities(model, obs.x, pos, ep_cfg)
            first_alt = 0 if base.has_outside else 1
            for k in range(base.raw_mass.size):
                row = [oid, k + first_alt, repr(float(base.raw_mass[k])), repr(float(base.normalized[k]))]
                if swap is not None:
                    row += [repr(float(swapped.normalized[k])), repr(float(uplift))]
                w.writerow(row)
    return EXIT_OK


def _region(spec: dict, d: int) -> ConstraintSystem:
    if "kind" in spec:
        tag = spec["kind"]
        kind = ModelKind.reference(spec.get("ref_index", 0)) if tag == REFERENCE else ModelKind(tag)
        return build_constraints(kind, spec.get("outcome"), d)
    a = np.asarray(spec.get("a", np.eye(d)), dtype=float)
    lower = [_bound(v, -np.inf) for v in spec["lower"]]
    upper = [_bound(v, np.inf) for v in spec["upper"]]
    return ConstraintSystem.general(a, lower, upper)


def cmd_ep_check(args) -> int:
    spec = _load_json(args.region)
    mean = np.asarray(spec["mean"], dtype=float)
    cov = np.asarray(spec["cov"], dtype=float)
    cs = _region(spec, mean.size)
    ep_cfg = EpConfig(**spec.get("ep", {}))
    draws = int(args.draws or spec.get("draws", 1_000_000))
    seed = int(args.seed if args.seed is not None else spec.get("seed", 0))
    res = ep_moments(mean, cov, cs, ep_cfg)
    try:
        oracle = rejection_tmvn(mean, cov, cs, draws, seed)
        method = "rejection"
    except AcceptanceTooLow:
        oracle = gibbs_tmvn(mean, cov, cs, draws, seed=seed)
        method = "gibbs"
    mean_err = float(np.abs(res.mean - oracle.mean).max())
    cov_err = float(np.abs(res.cov - oracle.cov).max())
    report = {
        "ep": {"log_mass": res.log_mass, "mass": res.mass, "mean": res.mean.tolist(), "cov": res.cov.tolist(),
               "converged": res.converged, "sweeps": res.sweeps},
        "oracle": {"method": method, "draws": oracle.n_draws, "mean": oracle.mean.tolist(),
                   "cov": oracle.cov.tolist(), "mean_se_max": float(oracle.mean_se.max()),
                   "cov_se_max": float(oracle.cov_se.max()), "mass": oracle.mass},
        "max_abs_mean_error": mean_err,
        "max_abs_cov_error": cov_err,
    }
    ok = mean_err <= args.mean_tol and cov_err <= args.cov_tol
    if oracle.mass is not None:
        rel = abs(res.mass - oracle.mass) / oracle.mass
        report["mass_rel_error"] = rel
        ok = ok and rel <= args.mass_tol
    report["agree"] = ok
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK if ok else EXIT_INCOMPLETE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epprobit", description="EP-EM estimation of probit models")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="estimate beta and Sigma from a long-format CSV")
    f.add_argument("data")
    f.add_argument("--config", help="JSON file with run settings")
    f.add_argument("--out", required=True, help="estimates JSON to write")
    f.add_argument("--trace", help="NDJSON iteration trace (default: next to --out)")
    f.add_argument("--kind", choices=[OUTSIDE, REFERENCE, MULTIVARIATE])
    f.add_argument("--ref-index", dest="ref_index", type=int)
    f.add_argument("--trace-target", dest="trace_target", type=float)
    f.add_argument("--tol-sigma", dest="tol_sigma", type=float)
    f.add_argument("--max-iters", dest="max_iters", type=int)
    f.add_argument("--subsample-fraction", dest="subsample_fraction", type=float)
    f.add_argument("--ep-tol", dest="ep_tol", type=float)
    f.add_argument("--ep-max-sweeps", dest="ep_max_sweeps", type=int)
    f.add_argument("--ep-damping", dest="ep_damping", type=float)
    f.add_argument("--ep-min-cavity-prec", dest="ep_min_cavity_prec", type=float)
    f.add_argument("--ep-failure-policy", dest="ep_failure_policy", choices=["reuse_last", "drop", "abort"])
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", dest="thread_count", type=int)
    f.add_argument("--chunk-size", dest="chunk_size", type=int)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("spec", nargs="?", help="JSON simulation spec")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="ground-truth JSON (default: next to --out)")
    s.add_argument("--n", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="choice probabilities from fitted estimates")
    p.add_argument("model", help="estimates JSON from fit")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--swap-item", dest="swap_item", type=int, help="alt_id to move to the top slot")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("ep-check", help="compare EP moments with a Monte Carlo oracle")
    e.add_argument("region", help="JSON region spec")
    e.add_argument("--out")
    e.add_argument("--draws", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--mean-tol", type=float, default=0.02)
    e.add_argument("--cov-tol", type=float, default=0.05)
    e.add_argument("--mass-tol", type=float, default=2e-2)
    e.set_defaults(func=cmd_ep_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProbitError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
