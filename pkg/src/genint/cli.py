"""Command-line entry point: ``genint <verb> [--config ...]``.

Exit status is 0 on success, 1 when the configuration or an input fails
validation, and 2 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .causal import (
    StrategyBoundInput,
    backdoor_adjust_discrete,
    compare_strategies,
    intervened_bound,
    linear_iv_estimate,
    natural_bound,
    observational_joint_discrete,
)
from .config import default_config_text, parse_config
from .datagen import ScmDiscrete, ScmLinear, sample_linear_scm
from .exceptions import ConfigurationError, GenIntError, ValidationError
from .formats import write_json
from .pipeline import STAGES, ablation_sweep, derive_seed, run_pipeline

logger = logging.getLogger("genint")


@dataclass
class ScmReport:
    natural_violations: int
    intervened_violations: int
    strict_subset_failures: int
    width_mismatches: int
    n_scm: int
    iv_estimate: float
    iv_samples: int
    iv_seconds: float

    @property
    def ok(self) -> bool:
        return not (self.natural_violations or self.intervened_violations or self.strict_subset_failures or self.width_mismatches)


def _positive_scm(rng: np.random.Generator) -> ScmDiscrete:
    # Dirichlet draws are almost surely positive, but a floor keeps P(x|c) > 0
    while True:
        scm = ScmDiscrete.random(rng)
        if (scm.p_z_given_c @ scm.p_x_given_z).min() > 1e-6:
            return scm


def verify_scm(n_scm: int = 1000, iv_samples: int = 1_000_000, seed: int = 0) -> ScmReport:
    """Check the bounds on random SCMs, then time the linear-IV estimate."""
    rng = np.random.default_rng(seed)
    natural_bad = intervened_bad = 0
    for _ in range(n_scm):
        scm = _positive_scm(rng)
        x, y = int(rng.integers(2)), int(rng.integers(2))
        truth = backdoor_adjust_discrete(scm, x, y)
        joint = observational_joint_discrete(scm)
        if not natural_bound(float(joint.p_xy[x, y]), float(joint.p_x[x])).contains(truth, 1e-12):
            natural_bad += 1
        forced = scm.with_exogenous_z(rng.dirichlet(np.ones(scm.cardinalities[1])))
        fj = observational_joint_discrete(forced)
        for z in range(scm.cardinalities[1]):
            bound = intervened_bound(StrategyBoundInput(float(fj.p_yx_given_z[z, x, y]), float(fj.p_x_given_z[z, x])))
            if not bound.contains(truth, 1e-12):
                intervened_bad += 1
    subset_bad = width_bad = 0
    for _ in range(n_scm):
        p_y_x = Fraction(int(rng.integers(1, 1000)), 1000)
        lo, hi = sorted(int(v) for v in rng.choice(np.arange(1, 1001), size=2, replace=False))
        a = StrategyBoundInput(p_y_x * Fraction(hi, 1000), Fraction(hi, 1000))
        b = StrategyBoundInput(p_y_x * Fraction(lo, 1000), Fraction(lo, 1000))
        result = compare_strategies(a, b, p_y_x, tol=0)
        if result.verdict != "a_tighter" or not result.interval_a.is_subset_of(result.interval_b, strict=True):
            subset_bad += 1
        if result.interval_a.width != 1 - a.p_x_given_z or result.interval_b.width != 1 - b.p_x_given_z:
            width_bad += 1
    start = time.perf_counter()
    samples = sample_linear_scm(ScmLinear(), iv_samples, seed)
    b_hat = linear_iv_estimate(samples)
    return ScmReport(
        natural_bad, intervened_bad, subset_bad, width_bad, n_scm, b_hat, iv_samples, time.perf_counter() - start
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, help="override [run] out directory")
    common.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    common.add_argument("--stages", help="comma-separated stage list for 'run'")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="genint", description="Generative-intervention experiments on colored MNIST.")
    verbs = parser.add_subparsers(dest="verb", required=True)
    for stage in STAGES:
        verbs.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    verbs.add_parser("run", parents=[common], help="run the pipeline (all stages unless --stages)")
    verbs.add_parser("ablate", parents=[common], help="sweep the [strategy:*] grid")
    verbs.add_parser("scm-verify", parents=[common], help="check bound soundness and the IV estimator")
    verbs.add_parser("show-config", parents=[common], help="print the default config")
    return parser


def _load(args):
    config = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError("[run] seed = {} is out of range: requires seed ≥ 0".format(args.seed))
        config.sections["run"]["seed"] = args.seed
    if args.out is not None:
        config.sections["run"]["out"] = str(args.out)
    return config


def _dispatch(args) -> None:
    if args.verb == "show-config":
        sys.stdout.write(default_config_text())
        return
    config = _load(args)
    if args.verb == "scm-verify":
        causal = config["causal"]
        report = verify_scm(causal["n_scm"], causal["iv_samples"], derive_seed(config.seed, "scm-verify"))
        payload = {**report.__dict__, "ok": report.ok}
        config.out.mkdir(parents=True, exist_ok=True)
        write_json(config.out / "scm_verify.json", payload)
        print(json.dumps(payload, indent=2, sort_keys=True))
        if not report.ok:
            raise GenIntError("bound checks reported violations")
        return
    if args.verb == "ablate":
        rows = ablation_sweep(config)
        for row in rows:
            print(
                f"{row['strategy']:>16}  log P(x|z) {row['mean_log_px_given_z']:.6f}  "
                f"confounded {row['confounded_top1']:.3f}  causal {row['causal_top1']:.3f}"
            )
        return
    if args.verb == "run":
        stages = None if not args.stages else [s.strip() for s in args.stages.split(",") if s.strip()]
    else:
        stages = [args.verb]
    pipeline = run_pipeline(config, stages, force=args.force)
    for outcome in pipeline.outcomes:
        state = "skipped" if outcome.skipped else f"{outcome.seconds:.1f}s"
        print(f"{outcome.name:>16}  {state}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GenIntError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
