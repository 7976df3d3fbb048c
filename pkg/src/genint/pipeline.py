"""Stage orchestration, idempotent reruns, metrics emission and the strategy sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .causal import (
    StrategyBoundInput,
    backdoor_adjust_discrete,
    estimate_log_px_given_z,
    feature_extract,
    intervened_bound,
    natural_bound,
    observational_joint_discrete,
)
from .classify import (
    InterventionalClassifier,
    IRMClassifier,
    NuisanceRegressor,
    _MLPBase,
    correlation_probe,
    evaluate,
)
from .config import ExperimentConfig
from .datagen import (
    ColorPalette,
    LabeledImageSet,
    ScmDiscrete,
    color_index,
    export_bundled_mnist,
    load_gray_mnist,
    synth_colored_mnist,
)
from .exceptions import DependencyError, ValidationError
from .formats import file_checksum, read_json, write_json, write_tensor_file
from .genmodel import CVAE
from .intervene import (
    InterventionStrategy,
    LatentBasis,
    fit_latent_basis,
    generate_interventional_set,
    transfer_intervention,
)

logger = logging.getLogger(__name__)

STAGES = (
    "synth-data",
    "train-cvae",
    "fit-pca",
    "generate-int",
    "transfer-int",
    "train-classifier",
    "eval",
    "causal-bound",
    "corr-analysis",
)

# Table-1 rows, in report order
METHODS = ("erm", "cvae_observational", "irm", "genint", "genint_three_term")

RESULT_COLUMNS = ("run_id", "method", "split", "top1", "chance", "seed")


def derive_seed(master: int, label: str) -> int:
    """Stable 32-bit seed for a named consumer of the master seed."""
    digest = hashlib.sha1(f"{master}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _tree_checksums(root: Path, paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = root / p
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[f.relative_to(root).as_posix()] = file_checksum(f)
    return out


@dataclass
class Stage:
    name: str
    run: Callable[[Pipeline], None]
    inputs: tuple[str, ...]  # artifact directories this stage reads
    outputs: tuple[str, ...]
    sections: tuple[str, ...]


@dataclass
class StageOutcome:
    name: str
    skipped: bool
    seconds: float


@dataclass
class Pipeline:
    """Runs the stages of one experiment under ``config.out``.

    Each stage writes a stamp holding a key over its config sections, the
    master seed and the checksums of its inputs.  A stage whose key matches
    and whose outputs still hash to the stamped values is skipped without
    writing anything, unless ``force`` is set.
    """

    config: ExperimentConfig
    force: bool = False
    outcomes: list[StageOutcome] = field(default_factory=list)

    @property
    def out(self) -> Path:
        return self.config.out

    def seed(self, label: str) -> int:
        return derive_seed(self.config.seed, label)

    def palette(self) -> ColorPalette:
        data = self.config["data"]
        return ColorPalette.hsv(data["saturation"], data["value"])

    # -- artifact access --------------------------------------------------------

    def require(self, stage: str, relpath: str) -> Path:
        path = self.out / relpath
        present = path.is_file() or (path.is_dir() and any(f.is_file() for f in path.rglob("*")))
        if not present:
            raise DependencyError(stage, relpath, PRODUCERS.get(relpath.split("/")[0], "?"))
        return path

    def dataset(self, stage: str, name: str) -> LabeledImageSet:
        return LabeledImageSet.load(self.require(stage, f"data/{name}"))

    # -- execution ----------------------------------------------------------------

    def _stage_key(self, stage: Stage) -> str:
        inputs = _tree_checksums(self.out, [self.require(stage.name, p).relative_to(self.out) for p in stage.inputs])
        payload = {
            "stage": stage.name,
            "seed": self.config.seed,
            "config": self.config.digest(*stage.sections) if stage.sections else None,
            "inputs": inputs,
        }
        return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _stamp_path(self, stage: Stage) -> Path:
        return self.out / ".stamps" / f"{stage.name}.json"

    def _is_current(self, stage: Stage, key: str) -> bool:
        stamp = self._stamp_path(stage)
        if not stamp.exists():
            return False
        recorded = read_json(stamp)
        if recorded.get("key") != key:
            return False
        for rel, digest in recorded.get("outputs", {}).items():
            path = self.out / rel
            if not path.exists() or file_checksum(path) != digest:
                return False
        return True

    def run_stage(self, name: str) -> StageOutcome:
        stage = STAGE_TABLE[name]
        key = self._stage_key(stage)
        start = time.perf_counter()
        if not self.force and self._is_current(stage, key):
            logger.info("stage %s is up to date, skipping", name)
            outcome = StageOutcome(name, True, time.perf_counter() - start)
        else:
            logger.info("running stage %s", name)
            stage.run(self)
            outputs = _tree_checksums(self.out, [p for p in stage.outputs if (self.out / p).exists()])
            self._stamp_path(stage).parent.mkdir(parents=True, exist_ok=True)
            write_json(self._stamp_path(stage), {"key": key, "outputs": outputs})
            outcome = StageOutcome(name, False, time.perf_counter() - start)
        self.outcomes.append(outcome)
        return outcome


# -- stages ---------------------------------------------------------------------


def _synth_data(p: Pipeline) -> None:
    data = p.config["data"]
    if data["source"] == "bundled":
        paths = export_bundled_mnist(p.out / "data" / "raw", data["test_per_class"])
    else:
        paths = {k: Path(data[k]) for k in ("train_images", "train_labels", "test_images", "test_labels")}
    gray_train = load_gray_mnist(paths["train_images"], paths["train_labels"])
    gray_test = load_gray_mnist(paths["test_images"], paths["test_labels"])
    palette = p.palette()
    gray_train.save(p.out / "data" / "gray_train", split="train")
    gray_test.save(p.out / "data" / "gray_test", split="test")
    for name, source, mode in (
        ("train_confounded", gray_train, "train_confounded"),
        ("test_confounded", gray_test, "test_confounded"),
        ("test_causal", gray_test, "test_causal"),
    ):
        synth_colored_mnist(source, palette, mode, p.seed(name)).save(p.out / "data" / name)


def _train_cvae(p: Pipeline) -> None:
    train = p.dataset("train-cvae", "train_confounded")
    held_out = p.dataset("train-cvae", "test_confounded")
    model = CVAE(n_classes=10, random_state=p.seed("cvae"), **p.config["cvae"])
    model.fit(train.images, train.labels, held_out.images, held_out.labels)
    model.save(p.out / "cvae")


def _fit_pca(p: Pipeline) -> None:
    cvae = CVAE.load(p.require("fit-pca", "cvae"))
    if p.config["intervention"]["pca_source"] == "prior":
        basis = fit_latent_basis(cvae, prior_samples=10_000, seed=p.seed("pca"))
    else:
        basis = fit_latent_basis(cvae, p.dataset("fit-pca", "train_confounded"))
    basis.save(p.out / "pca", source=p.config["intervention"]["pca_source"], sigmas=basis.sigmas.tolist())


def _generate(p: Pipeline, stage: str, strategy: InterventionStrategy, seed_label="int"):
    cvae = CVAE.load(p.require(stage, "cvae"))
    basis = LatentBasis.load(p.require(stage, "pca"))
    iv = p.config["intervention"]
    dataset = p.dataset(stage, "train_confounded") if iv["source"] == "encoded" else None
    return generate_interventional_set(
        cvae, basis, strategy, iv["per_class_n"], p.seed(seed_label), source=iv["source"], dataset=dataset
    )


def _save_generated(directory: Path, generated: LabeledImageSet, records) -> None:
    generated.save(directory)
    write_tensor_file(directory / "h0_star.gint", np.stack([r.h0_star for r in records]))


def _generate_int(p: Pipeline) -> None:
    strategy = p.config.strategy()
    observational = replace(strategy, scale=0.0)
    for name, st in (("interventional", strategy), ("observational", observational)):
        generated, records = _generate(p, "generate-int", st)
        _save_generated(p.out / "int" / name, generated, records)


def _transfer_int(p: Pipeline) -> None:
    gray = p.dataset("transfer-int", "gray_train")
    transfer_intervention(gray, p.palette(), p.seed("itr")).save(p.out / "itr")


def _classifier_params(p: Pipeline) -> dict:
    c = p.config["classifier"]
    keys = ("hidden_units", "learning_rate", "epochs", "batch_size", "batch_size_int", "batch_size_itr")
    return {k: c[k] for k in keys} | {"random_state": p.seed("classifier")}


def _train_classifier(p: Pipeline) -> None:
    stage = "train-classifier"
    train = p.dataset(stage, "train_confounded")
    obs = LabeledImageSet.load(p.require(stage, "int/observational"))
    x_int = LabeledImageSet.load(p.require(stage, "int/interventional"))
    x_itr = LabeledImageSet.load(p.require(stage, "itr"))
    c = p.config["classifier"]
    base = _classifier_params(p)
    root = p.out / "classifiers"

    InterventionalClassifier(**base).fit(train.images, train.labels).save(root / "erm")
    InterventionalClassifier(use_original_data=False, lambda1=c["lambda1"], **base).fit(
        None, None, obs.images, obs.labels
    ).save(root / "cvae_observational")
    bit = color_index(train) % 2
    irm = IRMClassifier(
        penalty_weight=p.config["irm"]["penalty_weight"],
        warmup_steps=p.config["irm"]["warmup_steps"],
        **{k: base[k] for k in ("hidden_units", "learning_rate", "epochs", "batch_size", "random_state")},
    )
    irm.fit([train.subset(bit == 0), train.subset(bit == 1)]).save(root / "irm")
    InterventionalClassifier(
        use_original_data=c["use_original_data"], lambda1=c["lambda1"], lambda2=c["lambda2"], **base
    ).fit(train.images, train.labels, x_int.images, x_int.labels, x_itr.images, x_itr.labels).save(root / "genint")
    InterventionalClassifier(
        use_original_data=True, lambda1=c["three_term_lambda1"], lambda2=c["three_term_lambda2"], **base
    ).fit(train.images, train.labels, x_int.images, x_int.labels, x_itr.images, x_itr.labels).save(
        root / "genint_three_term"
    )


def _eval(p: Pipeline) -> None:
    splits = {
        "confounded": p.dataset("eval", "test_confounded"),
        "causal": p.dataset("eval", "test_causal"),
    }
    rows = []
    for method in METHODS:
        model = _MLPBase.load(p.require("eval", f"classifiers/{method}"))
        for split, data in splits.items():
            report = evaluate(model, data, split)
            rows.append(
                {
                    "run_id": p.config.digest()[:12],
                    "method": method,
                    "split": split,
                    "top1": report.top1,
                    "chance": report.chance,
                    "seed": p.config.seed,
                }
            )
    (p.out / "eval").mkdir(parents=True, exist_ok=True)
    write_json(p.out / "eval" / "reports.json", rows)
    emit_metrics(rows, p.out, config=p.config)


def _causal_bound(p: Pipeline) -> None:
    stage = "causal-bound"
    tau = p.config["causal"]["tau"]
    erm = _MLPBase.load(p.require(stage, "classifiers/erm"))
    queries = feature_extract(erm, p.dataset(stage, "test_causal").images)
    out = p.out / "causal"
    out.mkdir(parents=True, exist_ok=True)
    strategies = {}
    for name in ("observational", "interventional"):
        generated = LabeledImageSet.load(p.require(stage, f"int/{name}"))
        report = estimate_log_px_given_z(queries, feature_extract(erm, generated.images), tau)
        (out / f"likelihood_{name}.csv").write_text(report.to_csv())
        strategies[name] = {
            "strategy": {k: generated.meta[k] for k in ("truncation", "top_k", "scale", "directions_per_sample", "offset_mode")},
            "total_log_px_given_z": report.total,
            "mean_log_px_given_z": report.mean,
            "n_queries": int(len(report.contributions)),
        }
    # worked identification example on a seeded discrete SCM
    rng = np.random.default_rng(p.seed("scm-example"))
    scm = ScmDiscrete.random(rng)
    joint = observational_joint_discrete(scm)
    exact = backdoor_adjust_discrete(scm, 1, 1)
    nat = natural_bound(float(joint.p_xy[1, 1]), float(joint.p_x[1]))
    forced = scm.with_exogenous_z(np.eye(scm.cardinalities[1])[0])
    fj = observational_joint_discrete(forced)
    inter = intervened_bound(StrategyBoundInput(float(fj.p_yx_given_z[0, 1, 1]), float(fj.p_x_given_z[0, 1])))
    write_json(
        out / "summary.json",
        {
            "tau": tau,
            "strategies": strategies,
            "scm_example": {
                "p_y_do_x": exact,
                "natural_bound": [nat.lower, nat.upper],
                "intervened_bound": [inter.lower, inter.upper],
            },
        },
    )


def _corr_analysis(p: Pipeline) -> None:
    stage = "corr-analysis"
    probe_cfg = p.config["probe"]
    confounded = p.dataset(stage, "train_confounded")
    x_int = LabeledImageSet.load(p.require(stage, "int/interventional"))
    regressor = NuisanceRegressor(epochs=probe_cfg["regressor_epochs"], random_state=p.seed("regressor"))
    regressor.fit(x_int.images, x_int.nuisance)
    sources = {
        ("confounded", "annotation"): (confounded.nuisance, confounded.labels),
        ("genint", "annotation"): (x_int.nuisance, x_int.labels),
        ("confounded", "regressed"): (regressor.predict(confounded.images), confounded.labels),
        ("genint", "regressed"): (regressor.predict(x_int.images), x_int.labels),
    }
    rows = []
    for (data, nuisance), (z, labels) in sources.items():
        for size in probe_cfg["subset_sizes"]:
            result = correlation_probe(
                z,
                labels,
                size,
                hidden_units=probe_cfg["hidden_units"],
                epochs=probe_cfg["epochs"],
                seed=p.seed(f"probe/{size}"),
            )
            rows.append(
                {
                    "data": data,
                    "nuisance": nuisance,
                    "subset_size": size,
                    "accuracy": result.accuracy,
                    "chance": result.chance,
                    "ratio": result.ratio,
                }
            )
    out = p.out / "corr"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "probe.csv", rows, ("data", "nuisance", "subset_size", "accuracy", "chance", "ratio"))
    write_json(
        out / "summary.json",
        {"regressor_validation_mae": regressor.validation_mae_, "regressor_baseline_mae": regressor.baseline_mae_},
    )


ALL_SECTIONS = ("run", "data", "cvae", "intervention", "classifier", "irm", "causal", "probe", "grid")

STAGE_TABLE: dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("synth-data", _synth_data, (), ("data",), ("data", "run")),
        Stage("train-cvae", _train_cvae, ("data/train_confounded", "data/test_confounded"), ("cvae",), ("cvae",)),
        Stage("fit-pca", _fit_pca, ("cvae", "data/train_confounded"), ("pca",), ("intervention",)),
        Stage("generate-int", _generate_int, ("cvae", "pca", "data/train_confounded"), ("int",), ("intervention",)),
        Stage("transfer-int", _transfer_int, ("data/gray_train",), ("itr",), ("data",)),
        Stage(
            "train-classifier",
            _train_classifier,
            ("data/train_confounded", "int/observational", "int/interventional", "itr"),
            ("classifiers",),
            ("classifier", "irm"),
        ),
        Stage(
            "eval",
            _eval,
            ("data/test_confounded", "data/test_causal", "classifiers"),
            ("eval", "results.csv"),
            ALL_SECTIONS,  # run_id is a digest of the whole config
        ),
        Stage(
            "causal-bound",
            _causal_bound,
            ("classifiers/erm", "data/test_causal", "int/observational", "int/interventional"),
            ("causal",),
            ("causal",),
        ),
        Stage(
            "corr-analysis",
            _corr_analysis,
            ("data/train_confounded", "int/interventional"),
            ("corr",),
            ("probe",),
        ),
    )
}

PRODUCERS = {
    "data": "synth-data",
    "cvae": "train-cvae",
    "pca": "fit-pca",
    "int": "generate-int",
    "itr": "transfer-int",
    "classifiers": "train-classifier",
    "eval": "eval",
    "causal": "causal-bound",
    "corr": "corr-analysis",
}


# -- metrics ----------------------------------------------------------------------


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _write_csv(path: Path, rows, columns) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["top1"] = float(row["top1"])
        row["chance"] = float(row["chance"])
        row["seed"] = int(row["seed"])
    return rows


def emit_metrics(reports, out_dir, *, config: ExperimentConfig | None = None, timings=None) -> dict:
    """Write ``results.csv`` and ``summary.json`` under ``out_dir``.

    The summary holds the echoed config and a checksum of every artifact
    file; wall-clock timings live in their own ``timings`` field.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", reports, RESULT_COLUMNS)
    skip = {"summary.json"}
    checksums = {
        f.relative_to(out).as_posix(): file_checksum(f)
        for f in sorted(out.rglob("*"))
        if f.is_file() and f.name not in skip and ".stamps" not in f.parts
    }
    summary = {
        "config": config.as_dict() if config is not None else None,
        "checksums": checksums,
        "results": reports,
        "timings": timings or {},
    }
    write_json(out / "summary.json", summary)
    return summary


def run_pipeline(config: ExperimentConfig, stages=None, *, force=False) -> Pipeline:
    """Run ``stages`` (all by default) in canonical order."""
    selected = list(STAGES) if stages is None else list(stages)
    unknown = [s for s in selected if s not in STAGE_TABLE]
    if unknown:
        raise ValidationError(f"unknown stage(s) {unknown}; valid: {', '.join(STAGES)}")
    pipeline = Pipeline(config, force=force)
    config.out.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        if name in selected:
            pipeline.run_stage(name)
    results = config.out / "results.csv"
    if results.exists() and any(not o.skipped for o in pipeline.outcomes):
        emit_metrics(
            read_results_csv(results),
            config.out,
            config=config,
            timings={o.name: {"seconds": o.seconds, "skipped": o.skipped} for o in pipeline.outcomes},
        )
    return pipeline


# -- strategy sweep -----------------------------------------------------------------


ABLATION_COLUMNS = (
    "strategy",
    "truncation",
    "top_k",
    "scale",
    "directions_per_sample",
    "offset_mode",
    "mean_log_px_given_z",
    "total_log_px_given_z",
    "confounded_top1",
    "causal_top1",
)


def ablation_sweep(config: ExperimentConfig, grid=None) -> list[dict]:
    """Generate, score and classify with every strategy in the grid.

    Needs the CVAE, the basis and the ERM baseline (its penultimate layer is
    the feature extractor).  Rows come back sorted by mean log P(x|z).
    """
    grid = dict(grid if grid is not None else config.grid)
    if not grid:
        raise ValidationError("the strategy grid is empty")
    p = Pipeline(config)
    stage = "ablate"
    erm = _MLPBase.load(p.require(stage, "classifiers/erm"))
    confounded = p.dataset(stage, "test_confounded")
    causal = p.dataset(stage, "test_causal")
    queries = feature_extract(erm, causal.images)
    rows = []
    for name, strategy in grid.items():
        generated, _ = _generate(p, stage, strategy)
        report = estimate_log_px_given_z(queries, feature_extract(erm, generated.images), config["causal"]["tau"])
        clf = InterventionalClassifier(use_original_data=False, lambda1=1.0, **_classifier_params(p))
        clf.fit(None, None, generated.images, generated.labels)
        rows.append(
            {
                "strategy": name,
                **strategy.as_dict(),
                "mean_log_px_given_z": report.mean,
                "total_log_px_given_z": report.total,
                "confounded_top1": evaluate(clf, confounded).top1,
                "causal_top1": evaluate(clf, causal).top1,
            }
        )
    rows.sort(key=lambda r: r["mean_log_px_given_z"])
    out = config.out / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    return rows
