import json
import logging
import os
import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from flowguide.bayesopt import MG_BUDGET, BOProblem, BOResult, default_bounds, optimize
from flowguide.denoisers import (
    EmpiricalPosterior,
    GuideModelSpec,
    build_guide,
    fit_velocity_model,
    held_out_nll,
    train_mg,
    uniform_weight_sampler,
)
from flowguide.errors import ConfigError, FlowGuideError
from flowguide.flowcore import TimeGrid
from flowguide.loader import (
    RunConfig,
    config_hash,
    export_run_config,
    load_dataset,
    load_models,
    load_run_config,
    save_dataset,
    save_models,
    write_samples,
    write_table,
)
from flowguide.metrics import (
    MetricReport,
    metric_report,
    n_atoms_baseline,
    property_mae,
    uniqueness,
    validity_ratio,
)
from flowguide.report import (
    LOG_RATE_VALIDITY_DROP,
    Finding,
    at_most,
    findings_frame,
    less_than,
    paired_improvement,
    render_benchmark,
)
from flowguide.sampler import GeneratedMolecule, GuidanceSpec, ModelBundle, SampleRequest, sample
from flowguide.toymol import Dataset, generate_dataset, is_valid, split_dataset

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.jsonl"
HELDOUT_FILE = "heldout.jsonl"
MODELS_FILE = "models.json"
LOCK_FILE = ".flowguide.lock"

COMMANDS = ("gen-data", "fit", "sample", "sweep-formats", "hierarchy", "tune", "benchmark")


@contextmanager
def output_lock(out_dir: Path) -> Iterator[None]:
    """Exclusive per-directory lock; a second command in the same directory fails."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise FlowGuideError(f"{out_dir} is locked by another command ({lock})") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class ExperimentRunner:
    """Runs dataset generation, fitting, sampling, sweeps, tuning and benchmarks."""

    config: RunConfig
    out_dir: Path

    def __init__(
        self,
        config: RunConfig | None = None,
        config_path: Path | None = None,
        out_dir: Path | None = None,
    ):
        """
        Initialize the runner.

        Args:
            config: Validated run configuration (takes precedence over config_path)
            config_path: Path to a YAML/JSON run configuration
            out_dir: Output directory; defaults to ``config.out_dir``
        """
        if config is None:
            config = load_run_config(config_path)
            if config_path is not None:
                logger.info(f"Config: {config_path}")
        self.config = config
        self.out_dir = Path(out_dir or config.out_dir)
        self.config_hash = config_hash(config)
        self._dataset: Dataset | None = None
        self._models: ModelBundle | None = None

    # -- artifacts ----------------------------------------------------------

    @property
    def dataset_path(self) -> Path:
        return self.out_dir / DATASET_FILE

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            if not self.dataset_path.exists():
                raise ConfigError(f"Dataset {self.dataset_path} not found; run gen-data first")
            self._dataset = load_dataset(self.dataset_path)
        return self._dataset

    @property
    def models(self) -> ModelBundle:
        if self._models is None:
            path = self.out_dir / MODELS_FILE
            if not path.exists():
                raise ConfigError(f"Model bundle {path} not found; run fit first")
            self._models = load_models(path, self.dataset)
        return self._models

    def _log_plan(self, title: str, lines: dict[str, object]) -> None:
        logger.info("\n" + "=" * 60)
        logger.info(title)
        logger.info("=" * 60)
        for key, value in lines.items():
            logger.info(f"{key + ':':<22} {value}")
        logger.info("=" * 60 + "\n")

    def _table(self, frame: pd.DataFrame, name: str, seed: int | None = None) -> Path:
        """Write ``name`` stamped with the config hash and ``seed`` (default: sampling seed)."""
        path = self.out_dir / name
        write_table(
            frame, path, self.config_hash, self.config.sampling.seed if seed is None else seed
        )
        return path

    # -- sampling helpers ---------------------------------------------------

    def guide_spec(self, name: str) -> GuideModelSpec:
        for spec in self.config.models.guides:
            if spec.name == name:
                return spec
        raise ConfigError(f"Unknown guide model '{name}'")

    def spec(
        self,
        method: str,
        weights: Sequence[float] = (1.0, 1.0),
        discrete_format: str | None = None,
        guide: str | None = None,
    ) -> GuidanceSpec:
        guidance = self.config.guidance
        fields = {
            "method": method,
            "discrete_format": discrete_format or guidance.discrete_format,
            "weights": tuple(weights) if method != "mg" else (1.0, 1.0),
            "mg_weight": weights[0] if method == "mg" else guidance.mg_weight,
        }
        if method == "ag":
            fields["ag_guide"] = self.guide_spec(guide or guidance.ag_guide)
        return GuidanceSpec(**fields)

    def draw(
        self, spec: GuidanceSpec, count: int | None = None, steps: int | None = None
    ) -> tuple[list[GeneratedMolecule], float]:
        sampling = self.config.sampling
        req = SampleRequest(
            count=count or sampling.count,
            grid=TimeGrid(steps=steps or sampling.steps),
            seed=sampling.seed,
            condition=sampling.condition,
            target=sampling.target,
            eta=sampling.eta,
        )
        start = time.perf_counter()
        samples = sample(spec, self.models, req)
        return samples, time.perf_counter() - start

    def _cell(
        self, spec: GuidanceSpec, count: int | None = None, steps: int | None = None
    ) -> dict[str, float]:
        samples, _ = self.draw(spec, count, steps)
        return {
            "mae": property_mae(samples),
            "validity": validity_ratio(samples),
            "uniqueness": uniqueness(samples),
        }

    # -- commands -----------------------------------------------------------

    def gen_data(self) -> Dataset:
        """Generate (or reload) the dataset and write it with an optional held-out split."""
        cfg = self.config.dataset
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if cfg.path:
            dataset = load_dataset(Path(cfg.path))
        else:
            dataset = generate_dataset(cfg.seed, cfg.count, cfg.n_bins)
        self._log_plan(
            "Dataset Generation Plan",
            {"Seed": cfg.seed, "Count": len(dataset), "Bins": dataset.n_bins, "Split": cfg.split},
        )
        if cfg.split is not None:
            model_part, heldout = split_dataset(dataset, cfg.split, cfg.seed)
            save_dataset(model_part, self.out_dir / DATASET_FILE)
            save_dataset(heldout, self.out_dir / HELDOUT_FILE)
            dataset = model_part
        else:
            save_dataset(dataset, self.out_dir / DATASET_FILE)
        export_run_config(self.config, self.out_dir / "config.yaml")

        validity = float(np.mean([is_valid(m) for m in dataset.molecules]))
        print("\n" + "=" * 60)
        print(f"[OK] Molecules: {len(dataset)}")
        print(f"[OK] Validity: {validity:.3f}")
        print(f"[OK] Property range: [{dataset.properties.min():.4f}, {dataset.properties.max():.4f}]")
        print("=" * 60)
        self._dataset = dataset
        return dataset

    def fit(self) -> ModelBundle:
        """Fit posterior, velocity, guide and MG models and persist the bundle."""
        cfg = self.config.models
        dataset = self.dataset
        self._log_plan(
            "Model Fitting Plan",
            {
                "Molecules": len(dataset),
                "Conditional": cfg.conditional,
                "Guides": ", ".join(g.name for g in cfg.guides) or "none",
                "Model guidance": cfg.mg.enabled,
            },
        )
        posterior = EmpiricalPosterior(dataset)
        velocity = fit_velocity_model(
            dataset,
            conditional=cfg.conditional,
            min_bin_count=cfg.min_bin_count,
            variance_floor=cfg.variance_floor,
        )
        guides = {
            spec.name: build_guide(dataset, spec, cfg.min_bin_count, cfg.variance_floor)
            for spec in tqdm(cfg.guides, desc="Fitting guides", leave=False)
        }
        mg = None
        if cfg.mg.enabled:
            mg = train_mg(
                dataset,
                epochs=cfg.mg.epochs,
                lr=cfg.mg.lr,
                w_sampler=uniform_weight_sampler(*cfg.mg.w_range),
                warmup=cfg.mg.warmup,
                ema_decay=cfg.mg.ema_decay,
                p_uncond=cfg.mg.p_uncond,
                p_guided=cfg.mg.p_guided,
                seed=cfg.mg.seed,
                velocity_model=velocity,
                posterior=posterior,
            )
        bundle = ModelBundle(dataset, posterior, velocity, guides, mg)

        heldout_path = self.out_dir / HELDOUT_FILE
        if heldout_path.exists():
            heldout = load_dataset(heldout_path).molecules
            logger.info(f"Held-out NLL (main): {held_out_nll(posterior, heldout):.4f}")
            for name, guide in guides.items():
                logger.info(f"Held-out NLL ({name}): {held_out_nll(guide.posterior, heldout):.4f}")

        save_models(bundle, self.out_dir / MODELS_FILE)
        self._models = bundle
        return bundle

    def sample(self) -> MetricReport:
        """Sample with the configured guidance and write molecules plus a metric report."""
        guidance = self.config.guidance
        weights = (guidance.mg_weight,) if guidance.method == "mg" else guidance.weights
        spec = self.spec(guidance.method, weights, guide=guidance.ag_guide)
        self._log_plan(
            "Sampling Plan",
            {
                "Method": spec.method,
                "Format": spec.discrete_format,
                "Weights": spec.weights if spec.method != "mg" else spec.mg_weight,
                "Molecules": self.config.sampling.count,
                "Steps": self.config.sampling.steps,
            },
        )
        samples, seconds = self.draw(spec)
        write_samples(samples, self.out_dir / "samples.jsonl", self.config_hash, self.config.sampling.seed)
        report = metric_report(
            samples,
            forward_passes=spec.forward_passes,
            sampling_seconds=seconds,
            mae_max=n_atoms_baseline(self.dataset),
        )
        with open(self.out_dir / "report.json", "w") as f:
            json.dump(
                {
                    **report.model_dump(),
                    "config_hash": self.config_hash,
                    "seed": self.config.sampling.seed,
                },
                f,
                indent=2,
            )
        logger.info(
            f"MAE {report.property_mae:.4f}, validity {report.validity_ratio:.3f}, "
            f"unique {report.valid_and_unique_ratio:.3f}"
        )
        return report

    def sweep_formats(self, best_effort: bool = False) -> pd.DataFrame:
        """CFG grid over (format, w1, w2); log_rate uses the narrow w2 grid."""
        bench = self.config.benchmark
        grid = [
            (fmt, w1, w2)
            for fmt in bench.formats
            for w1 in bench.sweep_weights
            for w2 in (bench.log_rate_weights if fmt == "log_rate" else bench.sweep_weights)
        ]
        self._log_plan("Format Sweep Plan", {"Formats": ", ".join(bench.formats), "Cells": len(grid)})
        rows = []
        for fmt, w1, w2 in tqdm(grid, desc="Sweeping formats", leave=False, unit="cell"):
            try:
                rows.append(
                    {"format": fmt, "w1": w1, "w2": w2, **self._cell(self.spec("cfg", (w1, w2), fmt))}
                )
            except Exception as e:
                if best_effort:
                    logger.exception(f"Error sampling {fmt} at w1={w1}, w2={w2}: {e}")
                else:
                    raise
        frame = pd.DataFrame(rows)
        self._table(frame, "sweep_formats.csv")
        return frame

    def hierarchy(self, best_effort: bool = False) -> pd.DataFrame:
        """Continuous-only, discrete-only and hybrid CFG curves over a shared grid."""
        curves = {
            "continuous": lambda w: (w, 1.0),
            "discrete": lambda w: (1.0, w),
            "hybrid": lambda w: (w, w),
        }
        weights = self.config.benchmark.hierarchy_weights
        rows = []
        for curve, w in tqdm(
            [(c, w) for c in curves for w in weights], desc="Hierarchy", leave=False, unit="cell"
        ):
            w1, w2 = curves[curve](w)
            try:
                cell = self._cell(self.spec("cfg", (w1, w2)))
                rows.append({"curve": curve, "w": w, "w1": w1, "w2": w2, **cell})
            except Exception as e:
                if best_effort:
                    logger.exception(f"Error sampling {curve} curve at w={w}: {e}")
                else:
                    raise
        frame = pd.DataFrame(rows)
        self._table(frame, "hierarchy.csv")
        return frame

    def _tune_problem(self, method: str, guide: str | None = None) -> BOProblem:
        tune = self.config.tune
        n_weights = 1 if method == "mg" else tune.n_weights
        if method != "mg" and n_weights == 1:
            raise ConfigError(f"Method '{method}' needs 2 or 4 tuned weights")

        def objective(weights: np.ndarray) -> float:
            samples, _ = self.draw(self.spec(method, list(weights), guide=guide), tune.eval_count)
            return property_mae(samples)

        n_initial, n_iterations = MG_BUDGET if method == "mg" else (tune.n_initial, tune.n_iterations)
        return BOProblem(
            objective=objective,
            bounds=tune.bounds if tune.bounds and method != "mg" else default_bounds(method, n_weights),
            n_initial=n_initial,
            n_iterations=n_iterations,
            seed=tune.seed,
        )

    def tune(self, method: str | None = None) -> tuple[BOResult, str | None]:
        """Bayesian-optimize the weights of ``method``; ag keeps the better guide."""
        method = method or self.config.guidance.method
        if method == "vanilla":
            raise ConfigError("Vanilla sampling has no guidance weights to tune")
        guides = [g.name for g in self.config.models.guides] if method == "ag" else [None]
        if not guides:
            raise ConfigError("Autoguidance tuning needs at least one guide model")
        self._log_plan(
            "Tuning Plan",
            {"Method": method, "Guides": guides, "Evaluations": self._budget(method)},
        )
        best: tuple[BOResult, str | None] | None = None
        traces = []
        for guide in guides:
            result = optimize(self._tune_problem(method, guide))
            traces.append(result.trace.assign(method=method, guide=guide or ""))
            if best is None or result.best_value < best[0].best_value:
                best = (result, guide)
        result, guide = best
        self._table(
            pd.concat(traces, ignore_index=True),
            f"tune_trace_{method}.csv",
            seed=self.config.tune.seed,
        )
        with open(self.out_dir / f"tune_incumbent_{method}.json", "w") as f:
            json.dump(
                {
                    "method": method,
                    "guide": guide,
                    "weights": [float(w) for w in result.best_weights],
                    "mae": result.best_value,
                    "config_hash": self.config_hash,
                    "seed": self.config.tune.seed,
                },
                f,
                indent=2,
            )
        return result, guide

    def _budget(self, method: str) -> int:
        if method == "mg":
            return sum(MG_BUDGET)
        return self.config.tune.n_initial + self.config.tune.n_iterations

    def benchmark(self, best_effort: bool = False) -> pd.DataFrame:
        """Compare methods at tuned weights and evaluate the direction-level findings."""
        bench = self.config.benchmark
        self._log_plan(
            "Benchmark Plan",
            {"Methods": ", ".join(bench.methods), "Steps": bench.steps_ablation},
        )
        weights: dict[str, list[float]] = {}
        guides: dict[str, str | None] = {}
        for method in bench.methods:
            if method == "vanilla":
                weights[method] = [1.0, 1.0]
            elif method in bench.tuned_weights:
                weights[method] = list(bench.tuned_weights[method])
            else:
                result, guides[method] = self.tune(method)
                weights[method] = [float(w) for w in result.best_weights]

        baseline = n_atoms_baseline(self.dataset)
        reports: dict[str, MetricReport] = {}
        samples: dict[str, list[GeneratedMolecule]] = {}
        rows = []
        for method in tqdm(bench.methods, desc="Benchmarking", leave=False, unit="method"):
            spec = self.spec(method, weights[method], guide=guides.get(method))
            for steps in bench.steps_ablation:
                try:
                    drawn, seconds = self.draw(spec, steps=steps)
                except Exception as e:
                    if best_effort:
                        logger.exception(f"Error benchmarking {method} with {steps} steps: {e}")
                        continue
                    raise
                report = metric_report(drawn, spec.forward_passes, seconds, mae_max=baseline)
                label = method if len(bench.steps_ablation) == 1 else f"{method}@{steps}"
                reports[label] = report
                samples.setdefault(method, drawn)
                metrics = report.model_dump(exclude={"scaled", "sampling_seconds"})
                weight_text = " ".join(f"{w:.6g}" for w in weights[method])
                rows.append({"method": method, "steps": steps, "weights": weight_text, **metrics})

        frame = pd.DataFrame(rows)
        self._table(frame, "benchmark.csv")
        radar = pd.DataFrame(
            [{"label": label, **report.scaled} for label, report in reports.items()]
        )
        self._table(radar, "radar.csv")

        findings = self._findings(samples)
        self._table(findings_frame(findings), "findings.csv")
        with open(self.out_dir / "reports.json", "w") as f:
            json.dump({label: r.model_dump() for label, r in reports.items()}, f, indent=2)
        markdown = render_benchmark(
            reports,
            {label: weights[label.split("@")[0]] for label in reports},
            findings,
            self.config_hash,
            self.config.sampling.seed,
        )
        (self.out_dir / "benchmark.md").write_text(markdown)
        return frame

    def _findings(self, samples: dict[str, list[GeneratedMolecule]]) -> list[Finding]:
        findings: list[Finding] = []
        if "cfg" in samples and "vanilla" in samples:
            findings.append(paired_improvement("cfg MAE below vanilla", samples["cfg"], samples["vanilla"]))
        if "ag" in samples and "vanilla" in samples:
            findings.append(
                at_most(
                    "vanilla validity at most ag validity",
                    validity_ratio(samples["vanilla"]),
                    validity_ratio(samples["ag"]),
                )
            )
        curves = self.hierarchy()
        best = curves.groupby("curve")["mae"].min()
        findings.append(
            at_most(
                "hybrid MAE at most best unimodal MAE",
                best["hybrid"],
                min(best["continuous"], best["discrete"]),
            )
        )
        top = curves[curves["w"] == curves["w"].max()].set_index("curve")["mae"]
        findings.append(
            less_than("discrete-only MAE below continuous-only", top["discrete"], top["continuous"])
        )
        steps = self.config.benchmark.stability_steps
        stable = self._cell(self.spec("cfg", (1.0, 1.0), "log_rate"), steps=steps)["validity"]
        unstable = self._cell(self.spec("cfg", (1.0, 2.0), "log_rate"), steps=steps)["validity"]
        findings.append(
            at_most("log_rate validity drop at w2=2", unstable + LOG_RATE_VALIDITY_DROP, stable)
        )
        return findings

    def run(self, command: str, best_effort: bool = False) -> object:
        """Run one CLI command under the output-directory lock."""
        if command not in COMMANDS:
            raise ConfigError(f"Unknown command '{command}'")
        with output_lock(self.out_dir):
            if command == "gen-data":
                return self.gen_data()
            if command == "fit":
                return self.fit()
            if command == "sample":
                return self.sample()
            if command == "sweep-formats":
                return self.sweep_formats(best_effort)
            if command == "hierarchy":
                return self.hierarchy(best_effort)
            if command == "tune":
                return self.tune()
            return self.benchmark(best_effort)
