"""Configuration-driven experiments: generation runs, h sweeps, gradient
validation and invocation benchmarks, plus their on-disk reports."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
import timeit
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .gradients import (
    cosine_similarity,
    estimate_gradient_naive,
    estimate_gradient_vectored,
)
from .model import InProcessHandle, ModelHandle, connect_external, load_model, random_mlp
from .pca import pca
from .schema import (
    DatasetSchema,
    is_discriminatory,
    load_dataset,
    load_schema,
    similar_set,
    write_instances,
)
from .search import (
    DiscriminatoryStore,
    GlobalConfig,
    LocalConfig,
    attribute_probabilities,
    global_direction,
    global_generation,
    local_generation,
    select_counterpart,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"model", "external_command", "precision", "timeout", "schema", "dataset",
             "global", "local", "rounds", "rng_seed", "output_dir"}
_GLOBAL_KEYS = set(GlobalConfig.__dataclass_fields__)
_LOCAL_KEYS = set(LocalConfig.__dataclass_fields__) - {"rng_seed"}


def _reject_unknown(section: str, got: dict, allowed: set) -> None:
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {extra}")


@dataclass
class ExperimentConfig:
    schema: str
    dataset: str
    model: Optional[str] = None
    external_command: Optional[list] = None
    precision: str = "float64"
    timeout: float = 10.0
    global_: GlobalConfig = field(default_factory=GlobalConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    rounds: int = 1
    rng_seed: int = 0
    output_dir: str = "out"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        if (self.model is None) == (self.external_command is None):
            raise ConfigError("exactly one of 'model' and 'external_command' is required")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown("config", data, _TOP_KEYS)
        g = data.get("global", {})
        loc = data.get("local", {})
        _reject_unknown("global", g, _GLOBAL_KEYS)
        _reject_unknown("local", loc, _LOCAL_KEYS)
        for key in ("schema", "dataset"):
            if key not in data:
                raise ConfigError(f"missing required key {key!r}")
        try:
            cfg = cls(
                schema=data["schema"], dataset=data["dataset"], model=data.get("model"),
                external_command=data.get("external_command"),
                precision=data.get("precision", "float64"),
                timeout=float(data.get("timeout", 10.0)),
                global_=GlobalConfig(**g), local=LocalConfig(**loc),
                rounds=int(data.get("rounds", 1)), rng_seed=int(data.get("rng_seed", 0)),
                output_dir=data.get("output_dir", "out"), base_dir=Path(base_dir),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        for key in ("schema", "dataset", "model"):
            value = getattr(cfg, key)
            if value is not None and not cfg.resolve(value).exists():
                raise ConfigError(f"{key} path does not exist: {cfg.resolve(value)}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        """Config echo; the output directory is left out since it does not
        affect results."""
        out = {"schema": self.schema, "dataset": self.dataset}
        if self.model is not None:
            out["model"] = self.model
            out["precision"] = self.precision
        else:
            out["external_command"] = list(self.external_command)
            out["timeout"] = self.timeout
        out["global"] = self.global_.to_dict()
        local = self.local.to_dict()
        local.pop("rng_seed")
        out["local"] = local
        out["rounds"] = self.rounds
        out["rng_seed"] = self.rng_seed
        return out

    def with_perturbation_size(self, h: float) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.global_.perturbation_size = float(h)
        cfg.local.perturbation_size = float(h)
        return cfg


@dataclass
class Workspace:
    """Everything loaded from a config: schema, data and a live model handle."""

    schema: DatasetSchema
    data: np.ndarray
    handle: ModelHandle

    @classmethod
    def open(cls, cfg: ExperimentConfig) -> "Workspace":
        schema = load_schema(cfg.resolve(cfg.schema))
        data = load_dataset(cfg.resolve(cfg.dataset), schema)
        if len(data) == 0:
            raise ConfigError("dataset has no rows")
        if cfg.model is not None:
            model = load_model(cfg.resolve(cfg.model))
            if model.input_dim != len(schema):
                raise ConfigError(
                    f"model input_dim {model.input_dim} != {len(schema)} schema attributes")
            handle = InProcessHandle(model, precision=cfg.precision)
        else:
            handle = connect_external(cfg.external_command, len(schema),
                                      timeout=cfg.timeout, cwd=cfg.base_dir)
        return cls(schema, data, handle)

    def close(self):
        self.handle.close()


# --- generation -------------------------------------------------------------

@dataclass
class RoundResult:
    round: int
    rng_seed: int
    store: DiscriminatoryStore
    global_invocations: int
    local_invocations: int
    global_seconds: float
    local_seconds: float

    def counts(self) -> dict:
        s = self.store
        total = len(s.all_instances())
        iters = s.global_iterations + s.local_iterations
        return {
            "round": self.round,
            "rng_seed": self.rng_seed,
            "global": {
                "seeds": s.global_seeds,
                "iterations": s.global_iterations,
                "discriminatory_raw": s.global_successes,
                "discriminatory_unique": len(s.global_ids),
                "success_rate": s.global_successes / s.global_seeds if s.global_seeds else 0.0,
                "invocations": self.global_invocations,
            },
            "local": {
                "seeds": len(s.global_ids),
                "iterations": s.local_iterations,
                "discriminatory_raw": s.local_successes,
                "discriminatory_unique": len(s.local_ids),
                "success_rate": s.local_successes / s.local_iterations if s.local_iterations else 0.0,
                "invocations": self.local_invocations,
            },
            "total_unique": total,
            "success_rate_per_iteration":
                (s.global_successes + s.local_successes) / iters if iters else 0.0,
        }

    def timings(self) -> dict:
        s = self.store
        return {
            "round": self.round,
            "global_seconds": self.global_seconds,
            "local_seconds": self.local_seconds,
            "global_speed": _rate(len(s.global_ids), self.global_seconds),
            "local_speed": _rate(len(s.local_ids), self.local_seconds),
            "total_speed": _rate(len(s.all_instances()), self.global_seconds + self.local_seconds),
        }


def _rate(count: int, seconds: float) -> float:
    return count / seconds if seconds > 0 else 0.0


@dataclass
class RunReport:
    config: dict
    rounds: list
    global_ids: list
    local_ids: list
    verified: int = 0
    verification_failures: int = 0
    tag: Optional[dict] = None

    @property
    def instances(self) -> list:
        return list(dict.fromkeys([*self.global_ids, *self.local_ids]))

    @property
    def passed(self) -> bool:
        return self.verification_failures == 0

    def results(self) -> dict:
        """Deterministic part of the report: identical across reruns."""
        per_round = [r.counts() for r in self.rounds]
        n = len(per_round)
        out = {
            "toolkit": "zofair",
            "version": __version__,
            "config": self.config,
            "rounds": per_round,
            "aggregate": {
                "global_unique": len(self.global_ids),
                "local_unique": len(self.local_ids),
                "total_unique": len(self.instances),
                "global_raw": sum(r["global"]["discriminatory_raw"] for r in per_round),
                "local_raw": sum(r["local"]["discriminatory_raw"] for r in per_round),
                "global_success_rate": sum(r["global"]["success_rate"] for r in per_round) / n,
                "local_success_rate": sum(r["local"]["success_rate"] for r in per_round) / n,
                "success_rate_per_iteration":
                    sum(r["success_rate_per_iteration"] for r in per_round) / n,
                "invocations": sum(r["global"]["invocations"] + r["local"]["invocations"]
                                   for r in per_round),
            },
            "verification": {
                "checked": self.verified,
                "failed": self.verification_failures,
                "passed": self.passed,
            },
        }
        if self.tag is not None:
            out["tag"] = self.tag
        return out

    def timings(self) -> dict:
        per_round = [r.timings() for r in self.rounds]
        g = sum(r["global_seconds"] for r in per_round)
        loc = sum(r["local_seconds"] for r in per_round)
        return {
            "rounds": per_round,
            "aggregate": {
                "global_seconds": g,
                "local_seconds": loc,
                "global_speed": _rate(len(self.global_ids), g),
                "local_speed": _rate(len(self.local_ids), loc),
                "total_speed": _rate(len(self.instances), g + loc),
            },
        }

    def to_dict(self) -> dict:
        return {**self.results(), "timings": self.timings()}


def run_generation(ws: Workspace, cfg: ExperimentConfig, jobs: int = 1) -> RunReport:
    rounds = []
    for r in range(cfg.rounds):
        seed = cfg.rng_seed + r
        store = DiscriminatoryStore()
        n0 = ws.handle.invocations
        t0 = time.perf_counter()
        global_generation(ws.handle, ws.data, ws.schema, cfg.global_, rng_seed=seed,
                          jobs=jobs, store=store)
        t1 = time.perf_counter()
        n1 = ws.handle.invocations
        local_cfg = replace(cfg.local, rng_seed=seed)
        local_generation(ws.handle, list(store.global_ids), ws.schema, local_cfg,
                         jobs=jobs, store=store)
        t2 = time.perf_counter()
        rounds.append(RoundResult(r, seed, store, n1 - n0, ws.handle.invocations - n1,
                                  t1 - t0, t2 - t1))
        logger.info("round %d: %d global, %d local unique", r,
                    len(store.global_ids), len(store.local_ids))
    global_ids = list(dict.fromkeys(k for r in rounds for k in r.store.global_ids))
    local_ids = list(dict.fromkeys(k for r in rounds for k in r.store.local_ids))
    report = RunReport(cfg.to_dict(), rounds, global_ids, local_ids)
    verify(ws, report)
    return report


def verify(ws: Workspace, report: RunReport) -> None:
    """Re-query the model for every stored instance."""
    failures = 0
    for inst in report.instances:
        if is_discriminatory(ws.handle, inst, ws.schema) is None:
            failures += 1
    report.verified = len(report.instances)
    report.verification_failures = failures


def cmd_generate(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> RunReport:
    ws = Workspace.open(cfg)
    try:
        report = run_generation(ws, cfg, jobs=jobs)
    finally:
        ws.close()
    emit_reports(report, out_dir or cfg.resolve(cfg.output_dir), ws.schema)
    return report


def cmd_sweep(cfg: ExperimentConfig, h_values, out_dir=None, jobs: int = 1) -> list:
    h_values = [float(h) for h in h_values]
    if not h_values:
        raise ConfigError("sweep needs at least one h value")
    out = Path(out_dir or cfg.resolve(cfg.output_dir))
    ws = Workspace.open(cfg)
    reports = []
    try:
        for i, h in enumerate(h_values):
            report = run_generation(ws, cfg.with_perturbation_size(h), jobs=jobs)
            report.tag = {"index": i, "perturbation_size": h}
            emit_reports(report, out / f"h{i:02d}_{h:g}", ws.schema)
            reports.append(report)
    finally:
        ws.close()
    rows = []
    for i, (h, rep) in enumerate(zip(h_values, reports)):
        res, tim = rep.results()["aggregate"], rep.timings()["aggregate"]
        rows.append({"index": i, "perturbation_size": h,
                     "global_unique": res["global_unique"], "local_unique": res["local_unique"],
                     "total_unique": res["total_unique"],
                     "global_success_rate": res["global_success_rate"],
                     "local_success_rate": res["local_success_rate"],
                     "seconds": tim["global_seconds"] + tim["local_seconds"],
                     "total_speed": tim["total_speed"]})
    _write_csv(out / "sweep.csv", rows)
    return reports


# --- gradient validation ----------------------------------------------------

@dataclass
class GradientValidationReport:
    perturbation_size: float
    sample_count: int
    gradient_similarity: list
    direction_similarity: list  # None where the pair is already discriminatory
    probability_similarity: list
    timings: dict
    pca_coords: dict
    pca_components: list
    pca_variance: list

    def summary(self) -> dict:
        dirs = [d for d in self.direction_similarity if d is not None]
        return {
            "perturbation_size": self.perturbation_size,
            "samples": self.sample_count,
            "gradient_similarity_mean": float(np.mean(self.gradient_similarity)),
            "direction_similarity_mean": float(np.mean(dirs)) if dirs else None,
            "direction_pairs_used": len(dirs),
            "probability_similarity_mean": float(np.mean(self.probability_similarity)),
            "timings": self.timings,
            "pca_explained_variance": self.pca_variance,
        }


def _timed(fn, items):
    t0 = time.perf_counter()
    out = [fn(x) for x in items]
    return out, time.perf_counter() - t0


def validate_gradients(ws: Workspace, h: float, sample_count: int,
                       rng_seed: int = 0) -> GradientValidationReport:
    if not isinstance(ws.handle, InProcessHandle):
        raise ConfigError("gradient validation needs an in-process model (the backprop "
                          "reference is unavailable for external oracles)")
    handle, model, schema = ws.handle, ws.handle.model, ws.schema
    rng = np.random.default_rng(rng_seed)
    n = min(sample_count, len(ws.data))
    samples = ws.data[rng.choice(len(ws.data), size=n, replace=False)]

    zo, t_zo = _timed(lambda x: estimate_gradient_vectored(handle, x, h).values, samples)
    _, t_naive = _timed(lambda x: estimate_gradient_naive(handle, x, h).values, samples)
    bp, t_bp = _timed(lambda x: model.output_gradients(x[None, :])[0], samples)
    loss, t_loss = _timed(
        lambda x: model.loss_gradients(x[None, :], int(model.forward(x)[0] > 0.5))[0], samples)
    grad_sim = [cosine_similarity(a, b) for a, b in zip(zo, bp)]

    pairs = [select_counterpart(handle, x, similar_set(x, schema)) for x in samples]
    labels = [(handle.predict(x)[0] > 0.5, handle.predict(p)[0] > 0.5)
              for x, p in zip(samples, pairs)]

    def zo_grads(x, p):
        return (estimate_gradient_vectored(handle, x, h).values,
                estimate_gradient_vectored(handle, p, h).values)

    def bp_grads(x, p):
        g = model.output_gradients(np.vstack([x, p]))
        return g[0], g[1]

    usable = [i for i, (a, b) in enumerate(labels) if a == b]
    dir_zo, t_dir_zo = _timed(lambda i: global_direction(*zo_grads(samples[i], pairs[i]), schema),
                              usable)
    dir_bp, t_dir_bp = _timed(lambda i: global_direction(*bp_grads(samples[i], pairs[i]), schema),
                              usable)
    dir_sim: list = [None] * n
    for i, a, b in zip(usable, dir_zo, dir_bp):
        dir_sim[i] = cosine_similarity(a, b)

    idx = range(n)
    prob_zo, t_prob_zo = _timed(
        lambda i: attribute_probabilities(*zo_grads(samples[i], pairs[i]), schema), idx)
    prob_bp, t_prob_bp = _timed(
        lambda i: attribute_probabilities(*bp_grads(samples[i], pairs[i]), schema), idx)
    prob_sim = [cosine_similarity(a, b) for a, b in zip(prob_zo, prob_bp)]

    pooled = np.vstack([zo, bp, loss])
    coords, comps, var = pca(pooled, 2)
    methods = ("zero_order", "backprop_output", "backprop_loss")
    pca_coords = {m: coords[k * n:(k + 1) * n].tolist() for k, m in enumerate(methods)}

    timings = {
        "gradient": {"zero_order": t_zo, "zero_order_naive": t_naive,
                     "backprop_output": t_bp, "backprop_loss": t_loss},
        "direction": {"zero_order": t_dir_zo, "backprop_output": t_dir_bp},
        "probability": {"zero_order": t_prob_zo, "backprop_output": t_prob_bp},
    }
    return GradientValidationReport(float(h), n, grad_sim, dir_sim, prob_sim, timings,
                                    pca_coords, comps.tolist(), var.tolist())


def cmd_validate_gradients(cfg: ExperimentConfig, sample_count: int, out_dir=None
                           ) -> GradientValidationReport:
    if cfg.model is None:
        raise ConfigError("validate-gradients needs an in-process model; "
                          "external oracles expose no exact gradients")
    ws = Workspace.open(cfg)
    try:
        report = validate_gradients(ws, cfg.global_.perturbation_size, sample_count,
                                    cfg.rng_seed)
    finally:
        ws.close()
    out = Path(out_dir or cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "validation.json", {"config": cfg.to_dict(), **report.summary()})
    _write_csv(out / "similarities.csv", [
        {"sample": i, "gradient": g, "direction": "" if d is None else d, "probability": p}
        for i, (g, d, p) in enumerate(zip(report.gradient_similarity,
                                          report.direction_similarity,
                                          report.probability_similarity))])
    _write_csv(out / "pca.csv", [
        {"method": m, "sample": i, "pc1": c[0], "pc2": c[1]}
        for m, pts in report.pca_coords.items() for i, c in enumerate(pts)])
    return report


# --- invocation benchmark ---------------------------------------------------

BENCH_WIDTHS = (8, 16, 137)
BENCH_HIDDEN = (50, 30, 15, 10, 5)


def bench_invocations(handle: ModelHandle, repeats: int = 5, h: float = 1.0,
                      rng_seed: int = 0) -> dict:
    """Invocation counts and best-of-``repeats`` wall time of naive, vectored
    and backprop gradients at a single random point."""
    rng = np.random.default_rng(rng_seed)
    x = rng.integers(0, 5, size=handle.input_dim).astype(np.float64)
    n = handle.input_dim
    before = handle.invocations
    estimate_gradient_naive(handle, x, h)
    naive_calls = handle.invocations - before
    before = handle.invocations
    estimate_gradient_vectored(handle, x, h)
    vec_calls = handle.invocations - before
    if naive_calls != n + 1 or vec_calls != 2:
        raise AssertionError(
            f"n={n}: naive used {naive_calls} invocations (want {n + 1}), "
            f"vectored {vec_calls} (want 2)")
    row = {"n": n, "naive_invocations": naive_calls, "vectored_invocations": vec_calls}

    def best(fn):
        # fastest of the repeats: the least disturbed by other load
        return min(timeit.repeat(fn, number=1, repeat=repeats))

    row["naive_seconds"] = best(lambda: estimate_gradient_naive(handle, x, h))
    row["vectored_seconds"] = best(lambda: estimate_gradient_vectored(handle, x, h))
    if isinstance(handle, InProcessHandle):
        row["backprop_seconds"] = best(lambda: handle.model.output_gradients(x[None, :]))
    else:
        row["backprop_seconds"] = None
    row["naive_over_vectored"] = row["naive_seconds"] / row["vectored_seconds"]
    return row


def cmd_invocation_bench(cfg: ExperimentConfig, out_dir=None, repeats: int = 5) -> list:
    ws = Workspace.open(cfg)
    rows = []
    try:
        h = cfg.global_.perturbation_size
        rows.append({"model": "config", **bench_invocations(ws.handle, repeats, h, cfg.rng_seed)})
        for width in BENCH_WIDTHS:
            gen = InProcessHandle(random_mlp(width, BENCH_HIDDEN, seed=cfg.rng_seed + width),
                                  precision=cfg.precision)
            rows.append({"model": f"generated_{width}",
                         **bench_invocations(gen, repeats, h, cfg.rng_seed)})
    finally:
        ws.close()
    out = Path(out_dir or cfg.resolve(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bench.json", {"config": cfg.to_dict(), "rows": rows})
    _write_csv(out / "bench.csv", rows)
    return rows


# --- report files -----------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def emit_reports(report: RunReport, out_dir, schema: DatasetSchema) -> Path:
    """Write report.json (deterministic), timings.json (wall clock) and
    the instance CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.results())
    _write_json(out / "timings.json", report.timings())
    write_instances(out / "instances.csv", report.instances, schema)
    write_instances(out / "global_instances.csv", report.global_ids, schema)
    write_instances(out / "local_instances.csv", report.local_ids, schema)
    _write_csv(out / "rounds.csv", [
        {"round": c["round"], "global_unique": c["global"]["discriminatory_unique"],
         "local_unique": c["local"]["discriminatory_unique"], "total_unique": c["total_unique"],
         "global_seconds": t["global_seconds"], "local_seconds": t["local_seconds"],
         "total_speed": t["total_speed"]}
        for c, t in zip(report.results()["rounds"], report.timings()["rounds"])])
    return out
