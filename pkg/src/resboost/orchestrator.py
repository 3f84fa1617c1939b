"""Pipeline configuration, stage sequencing and the artifact bundle.

Every stage reads what it needs from the data file and the bundle directory
and writes its own artifact, so stages can be rerun one at a time. JSON
artifacts carry the resolved config under ``"config"``.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import chain as C
from . import gbdt, metrics, regions as R, tpe
from .aggregator import GateConfig, GateModel, passthrough_gate, predict_dataset, train_gate
from .dataset import Dataset, FeatureStats, feature_stats, load_csv, split
from .experts import ExpertArtifact
from .legacy import FrozenModel
from .provider import PROVIDERS, LlmConfig, make_provider
from .serve import load_experts, read_json, write_scores

log = logging.getLogger(__name__)

STAGES = ("legacy", "regions", "evolve", "aggregate", "eval")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block tagged with the stage name."""
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, f"{type(err).__name__}: {err}") from err


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    path: str
    target: str
    id_column: str | None = "row_id"
    train_fraction: float = 0.8


@dataclass(frozen=True)
class LegacySection:
    source: str = "gbdt"  # "gbdt" (trained here) or "score_file"
    features: tuple[str, ...] | None = None  # gbdt inputs; None means every feature
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.05
    min_leaf: int = 100
    score_file: str | None = None


@dataclass(frozen=True)
class RegionSection:
    max_depth: int = 3
    min_leaf: int = 30
    lam: float = 0.7
    c_min: float = 0.15
    k_max: int = 5
    target: str = "abs"  # CART target: |r| or signed r


@dataclass(frozen=True)
class ChainSection:
    T: int = 12
    success_target: int = 5
    tau0: float = 0.002
    tau_decay: float = 0.5
    N: int = 20
    m_top: int = 8
    R: int = 3
    window: float = 0.1
    provider: str = "mock"
    llm: LlmConfig = field(default_factory=LlmConfig)


@dataclass(frozen=True)
class TpeSection:
    M: int = 100
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24


@dataclass(frozen=True)
class GateSection:
    gate_fit_fraction: float = 0.75
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    margin: str = "additive"
    early_stop: str = "auc"


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection
    legacy: LegacySection = field(default_factory=LegacySection)
    regions: RegionSection = field(default_factory=RegionSection)
    chain: ChainSection = field(default_factory=ChainSection)
    tpe: TpeSection = field(default_factory=TpeSection)
    gate: GateSection = field(default_factory=GateSection)
    seed: int = 0
    # run location and parallelism do not change results, so they stay out of artifacts
    workers: int = 1
    output_dir: str = "bundle"

    def __post_init__(self):
        if self.legacy.source not in ("gbdt", "score_file"):
            raise ConfigError(f"legacy.source must be gbdt or score_file, got {self.legacy.source!r}")
        if self.legacy.source == "score_file" and not self.legacy.score_file:
            raise ConfigError("legacy.score_file is required when legacy.source is score_file")
        if self.chain.provider not in PROVIDERS:
            raise ConfigError(f"chain.provider must be one of {PROVIDERS}")
        if self.regions.target not in ("abs", "signed"):
            raise ConfigError("regions.target must be abs or signed")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0.0 < self.data.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        # surfaces gate option errors at load time
        self.gate_config()

    # typed views for the modules
    def chain_config(self) -> C.ChainConfig:
        c = self.chain
        return C.ChainConfig(c.T, c.success_target, c.tau0, c.tau_decay, c.N, c.m_top, c.R,
                             c.window, self.seed)

    def tpe_config(self) -> tpe.TpeConfig:
        t = self.tpe
        return tpe.TpeConfig(t.M, t.n_startup, t.gamma, t.n_candidates, self.seed)

    def gate_config(self) -> GateConfig:
        g = self.gate
        try:
            return GateConfig(g.gate_fit_fraction, g.n_trees, g.max_depth, g.learning_rate,
                              g.min_leaf, self.seed, g.margin, g.early_stop)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def legacy_gbdt_config(self) -> gbdt.GbdtConfig:
        g = self.legacy
        return gbdt.GbdtConfig(g.n_trees, g.max_depth, g.learning_rate, g.min_leaf, self.seed)

    def resolved(self) -> dict:
        """Every setting that affects results, defaults included."""
        d = dataclasses.asdict(self)
        del d["workers"], d["output_dir"]
        return d

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{where}: missing required key {f.name!r}")
            continue
        v = raw[f.name]
        t = hints[f.name]
        if dataclasses.is_dataclass(t):
            v = _build(t, v, f"{where}.{f.name}")
        elif isinstance(v, list):
            v = tuple(v)
        kw[f.name] = v
    try:
        return cls(**kw)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def config_from_dict(d: Mapping) -> PipelineConfig:
    return _build(PipelineConfig, d, "config")


def load_config(path: str | Path, seed: int | None = None, workers: int | None = None,
                output_dir: str | None = None) -> PipelineConfig:
    """Read a JSON config; relative data paths resolve against the config's folder."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    cfg = config_from_dict(raw)
    base = path.parent
    data = cfg.data
    if not Path(data.path).is_absolute():
        data = dataclasses.replace(data, path=str(base / data.path))
    legacy = cfg.legacy
    if legacy.score_file and not Path(legacy.score_file).is_absolute():
        legacy = dataclasses.replace(legacy, score_file=str(base / legacy.score_file))
    changes: dict = {"data": data, "legacy": legacy}
    if seed is not None:
        changes["seed"] = seed
    if workers is not None:
        changes["workers"] = workers
    if output_dir is not None:
        changes["output_dir"] = output_dir
    return dataclasses.replace(cfg, **changes)


# -- bundle I/O -------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: Path, payload: dict, config: PipelineConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump({"config": config.resolved(), **payload}), encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Inputs:
    data: Dataset
    train: Dataset
    val: Dataset
    stats: FeatureStats


def load_inputs(cfg: PipelineConfig) -> Inputs:
    with stage("data"):
        data = load_csv(cfg.data.path, cfg.data.target, id_column=cfg.data.id_column)
        train, val = split(data, cfg.data.train_fraction, cfg.seed)
        stats = feature_stats(train, val)
    return Inputs(data, train, val, stats)


# -- stages -------------------------------------------------------------------


def run_legacy(cfg: PipelineConfig, inp: Inputs, out: Path) -> FrozenModel:
    with stage("legacy"):
        if cfg.legacy.source == "score_file":
            frozen = FrozenModel.from_score_file(cfg.legacy.score_file)
        else:
            feats = cfg.legacy.features or inp.train.feature_names
            cols = [inp.train.feature_index(f) for f in feats]
            model = gbdt.train(inp.train.X[:, cols], inp.train.y, cfg.legacy_gbdt_config(),
                               tuple(feats))
            frozen = FrozenModel.from_gbdt(model)
        val_auc = metrics.auc(inp.val.y, frozen.base_logit(inp.val))
        write_json(out / "schema.json", {"schema": inp.data.schema.to_json(),
                                         "feature_names": list(inp.data.feature_names)}, cfg)
        write_json(out / "legacy.json", {"legacy": frozen.to_json(), "val_auc": val_auc}, cfg)
    return frozen


def load_legacy(out: Path) -> FrozenModel:
    with stage("legacy"):
        return FrozenModel.from_json(read_json(out / "legacy.json")["legacy"])


def run_regions(cfg: PipelineConfig, inp: Inputs, frozen: FrozenModel,
                out: Path) -> tuple[list[R.Region], dict[int, R.RefinementPlan]]:
    rc = cfg.regions
    with stage("regions"):
        if inp.train.n < 2 * rc.min_leaf:
            regions = []
        else:
            regions, _ = R.mine_regions(frozen, inp.train, rc.max_depth, rc.min_leaf, rc.lam,
                                        rc.c_min, rc.k_max, rc.target)
        plans = R.refinement_plans(regions, inp.stats, cfg.chain.window)
        payload = {
            "regions": [r.to_json() for r in regions],
            "plans": [{"region_id": k, "windows": [w.to_json() for w in plans[k].windows],
                       "box": [c.to_json() for c in plans[k].box]} for k in sorted(plans)],
            "feature_stats": inp.stats.to_json(),
        }
        write_json(out / "regions.json", payload, cfg)
    return regions, plans


def load_regions(cfg: PipelineConfig, inp: Inputs,
                 out: Path) -> tuple[list[R.Region], dict[int, R.RefinementPlan]]:
    with stage("regions"):
        d = read_json(out / "regions.json")
        regions = [R.Region.from_json(r, inp.data.feature_names) for r in d["regions"]]
        # plans are a pure function of regions and train/val statistics
        return regions, R.refinement_plans(regions, inp.stats, cfg.chain.window)


@dataclass(frozen=True, eq=False)
class _ChainJob:
    region: R.Region
    ctx: C.ChainContext
    chain: C.ChainConfig
    tpe: tpe.TpeConfig
    provider: str
    llm: LlmConfig
    transcript: str | None


def _run_job(job: _ChainJob) -> tuple[ExpertArtifact, list[dict]]:
    provider = make_provider(job.provider, job.chain.seed, job.llm, job.transcript)
    try:
        return C.run_chain(job.region, job.ctx, provider, job.chain, job.tpe)
    finally:
        close = getattr(provider, "close", None)
        if close is not None:
            close()


def run_evolve(cfg: PipelineConfig, inp: Inputs, frozen: FrozenModel, regions: Sequence[R.Region],
               plans: Mapping[int, R.RefinementPlan], out: Path) -> list[ExpertArtifact]:
    with stage("evolve"):
        jobs = []
        for r in regions:
            transcript = None
            if cfg.chain.provider == "llm":
                transcript = str(out / "chains" / f"provider_{r.id}.jsonl")
                Path(transcript).unlink(missing_ok=True)
            ctx = C.ChainContext.build(frozen, inp.train, inp.val, inp.stats, plans[r.id])
            jobs.append(_ChainJob(r, ctx, cfg.chain_config(), cfg.tpe_config(),
                                  cfg.chain.provider, cfg.chain.llm, transcript))
        workers = min(cfg.workers, len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_job, jobs))
        else:
            results = [_run_job(j) for j in jobs]
        # joined in region-id order whatever the worker count
        experts = []
        (out / "experts").mkdir(parents=True, exist_ok=True)
        (out / "chains").mkdir(parents=True, exist_ok=True)
        for job, (art, records) in zip(jobs, results):
            k = job.region.id
            write_json(out / "experts" / f"expert_{k}.json", {"expert": art.to_json()}, cfg)
            C.write_transcript(records, out / "chains" / f"chain_{k}.jsonl")
            experts.append(art)
        write_json(out / "experts" / "index.json", {"region_ids": [e.region_id for e in experts]}, cfg)
    return experts


def load_all_experts(inp: Inputs, out: Path) -> list[ExpertArtifact]:
    with stage("evolve"):
        ids = read_json(out / "experts" / "index.json")["region_ids"]
        return load_experts(out, inp.data.feature_names, ids)


def run_aggregate(cfg: PipelineConfig, inp: Inputs, frozen: FrozenModel,
                  experts: Sequence[ExpertArtifact], out: Path) -> GateModel:
    names = inp.data.feature_names
    with stage("aggregate"):
        if not experts:
            gate = passthrough_gate(names, experts, "no regions")
        elif all(e.is_null for e in experts):
            gate = passthrough_gate(names, experts, "all experts null")
        else:
            gate = train_gate(inp.train, frozen, experts, cfg.gate_config())
        write_json(out / "aggregate.json", {"aggregate": gate.to_json()}, cfg)
    return gate


def load_gate(out: Path) -> GateModel:
    with stage("aggregate"):
        return GateModel.from_json(read_json(out / "aggregate.json")["aggregate"])


def run_eval(cfg: PipelineConfig, inp: Inputs, frozen: FrozenModel,
             experts: Sequence[ExpertArtifact], gate: GateModel, out: Path) -> dict:
    with stage("eval"):
        legacy_val = frozen.base_proba(inp.val)
        final_val = predict_dataset(inp.val, frozen, experts, gate)
        base = metrics.evaluate(inp.val.y, legacy_val)
        rows = {"legacy": base, "final": metrics.compare(metrics.evaluate(inp.val.y, final_val), base)}
        summary = {
            "split": "validation",
            "reports": {k: v.to_json() for k, v in rows.items()},
            "fallback_flag": gate.fallback,
            "experts": [{"region_id": e.region_id, "null": e.is_null} for e in experts],
        }
        write_json(out / "eval.json", summary, cfg)
        (out / "eval.txt").write_text(metrics.format_reports(rows), encoding="utf-8")
        data = inp.data
        val_ids = set(inp.val.row_ids)
        write_scores(out / "scores.csv", data.row_ids, frozen.base_proba(data),
                     predict_dataset(data, frozen, experts, gate),
                     {"split": ["val" if r in val_ids else "train" for r in data.row_ids],
                      "label": [int(v) for v in data.y]})
    return summary


# -- whole pipeline -------------------------------------------------------------


@dataclass
class PipelineResult:
    out: Path
    frozen: FrozenModel
    regions: list[R.Region]
    experts: list[ExpertArtifact]
    gate: GateModel
    summary: dict
    inputs: Inputs
    seconds: float = 0.0

    @property
    def legacy_val_auc(self) -> float:
        return self.summary["reports"]["legacy"]["auc"]

    @property
    def final_val_auc(self) -> float:
        return self.summary["reports"]["final"]["auc"]


def run_pipeline(cfg: PipelineConfig, out: str | Path | None = None) -> PipelineResult:
    t0 = time.perf_counter()
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {}, cfg)
    inp = load_inputs(cfg)
    frozen = run_legacy(cfg, inp, out)
    regions, plans = run_regions(cfg, inp, frozen, out)
    log.info("%d region(s): %s", len(regions), "; ".join(r.describe() for r in regions))
    experts = run_evolve(cfg, inp, frozen, regions, plans, out)
    gate = run_aggregate(cfg, inp, frozen, experts, out)
    summary = run_eval(cfg, inp, frozen, experts, gate, out)
    res = PipelineResult(out, frozen, regions, experts, gate, summary, inp,
                         time.perf_counter() - t0)
    log.info("legacy val AUC %.6f, final val AUC %.6f (%.1fs)",
             res.legacy_val_auc, res.final_val_auc, res.seconds)
    return res


def bundle_files(out: str | Path) -> dict[str, bytes]:
    """Relative path -> bytes for every file in a bundle."""
    out = Path(out)
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def final_scores(out: str | Path) -> np.ndarray:
    with (Path(out) / "scores.csv").open(newline="", encoding="utf-8") as fh:
        return np.array([float(r["final_proba"]) for r in csv.DictReader(fh)])
