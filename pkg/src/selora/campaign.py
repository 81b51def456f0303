"""Paired experiment campaigns and the append-only CSV ledger.

One *cell* is a (model, seed) pair. For each cell the standard recipe (adapters
on every layer) and the selective recipe (probe, top-k% selection, adapters on
the selected layers) train from the same frozen base with the same optimiser
settings on one worker, alternating single optimizer steps so that drift in
machine speed hits both alike. The optional compute-matched recipe re-trains
the selective plan for ``steps_cm`` steps alongside them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import kernels
from .data import Dataset, DatasetSpec, generate_dataset
from .evaluation import BENCHMARKS, benchmark_suite, eval_loss, score_benchmark
from .model import (LoraPlan, ModelConfig, build_model, count_trainable, inject_lora,
                    load_checkpoint, save_checkpoint)
from .probe import ProbeConfig, build_plan, gradient_probe, select_layers
from .trainer import TrainConfig, pretrain_base, train, train_interleaved

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 123, 999)
RECIPES = ("base", "standard", "selective", "selective_cm")
LEDGER_COLUMNS = ("model", "recipe", "seed", "steps", "probe_time_s", "train_time_s", "eval_loss",
                  "bench_mmlu", "bench_math", "bench_code", "selected_layers", "trainable_params",
                  "status", "failure_reason")

DESK_MODELS = {
    "desk-8": ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ff=128, seed=8,
                          name="desk-8", family="desk-small"),
    "desk-12": ModelConfig(n_layers=12, d_model=128, n_heads=4, d_ff=256, seed=12,
                           name="desk-12", family="desk-medium"),
    "desk-16": ModelConfig(n_layers=16, d_model=128, n_heads=4, d_ff=256, seed=16,
                           name="desk-16", family="desk-medium"),
}


class LedgerError(ValueError):
    pass


def _fmt_real(x: float | None) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def _parse_real(s: str) -> float | None:
    return None if s == "" else float(s)


def _round6(x: float | None) -> float | None:
    return None if x is None else float(f"{x:.6g}")


@dataclass(frozen=True)
class RunRecord:
    model: str
    recipe: str
    seed: int
    steps: int
    probe_time_s: float | None = None
    train_time_s: float | None = None
    eval_loss: float | None = None
    bench_mmlu: float | None = None
    bench_math: float | None = None
    bench_code: float | None = None
    selected_layers: tuple[int, ...] = ()
    trainable_params: int = 0
    status: str = "ok"
    failure_reason: str = ""

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise LedgerError(f"status must be ok or failed, got {self.status!r}")
        if self.status == "failed" and not self.failure_reason:
            raise LedgerError("failed records need a failure_reason")
        if not self.model:
            raise LedgerError("model name required")
        object.__setattr__(self, "selected_layers", tuple(int(v) for v in self.selected_layers))

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.model, self.recipe, self.seed, self.steps)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def bench(self, name: str) -> float | None:
        return getattr(self, f"bench_{name}")

    def normalized(self) -> "RunRecord":
        """The record as it reads back from CSV (reals at 6 significant digits)."""
        reals = {f: _round6(getattr(self, f)) for f in
                 ("probe_time_s", "train_time_s", "eval_loss", "bench_mmlu", "bench_math", "bench_code")}
        return replace(self, **reals)

    def to_row(self) -> list[str]:
        return [self.model, self.recipe, str(self.seed), str(self.steps),
                _fmt_real(self.probe_time_s), _fmt_real(self.train_time_s), _fmt_real(self.eval_loss),
                _fmt_real(self.bench_mmlu), _fmt_real(self.bench_math), _fmt_real(self.bench_code),
                ";".join(str(v) for v in self.selected_layers), str(self.trainable_params),
                self.status, self.failure_reason]

    @classmethod
    def from_row(cls, row: list[str]) -> "RunRecord":
        if len(row) != len(LEDGER_COLUMNS):
            raise ValueError(f"expected {len(LEDGER_COLUMNS)} fields, got {len(row)}")
        d = dict(zip(LEDGER_COLUMNS, row))
        return cls(
            model=d["model"], recipe=d["recipe"], seed=int(d["seed"]), steps=int(d["steps"]),
            probe_time_s=_parse_real(d["probe_time_s"]), train_time_s=_parse_real(d["train_time_s"]),
            eval_loss=_parse_real(d["eval_loss"]), bench_mmlu=_parse_real(d["bench_mmlu"]),
            bench_math=_parse_real(d["bench_math"]), bench_code=_parse_real(d["bench_code"]),
            selected_layers=tuple(int(v) for v in d["selected_layers"].split(";") if v != ""),
            trainable_params=int(d["trainable_params"]), status=d["status"],
            failure_reason=d["failure_reason"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_layers"] = list(self.selected_layers)
        return d


class Ledger:
    """Append-only run ledger backed by a CSV file (header row, UTF-8, LF)."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[RunRecord] = []
        self._keys: dict[tuple, RunRecord] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, key) -> bool:
        return key in self._keys

    def get(self, key) -> RunRecord | None:
        return self._keys.get(key)

    def append(self, record: RunRecord) -> RunRecord:
        if record.key in self._keys:
            raise LedgerError(f"duplicate ledger key {record.key}")
        record = record.normalized()
        if self.path is not None:
            new = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if new:
                    w.writerow(LEDGER_COLUMNS)
                w.writerow(record.to_row())
                fh.flush()
                os.fsync(fh.fileno())
        self.records.append(record)
        self._keys[record.key] = record
        return record

    def ok_records(self) -> list[RunRecord]:
        return [r for r in self.records if r.ok]

    @classmethod
    def load(cls, path) -> "Ledger":
        ledger = cls(path)
        path = Path(path)
        if not path.exists():
            return ledger
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return ledger
            if tuple(header) != LEDGER_COLUMNS:
                raise LedgerError(f"{path}:1: unexpected header {header}")
            for row in reader:
                lineno = reader.line_num
                try:
                    rec = RunRecord.from_row(row)
                except (ValueError, LedgerError) as exc:
                    raise LedgerError(f"{path}:{lineno}: malformed row ({exc})") from exc
                if rec.key in ledger._keys:
                    raise LedgerError(f"{path}:{lineno}: duplicate key {rec.key}")
                ledger.records.append(rec)
                ledger._keys[rec.key] = rec
        return ledger


def ledger_append(ledger: Ledger, record: RunRecord) -> RunRecord:
    return ledger.append(record)


def ledger_load(path) -> Ledger:
    return Ledger.load(path)


# --------------------------------------------------------------------------
# campaign specification
# --------------------------------------------------------------------------

@dataclass
class CampaignSpec:
    model_configs: list[ModelConfig] = field(default_factory=lambda: list(DESK_MODELS.values()))
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    recipes: tuple[str, ...] = ("standard", "selective")
    steps_matched: int = 200
    steps_cm: int = 250
    select_percent: float = 50.0
    attn_rank: int = 16
    mlp_rank: int = 16
    alpha: float = 32.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_max=1e-3))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain_grammar: str = "pretrain"
    pretrain_steps: int = 1000
    pretrain_lr: float = 3e-3
    pretrain_micro_batch: int = 8
    benchmarks: tuple[str, ...] = BENCHMARKS
    bench_items: int = 200
    jobs: int | None = None
    force_diverge: tuple[tuple[str, str, int], ...] = ()
    work_dir: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.recipes = tuple(self.recipes)
        self.force_diverge = tuple(tuple(x) for x in self.force_diverge)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be non-empty and distinct")
        if self.steps_cm <= self.steps_matched:
            raise ValueError("steps_cm must exceed steps_matched")
        bad = set(self.recipes) - {"standard", "selective", "selective_cm"}
        if bad:
            raise ValueError(f"unknown recipe(s): {sorted(bad)}")
        if "selective_cm" in self.recipes and "selective" not in self.recipes:
            raise ValueError("selective_cm needs the matched selective run")
        names = [m.name for m in self.model_configs]
        if len(set(names)) != len(names):
            raise ValueError("model config names must be unique")

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSpec":
        d = dict(d)
        if "model_configs" in d:
            d["model_configs"] = [DESK_MODELS[m] if isinstance(m, str) else ModelConfig.from_dict(m)
                                  for m in d["model_configs"]]
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "probe" in d:
            d["probe"] = ProbeConfig(**d["probe"])
        if "dataset" in d:
            d["dataset"] = DatasetSpec(**d["dataset"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown campaign field(s): {sorted(unknown)}")
        return cls(**d)

    def resolved_jobs(self) -> int:
        if self.jobs is not None:
            return max(1, int(self.jobs))
        return max(1, int(os.environ.get("SELORA_JOBS", "1")))


# --------------------------------------------------------------------------
# shared per-model context
# --------------------------------------------------------------------------

@dataclass
class ModelContext:
    config: ModelConfig
    base: object
    data: Dataset
    suite: dict


def _dataset_spec(spec: CampaignSpec, cfg: ModelConfig, grammar: str | None = None) -> DatasetSpec:
    return replace(spec.dataset, vocab_size=cfg.vocab_size, seq_len=cfg.max_seq,
                   task_grammar_id=grammar or spec.dataset.task_grammar_id)


def _base_path(spec: CampaignSpec, cfg: ModelConfig, work_dir: Path) -> Path:
    ident = json.dumps([cfg.to_dict(), spec.pretrain_grammar, spec.pretrain_steps, spec.pretrain_lr,
                        spec.pretrain_micro_batch,
                        _dataset_spec(spec, cfg, spec.pretrain_grammar).to_dict(),
                        {k: v for k, v in asdict(spec.train).items()
                         if k not in ("lr_max", "total_steps", "seed", "micro_batch")}], sort_keys=True)
    digest = hashlib.sha256(ident.encode()).hexdigest()[:12]
    return work_dir / f"base-{cfg.name}-{digest}.ckpt"


def prepare_base(spec: CampaignSpec, cfg: ModelConfig, work_dir: Path | None):
    """Build and briefly pretrain the frozen base model; cached as a checkpoint."""
    path = _base_path(spec, cfg, work_dir) if work_dir is not None else None
    if path is not None and path.exists():
        return load_checkpoint(path)
    model = build_model(cfg)
    if spec.pretrain_steps > 0:
        pre = generate_dataset(_dataset_spec(spec, cfg, spec.pretrain_grammar))
        tc = replace(spec.train, lr_max=spec.pretrain_lr, total_steps=spec.pretrain_steps,
                     micro_batch=spec.pretrain_micro_batch,
                     warmup_steps=min(spec.train.warmup_steps, spec.pretrain_steps - 1),
                     seed=cfg.seed)
        result = pretrain_base(model, pre, tc)
        log.info("pretrained %s: loss %.4f -> %.4f in %.1fs", cfg.name, result.step_losses[0],
                 result.final_train_loss, result.wall_time_s)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
    return model


def model_context(spec: CampaignSpec, cfg: ModelConfig, work_dir: Path | None) -> ModelContext:
    base = prepare_base(spec, cfg, work_dir)
    data = generate_dataset(_dataset_spec(spec, cfg))
    suite = {k: v for k, v in benchmark_suite(spec.bench_items, seed=spec.dataset.seed,
                                               vocab_size=cfg.vocab_size,
                                               world_seed=spec.dataset.world_seed).items()
             if k in spec.benchmarks}
    return ModelContext(cfg, base, data, suite)


def _warmup(ctx: ModelContext, spec: CampaignSpec) -> None:
    # JIT-load every kernel outside any timed region
    model = ctx.base.clone()
    inject_lora(model, build_plan(range(model.n_layers), 1, 1, 1.0))
    tc = replace(spec.train, total_steps=2, warmup_steps=1, seed=0)
    train(model, ctx.data, tc)
    eval_loss(model, ctx.data.eval_set)


def _scores(model, ctx: ModelContext) -> dict:
    out = {f"bench_{n}": None for n in BENCHMARKS}
    for name, task in ctx.suite.items():
        out[f"bench_{name}"] = score_benchmark(model, task).accuracy
    return out


def base_record(ctx: ModelContext) -> RunRecord:
    return RunRecord(model=ctx.config.name, recipe="base", seed=ctx.config.seed, steps=0,
                     eval_loss=eval_loss(ctx.base, ctx.data.eval_set), **_scores(ctx.base, ctx))


def _train_config(spec: CampaignSpec, seed: int, steps: int, model: str, recipe: str) -> TrainConfig:
    tc = replace(spec.train, total_steps=steps, seed=seed,
                 warmup_steps=min(spec.train.warmup_steps, steps - 1))
    if (model, recipe, seed) in spec.force_diverge:
        tc = replace(tc, lr_max=math.nan)
    return tc


@dataclass
class _Job:
    """One adapter run set up and ready to train."""

    recipe: str
    seed: int
    steps: int
    model: object
    plan: LoraPlan
    config: TrainConfig
    probe_time: float | None
    n_trainable: int


def _prepare(ctx: ModelContext, spec: CampaignSpec, recipe: str, seed: int, steps: int,
             selected, probe_time: float | None) -> _Job:
    model = ctx.base.clone()
    plan = build_plan(selected, spec.attn_rank, spec.mlp_rank, spec.alpha)
    inject_lora(model, plan, seed=seed)
    tc = _train_config(spec, seed, steps, ctx.config.name, recipe)
    return _Job(recipe, seed, steps, model, plan, tc, probe_time, count_trainable(model))


def _finish(ctx: ModelContext, spec: CampaignSpec, job: _Job, result) -> RunRecord:
    cfg = ctx.config
    if spec.work_dir:
        loss_dir = Path(spec.work_dir) / "losses"
        loss_dir.mkdir(parents=True, exist_ok=True)
        (loss_dir / f"{cfg.name}-{job.recipe}-{job.seed}-{job.steps}.json").write_text(
            json.dumps(result.step_losses))
    common = dict(model=cfg.name, recipe=job.recipe, seed=job.seed, steps=job.steps,
                  probe_time_s=job.probe_time, selected_layers=job.plan.selected,
                  trainable_params=job.n_trainable, train_time_s=result.wall_time_s)
    if result.status != "ok":
        return RunRecord(**common, status="failed", failure_reason=result.failure_reason)
    return RunRecord(**common, eval_loss=eval_loss(job.model, ctx.data.eval_set), **_scores(job.model, ctx))


def _train_jobs(ctx: ModelContext, spec: CampaignSpec, jobs: list[_Job]) -> list[RunRecord]:
    """Train the jobs step-interleaved on this worker and turn them into records."""
    out = []
    try:
        results = train_interleaved([(j.model, ctx.data, j.config) for j in jobs])
    except Exception as exc:  # a failed cell must not abort the campaign
        log.exception("training failed")
        return [_failed(ctx.config, j.recipe, j.seed, j.steps, exc) for j in jobs]
    for job, result in zip(jobs, results):
        try:
            out.append(_finish(ctx, spec, job, result))
        except Exception as exc:
            log.exception("evaluation failed")
            out.append(_failed(ctx.config, job.recipe, job.seed, job.steps, exc))
    return out


def _failed(cfg: ModelConfig, recipe: str, seed: int, steps: int, exc: Exception) -> RunRecord:
    return RunRecord(model=cfg.name, recipe=recipe, seed=seed, steps=steps, status="failed",
                     failure_reason=f"{type(exc).__name__}: {exc}")


def _probe_selection(ctx: ModelContext, seed: int, spec: CampaignSpec) -> tuple[tuple[int, ...], float]:
    batches = ctx.data.train_batches(spec.probe.n_batches, spec.train.micro_batch, seed)
    report = gradient_probe(ctx.base, batches, spec.probe)
    return tuple(select_layers(report, spec.select_percent, ctx.config.n_layers)), report.elapsed_s


def run_standard(ctx: ModelContext, seed: int, spec: CampaignSpec) -> RunRecord:
    try:
        job = _prepare(ctx, spec, "standard", seed, spec.steps_matched, range(ctx.config.n_layers), None)
    except Exception as exc:
        return _failed(ctx.config, "standard", seed, spec.steps_matched, exc)
    return _train_jobs(ctx, spec, [job])[0]


def run_selective(ctx: ModelContext, seed: int, spec: CampaignSpec) -> RunRecord:
    try:
        selected, probe_time = _probe_selection(ctx, seed, spec)
        job = _prepare(ctx, spec, "selective", seed, spec.steps_matched, selected, probe_time)
    except Exception as exc:
        log.exception("selective run failed")
        return _failed(ctx.config, "selective", seed, spec.steps_matched, exc)
    return _train_jobs(ctx, spec, [job])[0]


def run_pair(model_config: ModelConfig, seed: int, spec: CampaignSpec,
             ctx: ModelContext | None = None) -> dict:
    """Standard and selective runs from one base, step-interleaved on this worker."""
    if ctx is None:
        ctx = model_context(spec, model_config, Path(spec.work_dir) if spec.work_dir else None)
    _warmup(ctx, spec)
    recs = _run_cell(spec, model_config, seed, ("standard", "selective"), None, ctx, warm=False)
    return {"std": recs[0], "sel": recs[1]}


def run_compute_matched(model_config: ModelConfig, seed: int, spec: CampaignSpec,
                        matched: RunRecord | None, ctx: ModelContext | None = None) -> RunRecord:
    """Re-train the matched run's layer selection for ``steps_cm`` steps."""
    if matched is None or matched.recipe != "selective" or not matched.ok:
        raise ValueError(f"no successful matched selective run for {model_config.name} seed {seed}")
    if ctx is None:
        ctx = model_context(spec, model_config, Path(spec.work_dir) if spec.work_dir else None)
    try:
        job = _prepare(ctx, spec, "selective_cm", seed, spec.steps_cm, matched.selected_layers, 0.0)
    except Exception as exc:
        return _failed(model_config, "selective_cm", seed, spec.steps_cm, exc)
    return _train_jobs(ctx, spec, [job])[0]


# --------------------------------------------------------------------------
# campaign runner
# --------------------------------------------------------------------------

def _cell_keys(spec: CampaignSpec, cfg: ModelConfig, seed: int) -> dict[str, tuple]:
    steps = {"standard": spec.steps_matched, "selective": spec.steps_matched,
             "selective_cm": spec.steps_cm}
    return {r: (cfg.name, r, seed, steps[r]) for r in spec.recipes}


def _run_cell(spec: CampaignSpec, cfg: ModelConfig, seed: int, missing: tuple[str, ...],
              existing_sel: RunRecord | None, ctx: ModelContext | None = None,
              warm: bool = True) -> list[RunRecord]:
    """The missing runs of one (model, seed) cell, trained step-interleaved.

    The compute-matched run reuses the selective run's layer set, taken from
    this cell's probe or from the ledger record when the selective run is
    already there.
    """
    if ctx is None:
        ctx = model_context(spec, cfg, Path(spec.work_dir) if spec.work_dir else None)
    if warm:
        _warmup(ctx, spec)
    jobs, out = [], []
    if "standard" in missing:
        try:
            jobs.append(_prepare(ctx, spec, "standard", seed, spec.steps_matched,
                                 range(cfg.n_layers), None))
        except Exception as exc:
            out.append(_failed(cfg, "standard", seed, spec.steps_matched, exc))
    selected = existing_sel.selected_layers if existing_sel is not None and existing_sel.ok else None
    if "selective" in missing:
        try:
            selected, probe_time = _probe_selection(ctx, seed, spec)
            jobs.append(_prepare(ctx, spec, "selective", seed, spec.steps_matched, selected, probe_time))
        except Exception as exc:
            log.exception("selective run failed")
            selected = None
            out.append(_failed(cfg, "selective", seed, spec.steps_matched, exc))
    if "selective_cm" in missing:
        if selected is None:
            out.append(_failed(cfg, "selective_cm", seed, spec.steps_cm,
                               ValueError(f"no matched selective run for {cfg.name} seed {seed}")))
        else:
            jobs.append(_prepare(ctx, spec, "selective_cm", seed, spec.steps_cm, selected, 0.0))
    out += _train_jobs(ctx, spec, jobs) if jobs else []
    order = {r: i for i, r in enumerate(("standard", "selective", "selective_cm"))}
    return sorted(out, key=lambda r: order[r.recipe])


def _cell_job(args):
    spec, cfg, seed, missing, existing_sel = args
    kernels.warmup()
    return _run_cell(spec, cfg, seed, missing, existing_sel)


def run_campaign(spec: CampaignSpec, ledger: Ledger | str | Path, jobs: int | None = None,
                 stop_after_cells: int | None = None) -> Ledger:
    """Run every missing (model, seed, recipe) cell and append it to ``ledger``.

    Cells already in the ledger (by key) are skipped, so an interrupted
    campaign resumes where it stopped. ``stop_after_cells`` is a test hook
    that simulates an interruption.
    """
    if not isinstance(ledger, Ledger):
        ledger = Ledger.load(ledger)
    work_dir = Path(spec.work_dir) if spec.work_dir else (
        ledger.path.parent / "work" if ledger.path else None)
    if work_dir is not None and spec.work_dir is None:
        spec = replace(spec, work_dir=str(work_dir))
    jobs = jobs or spec.resolved_jobs()

    contexts: dict[str, ModelContext] = {}
    todo = []
    for cfg in spec.model_configs:
        ctx = None
        if (cfg.name, "base", cfg.seed, 0) not in ledger:
            ctx = contexts.setdefault(cfg.name, model_context(spec, cfg, work_dir))
            ledger.append(base_record(ctx))
        for seed in spec.seeds:
            keys = _cell_keys(spec, cfg, seed)
            missing = tuple(r for r, k in keys.items() if k not in ledger)
            if not missing:
                continue
            if work_dir is not None:
                prepare_base(spec, cfg, work_dir)  # cache before workers fan out
            ale = ledger.get(keys["selective"]) if "selective" in keys else None
            todo.append((cfg, seed, missing, ale))

    done = 0
    if jobs <= 1 or len(todo) <= 1:
        for cfg, seed, missing, ale in todo:
            ctx = contexts.get(cfg.name)
            if ctx is None:
                ctx = contexts.setdefault(cfg.name, model_context(spec, cfg, work_dir))
            for rec in _run_cell(spec, cfg, seed, missing, ale, ctx):
                ledger.append(rec)
            done += 1
            if stop_after_cells is not None and done >= stop_after_cells:
                return ledger
        return ledger

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_cell_job, (spec, cfg, seed, missing, ale))
                   for cfg, seed, missing, ale in todo]
        for fut in as_completed(futures):
            for rec in fut.result():
                ledger.append(rec)
    return ledger
