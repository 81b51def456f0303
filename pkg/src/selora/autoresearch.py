"""Staged recipe search: quick scan, full runs, leader pushes, factorial ablation.

Stages run in order and each one is checkpointed in a JSON state file next
to its own run ledger. A restart skips finished stages and, inside a stage,
any run whose ledger key already exists.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path


from .campaign import Ledger, RunRecord
from .probe import build_plan, selection_count
from .stats import SummaryStat, format_mean_sd, mean_sd

STAGES = ("probe", "quick", "full", "push", "ablation")
MODULE_SETS = {
    "attn+mlp": (("q", "v", "o"), ("up", "down")),
    "attn": (("q", "v", "o"), ()),
    "mlp": ((), ("up", "down")),
}


class PipelineInterrupted(RuntimeError):
    """Raised by ``stop_after`` once the named stage has been checkpointed."""


@dataclass(frozen=True)
class RecipeArm:
    arm_name: str
    select_percent: float | None = None
    layers: tuple[int, ...] | None = None
    attn_rank: int = 16
    mlp_rank: int = 16
    lr: float = 2e-4
    modules: str = "attn+mlp"
    alpha: float = 32.0

    def __post_init__(self):
        if (self.select_percent is None) == (self.layers is None):
            raise ValueError(f"arm {self.arm_name!r}: give exactly one of select_percent or layers")
        if self.select_percent is not None and not 0 < self.select_percent <= 100:
            raise ValueError(f"arm {self.arm_name!r}: select_percent must be in (0, 100]")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted(set(int(v) for v in self.layers))))
        if self.modules not in MODULE_SETS:
            raise ValueError(f"unknown module set {self.modules!r}")
        if self.attn_rank < 1 or self.mlp_rank < 1 or not self.lr > 0:
            raise ValueError(f"arm {self.arm_name!r}: ranks and lr must be positive")

    def resolve_layers(self, ranking, n_layers: int) -> tuple[int, ...]:
        if self.layers is not None:
            return self.layers
        return tuple(sorted(ranking[:selection_count(self.select_percent, n_layers)]))

    def plan(self, ranking, n_layers: int):
        attn, mlp = MODULE_SETS[self.modules]
        return build_plan(self.resolve_layers(ranking, n_layers), self.attn_rank, self.mlp_rank,
                          self.alpha, attn_targets=attn, mlp_targets=mlp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers) if self.layers is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeArm":
        d = dict(d)
        if d.get("layers") is not None:
            d["layers"] = tuple(d["layers"])
        return cls(**d)


def default_arms() -> list[RecipeArm]:
    return [RecipeArm(f"k{p}_lr{lr:g}", select_percent=p, lr=lr)
            for p in (25, 50, 75, 100) for lr in (1e-4, 2e-4)]


@dataclass(frozen=True)
class PushVariation:
    """A change applied to the current leader: extra layers and/or a rank multiplier."""

    name: str
    extra_percent: float = 0.0
    rank_scale: float = 1.0


@dataclass
class AutoResearchSpec:
    arms: list[RecipeArm] = field(default_factory=default_arms)
    quick_steps: int = 150
    full_steps: int = 500
    n_full: int = 2
    pushes: tuple[PushVariation, ...] = (PushVariation("wider", extra_percent=25.0),
                                         PushVariation("wider_rank", extra_percent=25.0, rank_scale=2.0))
    ablation_modules: tuple[str, ...] = ("attn+mlp", "attn", "mlp")
    ablation_lr_scales: tuple[float, ...] = (1.0, 2.0)
    ablation_rank_scales: tuple[float, ...] = (1.0, 0.5)
    seeds: tuple[int, ...] = (42, 123, 999)
    scan_seed: int = 42

    def __post_init__(self):
        if len(self.arms) != 8:
            raise ValueError(f"the quick scan needs exactly 8 arms, got {len(self.arms)}")
        if len({a.arm_name for a in self.arms}) != 8:
            raise ValueError("arm names must be unique")
        if not 1 <= self.n_full <= len(self.arms):
            raise ValueError("n_full must be between 1 and the number of arms")
        if self.quick_steps < 2 or self.full_steps < 2:
            raise ValueError("stage step counts must be >= 2")
        if self.n_ablation != 12:
            raise ValueError(f"ablation grid must have 12 configurations, got {self.n_ablation}")
        self.seeds = tuple(self.seeds)

    @property
    def n_push(self) -> int:
        return len(self.pushes)

    @property
    def n_ablation(self) -> int:
        return len(self.ablation_modules) * len(self.ablation_lr_scales) * len(self.ablation_rank_scales)


def push_arm(leader: RecipeArm, push: PushVariation, ranking, n_layers: int) -> RecipeArm:
    pct = len(leader.resolve_layers(ranking, n_layers)) * 100.0 / n_layers
    pct = min(100.0, pct + push.extra_percent)
    return replace(leader, arm_name=f"{leader.arm_name}+{push.name}", select_percent=pct, layers=None,
                   attn_rank=max(1, round(leader.attn_rank * push.rank_scale)),
                   mlp_rank=max(1, round(leader.mlp_rank * push.rank_scale)))


def ablation_arms(leader: RecipeArm, spec: AutoResearchSpec, ranking, n_layers: int) -> list[RecipeArm]:
    layers = leader.resolve_layers(ranking, n_layers)
    arms = []
    for mods in spec.ablation_modules:
        for ls in spec.ablation_lr_scales:
            for rs in spec.ablation_rank_scales:
                ra = max(1, round(leader.attn_rank * rs))
                rm = max(1, round(leader.mlp_rank * rs))
                lr = leader.lr * ls
                arms.append(replace(leader, arm_name=f"{mods}_lr{lr:g}_r{ra}-{rm}", modules=mods,
                                    lr=lr, attn_rank=ra, mlp_rank=rm, layers=layers,
                                    select_percent=None))
    return arms


# --------------------------------------------------------------------------
# runners
# --------------------------------------------------------------------------

class TrainingRunner:
    """Runs arms for real: base clone, adapters per the arm, train, eval loss."""

    def __init__(self, model_config, base=None, data=None, train_config=None, probe_config=None,
                 pretrain_steps: int = 1000, work_dir=None):
        from .campaign import CampaignSpec, model_context
        from .trainer import TrainConfig

        self.train_config = train_config or TrainConfig(lr_max=2e-4)
        spec = CampaignSpec(model_configs=[model_config], train=self.train_config,
                            pretrain_steps=pretrain_steps, benchmarks=(),
                            work_dir=str(work_dir) if work_dir else None)
        if probe_config is not None:
            spec.probe = probe_config
        self.spec = spec
        self.model_config = model_config
        if base is None or data is None:
            ctx = model_context(spec, model_config, Path(work_dir) if work_dir else None)
            base, data = base or ctx.base, data or ctx.data
        self.base, self.data = base, data

    @property
    def name(self) -> str:
        return self.model_config.name

    @property
    def n_layers(self) -> int:
        return self.model_config.n_layers

    def probe(self, seed: int) -> list[int]:
        from .probe import gradient_probe

        batches = self.data.train_batches(self.spec.probe.n_batches, self.train_config.micro_batch, seed)
        return gradient_probe(self.base, batches, self.spec.probe).ranking

    def run(self, arm: RecipeArm, seed: int, steps: int, recipe: str, ranking) -> RunRecord:
        from .evaluation import eval_loss
        from .model import count_trainable, inject_lora
        from .trainer import train

        model = self.base.clone()
        plan = arm.plan(ranking, self.n_layers)
        inject_lora(model, plan, seed=seed)
        tc = replace(self.train_config, lr_max=arm.lr, total_steps=steps, seed=seed,
                     warmup_steps=min(self.train_config.warmup_steps, steps // 2))
        res = train(model, self.data, tc)
        common = dict(model=self.name, recipe=recipe, seed=seed, steps=steps,
                      train_time_s=res.wall_time_s, selected_layers=plan.selected,
                      trainable_params=count_trainable(model))
        if res.status != "ok":
            return RunRecord(**common, status="failed", failure_reason=res.failure_reason)
        return RunRecord(**common, eval_loss=eval_loss(model, self.data.eval_set))


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def _rank(records: list[tuple[RecipeArm, RunRecord]]) -> list[tuple[RecipeArm, RunRecord]]:
    ok = [(a, r) for a, r in records if r.ok and r.eval_loss is not None and math.isfinite(r.eval_loss)]
    return sorted(ok, key=lambda ar: ar[1].eval_loss)


class _State:
    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {"completed": []}

    def done(self, stage: str) -> bool:
        return stage in self.data["completed"]

    def finish(self, stage: str, payload) -> None:
        self.data[stage] = payload
        self.data["completed"].append(stage)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        os.replace(tmp, self.path)


def _run_cached(ledger: Ledger, runner, arm: RecipeArm, seed: int, steps: int, recipe: str,
                ranking) -> RunRecord:
    key = (runner.name, recipe, seed, steps)
    rec = ledger.get(key)
    if rec is not None:
        return rec
    try:
        rec = runner.run(arm, seed, steps, recipe, ranking)
    except Exception as exc:  # stage failures are recorded, the search goes on
        rec = RunRecord(model=runner.name, recipe=recipe, seed=seed, steps=steps, status="failed",
                        failure_reason=f"{type(exc).__name__}: {exc}")
    return ledger.append(rec)


def run_autoresearch(spec: AutoResearchSpec, runner, work_dir, stop_after: str | None = None) -> dict:
    """Run (or resume) the four search stages and return the final report dict.

    ``runner`` needs ``name``, ``n_layers``, ``probe(seed) -> ranking`` and
    ``run(arm, seed, steps, recipe, ranking) -> RunRecord``.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    state = _State(work_dir / "autoresearch_state.json")
    ledger = Ledger.load(work_dir / "autoresearch.csv")
    L = runner.n_layers

    def checkpoint(stage, payload):
        if not state.done(stage):
            state.finish(stage, payload)
        if stop_after == stage:
            raise PipelineInterrupted(f"stopped after stage {stage!r}")

    if not state.done("probe"):
        checkpoint("probe", {"ranking": [int(v) for v in runner.probe(spec.scan_seed)]})
    else:
        checkpoint("probe", None)
    ranking = state.data["probe"]["ranking"]

    # stage 1: quick scan, one seed
    if not state.done("quick"):
        runs = [(a, _run_cached(ledger, runner, a, spec.scan_seed, spec.quick_steps,
                                f"quick:{a.arm_name}", ranking)) for a in spec.arms]
        ranked = _rank(runs)
        checkpoint("quick", {"ranking": [a.arm_name for a, _ in ranked],
                             "eval_loss": {a.arm_name: r.eval_loss for a, r in runs},
                             "failed": [a.arm_name for a, r in runs if not r.ok]})
    else:
        checkpoint("quick", None)
    by_name = {a.arm_name: a for a in spec.arms}

    # stage 2: full runs for the top candidates
    if not state.done("full"):
        top = [by_name[n] for n in state.data["quick"]["ranking"][:spec.n_full]]
        runs = [(a, _run_cached(ledger, runner, a, spec.scan_seed, spec.full_steps,
                                f"full:{a.arm_name}", ranking)) for a in top]
        ranked = _rank(runs)
        if not ranked:
            raise RuntimeError("every full run failed; nothing to push")
        checkpoint("full", {"ranking": [a.arm_name for a, _ in ranked],
                            "eval_loss": {a.arm_name: r.eval_loss for a, r in runs},
                            "leader": ranked[0][0].to_dict()})
    else:
        checkpoint("full", None)

    # stage 3: variations of the leader
    if not state.done("push"):
        leader = RecipeArm.from_dict(state.data["full"]["leader"])
        leader_loss = state.data["full"]["eval_loss"][leader.arm_name]
        arms = [push_arm(leader, p, ranking, L) for p in spec.pushes]
        runs = [(a, _run_cached(ledger, runner, a, spec.scan_seed, spec.full_steps,
                                f"push:{a.arm_name}", ranking)) for a in arms]
        best, best_loss = leader, leader_loss
        for a, r in _rank(runs):
            if r.eval_loss < best_loss:
                best, best_loss = a, r.eval_loss
            break
        checkpoint("push", {"arms": [a.to_dict() for a in arms],
                            "eval_loss": {a.arm_name: r.eval_loss for a, r in runs},
                            "leader": best.to_dict()})
    else:
        checkpoint("push", None)

    # stage 4: 12-configuration factorial, every seed
    if not state.done("ablation"):
        leader = RecipeArm.from_dict(state.data["push"]["leader"])
        arms = ablation_arms(leader, spec, ranking, L)
        table = []
        for a in arms:
            recs = [_run_cached(ledger, runner, a, s, spec.full_steps, f"ablation:{a.arm_name}", ranking)
                    for s in spec.seeds]
            losses = [r.eval_loss for r in recs if r.ok]
            stat = mean_sd(losses) if len(losses) >= 2 else None
            table.append({"arm": a.to_dict(), "losses": losses, "n_failed": len(recs) - len(losses),
                          "mean": stat.mean if stat else None, "sd": stat.sd if stat else None})
        scored = [row for row in table if row["mean"] is not None]
        scored.sort(key=lambda row: (row["mean"], row["sd"]))
        checkpoint("ablation", {"table": table,
                                "ranking": [row["arm"]["arm_name"] for row in scored]})
    else:
        checkpoint("ablation", None)

    report = build_report(state.data)
    (work_dir / "autoresearch_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (work_dir / "autoresearch_report.md").write_text(render_report(report))
    return report


def build_report(data: dict) -> dict:
    abl = data["ablation"]
    rows = {row["arm"]["arm_name"]: row for row in abl["table"]}
    if not abl["ranking"]:
        raise RuntimeError("no ablation configuration produced two successful seeds")
    winner = rows[abl["ranking"][0]]
    stat = SummaryStat(winner["mean"], winner["sd"], math.nan, math.nan, len(winner["losses"]))
    return {
        "quick_ranking": data["quick"]["ranking"],
        "full_ranking": data["full"]["ranking"],
        "push_leader": data["push"]["leader"]["arm_name"],
        "ablation_ranking": abl["ranking"],
        "ablation": [{"arm": r["arm"]["arm_name"], "mean": r["mean"], "sd": r["sd"],
                      "n": len(r["losses"]), "n_failed": r["n_failed"]} for r in abl["table"]],
        "winner": winner["arm"],
        "winner_summary": f"mean eval loss {format_mean_sd(stat)}",
    }


def render_report(report: dict) -> str:
    lines = ["# Recipe search", "",
             f"Quick scan order: {', '.join(report['quick_ranking'])}",
             f"Full-run order: {', '.join(report['full_ranking'])}",
             f"Leader after pushes: {report['push_leader']}", "",
             "| configuration | mean eval loss | sd | n | failed |", "|---|---|---|---|---|"]
    order = {n: i for i, n in enumerate(report["ablation_ranking"])}
    for row in sorted(report["ablation"], key=lambda r: order.get(r["arm"], len(order))):
        mean = "n/a" if row["mean"] is None else f"{row['mean']:.4f}"
        sd = "n/a" if row["sd"] is None else f"{row['sd']:.4f}"
        lines.append(f"| {row['arm']} | {mean} | {sd} | {row['n']} | {row['n_failed']} |")
    lines += ["", f"Winner: {report['winner']['arm_name']}, {report['winner_summary']}", ""]
    return "\n".join(lines)
