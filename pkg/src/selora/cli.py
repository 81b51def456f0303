"""``selora`` command line: probe, train, pair, campaign, autoresearch, report.

Everything a command writes goes under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .campaign import DESK_MODELS, CampaignSpec, Ledger, model_context, run_campaign, run_pair
from .model import ModelConfig, count_trainable, inject_lora, save_checkpoint
from .probe import ProbeConfig, build_plan, gradient_probe, select_layers
from .report import ReportSpec, write_report
from .trainer import TrainConfig


def _model_config(args) -> ModelConfig:
    if args.config is None:
        return DESK_MODELS["desk-12"]
    if args.config in DESK_MODELS:
        return DESK_MODELS[args.config]
    return ModelConfig.from_json(args.config)


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    return int(os.environ.get("SELORA_JOBS", "1"))


def _campaign_spec(args, cfg: ModelConfig, out: Path) -> CampaignSpec:
    train = TrainConfig(lr_max=args.lr) if args.lr is not None else CampaignSpec().train
    spec = CampaignSpec(model_configs=[cfg], train=train, pretrain_steps=args.pretrain_steps,
                        work_dir=str(out / "work"), seeds=(args.seed,))
    if args.steps is not None:
        spec = replace(spec, steps_matched=args.steps, steps_cm=max(args.steps + 1, round(args.steps * 1.25)))
    if args.select_percent is not None:
        spec = replace(spec, select_percent=args.select_percent)
    if args.rank is not None:
        spec = replace(spec, attn_rank=args.rank, mlp_rank=args.rank)
    if args.mlp_rank is not None:
        spec = replace(spec, mlp_rank=args.mlp_rank)
    return spec


def cmd_probe(args) -> int:
    out = Path(args.out)
    cfg = _model_config(args)
    spec = _campaign_spec(args, cfg, out.parent if out.suffix else out)
    ctx = model_context(spec, cfg, Path(spec.work_dir))
    pc = ProbeConfig(n_batches=args.batches, chunk_size=args.chunk_size)
    batches = ctx.data.train_batches(pc.n_batches, spec.train.micro_batch, args.seed)
    report = gradient_probe(ctx.base, batches, pc)
    path = out if out.suffix else out / "probe.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    print(f"probe: ranking {report.ranking} -> {path}")
    return 0


def cmd_train(args) -> int:
    from .evaluation import eval_loss
    from .trainer import train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _model_config(args)
    spec = _campaign_spec(args, cfg, out)
    ctx = model_context(spec, cfg, Path(spec.work_dir))
    percent = spec.select_percent if args.select_percent is not None else 100.0
    batches = ctx.data.train_batches(spec.probe.n_batches, spec.train.micro_batch, args.seed)
    report = gradient_probe(ctx.base, batches, spec.probe)
    selected = select_layers(report, percent, cfg.n_layers)
    model = ctx.base.clone()
    inject_lora(model, build_plan(selected, spec.attn_rank, spec.mlp_rank, spec.alpha), seed=args.seed)
    tc = replace(spec.train, total_steps=spec.steps_matched, seed=args.seed,
                 warmup_steps=min(spec.train.warmup_steps, spec.steps_matched - 1))
    result = train(model, ctx.data, tc)
    ckpt = out / "adapted.ckpt"
    save_checkpoint(model, ckpt)
    result.adapter_checkpoint = str(ckpt)
    payload = json.loads(result.to_json())
    payload.update(selected_layers=selected, trainable_params=count_trainable(model),
                   probe_time_s=report.elapsed_s)
    if result.status == "ok":
        payload["eval_loss"] = eval_loss(model, ctx.data.eval_set)
    (out / "run.json").write_text(json.dumps(payload, indent=2))
    print(f"train: status {result.status}, {len(selected)} layers, {result.wall_time_s:.2f}s -> {out}")
    return 0 if result.status == "ok" else 1


def cmd_pair(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _model_config(args)
    spec = _campaign_spec(args, cfg, out)
    recs = run_pair(cfg, args.seed, spec)
    ledger = Ledger.load(out / "ledger.csv")
    for rec in recs.values():
        if rec.key not in ledger:
            ledger.append(rec)
    (out / "pair.json").write_text(json.dumps({k: v.to_dict() for k, v in recs.items()}, indent=2))
    s, a = recs["std"], recs["sel"]
    msg = f"pair: standard {s.status}"
    if s.ok and a.ok:
        msg += f" {s.train_time_s:.2f}s, selective {a.train_time_s:.2f}s " \
               f"({100 * (s.train_time_s - a.train_time_s) / s.train_time_s:.1f}% faster)"
    print(msg + f" -> {out}")
    return 0


def cmd_campaign(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    d.setdefault("work_dir", str(out / "work"))
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.select_percent is not None:
        d["select_percent"] = args.select_percent
    if args.steps is not None:
        d["steps_matched"] = args.steps
        d["steps_cm"] = max(args.steps + 1, round(args.steps * 1.25))
    if args.rank is not None:
        d["attn_rank"] = d["mlp_rank"] = args.rank
    if args.mlp_rank is not None:
        d["mlp_rank"] = args.mlp_rank
    spec = CampaignSpec.from_dict(d)
    ledger = run_campaign(spec, out / "ledger.csv", jobs=_jobs(args))
    families = {m.name: m.family for m in spec.model_configs}
    write_report(ReportSpec(str(out / "ledger.csv"), str(out / "report"), families=families))
    failed = sum(1 for r in ledger if not r.ok)
    print(f"campaign: {len(ledger)} records ({failed} failed) -> {out}")
    return 0


def cmd_autoresearch(args) -> int:
    from .autoresearch import AutoResearchSpec, PipelineInterrupted, TrainingRunner, run_autoresearch

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _model_config(args)
    kw = {}
    if args.quick_steps is not None:
        kw["quick_steps"] = args.quick_steps
    if args.full_steps is not None:
        kw["full_steps"] = args.full_steps
    spec = AutoResearchSpec(**kw)
    runner = TrainingRunner(cfg, pretrain_steps=args.pretrain_steps, work_dir=out / "work")
    try:
        report = run_autoresearch(spec, runner, out, stop_after=args.stop_after)
    except PipelineInterrupted as exc:
        print(f"autoresearch: {exc}; rerun to resume")
        return 0
    print(f"autoresearch: winner {report['winner']['arm_name']}, {report['winner_summary']}")
    return 0


def cmd_report(args) -> int:
    if not Path(args.ledger).exists():
        raise FileNotFoundError(f"ledger not found: {args.ledger}")
    path = write_report(ReportSpec(args.ledger, args.out))
    print(f"report: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selora", description="Gradient-guided selective LoRA at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="model config JSON (or a desk model name)")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--jobs", type=int, default=None)
        sp.add_argument("--select-percent", type=float, default=None)
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--rank", type=int, default=None)
        sp.add_argument("--mlp-rank", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--pretrain-steps", type=int, default=1000)

    sp = sub.add_parser("probe", help="gradient probe, writes a ProbeReport JSON")
    common(sp, "probe.json")
    sp.add_argument("--batches", type=int, default=5)
    sp.add_argument("--chunk-size", type=int, default=8)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("train", help="probe, select and train one adapter run")
    common(sp, "train_out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("pair", help="standard vs selective pair on one seed")
    common(sp, "pair_out")
    sp.set_defaults(func=cmd_pair)

    sp = sub.add_parser("campaign", help="full paired campaign from a campaign JSON")
    common(sp, "campaign_out")
    sp.set_defaults(func=cmd_campaign, seed=None)

    sp = sub.add_parser("autoresearch", help="staged recipe search")
    common(sp, "autoresearch_out")
    sp.add_argument("--quick-steps", type=int, default=None)
    sp.add_argument("--full-steps", type=int, default=None)
    sp.add_argument("--stop-after", default=None)
    sp.set_defaults(func=cmd_autoresearch)

    sp = sub.add_parser("report", help="tables and SVG figures from a ledger")
    sp.add_argument("--ledger", required=True)
    sp.add_argument("--out", default="report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"selora: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
