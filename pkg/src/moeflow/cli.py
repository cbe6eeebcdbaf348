"""Command-line entry point: ``moeflow <subcommand> [--config F] [--set k=v ...]``.

Exit codes: 0 ok, 1 check failure, 2 bad config or input, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .conditioning import PromptEncoder
from .config import RunConfig, RunConfigError
from .data import ToyDataset, make_grid, write_pgm, write_png
from .distill import distill_loop
from .edit import EDIT_INSTRUCTIONS, EditTripletSource, change_stats, edit_apply, edit_train
from .flow import NumericalAbort, Stage, TrainSchedule, euler_sample, train_loop
from .model import CheckpointError, SparseDiT, load_model, save_model

log = logging.getLogger("moeflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


class InputError(ValueError):
    """Missing or unreadable input referenced by the config."""


# -- helpers ------------------------------------------------------------------
def _dataset(cfg: RunConfig) -> ToyDataset:
    f = cfg.flow
    return ToyDataset(f.dataset, channels=cfg.model.in_channels, mu=f.mu, sigma=f.sigma)


def _encoder(cfg: RunConfig, model: SparseDiT) -> PromptEncoder:
    # text width always follows the model actually loaded
    enc = dataclasses.replace(cfg.encoder_config(), d=model.cfg.d)
    return PromptEncoder(enc, dtype=model.cfg.dtype)


def _require(path: str, key: str, role: str | None = None) -> tuple[SparseDiT, dict]:
    if not path:
        raise InputError(f"{key} must name a checkpoint")
    if not Path(path).is_file():
        raise InputError(f"{key}: no such checkpoint {path!r}")
    return load_model(path, role)


def _save_image(path_stem: Path, image: np.ndarray, fmt: str) -> Path:
    if fmt == "png":
        path = path_stem.with_suffix(".png")
        write_png(path, image)
    else:
        path = path_stem.with_suffix(".pgm")
        write_pgm(path, image)
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, command: str) -> Path:
    """One JSONL line per artifact under ``out``: relative path, size, sha256."""
    lines = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.jsonl":
            data = p.read_bytes()
            rec = {"command": command, "path": str(p.relative_to(out)), "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
            lines.append(json.dumps(rec, sort_keys=True))
    path = out / "manifest.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


# -- subcommands ----------------------------------------------------------------
def cmd_pretrain(cfg: RunConfig, args, out: Path) -> int:
    model = SparseDiT.create(cfg.model_config(), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    res = train_loop(
        model, _dataset(cfg), cfg.schedule(), rng, _encoder(cfg, model),
        p_drop=cfg.flow.p_drop, t_sampler=cfg.flow.t_sampler, out_dir=out, log_every=cfg.flow.log_every,
    )
    save_model(out / "model.ckpt", model, "teacher", {"steps": len(res.metrics)})
    log.info("pretrain done steps=%d final_loss=%.6f", len(res.metrics), res.metrics[-1]["loss"] if res.metrics else float("nan"))
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args, out: Path) -> int:
    model, _ = _require(cfg.flow.checkpoint, "flow.checkpoint")
    model = model.cast(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    sched = cfg.finetune_schedule(cfg.model.resolution)
    res = train_loop(
        model, _dataset(cfg), sched, rng, _encoder(cfg, model),
        p_drop=cfg.flow.p_drop, t_sampler=cfg.flow.t_sampler, out_dir=out, log_every=cfg.flow.log_every,
    )
    save_model(out / "model.ckpt", model, "teacher", {"finetune_steps": len(res.metrics)})
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args, out: Path) -> int:
    model, _ = _require(cfg.flow.checkpoint, "flow.checkpoint")
    model = model.cast(cfg.precision)
    enc = _encoder(cfg, model)
    f = cfg.flow
    steps = args.steps if args.steps is not None else f.sample_steps
    n = f.n_samples
    rng = np.random.default_rng(cfg.seed)
    res = cfg.model.resolution
    shape = (n, model.cfg.in_channels, res, res)
    x = euler_sample(model, enc.batch([f.prompt_id] * n), steps, f.guidance, rng, shape, null=enc.null(n), dtype=model.cfg.dtype)
    np.save(out / "samples.npy", x)
    grid = _save_image(out / "grid", make_grid(x), f.image_format)
    stats = {"count": n, "steps": steps, "guidance": f.guidance, "mean": float(x.mean()), "std": float(x.std())}
    _write_json(out / "samples.json", stats)
    log.info("sample count=%d steps=%d grid=%s mean=%.4f std=%.4f", n, steps, grid.name, stats["mean"], stats["std"])
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args, out: Path) -> int:
    if args.steps is not None:
        cfg.distill.student_steps = args.steps
        cfg.echo(out)
    teacher, _ = _require(cfg.distill.teacher, "distill.teacher")
    teacher = teacher.cast(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    res = distill_loop(
        cfg.distill_config(), teacher, _dataset(cfg), _encoder(cfg, teacher), rng,
        resolution=cfg.model.resolution, out_dir=out, log_every=cfg.distill.log_every,
    )
    log.info("distill done student_steps=%d evaluations=%d", cfg.distill.student_steps, res.evaluations)
    return EXIT_OK


def cmd_edit_train(cfg: RunConfig, args, out: Path) -> int:
    rng = np.random.default_rng(cfg.seed)
    e = cfg.edit
    if e.base:
        model, _ = _require(e.base, "edit.base")
        model = model.cast(cfg.precision)
    else:
        # no base given: short generative pre-training on the shapes data first
        model = SparseDiT.create(cfg.model_config(), seed=cfg.seed)
        res = cfg.model.resolution
        sched = TrainSchedule([Stage(res, e.pretrain_steps, e.batch_size)], lr=e.lr, warmup_steps=e.warmup_steps)
        shapes = ToyDataset("shapes", channels=cfg.model.in_channels)
        train_loop(model, shapes, sched, rng, _encoder(cfg, model), p_drop=e.p_drop, out_dir=out / "base", log_every=e.log_every)
    source = EditTripletSource(tuple(e.tasks), cfg.model.in_channels)
    edit_train(model, source, cfg.edit_config(), _encoder(cfg, model), rng, out_dir=out, log_every=e.log_every)
    return EXIT_OK


def cmd_edit_apply(cfg: RunConfig, args, out: Path) -> int:
    e = cfg.edit
    model, _ = _require(e.checkpoint, "edit.checkpoint", "edit")
    model = model.cast(cfg.precision)
    if e.instruction not in EDIT_INSTRUCTIONS:
        raise InputError(f"edit.instruction must be one of {', '.join(EDIT_INSTRUCTIONS)}")
    rng = np.random.default_rng(cfg.seed)
    Z_S, _, _, masks = EditTripletSource((e.instruction,), cfg.model.in_channels).sample(rng, e.n_eval, cfg.model.resolution)
    iid = EDIT_INSTRUCTIONS[e.instruction]
    edited, canvas = edit_apply(model, Z_S, iid, e.sample_steps, e.guidance, _encoder(cfg, model), rng, return_canvas=True)
    inside, outside = zip(*(change_stats(s, o, m) for s, o, m in zip(Z_S, edited, masks)))
    report = {"instruction_id": iid, "instruction": e.instruction, "count": e.n_eval, "change_inside": float(np.mean(inside)), "change_outside": float(np.mean(outside))}
    _write_json(out / "edit.json", report)
    write_pgm(out / "side_by_side.pgm", make_grid(canvas, ncol=1))
    log.info("edit-apply instruction=%s change_inside=%.4f change_outside=%.4f", e.instruction, report["change_inside"], report["change_outside"])
    return EXIT_OK


def _load_corpus(cfg: RunConfig):
    from .datapipe import load_manifest

    if not cfg.datapipe.manifest or not Path(cfg.datapipe.manifest).is_file():
        raise InputError(f"datapipe.manifest: no such manifest {cfg.datapipe.manifest!r}")
    return load_manifest(cfg.datapipe.manifest)


def _write_kept(out: Path, records) -> None:
    with open(out / "kept.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "metadata": r.metadata}, sort_keys=True) + "\n")


def cmd_dedup(cfg: RunConfig, args, out: Path) -> int:
    from .datapipe import dedup_run

    records = _load_corpus(cfg)
    dp = cfg.datapipe
    K = min(dp.K, len(records))
    index, report = dedup_run(records, K=K, theta=dp.theta, subset_fraction=dp.subset_fraction, seed=cfg.seed, extractor=dp.extractor)
    _write_json(out / "dedup_report.json", report)
    _write_kept(out, [r for r in records if r.id not in index.removed])
    log.info("dedup n=%d removed=%d removal_fraction=%.4f", len(records), len(index.removed), report["removal_fraction"])
    return EXIT_OK


def cmd_filter(cfg: RunConfig, args, out: Path) -> int:
    from .datapipe import attach_scores, bpp_stage, external_stage, filter_chain, load_scores

    records = _load_corpus(cfg)
    dp = cfg.datapipe
    chain = []
    for spec in dp.filters:
        name = spec.get("name")
        if name == "bytes_per_pixel":
            chain.append(bpp_stage(float(spec["threshold"]), spec.get("quality", dp.jpeg_quality)))
            continue
        if "scores" in spec:
            attach_scores(records, name, load_scores(spec["scores"]))
        chain.append(external_stage(name, float(spec["threshold"]), spec.get("direction", "min")))
    res = filter_chain(records, chain, dp.missing_policy)
    _write_json(out / "filter_report.json", {"input": len(records), "kept": len(res.kept), "drop_counts": res.drop_counts})
    _write_kept(out, res.kept)
    log.info("filter input=%d kept=%d drops=%s", len(records), len(res.kept), json.dumps(res.drop_counts, sort_keys=True))
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args, out: Path) -> int:
    from .verify import run_all

    results = run_all(args.only or None, emit=lambda line: print(line, flush=True))
    _write_json(out / "verify.json", [r.__dict__ for r in results])
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "distill": cmd_distill,
    "edit-train": cmd_edit_train,
    "edit-apply": cmd_edit_apply,
    "dedup": cmd_dedup,
    "filter": cmd_filter,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="moeflow", description="Sparse MoE flow-matching toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("sample", "distill"):
            p.add_argument("--steps", type=int, help="sampling steps (distill: student steps, e.g. 28 or 16)")
        if name == "verify":
            p.add_argument("--only", nargs="*", help="run only these suites")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    if getattr(args, "steps", None) is not None and args.steps < 1:
        raise RunConfigError("--steps must be >= 1", "--steps")
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s level=%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
    except RunConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    try:
        code = COMMANDS[args.command](cfg, args, out)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.dump_path is not None:
            print(f"dump: {exc.dump_path}", file=sys.stderr)
        code = EXIT_ABORT
    except (InputError, CheckpointError, RunConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    write_manifest(out, args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
