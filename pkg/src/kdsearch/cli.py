"""Command-line harness: ``python -m kdsearch <subcommand> ...``.

Every artifact lands under ``--out`` in a directory named after a content
hash of whatever produced it, so re-running an identical command reuses the
same path. Failures print one JSON line ``{"error": kind, "message": ...}``
on stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .data import SplitSpec, generate, load_dataset, save_dataset
from .models import load_checkpoint, save_checkpoint
from .train import (
    ABLATIONS,
    KD_ROWS,
    ConfigError,
    ExperimentConfig,
    RunRecord,
    evaluate_student,
    preset,
    run_ablation,
    train_student,
    train_teacher,
)

log = logging.getLogger("kdsearch")


class UsageError(ValueError):
    pass


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def load_config(path, seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = ExperimentConfig.from_dict(raw)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _dataset(args, cfg):
    if args.data is None:
        return generate(cfg.split)
    return load_dataset(args.data)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# --- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> Path:
    cfg = load_config(args.config)
    overrides = {k: v for k, v in dict(
        n_identities=args.identities, n_train_scenes=args.train_scenes,
        n_gallery_scenes=args.gallery_scenes, n_queries=args.queries, seed=args.seed,
    ).items() if v is not None}
    spec = dataclasses.replace(cfg.split, **overrides)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = generate(spec)
    out = Path(args.out) / f"data-{_digest(dataclasses.asdict(spec))}"
    save_dataset(ds, out)
    return out


def cmd_train_teacher(args) -> Path:
    cfg = load_config(args.config, args.seed)
    ds = _dataset(args, cfg)
    out = Path(args.out) / f"teacher-{_digest(ds.checksum(), args.aug, cfg.to_dict())}"
    model, history = train_teacher(ds, args.aug, cfg, seed=cfg.seed)
    save_checkpoint(model, out / "teacher.ckpt", meta={"aug": args.aug, "seed": cfg.seed, "dataset": ds.checksum()})
    _write_json(out / "history.json", {"aug": args.aug, "epoch_ce": history})
    log.info("teacher[%s] final ce %.4f", args.aug, history[-1] if history else float("nan"))
    return out


def cmd_train_student(args) -> Path:
    cfg = load_config(args.config, args.seed)
    if args.row:
        cfg = preset(args.row, cfg)
    teacher, teacher_id = None, None
    if cfg.uses_teacher:
        if args.teacher is None:
            raise ConfigError("a --teacher checkpoint is required when any distillation term is enabled")
        teacher, meta = load_checkpoint(args.teacher, expect_kind="teacher")
        teacher_id = _file_digest(args.teacher)
        if cfg.use_isa != (meta.get("aug") == "isa"):
            log.warning("ISA flag (%s) does not match teacher augmentation %r", cfg.use_isa, meta.get("aug"))
    ds = _dataset(args, cfg)
    out = Path(args.out) / f"student-{_digest(ds.checksum(), cfg.config_hash(), teacher_id)}"
    sizes = args.gallery_sizes or []
    model, record = train_student(ds, teacher, cfg, eval_sizes=sizes, log_every=args.log_every)
    record.teacher = teacher_id
    save_checkpoint(model, out / "student.ckpt", meta={"config_hash": cfg.config_hash(), "row": record.row})
    record.save(out / "run.json")
    _write_json(out / "config.json", cfg.to_dict())
    return out


def cmd_eval(args) -> Path:
    cfg = load_config(args.config, args.seed)
    expect = {"dim": cfg.dim} if args.config else None
    ds = _dataset(args, cfg)
    model, _ = load_checkpoint(args.student, expect_kind="student", expect_topology=expect)
    if model.topology["n_classes"] != ds.n_classes:
        raise ConfigError(f"checkpoint has {model.topology['n_classes']} classes, dataset {ds.n_classes}")
    sizes = args.gallery_sizes or [len(ds.gallery)]
    out = Path(args.out) / f"eval-{_digest(_file_digest(args.student), ds.checksum(), sizes, cfg.seed)}"
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluate_student(model, ds, sizes, seed=cfg.seed)
    for size, rep in reports.items():
        rep.save(out / f"report_{size}")
        print(f"gallery={size} mAP={rep.reid_map:.4f} top1={rep.top1:.4f} det_ap={rep.detection_ap:.4f}")
    return out


def cmd_ablation(args) -> Path:
    cfg = load_config(args.config)
    rows = args.rows.split(",") if args.rows else list(KD_ROWS)
    unknown = [r for r in rows if r not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown row(s) {unknown}; choose from {list(ABLATIONS)}")
    ds = _dataset(args, cfg)
    out = Path(args.out) / f"ablation-{_digest(ds.checksum(), cfg.to_dict(), rows, args.seeds)}"
    out.mkdir(parents=True, exist_ok=True)

    def on_run(name, seed, model, record: RunRecord):
        run_dir = out / f"{name}-seed{seed}"
        save_checkpoint(model, run_dir / "student.ckpt", meta={"config_hash": record.config_hash, "row": name})
        record.save(run_dir / "run.json")

    size = args.gallery_sizes[0] if args.gallery_sizes else None
    result = run_ablation(ds, args.seeds, rows, base=cfg, gallery_size=size, on_run=on_run)
    table = result.table()
    (out / "table.txt").write_text(table + "\n")
    _write_json(out / "summary.json", result.summary())
    print(table)
    return out


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdsearch", description="Distilled person search at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file mirroring ExperimentConfig fields")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        sp.add_argument("--out", required=True, help="artifact root directory")
        if data:
            sp.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g, data=False)
    g.add_argument("--identities", type=int)
    g.add_argument("--train-scenes", type=int)
    g.add_argument("--gallery-scenes", type=int)
    g.add_argument("--queries", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="pretrain the external Re-ID teacher")
    common(t)
    t.add_argument("--aug", choices=("none", "isa"), default="none")
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="train the joint detector + Re-ID student")
    common(s)
    s.add_argument("--teacher", help="teacher checkpoint (required when distilling)")
    s.add_argument("--row", choices=list(ABLATIONS), help="apply a table row's flags")
    s.add_argument("--gallery-sizes", type=_int_list, help="evaluate after training at these sizes")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("eval", help="evaluate a student checkpoint")
    common(e)
    e.add_argument("--student", required=True, help="student checkpoint")
    e.add_argument("--gallery-sizes", type=_int_list)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="train and compare table rows over seeds")
    common(a)
    a.add_argument("--seeds", type=_int_list, default=[0])
    a.add_argument("--rows", help="comma list of rows (default: the distillation-term rows)")
    a.add_argument("--gallery-sizes", type=_int_list)
    a.set_defaults(func=cmd_ablation)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; keep the machine-readable contract
        if e.code:
            return _fail("UsageError", "invalid command line", 2)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
    except UsageError as e:
        return _fail("UsageError", str(e), 2)
    except ConfigError as e:
        return _fail("ConfigError", str(e), 1)
    except (OSError, ValueError, FloatingPointError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e).replace("\n", " "), 1)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
