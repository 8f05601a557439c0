"""Command-line entry point: pretrain, tune, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 compatibility error,
4 runtime numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from . import autodiff as ad
from . import backbone as bb
from .checkpoint import (Checkpoint, CheckpointError, atomic_write_text, load_checkpoint,
                         save_checkpoint)
from .config import OUTPUT_ENV, ConfigError, ExperimentConfig, load_config
from .data import generate_synthetic
from .rng import substream
from .train import TrainingDivergence

logger = logging.getLogger("replay_prompt")

EXIT_OK, EXIT_CONFIG, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4


class CompatibilityError(RuntimeError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _output_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, extra_overrides=()) -> ExperimentConfig:
    cfg = load_config(args.config, list(args.set or []) + list(extra_overrides))
    return cfg.resolve()


def _splits(cfg: ExperimentConfig) -> dict:
    return generate_synthetic(cfg.task, substream(cfg.task.seed, "data"))


def _write_resolved(cfg: ExperimentConfig, out: Path) -> None:
    atomic_write_text(out / "resolved_config.json", cfg.to_json())


# ---------------------------------------------------------------------------
# backbone checkpoints


def backbone_checkpoint(weights: bb.BackboneWeights) -> Checkpoint:
    return Checkpoint({"backbone": weights.params},
                      {"backbone": weights.config.to_dict()},
                      {"frozen": weights.frozen, "eval_record": weights.eval_record})


def load_backbone(path) -> bb.BackboneWeights:
    ckpt = load_checkpoint(path)
    if "backbone" not in ckpt.namespaces or "backbone" not in ckpt.config:
        raise CheckpointError(f"{path} holds no backbone namespace")
    config = bb.BackboneConfig(**ckpt.config["backbone"])
    weights = bb.BackboneWeights(config, ckpt.namespaces["backbone"],
                                 bool(ckpt.meta.get("frozen")), ckpt.meta.get("eval_record", {}))
    if not weights.frozen:
        raise CompatibilityError(f"backbone checkpoint {path} is not marked frozen")
    return weights


def check_compatible(cfg: ExperimentConfig, weights: bb.BackboneWeights) -> None:
    have, want = weights.config, cfg.backbone
    for name in ("n_modalities", "d_model", "seq_len", "n_classes"):
        if getattr(have, name) != getattr(want, name):
            raise CompatibilityError(
                f"backbone checkpoint has {name}={getattr(have, name)} but config asks for "
                f"{getattr(want, name)}")
    if tuple(have.feature_widths) != tuple(want.feature_widths):
        raise CompatibilityError(
            f"backbone checkpoint feature widths {list(have.feature_widths)} differ from the "
            f"task's {list(want.feature_widths)}")
    depth = cfg.rep.replay_depth
    if depth > have.n_layers - 1:
        raise CompatibilityError(
            f"replay depth {depth} needs {depth + 1} layers but the backbone has {have.n_layers}")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=args.seed)
    out = _output_dir(cfg, args)
    splits = _splits(cfg)
    weights = bb.pretrain_backbone(cfg.backbone, splits["pretrain"], splits["val"], cfg.pretrain,
                                   cfg.pretrain.seed)
    path = out / "backbone.ckpt"
    save_checkpoint(path, backbone_checkpoint(weights))
    _write_resolved(cfg, out)
    acc = weights.eval_record["val_accuracy"]
    print(f"pretrain val_accuracy={acc:.4f} params={weights.n_params()} "
          f"checkpoint={path} sha256={_sha256(path)}")
    return EXIT_OK


def _tune_overrides(args) -> list[str]:
    flags = {
        "buffer_width": "rep.buffer_width", "buffer_depth": "rep.replay_depth",
        "noise_eps": "rep.noise_intensity", "noise_type": "rep.noise_type",
        "ortho_weight": "rep.ortho_weight",
    }
    extra = []
    for attr, path in flags.items():
        value = getattr(args, attr)
        if value is not None:
            extra.append(f"{path}={json.dumps(value)}")
    if args.missing_scenario is not None:
        extra.append(f"scenarios={json.dumps([args.missing_scenario])}")
    if args.seed is not None:
        extra.append(f"seeds={json.dumps([args.seed])}")
    return extra


def _train_log_csv(log: list) -> str:
    if not log:
        return ""
    keys = list(log[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    for row in log:
        writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


def cmd_tune(args) -> int:
    cfg = _load(args, _tune_overrides(args))
    cfg.seeds = cfg.seeds[:1]
    weights = load_backbone(args.backbone)
    check_compatible(cfg, weights)
    out = _output_dir(cfg, args)
    splits = _splits(cfg)
    seed = cfg.seeds[0]
    cell = ablation.Cell("default", cfg.rep)
    result, report = ablation.run_cell(weights, splits, cell, cfg.scenario_objects(), cfg.optim, seed)
    ckpt = Checkpoint({"backbone": weights.params, "rep": result.state.params},
                      {"backbone": weights.config.to_dict(), "rep": cfg.rep.to_dict(),
                       "experiment": cfg.to_dict()},
                      {"frozen": True, "seed": seed})
    save_checkpoint(out / "rep.ckpt", ckpt)
    atomic_write_text(out / "metrics.json", report.to_json() + "\n")
    atomic_write_text(out / "train_log.csv", _train_log_csv(result.log))
    _write_resolved(cfg, out)
    print(f"tune seed={seed} accuracy={report.accuracy:.4f} f1_macro={report.f1_macro:.4f} "
          f"auroc={report.auroc:.4f} param_fraction={report.param_fraction:.4f}")
    return EXIT_OK


def _completed(rows: list[dict], n_scenarios: int) -> set:
    counts: dict = {}
    for r in rows:
        key = (r["cell_id"], int(r["seed"]))
        counts[key] = counts.get(key, 0) + 1
    return {k for k, n in counts.items() if n == n_scenarios}


def cmd_ablate(args) -> int:
    cfg = _load(args)
    weights = load_backbone(args.backbone)
    check_compatible(cfg, weights)
    cells = ablation.build_cells(cfg.rep, cfg.grid)
    for cell in cells:
        if cell.rep.replay_depth > weights.config.n_layers - 1:
            raise CompatibilityError(
                f"cell {cell.cell_id}: replay depth {cell.rep.replay_depth} needs "
                f"{cell.rep.replay_depth + 1} layers but the backbone has {weights.config.n_layers}")
    out = _output_dir(cfg, args)
    _write_resolved(cfg, out)
    scenarios = cfg.scenario_objects()
    csv_path, json_path, err_path = out / "results.csv", out / "results.json", out / "errors.json"

    rows: list[dict] = []
    if args.resume and csv_path.exists():
        try:
            rows = ablation.read_csv_rows(csv_path.read_text())
        except ValueError as exc:
            raise ConfigError(str(csv_path), str(exc)) from exc
        rows = [_typed_row(r) for r in rows]
    done = _completed(rows, len(scenarios))
    rows = [r for r in rows if (r["cell_id"], int(r["seed"])) in done]
    failures: list = []
    total = len(cells) * len(cfg.seeds)

    def flush():
        atomic_write_text(csv_path, ablation.rows_to_csv(_ordered(rows, cells, cfg.seeds)))
        atomic_write_text(json_path, ablation.json_mirror(
            _ordered(rows, cells, cfg.seeds), cells, cfg.to_dict()))
        atomic_write_text(err_path, json.dumps([f.to_dict() for f in failures], indent=2) + "\n")

    def on_result(cell, seed, report):
        rows.extend(ablation.result_rows(cell, seed, report))
        flush()
        finished = len(_completed(rows, len(scenarios)))
        print(f"[{finished}/{total}] {cell.cell_id} seed={seed} accuracy={report.accuracy:.4f}",
              flush=True)

    def on_failure(failure):
        failures.append(failure)
        flush()
        print(f"FAILED {failure.cell_id} seed={failure.seed}: {failure.error}", flush=True)

    flush()
    ablation.run_ablation(weights, _splits(cfg), cells, cfg.seeds, scenarios, cfg.optim,
                          done=done, on_result=on_result, on_failure=on_failure)
    flush()
    print(f"ablate rows={len(rows)} failures={len(failures)} results={csv_path}")
    return EXIT_OK


def _typed_row(r: dict) -> dict:
    out = dict(r)
    for k in ("dynamic_init", "dual_buffers", "replay"):
        out[k] = r[k] == "true"
    for k in ("l", "d", "seed"):
        out[k] = int(r[k])
    for k in ("eps_n", "acc", "f1_macro", "auroc", "param_fraction"):
        out[k] = float(r[k])
    return out


def _ordered(rows, cells, seeds) -> list[dict]:
    cell_rank = {c.cell_id: i for i, c in enumerate(cells)}
    seed_rank = {s: i for i, s in enumerate(seeds)}
    return sorted(rows, key=lambda r: (cell_rank.get(r["cell_id"], len(cell_rank)),
                                       seed_rank.get(int(r["seed"]), len(seed_rank))))


# ---------------------------------------------------------------------------
# report

METRICS = ("acc", "f1_macro", "auroc")
PLOT_AXES = ("dynamic_init", "dual_buffers", "replay", "l", "d", "eps_n", "noise_type")


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(rows: list[dict], keys: tuple) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        entry = dict(zip(keys, key))
        entry["n"] = len(members)
        for m in METRICS:
            entry[f"{m}_mean"], entry[f"{m}_std"] = _mean_std([float(r[m]) for r in members])
        entry["param_fraction_mean"] = _mean_std([float(r["param_fraction"]) for r in members])[0]
        out.append(entry)
    return out


def _tsv(entries: list[dict], delimiter: str) -> str:
    if not entries:
        return ""
    keys = list(entries[0])
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(keys)
    for e in entries:
        writer.writerow([f"{e[k]:.6f}" if isinstance(e[k], float) else e[k] for k in keys])
    return buf.getvalue()


def cmd_report(args) -> int:
    path = Path(args.results)
    try:
        rows = ablation.read_csv_rows(path.read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read results: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(str(path), str(exc)) from exc
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(rows, ("cell_id", "scenario"))
    atomic_write_text(out / "summary.csv", _tsv(summary, ","))
    for axis in PLOT_AXES:
        if len({r[axis] for r in rows}) > 1:
            atomic_write_text(out / f"plot_{axis}.tsv", _tsv(aggregate(rows, (axis, "scenario")), "\t"))
    width = max([len(e["cell_id"]) for e in summary] + [4])
    for e in summary:
        print(f"{e['cell_id']:<{width}}  {e['scenario']}  n={e['n']}  "
              f"acc={e['acc_mean']:.4f}±{e['acc_std']:.4f}  "
              f"f1={e['f1_macro_mean']:.4f}±{e['f1_macro_std']:.4f}  "
              f"auroc={e['auroc_mean']:.4f}±{e['auroc_std']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replay-prompt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, backbone=False):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="dotted-path override, value parsed as JSON; repeatable")
        p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
        if backbone:
            p.add_argument("--backbone", required=True, help="frozen backbone checkpoint")

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="tune REP on a frozen backbone and evaluate it")
    common(p, backbone=True)
    p.add_argument("--missing-scenario", help="e.g. multi:image,text:0.7 or single:text:0.5")
    p.add_argument("--buffer-width", type=int)
    p.add_argument("--buffer-depth", type=int)
    p.add_argument("--noise-eps", type=float)
    p.add_argument("--noise-type", choices=("gaussian", "uniform", "laplace"))
    p.add_argument("--ortho-weight", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p, backbone=True)
    p.add_argument("--resume", action="store_true", help="skip cells already in results.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate a results CSV over seeds")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CompatibilityError, CheckpointError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except bb.ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingDivergence, ad.NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
