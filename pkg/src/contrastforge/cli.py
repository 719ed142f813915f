"""Subcommand front-end: prepare, generate, train-base, train, eval, diagnose,
gradcheck. Every command runs under a run-directory lock and appends a manifest
entry with config and artifact hashes, so a full run is replayable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evaluation, figures
from .backend import ResponseCache
from .causal import load_causal_checkpoint, save_causal_checkpoint
from .config import RunConfig, load_config
from .dataio import (interaction_stats, kcore_filter, load_attributes,
                     load_dataset, load_interactions, save_dataset, split_80_10_10)
from .errors import ContrastForgeError, MissingArtifactError, PipelineError
from .gradsuite import run_gradient_suite
from .graph import load_base_checkpoint, save_base_checkpoint, train_base
from .pipeline import read_attribute_embeddings, run_pipeline
from .sampling import DiagnosticsTrace
from .training import stack_attribute_tokens, train_neggen, validation_report

TOKEN_ENV = "CONTRASTFORGE_BACKEND_TOKEN"


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(root: Path) -> dict[str, str]:
    if root.is_file():
        return {root.name: _hash_file(root)}
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root.parent))] = _hash_file(path)
    return out


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(
            f"run directory is locked ({lock}); remove the lock file if no "
            f"other command is running") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def append_manifest(run_dir: Path, entry: dict) -> None:
    with (run_dir / "manifest.jsonl").open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


def _require(path: Path, command: str) -> None:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run {command} first")


def _load_json_file(path: str | None, default):
    if path is None:
        return default
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _resolve(run_dir: Path, configured: str) -> Path:
    p = Path(configured)
    return p if p.is_absolute() else run_dir / p


def cmd_prepare(cfg: RunConfig, run_dir: Path) -> dict:
    cfg.validate_paths()
    raw = load_interactions(cfg.data.interactions)
    filtered = kcore_filter(raw, cfg.data.k_core)
    ds = split_80_10_10(filtered, cfg.data.seed, k_core=cfg.data.k_core)
    save_dataset(ds, run_dir / "dataset")
    stats = interaction_stats(filtered)
    print(f"prepared dataset: {stats['num_users']} users, {stats['num_items']} items, "
          f"{stats['num_interactions']} interactions, density {stats['density']:.3g}")
    return {"inputs": {**_hash_tree(Path(cfg.data.interactions)),
                       **_hash_tree(Path(cfg.data.attributes))},
            "outputs": _hash_tree(run_dir / "dataset"),
            "extra": stats}


def cmd_generate(cfg: RunConfig, run_dir: Path) -> dict:
    cfg.validate_paths()
    _require(run_dir / "dataset" / "dataset.json", "prepare")
    ds = load_dataset(run_dir / "dataset")
    by_id = load_attributes(cfg.data.attributes)
    missing = [i for i in ds.item_ids if i not in by_id]
    if missing:
        raise MissingArtifactError(
            f"attribute records missing for {len(missing)} catalog items "
            f"(first: {missing[0]!r})")
    catalog_records = [by_id[i] for i in ds.item_ids]

    lexicon = _load_json_file(cfg.pipeline.lexicon_path, [])
    swap_table = _load_json_file(cfg.pipeline.swap_table_path, {})
    stub = cfg.pipeline.backend_url == "stub"
    cache = None
    if not stub:
        cache = ResponseCache(_resolve(run_dir, cfg.pipeline.cache_path))
    result = run_pipeline(
        catalog_records,
        mode="stub" if stub else "backend",
        encoder_dim=cfg.pipeline.d_enc,
        seed=cfg.data.seed,
        lexicon=lexicon,
        swap_table=swap_table,
        endpoint=None if stub else cfg.pipeline.backend_url,
        cache=cache,
        token=os.environ.get(TOKEN_ENV),
        parallelism=cfg.pipeline.parallelism,
        out_dir=run_dir / "dataset")
    print(f"generated negatives for {len(result.embeddings)} items "
          f"({len(result.failures)} failures, mode={'stub' if stub else 'backend'})")
    outputs = {}
    for name in ("attributes.enriched.jsonl", "pos.emb", "pos.emb.ids",
                 "neg.emb", "neg.emb.ids"):
        outputs.update(_hash_tree(run_dir / "dataset" / name))
    return {"inputs": _hash_tree(Path(cfg.data.attributes)),
            "outputs": outputs,
            "extra": {"failures": result.failures, "mode": "stub" if stub else "backend"}}


def cmd_train_base(cfg: RunConfig, run_dir: Path) -> dict:
    _require(run_dir / "dataset" / "dataset.json", "prepare")
    ds = load_dataset(run_dir / "dataset")
    result = train_base(ds, cfg.base_train_config(snapshot_users=True))
    ckpt = run_dir / "checkpoints" / "base"
    save_base_checkpoint(result.model, ds, ckpt,
                         meta={"seed": cfg.data.seed,
                               "best_epoch": result.best_epoch,
                               "stop_reason": result.stop_reason})
    (ckpt / "base_record.json").write_text(
        json.dumps({"epochs": result.epochs, "best_epoch": result.best_epoch,
                    "stop_reason": result.stop_reason}, indent=2) + "\n",
        encoding="utf-8")
    np.savez_compressed(ckpt / "user_snapshots.npz",
                        snapshots=np.stack(result.user_snapshots).astype(np.float32))
    fig_dir = run_dir / "metrics"
    fig_dir.mkdir(parents=True, exist_ok=True)
    figures.render_convergence_figure(result.epochs, fig_dir / "convergence_base.png")
    last = result.epochs[-1]
    print(f"base training: {len(result.epochs)} epochs ({result.stop_reason}), "
          f"best epoch {result.best_epoch}, "
          f"final val recall {last['val_recall']:.4f}")
    return {"inputs": _hash_tree(run_dir / "dataset" / "dataset.json"),
            "outputs": _hash_tree(ckpt),
            "extra": {"best_epoch": result.best_epoch,
                      "stop_reason": result.stop_reason,
                      "epochs_run": len(result.epochs)}}


def _load_attr_embeddings(run_dir: Path):
    _require(run_dir / "dataset" / "pos.emb", "generate")
    return read_attribute_embeddings(run_dir / "dataset" / "pos.emb",
                                     run_dir / "dataset" / "neg.emb")


def _load_base_for_seed(cfg: RunConfig, run_dir: Path, ds, seed: int):
    """The frozen base checkpoint, unless this seed's training updated it."""
    per_seed = run_dir / "checkpoints" / f"causal_seed{seed}" / "base"
    if per_seed.exists():
        return load_base_checkpoint(per_seed, ds)
    return load_base_checkpoint(run_dir / "checkpoints" / "base", ds)


def cmd_train(cfg: RunConfig, run_dir: Path) -> dict:
    _require(run_dir / "dataset" / "dataset.json", "prepare")
    _require(run_dir / "checkpoints" / "base" / "base_meta.json", "train-base")
    ds = load_dataset(run_dir / "dataset")
    embeddings = _load_attr_embeddings(run_dir)
    outputs = {}
    extra = {}
    fig_dir = run_dir / "metrics"
    fig_dir.mkdir(parents=True, exist_ok=True)
    for seed in cfg.train.seeds:
        base = load_base_checkpoint(run_dir / "checkpoints" / "base", ds)
        tc = cfg.train_config(seed)
        params, record = train_neggen(ds, base, embeddings, tc)
        ckpt = run_dir / "checkpoints" / f"causal_seed{seed}"
        save_causal_checkpoint(params, ckpt, meta={"seed": seed,
                                                   "best_epoch": record.best_epoch,
                                                   "stop_reason": record.stop_reason})
        if not tc.freeze_base:
            save_base_checkpoint(base, ds, ckpt / "base",
                                 meta={"seed": seed, "updated_by": "train"})
        (ckpt / "train_record.json").write_text(
            json.dumps({"epochs": record.epochs, "best_epoch": record.best_epoch,
                        "stop_reason": record.stop_reason}, indent=2) + "\n",
            encoding="utf-8")
        if record.epochs:
            figures.render_convergence_figure(
                record.epochs, fig_dir / f"convergence_seed{seed}.png",
                loss_keys=("mean_rec_loss", "mean_align_loss"))
        outputs.update({f"causal_seed{seed}/{k}": v
                        for k, v in _hash_tree(ckpt).items()})
        extra[str(seed)] = {"best_epoch": record.best_epoch,
                            "stop_reason": record.stop_reason,
                            "epochs_run": len(record.epochs)}
        print(f"seed {seed}: {len(record.epochs)} epochs ({record.stop_reason}), "
              f"best epoch {record.best_epoch}")
    return {"inputs": _hash_tree(run_dir / "dataset" / "pos.emb"),
            "outputs": outputs, "extra": extra}


def cmd_eval(cfg: RunConfig, run_dir: Path) -> dict:
    _require(run_dir / "dataset" / "dataset.json", "prepare")
    _require(run_dir / "checkpoints" / "base" / "base_meta.json", "train-base")
    ds = load_dataset(run_dir / "dataset")
    embeddings = _load_attr_embeddings(run_dir)
    metrics_dir = run_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for seed in cfg.train.seeds:
        ckpt = run_dir / "checkpoints" / f"causal_seed{seed}"
        _require(ckpt / "causal_meta.json", "train")
        params, _ = load_causal_checkpoint(ckpt)
        base = _load_base_for_seed(cfg, run_dir, ds, seed)
        tc = cfg.train_config(seed)
        pos_stack, _ = stack_attribute_tokens(ds, embeddings)
        report = validation_report(base, ds, params, pos_stack, tc,
                                   split="test", ks=cfg.eval.ks)
        record = json.loads((ckpt / "train_record.json").read_text(encoding="utf-8"))
        report.convergence_epoch = record["best_epoch"]
        report.val_series = [row["val_recall"] for row in record["epochs"]]
        json_path = metrics_dir / f"metrics_seed{seed}.json"
        csv_path = metrics_dir / f"metrics_seed{seed}.csv"
        evaluation.export_metrics(report, json_path, csv_path)
        figures.render_metrics_figure(report, metrics_dir / f"metrics_seed{seed}.png")
        for path in (json_path, csv_path, metrics_dir / f"metrics_seed{seed}.png"):
            outputs.update(_hash_tree(path))
        shown = ", ".join(f"R@{k}={report.recall[k]:.4f} N@{k}={report.ndcg[k]:.4f}"
                          for k in cfg.eval.ks)
        print(f"seed {seed} test: {shown} "
              f"({report.num_evaluated} users, {report.num_skipped} skipped)")
    return {"inputs": _hash_tree(run_dir / "checkpoints" / "base" / "base_meta.json"),
            "outputs": outputs, "extra": {"Ks": cfg.eval.ks}}


def cmd_diagnose(cfg: RunConfig, run_dir: Path) -> dict:
    _require(run_dir / "dataset" / "dataset.json", "prepare")
    snap_path = run_dir / "checkpoints" / "base" / "user_snapshots.npz"
    _require(snap_path, "train-base")
    seed = cfg.train.seeds[0]
    ckpt = run_dir / "checkpoints" / f"causal_seed{seed}"
    _require(ckpt / "causal_meta.json", "train")
    ds = load_dataset(run_dir / "dataset")
    embeddings = _load_attr_embeddings(run_dir)
    params, _ = load_causal_checkpoint(ckpt)
    pos_stack, _ = stack_attribute_tokens(ds, embeddings)
    snapshots = [s.astype(np.float64)
                 for s in np.load(snap_path)["snapshots"]]
    mods = evaluation.modality_vectors(pos_stack, params)
    trace = evaluation.track_modality_gradients(
        snapshots, mods, ds.train, ds.train_positives(), seed=cfg.data.seed)
    metrics_dir = run_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    csv_path = metrics_dir / "diagnostics.csv"
    csv_path.write_text(trace.to_csv(), encoding="utf-8")
    figures.render_diagnostics_figure(trace, metrics_dir / "diagnostics.png")
    means = {m: float(np.mean(trace.series(m))) for m in trace.modalities()}
    print("mean gradient magnitude by modality: "
          + ", ".join(f"{m}={v:.4f}" for m, v in means.items()))
    return {"inputs": _hash_tree(snap_path),
            "outputs": {**_hash_tree(csv_path),
                        **_hash_tree(metrics_dir / "diagnostics.png")},
            "extra": means}


def cmd_gradcheck(cfg: RunConfig, run_dir: Path) -> dict:
    result = run_gradient_suite()
    for line in result.lines():
        print(line)
    print(f"{result.probe_count} probes over {result.num_seeds} seeds "
          f"in {result.wall_time_s:.1f}s: {'PASS' if result.ok else 'FAIL'}")
    if not result.ok:
        raise PipelineError(
            f"gradient suite failed: max error "
            f"{max(result.max_errors.values()):.3e} >= {result.tolerance}")
    return {"inputs": {}, "outputs": {},
            "extra": {"max_errors": result.max_errors,
                      "probe_count": result.probe_count}}


_COMMANDS = {
    "prepare": cmd_prepare,
    "generate": cmd_generate,
    "train-base": cmd_train_base,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contrastforge",
        description="Contrastive negative generation for graph recommenders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to the YAML run config")
        cmd.add_argument("--run-dir", default="run",
                         help="run directory for artifacts (default: ./run)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        run_dir = Path(args.run_dir)
        handler = _COMMANDS[args.command]
        with run_lock(run_dir):
            t0 = time.perf_counter()
            result = handler(cfg, run_dir)
            entry = {"command": args.command,
                     "config_hash": cfg.config_hash,
                     "timestamp": datetime.now(timezone.utc).isoformat(),
                     "wall_time_s": round(time.perf_counter() - t0, 3)}
            entry.update(result)
            append_manifest(run_dir, entry)
    except ContrastForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if args.command == "gradcheck" else 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
