"""Pipeline driver: build, train, compress, quantize, export, evaluate.

Every command reads one config file and works inside one output
directory.  Artifacts are deterministic for a fixed config and seed;
wall-clock timestamps go only to run.log.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import graph as G
from . import network as N
from . import training as TR
from .audio import load_csv_dataset, make_synthetic_dataset
from .config import load_config, save_config
from .deploy import (emit_c_source, int8_infer, load_quantized,
                     make_test_vectors, model_size_bytes, plan_memory,
                     quantize_int8, save_quantized)
from .deploy.quantize import load_float, save_float
from .errors import (AudioFormatError, ConfigError, ContainerError, DataError,
                     DivergenceError, FiniteError, ForgeError, GraphError,
                     PlanError, QuantError, ShapeError, SpecError)
from .pruning import hybrid_prune, make_calib_batches

COMMANDS = ("build", "train", "prune", "quantize", "export", "eval", "ci")

EXIT_CODES = [
    (ConfigError, 2),
    (SpecError, 3),
    (ShapeError, 4),
    (GraphError, 5),
    (FiniteError, 6),
    (DivergenceError, 7),
    (AudioFormatError, 8),
    (DataError, 9),
    (ContainerError, 10),
    (QuantError, 11),
    (PlanError, 12),
    (ForgeError, 13),
    (OSError, 14),
]


def _log(out_dir, message):
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(os.path.join(out_dir, "run.log"), "a") as fh:
        fh.write(f"{stamp} {message}\n")


def _emit(report):
    print(json.dumps(report, indent=2, sort_keys=True))


def _dataset(cfg):
    if cfg.data.kind == "csv":
        return load_csv_dataset(cfg.data.csv_path, target_sr=cfg.model.sr)
    clip_len = cfg.data.clip_len or cfg.model.sr
    return make_synthetic_dataset(cfg.model.n_cls, cfg.data.clips_per_class,
                                  cfg.model.sr, clip_len, seed=cfg.run.seed)


def _paths(out_dir):
    return {
        "built": os.path.join(out_dir, "model.acdf"),
        "trained": os.path.join(out_dir, "trained.acdf"),
        "pruned": os.path.join(out_dir, "pruned.acdf"),
        "quantized": os.path.join(out_dir, "quantized.acdf"),
        "curve": os.path.join(out_dir, "curve.csv"),
        "prune_log": os.path.join(out_dir, "prune_log.csv"),
        "export": os.path.join(out_dir, "export"),
        "resolved": os.path.join(out_dir, "resolved.ini"),
    }


def _load_stage(paths, *names):
    """Most advanced float artifact among names (later wins)."""
    found = None
    for name in names:
        if os.path.exists(paths[name]):
            found = paths[name]
    if found is None:
        raise DataError("no model artifact found; run earlier stages first")
    return load_float(found)


def cmd_build(cfg, paths):
    spec = G.build_acdnet(cfg.model.i_len, cfg.model.sr, cfg.model.n_cls,
                          cfg.model.base_width)
    params = N.init_params(spec, seed=cfg.run.seed)
    save_float(spec, params, paths["built"])
    return {
        "artifact": paths["built"],
        "filters": G.count_filters(spec),
        "params": G.count_params(spec),
        "flops": G.count_flops(spec),
        "size_bytes": model_size_bytes((spec, params)),
    }


def cmd_train(cfg, paths):
    spec, params = _load_stage(paths, "built")
    ds = _dataset(cfg)
    tr_x, tr_y, te_x, te_y = ds.fold_split(cfg.data.test_fold)
    result = TR.train(spec, params, tr_x, tr_y, cfg.train,
                      val_clips=te_x, val_labels=te_y)
    with open(paths["curve"], "w") as fh:
        fh.write("epoch,lr,train_loss,val_acc\n")
        for epoch, lr, loss, acc in result.curve:
            fh.write(f"{epoch},{lr:.6g},{loss:.6g},{acc:.6g}\n")
    save_float(spec, result.params, paths["trained"])
    return {
        "artifact": paths["trained"],
        "epochs": len(result.curve),
        "best_val_accuracy": result.best_val,
        "diverged": result.diverged,
        "curve": paths["curve"],
    }


def cmd_prune(cfg, paths):
    spec, params = _load_stage(paths, "built", "trained")
    ds = _dataset(cfg)
    tr_x, tr_y, te_x, te_y = ds.fold_split(cfg.data.test_fold)
    teacher = None
    if cfg.prune.retrain_mode == "distill":
        teacher = (spec, {k: v.copy() for k, v in params.items()})
    before = G.count_filters(spec)
    result = hybrid_prune(spec, params, tr_x, tr_y, cfg.prune, cfg.train,
                          val_clips=te_x, val_labels=te_y, teacher=teacher,
                          distill_cfg=cfg.distill, seed=cfg.run.seed)
    with open(paths["prune_log"], "w") as fh:
        fh.write("iteration,layer,channel,score,params,flops,val_acc\n")
        for it, layer, ch, score, n_params, flops, acc in result.rows:
            fh.write(f"{it},{layer},{ch},{score:.6g},{n_params},"
                     f"{flops},{acc:.6g}\n")
    save_float(result.spec, result.params, paths["pruned"])
    return {
        "artifact": paths["pruned"],
        "filters_before": before,
        "filters_after": G.count_filters(result.spec),
        "params_after": G.count_params(result.spec),
        "flops_after": G.count_flops(result.spec),
        "prune_log": paths["prune_log"],
    }


def cmd_quantize(cfg, paths):
    spec, params = _load_stage(paths, "built", "trained", "pruned")
    ds = _dataset(cfg)
    tr_x, tr_y, _, _ = ds.fold_split(cfg.data.test_fold)
    calib = make_calib_batches(tr_x, tr_y, spec.n_cls, spec.i_len,
                               cfg.prune.calib_batch_size,
                               max(1, cfg.prune.calib_batches),
                               seed=cfg.run.seed)
    calib = [xs for xs, _ in calib]
    model = quantize_int8(spec, params, calib)
    save_quantized(model, paths["quantized"])
    return {
        "artifact": paths["quantized"],
        "int8_size_bytes": model_size_bytes(model),
        "float_size_bytes": model_size_bytes((spec, params)),
    }


def cmd_export(cfg, paths):
    if not os.path.exists(paths["quantized"]):
        raise DataError("no quantized model; run `forge quantize` first")
    model = load_quantized(paths["quantized"])
    fused = plan_memory(model.spec, "fused")
    naive = plan_memory(model.spec, "naive")
    out = paths["export"]
    files = emit_c_source(model, out, plan=fused)
    vectors = make_test_vectors(model, os.path.join(out, "vectors.txt"),
                                n=10, seed=cfg.run.seed)
    plan_path = os.path.join(out, "plan.json")
    plan_doc = {
        "mode": fused.mode,
        "peak_bytes": fused.peak_bytes,
        "naive_peak_bytes": naive.peak_bytes,
        "buffers": [{"name": b.name, "offset": b.offset, "nbytes": b.nbytes,
                     "first": b.first, "last": b.last}
                    for b in fused.buffers],
    }
    with open(plan_path, "w") as fh:
        json.dump(plan_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "header": files["header"],
        "source": files["source"],
        "vectors": vectors,
        "plan": plan_path,
        "arena_bytes": fused.peak_bytes,
        "naive_arena_bytes": naive.peak_bytes,
    }


def _eval_clips(paths, clips, labels):
    """Ten-window evaluation with the best artifact available."""
    if os.path.exists(paths["quantized"]):
        model = load_quantized(paths["quantized"])
        length = model.spec.i_len
        per_clip = []
        for clip, label in zip(clips, labels):
            windows, _ = TR.eval_windows(np.asarray(clip, dtype=np.float32),
                                         length)
            probs = int8_infer(model, windows / TR.FULL_SCALE)
            per_clip.append(float(probs.mean(axis=0).argmax() == label))
        per_clip = np.array(per_clip)
        _, lo, hi = TR.bootstrap_ci(per_clip)
        return TR.EvalReport(accuracy=float(per_clip.mean()), ci_low=lo,
                             ci_high=hi, n_clips=len(per_clip),
                             per_clip=per_clip), "quantized"
    spec, params = _load_stage(paths, "built", "trained", "pruned")
    stage = ("pruned" if os.path.exists(paths["pruned"]) else
             "trained" if os.path.exists(paths["trained"]) else "built")
    return TR.ten_crop_eval(spec, params, clips, labels), stage


def cmd_eval(cfg, paths):
    ds = _dataset(cfg)
    _, _, te_x, te_y = ds.fold_split(cfg.data.test_fold)
    report, stage = _eval_clips(paths, te_x, te_y)
    return {
        "stage": stage,
        "test_fold": cfg.data.test_fold,
        "n_clips": report.n_clips,
        "accuracy": report.accuracy,
        "ci_low": report.ci_low,
        "ci_high": report.ci_high,
    }


def cmd_ci(cfg, paths):
    """Every clip tested exactly once across the folds, then bootstrap."""
    ds = _dataset(cfg)
    fold_acc = {}
    per_clip_all = []
    stage = None
    for fold in range(1, ds.n_folds + 1):
        _, _, te_x, te_y = ds.fold_split(fold)
        report, stage = _eval_clips(paths, te_x, te_y)
        fold_acc[str(fold)] = report.accuracy
        per_clip_all.append(report.per_clip)
    values = np.concatenate(per_clip_all)
    _, lo, hi = TR.bootstrap_ci(values)
    return {
        "stage": stage,
        "n_resamples": 1000,
        "n_clips": int(values.size),
        "per_fold_accuracy": fold_acc,
        "accuracy": float(values.mean()),
        "ci_low": lo,
        "ci_high": hi,
    }


HANDLERS = {
    "build": cmd_build,
    "train": cmd_train,
    "prune": cmd_prune,
    "quantize": cmd_quantize,
    "export": cmd_export,
    "eval": cmd_eval,
    "ci": cmd_ci,
}


def run(command, cfg):
    """Execute one pipeline command; returns the JSON-able report."""
    out_dir = cfg.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    paths = _paths(out_dir)
    save_config(paths["resolved"], cfg)      # every run logs its exact config
    _log(out_dir, f"{command} start")
    report = HANDLERS[command](cfg, paths)
    _log(out_dir, f"{command} done")
    return report


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Raw-audio network training, compression, and export.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True,
                        help="pipeline config (sectioned key=value)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [run] seed")
    parser.add_argument("--out", default=None,
                        help="override [run] out_dir")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out is not None:
            cfg.run.out_dir = args.out
        report = run(args.command, cfg)
    except tuple(cls for cls, _ in EXIT_CODES) as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")
    _emit(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
