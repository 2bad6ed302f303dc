"""Command-line entry point: ``qiseg <command> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import data as dmod
from .config import CONFIG_FILE, RunConfig, resolve
from .episode import Episode
from .errors import ConfigError, DatasetError, QisegError
from .evaluate import (ablate_components, dsc, evaluate, read_table, sweep_alpha,
                       trace_refinement, write_overlay, write_table)
from .images import InputError, read_image, read_mask, write_mask_png, write_prob_png
from .protoseg import segment_episode
from .supervoxel import cluster_cached
from .train import latest_checkpoint, meta_train, read_checkpoint

log = logging.getLogger("qiseg")

SV_DIR = "supervoxels"
SPLIT_FILE = "split.txt"
# sections that define what a checkpoint was trained on
TRAIN_KEYS = ("run.seed", "data.", "split.", "model.", "seg.", "train.", "sv.")


def training_fingerprint(cfg: RunConfig) -> str:
    items = [f"{k}={cfg.values[k]!r}" for k in sorted(cfg.values)
             if k.startswith(TRAIN_KEYS)]
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _overrides(args, mapping) -> dict:
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = val
    return out


COMMON = {"seed": "run.seed", "workers": "run.workers"}


def _config(args, mapping, fallback_dir=None) -> RunConfig:
    """Defaults <- config file (or one found in ``fallback_dir``) <- env <- flags."""
    path = args.config
    if path is None and fallback_dir is not None:
        for d in (Path(fallback_dir), Path(fallback_dir).parent):
            if (d / CONFIG_FILE).exists():
                path = d / CONFIG_FILE
                break
    return resolve(path, _overrides(args, {**COMMON, **mapping}))


def _run_dir(args, prefix) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(args.out) / f"{prefix}_{stamp}"
        n = 1
        while d.exists():
            d = Path(args.out) / f"{prefix}_{stamp}_{n}"
            n += 1
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dataset(cfg, root):
    return dmod.load_dataset(root, cfg["data.size"])


def _split(cfg, ds):
    return dmod.make_split(ds, cfg["split.setting"], cfg["split.fold"],
                           seed=cfg.derive_seed("split"), groups=cfg.groups())


def _load_checkpoint(path, cfg):
    ck = latest_checkpoint(path)
    if ck is None:
        raise QisegError(f"no checkpoint found under {path}")
    params, _state, it, _rng, extra = read_checkpoint(ck)
    stored = extra.get("config_fingerprint")
    if stored and stored != training_fingerprint(cfg):
        msg = f"checkpoint {ck} was trained under config {stored}, current is {training_fingerprint(cfg)}"
        log.warning(msg)
        print(f"warning: {msg}", file=sys.stderr)
    params.refine = cfg.refine_config()
    return params, ck, it


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args, {"volumes": "data.volumes", "classes": "data.classes", "size": "data.size"})
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError(f"{out} exists and is not empty; pass --force to overwrite")
    phantoms = dmod.generate_phantoms(cfg["data.volumes"], cfg.derive_seed("dataset"),
                                      cfg.phantom_config())
    dmod.write_dataset(phantoms, out)
    ds = _dataset(cfg, out)
    for vol in ds.volumes:
        cluster_cached(vol.image, vol.volume_id, out / SV_DIR, cfg["sv.k"], cfg["sv.compactness"],
                       cfg["sv.min_size"], cfg["sv.seed"])
    cfg.write(out)
    print(f"wrote {len(ds.volumes)} volumes, classes {ds.class_ids}, to {out}")
    return 0


def cmd_train(args) -> int:
    mapping = {"setting": "split.setting", "fold": "split.fold", "iters": "train.iters",
               "lr0": "train.lr0", "paths": "seg.paths", "threshold": "seg.threshold"}
    cfg = _config(args, mapping, args.out if args.resume else None)
    if args.no_align:
        cfg = cfg.updated({"train.align": "false"})
    ds = _dataset(cfg, args.data)
    split = _split(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    (out / SPLIT_FILE).write_text(split.to_text())
    res = meta_train(ds, split, cfg.train_config(), cfg.seg_config(), cfg.model_shape(), out,
                     resume=args.resume, cache_dir=Path(args.data) / SV_DIR,
                     ckpt_extra={"config_fingerprint": training_fingerprint(cfg)})
    last = res.log[-1] if res.log else None
    print(f"trained {len(res.log)} iterations into {out}"
          + (f"; final L={float(last[4]):.4f}" if last else ""))
    return 0


def _eval_inputs(args, extra_map=None):
    cfg = _config(args, {"setting": "split.setting", "fold": "split.fold", **(extra_map or {})},
                  args.checkpoint)
    if getattr(args, "no_refine", False):
        cfg = cfg.updated({"refine.enabled": "false"})
    params, ck, _ = _load_checkpoint(args.checkpoint, cfg)
    if getattr(args, "alpha", None) is not None:
        params.seg = replace(params.seg, alpha=args.alpha)
    ds = _dataset(cfg, args.data)
    return cfg, params, ds, _split(cfg, ds)


def cmd_eval(args) -> int:
    cfg, params, ds, split = _eval_inputs(args)
    run = _run_dir(args, "eval")
    cfg.write(run)
    rep = evaluate(params, ds, split, cfg.derive_seed("eval"), cfg.refine_config(),
                   cfg["run.workers"])
    rep.write(run)
    if args.overlays:
        eps = dmod.eval_episodes(ds, split, cfg.derive_seed("eval"))
        for i, ep in enumerate(eps[: args.overlays]):
            mask = segment_episode(ep, params, cfg.refine_config()).mask
            write_overlay(run / "overlays" / f"episode_{i:04d}_class{ep.class_id}.png",
                          ep.query_image, mask, ep.query_mask)
    for c, (m, s, n) in rep.per_class.items():
        print(f"class {c}: {m:.2f} +- {s:.2f} over {n} volumes")
    print(f"mean: {rep.mean:.2f}  ({run})")
    return 0


def cmd_sweep(args) -> int:
    if args.param != "alpha":
        raise ConfigError(f"only --param alpha is supported, got {args.param!r}")
    cfg, params, ds, split = _eval_inputs(args)
    if args.values:
        cfg = cfg.updated({"eval.alphas": args.values})
    run = _run_dir(args, "sweep")
    cfg.write(run)
    header, rows = sweep_alpha(params, ds, split, cfg["eval.alphas"], cfg.derive_seed("eval"),
                               cfg.refine_config(), cfg["run.workers"])
    path = write_table(run / "sweep_alpha.csv", header, rows, cfg.fingerprint(),
                       "mean and std across test classes")
    for r in read_table(path)[2]:
        print(f"alpha={r[0]}  {float(r[1]):.2f} +- {float(r[2]):.2f}")
    return 0


def cmd_trace(args) -> int:
    cfg, params, ds, split = _eval_inputs(args, {"maxN": "eval.max_n"})
    run = _run_dir(args, "trace")
    cfg.write(run)
    tr = trace_refinement(params, ds, split, cfg["eval.max_n"], cfg.derive_seed("eval"),
                          cfg.refine_config(), cfg["run.workers"])
    write_table(run / "trace.csv", tr.header, tr.rows, cfg.fingerprint(),
                f"peak_iteration={tr.peak_iteration}")
    for r in tr.rows:
        print(f"iteration {r[0]:3d}: mu={r[-2]:.2f} sigma={r[-1]:.2f}")
    print(f"peak mean at iteration {tr.peak_iteration}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args, {"setting": "split.setting", "fold": "split.fold"})
    trained = {}
    for item in args.variant:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--variant expects NAME=CHECKPOINT, got {item!r}")
        trained[name] = _load_checkpoint(path, cfg)[0]
    ds = _dataset(cfg, args.data)
    split = _split(cfg, ds)
    run = _run_dir(args, "ablate")
    cfg.write(run)
    header, rows, _ = ablate_components(trained, ds, split, cfg.derive_seed("eval"),
                                        cfg.refine_config(), cfg["run.workers"])
    write_table(run / "ablation.csv", header, rows, cfg.fingerprint(), "per-class mean DSC")
    for r in rows:
        print(f"{r[0]:>10}: {r[-1]:.2f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args, {}, args.checkpoint)
    if args.no_refine:
        cfg = cfg.updated({"refine.enabled": "false"})
    params, _ck, _ = _load_checkpoint(args.checkpoint, cfg)
    errors = []
    loaded = {}
    for key, path, reader in (("support_image", args.support_image, read_image),
                              ("support_mask", args.support_mask, read_mask),
                              ("query_image", args.query_image, read_image),
                              ("query_mask", args.query_mask, read_mask)):
        if path is None:
            continue
        try:
            loaded[key] = reader(path)
        except QisegError as exc:
            errors.append(str(exc))
    if errors:
        for e in errors[:-1]:
            print(f"error: InputError: {e}", file=sys.stderr)
        raise InputError(errors[-1]) if len(errors) == 1 else InputError(
            f"{len(errors)} unreadable inputs; last: {errors[-1]}")
    ep = Episode(loaded["support_image"], loaded["support_mask"], loaded["query_image"],
                 loaded.get("query_mask"))
    res = segment_episode(ep, params, cfg.refine_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    write_mask_png(out / "mask.png", res.mask)
    write_prob_png(out / "prob.png", res.foreground)
    summary = {
        "threshold": {p: r.threshold for p, r in res.paths.items()},
        "refine_losses": {p: r.refine_losses for p, r in res.paths.items()},
        "refine_enabled": cfg["refine.enabled"],
        "foreground_pixels": int(res.mask.sum()),
        "config_fingerprint": cfg.fingerprint(),
    }
    if ep.query_mask is not None:
        summary["dsc"] = dsc(res.mask, ep.query_mask)
        print(f"DSC vs provided query mask: {summary['dsc']:.2f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote mask.png, prob.png, summary.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, out_default=None):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="root seed (run.seed)")
    p.add_argument("--workers", type=int, help="worker threads for evaluation fan-out")
    p.add_argument("-v", "--verbose", action="store_true")


def _report_dirs(p):
    p.add_argument("--out", default="runs", help="parent for the timestamped run directory")
    p.add_argument("--run-dir", help="exact output directory (overrides --out)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qiseg", description="Few-shot prototype segmentation "
                                 "with query-predicted thresholds and test-time refinement.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="meta-train on supervoxel pseudo-episodes")
    _common(p)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--setting", type=int, choices=(1, 2))
    p.add_argument("--fold", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--paths", choices=("dual", "fine", "coarse"))
    p.add_argument("--threshold", choices=("adaptive", "fixed"))
    p.add_argument("--no-align", action="store_true", help="drop the alignment loss term")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "per-class DSC on unseen classes"),
                              ("sweep", cmd_sweep, "fusion-weight sweep"),
                              ("trace", cmd_trace, "DSC per refinement iteration")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _report_dirs(p)
        p.add_argument("--checkpoint", required=True, help="checkpoint or training run directory")
        p.add_argument("--data", default="data")
        p.add_argument("--setting", type=int, choices=(1, 2))
        p.add_argument("--fold", type=int)
        p.add_argument("--no-refine", action="store_true")
        p.add_argument("--alpha", type=float, help="override the checkpoint's fusion weight")
        if name == "eval":
            p.add_argument("--overlays", type=int, default=0, metavar="N",
                           help="write PNG overlays for the first N episodes")
        if name == "sweep":
            p.add_argument("--param", default="alpha")
            p.add_argument("--values", help="comma-separated values")
        if name == "trace":
            p.add_argument("--maxN", type=int, dest="maxN")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="component table from several trained variants")
    _common(p)
    _report_dirs(p)
    p.add_argument("--variant", action="append", required=True, metavar="NAME=CHECKPOINT")
    p.add_argument("--data", default="data")
    p.add_argument("--setting", type=int, choices=(1, 2))
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="segment one query slice from one support slice")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support-image", required=True)
    p.add_argument("--support-mask", required=True)
    p.add_argument("--query-image", required=True)
    p.add_argument("--query-mask", help="optional; DSC is reported when given")
    p.add_argument("--out", required=True)
    p.add_argument("--no-refine", action="store_true")
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (QisegError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
