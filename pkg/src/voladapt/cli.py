"""Command-line entry point: dataset generation, staged training,
evaluation, and slice export for visual inspection."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import metrics, nets, phantom, training
from .autodiff import ModelParams, Tensor
from .config import Config, load_config, save_config
from .nets import ConfigError
from .phantom import GenerationError
from .training import NumericError, PrerequisiteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_RUNTIME = 4


class StateError(RuntimeError):
    pass


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=max(1, n))
    except ImportError:
        pass


def _load_cfg(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
        cfg.threads = 1
    _limit_threads(cfg.threads)
    return cfg


# ---------------------------------------------------------------------------
# data plumbing


def load_bundle(entries, source, target, size, domains=None):
    """Read a dataset manifest into preprocessed, model-ready cases."""
    bundle = training.DataBundle(source, target)
    for e in entries:
        if domains is not None and e.domain not in domains:
            continue
        vol = phantom.preprocess(phantom.read_volume(e.volume_path, e.domain), size)
        lab = phantom.preprocess(phantom.read_volume(e.label_path, e.domain), size,
                                 interp="nearest")
        case = training.Case(e.case_id, e.domain, vol.data, lab.data, lab.spacing_mm)
        bundle.add(case, e.split)
    return bundle


def predict_probs(models, image):
    with training.no_grad(models.seg):
        probs, _ = nets.segment(models.seg, models.seg_cfg, Tensor(image[None, None]))
    return probs.data[0, 0]


def pick_threshold(models, bundle):
    val = bundle.get(bundle.source, "val")
    if not val:
        raise PrerequisiteError(f"no validation cases for source domain {bundle.source!r}")
    probs = [predict_probs(models, c.image) for c in val]
    refs = [metrics.BinaryMask(c.label > 0, c.spacing) for c in val]
    return metrics.select_threshold(probs, refs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cfg = _load_cfg(args)
    out_dir = Path(args.out or cfg.data_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"refusing to write into non-empty {out_dir} (use --force)", file=sys.stderr)
        return EXIT_STATE
    entries = phantom.make_dataset(cfg.domains, cfg.seed, out_dir)
    per_domain = {}
    for e in entries:
        per_domain.setdefault(e.domain, {"train": 0, "val": 0, "test": 0})
        per_domain[e.domain][e.split] += 1
    print(f"wrote {len(entries)} cases to {out_dir}")
    for dom in sorted(per_domain):
        c = per_domain[dom]
        print(f"  domain {dom}: train={c['train']} val={c['val']} test={c['test']}")
    return EXIT_OK


_STAGE_ORDER = ("AE", "SEG", "CLS", "COMBINED")
_CKPT_NET = {"AE": "ae", "SEG": "seg", "CLS": "cls", "COMBINED": "seg"}


def cmd_train(args):
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")

    manifest = Path(args.data or cfg.data_dir) / "manifest.csv"
    if not manifest.exists():
        raise PrerequisiteError(f"dataset manifest {manifest} not found (run gen first)")
    entries = phantom.read_manifest(manifest)
    bundle = load_bundle(entries, cfg.source, cfg.target, cfg.target_size)

    models = training.build_models(cfg.segnet, cfg.autoencoder, cfg.classifier, cfg.seed)
    p = training.preset(cfg.preset)
    wanted = list(p.stages)
    if args.stages:
        requested = [s.strip().upper() for s in args.stages.split(",")]
        for s in requested:
            if s not in _STAGE_ORDER:
                raise ConfigError(f"unknown stage {s!r}")
        wanted = [s for s in wanted if s in requested]

    done = set()
    if args.resume:
        for sid in wanted:
            ck = run_dir / f"{_CKPT_NET[sid]}_{sid}.ckpt"
            if ck.exists():
                done.add(sid)
        for net_name, sid in (("ae", "AE"), ("seg", "SEG"), ("cls", "CLS"), ("seg", "COMBINED")):
            ck = run_dir / f"{net_name}_{sid}.ckpt"
            if ck.exists():
                setattr(models, net_name, ModelParams.load(ck, name=net_name))
        if models.ae is not None and "AE" in done:
            training.freeze(models.ae)

    for sid in wanted:
        if sid in done:
            print(f"stage {sid}: checkpoint present, skipping (resume)")
            continue
        if sid == "COMBINED":
            for prereq in p.stages:
                if prereq == "COMBINED":
                    break
                ck = run_dir / f"{_CKPT_NET[prereq]}_{prereq}.ckpt"
                if prereq not in done and not ck.exists():
                    raise PrerequisiteError(f"COMBINED requires checkpoint {ck}")
        training.run_pipeline(cfg.preset, models, bundle, cfg.seed, run_dir=run_dir,
                              stages=[sid], stage_overrides=cfg.stages,
                              base_weights=cfg.loss_weights,
                              log=print if args.verbose else None)
        done.add(sid)
    print(f"training complete; artifacts in {run_dir}")
    return EXIT_OK


def _load_trained_models(cfg, run_dir):
    models = training.Models(cfg.segnet, cfg.autoencoder, cfg.classifier)
    for name in ("COMBINED", "SEG"):
        ck = run_dir / f"seg_{name}.ckpt"
        if ck.exists():
            models.seg = ModelParams.load(ck, name="segnet")
            return models
    raise PrerequisiteError(f"no segmenter checkpoint in {run_dir}")


def cmd_eval(args):
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir or cfg.run_dir)
    snapshot = run_dir / "config.yaml"
    if snapshot.exists() and not args.config:
        cfg = load_config(snapshot)
        _limit_threads(cfg.threads)
    models = _load_trained_models(cfg, run_dir)

    manifest = Path(args.data or cfg.data_dir) / "manifest.csv"
    if not manifest.exists():
        raise PrerequisiteError(f"dataset manifest {manifest} not found")
    entries = phantom.read_manifest(manifest)
    domains = ([d.strip() for d in args.domains.split(",")] if args.domains
               else sorted({e.domain for e in entries}))
    bundle = load_bundle(entries, cfg.source, cfg.target, cfg.target_size)

    threshold = pick_threshold(models, bundle)
    print(f"validation threshold: {threshold}")
    prob_cases = {}
    for dom in domains:
        cases = bundle.get(dom, "test")
        if not cases:
            print(f"warning: domain {dom} has no test cases, skipped", file=sys.stderr)
            continue
        prob_cases[dom] = [
            (c.case_id, predict_probs(models, c.image),
             metrics.BinaryMask(c.label > 0, c.spacing))
            for c in cases
        ]
    report = metrics.evaluate(prob_cases, threshold, cfg.source, cfg.preset)
    report.write_cases_csv(run_dir / "cases.csv")
    report.write_aggregate_csv(run_dir / "aggregate.csv")
    for metric, group, mean, std, n in report.aggregate():
        print(f"{metric:8s} {group:16s} {mean:7.4f} +- {std:7.4f} (n={n})")

    if args.ttest:
        _run_ttest(run_dir / "cases.csv", Path(args.ttest) / "cases.csv")
    return EXIT_OK


def _read_case_dice(path):
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["case_id"]] = float(row["dice"])
    return out


def _run_ttest(ours_path, baseline_path):
    if not baseline_path.exists():
        raise PrerequisiteError(f"baseline case CSV {baseline_path} not found")
    ours = _read_case_dice(ours_path)
    base = _read_case_dice(baseline_path)
    common = sorted(set(ours) & set(base))
    if len(common) < 2:
        print("t-test: fewer than 2 shared cases, skipped", file=sys.stderr)
        return
    try:
        t, p = metrics.paired_ttest([ours[c] for c in common], [base[c] for c in common])
        print(f"paired t-test on Dice over {len(common)} cases: t={t:.4f}, p={p:.6f}")
    except metrics.StatisticsError as exc:
        print(f"t-test undefined: {exc}", file=sys.stderr)


def _write_pgm(path, img):
    arr = np.asarray(img, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    data = (scaled * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


_AXIS_INDEX = {"z": 0, "y": 1, "x": 2}


def cmd_export_slices(args):
    _limit_threads(args.threads or 1)
    vol = phantom.read_volume(args.volume)
    axis = _AXIS_INDEX[args.axis]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    overlay = phantom.read_volume(args.overlay) if args.overlay else None
    stem = Path(args.volume).stem
    for idx in [int(i) for i in args.indices.split(",")]:
        if not 0 <= idx < vol.data.shape[axis]:
            raise IndexError(f"slice {idx} out of bounds for axis {args.axis} "
                             f"(size {vol.data.shape[axis]})")
        sl = np.take(vol.data, idx, axis=axis)
        _write_pgm(out_dir / f"{stem}_{args.axis}{idx:03d}.pgm", sl)
        if overlay is not None:
            mask = np.take(overlay.data, idx, axis=axis) > 0
            combined = sl.astype(np.float64)
            from scipy import ndimage
            edge = mask & ~ndimage.binary_erosion(mask)
            combined[edge] = combined.max() if combined.max() > 0 else 1.0
            _write_pgm(out_dir / f"{stem}_{args.axis}{idx:03d}_overlay.pgm", combined)
    print(f"slices written to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    ap = argparse.ArgumentParser(prog="voladapt",
                                 description="Volumetric segmentation with shape-prior and "
                                             "adversarial domain adaptation, desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config path")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded reference mode")

    g = sub.add_parser("gen", help="generate the phantom dataset")
    common(g)
    g.add_argument("--out", help="output directory (default: config data_dir)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the staged training pipeline")
    common(t)
    t.add_argument("--preset", choices=["vnet", "c1", "c2", "c3"])
    t.add_argument("--stages", help="comma-separated subset, e.g. AE,SEG")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    common(e)
    e.add_argument("--run-dir", dest="run_dir")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--domains", help="comma-separated test domains")
    e.add_argument("--ttest", help="baseline run directory for a paired t-test on Dice")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-slices", help="write grayscale PGM slices of a volume")
    x.add_argument("volume")
    x.add_argument("--axis", choices=["x", "y", "z"], default="z")
    x.add_argument("--indices", required=True, help="comma-separated slice indices")
    x.add_argument("--out", required=True)
    x.add_argument("--overlay", help="label volume for a boundary overlay")
    x.add_argument("--threads", type=int)
    x.set_defaults(func=cmd_export_slices)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, StateError, FileNotFoundError) as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (NumericError, GenerationError, FloatingPointError, IndexError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
