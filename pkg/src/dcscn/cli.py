"""Command-line surface: synth | train | eval | explain | prune.

Every command takes --config/--seed/--out plus command-specific flags.
Exit status: 0 success, 1 validation error, 2 runtime error.  All CSVs are
deterministic for a fixed config+seed; wall-clock timings go to a separate
timings.csv so the primary outputs stay byte-reproducible.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from . import data as datamod
from . import interpret as interp
from .config import load_config
from .errors import ConfigError, DcscnError
from .network import accuracy, build, load_model, param_count, save_model
from .numerics import RngStream
from .prune import reward_components, train_pruner


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _streams(seed):
    """Fixed derivation order for the per-command child streams."""
    parent = RngStream(seed)
    return {name: parent.split()
            for name in ("synth", "augment", "build", "prune")}


def _synthetic_splits(cfg, rng):
    d = cfg.data
    return {
        "train": datamod.generate_synthetic(d.n_train, d.size, rng.split(), "train"),
        "val": datamod.generate_synthetic(d.n_val, d.size, rng.split(), "val"),
        "test": datamod.generate_synthetic(d.n_test, d.size, rng.split(), "test"),
    }


def _load_split(cfg, split, streams):
    if cfg.data.source == "folder" or cfg.data.root:
        root = os.path.join(cfg.data.root, split)
        ds = datamod.load_image_folder(root, split)
    else:
        # generate the whole triple once so commands loading several splits
        # see the same datasets as commands loading just one
        if "synth_cache" not in streams:
            streams["synth_cache"] = _synthetic_splits(cfg, streams["synth"])
        ds = streams["synth_cache"][split]
    if split == "train" and cfg.data.augment:
        ds = datamod.augment_dataset(ds, cfg.data.eta, streams["augment"])
    return datamod.preprocess_dataset(
        ds, cfg.data.crop or None, cfg.data.resize or None)


def _stratified_subset(ds, n):
    """First ceil(n/m) samples of each class, capped at n total."""
    if n >= len(ds):
        return ds
    per_class = -(-n // ds.n_classes)
    picked, counts = [], {}
    for s in ds.samples:
        if counts.get(s.label, 0) < per_class and len(picked) < n:
            counts[s.label] = counts.get(s.label, 0) + 1
            picked.append(s)
    return datamod.Dataset(tuple(picked), ds.class_names, ds.split)


def _interpret_layer(cfg, model):
    layer = cfg.interpret.layer or len(model.layers)
    if not 1 <= layer <= len(model.layers):
        raise ConfigError(
            f"interpret layer {layer} out of range [1, {len(model.layers)}]")
    return layer


def cmd_synth(cfg, out):
    rng = RngStream(cfg.seed).split()  # same stream the train command derives
    splits = _synthetic_splits(cfg, rng)
    for split, ds in splits.items():
        counts = datamod.write_dataset(ds, os.path.join(out, split))
        pretty = ", ".join(f"{name}={n}" for name, n in sorted(counts.items()))
        print(f"{split}: {pretty}")
    print(f"dataset written to {out}")


def cmd_train(cfg, out):
    streams = _streams(cfg.seed)
    t0 = time.perf_counter()
    train_ds = _load_split(cfg, "train", streams)
    t_load = time.perf_counter() - t0
    t0 = time.perf_counter()
    model, trace = build(train_ds, cfg.build, streams["build"])
    t_build = time.perf_counter() - t0

    model_path = os.path.join(out, "model.json")
    save_model(model, model_path)
    rows = [(i + 1, r.layer, r.sigma_sum, r.rmse, r.train_acc)
            for i, r in enumerate(trace.rows)]
    _write_csv(os.path.join(out, "trace.csv"),
               ("kernel_index", "layer", "sigma_sum", "rmse", "train_acc"), rows)
    _write_csv(os.path.join(out, "timings.csv"), ("phase", "seconds"),
               [("load", t_load), ("build", t_build)])

    kernels = sum(len(l.kernels) for l in model.layers)
    last = trace.rows[-1]
    print(f"built {len(model.layers)} layers / {kernels} kernels "
          f"in {t_build:.1f}s; rmse={last.rmse:.4f} train_acc={last.train_acc:.4f}")
    print(f"model saved to {model_path}")


def cmd_eval(cfg, out, model_path, split):
    streams = _streams(cfg.seed)
    model = load_model(model_path)
    ds = _load_split(cfg, split, streams)
    t0 = time.perf_counter()
    acc = accuracy(model, ds)
    per_sample = (time.perf_counter() - t0) / len(ds)
    _, pa_mb = param_count(model)
    _write_csv(os.path.join(out, "report.csv"),
               ("split", "accuracy", "pa_mb"), [(split, acc, pa_mb)])
    _write_csv(os.path.join(out, "timings.csv"), ("phase", "seconds"),
               [("inference_s_per_sample", per_sample)])
    print(f"{split}: accuracy={acc:.4f} pa_mb={pa_mb:.4f} "
          f"inference={per_sample * 1e3:.2f}ms/sample")


def cmd_explain(cfg, out, model_path, split, workers):
    streams = _streams(cfg.seed)
    model = load_model(model_path)
    ds = _load_split(cfg, split, streams)
    layer = _interpret_layer(cfg, model)
    theta = cfg.interpret.theta
    heat_dir = os.path.join(out, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)

    def render(i):
        s = ds.samples[i]
        cm = interp.cam(model, s.image, layer, s.label, theta)
        name = f"sample_{i:04d}_{ds.class_names[s.label]}.png"
        interp.export_heatmap(cm, s.image, os.path.join(heat_dir, name))
        return None if s.mask is None else (i, s.label, interp.iou(cm.highlight, s.mask))

    n_png = min(cfg.interpret.samples, len(ds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            png_rows = list(pool.map(render, range(n_png)))
    else:
        png_rows = [render(i) for i in range(n_png)]

    masked = [i for i, s in enumerate(ds.samples) if s.mask is not None]
    if masked:
        sub = datamod.Dataset(tuple(ds.samples[i] for i in masked),
                              ds.class_names, ds.split)
        rows = interp.iou_per_sample(model, sub, layer, theta)
        rows = [(masked[i], label, v) for i, label, v in rows]
        _write_csv(os.path.join(out, "iou.csv"),
                   ("sample_id", "class", "iou"), rows)
        mean_iou = sum(r[2] for r in rows) / len(rows)
        print(f"{split}: dataset IoU={mean_iou:.4f} over {len(rows)} masked samples")
    else:
        print(f"{split}: no masks present, IoU skipped")
    print(f"wrote {n_png} heatmaps to {heat_dir}"
          + (f" ({sum(r is not None for r in png_rows)} with masks)" if n_png else ""))


def cmd_prune(cfg, out, model_path):
    streams = _streams(cfg.seed)
    model = load_model(model_path)
    train_ds = _load_split(cfg, "train", streams)
    val_ds = _load_split(cfg, "val", streams)
    theta = cfg.interpret.theta
    before = reward_components(model, val_ds, cfg.ddpg.beta, theta)

    rank_batch = _stratified_subset(train_ds, cfg.rank_batch)
    t0 = time.perf_counter()
    best, curve = train_pruner(model, train_ds, val_ds, cfg.ddpg,
                               streams["prune"], theta, rank_batch)
    t_prune = time.perf_counter() - t0
    after = reward_components(best, val_ds, cfg.ddpg.beta, theta)

    pruned_path = os.path.join(out, "pruned_model.json")
    save_model(best, pruned_path)
    _write_csv(os.path.join(out, "reward.csv"),
               ("episode", "reward", "acc", "iou", "pa_mb"), curve)
    _write_csv(os.path.join(out, "timings.csv"), ("phase", "seconds"),
               [("prune", t_prune)])
    print(f"before: acc={before[1]:.4f} iou={before[2]:.4f} pa_mb={before[3]:.4f}")
    print(f"after:  acc={after[1]:.4f} iou={after[2]:.4f} pa_mb={after[3]:.4f} "
          f"(reward {before[0]:.4f} -> {after[0]:.4f}, {t_prune:.1f}s)")
    print(f"pruned model saved to {pruned_path}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dcscn",
        description="incrementally configured convolutional classifier: "
                    "dataset synthesis, training, evaluation, explanation, pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config of flat dotted keys")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel workers")

    for name in ("synth", "train", "eval", "explain", "prune"):
        p = sub.add_parser(name)
        common(p)
        if name in ("eval", "explain", "prune"):
            p.add_argument("--model", help="model JSON path (default <out>/model.json)")
        if name in ("eval", "explain"):
            p.add_argument("--split", default="test" if name == "eval" else "val")
        if name == "explain":
            p.add_argument("--layer", type=int, help="1-based layer for the CAM")
            p.add_argument("--theta", type=float, help="highlight threshold")
            p.add_argument("--samples", type=int, help="heatmaps to export")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if getattr(args, "layer", None) is not None:
            overrides["interpret.layer"] = args.layer
        if getattr(args, "theta", None) is not None:
            overrides["interpret.theta"] = args.theta
        if getattr(args, "samples", None) is not None:
            overrides["interpret.samples"] = args.samples
        cfg = load_config(args.config, overrides)
        out = args.out
        os.makedirs(out, exist_ok=True)
        model_path = getattr(args, "model", None) or os.path.join(out, "model.json")

        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out, model_path, args.split)
        elif args.command == "explain":
            cmd_explain(cfg, out, model_path, args.split, cfg.workers)
        elif args.command == "prune":
            cmd_prune(cfg, out, model_path)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DcscnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
