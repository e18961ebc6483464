"""Command-line surface for the full pipeline.

Subcommands: phantom-gen, train, sample, evaluate, montage, mds-plot.
Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric health,
5 I/O. Primary outputs are written atomically and every run drops a
resolved config/provenance JSON next to its outputs so it can be re-run
byte-identically. Default output root: $THORAXGEN_OUT (else the given
paths are used as-is).
"""

import argparse
import csv
import io
import json
import os
import sys

import numpy as np
import torch

from . import data as dat
from . import diffusion as diff
from . import metrics as met
from .data import atomic_write_bytes
from .denoiser import DenoiserConfig
from .errors import (ConfigurationError, DimensionError, FormatError,
                     GenerationError, InsufficientDataError, LabelDomainError,
                     MaskDomainError, NumericHealthError, PersistedStateError,
                     ThoraxGenError)
from .schedule import schedule_from_descriptor
from .trainer import TrainConfig, denoiser_from_checkpoint, fit, load_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

_EXIT_BY_ERROR = (
    (ConfigurationError, EXIT_USAGE),
    (NumericHealthError, EXIT_NUMERIC),
    (PersistedStateError, EXIT_IO),
    ((DimensionError, FormatError, LabelDomainError, MaskDomainError,
      InsufficientDataError, GenerationError), EXIT_DATA),
)


def _out_path(path: str) -> str:
    root = os.environ.get("THORAXGEN_OUT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _write_json(path: str, payload: dict):
    atomic_write_bytes(path, (json.dumps(payload, indent=1, sort_keys=True)
                              + "\n").encode())


def _load_run_config(path: str, known: dict) -> dict:
    """Load a JSON run config, rejecting unknown keys at every level."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise PersistedStateError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc

    def check(section, allowed, prefix=""):
        unknown = set(section) - set(allowed)
        if unknown:
            raise ConfigurationError(
                f"unknown config key(s) {sorted(unknown)} under '{prefix or 'top level'}'")

    check(cfg, known)
    for key, fields in known.items():
        if key in cfg and fields is not None:
            if not isinstance(cfg[key], dict):
                raise ConfigurationError(f"config section {key!r} must be an object")
            check(cfg[key], fields, key)
    return cfg


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cfg = dat.PhantomConfig(resolution=args.resolution)
    entries = []
    for i in range(args.n):
        vol, layout = dat.generate_phantom(_pair_seed(args.seed, i), cfg)
        vol_base = dat.save_volume(os.path.join(out_dir, f"vol_{i:04d}"), vol)
        lay_base = dat.save_layout(os.path.join(out_dir, f"layout_{i:04d}"), layout)
        entries.append({"id": i,
                        "volume": os.path.basename(vol_base),
                        "layout": os.path.basename(lay_base)})
    _write_json(os.path.join(out_dir, "index.json"),
                {"seed": args.seed, "resolution": args.resolution,
                 "count": args.n, "entries": entries})
    print(f"wrote {args.n} phantom pair(s) to {out_dir}")
    return 0


def _pair_seed(seed: int, i: int) -> int:
    # One independent phantom seed per index under the run seed.
    return int(seed) * 1_000_003 + i


def load_index(directory: str):
    """Read a phantom-gen style index.json; return (volume, layout) pairs."""
    path = os.path.join(directory, "index.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read index {path}: {exc}") from exc
    pairs = []
    for entry in index["entries"]:
        vol = dat.load_volume(os.path.join(directory, entry["volume"]))
        layout = dat.load_layout(os.path.join(directory, entry["layout"]))
        pairs.append((vol, layout))
    return pairs


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "train": {"lr", "ema_decay", "total_steps", "batch_size", "seed",
              "conditioning", "checkpoint_every", "log_every"},
    "denoiser": {"resolution", "in_channels", "base_width",
                 "channel_multipliers", "attention_levels", "time_embed_dim",
                 "groups"},
    "schedule": {"type", "T", "s", "beta_max", "beta_start", "beta_end"},
}


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    cfg = _load_run_config(args.config, _CONFIG_SCHEMA)
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)

    dataset = load_index(args.data_dir)
    if not dataset:
        raise ConfigurationError(f"no training pairs found in {args.data_dir}")

    schedule = schedule_from_descriptor(cfg.get("schedule", {"type": "cosine",
                                                             "T": 250}))
    dcfg_dict = dict(cfg.get("denoiser", {}))
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    dcfg_dict.setdefault("resolution", dataset[0][0].shape[0])
    dcfg_dict.setdefault(
        "in_channels", 1 + dat.conditioning_channel_count(tcfg.conditioning))
    dcfg = DenoiserConfig.from_dict(dcfg_dict)

    resume_state = None
    if args.resume:
        resume_state, schedule, _ = load_checkpoint(args.resume)

    _write_json(os.path.join(out_dir, "resolved_config.json"),
                {"train": tcfg.to_dict(), "denoiser": dcfg.to_dict(),
                 "schedule": schedule.descriptor})
    ckpt = fit(tcfg, dataset, dcfg, schedule, out_dir,
               resume_state=resume_state)
    print(f"checkpoint written to {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    torch.set_num_threads(args.threads)
    if args.mode == diff.MODE_AAS and not args.reference:
        raise ConfigurationError("--mode aas requires --reference")
    if args.mode == diff.MODE_PLAIN and args.reference:
        print("warning: --mode plain ignores --reference", file=sys.stderr)

    denoiser, schedule, tcfg = denoiser_from_checkpoint(
        args.checkpoint, use_ema=args.weights == "ema")
    conditioning = args.conditioning or tcfg.conditioning
    expected = 1 + dat.conditioning_channel_count(conditioning)
    if expected != denoiser.in_channels:
        raise ConfigurationError(
            f"conditioning {conditioning!r} needs {expected} input channels "
            f"but the checkpoint was trained with {denoiser.in_channels}")

    layout = dat.load_layout(args.layout)
    cfg = diff.SamplerConfig(mode=args.mode, conditioning=conditioning,
                             use_ema_weights=args.weights == "ema",
                             seed=args.seed)
    if args.mode == diff.MODE_AAS:
        reference = dat.load_volume(args.reference)
        vol = diff.aas_sample(denoiser, reference, layout, schedule, cfg)
    else:
        vol = diff.plain_sample(denoiser, layout, schedule, cfg,
                                spacing_mm=layout.spacing_mm)

    out = _out_path(args.out)
    base = dat.save_volume(out, vol)
    _write_json(base + ".provenance.json", {
        "seed": args.seed,
        "mode": args.mode,
        "conditioning": conditioning,
        "weights": args.weights,
        "schedule": schedule.descriptor,
        "checkpoint": os.path.abspath(args.checkpoint),
        "reference": os.path.abspath(args.reference) if args.reference else None,
        "layout": os.path.abspath(args.layout),
    })
    print(f"sample written to {base}.raw")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _feature_matrix(pairs):
    return [met.extract_features(vol) for vol, _ in pairs]


def cmd_evaluate(args) -> int:
    real_pairs = load_index(args.real_dir)
    syn_pairs = load_index(args.syn_dir)
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        n_real, n_syn = len(real_pairs), len(syn_pairs)
        for entry in manifest["pairs"]:
            if entry["real"] >= n_real or entry["syn"] >= n_syn:
                raise FormatError(
                    f"manifest pair {entry} references a missing entry "
                    f"(real has {n_real}, syn has {n_syn})")
        pairing = [(e["real"], e["syn"]) for e in manifest["pairs"]]
    else:
        if len(real_pairs) != len(syn_pairs):
            raise FormatError(
                "real and synthetic sets differ in size; provide --manifest")
        pairing = list(zip(range(len(real_pairs)), range(len(syn_pairs))))

    feats_real = _feature_matrix(real_pairs)
    feats_syn = _feature_matrix(syn_pairs)

    mses = []
    for ri, si in pairing:
        vol_r, layout_r = real_pairs[ri]
        vol_s, _ = syn_pairs[si]
        masks = dat.derive_masks(layout_r)
        mses.append(met.masked_mse(vol_r, vol_s, masks.m_lung))

    report = {
        "extractor_id": met.DEFAULT_EXTRACTOR_ID,
        "kernel": "rbf(median-bandwidth), unbiased estimator",
        "counts": {"real": len(real_pairs), "syn": len(syn_pairs),
                   "paired": len(pairing)},
        "fid": met.fid(feats_real, feats_syn),
        "mmd": met.mmd(feats_real, feats_syn),
        "mse": float(np.mean(mses)) if mses else None,
    }

    rows = []
    if args.folds > 1:
        fold_ids = np.arange(len(pairing)) % args.folds
        fold_metrics = {"fid": [], "mmd": [], "mse": []}
        for k in range(args.folds):
            sel = [i for i in range(len(pairing)) if fold_ids[i] == k]
            if len(sel) < 2:
                raise InsufficientDataError(
                    f"fold {k} has {len(sel)} pairs; need >= 2 per fold")
            fr = [feats_real[pairing[i][0]] for i in sel]
            fs = [feats_syn[pairing[i][1]] for i in sel]
            row = {"fold": k,
                   "fid": met.fid(fr, fs),
                   "mmd": met.mmd(fr, fs),
                   "mse": float(np.mean([mses[i] for i in sel]))}
            rows.append(row)
            for key in fold_metrics:
                fold_metrics[key].append(row[key])
        report["folds"] = rows
        report["ci"] = {key: dict(zip(("mean", "halfwidth_95"),
                                      met.aggregate_folds(vals)))
                        for key, vals in fold_metrics.items()}

    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "report.json"), report)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["fold", "fid", "mmd", "mse"])
    if rows:
        for row in rows:
            writer.writerow([row["fold"], row["fid"], row["mmd"], row["mse"]])
    else:
        writer.writerow(["all", report["fid"], report["mmd"], report["mse"]])
    atomic_write_bytes(os.path.join(out, "report.csv"), buf.getvalue().encode())
    print(json.dumps({k: report[k] for k in ("fid", "mmd", "mse")}))
    return 0


# ---------------------------------------------------------------------------
# montage
# ---------------------------------------------------------------------------

def cmd_montage(args) -> int:
    from PIL import Image

    vol = dat.load_volume(args.volume)
    axis = {"z": 0, "y": 1, "x": 2}[args.axis]
    n_slices = vol.shape[axis]
    rows, cols = args.rows, args.cols
    if rows * cols > n_slices:
        raise ConfigurationError(
            f"grid {rows}x{cols} exceeds {n_slices} slices along {args.axis}")
    picks = np.linspace(0, n_slices - 1, rows * cols)
    picks = np.round(picks).astype(int) if rows * cols > 1 \
        else np.array([n_slices // 2])

    slices = []
    for idx in picks:
        sl = np.take(vol.values, idx, axis=axis)
        gray = np.round((np.clip(sl, -1.0, 1.0) + 1.0) / 2.0 * 255.0)
        slices.append(gray.astype(np.uint8))
    h, w = slices[0].shape
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k, sl in enumerate(slices):
        r, c = divmod(k, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = sl

    buf = io.BytesIO()
    Image.fromarray(canvas, mode="L").save(buf, format="PNG", optimize=False,
                                           compress_level=6)
    atomic_write_bytes(_out_path(args.out), buf.getvalue())
    print(f"montage written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# mds-plot
# ---------------------------------------------------------------------------

def _read_feature_csv(path: str) -> np.ndarray:
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read feature CSV {path}: {exc}") from exc
    return mat


def cmd_mds_plot(args) -> int:
    sources = {}
    for spec_arg in args.source:
        if "=" not in spec_arg:
            raise ConfigurationError(
                f"--source must be name=path, got {spec_arg!r}")
        name, path = spec_arg.split("=", 1)
        sources[name] = _read_feature_csv(path)
    if args.real not in sources:
        raise ConfigurationError(
            f"--real {args.real!r} is not one of the given sources")
    for name, mat in sources.items():
        if len(mat) < 5:
            raise InsufficientDataError(
                f"source {name!r} has {len(mat)} points; ellipse fit needs >= 5")

    names = list(sources)
    pooled = np.concatenate([sources[n] for n in names])
    diffs = pooled[:, None, :] - pooled[None, :, :]
    D = np.sqrt(np.sum(diffs ** 2, axis=-1))
    points = met.mds_embed(D)

    offsets, start = {}, 0
    for name in names:
        offsets[name] = (start, start + len(sources[name]))
        start += len(sources[name])

    ellipses = {name: met.fit_ellipse(points[slice(*offsets[name])])
                for name in names}
    overlaps = []
    for name in names:
        ov = met.ellipse_overlap(ellipses[name], ellipses[args.real],
                                 seed=args.seed)
        overlaps.append({"source": name, "area": ellipses[name].area,
                         "overlap_area": ov["area"],
                         "overlap_fraction": ov["fraction_a"]})

    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["source", "x", "y"])
    for name in names:
        for x, y in points[slice(*offsets[name])]:
            writer.writerow([name, x, y])
    atomic_write_bytes(os.path.join(out, "points.csv"), buf.getvalue().encode())

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["source", "ellipse_area", "overlap_area_with_real",
                     "overlap_fraction_of_source"])
    for row in overlaps:
        writer.writerow([row["source"], row["area"], row["overlap_area"],
                         row["overlap_fraction"]])
    atomic_write_bytes(os.path.join(out, "overlaps.csv"), buf.getvalue().encode())

    _render_mds_figure(os.path.join(out, "embedding.png"), names, points,
                       offsets, ellipses)
    print(f"embedding analysis written to {out}")
    return 0


def _render_mds_figure(path, names, points, offsets, ellipses):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse as MplEllipse

    fig, ax = plt.subplots(figsize=(6, 6))
    for name in names:
        pts = points[slice(*offsets[name])]
        sc = ax.scatter(pts[:, 0], pts[:, 1], s=12, label=name, alpha=0.7)
        e = ellipses[name]
        ax.add_patch(MplEllipse(e.center, 2 * e.semi_axes[0],
                                2 * e.semi_axes[1],
                                angle=np.degrees(e.angle), fill=False,
                                edgecolor=sc.get_facecolor()[0]))
    ax.legend()
    ax.set_xlabel("MDS 1")
    ax.set_ylabel("MDS 2")
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thoraxgen",
        description="3D diffusion synthesis of thoracic volumes: phantom "
                    "data, training, sampling, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate procedural phantom pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train the noise predictor")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw a synthetic volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--reference", help="reference volume (required for aas)")
    p.add_argument("--mode", choices=[diff.MODE_AAS, diff.MODE_PLAIN],
                   default=diff.MODE_AAS)
    p.add_argument("--conditioning",
                   choices=[dat.LUNG_AND_NODULE, dat.NODULE_ONLY])
    p.add_argument("--ema", dest="weights", action="store_const", const="ema",
                   default="ema", help="sample with EMA shadow weights (default)")
    p.add_argument("--raw", dest="weights", action="store_const", const="raw",
                   help="sample with raw training weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="FID/MMD/masked-MSE over two sets")
    p.add_argument("--real-dir", required=True)
    p.add_argument("--syn-dir", required=True)
    p.add_argument("--manifest", help="JSON pairing manifest")
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("montage", help="tile volume slices into a PNG")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", choices=["z", "y", "x"], default="z")
    p.add_argument("--rows", type=int, default=1)
    p.add_argument("--cols", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_montage)

    p = sub.add_parser("mds-plot", help="2D embedding + ellipse overlap analysis")
    p.add_argument("--source", action="append", required=True,
                   metavar="NAME=FEATURES.csv")
    p.add_argument("--real", required=True,
                   help="source name treated as the real set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mds_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ThoraxGenError as exc:
        code = EXIT_DATA
        for types, candidate in _EXIT_BY_ERROR:
            if isinstance(exc, types):
                code = candidate
                break
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return code
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
