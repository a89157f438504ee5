"""Command-line entry point: synth-data, train, infer, evaluate, visualize.

Exit codes: 0 success, 2 configuration/usage error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AffineAugParams
from .datamodel import Frame, LandmarkPoint, map_coords
from .errors import ConfigError, DataError
from .ingest import SynthConfig, generate_synthetic, load_dataset, write_dataset
from .metrics import per_landmark_report
from .ssl import CascadeConfig
from .trainer import TrainConfig, load_checkpoint, predict_all, run_training

log = logging.getLogger("oneshot_landmarks")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
DATA_ROOT_ENV = "ONESHOT_LANDMARKS_DATA"

# key -> (type, default, help). Types: int, float, str, bool, "ints", "range".
CONFIG_KEYS = {
    "mode": (str, "sla_atd", "sla | sla_atd | adapter_atd"),
    "K": (int, 19, "number of landmarks"),
    "epochs": (int, 300, "training epochs"),
    "batch_size": (int, 8, "batch size"),
    "learning_rate": (float, 1e-4, "Adam learning rate"),
    "optimizer": (str, "adam", "optimizer (adam only)"),
    "adam_betas": ("floats", [0.9, 0.999], "Adam betas"),
    "adam_eps": (float, 1e-8, "Adam epsilon"),
    "seed": (int, 0, "run seed"),
    "input_size": (int, 384, "network input side in pixels"),
    "patch_size": (int, 192, "patch side in pixels"),
    "C_A": (int, 16, "adapter output channels (0 disables adapters)"),
    "E": (int, 128, "embedding dimension"),
    "decoder_channels": ("ints", [64, 128, 256, 256], "shared decoder widths, levels 1-4"),
    "rfb_channels": (int, 256, "shared RFB width"),
    "template_aug_n": (int, 500, "augmented template copies"),
    "ssl.tau": (float, 0.07, "softmax temperature"),
    "ssl.window_px": (int, 4, "cascade half-window per level"),
    "aug.shift_px": ("range", [-10.0, 10.0], "shift range per axis"),
    "aug.rotation_deg": ("range", [-15.0, 15.0], "rotation range"),
    "aug.scale": ("range", [0.9, 1.1], "scale range"),
    "aug.brightness": ("range", [-0.15, 0.15], "patch brightness offset range"),
    "aug.contrast": ("range", [0.85, 1.15], "patch contrast factor range"),
    "backbone.type": (str, "tiny", "tiny | vgg19"),
    "backbone.channels": ("ints", [16, 32, 64, 64, 64], "tiny backbone widths"),
    "backbone.seed": (int, 0, "tiny backbone seed"),
    "backbone.weights_dir": (str, "", "vgg19 weights directory (tensor blobs + tensors.json)"),
    "deterministic": (bool, True, "deterministic single-threaded kernels"),
    "data_root": (str, "", f"dataset directory (default ${DATA_ROOT_ENV})"),
    "checkpoint_dir": (str, "", "checkpoint output directory"),
    "report_dir": (str, "", "report output directory"),
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    kind = CONFIG_KEYS[key][0]
    try:
        if kind == "ints":
            vals = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
            return [int(v) for v in vals]
        if kind in ("floats", "range"):
            vals = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
            vals = [float(v) for v in vals]
            if kind == "range" and len(vals) != 2:
                raise ValueError("expected a [min, max] pair")
            return vals
        if kind is bool:
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if kind is int and isinstance(value, float):
            raise ValueError("expected an integer")
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the config file, then ``KEY=VALUE`` overrides."""
    cfg = {k: v[1] for k, v in CONFIG_KEYS.items()}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = _flatten(tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update({k: _coerce(k, v) for k, v in raw.items()})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v.strip())
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    backbone = {"type": cfg["backbone.type"]}
    if cfg["backbone.type"] == "tiny":
        backbone.update(channels=cfg["backbone.channels"], seed=cfg["backbone.seed"])
    else:
        backbone["weights_dir"] = cfg["backbone.weights_dir"] or None
    try:
        return TrainConfig(
            mode=cfg["mode"], K=cfg["K"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            learning_rate=cfg["learning_rate"], optimizer=cfg["optimizer"], adam_betas=tuple(cfg["adam_betas"]),
            adam_eps=cfg["adam_eps"], seed=cfg["seed"], input_size=cfg["input_size"], patch_size=cfg["patch_size"],
            C_A=cfg["C_A"], E=cfg["E"], decoder_channels=tuple(cfg["decoder_channels"]),
            rfb_channels=cfg["rfb_channels"], template_aug_n=cfg["template_aug_n"],
            ssl=CascadeConfig(window_px=cfg["ssl.window_px"], tau=cfg["ssl.tau"]),
            aug=AffineAugParams(tuple(cfg["aug.shift_px"]), tuple(cfg["aug.rotation_deg"]), tuple(cfg["aug.scale"]),
                                tuple(cfg["aug.brightness"]), tuple(cfg["aug.contrast"])),
            backbone=backbone, deterministic=cfg["deterministic"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _data_root(arg: str | None, cfg: dict | None = None) -> Path:
    root = arg or (cfg or {}).get("data_root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset given (use --data or set ${DATA_ROOT_ENV})")
    return Path(root)


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def write_predictions(path: Path, preds: dict, input_size: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# input_size={input_size}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "landmark_id", "x", "y"])
        for (image_id, k), p in sorted(preds.items()):
            w.writerow([image_id, k, repr(p.x), repr(p.y)])


def read_predictions(path: Path) -> tuple[int, dict]:
    try:
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if not first.startswith("# input_size="):
                raise DataError(f"{path}: first line must be '# input_size=<n>'")
            input_size = int(first.split("=", 1)[1])
            preds = {}
            for row in csv.DictReader(fh):
                preds[(row["image_id"], int(row["landmark_id"]))] = LandmarkPoint(
                    float(row["x"]), float(row["y"]), Frame.RESIZED)
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed prediction file ({exc})") from exc
    return input_size, preds


def _split_records(data, which: str):
    if which == "test":
        return list(data.test)
    if which == "train":
        return list(data.train)
    return list(data.train) + list(data.test)


def _checkpoint_dirs(path: Path) -> list[Path]:
    if (path / "manifest.json").is_file():
        return [path]
    dirs = sorted(p.parent for p in path.glob("*/manifest.json"))
    if not dirs:
        raise DataError(f"no checkpoints under {path}")
    return dirs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(n_train=args.n_train, n_test=args.n_test, image_size=args.image_size, K=args.k,
                      noise_std=args.noise_std, shape_jitter_px=args.jitter, seed=args.seed,
                      patch_size=args.patch_size, motif_radius=args.motif_radius, layout=args.layout)
    write_dataset(generate_synthetic(cfg), args.out)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag in ("mode", "epochs", "seed"):
        if getattr(args, flag) is not None:
            overrides.append(f"{flag}={getattr(args, flag)}")
    cfg = resolve_config(args.config, overrides)
    tcfg = train_config(cfg)
    out = Path(args.out or cfg["checkpoint_dir"] or "checkpoints")
    data = load_dataset(_data_root(args.data, cfg), tcfg.input_size)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    cks = run_training(data, tcfg, out, jobs=args.jobs)
    print(f"trained {len(cks)} model(s) into {out}")
    return 0


def cmd_infer(args) -> int:
    cks = [load_checkpoint(d) for d in _checkpoint_dirs(Path(args.checkpoint))]
    input_size = cks[0].manifest["image_size"]
    data = load_dataset(_data_root(args.data), input_size)
    for ck in cks:
        if ck.manifest.get("template_id") not in (None, data.template.id):
            log.warning("checkpoint %s was trained with template %s, dataset flags %s",
                        ck.path, ck.manifest.get("template_id"), data.template.id)
    records = _split_records(data, args.split)
    preds = predict_all(cks, data.template, records)
    write_predictions(Path(args.out), preds, input_size)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def _gather(data, preds, which):
    records = {r.id: r for r in _split_records(data, "all")}
    ids = sorted({i for i, _ in preds})
    unknown = [i for i in ids if i not in records]
    if unknown:
        raise DataError(f"predictions for unknown images: {unknown[:5]}")
    return [records[i] for i in ids]


def cmd_evaluate(args) -> int:
    input_size, preds = read_predictions(Path(args.pred))
    data = load_dataset(_data_root(args.data), input_size)
    recs = _gather(data, preds, args.split)
    K = data.K
    try:
        pk = {k: [preds[(r.id, k)] for r in recs] for k in range(1, K + 1)}
    except KeyError as exc:
        raise DataError(f"prediction missing for {exc.args[0]}") from None
    gk = {k: [r.ground_truth[k - 1] for r in recs] for k in range(1, K + 1)}
    report = per_landmark_report(pk, gk, [r.transform for r in recs], [r.spacing_mm for r in recs], K)
    report.write(args.out)
    agg = report.aggregate
    print(f"MRE {agg['mre_mm']:.3f} mm | SDR 2mm {agg['sdr2']:.2f}% 2.5mm {agg['sdr2_5']:.2f}% "
          f"3mm {agg['sdr3']:.2f}% 4mm {agg['sdr4']:.2f}%")
    return 0


def draw_overlay(rec, preds, out_path: Path, arm: int = 4) -> None:
    import numpy as np
    from PIL import Image, ImageDraw

    gray = np.clip(np.rint(rec.original * 255), 0, 255).astype("uint8")
    im = Image.fromarray(gray, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)

    def cross(x, y, color):
        draw.line([(x - arm, y), (x + arm, y)], fill=color)
        draw.line([(x, y - arm), (x, y + arm)], fill=color)

    for g in rec.ground_truth or ():
        cross(g.x, g.y, (0, 255, 0))
    for p in preds:
        q = map_coords(p, rec.transform, "to_original")
        cross(q.x, q.y, (255, 0, 0))
    im.save(out_path)


def cmd_visualize(args) -> int:
    input_size, preds = read_predictions(Path(args.pred))
    data = load_dataset(_data_root(args.data), input_size)
    recs = _gather(data, preds, "all")[: args.limit or None]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in recs:
        pts = [p for (i, _), p in sorted(preds.items()) if i == rec.id]
        draw_overlay(rec, pts, out / f"{rec.id}.png")
    print(f"wrote {len(recs)} overlays to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oneshot-landmarks", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic dataset")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--n-train", type=int, default=40)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--image-size", type=int, default=192)
    s.add_argument("--patch-size", type=int, default=None, help="default: image size / 2")
    s.add_argument("--motif-radius", type=int, default=None, help="default: max(4, image size / 16)")
    s.add_argument("--noise-std", type=float, default=0.02)
    s.add_argument("--jitter", type=float, default=6.0, help="per-image landmark jitter in pixels")
    s.add_argument("--layout", choices=("distinct", "twin"), default="distinct")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    keys = "\n".join(f"  {k:<22} {v[2]} (default: {v[1]})" for k, v in CONFIG_KEYS.items())
    t = sub.add_parser("train", help="train models", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (TOML file or --set KEY=VALUE):\n" + keys)
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    t.add_argument("--out", help="checkpoint directory")
    t.add_argument("--mode", choices=("sla", "sla_atd", "adapter_atd"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--jobs", type=int, default=1, help="parallel processes for per-landmark models")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict landmarks with trained checkpoints")
    i.add_argument("--checkpoint", required=True, help="checkpoint dir or a training output dir")
    i.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    i.add_argument("--split", choices=("test", "train", "all"), default="test")
    i.add_argument("--out", required=True, help="prediction CSV path")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="MRE/SDR report from a prediction CSV")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    e.add_argument("--split", choices=("test", "train", "all"), default="all")
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("visualize", help="overlay predictions (red) and ground truth (green)")
    v.add_argument("--pred", required=True)
    v.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    v.add_argument("--out", required=True)
    v.add_argument("--limit", type=int, default=0, help="max images (0 = all)")
    v.set_defaults(func=cmd_visualize)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
