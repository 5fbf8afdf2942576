"""Command-line experiment runner.

Subcommands: ``toy``, ``images``, ``eval``, ``bench`` and ``replay``.
Configuration precedence is defaults < ``--config`` file < flags.  Exit codes:
0 success, 1 numeric failure, 2 I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import NumericError
from .bench import bench_all, write_bench_csv
from .data import ToySpec, eval_view, gen_toy, image_policy, intersperse, load_dataset, toy_policy, write_toy_csv
from .evaluate import confusion_for, kmeans_pixels
from .model import DhogModel, hard_labels, image_config, toy_config
from .train import (CheckpointError, TrainConfig, evaluate_epoch, fit, load_checkpoint, restore,
                    write_history)

log = logging.getLogger("dhog")

EXIT_OK, EXIT_NUMERIC, EXIT_IO = 0, 1, 2

TOY_DEFAULTS = dict(
    alpha=0.05, heads=4, classes=2, epochs=200, batch_size=220, repeats=4, seed=0, lr=3e-3,
    optimizer="adam", align=True, overcluster=None, eval_every=10, checkpoint_every=0,
    toy_std=0.5, toy_noise=0.15, toy_n=250, threads=None,
)
IMAGE_DEFAULTS = dict(
    alpha=0.05, heads=8, classes=10, epochs=60, batch_size=220, repeats=4, seed=0, lr=1e-3,
    optimizer="adam", align=True, overcluster=None, eval_every=5, checkpoint_every=0,
    dataset="cifar10", data_path=None, extra_data_path=None, subsample=None, crop=20,
    channels="32,64,128", head_block=128, mlp_hidden=200, flip_p=0.5, grayscale_p=0.5, jitter=0.2,
    threads=None,
)

_INT_KEYS = {"heads", "classes", "epochs", "batch_size", "repeats", "seed", "overcluster", "eval_every",
             "checkpoint_every", "toy_n", "subsample", "crop", "head_block", "mlp_hidden", "threads"}
_FLOAT_KEYS = {"alpha", "lr", "toy_std", "toy_noise", "flip_p", "grayscale_p", "jitter"}
_BOOL_KEYS = {"align"}


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(key.replace("-", "_"), value)
    return out


def _coerce(key, value):
    if value in ("", "none", "None"):
        return None
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e
    if key in _BOOL_KEYS:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean for {key}: {value!r}")
        return value.lower() in ("true", "1", "yes")
    return value


def resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        from_file = parse_config_file(args.config)
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(k=cfg["heads"], c=cfg["classes"], alpha=cfg["alpha"], epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], repeats=cfg["repeats"], lr=cfg["lr"],
                       optimizer=cfg["optimizer"], seed=cfg["seed"], align=cfg["align"],
                       overcluster=cfg["overcluster"], eval_every=cfg["eval_every"],
                       checkpoint_every=cfg["checkpoint_every"])


def code_hash() -> str:
    h = hashlib.sha256(__version__.encode())
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@contextlib.contextmanager
def thread_limit(n):
    if not n:
        yield
        return
    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# experiment setup shared by the subcommands
# ---------------------------------------------------------------------------

def build_toy(cfg: dict):
    ds = gen_toy(ToySpec(std=cfg["toy_std"], n_per_cluster=cfg["toy_n"], augment_noise_std=cfg["toy_noise"],
                         seed=cfg["seed"]))
    policy = toy_policy(cfg["toy_noise"], cfg["repeats"])
    model_cfg = toy_config(cfg["heads"], cfg["classes"], cfg["overcluster"])
    return ds, policy, model_cfg


def build_images(cfg: dict):
    ds = load_dataset(cfg["dataset"], cfg["data_path"])
    if cfg["subsample"] and cfg["subsample"] < len(ds):
        idx = np.sort(np.random.default_rng([cfg["seed"], 99]).choice(len(ds), cfg["subsample"], replace=False))
        ds = ds.subset(idx)
    if cfg.get("extra_data_path"):
        ds = intersperse(ds, load_dataset("custom", cfg["extra_data_path"]))
    policy = image_policy(cfg["crop"], cfg["repeats"], flip_p=cfg["flip_p"], grayscale_p=cfg["grayscale_p"],
                          jitter=cfg["jitter"])
    channels = tuple(int(c) for c in str(cfg["channels"]).split(","))
    model_cfg = image_config(cfg["heads"], cfg["classes"], channels, cfg["head_block"], cfg["mlp_hidden"],
                             cfg["overcluster"], (ds.x.shape[1], cfg["crop"], cfg["crop"]))
    return ds, policy, model_cfg


def _build(command: str, cfg: dict):
    return build_toy(cfg) if command == "toy" else build_images(cfg)


def run_experiment(command: str, cfg: dict, out: Path) -> dict:
    """Train and write all artifacts for ``toy`` or ``images``; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ds, policy, model_cfg = _build(command, cfg)
    tcfg = train_config(cfg)
    model = DhogModel(model_cfg, seed=cfg["seed"])
    snapshot = {"command": command, **cfg}

    def progress(epoch, _model, rows):
        sel = next(r["head"] for r in rows if r["selected"])
        log.info("epoch %d: selected head %d, mi_aug %s", epoch, sel, [round(r["mi_aug"], 4) for r in rows])

    result = fit(model, ds, tcfg, policy, callbacks=[progress], checkpoint_path=out / "checkpoint.dhog",
                 config_snapshot=snapshot)
    write_history(result.history, out / "metrics.csv")
    if command == "toy":
        write_toy_csv(ds, out / "toy.csv")
        write_regions(model, out)
        write_partitions(model, ds, out / "partitions.csv")
    else:
        write_image_reports(model, ds, policy, result.selected_head, tcfg.c, out)
    manifest = {
        "command": command, "config": cfg, "code_version": __version__, "code_hash": code_hash(),
        "seed": cfg["seed"], "metrics": result.history, "selected_head": result.selected_head,
        "wall_clock_s": time.perf_counter() - start,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

PALETTE = np.array([[228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163], [255, 127, 0],
                    [255, 255, 51], [166, 86, 40], [247, 129, 191], [153, 153, 153], [0, 0, 0]], dtype=np.float64)


def region_grid(model: DhogModel, lo: float = -4.0, hi: float = 4.0, steps: int = 81):
    axis = np.linspace(lo, hi, steps)
    gx, gy = np.meshgrid(axis, axis)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    probs, _ = model.predict_proba(pts)
    return pts, probs, steps


def write_regions(model: DhogModel, out: Path) -> None:
    pts, probs, steps = region_grid(model)
    with open(out / "regions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "head", "label", "prob"])
        for h, p in enumerate(probs, start=1):
            lab = hard_labels(p)
            for (x, y), l, row in zip(pts, lab, p):
                w.writerow([f"{x:.4f}", f"{y:.4f}", h, int(l), repr(float(row[l]))])
    for h, p in enumerate(probs, start=1):
        write_ppm(out / f"regions_head{h}.ppm", region_image(p, steps))


def region_image(probs: np.ndarray, steps: int, scale: int = 4) -> np.ndarray:
    lab = hard_labels(probs)
    conf = probs.max(axis=1)
    c = probs.shape[1]
    # confidence 1/c renders white, 1 renders the label colour
    t = ((conf - 1.0 / c) / (1 - 1.0 / c))[:, None]
    rgb = 255.0 * (1 - t) + PALETTE[lab % len(PALETTE)] * t
    img = rgb.reshape(steps, steps, 3)[::-1]  # y grows upwards
    return np.kron(img, np.ones((scale, scale, 1))).round().astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def write_partitions(model: DhogModel, ds, path) -> None:
    probs, _ = model.predict_proba(ds.x)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "head", "label"])
        for h, p in enumerate(probs, start=1):
            for i, l in enumerate(hard_labels(p)):
                w.writerow([i, h, int(l)])


def write_image_reports(model: DhogModel, ds, policy, head: int, c: int, out: Path, top: int = 10) -> None:
    probs, _ = model.predict_proba(eval_view(ds.x, policy), 500)
    p = probs[head - 1]
    pred = hard_labels(p)
    if ds.labels is not None:
        keep = ds.labels >= 0
        n_cls = max(c, int(ds.labels.max()) + 1)
        conf = confusion_for(pred[keep], ds.labels[keep], n_cls)
        with open(out / "confusion.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["predicted_class"] + [f"true_{j}" for j in range(n_cls)])
            for i, row in enumerate(conf):
                w.writerow([i] + [int(v) for v in row])
    with open(out / "top_samples.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "rank", "index", "prob"])
        for lab in range(p.shape[1]):
            order = np.argsort(-p[:, lab], kind="stable")[:top]
            for rank, i in enumerate(order, start=1):
                w.writerow([lab, rank, int(i), repr(float(p[i, lab]))])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_toy(args) -> int:
    cfg = resolve_config(TOY_DEFAULTS, args)
    with thread_limit(cfg["threads"]):
        manifest = run_experiment("toy", cfg, _out_dir(args, "runs/toy"))
    print(f"selected head {manifest['selected_head']}; artifacts in {_out_dir(args, 'runs/toy')}")
    return EXIT_OK


def cmd_images(args) -> int:
    cfg = resolve_config(IMAGE_DEFAULTS, args)
    with thread_limit(cfg["threads"]):
        if args.kmeans_baseline:
            ds = load_dataset(cfg["dataset"], cfg["data_path"])
            if cfg["subsample"] and cfg["subsample"] < len(ds):
                rng = np.random.default_rng([cfg["seed"], 99])
                ds = ds.subset(np.sort(rng.choice(len(ds), cfg["subsample"], replace=False)))
            m = kmeans_pixels(ds.x, ds.labels, cfg["classes"], restarts=3, seed=cfg["seed"])
            print_table([("K-means on pixels", m.accuracy, m.nmi, m.ari)])
            out = _out_dir(args, "runs/kmeans")
            out.mkdir(parents=True, exist_ok=True)
            (out / "kmeans.csv").write_text(f"method,acc,nmi,ari\nkmeans_pixels,{m.accuracy!r},{m.nmi!r},{m.ari!r}\n")
            return EXIT_OK
        manifest = run_experiment("images", cfg, _out_dir(args, "runs/images"))
    print(f"selected head {manifest['selected_head']}")
    return EXIT_OK


def print_table(rows, extra_header=()) -> None:
    header = ["Method", "Accuracy", "NMI(z, y)", "ARI", *extra_header]
    print("  ".join(f"{h:>20}" if i == 0 else f"{h:>10}" for i, h in enumerate(header)))
    for r in rows:
        name, acc, nmi_v, ari_v, *rest = r
        cells = [f"{name:>20}", f"{100 * acc:>10.2f}", f"{nmi_v:>10.4f}", f"{ari_v:>10.4f}"]
        cells += [f"{v:>10}" for v in rest]
        print("  ".join(cells))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = dict(ckpt.header.get("config") or {})
    command = cfg.pop("command", "toy")
    for key in ("classes", "heads"):
        want = getattr(args, key, None)
        if want is not None and want != cfg.get(key):
            raise CheckpointError(f"config mismatch: checkpoint has {key}={cfg.get(key)}, requested {want}")
    if args.data_path:
        cfg["data_path"] = args.data_path
    if args.dataset:
        cfg["dataset"] = args.dataset
    ds, policy, model_cfg = _build(command, cfg)
    model = DhogModel(model_cfg, seed=cfg["seed"])
    restore(model, ckpt)
    with thread_limit(cfg.get("threads")):
        rows, selected = evaluate_epoch(model, ds, train_config(cfg), policy, ckpt.epoch)
    if args.head is not None:
        if not 1 <= args.head <= model.k:
            raise ConfigError(f"--head must be in 1..{model.k}")
        selected = args.head
    table = [(f"head {r['head']}" + (" *" if r["head"] == selected else ""), r["acc"], r["nmi"], r["ari"],
              f"{r['mi_aug']:.4f}") for r in rows]
    print_table(table, ("mi_aug",))
    r = rows[selected - 1]
    print(f"selected head {selected}: accuracy {100 * r['acc']:.2f}  nmi {r['nmi']:.4f}  ari {r['ari']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench_all(repetitions=args.repetitions)
    out = _out_dir(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"{r['kernel']:>10} n={r['n']:<5} c={r['c']:<4} k={r['k']:<3} {r['median_us']:>12.1f} us")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    cfg = dict(manifest["config"])
    cfg["threads"] = args.threads or 1
    out = _out_dir(args, str(Path(args.manifest).parent / "replay"))
    with thread_limit(cfg["threads"]):
        again = run_experiment(manifest["command"], cfg, out)
    same = json.dumps(again["metrics"]) == json.dumps(manifest["metrics"])
    print("metrics reproduced exactly" if same else "metrics DIFFER from manifest")
    return EXIT_OK if same else EXIT_NUMERIC


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--alpha", type=float)
    p.add_argument("--heads", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--align", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--overcluster", type=int, metavar="C")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dhog", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="4-Gaussian toy experiment")
    _train_flags(p)
    p.add_argument("--dataset", choices=["toy"], default=None)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("images", help="train on CIFAR-format image data")
    _train_flags(p)
    p.add_argument("--dataset", choices=["cifar10", "cifar100-20", "svhn-like", "custom"])
    p.add_argument("--data-path", help="file or directory (default $DHOG_DATA_DIR)")
    p.add_argument("--extra-data-path", help="unlabelled CIFAR-format data to intersperse")
    p.add_argument("--subsample", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--channels", help="trunk channels, e.g. 32,64,128")
    p.add_argument("--head-block", type=int)
    p.add_argument("--kmeans-baseline", action="store_true")
    p.set_defaults(func=cmd_images)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--data-path")
    p.add_argument("--classes", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head", type=int, help="report this head instead of the selected one")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="micro-benchmarks of the hot kernels")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run an experiment from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"dhog: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ConfigError, KeyError) as e:
        print(f"dhog: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"dhog: invalid configuration: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
