"""Command line entry point: ``vaeattn <command> [--config run.ini] [flags]``.

Every command resolves a sectioned INI config (file values, then flags), writes
the resolved snapshot and a ``run.json`` manifest into the run directory, and
maps failures onto exit codes 2 (config), 3 (data) and 4 (divergence).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from PIL import Image

from . import __version__
from .attention import (NormalStats, anomaly_attention, attention_set, fit_normal_stats,
                        load_raw_map, minmax_normalize, save_map_png, save_raw_map, to_uint8)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (DEFECT_KINDS, DatasetManifest, export_folder_dataset, gen_defect_dataset,
                   gen_digit_dataset, gen_shapes_dataset, load_folder_dataset, load_idx_images,
                   write_idx)
from .disentangle import AdConfig, disentanglement_metric, train_ad_factorvae
from .exceptions import ConfigError, DataError, DivergenceError
from .metrics import binarize, evaluate_category, score_maps, write_report_csv
from .model import TrainConfig, VaeConfig, train_vae

log = logging.getLogger("vaeattn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# section -> key -> default; the type of the default is the parse type
DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "out": ""},
    "data": {
        "source": "defect", "root": "", "categories": "", "resolution": 64, "size": 0,
        "channels": 1, "mask_suffix": "_mask", "n_normal": 100, "n_abnormal": 20,
        "n_test_normal": 0, "defect_kind": "blob", "texture_sigma": 2.0, "contrast": 0.15,
        "strength": "0.1,0.2", "area_band": "0.01,0.06", "n_images": 10000,
        "normal_class": 1, "n_per_class": 200, "images_path": "", "labels_path": "",
    },
    "model": {
        "latent_dim": 16, "channels": "32,64,128", "activation": "relu",
        "residual_blocks": 0, "hidden": 0, "checkpoint": "",
    },
    "train": {
        "steps": 300, "epochs": 0, "batch_size": 32, "learning_rate": 1e-3, "beta": 1e-3,
        "recon_reduction": "mean", "augment": False,
    },
    "attention": {
        "layer": "", "mode": "normal-diff", "sampling": "mu", "n_draws": 16, "n_images": 8,
        "normalize": True, "max_thresholds": 0, "replay": "",
    },
    "disentangle": {
        "lambda": 1.0, "gamma": 40.0, "pair_selection": "top2", "layer": "",
        "normalization": "none", "sampling": "z", "eval_every": 0, "eval_images": 256,
        "n_votes": 500, "batch_per_vote": 64, "n_global": 10000,
        # model and optimiser of the factor runs, separate from the localization defaults
        "latent_dim": 10, "channels": "32,32,64,64", "hidden": 128, "steps": 3000,
        "batch_size": 64, "learning_rate": 1e-4, "beta": 1.0, "recon_reduction": "bernoulli",
    },
}

CHOICES = {
    ("data", "source"): ("defect", "folder", "digits", "idx", "shapes"),
    ("data", "defect_kind"): DEFECT_KINDS,
    ("attention", "mode"): ("sum-mu", "normal-diff"),
    ("attention", "sampling"): ("mu", "z"),
    ("disentangle", "sampling"): ("mu", "z"),
    ("disentangle", "normalization"): ("none", "sum"),
    ("train", "recon_reduction"): ("mean", "sum"),
    ("disentangle", "recon_reduction"): ("mean", "sum", "bernoulli"),
}

# flag dest -> (section, key)
FLAG_KEYS = {
    "seed": ("run", "seed"), "out": ("run", "out"), "layer": ("attention", "layer"),
    "mode": ("attention", "mode"), "sampling": ("attention", "sampling"),
    "ad_lambda": ("disentangle", "lambda"), "gamma": ("disentangle", "gamma"),
    "checkpoint": ("model", "checkpoint"), "root": ("data", "root"),
    "source": ("data", "source"),
}


# ---------------------------------------------------------------------------
# Configuration

def _parse_value(section, key, raw):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            value = configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} "
                          f"as {type(default).__name__}") from None
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ConfigError(f"[{section}] {key} must be one of {', '.join(allowed)}, got {raw!r}")
    return value


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the INI file, then ``{(section, key): value}`` overrides."""
    cfg = {s: dict(keys) for s, keys in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg[section][key] = _parse_value(section, key, raw)
    for (section, key), value in (overrides or {}).items():
        cfg[section][key] = _parse_value(section, key, str(value))
    return cfg


def dump_config(cfg) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in cfg.items():
        parser[section] = {k: str(v).lower() if isinstance(v, bool) else str(v)
                           for k, v in keys.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _floats(text, n=None, name=""):
    try:
        vals = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{name}: expected {n} values, got {text!r}")
    return vals


def _ints(text, name=""):
    return tuple(int(v) for v in _floats(text, name=name))


def derive_seeds(root_seed, names=("data", "model", "attention", "metric")) -> dict:
    """Independent per-component seeds spawned from the root seed."""
    children = np.random.SeedSequence(int(root_seed)).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# Run directory bookkeeping

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(sha256_file(p).encode())
    return h.hexdigest()


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Run:
    """Owns the locked run directory and the outputs recorded in its manifest."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["run"]["out"] or f"runs/{command}")
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.seeds = derive_seeds(cfg["run"]["seed"])
        self._lock = None

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.out / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise ConfigError(f"run directory {self.out} is locked by another process") from None
        self._t0 = time.perf_counter()
        self.add(self.out / "config.ini", dump_config(self.cfg))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None or issubclass(exc_type, DivergenceError):
                self.write_manifest(failed=exc_type is not None)
        finally:
            self._lock.release()
            Path(self._lock.lock_file).unlink(missing_ok=True)
        return False

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, path, text=None):
        path = Path(path)
        if text is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        self.outputs.append(path)
        return path

    def add_input(self, label, path):
        path = Path(path)
        self.inputs[label] = sha256_tree(path) if path.is_dir() else sha256_file(path)

    @property
    def run_id(self):
        blob = json.dumps({"command": self.command, "config": self.cfg}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write_manifest(self, failed=False):
        files = sorted({str(p.relative_to(self.out)) for p in self.outputs if p.exists()})
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "status": "diverged" if failed else "ok",
            "config": self.cfg,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": files,
            "wall_clock_s": round(time.perf_counter() - self._t0, 3),
            "version": f"vaeattn {__version__}",
        }
        manifest.update(self.extra)
        _atomic_write(self.out / "run.json", json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Data and model assembly

def _defect_kwargs(d):
    return dict(resolution=d["resolution"], defect_kind=d["defect_kind"],
                n_test_normal=d["n_test_normal"], texture_sigma=d["texture_sigma"],
                contrast=d["contrast"], strength=_floats(d["strength"], 2, "strength"),
                area_band=_floats(d["area_band"], 2, "area_band"))


def _root(run, d):
    if not d["root"]:
        raise ConfigError(f"[data] root is required for source={d['source']}")
    root = Path(d["root"])
    if not root.exists():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    return root


def category_splits(run: Run):
    """Yield ``(category, train, test)`` one-class splits for the data section."""
    d = run.cfg["data"]
    seed = run.seeds["data"]
    if d["source"] == "defect":
        train, test = gen_defect_dataset(d["n_normal"], d["n_abnormal"], seed=seed,
                                         **_defect_kwargs(d))
        yield train.category, train, test
    elif d["source"] == "folder":
        root = _root(run, d)
        names = [c.strip() for c in d["categories"].split(",") if c.strip()] or sorted(
            p.name for p in root.iterdir() if (p / "train").is_dir())
        if not names:
            raise DataError(f"no categories with a train/ directory under {root}")
        size = (d["size"], d["size"]) if d["size"] else None
        for name in names:
            run.add_input(f"data/{name}", root / name)
            train, test = load_folder_dataset(root, name, size=size, channels=d["channels"],
                                              mask_suffix=d["mask_suffix"])
            yield name, train, test
    elif d["source"] == "digits":
        train = gen_digit_dataset(d["n_per_class"], (d["normal_class"],), d["resolution"],
                                  seed, "train")
        test = gen_digit_dataset(1, tuple(range(10)), d["resolution"], seed + 1, "test")
        yield "digits", train, test
    elif d["source"] == "idx":
        if not d["images_path"]:
            raise ConfigError("[data] images_path is required for source=idx")
        run.add_input("images", d["images_path"])
        if d["labels_path"]:
            run.add_input("labels", d["labels_path"])
        full = load_idx_images(d["images_path"], d["labels_path"] or None, split="train")
        normal = [s for s in full if s.label in (d["normal_class"], "normal")]
        if not normal:
            raise DataError(f"no samples of class {d['normal_class']} in {d['images_path']}")
        yield full.category, DatasetManifest("train", normal, full.category,
                                             full.resolution), full
    else:
        raise ConfigError(f"source {d['source']!r} has no one-class split")


def vae_config(cfg, input_shape) -> VaeConfig:
    m = cfg["model"]
    try:
        return VaeConfig.small(tuple(input_shape), m["latent_dim"],
                               _ints(m["channels"], "channels"), activation=m["activation"],
                               residual_blocks=m["residual_blocks"], hidden=m["hidden"])
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"] or 1, n_steps=t["steps"] or None,
                       batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                       beta=t["beta"], recon_reduction=t["recon_reduction"],
                       augment=t["augment"])


def _attach_stats(ckpt: Checkpoint, images):
    stats = fit_normal_stats(ckpt, images)
    ckpt.extras["normal_mu"] = np.asarray(stats.mu, np.float64)
    ckpt.extras["normal_sigma"] = np.asarray(stats.sigma, np.float64)
    return stats


def _stats_of(ckpt: Checkpoint):
    if "normal_mu" not in ckpt.extras:
        return None
    return NormalStats(ckpt.extras["normal_mu"], ckpt.extras["normal_sigma"])


def _train_one(run, name, train):
    X = train.images()
    ckpt = train_vae(X, vae_config(run.cfg, X.shape[1:]), train_config(run.cfg),
                     seed=run.seeds["model"])
    _attach_stats(ckpt, X)
    path = run.add(save_checkpoint(ckpt, run.path(f"{name}.vae")))
    with run.add(run.path(f"{name}_loss.csv")).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows(enumerate(ckpt.meta["loss_curve"]))
    log.info("trained %s: loss %.5g -> %.5g", name, ckpt.meta["initial_loss"],
             ckpt.meta["final_loss"])
    return ckpt, path


def _load_model(run):
    path = run.cfg["model"]["checkpoint"]
    if not path:
        return None
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    run.add_input("checkpoint", path)
    return load_checkpoint(path)


def _layer(cfg, key="attention"):
    return cfg[key]["layer"] or None


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_data(run: Run):
    d = run.cfg["data"]
    seed = run.seeds["data"]
    if d["source"] == "defect":
        train, test = gen_defect_dataset(d["n_normal"], d["n_abnormal"], seed=seed,
                                         **_defect_kwargs(d))
        base = export_folder_dataset(run.out / "data", train, test)
        run.outputs.extend(p for p in base.rglob("*") if p.is_file())
    elif d["source"] == "digits":
        for split, n, s in (("train", d["n_per_class"], seed), ("test", 1, seed + 1)):
            m = gen_digit_dataset(n, tuple(range(10)), d["resolution"], s, split)
            pixels = np.round(m.images()[..., 0] * 255).astype(np.uint8)
            for kind, arr in (("images-idx3", pixels), ("labels-idx1",
                                                         np.asarray(m.labels(), np.uint8))):
                path = run.path("data", f"{split}-{kind}-ubyte")
                write_idx(path, arr)
                run.add(path)
    elif d["source"] == "shapes":
        ds = gen_shapes_dataset(resolution=d["resolution"], seed=seed)
        ords = ds.random_ordinals(d["n_images"], seed)
        path = run.path("data", "shapes.npz")
        np.savez_compressed(path, images=(ds.images(ords)[..., 0] > 0.5),
                            factors=ds.factors(ords), ordinals=ords)
        run.add(path)
    else:
        raise ConfigError(f"gen-data cannot generate source={d['source']!r}")


def cmd_train(run: Run):
    for name, train, _ in category_splits(run):
        _train_one(run, name, train)


def cmd_attend(run: Run):
    a = run.cfg["attention"]
    shared = _load_model(run)
    for name, train, test in category_splits(run):
        ckpt = shared or _train_one(run, name, train)[0]
        stats = _stats_of(ckpt) or _attach_stats(ckpt, train.images())
        images = test.images()[:a["n_images"]]
        layer = _layer(run.cfg) or ckpt.config.default_layer
        per_dim = attention_set(ckpt, images, layer, a["sampling"], run.seeds["attention"])
        agg = anomaly_attention(ckpt, images, a["mode"], layer, stats, run.seeds["attention"],
                                n_draws=a["n_draws"]).values.reshape(len(images),
                                                                       *images.shape[1:3])
        for n in range(len(images)):
            maps = [(f"dim{m.latent_index:02d}", m.values[n]) for m in per_dim]
            maps.append(("aggregate", agg[n]))
            for tag, values in maps:
                stem = f"{name}/{n:04d}_{tag}"
                run.add(save_map_png(values, run.path(f"{stem}.png")))
                run.add(save_raw_map(values, run.path(f"{stem}.amap")))
        run.extra["maps_per_image"] = len(per_dim) + 1
        run.extra["layer"] = layer


def write_table(reports, path):
    """Wide table: one row per category with AUROC and best-IOU per method."""
    cats = list(dict.fromkeys(r.category for r in reports))
    methods = list(dict.fromkeys(r.method for r in reports))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category"] + [f"{m}_{k}" for m in methods for k in ("auroc", "best_iou")])
        for c in cats:
            row = {r.method: r for r in reports if r.category == c}
            w.writerow([c] + [repr(getattr(row[m], k)) for m in methods
                              for k in ("auroc", "best_iou")])
    return Path(path)


def _replay(run: Run, a):
    """Rescore raw maps saved by an earlier localize run."""
    src = Path(a["replay"])
    if not (src / "maps").is_dir():
        raise FileNotFoundError(f"no maps/ directory under {src}")
    reports = []
    for truth_path in sorted((src / "maps").glob("*_truth.amap")):
        name = truth_path.name[:-len("_truth.amap")]
        masks = load_raw_map(truth_path).astype(np.uint8)
        run.add_input(f"maps/{name}", truth_path)
        for method in ("attention", "recon"):
            p = src / "maps" / f"{name}_{method}.amap"
            if p.exists():
                meta = json.loads((src / "maps" / f"{name}_{method}.json").read_text())
                reports.append(score_maps(load_raw_map(p), masks, category=name, method=method,
                                          layer=meta["layer"], normalize=a["normalize"],
                                          max_thresholds=a["max_thresholds"] or None))
    if not reports:
        raise DataError(f"no saved maps found under {src / 'maps'}")
    return reports


def cmd_localize(run: Run):
    a = run.cfg["attention"]
    if a["replay"]:
        reports = _replay(run, a)
    else:
        shared = _load_model(run)
        reports = []
        for name, train, test in category_splits(run):
            ckpt = shared or _train_one(run, name, train)[0]
            stats = _stats_of(ckpt) or _attach_stats(ckpt, train.images())
            rep, maps = evaluate_category(ckpt, test, "both", _layer(run.cfg), a["mode"], stats,
                                          run.seeds["attention"], a["normalize"],
                                          a["max_thresholds"] or None, return_maps=True,
                                          n_draws=a["n_draws"])
            masks = test.masks()
            run.add(save_raw_map(masks, run.path("maps", f"{name}_truth.amap")))
            for r in rep:
                raw = maps[r.method]
                run.add(save_raw_map(raw, run.path("maps", f"{name}_{r.method}.amap")))
                run.add(run.path("maps", f"{name}_{r.method}.json"), json.dumps({"layer": r.layer}))
                scored = minmax_normalize(raw) if a["normalize"] else raw
                pred = binarize(scored, r.best_threshold)
                for i, p in enumerate(pred):
                    out = run.path("masks", name, r.method, f"{i:04d}.png")
                    Image.fromarray(p * np.uint8(255)).save(out)
                    run.add(out)
            reports.extend(rep)
    run.add(write_report_csv(reports, run.path("report.csv")))
    run.add(write_table(reports, run.path("table.csv")))
    for r in reports:
        log.info("%s %s auroc=%.4f best_iou=%.4f", r.category, r.method, r.auroc, r.best_iou)
    run.extra["reports"] = [vars(r) for r in reports]


def _shapes(run):
    d = run.cfg["data"]
    ds = gen_shapes_dataset(resolution=d["resolution"], seed=run.seeds["data"])
    train = ds.images(ds.random_ordinals(d["n_images"], run.seeds["data"]))
    return ds, train


def _ad_config(cfg):
    s = cfg["disentangle"]
    pair = s["pair_selection"]
    if "," in pair:
        pair = _ints(pair, "pair_selection")
    try:
        return AdConfig(ad_lambda=s["lambda"], pair_selection=pair, layer=s["layer"] or None,
                        normalization=s["normalization"], sampling=s["sampling"])
    except ValueError as exc:
        raise ConfigError(f"[disentangle] {exc}") from None


def _metric_kwargs(cfg, seed):
    s = cfg["disentangle"]
    return dict(n_votes=s["n_votes"], batch_per_vote=s["batch_per_vote"], seed=seed,
                n_global=s["n_global"])


def cmd_distrain(run: Run):
    s = run.cfg["disentangle"]
    ds, X = _shapes(run)
    ev = ds.images(ds.random_ordinals(s["eval_images"], run.seeds["metric"]))
    m = run.cfg["model"]
    try:
        config = VaeConfig.small(X.shape[1:], s["latent_dim"], _ints(s["channels"], "channels"),
                                 activation=m["activation"], hidden=s["hidden"])
    except ValueError as exc:
        raise ConfigError(f"[disentangle] {exc}") from None
    tc = TrainConfig(n_steps=s["steps"], batch_size=s["batch_size"],
                     learning_rate=s["learning_rate"], beta=s["beta"],
                     recon_reduction=s["recon_reduction"])
    ckpt, trace = train_ad_factorvae(
        X, config, _ad_config(run.cfg), s["gamma"], tc, seed=run.seeds["model"],
        factor_dataset=ds, eval_every=s["eval_every"] or None, eval_images=ev,
        metric_kwargs=_metric_kwargs(run.cfg, run.seeds["metric"]),
        callback=lambda row: log.info("step %d metric %.3f", row["step"], row.get("metric", -1)))
    run.add(save_checkpoint(ckpt, run.path("model.vae")))
    cols = ["step", "L_r", "L_KL", "TC", "L_AD", "total", "eval_L_AD", "recon_error", "metric"]
    with run.add(run.path("trace.csv")).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(trace)
    with run.add(run.path("scatter.csv")).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "gamma", "seed", "step", "recon_error", "metric"])
        for row in trace:
            w.writerow([s["lambda"], s["gamma"], run.cfg["run"]["seed"], row["step"],
                        row["recon_error"], row["metric"]])
    run.add(_scatter_plot(trace, s, run.path("scatter.png")))
    run.extra["final"] = trace[-1]


def _scatter_plot(trace, s, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.2), dpi=100)
    ax.plot([r["recon_error"] for r in trace], [r["metric"] for r in trace], "o-",
            label=f"lambda={s['lambda']:g}, gamma={s['gamma']:g}")
    ax.set_xlabel("reconstruction error (mean per-image SSE)")
    ax.set_ylabel("disentanglement metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def cmd_dismetric(run: Run):
    ckpt = _load_model(run)
    if ckpt is None:
        raise ConfigError("dismetric needs [model] checkpoint (or --checkpoint)")
    d = run.cfg["data"]
    ds = gen_shapes_dataset(resolution=d["resolution"], seed=run.seeds["data"])
    report = disentanglement_metric(ckpt, ds, **_metric_kwargs(run.cfg, run.seeds["metric"]))
    run.add(run.path("metric.json"), json.dumps(report.as_dict(), indent=2))
    log.info("disentanglement metric %.4f", report.score)
    run.extra["metric"] = report.score


def cmd_demo(run: Run):
    """Train on one digit class and panel the anomaly attention of every digit."""
    run.cfg["data"]["source"] = "digits"
    a = run.cfg["attention"]
    name, train, test = next(category_splits(run))
    ckpt, _ = _train_one(run, name, train)
    stats = _stats_of(ckpt)
    images = test.images()
    maps = anomaly_attention(ckpt, images, a["mode"], _layer(run.cfg), stats,
                             run.seeds["attention"], n_draws=a["n_draws"]).values.reshape(len(images),
                                                                    *images.shape[1:3])
    run.add(save_grid(images[..., 0], maps, run.path("grid.png")))
    for i, m in enumerate(maps):
        run.add(save_raw_map(m, run.path("maps", f"{test.labels()[i]}.amap")))


def save_grid(images, maps, path):
    """Two-row panel: inputs on top, normalized attention below, one column each."""
    top = np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)
    bottom = to_uint8(maps)
    grid = np.concatenate([np.concatenate(list(top), axis=1),
                           np.concatenate(list(bottom), axis=1)], axis=0)
    Image.fromarray(grid).save(path)
    return Path(path)


COMMANDS = {
    "train": cmd_train, "attend": cmd_attend, "localize": cmd_localize,
    "distrain": cmd_distrain, "dismetric": cmd_dismetric, "demo": cmd_demo,
    "gen-data": cmd_gen_data,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vaeattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vaeattn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        p.add_argument("--config", help="INI file with [run]/[data]/[model]/... sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        p.add_argument("--layer")
        p.add_argument("--mode", choices=CHOICES[("attention", "mode")])
        p.add_argument("--sampling", choices=CHOICES[("attention", "sampling")])
        p.add_argument("--lambda", dest="ad_lambda", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--checkpoint")
        p.add_argument("--root", help="dataset root directory")
        p.add_argument("--source", choices=CHOICES[("data", "source")])
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args):
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {key!r}")
        out[(section, name)] = value
    for dest, target in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[target] = value
    return out


def run_command(command, cfg):
    with Run(command, cfg) as run:
        try:
            COMMANDS[command](run)
        except DivergenceError as exc:
            if exc.checkpoint is not None:
                run.add(save_checkpoint(exc.checkpoint, run.path("diverged.vae")))
            raise
    return run


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        run = run_command(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(run.out / "run.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
