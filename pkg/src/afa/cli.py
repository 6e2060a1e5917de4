"""Command-line experiment harness.

    afa run CONFIG [--out DIR] [--set key=value ...]
    afa compare CONFIG --strategies natural,pgd_at,afa [--out DIR]
    afa export-embeddings CONFIG --checkpoint FILE [--layer penultimate] [--split test] --out FILE
    afa validate-config CONFIG
    afa report RUN_DIR [--format csv|json]

CONFIG is a TOML file or ``preset:<name>`` for a shipped preset.  The only
environment variable read is ``AFA_NUM_THREADS`` (BLAS thread count).
"""
from __future__ import annotations

import os

_threads = os.environ.get("AFA_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import copy  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from importlib import resources  # noqa: E402
from pathlib import Path  # noqa: E402

try:  # noqa: E402
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np  # noqa: E402

from . import align  # noqa: E402
from .attacks import AttackConfig, adaptive_afa_attack, ce_loss_fn, pgd, robust_accuracy  # noqa: E402
from .data import (AugmentPipeline, Dataset, SyntheticSpec, VectorJitter, first_n_per_class,  # noqa: E402
                   gaussian_mixture, gen_synthetic, load_cifar_binary, load_idx)
from .losses import LossConfig  # noqa: E402
from .nn import Model, ModelSpec, image_spec, load_checkpoint, save_checkpoint, synthetic_spec  # noqa: E402
from .train import STRATEGIES, FinetuneMode, Schedule, TrainConfig, finetune, train  # noqa: E402

__all__ = ["main", "ConfigError", "load_config", "validate", "config_hash", "run", "compare",
           "export_embeddings", "read_embeddings", "PRESETS"]

PRESETS = ("lemma1", "theorem1", "misaligned-witness", "mnist-tradeoff", "lambda-grid",
           "view-ablation", "optimization-ablation")
PARTIAL_MARKER = "PARTIAL"
LOCK_FILE = ".lock"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

NUM = (int, float)
_ATTACK = {"name": str, "epsilon": NUM, "step_size": NUM, "iterations": int, "random_start": bool}
_SCHEDULE = {"kind": str, "warmup_epochs": int, "warmup_start": NUM, "milestones": list, "factor": NUM}
_AUGMENT = {"crop": bool, "crop_scale": list, "crop_ratio": list, "flip_p": NUM, "jitter_p": NUM,
            "brightness": NUM, "contrast": NUM, "saturation": NUM, "hue": NUM, "grayscale_p": NUM,
            "sigma": NUM, "enabled": bool}
_LOSS = {"tau": NUM, "lambda1": NUM, "lambda2": NUM, "beta": NUM, "joint_afa_weight": NUM,
         "afa_exclude_self": bool}
_FINETUNE = {"mode": str, "epochs": int, "lr": NUM, "momentum": NUM, "weight_decay": NUM,
             "batch_size": int, "attack": _ATTACK, "schedule": _SCHEDULE}
_DATASET_KINDS = {
    "synthetic": {"num_classes", "dim", "radius", "separation", "train_radius", "train_per_class",
                  "test_per_class", "metric", "mode", "center_spacing"},
    "gaussian_mixture": {"num_classes", "dim", "spread", "sigma", "train_per_class", "test_per_class"},
    "idx": {"train_images", "train_labels", "test_images", "test_labels", "num_classes",
            "train_per_class", "test_per_class"},
    "cifar": {"train_files", "test_files", "label_bytes", "num_classes", "train_per_class",
              "test_per_class"},
}
SCHEMA = {
    "name": str,
    "seed": int,
    "output_dir": str,
    "dataset": {"kind": str, "num_classes": int, "dim": int, "radius": NUM, "separation": NUM,
                "train_radius": NUM, "train_per_class": int, "test_per_class": int, "metric": str,
                "mode": str, "center_spacing": NUM, "spread": NUM, "sigma": NUM, "train_images": str,
                "train_labels": str, "test_images": str, "test_labels": str, "train_files": list,
                "test_files": list, "label_bytes": int},
    "model": {"kind": str, "channels": list, "hidden": int, "widths": list, "projection_dim": int,
              "seed": int},
    "train": {"strategy": str, "epochs": int, "batch_size": int, "lr": NUM, "momentum": NUM,
              "weight_decay": NUM, "views": (str, list), "normalize_anchors": bool,
              "afa_clean_anchors": bool, "balanced": bool, "augment_supervised": bool,
              "schedule": _SCHEDULE, "attack": _ATTACK, "loss": _LOSS, "augment": _AUGMENT,
              "finetune": _FINETUNE},
    "evaluation": {"attacks": [_ATTACK], "metrics": list, "spaces": list, "modes": list, "k": list,
                   "layer_curve": bool, "layer_curve_attack": str, "normalize": bool,
                   "adaptive": bool, "attack_samples": int,
                   "lipschitz": {"runs": int, "epsilon": NUM, "step_size": NUM, "iterations": int,
                                 "samples": int}},
    "variants": [dict],
}
REQUIRED = ("seed", "dataset")


def _type_name(t) -> str:
    if isinstance(t, tuple):
        return " or ".join(sorted({x.__name__ for x in t}))
    return t.__name__


def _check(value, schema, path: str, errors: list[str]) -> None:
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a table")
            return
        for key, v in value.items():
            sub = f"{path}.{key}" if path else key
            if key not in schema:
                errors.append(f"{sub}: unknown key")
                continue
            _check(v, schema[key], sub, errors)
        return
    if isinstance(schema, list):
        if not isinstance(value, list):
            errors.append(f"{path}: expected an array")
            return
        for i, item in enumerate(value):
            _check(item, schema[0], f"{path}[{i}]", errors)
        return
    ok = isinstance(value, schema) and not (isinstance(value, bool) and schema in (int, NUM))
    if not ok:
        errors.append(f"{path}: expected {_type_name(schema)}, got {type(value).__name__}")


def _resolve(path: str, base_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def _semantic(cfg: dict, base_dir: Path, errors: list[str], where: str = "") -> None:
    pre = f"{where}" if where else ""
    ds = cfg.get("dataset")
    if isinstance(ds, dict):
        kind = ds.get("kind")
        if kind not in _DATASET_KINDS:
            errors.append(f"{pre}dataset.kind: expected one of {sorted(_DATASET_KINDS)}, got {kind!r}")
        else:
            for key in ds:
                if key != "kind" and key not in _DATASET_KINDS[kind]:
                    errors.append(f"{pre}dataset.{key}: not used by dataset kind {kind!r}")
            files = []
            if kind == "idx":
                for key in ("train_images", "train_labels", "test_images", "test_labels"):
                    if key not in ds:
                        errors.append(f"{pre}dataset.{key}: required for idx datasets")
                    else:
                        files.append((key, ds[key]))
            if kind == "cifar":
                for key in ("train_files", "test_files"):
                    if key not in ds:
                        errors.append(f"{pre}dataset.{key}: required for cifar datasets")
                    else:
                        files += [(key, f) for f in ds[key]]
            for key, f in files:
                if isinstance(f, str) and not _resolve(f, base_dir).exists():
                    errors.append(f"{pre}dataset.{key}: file not found: {f}")
            if kind == "synthetic":
                try:
                    _synthetic_spec(ds, cfg.get("seed", 0)).validate()
                except (ValueError, TypeError) as exc:
                    errors.append(f"{pre}dataset: {exc}")
    model = cfg.get("model")
    if isinstance(model, dict) and model.get("kind") not in ("cnn", "mlp"):
        errors.append(f"{pre}model.kind: expected 'cnn' or 'mlp', got {model.get('kind')!r}")
    tr = cfg.get("train")
    if isinstance(tr, dict):
        if "model" not in cfg:
            errors.append(f"{pre}train: a [model] section is required for training")
        if tr.get("strategy") not in STRATEGIES:
            errors.append(f"{pre}train.strategy: expected one of {list(STRATEGIES)}, got {tr.get('strategy')!r}")
        ft = tr.get("finetune")
        if isinstance(ft, dict) and ft.get("mode", "ALF") not in ("SLF", "ALF", "SFF", "AFF"):
            errors.append(f"{pre}train.finetune.mode: expected SLF/ALF/SFF/AFF, got {ft.get('mode')!r}")
        try:
            _train_config(tr, cfg.get("seed", 0), image=True)
        except (ValueError, TypeError) as exc:
            errors.append(f"{pre}train: {exc}")
    ev = cfg.get("evaluation")
    if isinstance(ev, dict):
        for m in ev.get("metrics", []):
            try:
                align.Metric.of(m)
            except (ValueError, TypeError):
                errors.append(f"{pre}evaluation.metrics: unknown metric {m!r}")
        for m in ev.get("modes", []):
            if m not in align.MODES:
                errors.append(f"{pre}evaluation.modes: unknown mode {m!r}")
        for s in ev.get("spaces", []):
            if not (s in ("input", "penultimate") or (isinstance(s, int) and not isinstance(s, bool))):
                errors.append(f"{pre}evaluation.spaces: expected 'input', 'penultimate' or a layer index, got {s!r}")
        if "model" not in cfg and (ev.get("attacks") or any(s != "input" for s in ev.get("spaces", []))):
            errors.append(f"{pre}evaluation: attacks and feature spaces need a [model] section")
        names = [a.get("name") for a in ev.get("attacks", []) if isinstance(a, dict)]
        for a in ev.get("attacks", []):
            if isinstance(a, dict) and "name" not in a:
                errors.append(f"{pre}evaluation.attacks: every attack needs a name")
        if "train-adv" in ev.get("modes", []) and not names:
            errors.append(f"{pre}evaluation.modes: train-adv needs at least one attack")
        lca = ev.get("layer_curve_attack")
        if lca is not None and lca not in names:
            errors.append(f"{pre}evaluation.layer_curve_attack: no attack named {lca!r}")


def validate(cfg: dict, base_dir: Path | str = ".") -> list[str]:
    """Every schema and semantic violation in ``cfg`` (empty when valid)."""
    base_dir = Path(base_dir)
    errors: list[str] = []
    _check(cfg, SCHEMA, "", errors)
    for key in REQUIRED:
        if key not in cfg:
            errors.append(f"{key}: required")
    if errors:
        return errors
    variants = cfg.get("variants", [])
    if not variants:
        _semantic(cfg, base_dir, errors)
    names = set()
    for i, v in enumerate(variants):
        name = v.get("name")
        if not isinstance(name, str):
            errors.append(f"variants[{i}].name: required string")
            continue
        if name in names:
            errors.append(f"variants[{i}].name: duplicate {name!r}")
        names.add(name)
        merged = _variant_config(cfg, v)
        sub: list[str] = []
        _check(merged, SCHEMA, "", sub)
        if not sub:
            _semantic(merged, base_dir, sub)
        errors += [f"variants[{i}] ({name}): {e}" for e in sub]
    return errors


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _variant_config(cfg: dict, variant: dict) -> dict:
    base = {k: v for k, v in cfg.items() if k != "variants"}
    return _deep_merge(base, {k: v for k, v in variant.items() if k != "name"})


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """64-bit digest of the canonical JSON form of a parsed config."""
    return hashlib.blake2b(canonical(cfg).encode(), digest_size=8).hexdigest()


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        key, text = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(text.strip())
    return cfg


def load_config(ref: str, sets: list[str] | None = None) -> tuple[dict, Path]:
    """Parse a TOML file (or ``preset:<name>``); returns ``(config, base_dir)``."""
    if ref.startswith("preset:"):
        name = ref.split(":", 1)[1]
        if name not in PRESETS:
            raise ConfigError([f"unknown preset {name!r}; available: {', '.join(PRESETS)}"])
        text = resources.files("afa.presets").joinpath(f"{name}.toml").read_text()
        base = Path.cwd()
    else:
        path = Path(ref)
        if not path.exists():
            raise ConfigError([f"config file not found: {ref}"])
        text = path.read_text()
        base = path.resolve().parent
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax: {exc}"]) from None
    return apply_overrides(cfg, sets or []), base


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _synthetic_spec(ds: dict, seed: int) -> SyntheticSpec:
    keys = _DATASET_KINDS["synthetic"]
    return SyntheticSpec(seed=seed, **{k: v for k, v in ds.items() if k in keys})


def build_data(ds: dict, seed: int, base_dir: Path):
    """``(train, test, certificate-or-None)`` for a dataset section."""
    kind = ds["kind"]
    cert = None
    if kind == "synthetic":
        train_ds, test_ds, cert = gen_synthetic(_synthetic_spec(ds, seed))
    elif kind == "gaussian_mixture":
        kw = {k: ds[k] for k in ("num_classes", "dim", "spread", "sigma") if k in ds}
        train_ds = gaussian_mixture(ds.get("train_per_class", 100), seed=seed, split="train", **kw)
        test_ds = gaussian_mixture(ds.get("test_per_class", 100), seed=seed + 1, split="test", **kw)
    elif kind == "idx":
        n = ds.get("num_classes", 10)
        train_ds = load_idx(_resolve(ds["train_images"], base_dir), _resolve(ds["train_labels"], base_dir), n, "train")
        test_ds = load_idx(_resolve(ds["test_images"], base_dir), _resolve(ds["test_labels"], base_dir), n, "test")
    elif kind == "cifar":
        n, lb = ds.get("num_classes", 10), ds.get("label_bytes", 1)
        train_ds = load_cifar_binary([_resolve(f, base_dir) for f in ds["train_files"]], n, lb, "train")
        test_ds = load_cifar_binary([_resolve(f, base_dir) for f in ds["test_files"]], n, lb, "test")
    else:
        raise ConfigError([f"dataset.kind: unknown {kind!r}"])
    if kind in ("idx", "cifar"):
        if "train_per_class" in ds:
            train_ds = first_n_per_class(train_ds, ds["train_per_class"])
        if "test_per_class" in ds:
            test_ds = first_n_per_class(test_ds, ds["test_per_class"])
    return train_ds, test_ds, cert


def build_model_spec(m: dict, train_ds: Dataset) -> ModelSpec:
    if m["kind"] == "cnn":
        return image_spec(train_ds.x.shape[1:], train_ds.num_classes, tuple(m.get("channels", (8, 16))),
                          m.get("hidden", 64), m.get("projection_dim", 128))
    if train_ds.x.ndim != 2:
        raise ConfigError(["model.kind: 'mlp' needs vector data"])
    return synthetic_spec(train_ds.x.shape[1], train_ds.num_classes, tuple(m.get("widths", (64, 32))),
                          m.get("projection_dim", 128))


def _attack(d: dict | None, default: AttackConfig | None = None) -> AttackConfig:
    if d is None:
        return default if default is not None else AttackConfig()
    kw = {k: v for k, v in d.items() if k in ("epsilon", "step_size", "iterations", "random_start")}
    return AttackConfig(**kw)


def _augment(d: dict | None, image: bool):
    if d is None:
        return None
    d = dict(d)
    if d.pop("enabled", True) is False:
        return AugmentPipeline.identity() if image else VectorJitter(0.0)
    if not image:
        return VectorJitter(d.get("sigma", 0.1))
    d.pop("sigma", None)
    return AugmentPipeline.from_dict(d)


def _train_config(tr: dict, seed: int, image: bool) -> TrainConfig:
    kw = {k: tr[k] for k in ("strategy", "epochs", "batch_size", "lr", "momentum", "weight_decay",
                             "normalize_anchors", "afa_clean_anchors", "balanced", "augment_supervised")
          if k in tr}
    if "views" in tr:
        kw["views"] = tr["views"] if isinstance(tr["views"], str) else tuple(tr["views"])
    if "schedule" in tr:
        kw["schedule"] = Schedule(**tr["schedule"])
    if "attack" in tr:
        kw["attack"] = _attack(tr["attack"])
    if "loss" in tr:
        kw["loss"] = LossConfig(**tr["loss"])
    kw["augment"] = _augment(tr.get("augment"), image)
    return TrainConfig(seed=seed, **kw)


def _finetune_config(ft: dict, base: TrainConfig) -> tuple[FinetuneMode, TrainConfig]:
    mode = FinetuneMode(ft.get("mode", "ALF"))
    kw = {k: ft[k] for k in ("epochs", "lr", "momentum", "weight_decay", "batch_size") if k in ft}
    kw.setdefault("epochs", 5)
    kw.setdefault("lr", 0.1)
    kw["schedule"] = Schedule(**ft["schedule"]) if "schedule" in ft else Schedule()
    kw["attack"] = _attack(ft.get("attack"), base.attack)
    return mode, TrainConfig(strategy="pgd_at" if mode.adversarial else "natural", seed=base.seed + 1,
                             loss=base.loss, **kw)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _space_features(model, ds_x, space):
    if space == "input":
        return np.asarray(ds_x, dtype=np.float64).reshape(len(ds_x), -1)
    return model.activations(ds_x, [space])[space].astype(np.float64)


def _adv_examples(model, ds: Dataset, cfg: AttackConfig, rng, batch_size: int = 250) -> np.ndarray:
    out = []
    for s in range(0, len(ds.x), batch_size):
        yb = ds.y[s:s + batch_size]
        out.append(pgd(ce_loss_fn(model, yb), ds.x[s:s + batch_size], cfg, rng, record_final=False).x_adv)
    return np.concatenate(out)


def _attack_cfg(a: dict, image: bool) -> AttackConfig:
    cfg = _attack(a)
    if not image:
        cfg = AttackConfig(cfg.epsilon, cfg.step_size, cfg.iterations, cfg.random_start, clamp=None)
    return cfg


def evaluate(model, train_ds: Dataset, test_ds: Dataset, ev: dict, seed: int) -> dict:
    """All evaluation tables for one variant as lists of row dicts."""
    out = {"accuracy": {}, "alignment": [], "accordance": [], "layer_curve": [], "lipschitz": []}
    attacks = ev.get("attacks", [])
    n_att = ev.get("attack_samples")
    att_test = test_ds if n_att is None else test_ds.subset(np.arange(min(n_att, len(test_ds.y))))
    adv = {}
    if model is not None:
        out["accuracy"]["clean_accuracy"] = float(np.mean(model.predict(test_ds.x) == test_ds.y))
        for i, a in enumerate(attacks):
            cfg = _attack_cfg(a, test_ds.image)
            rng = np.random.default_rng([seed, 100 + i])
            x_adv = _adv_examples(model, att_test, cfg, rng)
            adv[a["name"]] = x_adv
            out["accuracy"][f"{a['name']}_accuracy"] = float(np.mean(model.predict(x_adv) == att_test.y))
        if ev.get("adaptive") and attacks:
            cfg = _attack_cfg(attacks[0], test_ds.image)
            rate, _ = adaptive_afa_attack(model, att_test.x, att_test.y, cfg, np.random.default_rng([seed, 200]))
            out["accuracy"]["adaptive_afa_accuracy"] = 1.0 - rate

    metrics = ev.get("metrics", ["linf"])
    modes = ev.get("modes", ["train-test"])
    for space in ev.get("spaces", ["input"]):
        tr_f = _space_features(model, train_ds.x, space)
        queries = {"train-train": None, "train-test": (_space_features(model, test_ds.x, space), test_ds.y)}
        if "train-adv" in modes and attacks:
            queries["train-adv"] = (_space_features(model, adv[attacks[0]["name"]], space), att_test.y)
        for metric in metrics:
            for mode in modes:
                q = queries[mode]
                qx, qy = (tr_f, train_ds.y) if q is None else q
                rx = tr_f
                if ev.get("normalize"):
                    if q is None:
                        rx = qx = align.minmax_normalize(rx)[0]
                    else:
                        qx, rx = align.minmax_normalize(qx, rx)
                if q is None:
                    d = align.pairwise_distances(rx, rx, metric)
                    sep = align.separation_factor(rx, train_ds.y, metric=metric, mode=mode, distances=d)
                    clu = align.clustering_factor(rx, train_ds.y, metric=metric, mode=mode, distances=d)
                    acc = align.knn_accuracy(rx, train_ds.y, rx, train_ds.y, 1, metric, exclude_self=True,
                                             num_classes=train_ds.num_classes, distances=d)
                else:
                    d = align.pairwise_distances(qx, rx, metric)
                    sep = align.separation_factor(qx, qy, rx, train_ds.y, metric=metric, mode=mode, distances=d)
                    clu = align.clustering_factor(qx, qy, rx, train_ds.y, metric=metric, mode=mode, distances=d)
                    acc = align.knn_accuracy(qx, qy, rx, train_ds.y, 1, metric,
                                             num_classes=train_ds.num_classes, distances=d)
                v = align.alignment_verdict(sep, clu)
                out["alignment"].append({
                    "space": space, "metric": sep.metric, "mode": mode,
                    "sep_min": sep.min, "sep_avg": sep.avg, "sep_max": sep.max,
                    "clu_min": clu.min, "clu_avg": clu.avg, "clu_max": clu.max,
                    "r": v.r, "R": v.R, "verdict": "aligned" if v.aligned else "misaligned",
                    "witness": "" if v.witness is None else v.witness, "knn1_accuracy": acc})

    if model is not None:
        metric = metrics[0]
        for k in ev.get("k", []):
            out["accordance"].append({"k": k, "query": "clean",
                                      "rate": align.accordance_rate(model, train_ds, test_ds, k, metric)})
            for name, x_adv in adv.items():
                out["accordance"].append({"k": k, "query": name,
                                          "rate": align.accordance_rate(model, train_ds, x_adv, k, metric)})
        if ev.get("layer_curve"):
            curves = [("clean", None)]
            if ev.get("layer_curve_attack"):
                a = next(a for a in attacks if a["name"] == ev["layer_curve_attack"])
                curves.append((a["name"], _attack_cfg(a, test_ds.image)))
            for qname, cfg in curves:
                tq = test_ds if cfg is None else att_test
                curve = align.layer_accuracy_curve(model, train_ds, tq, metric, cfg,
                                                   np.random.default_rng([seed, 300]))
                out["layer_curve"] += [{"query": qname, "layer": layer, "accuracy": acc} for layer, acc in curve]
        lip = ev.get("lipschitz")
        if lip is not None:
            n = lip.get("samples", 100)
            cfg = AttackConfig(lip.get("epsilon", 8 / 255), lip.get("step_size", 2 / 255),
                               lip.get("iterations", 20), clamp=(0.0, 1.0) if test_ds.image else None)
            est = align.lipschitz_estimate(model, test_ds.x[:n], test_ds.y[:n], cfg,
                                           np.random.default_rng([seed, 400]), runs=lip.get("runs", 10))
            out["lipschitz"].append({"K": est.K, "worst_accuracy": est.worst_accuracy, "skipped": est.skipped,
                                     "ratios": ";".join(repr(r) for r in est.ratios)})
    return out


# ---------------------------------------------------------------------------
# bundle output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, rows: list[dict], header_hash: str, columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    buf.write(f"# config_hash={header_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path) -> tuple[str | None, list[dict]]:
    lines = Path(path).read_text().splitlines()
    digest = None
    if lines and lines[0].startswith("# config_hash="):
        digest = lines[0].split("=", 1)[1]
        lines = lines[1:]
    return digest, list(csv.DictReader(lines))


class _RunDir:
    """Lock file plus partial-run marker around one run in one directory."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.out / LOCK_FILE, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.out} is locked by another run ({LOCK_FILE} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        (self.out / PARTIAL_MARKER).write_text("run in progress\n")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.out / PARTIAL_MARKER).unlink(missing_ok=True)
        else:
            (self.out / PARTIAL_MARKER).write_text(f"run failed: {exc_type.__name__}: {exc}\n")
        (self.out / LOCK_FILE).unlink(missing_ok=True)
        return False


def _variants(cfg: dict) -> list[tuple[str, dict]]:
    if cfg.get("variants"):
        return [(v["name"], _variant_config(cfg, v)) for v in cfg["variants"]]
    return [(cfg.get("name", "main"), {k: v for k, v in cfg.items() if k != "variants"})]


def _run_variant(name: str, vcfg: dict, base_dir: Path, out: Path, digest: str, log) -> dict:
    seed = vcfg["seed"]
    train_ds, test_ds, cert = build_data(vcfg["dataset"], seed, base_dir)
    info = {"variant": name, "train_size": len(train_ds.y), "test_size": len(test_ds.y)}
    if cert is not None:
        cert_d = cert.as_dict()
        (out / f"certificate_{_safe(name)}.json").write_text(
            json.dumps({"config_hash": digest, **cert_d}, sort_keys=True, indent=1, default=_jsonable) + "\n")
    model, strategy, ft_kind = None, "", ""
    timings = {}
    if "model" in vcfg:
        mspec = build_model_spec(vcfg["model"], train_ds)
        model = Model(mspec, seed=vcfg["model"].get("seed", seed))
        if "train" in vcfg:
            tcfg = _train_config(vcfg["train"], seed, train_ds.image)
            strategy = tcfg.strategy
            t0 = time.perf_counter()
            model, hist = train(model, train_ds, tcfg, log=log)
            timings["train"] = time.perf_counter() - t0
            rows = [_history_row(r) for r in hist.records]
            write_csv(out / f"history_{_safe(name)}.csv", rows, digest)
            ft = vcfg["train"].get("finetune")
            if ft is not None:
                mode, fcfg = _finetune_config(ft, tcfg)
                ft_kind = mode.kind
                t0 = time.perf_counter()
                model, fhist = finetune(model, train_ds, mode, fcfg, log=log)
                timings["finetune"] = time.perf_counter() - t0
                write_csv(out / f"history_{_safe(name)}_finetune.csv", [_history_row(r) for r in fhist.records], digest)
        save_checkpoint(model, out / f"model_{_safe(name)}.afa")
    t0 = time.perf_counter()
    res = evaluate(model, train_ds, test_ds, vcfg.get("evaluation", {}), seed)
    timings["evaluate"] = time.perf_counter() - t0
    res["accuracy"] = {"variant": name, "strategy": strategy, "finetune": ft_kind, **res["accuracy"]}
    for key in ("alignment", "accordance", "layer_curve", "lipschitz"):
        res[key] = [{"variant": name, **r} for r in res[key]]
    info["timings"] = timings
    res["info"] = info
    return res


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _history_row(r) -> dict:
    row = {"epoch": r.epoch, "lr": r.lr, "loss": r.loss, "maximized": r.maximized,
           "clean_accuracy": r.clean_accuracy, "max_perturbation": r.max_perturbation}
    row.update({f"loss_{k}": v for k, v in sorted(r.components.items())})
    return row


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    return str(o)


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        afa_version = version("artifact")
    except PackageNotFoundError:
        afa_version = "unknown"
    return {"afa": afa_version, "numpy": np.__version__, "python": platform.python_version()}


def run(cfg: dict, base_dir: Path | str = ".", out: Path | str | None = None, log=None) -> Path:
    """Validate, train, evaluate and write the report bundle; returns the output directory."""
    base_dir = Path(base_dir)
    errors = validate(cfg, base_dir)
    if errors:
        raise ConfigError(errors)
    digest = config_hash(cfg)
    out = Path(out if out is not None else cfg.get("output_dir", f"runs/{cfg.get('name', digest)}"))
    t_start = time.perf_counter()
    with _RunDir(out):
        results = [_run_variant(name, vcfg, base_dir, out, digest, log) for name, vcfg in _variants(cfg)]
        acc_rows = [r["accuracy"] for r in results]
        cols = []
        for row in acc_rows:
            cols += [c for c in row if c not in cols]
        write_csv(out / "accuracy.csv", acc_rows, digest, cols)
        for key in ("alignment", "accordance", "layer_curve", "lipschitz"):
            rows = [row for r in results for row in r[key]]
            if rows:
                write_csv(out / f"{key}.csv", rows, digest)
        manifest = {
            "config_hash": digest,
            "config": cfg,
            "versions": _versions(),
            "variants": [r["info"] for r in results],
            "wall_time": time.perf_counter() - t_start,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1, default=_jsonable) + "\n")
    return out


def compare(cfg: dict, strategies: list[str], base_dir: Path | str = ".", out=None, log=None) -> Path:
    """One variant per strategy on shared data, model and evaluation settings.

    The shared ``train.finetune`` section only applies to strategies that leave
    the classifier untrained (contrastive pre-training).
    """
    if "train" not in cfg:
        raise ConfigError(["compare: a [train] section is required"])
    # each variant restates the whole train table, so the shared one is dropped
    base = {k: v for k, v in cfg.items() if k not in ("variants", "train")}
    variants = []
    for s in strategies:
        tr = copy.deepcopy(cfg["train"])
        tr["strategy"] = s
        if s in STRATEGIES and "h" in TrainConfig(strategy=s).groups:
            tr.pop("finetune", None)
        variants.append({"name": s, "train": tr})
    base["variants"] = variants
    return run(base, base_dir, out, log)


def export_embeddings(checkpoint, dataset: Dataset, layer="penultimate", path=None, header_hash: str = "") -> str:
    """CSV rows ``sample_id,label,f0..f{d-1}`` for the chosen layer."""
    model = load_checkpoint(checkpoint) if not isinstance(checkpoint, Model) else checkpoint
    feats = model.activations(dataset.x, [layer])[layer]
    buf = io.StringIO()
    buf.write(f"# config_hash={header_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "label", *(f"f{i}" for i in range(feats.shape[1]))])
    for i, (lab, row) in enumerate(zip(dataset.y, feats)):
        w.writerow([i, int(lab), *(repr(float(v)) for v in row)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(sample_ids, labels, features)`` from an exported embedding CSV."""
    _, rows = read_csv(Path(path))
    ids = np.array([int(r["sample_id"]) for r in rows], dtype=np.int64)
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    keys = [k for k in (rows[0] if rows else {}) if k.startswith("f")]
    feats = np.array([[float(r[k]) for k in keys] for r in rows], dtype=np.float64).reshape(len(rows), len(keys))
    return ids, labels, feats


def report(run_dir, fmt: str = "json") -> str:
    run_dir = Path(run_dir)
    if (run_dir / PARTIAL_MARKER).exists():
        raise RuntimeError(f"{run_dir} holds a partial run: {(run_dir / PARTIAL_MARKER).read_text().strip()}")
    tables = {}
    digest = None
    for name in ("accuracy", "alignment", "accordance", "layer_curve", "lipschitz"):
        p = run_dir / f"{name}.csv"
        if p.exists():
            digest, rows = read_csv(p)
            tables[name] = rows
    if fmt == "json":
        return json.dumps({"config_hash": digest, "tables": tables}, indent=1, sort_keys=True) + "\n"
    if fmt == "csv":
        parts = []
        for name in tables:
            parts.append(f"## {name}\n" + (run_dir / f"{name}.csv").read_text())
        return "\n".join(parts)
    raise ValueError(f"unknown report format {fmt!r}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afa", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--quiet", action="store_true")
    c = sub.add_parser("compare", help="compare strategies under one shared config")
    c.add_argument("config")
    c.add_argument("--strategies", required=True)
    c.add_argument("--out")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    c.add_argument("--quiet", action="store_true")
    e = sub.add_parser("export-embeddings", help="write per-sample features as CSV")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--layer", default="penultimate")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v = sub.add_parser("validate-config", help="check a config and print its hash")
    v.add_argument("config")
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    rp = sub.add_parser("report", help="print a finished run's tables")
    rp.add_argument("run_dir")
    rp.add_argument("--format", choices=("csv", "json"), default="json")
    return p


def _logger(quiet: bool):
    if quiet:
        return None

    def log(rec):
        comps = " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.components.items()))
        print(f"epoch {rec.epoch:3d} lr={rec.lr:.4g} loss={rec.loss:.4f} {comps} ({rec.wall_time:.1f}s)",
              file=sys.stderr, flush=True)
    return log


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "report":
            sys.stdout.write(report(args.run_dir, args.format))
            return 0
        cfg, base = load_config(args.config, args.set)
        if args.verb == "validate-config":
            errors = validate(cfg, base)
            if errors:
                raise ConfigError(errors)
            print(f"ok {config_hash(cfg)}")
        elif args.verb == "run":
            out = run(cfg, base, args.out, _logger(args.quiet))
            print(out)
        elif args.verb == "compare":
            out = compare(cfg, [s.strip() for s in args.strategies.split(",") if s.strip()], base, args.out,
                          _logger(args.quiet))
            sys.stdout.write((out / "accuracy.csv").read_text())
        elif args.verb == "export-embeddings":
            errors = validate(cfg, base)
            if errors:
                raise ConfigError(errors)
            train_ds, test_ds, _ = build_data(cfg["dataset"], cfg["seed"], base)
            ds = train_ds if args.split == "train" else test_ds
            layer = args.layer if args.layer in ("penultimate", "logits") else int(args.layer)
            export_embeddings(args.checkpoint, ds, layer, args.out, config_hash(cfg))
            print(args.out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
