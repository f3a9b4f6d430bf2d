"""Command-line pipeline driver.

Subcommands cover the full workflow: generate data, train detectors,
post-train Bayesian heads, run attacks, evaluate transfer, render saliency
maps, and summarize a detector. Every run writes artifacts plus a
``run_config.json`` holding the fully resolved settings; re-running a
subcommand with only ``--config run_config.json`` reproduces the reports
bit for bit. Settings resolve as built-in defaults, then the config file,
then explicit flags.

Exit codes: 0 success, 1 invalid parameters or data, 2 usage, 3 checkpoint
problems, 4 sampler divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .attacks import (
    ATTACK_NAMES,
    AttackConfig,
    ensemble_attack,
    fpba,
    ifgsm,
    mifgsm,
    pgd,
    spectrum_attack,
)
from .bayes import PostTrainConfig, SghmcConfig, load_ensemble, post_train, save_ensemble
from .data import FAMILY_PRESETS, LabeledDataset, synth_dataset
from .detectors import (
    AugmentConfig,
    TrainConfig,
    evaluate_accuracy,
    forward_logits,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
    state_checksum,
    train_detector,
)
from .errors import (
    CheckpointError,
    DivergedChainError,
    FpbaError,
    InvalidInputError,
    InvalidParameterError,
)
from .evaluation import gradient_diagnostic, image_quality, per_family_accuracy, transfer_eval
from .frequency import SpectrumTransformParams, spectrum_saliency

_log = logging.getLogger("fpba.cli")

OUTPUT_ROOT_ENV = "FPBA_OUTPUT_ROOT"

# Per-subcommand settings with built-in defaults. Path-valued keys default to
# None and are excluded from the config echo embedded in reports.
_ATTACK_SETTINGS = {
    "method": "fpba",
    "eps": 8.0,  # /255 units
    "alpha": 2.0,  # /255 units
    "iters": 10,
    "samples": 10,
    "momentum": 1.0,
    "rho": 0.5,
    "sigma_noise": -1.0,  # /255 units; negative means follow eps
    "heads": 0,  # 0 means every sampled head
    "random_start": True,
    "nested": False,
    "seed": 0,
    "split": "test",
    "max_images": 0,  # 0 means no cap
}

SETTINGS = {
    "gen-data": {
        "out": None,
        "n_per_class": 2000,
        "image_size": 64,
        "seed": 0,
        "families": "grid,lowpass,ringing",
        "split_fracs": "0.7,0.15,0.15",
    },
    "train": {
        "data": None,
        "out": None,
        "arch": "spatial-cnn",
        "epochs": 10,
        "batch_size": 64,
        "lr": 1e-4,
        "weight_decay": 0.0,
        "seed": 0,
        "p_blur": 0.1,
        "p_jpeg": 0.1,
        "blur_sigma_max": 3.0,
        "jpeg_quality_min": 30,
        "jpeg_quality_max": 100,
    },
    "bayes-train": {
        "data": None,
        "checkpoint": None,
        "out": None,
        "heads": 3,
        "iterations": 300,
        "steps_per_head": 1,
        "batch_size": 64,
        "hidden": 0,  # 0 means derive from the feature width
        "prior_precision": 1.0,
        "schedule": "interleaved",
        "seed": 0,
        "base_step": 1e-3,
        "friction": 0.05,
        "tau": 256.0,
        "adapt_tau": True,
        "burn_in": 100,
    },
    "attack": {
        "data": None,
        "out": None,
        "checkpoints": None,  # list of detector checkpoint paths
        "ensemble": None,  # sampled-ensemble path, for method fpba
        **_ATTACK_SETTINGS,
    },
    "eval": {
        "data": None,
        "out": None,
        "surrogates": None,  # {name: checkpoint path}
        "victims": None,  # {name: checkpoint path}
        "ensembles": None,  # {surrogate name: ensemble path}, for fpba
        "methods": "pgd,fpba",
        "min_samples": 50,
        "grad_diagnostic": False,
        "grad_coords": 150,
        "grad_threshold": 1e-6,
        **{k: v for k, v in _ATTACK_SETTINGS.items() if k != "method"},
    },
    "saliency": {
        "data": None,
        "checkpoint": None,
        "out": None,
        "split": "test",
        "label": "both",
        "max_images": 64,
    },
    "report": {
        "data": None,
        "checkpoint": None,
        "out": None,
        "split": "test",
    },
}

PATH_KEYS = ("data", "out", "checkpoint", "checkpoints", "ensemble", "ensembles", "surrogates", "victims")


# ---------------------------------------------------------------------------
# Settings plumbing
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and explicit flags, in that order."""
    cfg = dict(SETTINGS[command])
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                stored = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidParameterError(f"cannot read config {config_path}: {exc}") from exc
        if stored.get("command") != command:
            raise InvalidParameterError(
                f"config {config_path} was written by {stored.get('command')!r}, not {command!r}"
            )
        for key, value in stored.get("settings", {}).items():
            if key in cfg:
                cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(parser: argparse.ArgumentParser, cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) in (None, [], {}):
            parser.error(f"--{key.replace('_', '-')} is required (flag or config file)")


def _out_dir(command: str, cfg: dict) -> Path:
    out = cfg.get("out")
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            out = str(Path(root) / command)
            cfg["out"] = out
    if out is None:
        raise InvalidParameterError(
            f"no output directory: pass --out or set {OUTPUT_ROOT_ENV}"
        )
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _persist_run(command: str, cfg: dict, out: Path) -> None:
    _write_json(out / "run_config.json", {"command": command, "settings": cfg})


def _echo(cfg: dict) -> dict:
    """Settings without path-valued keys, embedded in report documents."""
    return {k: v for k, v in cfg.items() if k not in PATH_KEYS}


def _kv(text: str) -> tuple:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, path


def _fracs(text) -> tuple:
    parts = list(text) if isinstance(text, (list, tuple)) else [p for p in str(text).split(",") if p != ""]
    if len(parts) != 3:
        raise InvalidParameterError(f"expected three comma-separated fractions, got {text!r}")
    return tuple(float(p) for p in parts)


def _names(text) -> list:
    if isinstance(text, (list, tuple)):
        return [str(p) for p in text]
    return [p.strip() for p in str(text).split(",") if p.strip()]


# ---------------------------------------------------------------------------
# Attack plumbing shared by the attack and eval subcommands
# ---------------------------------------------------------------------------


def _attack_config(cfg: dict) -> AttackConfig:
    eps = cfg["eps"] / 255.0
    alpha = cfg["alpha"] / 255.0
    if alpha > eps:
        _log.info("alpha %g/255 exceeds eps %g/255; lowering alpha to eps", cfg["alpha"], cfg["eps"])
        alpha = eps
    sigma = cfg["sigma_noise"]
    sigma = eps if sigma < 0 else sigma / 255.0
    spectrum = SpectrumTransformParams(rho=cfg["rho"], sigma_noise=sigma, rng_seed=cfg["seed"])
    return AttackConfig(
        epsilon=eps,
        alpha=alpha,
        iterations=cfg["iters"],
        spectrum_samples=cfg["samples"],
        momentum=cfg["momentum"],
        random_start=cfg["random_start"],
        rng_seed=cfg["seed"],
        spectrum=spectrum,
        head_count=cfg["heads"] or None,
        nested_spectrum=cfg["nested"],
    )


def _joint_labels(detectors: list, x: torch.Tensor) -> torch.Tensor:
    probs = [torch.sigmoid(forward_logits(d, x)) for d in detectors]
    acc = torch.zeros_like(probs[0])
    for p in probs[1:]:
        acc = acc + (p - probs[0])
    mean = probs[0] + acc / len(probs)
    return (mean >= 0.5).long()


def _split_tensors(cfg: dict) -> tuple:
    dataset = LabeledDataset.load(cfg["data"])
    x, y = dataset.split(cfg["split"])
    if x.shape[0] == 0:
        raise InvalidInputError(f"split {cfg['split']!r} of {cfg['data']} is empty")
    return dataset, x, y


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("gen-data", args)
    out = _out_dir("gen-data", cfg)
    families = _names(cfg["families"])
    for name in families:
        if name not in FAMILY_PRESETS:
            raise InvalidParameterError(f"unknown family {name!r}; presets: {sorted(FAMILY_PRESETS)}")
    dataset = synth_dataset(
        n_per_class=cfg["n_per_class"],
        families=families,
        image_size=cfg["image_size"],
        seed=cfg["seed"],
        split_fracs=_fracs(cfg["split_fracs"]),
    )
    dataset.validate()
    dataset.save(out)
    _persist_run("gen-data", cfg, out)
    _log.info("wrote %d images to %s: %s", len(dataset), out, dataset.counts())


def cmd_train(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("train", args)
    _require(parser, cfg, "data")
    out = _out_dir("train", cfg)
    dataset = LabeledDataset.load(cfg["data"])
    augment = AugmentConfig(
        p_blur=cfg["p_blur"],
        blur_sigma=(0.0, cfg["blur_sigma_max"]),
        p_jpeg=cfg["p_jpeg"],
        jpeg_quality=(cfg["jpeg_quality_min"], cfg["jpeg_quality_max"]),
    )
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        weight_decay=cfg["weight_decay"],
    )
    detector = train_detector(cfg["arch"], dataset, augment_cfg=augment, cfg=train_cfg)
    save_checkpoint(detector, out / "detector.pt")
    metrics = {"record": detector.train_record, "checksum": state_checksum(detector)}
    x_test, y_test = dataset.split("test")
    if x_test.shape[0]:
        metrics["test_acc"] = evaluate_accuracy(detector, x_test, y_test)
    metrics["config"] = _echo(cfg)
    _write_json(out / "metrics.json", metrics)
    _persist_run("train", cfg, out)
    _log.info("trained %s: %s", cfg["arch"], {k: v for k, v in metrics.items() if k != "config"})


def cmd_bayes_train(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("bayes-train", args)
    _require(parser, cfg, "data", "checkpoint")
    out = _out_dir("bayes-train", cfg)
    dataset = LabeledDataset.load(cfg["data"])
    base = load_checkpoint(cfg["checkpoint"])
    post_cfg = PostTrainConfig(
        heads=cfg["heads"],
        iterations=cfg["iterations"],
        steps_per_head=cfg["steps_per_head"],
        batch_size=cfg["batch_size"],
        hidden=cfg["hidden"] or None,
        prior_precision=cfg["prior_precision"],
        schedule=cfg["schedule"],
        seed=cfg["seed"],
        sghmc=SghmcConfig(
            base_step=cfg["base_step"],
            friction=cfg["friction"],
            tau=cfg["tau"],
            adapt_tau=cfg["adapt_tau"],
            burn_in=cfg["burn_in"],
        ),
    )
    ensemble = post_train(base, dataset, post_cfg)
    save_ensemble(ensemble, out / "ensemble.pt")
    _write_json(out / "metrics.json", {"record": ensemble.record, "config": _echo(cfg)})
    _persist_run("bayes-train", cfg, out)
    _log.info("sampled %d heads: %s", ensemble.num_heads, ensemble.record)


def _load_attack_models(cfg: dict) -> dict:
    method = cfg["method"]
    if method not in ATTACK_NAMES:
        raise InvalidParameterError(f"unknown method {method!r}; choose from {ATTACK_NAMES}")
    if method == "fpba":
        if not cfg.get("ensemble"):
            raise InvalidParameterError("method fpba needs --ensemble pointing at a sampled ensemble")
        return {"ensemble": load_ensemble(cfg["ensemble"])}
    paths = cfg.get("checkpoints") or []
    if method == "ensemble":
        if not paths:
            raise InvalidParameterError("method ensemble needs at least one --checkpoint")
        return {"detectors": [load_checkpoint(p) for p in paths]}
    if len(paths) != 1:
        raise InvalidParameterError(f"method {method!r} needs exactly one --checkpoint, got {len(paths)}")
    return {"detector": load_checkpoint(paths[0])}


def cmd_attack(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("attack", args)
    _require(parser, cfg, "data")
    out = _out_dir("attack", cfg)
    _, x, y = _split_tensors(cfg)
    models = _load_attack_models(cfg)
    attack_cfg = _attack_config(cfg)
    method = cfg["method"]

    if "ensemble" in models:
        clean = models["ensemble"].bma_labels(x, head_count=attack_cfg.head_count)
        checksums = {"ensemble": state_checksum(models["ensemble"])}
    elif "detectors" in models:
        clean = _joint_labels(models["detectors"], x)
        checksums = {f"model_{i}": state_checksum(d) for i, d in enumerate(models["detectors"])}
    else:
        clean = predict_labels(models["detector"], x)
        checksums = {"model": state_checksum(models["detector"])}

    keep = torch.nonzero(clean == y, as_tuple=False).flatten()
    if cfg["max_images"]:
        keep = keep[: cfg["max_images"]]
    x_sub, y_sub = x[keep], y[keep]

    report = {
        "method": method,
        "n_split": int(x.shape[0]),
        "n_clean_correct": int((clean == y).sum().item()),
        "n_attacked": int(x_sub.shape[0]),
        "checksums": checksums,
        "config": _echo(cfg),
    }
    if x_sub.shape[0] == 0:
        _log.warning("no correctly classified images to attack; writing an empty report")
        report.update({"asr_percent": 0.0, "linf_max": 0.0, "quality": None})
        np.savez(out / "adversarial.npz", adversarial=np.zeros((0,) + tuple(x.shape[1:]), np.float32),
                 labels=np.zeros(0, np.int64), indices=np.zeros(0, np.int64))
    else:
        if method == "fpba":
            result = fpba(models["ensemble"], x_sub, y_sub, attack_cfg)
        elif method == "ensemble":
            result = ensemble_attack(models["detectors"], x_sub, y_sub, attack_cfg)
        else:
            fn = {"ifgsm": ifgsm, "mifgsm": mifgsm, "pgd": pgd, "spectrum": spectrum_attack}[method]
            result = fn(models["detector"], x_sub, y_sub, attack_cfg)
        quality = image_quality(x_sub, result.adversarial)
        report.update(
            {
                "asr_percent": result.asr,
                "linf_max": float(result.linf.max().item()),
                "quality": quality.as_dict(),
            }
        )
        np.savez(
            out / "adversarial.npz",
            adversarial=result.adversarial.numpy(),
            labels=y_sub.numpy(),
            indices=keep.numpy(),
        )
    _write_json(out / "report.json", report)
    _persist_run("attack", cfg, out)
    _log.info("%s on %d images: ASR %.1f%%", method, report["n_attacked"], report.get("asr_percent", 0.0))


_EVAL_METHODS = {"ifgsm": ifgsm, "mifgsm": mifgsm, "pgd": pgd, "spectrum": spectrum_attack}


def cmd_eval(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("eval", args)
    _require(parser, cfg, "data", "surrogates", "victims")
    out = _out_dir("eval", cfg)
    _, x, y = _split_tensors(cfg)
    if cfg["max_images"]:
        x, y = x[: cfg["max_images"]], y[: cfg["max_images"]]

    surrogates = {name: load_checkpoint(path) for name, path in dict(cfg["surrogates"]).items()}
    victims = {name: load_checkpoint(path) for name, path in dict(cfg["victims"]).items()}
    ensembles = {
        name: load_ensemble(path, base=surrogates.get(name))
        for name, path in dict(cfg["ensembles"] or {}).items()
    }
    methods = _names(cfg["methods"])
    attack_cfg = _attack_config(cfg)
    crafted: dict = {}

    def make_fn(method: str):
        if method == "fpba":
            def run(name, model, xs, ys):
                if name not in ensembles:
                    raise InvalidParameterError(f"no --ensemble mapping for surrogate {name!r}")
                result = fpba(ensembles[name], xs, ys, attack_cfg)
                crafted[(name, method)] = (result, xs, ys)
                return result
        elif method in _EVAL_METHODS:
            def run(name, model, xs, ys):
                result = _EVAL_METHODS[method](model, xs, ys, attack_cfg)
                crafted[(name, method)] = (result, xs, ys)
                return result
        else:
            raise InvalidParameterError(
                f"unknown eval method {method!r}; choose from {sorted(_EVAL_METHODS) + ['fpba']}"
            )
        return run

    attack_fns = {m: make_fn(m) for m in methods}
    matrix = transfer_eval(surrogates, victims, attack_fns, x, y, min_samples=cfg["min_samples"])
    matrix.save_csv(out / "matrix.csv")

    report = {
        "matrix": matrix.as_dict(),
        "checksums": {
            **{f"surrogate/{n}": state_checksum(m) for n, m in surrogates.items()},
            **{f"victim/{n}": state_checksum(m) for n, m in victims.items()},
            **{f"ensemble/{n}": state_checksum(e) for n, e in ensembles.items()},
        },
        "quality": {},
        "config": _echo(cfg),
    }
    for (s_name, method), (result, xs, ys) in sorted(crafted.items()):
        key = f"{s_name}/{method}"
        report["quality"][key] = image_quality(xs, result.adversarial).as_dict()
    if cfg["grad_diagnostic"]:
        report["gradient_diagnostics"] = {}
        for (s_name, method), (result, xs, ys) in sorted(crafted.items()):
            diag = gradient_diagnostic(
                surrogates[s_name],
                result.adversarial,
                ys,
                coords_per_image=cfg["grad_coords"],
                threshold=cfg["grad_threshold"],
                seed=cfg["seed"],
            )
            diag.save_npz(out / f"grads_{s_name}_{method}.npz")
            report["gradient_diagnostics"][f"{s_name}/{method}"] = diag.summary()
    _write_json(out / "report.json", report)
    _persist_run("eval", cfg, out)
    _log.info("evaluated %d cells", len(matrix.cells))


def cmd_saliency(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("saliency", args)
    _require(parser, cfg, "data", "checkpoint")
    out = _out_dir("saliency", cfg)
    _, x, y = _split_tensors(cfg)
    if cfg["label"] not in ("both", "real", "fake"):
        raise InvalidParameterError(f"label must be both, real, or fake, got {cfg['label']!r}")
    if cfg["label"] != "both":
        want = 0 if cfg["label"] == "real" else 1
        mask = y == want
        x, y = x[mask], y[mask]
        if x.shape[0] == 0:
            raise InvalidInputError(f"no {cfg['label']} images in split {cfg['split']!r}")
    if cfg["max_images"]:
        x, y = x[: cfg["max_images"]], y[: cfg["max_images"]]
    detector = load_checkpoint(cfg["checkpoint"])
    saliency = spectrum_saliency(detector, x, y)
    saliency.save_npz(out / "saliency.npz")
    saliency.save_png(out / "saliency.png")
    _write_json(
        out / "report.json",
        {
            "n_images": int(x.shape[0]),
            "label": cfg["label"],
            "checksum": state_checksum(detector),
            "config": _echo(cfg),
        },
    )
    _persist_run("saliency", cfg, out)
    _log.info("saliency over %d images written to %s", x.shape[0], out)


def cmd_report(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    cfg = _resolve("report", args)
    _require(parser, cfg, "data", "checkpoint")
    out = _out_dir("report", cfg)
    dataset = LabeledDataset.load(cfg["data"])
    detector = load_checkpoint(cfg["checkpoint"])
    accuracies = {}
    for split in ("train", "val", "test"):
        xs, ys = dataset.split(split)
        if xs.shape[0]:
            accuracies[split] = evaluate_accuracy(detector, xs, ys)
    idx = dataset.indices(cfg["split"])
    x, y = dataset.split(cfg["split"])
    if x.shape[0] == 0:
        raise InvalidInputError(f"split {cfg['split']!r} is empty")
    families = per_family_accuracy(detector, x, y, dataset.family_tags[idx])
    _write_json(
        out / "report.json",
        {
            "accuracy": accuracies,
            "per_family": families,
            "train_record": detector.train_record,
            "checksum": state_checksum(detector),
            "dataset_counts": dataset.counts(),
            "config": _echo(cfg),
        },
    )
    _persist_run("report", cfg, out)
    _log.info("accuracy: %s; per-family: %s", accuracies, families)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _float(parser, name):
    parser.add_argument(name, type=float, default=None)


def _int(parser, name):
    parser.add_argument(name, type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpba",
        description="Frequency-domain post-train Bayesian attack toolkit for fake-image detectors.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def new(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="run_config.json from a previous run")
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(func=fn, parser_ref=p)
        return p

    p = new("gen-data", cmd_gen_data, "generate a synthetic labeled corpus")
    _int(p, "--n-per-class")
    _int(p, "--image-size")
    _int(p, "--seed")
    p.add_argument("--families", default=None, help="comma-separated artifact family names")
    p.add_argument("--split-fracs", default=None, help="train,val,test fractions")

    p = new("train", cmd_train, "train a detector with blur/JPEG augmentation")
    p.add_argument("--data", default=None)
    p.add_argument("--arch", default=None)
    _int(p, "--epochs")
    _int(p, "--batch-size")
    _float(p, "--lr")
    _float(p, "--weight-decay")
    _int(p, "--seed")
    _float(p, "--p-blur")
    _float(p, "--p-jpeg")
    _float(p, "--blur-sigma-max")
    _int(p, "--jpeg-quality-min")
    _int(p, "--jpeg-quality-max")

    p = new("bayes-train", cmd_bayes_train, "sample appended Bayesian heads on a frozen detector")
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    _int(p, "--heads")
    _int(p, "--iterations")
    _int(p, "--steps-per-head")
    _int(p, "--batch-size")
    _int(p, "--hidden")
    _float(p, "--prior-precision")
    p.add_argument("--schedule", default=None, choices=["interleaved", "sequential"])
    _int(p, "--seed")
    _float(p, "--base-step")
    _float(p, "--friction")
    _float(p, "--tau")
    p.add_argument("--adapt-tau", default=None, action=argparse.BooleanOptionalAction)
    _int(p, "--burn-in")

    def add_attack_flags(p: argparse.ArgumentParser, with_method: bool) -> None:
        if with_method:
            p.add_argument("--method", default=None, choices=list(ATTACK_NAMES))
        _float(p, "--eps")
        _float(p, "--alpha")
        _int(p, "--iters")
        _int(p, "--samples")
        _float(p, "--momentum")
        _float(p, "--rho")
        _float(p, "--sigma-noise")
        _int(p, "--heads")
        p.add_argument("--random-start", default=None, action=argparse.BooleanOptionalAction)
        p.add_argument("--nested", default=None, action=argparse.BooleanOptionalAction)
        _int(p, "--seed")
        p.add_argument("--split", default=None)
        _int(p, "--max-images")

    p = new("attack", cmd_attack, "run one attack and save adversarial images")
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", action="append", default=None, dest="checkpoints")
    p.add_argument("--ensemble", default=None, help="sampled ensemble checkpoint (method fpba)")
    add_attack_flags(p, with_method=True)

    p = new("eval", cmd_eval, "build a surrogate/victim transfer matrix")
    p.add_argument("--data", default=None)
    p.add_argument("--surrogate", action="append", type=_kv, default=None, dest="surrogates",
                   metavar="NAME=PATH")
    p.add_argument("--victim", action="append", type=_kv, default=None, dest="victims",
                   metavar="NAME=PATH")
    p.add_argument("--ensemble", action="append", type=_kv, default=None, dest="ensembles",
                   metavar="NAME=PATH")
    p.add_argument("--methods", default=None, help="comma-separated attack names")
    _int(p, "--min-samples")
    p.add_argument("--grad-diagnostic", default=None, action=argparse.BooleanOptionalAction)
    _int(p, "--grad-coords")
    _float(p, "--grad-threshold")
    add_attack_flags(p, with_method=False)

    p = new("saliency", cmd_saliency, "render a frequency saliency map for a detector")
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--label", default=None, choices=["both", "real", "fake"])
    _int(p, "--max-images")

    p = new("report", cmd_report, "summarize a detector's accuracy and per-family breakdown")
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default=None)

    return parser


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        args.func(args.parser_ref, args)
        return 0
    except CheckpointError as exc:
        _log.error("checkpoint error: %s", exc)
        return 3
    except DivergedChainError as exc:
        _log.error("sampler diverged: %s", exc)
        return 4
    except FpbaError as exc:
        _log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
