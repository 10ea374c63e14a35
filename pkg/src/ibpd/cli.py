"""``ibpd <command> [--config file.json] [--key value ...]``

Exit codes: 0 success, 1 usage error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import config as C
from .datasets import (
    COLOR_NAMES,
    ColorizeConfig,
    Dataset,
    DatasetFormatError,
    IdxFormatError,
    colorize_digits,
    dataset_bytes,
    load_dataset,
    load_mnist,
    split_by_subject,
    synth_ecg_generate,
    synthetic_glyphs,
)
from .model import build_model, one_hot
from .plotting import export_svg, image_grid, write_pnm
from .tensor import Tensor, no_grad
from .training import (
    CheckpointFormatError,
    TrainingAbort,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("ibpd")

COMMANDS = ("generate", "train", "evaluate", "probe", "recon", "features", "trigger", "ablate", "swap")
SPLITS = ("train", "validation", "test")

# short flags mapped onto dotted config keys
ALIASES = {
    "model": "model.kind",
    "epochs": "train.epochs",
    "out": "out_dir",
    "data": "data_dir",
    "mnist-dir": "digits.mnist_dir",
    "units": "analysis.units",
    "grid": "analysis.grid",
    "split": "analysis.split",
}


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def parse_overrides(tokens: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"expected --key value, got {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 1
        i += 1
        out[ALIASES.get(key, key).replace("-", "_")] = C.parse_value(value)
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ibpd",
        description="Train and analyse conditional VAEs with a binary-feature confounder code.",
        epilog="Any config key can be overridden as --section.key value; environment variables IBPD_SECTION__KEY apply below the command line.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON config file")
    return p


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RunError(f"cannot create output directory {out}: {e}") from e
    return out


def _data_dir(cfg) -> Path:
    return Path(cfg["data_dir"] or cfg["out_dir"])


def _checkpoint_path(cfg) -> Path:
    return Path(cfg["checkpoint"] or Path(cfg["out_dir"]) / "model.ckpt")


def _write(path: Path, payload) -> None:
    try:
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)
    except OSError as e:
        raise RunError(f"cannot write {path}: {e}") from e


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _load_split(cfg, name: str) -> Dataset:
    path = _data_dir(cfg) / f"{name}.bin"
    if not path.exists():
        raise RunError(f"missing dataset file {path}; run 'ibpd generate' first")
    return load_dataset(path)


def _load_model(cfg, data: Dataset):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise RunError(f"missing checkpoint {path}; run 'ibpd train' first")
    model = load_checkpoint(path)
    if model.cfg.input_dim != data.input_dim:
        raise RunError(f"checkpoint/config mismatch: checkpoint input_dim={model.cfg.input_dim}, data input_dim={data.input_dim}")
    if model.cfg.K != cfg["model"]["K"]:
        raise RunError(f"checkpoint/config mismatch: checkpoint K={model.cfg.K}, config K={cfg['model']['K']}")
    return model


def _is_image(cfg) -> bool:
    return cfg["preset"] == "colored-digits"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def build_dataset(cfg) -> Dataset:
    if cfg["preset"] == "synth-ecg":
        return synth_ecg_generate(C.ecg_config(cfg))
    digits = cfg["digits"]
    n = int(digits["n_images"])
    images = None
    if digits["mnist_dir"]:
        try:
            images, labels = load_mnist(digits["mnist_dir"], "train")
        except (FileNotFoundError, IdxFormatError) as e:
            log.warning("MNIST files unusable (%s); falling back to built-in synthetic glyphs", e)
    else:
        log.warning("no --mnist-dir given; using built-in synthetic glyphs")
    if images is None:
        images, labels = synthetic_glyphs(n, seed=cfg["seed"])
    else:
        pick = np.sort(np.random.default_rng(cfg["seed"]).permutation(images.shape[0])[:n])
        images, labels = images[pick], labels[pick]
    return colorize_digits(images, labels, ColorizeConfig(white_prob=digits["white_prob"], seed=cfg["seed"]))


def cmd_generate(cfg) -> dict:
    out = _out_dir(cfg)
    data = build_dataset(cfg)
    splits = split_by_subject(data, tuple(cfg["split"]["fractions"]), seed=cfg["seed"])
    files = {"dataset.bin": dataset_bytes(data)}
    for name in SPLITS:
        files[f"{name}.bin"] = dataset_bytes(getattr(splits, name))
    for name, payload in files.items():
        _write(out / name, payload)
    manifest = {
        "preset": cfg["preset"],
        "seed": cfg["seed"],
        "config_sha256": C.config_hash(cfg),
        "artifact_fraction": cfg["ecg"]["artifact_fraction"] if cfg["preset"] == "synth-ecg" else 1.0 - cfg["digits"]["white_prob"],
        "observed_artifact_fraction": float(np.mean(data.artifact_flag)),
        "n_examples": len(data),
        "input_dim": data.input_dim,
        "split_by_subject": splits.by_subject,
        "split_sizes": {name: len(getattr(splits, name)) for name in SPLITS},
        "files": {name: hashlib.sha256(payload).hexdigest() for name, payload in files.items()},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(cfg) -> dict:
    out = _out_dir(cfg)
    tr, va = _load_split(cfg, "train"), _load_split(cfg, "validation")
    model = build_model(C.model_config(cfg, tr.input_dim))
    try:
        model, report = train(model, tr.x, tr.task_label, va.x, va.task_label, C.train_config(cfg))
    except TrainingAbort as e:
        if e.report is not None:
            _write(out / "train_report.csv", e.report.to_csv())
        raise RunError(f"training aborted: {e}") from e
    log.info("training took %.1fs", sum(report.wall_clock))
    _write(out / "train_report.csv", report.to_csv())
    _write_json(out / "train_summary.json", report.summary())
    save_checkpoint(model, _checkpoint_path(cfg), meta={"config_sha256": C.config_hash(cfg)})
    return report.summary()


def cmd_evaluate(cfg) -> dict:
    out = _out_dir(cfg)
    data = _load_split(cfg, cfg["analysis"]["split"])
    model = _load_model(cfg, data)
    m = evaluate(model, data.x, data.task_label, seed=cfg["analysis"]["seed"])
    result = {"split": cfg["analysis"]["split"], "seed": cfg["analysis"]["seed"], "accuracy": m.accuracy, "neg_elbo": m.neg_elbo, "active_mean": m.active_mean}
    _write_json(out / "evaluate.json", result)
    return result


def cmd_probe(cfg) -> dict:
    out = _out_dir(cfg)
    data = _load_split(cfg, "train")
    model = _load_model(cfg, data)
    an = cfg["analysis"]
    reps = A.extract_representations(model, data.x, seed=an["seed"])
    pcfg = A.ProbeConfig(test_fraction=an["probe_test_fraction"], l2=an["probe_l2"], nonlinear=an["probe_nonlinear"], seed=an["seed"])
    targets = {"task": data.task_label}
    if np.unique(data.subject_id).size > 1:
        targets["subject"] = data.subject_id
    report = A.probe({"y_t": reps.y_t, "y_c": reps.y_c}, targets, pcfg)
    _write(out / "probe.csv", report.to_csv())
    return {f"{r}->{t}": v for (r, t), v in report.accuracy.items()}


def _region(cfg, data: Dataset) -> np.ndarray:
    if cfg["preset"] == "synth-ecg":
        return C.ecg_config(cfg).artifact_region()
    return np.arange(data.input_dim)


def cmd_recon(cfg) -> dict:
    out = _out_dir(cfg)
    an = cfg["analysis"]
    data = _load_split(cfg, an["split"])
    model = _load_model(cfg, data)
    recon = A.reconstruct(model, data.x, y_t=data.task_label, seed=an["seed"])
    rb = A.breakdown_from_reconstruction(data.x, recon, data.artifact_flag, _region(cfg, data))
    _write(out / "recon.csv", _csv([["whole", "artifact_all", "artifact_non_stimulus", "artifact_stimulus"], [_fmt(v) for v in rb.as_row()]]))
    k = min(10, len(data))
    if _is_image(cfg):
        write_pnm(image_grid(list(data.x[:k]) + list(recon[:k]), 2, k), out / "recon.ppm")
    else:
        export_svg([data.x[0], recon[0]], out / "recon.svg", labels=["input", "reconstruction"])
    return {"whole": rb.whole, "artifact_all": rb.artifact_all, "artifact_non_stimulus": rb.artifact_non_stimulus, "artifact_stimulus": rb.artifact_stimulus}


def _latents(cfg, data, model) -> np.ndarray:
    if model.kind != "cibp-vae":
        raise RunError(f"model kind {model.kind!r} has no binary features")
    return A.extract_representations(model, data.x, seed=cfg["analysis"]["seed"]).Z


def cmd_features(cfg) -> dict:
    out = _out_dir(cfg)
    data = _load_split(cfg, cfg["analysis"]["split"])
    model = _load_model(cfg, data)
    stats = A.active_feature_stats(_latents(cfg, data, model), data.artifact_flag)
    K = model.cfg.K
    rows = [["group", "n", "mean", "mode", *(f"count_{c}" for c in range(K + 1))]]
    for group, s in stats.items():
        rows.append([group, s.n, repr(s.mean), s.mode, *(int(h) for h in s.histogram)])
    _write(out / "features.csv", _csv(rows))
    return {str(g): {"mean": s.mean, "mode": s.mode} for g, s in stats.items()}


def _trigger_report(cfg, data, model) -> A.TriggerUnitReport:
    try:
        return A.find_triggering_units(_latents(cfg, data, model), data.artifact_flag, cfg["analysis"]["gap_threshold"])
    except ValueError as e:
        raise RunError(str(e)) from e


def cmd_trigger(cfg) -> dict:
    out = _out_dir(cfg)
    data = _load_split(cfg, cfg["analysis"]["split"])
    model = _load_model(cfg, data)
    rep = _trigger_report(cfg, data, model)
    _write(out / "trigger.csv", rep.to_csv())
    return {"selected": rep.selected, "top_gap": float(rep.gap[rep.ranking[0]])}


def cmd_ablate(cfg) -> dict:
    out = _out_dir(cfg)
    an = cfg["analysis"]
    data = _load_split(cfg, an["split"])
    model = _load_model(cfg, data)
    units = an["units"]
    if units == "trigger":
        rep = _trigger_report(cfg, data, model)
        if not rep.selected:
            raise RunError(f"no unit reaches gap {rep.threshold}; pass --units explicitly")
        ops = [(k, "off") for k in rep.selected]
        rows = np.flatnonzero(data.artifact_flag)[: an["n_examples"]]
    else:
        try:
            ops = A.parse_unit_ops(units if isinstance(units, str) else json.dumps(units), model.cfg.K)
        except ValueError as e:
            raise UsageError(f"bad --units value {units!r}") from e
        rows = np.arange(min(an["n_examples"], len(data)))
    x = data.x[rows]
    try:
        generated = A.ablate_generate(model, x, ops, seed=an["seed"])
    except (IndexError, ValueError) as e:
        raise RunError(str(e)) from e
    _write(out / "ablate.csv", _csv([["row", *(f"x{i}" for i in range(x.shape[1]))]] + [[int(r), *map(repr, g.tolist())] for r, g in zip(rows, generated)]))
    result = {"units": [[k, s] for k, s in ops], "n": int(rows.size)}
    k = min(10, rows.size)
    if _is_image(cfg):
        result["dominance_before"] = float(np.mean(A.channel_dominance(x)))
        result["dominance_after"] = float(np.mean(A.channel_dominance(generated)))
        if k:
            write_pnm(image_grid(list(x[:k]) + list(generated[:k]), 2, k), out / "ablate.ppm")
    elif k:
        regular = A.reconstruct(model, x[:1], seed=an["seed"])
        export_svg([x[0], regular[0], generated[0]], out / "ablate.svg", labels=["input", "reconstruction", "ablated"])
    _write_json(out / "ablate.json", result)
    return result


def _parse_grid(text) -> tuple[int, int]:
    try:
        cols, rows = (int(v) for v in str(text).lower().split("x"))
    except ValueError as e:
        raise UsageError(f"--grid must look like 10x4, got {text!r}") from e
    if cols < 1 or rows < 1:
        raise UsageError("--grid sizes must be positive")
    return cols, rows


def _pick_sources(data: Dataset, cols: int, rows: int, image: bool):
    classes = np.unique(data.task_label)
    task_idx = []
    for c in range(cols):
        hits = np.flatnonzero(data.task_label == classes[c % classes.size])
        task_idx.append(int(hits[(c // classes.size) % hits.size]))
    key = data.color_id if image else data.subject_id
    style_idx = []
    for value in np.unique(key):
        if len(style_idx) == rows:
            break
        style_idx.append(int(np.flatnonzero(key == value)[0]))
    extra = (i for i in range(len(data)) if i not in style_idx)
    while len(style_idx) < rows:
        style_idx.append(next(extra))
    return np.array(task_idx), np.array(style_idx)


def cmd_swap(cfg) -> dict:
    out = _out_dir(cfg)
    an = cfg["analysis"]
    cols, rows = _parse_grid(an["grid"])
    data = _load_split(cfg, an["split"])
    model = _load_model(cfg, data)
    if model.kind == "classifier":
        raise RunError("swapping needs a generative model")
    task_idx, style_idx = _pick_sources(data, cols, rows, _is_image(cfg))
    grid = A.swap_grid(model, data.x[task_idx], data.x[style_idx], seed=an["seed"])
    flat = grid.reshape(rows * cols, -1)
    header = ["style_row", "task_col", *(f"x{i}" for i in range(flat.shape[1]))]
    _write(out / "swap.csv", _csv([header] + [[r, c, *map(repr, grid[r, c].tolist())] for r in range(rows) for c in range(cols)]))
    result = {"grid": f"{cols}x{rows}", "task_sources": task_idx.tolist(), "style_sources": style_idx.tolist()}
    if _is_image(cfg):
        write_pnm(image_grid(list(flat), rows, cols), out / "swap.ppm")
        result["style_colors"] = [COLOR_NAMES[c] if c >= 0 else "none" for c in data.color_id[style_idx]]
        with no_grad():
            pred = model.predict(flat)
        result["task_match"] = float(np.mean(pred == np.tile(model.predict(data.x[task_idx]), rows)))
    else:
        export_svg(list(grid[0][: min(cols, 4)]), out / "swap.svg", labels=[f"task source {c}" for c in range(min(cols, 4))])
    _write_json(out / "swap.json", result)
    return result


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "recon": cmd_recon,
    "features": cmd_features,
    "trigger": cmd_trigger,
    "ablate": cmd_ablate,
    "swap": cmd_swap,
}


def decode_zero(model, x) -> np.ndarray:
    """Decoder mean with y_c = 0 and the model's predicted labels."""
    y_t = one_hot(model.predict(x), model.cfg.task_classes)
    with no_grad():
        return model.decode(Tensor(np.zeros((len(x), model.cfg.K))), y_t).data


def main(argv=None, environ=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = _parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        overrides = parse_overrides(rest)
        cfg = C.resolve(args.config, overrides, environ)
        out = _out_dir(cfg)
        _write(out / f"resolved_config_{args.command}.json", C.canonical_json(cfg))
        result = HANDLERS[args.command](cfg)
    except (UsageError, C.ConfigError) as e:
        print(f"ibpd: usage error: {e}", file=sys.stderr)
        return 1
    except (RunError, CheckpointFormatError, DatasetFormatError, FloatingPointError) as e:
        print(f"ibpd: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
