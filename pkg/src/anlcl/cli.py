"""Command line front end: ``anlcl {synth,train,derain,eval,sample,analyze}``.

Every command writes its outputs plus a ``run_manifest.json`` run record into
``--out``. Failures exit with the code of their error category
(I/O 2, configuration 3, format 4, numeric 5).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import embed_2d, patch_entropy, psnr, singular_spectrum, ssim
from .config import TrainConfig, load_config
from .data import (
    RainParams,
    SynthDataset,
    env_cache_dir,
    extract_patches,
    list_images,
    load_image,
    save_image,
    write_synth_dataset,
)
from .errors import AnlclError, ConfigError, DataIOError
from .sampler import nonlocal_topk

log = logging.getLogger("anlcl")

MANIFEST = "run_manifest.json"


# ---------------------------------------------------------------------------
# run records


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"anlcl-{__version__}"


def write_json_atomic(path: Path, payload) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def write_manifest(out: Path, command: str, config, seed, outputs, started: float) -> Path:
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "build": _build_id(),
        "outputs": sorted(str(p) for p in outputs),
        "duration_s": round(time.time() - started, 3),
    }
    write_json_atomic(out / MANIFEST, record)
    return out / MANIFEST


def write_rows(path: Path, rows: list[dict]) -> None:
    fields: list[str] = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    cache = env_cache_dir()
    if cache is None:
        raise ConfigError("--out is required (or set ANLCL_CACHE)")
    return cache / "runs" / command


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> list[Path]:
    params = RainParams(**_read_json(args.config)) if args.config else RainParams()
    seed = 0 if args.seed is None else args.seed
    out = write_synth_dataset(args.out_dir, args.count, params, seed, size=args.size, channels=args.channels)
    return [out / "manifest.json"] + [out / sub for sub in ("clean", "rainy", "rain")], {
        "rain_params": params.to_dict(), "count": args.count, "size": args.size}, seed


# ---------------------------------------------------------------------------
# train


def _train_config(args) -> TrainConfig:
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    if args.data:
        cfg = cfg.with_overrides({"data_dir": str(args.data)})
    if not cfg.data_dir:
        raise ConfigError("data_dir: missing dataset path")
    return cfg


def run_training(cfg: TrainConfig, out: Path, device: str = "cpu", eval_dir=None) -> dict:
    """Pretrain then finetune; write checkpoints, logs, and (optionally) held-out metrics."""
    from .trainer import Trainer, evaluate

    data = SynthDataset(cfg.data_dir, cfg.downsample_factor)
    trainer = Trainer(cfg, data, device)
    outputs = []
    trainer.pretrain()
    trainer.save(out / "pretrain.ckpt")
    trainer.finetune()
    trainer.save(out / "finetune.ckpt")
    trainer.write_logs(out)
    outputs += [out / "pretrain.ckpt", out / "finetune.ckpt", out / "loss_log.csv", out / "distance_curve.csv"]
    metrics = None
    if eval_dir:
        metrics = evaluate(trainer, SynthDataset(eval_dir, cfg.downsample_factor))
        write_json_atomic(out / "metrics.json", metrics)
        outputs.append(out / "metrics.json")
    return {"trainer": trainer, "outputs": outputs, "metrics": metrics}


def _sweep_entries(path) -> list[tuple[str, dict]]:
    raw = _read_json(path)
    if not isinstance(raw, list) or not raw:
        raise ConfigError("--sweep must hold a non-empty JSON list of override objects")
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"sweep entry {i} is not an object")
        if "overrides" in item:
            entries.append((str(item.get("name", f"run{i:02d}")), dict(item["overrides"])))
        else:
            entries.append((f"run{i:02d}", dict(item)))
    return entries


def sweep_row(name: str, overrides: dict, result: dict) -> dict:
    trainer = result["trainer"]
    row = {"name": name, "overrides": json.dumps(overrides, sort_keys=True)}
    row.update({k: v for k, v in overrides.items()})
    if trainer.loss_log:
        last = trainer.loss_log[-1]
        row.update({k: last[k] for k in ("l_mse", "l_sparse", "l_adv", "l_loc", "l_layer", "l_asy")})
    if len(trainer.curve) >= 2:
        first, final = trainer.curve.records[0], trainer.curve.records[-1]
        for key in ("intra_B", "intra_R", "inter_BR"):
            row[f"{key}_first"], row[f"{key}_final"] = first[key], final[key]
    if result["metrics"]:
        row.update(result["metrics"]["mean"])
    return row


def cmd_train(args):
    cfg = _train_config(args)
    out = _out_dir(args, "train")
    if not args.sweep:
        result = run_training(cfg, out, args.device, args.eval_dir)
        return result["outputs"], cfg.to_dict(), cfg.seed
    rows, outputs = [], []
    run_root = (env_cache_dir() / "sweeps" / out.name) if env_cache_dir() else out / "runs"
    for name, overrides in _sweep_entries(args.sweep):
        run_cfg = cfg.with_overrides(overrides)
        log.info("sweep run %s: %s", name, overrides)
        result = run_training(run_cfg, run_root / name, args.device, args.eval_dir)
        rows.append(sweep_row(name, overrides, result))
        outputs += result["outputs"]
    write_rows(out / "sweep.csv", rows)
    outputs.append(out / "sweep.csv")
    return outputs, {"base": cfg.to_dict(), "sweep": _read_json(args.sweep)}, cfg.seed


# ---------------------------------------------------------------------------
# derain


def cmd_derain(args):
    from .trainer import Trainer

    trainer = Trainer.from_checkpoint(args.checkpoint, device=args.device)
    src = Path(args.input)
    files = list_images(src) if src.is_dir() else [src]
    out = _out_dir(args, "derain")
    outputs = []
    for f in files:
        O = load_image(f)
        B, R = trainer.derain(O)
        for suffix, img in (("B", B), ("R", R), ("recon", np.clip(B + R, 0, 1))):
            path = out / f"{f.stem}_{suffix}.png"
            save_image(img, path)
            outputs.append(path)
    return outputs, trainer.config.to_dict(), trainer.config.seed


# ---------------------------------------------------------------------------
# eval


def _pred_key(path: Path) -> str | None:
    stem = path.stem
    if stem.endswith("_R") or stem.endswith("_recon"):
        return None
    return (stem[:-2] if stem.endswith("_B") else stem)


def match_pairs(pred_dir, gt_dir) -> list[tuple[str, Path, Path]]:
    preds = {}
    for p in list_images(pred_dir):
        key = _pred_key(p)
        if key is not None:
            preds[key] = p
    gts = {p.stem: p for p in list_images(gt_dir)}
    common = sorted(set(preds) & set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if not common or missing_pred or missing_gt:
        lines = ["prediction and ground-truth files do not match"]
        if missing_pred:
            lines.append("no prediction for: " + ", ".join(missing_pred))
        if missing_gt:
            lines.append("no ground truth for: " + ", ".join(missing_gt))
        raise ConfigError("; ".join(lines))
    return [(k, preds[k], gts[k]) for k in common]


def cmd_eval(args):
    out = _out_dir(args, "eval")
    rows = []
    for name, p, g in match_pairs(args.pred, args.gt):
        a, b = load_image(p), load_image(g)
        rows.append({"name": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    mean = {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}
    write_json_atomic(out / "metrics.json", {"mean": mean, "per_image": rows})
    write_rows(out / "metrics.csv", rows + [{"name": "mean", **mean}])
    return [out / "metrics.json", out / "metrics.csv"], {"pred": str(args.pred), "gt": str(args.gt)}, None


# ---------------------------------------------------------------------------
# sample


def contact_sheet(blocks: list[np.ndarray], gutter: int = 2) -> np.ndarray:
    """Blocks side by side on a white background, ``gutter`` pixels apart."""
    size, c = blocks[0].shape[0], blocks[0].shape[2]
    sheet = np.ones((size, len(blocks) * (size + gutter) - gutter, c))
    for i, b in enumerate(blocks):
        x = i * (size + gutter)
        sheet[:, x:x + size] = b
    return sheet


def cmd_sample(args):
    img = load_image(args.image)
    grid = extract_patches(img, args.patch_size, args.stride)
    if args.query_top is None or args.query_left is None:
        query = grid.refs[len(grid) // 2]
    else:
        query = next((r for r in grid.refs if (r.top, r.left) == (args.query_top, args.query_left)), None)
        if query is None:
            raise ConfigError(f"query ({args.query_top}, {args.query_left}) is not on the patch grid")
    res = nonlocal_topk(query, grid, args.k, farthest=args.mode == "reverse_nonlocal")
    out = _out_dir(args, "sample")
    sheet = contact_sheet([query.read(img)] + [grid.patches[i] for i in res.indices])
    save_image(sheet, out / "contact_sheet.png")
    payload = {
        "image": str(args.image), "mode": args.mode, "k": args.k,
        "patch_size": args.patch_size, "stride": args.stride,
        "query": {"top": query.top, "left": query.left},
        "matches": [{"top": m.top, "left": m.left, "distance": d} for m, d in zip(res.matches, res.distances)],
    }
    write_json_atomic(out / "matches.json", payload)
    return [out / "contact_sheet.png", out / "matches.json"], payload | {"matches": len(res.matches)}, None


# ---------------------------------------------------------------------------
# analyze


def _layers_for_analysis(args):
    """Clean and rain layers: ground truth, or the checkpoint's estimates on the rainy images."""
    data = SynthDataset(args.data)
    rainy = data.rainy[: args.max_images]
    if args.checkpoint:
        from .trainer import Trainer

        trainer = Trainer.from_checkpoint(args.checkpoint, device=args.device)
        pairs = [trainer.derain(O) for O in rainy]
        return [b for b, _ in pairs], [r for _, r in pairs], trainer
    if not data.paired:
        raise ConfigError("analyze without --checkpoint needs clean/ and rain/ ground truth")
    return data.clean[: args.max_images], data.rain[: args.max_images], None


def _plot(path: Path, draw) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.6), dpi=100)
    draw(ax)
    fig.tight_layout()
    try:
        fig.savefig(path)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def cmd_analyze(args):
    import torch

    clean, rain, trainer = _layers_for_analysis(args)
    out = _out_dir(args, "analyze")
    out.mkdir(parents=True, exist_ok=True)
    stacks = {"clean": [extract_patches(img, args.patch_size, args.stride) for img in clean],
              "rain": [extract_patches(img, args.patch_size, args.stride) for img in rain]}
    report, outputs = {}, []
    for layer, per_image in stacks.items():
        patches = np.concatenate([s.patches for s in per_image])
        entropies = [patch_entropy(np.clip(p, 0, 1)) for p in patches]
        spec = singular_spectrum(patches)
        report[layer] = {"mean_entropy": float(np.mean(entropies)), "entropies": entropies,
                         "rank_95": spec.rank_at(0.95), "energy": spec.energy().tolist()}

    def hist(ax):
        for layer, color in (("clean", "tab:blue"), ("rain", "tab:orange")):
            ax.hist(report[layer]["entropies"], bins=40, alpha=0.6, color=color, label=layer)
        ax.set_xlabel("patch entropy (bits)")
        ax.set_ylabel("patches")
        ax.legend()

    def energy(ax):
        for layer in ("clean", "rain"):
            e = report[layer]["energy"]
            ax.plot(np.arange(1, len(e) + 1), e, label=f"{layer} (95% at {report[layer]['rank_95']})")
        ax.set_xscale("log")
        ax.set_xlabel("rank")
        ax.set_ylabel("cumulative energy")
        ax.legend()

    _plot(out / "entropy_hist.png", hist)
    _plot(out / "spectrum.png", energy)
    outputs += [out / "entropy_hist.png", out / "spectrum.png"]

    if trainer is not None:
        size = args.patch_size
        emb = {}
        with torch.no_grad():
            for layer, key, images in (("clean", "B", clean), ("rain", "R", rain)):
                rows = []
                for img, stack in zip(images, stacks[layer]):
                    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()[None].to(trainer.device)
                    z = trainer.nets.layer(key, x, [r.top for r in stack.refs], [r.left for r in stack.refs], size)
                    rows.append(z.cpu().double().numpy())
                emb[layer] = np.concatenate(rows)
        xy = embed_2d(np.concatenate([emb["clean"], emb["rain"]]), method=args.method, seed=args.seed or 0)
        n_clean = len(emb["clean"])

        def scatter(ax):
            ax.scatter(*xy[:n_clean].T, s=4, label="clean", alpha=0.6)
            ax.scatter(*xy[n_clean:].T, s=4, label="rain", alpha=0.6)
            ax.legend()
            ax.set_title(f"patch embeddings ({args.method})")

        _plot(out / "embedding.png", scatter)
        outputs.append(out / "embedding.png")
        report["embedding_2d"] = {"clean": xy[:n_clean].tolist(), "rain": xy[n_clean:].tolist()}
    write_json_atomic(out / "analysis.json", report)
    outputs.append(out / "analysis.json")
    settings = {"data": str(args.data), "checkpoint": args.checkpoint, "patch_size": args.patch_size,
                "stride": args.stride, "max_images": args.max_images, "method": args.method}
    return outputs, settings, args.seed


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors, not I/O failures
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON document (training config, or rain parameters for synth)")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output directory (default: $ANLCL_CACHE/runs/<command>)")
    common.add_argument("--device", default="cpu", help="torch device, e.g. cpu or cuda")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="anlcl", description="Asymmetric non-local contrastive deraining toolkit.")
    parser.add_argument("--version", action="version", version=f"anlcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic rain dataset")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))

    p = sub.add_parser("train", parents=[common], help="pretrain then finetune")
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--eval-dir", help="paired held-out dataset for PSNR/SSIM after training")
    p.add_argument("--sweep", help="JSON list of dotted-key override objects; writes sweep.csv")

    p = sub.add_parser("derain", parents=[common], help="decompose images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("sample", parents=[common], help="contact sheet of block-matching results")
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=("nonlocal", "reverse_nonlocal"), default="nonlocal")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--query-top", type=int)
    p.add_argument("--query-left", type=int)

    p = sub.add_parser("analyze", parents=[common], help="entropy, spectrum, and embedding plots")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", help="analyze the checkpoint's layer estimates instead of ground truth")
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--max-images", type=int, default=8)
    p.add_argument("--method", choices=("pca", "tsne"), default="pca")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "derain": cmd_derain,
            "eval": cmd_eval, "sample": cmd_sample, "analyze": cmd_analyze}


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "synth":
            args.out_dir = _out_dir(args, "synth")
        outputs, config, seed = COMMANDS[args.command](args)
        out = args.out_dir if args.command == "synth" else _out_dir(args, args.command)
        write_manifest(Path(out), args.command, config, seed, outputs, started)
    except AnlclError as exc:
        print(f"anlcl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
