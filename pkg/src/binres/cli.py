"""Command-line entry point: ``binres <command>``.

Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 integrity error (fingerprint mismatch, corrupt payload or container).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, pipeline
from .autoencoder import TrainHistory, train
from .binarizer import BinarizerKind
from .config import RunConfig, load_config
from .data import (Manifest, atomic_write_bytes, cache_dir, load_frames, read_manifest, save_frame,
                   synthetic_corpus, write_manifest)
from .errors import BinresError, ConfigError, IntegrityError
from .metrics import QualityScore, score_frames

__all__ = ["main", "cmd_train", "cmd_encode", "cmd_decode", "cmd_benchmark",
           "cmd_compare_binarizers", "cmd_inspect", "base_residuals",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME", "EXIT_INTEGRITY"]

log = logging.getLogger("binres")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 2, 3, 4
SNAPSHOT = "config.resolved.txt"


def _fresh(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"refusing to overwrite {path} (pass --force)")
    return path


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _load_video(manifest_path) -> tuple:
    m = read_manifest(manifest_path)
    return m, load_frames(m)


def base_residuals(cfg: RunConfig, manifest: Manifest, frames: np.ndarray) -> np.ndarray:
    """Base-codec output Y for ``frames``, cached on disk.

    The cache key covers the codec settings and the manifest digest, so a
    changed input can never hit a stale entry.
    """
    codec = cfg.base_codec(manifest.fps)
    key = json.dumps({"codec": cfg.codec, "quality": cfg.quality, "base_bitrate": cfg.base_bitrate,
                      "encode_cmd": cfg.encode_cmd, "decode_cmd": cfg.decode_cmd, "pix_fmt": cfg.pix_fmt,
                      "manifest": manifest.digest(), "n": len(frames)}, sort_keys=True)
    path = cache_dir() / f"base-{hashlib.sha256(key.encode()).hexdigest()[:24]}.npy"
    if path.is_file():
        log.info("base codec output from cache %s", path)
        return np.load(path)
    try:
        y = codec.encode(frames, target_bitrate=cfg.base_bitrate).decoded
    except BinresError as exc:
        raise type(exc)(f"base codec on {manifest.path}: {exc}") from None
    atomic_write_bytes(path, _npy_bytes(y))
    return y


def _split_frames(cfg: RunConfig, frames: np.ndarray):
    n = len(frames)
    n_train = cfg.train_frames if cfg.train_frames is not None else n - cfg.eval_frames
    if not 0 < n_train <= n or cfg.eval_frames > n:
        raise ConfigError(f"train_frames={n_train}, eval_frames={cfg.eval_frames} do not fit {n} frames")
    return slice(0, n_train), slice(n - cfg.eval_frames, n) if cfg.eval_frames else slice(0, n)


def _loss_csv(history: TrainHistory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "lr"])
    for i, (loss, lr) in enumerate(zip(history.epoch_loss, history.lr), 1):
        w.writerow([i, repr(loss), repr(lr)])
    return buf.getvalue()


def _table_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- commands ----------------------------------------------------------------


@dataclass
class TrainOutput:
    model: object
    history: TrainHistory
    checkpoint: Path
    loss_csv: Path


def cmd_train(cfg: RunConfig, force: bool = False) -> TrainOutput:
    if cfg.manifest is None or cfg.output_dir is None:
        raise ConfigError("train needs manifest and output_dir")
    out = Path(cfg.output_dir)
    ck, loss = _fresh(out / "model.brae", force), _fresh(out / "loss.csv", force)
    manifest, frames = _load_video(cfg.manifest)
    tr, _ = _split_frames(cfg, frames)
    x = frames[tr]
    y = base_residuals(cfg, manifest, frames)[tr]
    residuals = pipeline.compute_residual(x, y)
    model, history = train(residuals, cfg.training(), cfg.autoencoder(),
                           log=lambda e, loss, lr: log.info("epoch %d loss %.6g lr %g", e + 1, loss, lr))
    checkpoint.save(model, ck)
    _write_text(loss, _loss_csv(history))
    _write_text(out / SNAPSHOT, cfg.dumps())
    return TrainOutput(model, history, ck, loss)


def cmd_encode(cfg: RunConfig, checkpoint_path, out_path, force: bool = False) -> pipeline.EncodeResult:
    if cfg.manifest is None or cfg.budget_bps is None:
        raise ConfigError("encode needs a manifest and budget_bps")
    out_path = _fresh(Path(out_path), force)
    manifest, frames = _load_video(cfg.manifest)
    split = cfg.split
    model = None
    if split is None or split < 1.0:
        model = checkpoint.load(checkpoint_path)
        if split is None:
            split = pipeline.auto_split(cfg.budget_bps, manifest.fps, model, frames.shape[1:], cfg.k)
    codec = cfg.base_codec(manifest.fps)
    if cfg.codec == "toy_dct" and cfg.quality is not None:
        log.info("toy codec at fixed quality %g; the base rate target is not used", cfg.quality)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        result = pipeline.server_encode(frames, cfg.budget_bps, split, codec, model, manifest.fps, cfg.k)
    for wmsg in caught:
        log.warning("%s", wmsg.message)
    atomic_write_bytes(out_path, result.container.to_bytes())
    resolved = replace(cfg, split=split)
    _write_text(out_path.with_name(out_path.name + ".config.txt"), resolved.dumps())
    _write_text(out_path.with_name(out_path.name + ".report.json"),
                json.dumps(result.report.as_dict(), indent=2))
    return result


def cmd_decode(container_path, checkpoint_path, out_dir, cfg: Optional[RunConfig] = None,
               fmt: str = "png", reference=None, force: bool = False) -> dict:
    data = Path(container_path).read_bytes()
    container = pipeline.StreamContainer.from_bytes(data)
    model = checkpoint.load(checkpoint_path) if checkpoint_path else None
    codec = cfg.base_codec(container.fps) if cfg is not None and cfg.codec == "external" else None
    frames = pipeline.client_decode(container, model, codec)
    out_dir = Path(out_dir)
    _fresh(out_dir / "manifest.txt", force)
    write_manifest(frames, out_dir, container.fps, fmt=fmt)
    report = pipeline.bitrate_account(container).as_dict()
    report["file_bits"] = 8 * len(data)
    if reference is not None:
        _, ref = _load_video(reference)
        score = score_frames(ref, frames)
        report["quality"] = score.summary()
        _write_text(out_dir / "scores.csv", score.to_csv())
    _write_text(out_dir / "report.json", json.dumps(report, indent=2))
    return report


def _score(x, y) -> QualityScore:
    return score_frames(list(x), list(y))


def cmd_benchmark(cfg: RunConfig, force: bool = False) -> List[dict]:
    """Base codec alone at each total budget vs. the pipeline at the same budget."""
    if cfg.manifest is None or cfg.output_dir is None:
        raise ConfigError("benchmark needs manifest and output_dir")
    if not cfg.rate_points:
        raise ConfigError("benchmark needs rate_points")
    if len(set(cfg.rate_points)) != len(cfg.rate_points):
        raise ConfigError(f"duplicate rate points in {cfg.rate_points}")
    if len(cfg.checkpoints) != len(cfg.rate_points):
        raise ConfigError(f"{len(cfg.checkpoints)} checkpoints for {len(cfg.rate_points)} rate points")
    missing = [str(p) for p in cfg.checkpoints if not Path(p).is_file()]
    if missing:
        raise ConfigError("missing checkpoints:\n  " + "\n  ".join(missing))
    out = Path(cfg.output_dir)
    csv_path, json_path = _fresh(out / "benchmark.csv", force), _fresh(out / "benchmark.json", force)
    manifest, frames = _load_video(cfg.manifest)
    _, ev = _split_frames(cfg, frames)
    x = frames[ev]
    fps = manifest.fps
    rate_codec = replace(cfg, quality=None, base_bitrate=cfg.base_bitrate or 1.0).base_codec(fps)
    rows = []
    for budget, ck in zip(cfg.rate_points, cfg.checkpoints):
        model = checkpoint.load(ck)
        split = cfg.split or pipeline.auto_split(budget, fps, model, x.shape[1:], cfg.k)
        row = {"rate_point": budget, "checkpoint": str(ck), "split": split}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for method, s, m in (("baseline", 1.0, None), ("pipeline", split, model)):
                res = pipeline.server_encode(x, budget, s, rate_codec, m, fps, cfg.k)
                score = _score(x, pipeline.client_decode(res.container, m, rate_codec))
                row.update({f"{method}_base_quality": res.base.descriptor.get("quality", ""),
                            f"{method}_total_bits": res.report.total_bits,
                            f"{method}_total_mbps": res.report.total_mbps,
                            f"{method}_bits_per_pixel": res.report.bits_per_pixel,
                            f"{method}_psnr_db": score.mean_psnr, f"{method}_ssim": score.mean_ssim})
        rows.append(row)
    _write_text(csv_path, _table_csv(rows))
    _write_text(json_path, json.dumps(rows, indent=2))
    _write_text(out / SNAPSHOT, cfg.dumps())
    return rows


def cmd_compare_binarizers(cfg: RunConfig, force: bool = False) -> List[dict]:
    """Train one model per binarizer under identical data and seed."""
    if cfg.manifest is None or cfg.output_dir is None:
        raise ConfigError("compare-binarizers needs manifest and output_dir")
    out = Path(cfg.output_dir)
    csv_path, json_path = _fresh(out / "binarizers.csv", force), _fresh(out / "binarizers.json", force)
    manifest, frames = _load_video(cfg.manifest)
    tr, ev = _split_frames(cfg, frames)
    y = base_residuals(cfg, manifest, frames)
    r_train = pipeline.compute_residual(frames[tr], y[tr])
    x_ev, y_ev = frames[ev], y[ev]
    base_score = _score(x_ev, y_ev)
    _write_text(out / SNAPSHOT, cfg.dumps())
    rows = []
    for kind in BinarizerKind:
        try:
            model, history = train(r_train, cfg.training(), cfg.autoencoder(kind.value))
        except Exception as exc:
            _write_text(csv_path, _table_csv(rows))
            raise BinresError(f"binarizer {kind.value} failed to train ({exc}); "
                              f"partial results kept in {csv_path}") from exc
        r_hat = model.reconstruct(pipeline.compute_residual(x_ev, y_ev)).astype(np.float64)
        score = _score(x_ev, np.clip(y_ev + r_hat, 0.0, 1.0))
        rows.append({"binarizer": kind.value, "psnr_db": score.mean_psnr, "ssim": score.mean_ssim,
                     "base_psnr_db": base_score.mean_psnr, "base_ssim": base_score.mean_ssim,
                     "final_loss": history.epoch_loss[-1]})
        _write_text(csv_path, _table_csv(rows))
    _write_text(json_path, json.dumps(rows, indent=2))
    return rows


def cmd_inspect(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] == checkpoint.MAGIC:
        model = checkpoint.from_bytes(data)
        c = model.config
        return {"type": "checkpoint", "L": c.L, "C": c.C, "input_channels": c.input_channels,
                "binarizer": c.binarizer.value, "gumbel": vars(c.gumbel),
                "arrays": {k: list(v.shape) for k, v in model.state_arrays().items()},
                "optimizer": model.optimizer is not None,
                "fingerprint": checkpoint.fingerprint(model).hex(), "bytes": len(data)}
    if data[:4] == pipeline.MAGIC:
        ct = pipeline.StreamContainer.from_bytes(data)
        return {"type": "container", "frames": ct.frame_count, "dims": list(ct.dims), "fps": ct.fps,
                "L": ct.L, "C": ct.C, "k": ct.k, "binarizer": ct.binarizer,
                "fingerprint": ct.fingerprint.hex(), "codec": ct.codec_kind,
                "report": pipeline.bitrate_account(ct).as_dict(), "bytes": len(data)}
    raise IntegrityError(f"{path}: neither a BRAE checkpoint nor a BRSC container")


def cmd_synth(out_dir, frames: int = 200, size: int = 32, seed: int = 0, fps: float = 10.0,
              fmt: str = "png", force: bool = False) -> Path:
    out_dir = Path(out_dir)
    _fresh(out_dir / "manifest.txt", force)
    return write_manifest(synthetic_corpus(frames, size=size, seed=seed), out_dir, fps, fmt=fmt)


# -- argument parsing ----------------------------------------------------------


def _overrides(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _cfg(args) -> RunConfig:
    overrides = _overrides(args.set)
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    from .config import parse_config

    return parse_config("", Path.cwd(), overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binres", description="Residual side-channel video coding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    for name in ("train", "benchmark", "compare-binarizers"):
        common(sub.add_parser(name))

    sp = sub.add_parser("encode", help="manifest -> BRSC container")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("decode", help="BRSC container -> frames + bitrate report")
    common(sp, config_required=False)
    sp.add_argument("container")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--format", choices=("png", "npy"), default="png")
    sp.add_argument("--reference", help="manifest of the original frames, for PSNR/SSIM")

    sp = sub.add_parser("inspect", help="dump a checkpoint or container header")
    sp.add_argument("path")

    sp = sub.add_parser("synth", help="write the synthetic corpus with a manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=200)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fps", type=float, default=10.0)
    sp.add_argument("--format", choices=("png", "npy"), default="png")
    sp.add_argument("--force", action="store_true")
    return p


def _run(args) -> object:
    if args.command == "train":
        res = cmd_train(_cfg(args), args.force)
        return {"checkpoint": str(res.checkpoint), "loss_csv": str(res.loss_csv),
                "final_loss": res.history.epoch_loss[-1]}
    if args.command == "encode":
        cfg = _cfg(args)
        if cfg.split != 1.0 and not args.checkpoint:
            raise ConfigError("encode needs --checkpoint unless split = 1")
        return cmd_encode(cfg, args.checkpoint, args.out, args.force).report.as_dict()
    if args.command == "decode":
        cfg = _cfg(args) if (args.config or args.set) else None
        return cmd_decode(args.container, args.checkpoint, args.out, cfg, args.format,
                          args.reference, args.force)
    if args.command == "benchmark":
        return cmd_benchmark(_cfg(args), args.force)
    if args.command == "compare-binarizers":
        return cmd_compare_binarizers(_cfg(args), args.force)
    if args.command == "inspect":
        return cmd_inspect(args.path)
    if args.command == "synth":
        return {"manifest": str(cmd_synth(args.out, args.frames, args.size, args.seed, args.fps,
                                          args.format, args.force))}
    raise ConfigError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        result = _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (BinresError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
