"""Frame sources: the synthetic desk-scale corpus and dataset manifests.

A manifest is plain text::

    # comments allowed
    fps 10
    dims 3 32 32
    frame_0000.png
    frame_0001.png
    ...

Frame paths are relative to the manifest.  ``.png``/``.ppm`` files are
read as 8-bit RGB; ``.npy`` files hold a (C, H, W) float array in [0, 1].
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

__all__ = [
    "synthetic_corpus",
    "Manifest",
    "read_manifest",
    "write_manifest",
    "load_frames",
    "save_frame",
    "CACHE_ENV",
    "cache_dir",
    "atomic_write_bytes",
]

CACHE_ENV = "BINRES_CACHE_DIR"


def _grating(yy, xx, freq, theta, phase):
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def synthetic_corpus(n_frames: int = 200, size: int = 32, frames_per_clip: int = 20,
                     seed: int = 0, channels: int = 3) -> np.ndarray:
    """Moving textured patterns, (n_frames, channels, size, size) in [0, 1].

    Each clip has a smooth colour gradient, a fine drifting grating and a
    textured disc moving across the frame.  All clips are drawn from the
    same generator family, so the content is "one domain".
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = []
    while len(frames) < n_frames:
        base = rng.uniform(0.3, 0.7, size=channels)
        gdir = rng.uniform(0, 2 * np.pi)
        gamp = rng.uniform(0.05, 0.15, size=channels)
        ramp = ((xx * np.cos(gdir) + yy * np.sin(gdir)) / size)[None]
        freq = rng.uniform(0.22, 0.34)
        theta = rng.uniform(0, np.pi)
        tint = rng.uniform(0.5, 1.0, size=channels) * rng.uniform(0.06, 0.12)
        speed = rng.uniform(0.3, 0.8)
        disc_r = rng.uniform(5, 9)
        start = rng.uniform(disc_r, size - disc_r, size=2)
        vel = rng.uniform(-1.2, 1.2, size=2)
        disc_col = rng.uniform(-0.25, 0.25, size=channels)
        disc_freq = rng.uniform(0.2, 0.3)
        disc_theta = rng.uniform(0, np.pi)
        for t in range(frames_per_clip):
            img = base[:, None, None] + gamp[:, None, None] * ramp
            img = img + tint[:, None, None] * _grating(yy, xx, freq, theta, speed * t)[None]
            cy, cx = start + vel * t
            cy, cx = cy % size, cx % size
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            mask = 1.0 / (1.0 + np.exp((np.sqrt(d2) - disc_r) * 2.0))
            tex = 0.08 * _grating(yy, xx, disc_freq, disc_theta, -speed * t)
            img = img + mask[None] * (disc_col[:, None, None] + tex[None])
            frames.append(np.clip(img, 0.0, 1.0))
            if len(frames) == n_frames:
                break
    return np.stack(frames)


@dataclass
class Manifest:
    path: Path
    fps: float
    dims: Tuple[int, int, int]
    frames: List[Path]

    def digest(self) -> str:
        """Hash of the manifest text and every frame file's bytes."""
        h = hashlib.sha256(self.path.read_bytes())
        for f in self.frames:
            h.update(f.read_bytes())
        return h.hexdigest()[:16]


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    fps = None
    dims = None
    frames: List[Path] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "fps" and len(parts) == 2:
            fps = float(parts[1])
        elif parts[0] == "dims" and len(parts) == 4:
            dims = tuple(int(p) for p in parts[1:])
        else:
            f = (path.parent / line).resolve()
            if not f.is_file():
                raise ConfigError(f"{path}:{lineno}: frame file not found: {line}")
            frames.append(f)
    if fps is None or fps <= 0:
        raise ConfigError(f"{path}: missing or invalid 'fps' line")
    if dims is None:
        raise ConfigError(f"{path}: missing 'dims C H W' line")
    if not frames:
        raise ConfigError(f"{path}: no frames listed")
    return Manifest(path, fps, dims, frames)


def _load_frame(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_frames(manifest: Manifest) -> np.ndarray:
    out = []
    for f in manifest.frames:
        fr = _load_frame(f)
        if fr.shape != manifest.dims:
            raise ConfigError(f"{f}: frame shape {fr.shape} != manifest dims {manifest.dims}")
        out.append(fr)
    return np.stack(out)


def save_frame(frame: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, frame)
        return
    from PIL import Image

    u8 = np.floor(np.clip(frame, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def write_manifest(frames: np.ndarray, directory, fps: float, fmt: str = "png") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"fps {fps:g}", "dims " + " ".join(str(d) for d in frames.shape[1:])]
    for i, fr in enumerate(frames):
        name = f"frame_{i:05d}.{fmt}"
        save_frame(fr, directory / name)
        lines.append(name)
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    p = Path(root) if root else Path.home() / ".cache" / "binres"
    p.mkdir(parents=True, exist_ok=True)
    return p


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
