"""Dataset ingestion, normalization, latent streams, and the synthetic oracle task.

Ingested folders are cached as a packed archive keyed by (content hash,
resolution), so re-ingestion of an unchanged folder is a pure cache hit.

Archive byte layout (version 1, little endian):

    header   magic b"NDPK1\\0" | version u16 | count u32 | resolution u16 | channels u16
    records  count fixed-size records of channels*resolution*resolution uint8
             values in CHW order, concatenated in index order
    footer   utf-8 JSON blob | blob length u64 | magic b"NDIX"

The footer JSON records source filenames, the content key, and the number of
skipped (undecodable) files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import InputError

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"NDPK1\x00"
ARCHIVE_VERSION = 1
FOOTER_MAGIC = b"NDIX"
_HEADER = struct.Struct("<6sHIHH")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".ppm"}


def default_cache_root() -> str:
    return os.environ.get(
        "NDGAN_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "ndgan")
    )


def normalize_images(u8: np.ndarray) -> Tensor:
    """Map uint8 [0, 255] pixels to float32 [-1, 1]."""
    return torch.from_numpy(u8.astype(np.float32) / 127.5 - 1.0)


def denormalize_images(x: Tensor) -> np.ndarray:
    """Invert :func:`normalize_images` back to uint8 (exact within 1/255)."""
    arr = (x.detach().cpu().numpy() + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def _stream_rng(seed: int, stream_id: str, step: int) -> np.random.Generator:
    """Named, splittable RNG: one independent stream per (seed, stream, step)."""
    key = zlib.crc32(stream_id.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key, step])))


def sample_latents(dim: int, batch: int, seed: int, stream_id: str = "latents", step: int = 0) -> Tensor:
    """Draw a standard-normal latent batch from a named stream.

    The same (seed, stream_id, step) triple always yields the same batch, and
    distinct stream ids are statistically independent, so teacher/student
    pairing can replay identical latents.
    """
    if dim < 1 or batch < 1:
        raise InputError("latent dim and batch must be >= 1")
    rng = _stream_rng(seed, stream_id, step)
    return torch.from_numpy(rng.standard_normal((batch, dim), dtype=np.float32))


def write_archive(path: str, records: np.ndarray, files: list[str], content_key: str, skipped: int) -> None:
    if records.dtype != np.uint8 or records.ndim != 4:
        raise InputError("archive records must be uint8 with shape (N, C, H, W)")
    n, c, h, w = records.shape
    if h != w:
        raise InputError("archive records must be square")
    footer = json.dumps(
        {"files": files, "content_key": content_key, "skipped": skipped}
    ).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, n, h, c))
        fh.write(records.tobytes())
        fh.write(footer)
        fh.write(struct.pack("<Q", len(footer)))
        fh.write(FOOTER_MAGIC)
    os.replace(tmp, path)


def read_archive(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, n, res, c = _HEADER.unpack(head)
        if magic != ARCHIVE_MAGIC or version != ARCHIVE_VERSION:
            raise InputError(f"{path} is not a v{ARCHIVE_VERSION} packed archive")
        payload = fh.read(n * c * res * res)
        rest = fh.read()
    if rest[-4:] != FOOTER_MAGIC:
        raise InputError(f"{path}: corrupt archive footer")
    (blob_len,) = struct.unpack("<Q", rest[-12:-4])
    meta = json.loads(rest[-12 - blob_len : -12].decode())
    records = np.frombuffer(payload, dtype=np.uint8).reshape(n, c, res, res)
    return records, meta


@dataclass
class DatasetHandle:
    """A fixed collection of equally sized images, served as [-1, 1] tensors."""

    id: str
    resolution: int
    channels: int
    size: int
    source: str
    normalization: str = "uint8->[-1,1]"
    from_cache: bool = False
    skipped: int = 0

    def __post_init__(self):
        self._records: np.ndarray | None = None

    def _attach(self, records: np.ndarray) -> "DatasetHandle":
        self._records = records
        return self

    def images_at(self, indices) -> Tensor:
        assert self._records is not None, "handle has no attached records"
        return normalize_images(self._records[np.asarray(indices)])

    def batch(self, batch_size: int, step: int = 0, seed: int = 0) -> Tensor:
        """Deterministic uniform batch for training step `step`."""
        rng = _stream_rng(seed, f"data/{self.id}", step)
        return self.images_at(rng.integers(0, self.size, batch_size))

    def sample(self, n: int, seed: int = 0) -> Tensor:
        """n distinct images in a seeded order (for evaluation)."""
        if n > self.size:
            raise InputError(f"requested {n} samples from dataset of size {self.size}")
        rng = _stream_rng(seed, f"data-sample/{self.id}", 0)
        return self.images_at(rng.permutation(self.size)[:n])


def _folder_content_key(path: str, resolution: int) -> tuple[str, list[str]]:
    names = sorted(
        f
        for f in os.listdir(path)
        if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
    )
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    h.update(str(resolution).encode())
    return h.hexdigest()[:24], names


def _decode_image(path: str, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left = (im.size[0] - side) // 2
        top = (im.size[1] - side) // 2
        im = im.crop((left, top, left + side, top + side))
        im = im.resize((resolution, resolution), Image.LANCZOS)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)


def ingest_folder(path: str, resolution: int, cache_root: str | None = None) -> DatasetHandle:
    """Ingest an image folder: center-crop, resize, cache as a packed archive.

    Ordering is deterministic (sorted filenames); undecodable files are
    skipped with a logged warning.  The cache key is the folder content hash
    plus the resolution, so unchanged folders are never re-decoded.
    """
    if not os.path.isdir(path):
        raise InputError(f"no such dataset folder: {path}")
    cache_root = cache_root or default_cache_root()
    key, names = _folder_content_key(path, resolution)
    os.makedirs(os.path.join(cache_root, "ingest"), exist_ok=True)
    archive = os.path.join(cache_root, "ingest", f"{key}.ndpk")
    from_cache = os.path.exists(archive)
    if from_cache:
        records, meta = read_archive(archive)
        kept, skipped = meta["files"], meta["skipped"]
    else:
        arrays, kept, skipped = [], [], 0
        for name in names:
            try:
                arrays.append(_decode_image(os.path.join(path, name), resolution))
                kept.append(name)
            except Exception:
                skipped += 1
                log.warning("skipping undecodable image %s", name)
        if not arrays:
            raise InputError(f"no decodable images under {path}")
        records = np.stack(arrays)
        write_archive(archive, records, kept, key, skipped)
    handle = DatasetHandle(
        id=f"folder-{key[:8]}",
        resolution=resolution,
        channels=records.shape[1],
        size=records.shape[0],
        source=f"folder:{os.path.abspath(path)}",
        from_cache=from_cache,
        skipped=skipped,
    )
    return handle._attach(records)


class MixtureDataset:
    """2-D Gaussian ring mixture rendered as heatmap images.

    Modes sit at angle 2*pi*k/n_modes on the unit circle; a sample is a point
    from one mode splatted as an isotropic Gaussian bump onto a square grid
    over [-1.5, 1.5]^2, replicated to three channels with background -1 and
    peak +1.  The splat is narrow enough that the image centroid recovers the
    point, which gives the tests an exact mode-assignment oracle.
    """

    SPLAT_SIGMA = 0.15
    EXTENT = 1.5

    def __init__(self, n_modes: int, std: float, seed: int = 0, resolution: int = 32, size: int = 50000):
        if n_modes < 2:
            raise InputError("mixture needs at least 2 modes")
        self.n_modes = n_modes
        self.std = std
        self.seed = seed
        self.resolution = resolution
        self.channels = 3
        self.size = size
        self.id = f"mixture{n_modes}-std{std:g}-r{resolution}"
        self.source = "builtin:mixture"
        self.normalization = "heatmap[-1,1]"
        angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
        self.centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        axis = np.linspace(-self.EXTENT, self.EXTENT, resolution, dtype=np.float64)
        self._grid_x, self._grid_y = np.meshgrid(axis, axis, indexing="xy")

    def sample_points(self, n: int, step: int = 0, seed: int | None = None, stream: str = "mixture") -> tuple[np.ndarray, np.ndarray]:
        """Draw n (point, mode label) pairs from a named stream."""
        rng = _stream_rng(self.seed if seed is None else seed, f"{stream}/{self.id}", step)
        labels = rng.integers(0, self.n_modes, n)
        points = self.centers[labels] + self.std * rng.standard_normal((n, 2))
        return points, labels

    def render(self, points: np.ndarray) -> Tensor:
        """Splat (n, 2) points into (n, 3, R, R) heatmap images in [-1, 1]."""
        px = points[:, 0][:, None, None]
        py = points[:, 1][:, None, None]
        d2 = (self._grid_x[None] - px) ** 2 + (self._grid_y[None] - py) ** 2
        bump = np.exp(-d2 / (2.0 * self.SPLAT_SIGMA**2))
        img = (2.0 * bump - 1.0).astype(np.float32)
        return torch.from_numpy(img[:, None]).repeat(1, 3, 1, 1)

    def decode_points(self, images: Tensor) -> np.ndarray:
        """Recover splat centers as intensity-weighted centroids."""
        w = (images.detach().cpu().numpy()[:, 0].astype(np.float64) + 1.0) / 2.0
        w = np.clip(w, 0.0, None)
        total = w.sum(axis=(1, 2)) + 1e-12
        x = (w * self._grid_x[None]).sum(axis=(1, 2)) / total
        y = (w * self._grid_y[None]).sum(axis=(1, 2)) / total
        return np.stack([x, y], axis=1)

    def assign_modes(self, points: np.ndarray, sigma_mult: float = 3.0) -> np.ndarray:
        """Nearest mode center within sigma_mult * std, else -1."""
        d = np.linalg.norm(points[:, None, :] - self.centers[None], axis=2)
        nearest = d.argmin(axis=1)
        ok = d[np.arange(len(points)), nearest] <= sigma_mult * self.std
        return np.where(ok, nearest, -1)

    def mode_coverage(self, points: np.ndarray, min_fraction: float = 0.01) -> int:
        """Number of modes holding at least min_fraction of the samples."""
        modes = self.assign_modes(points)
        counts = np.bincount(modes[modes >= 0], minlength=self.n_modes)
        return int((counts >= min_fraction * len(points)).sum())

    def batch(self, batch_size: int, step: int = 0, seed: int | None = None) -> Tensor:
        points, _ = self.sample_points(batch_size, step=step, seed=seed)
        return self.render(points)

    def sample(self, n: int, seed: int | None = None) -> Tensor:
        points, _ = self.sample_points(n, step=0, seed=seed, stream="mixture-sample")
        return self.render(points)


def synthetic_mixture(n_modes: int, std: float, seed: int = 0, resolution: int = 32, size: int = 50000) -> MixtureDataset:
    """Build the ring-mixture oracle dataset (see :class:`MixtureDataset`)."""
    return MixtureDataset(n_modes, std, seed=seed, resolution=resolution, size=size)


def open_dataset(cfg, resolution: int, cache_root: str | None = None):
    """Resolve a config dataset entry to a handle.

    Accepts {"kind": "mixture", ...}, {"kind": "folder", "path": ...}, or the
    string shorthands "mixture", "mixture:<modes>", and a folder path.
    """
    if isinstance(cfg, str):
        if cfg.startswith("mixture"):
            parts = cfg.split(":")
            modes = int(parts[1]) if len(parts) > 1 else 8
            cfg = {"kind": "mixture", "modes": modes}
        else:
            cfg = {"kind": "folder", "path": cfg}
    kind = cfg.get("kind")
    if kind == "mixture":
        return synthetic_mixture(
            n_modes=cfg.get("modes", 8),
            std=cfg.get("std", 0.05),
            seed=cfg.get("seed", 0),
            resolution=resolution,
            size=cfg.get("size", 50000),
        )
    if kind == "folder":
        return ingest_folder(cfg["path"], resolution, cache_root=cache_root)
    raise InputError(f"unknown dataset kind {kind!r}")
