"""Binary formats: named-tensor checkpoints, MNIST IDX, PNG/PGM image grids.

Checkpoint layout (all integers little-endian)::

    b"ACAI"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 extent,
              prod(extents) x f32 payload }
"""

from __future__ import annotations

import gzip
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ACAI"
VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    """A file did not match the expected binary layout."""


class VersionError(FormatError):
    """The checkpoint was written by an unsupported format version."""


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a container; raises :class:`FormatError` naming the failing offset."""
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated file: need {n} bytes for {what} at offset {pos}, "
                              f"only {len(view) - pos} left")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} at offset 4 (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor name at offset {start} is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count_el = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * count_el, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes at offset {pos}")
    return out


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    _atomic_write(path, encode_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _tensor_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


# ---------------------------------------------------------------------------
# model / training-state checkpoints
# ---------------------------------------------------------------------------


def _config_record(config) -> str:
    d = {"variant": asdict(config.variant), "arch": asdict(config.arch)}
    for key in ("total_samples", "batch_size", "lr", "seed", "eval_every", "eval_pairs",
                "eval_steps", "eval_refs"):
        d[key] = getattr(config, key)
    return json.dumps(d, sort_keys=True)


def config_from_record(text: str):
    from .models import ArchConfig, ModelVariant
    from .trainer import TrainConfig

    d = json.loads(text)
    d["variant"] = ModelVariant(**d["variant"])
    d["arch"] = ArchConfig(**d["arch"])
    return TrainConfig(**d)


def state_tensors(state, config) -> dict[str, np.ndarray]:
    model = state.model
    out: dict[str, np.ndarray] = {"meta.config": _text_tensor(_config_record(config)),
                                  "meta.step": np.array([state.step], dtype=np.float32)}
    params = model.named_parameters()
    inverse = {id(p): n for n, p in params.items()}
    for name, p in params.items():
        out[name] = p.data
    for name, buf in model.named_buffers().items():
        out[name] = buf
    groups = [("ae", state.opt.ae)] + ([("critic", state.opt.critic)] if state.opt.critic else [])
    for tag, opt in groups:
        st = opt.state
        out[f"adam.{tag}.step"] = np.array([st.step], dtype=np.float32)
        for p, m, v in zip(opt.params, st.m, st.v):
            out[f"adam.{tag}.m/{inverse[id(p)]}"] = m
            out[f"adam.{tag}.v/{inverse[id(p)]}"] = v
    out["history.loss"] = np.asarray(state.history, dtype=np.float32)
    out["history.critic_loss"] = np.asarray(state.critic_history, dtype=np.float32)
    for key, arr in state.extras.items():
        out[f"extra.{key}"] = np.asarray(arr, dtype=np.float32)
    return out


def save_state(state, config, path: str | Path) -> None:
    """Write parameters, buffers, optimizer moments, history and config."""
    save_tensors(state_tensors(state, config), path)


def load_state(path: str | Path):
    """Rebuild ``(TrainState, TrainConfig)`` from :func:`save_state` output."""
    from .trainer import new_state

    t = load_tensors(path)
    try:
        config = config_from_record(_tensor_text(t["meta.config"]))
    except KeyError:
        raise FormatError("checkpoint has no meta.config record") from None
    state = new_state(config)
    model = state.model
    params = model.named_parameters()
    for name, p in params.items():
        if name not in t or t[name].shape != p.shape:
            raise FormatError(f"checkpoint tensor {name!r} missing or mis-shaped")
        p.data = t[name].copy()
    if model.codebook is not None:
        model.codebook.entries = t["codebook.entries"].copy()
        model.codebook.ema_counts = t["codebook.ema_counts"].copy()
        model.codebook.ema_sums = t["codebook.ema_sums"].copy()
    groups = [("ae", state.opt.ae)] + ([("critic", state.opt.critic)] if state.opt.critic else [])
    inverse = {id(p): n for n, p in params.items()}
    for tag, opt in groups:
        opt.state.step = int(t[f"adam.{tag}.step"][0])
        opt.state.m = [t[f"adam.{tag}.m/{inverse[id(p)]}"].copy() for p in opt.params]
        opt.state.v = [t[f"adam.{tag}.v/{inverse[id(p)]}"].copy() for p in opt.params]
    state.step = int(t["meta.step"][0])
    state.history = [float(v) for v in t["history.loss"]]
    state.critic_history = [float(v) for v in t["history.critic_loss"]]
    state.extras = {k[len("extra."):]: v.copy() for k, v in t.items() if k.startswith("extra.")}
    return state, config


def save_checkpoint(model, path: str | Path) -> None:
    """Model-only archive: parameters and codebook buffers."""
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    tensors.update(model.named_buffers())
    save_tensors(tensors, path)


def load_checkpoint(model, path: str | Path):
    """Fill ``model``'s parameters from ``path``; nothing changes on failure."""
    t = load_tensors(path)
    params = model.named_parameters()
    for name, p in params.items():
        if name not in t or t[name].shape != p.shape:
            raise FormatError(f"checkpoint tensor {name!r} missing or mis-shaped")
    for name, p in params.items():
        p.data = t[name].copy()
    if model.codebook is not None:
        model.codebook.entries = t["codebook.entries"].copy()
        model.codebook.ema_counts = t["codebook.ema_counts"].copy()
        model.codebook.ema_sums = t["codebook.ema_sums"].copy()
    return model


def save_lines_dataset(images: np.ndarray, angles: np.ndarray, path: str | Path) -> None:
    save_tensors({"images": images, "angles": angles}, path)


def load_lines_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    t = load_tensors(path)
    return t["images"], t["angles"]


# ---------------------------------------------------------------------------
# IDX (MNIST)
# ---------------------------------------------------------------------------


def parse_idx(blob: bytes, pad_to: int | None = 32) -> np.ndarray:
    """Decode an unsigned-byte IDX file.

    Image files (magic 0x803) become float32 ``(n, 1, H, W)`` in [0, 1],
    zero-padded symmetrically to ``pad_to`` pixels when given.  Label files
    (0x801) become int64 ``(n,)``.
    """
    if len(blob) < 4:
        raise FormatError("IDX header truncated")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"unexpected IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError("IDX dimension header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header != expected:
        raise FormatError(f"IDX declares {expected} bytes of data but holds {len(blob) - header}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return data.astype(np.int64)
    images = data.astype(np.float32) / 255.0
    n, h, w = dims
    if pad_to is not None and (h < pad_to or w < pad_to):
        top, left = (pad_to - h) // 2, (pad_to - w) // 2
        images = np.pad(images, ((0, 0), (top, pad_to - h - top), (left, pad_to - w - left)))
    return images[:, None]


def load_idx(path: str | Path, pad_to: int | None = 32) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw, pad_to=pad_to)


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(directory: str | Path) -> dict[str, Path]:
    """Locate the four MNIST IDX files (plain or .gz) in ``directory``."""
    directory = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for cand in (directory / stem, directory / f"{stem}.gz",
                     directory / stem.replace("-idx", ".idx"), directory / f"{stem.replace('-idx', '.idx')}.gz"):
            if cand.exists():
                found[key] = cand
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return found


def load_mnist(directory: str | Path) -> dict[str, np.ndarray]:
    return {k: load_idx(p) for k, p in find_mnist(directory).items()}


# ---------------------------------------------------------------------------
# image grids
# ---------------------------------------------------------------------------


def quantize(images: np.ndarray) -> np.ndarray:
    """``round(255 * clamp(v, 0, 1))`` as uint8."""
    return np.round(255.0 * np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def tile_images(images, columns: int, sep: int = 2) -> np.ndarray:
    """Row-major tiling with ``sep``-pixel white gutters, returned as uint8."""
    imgs = [np.asarray(im, dtype=np.float64).reshape(np.asarray(im).shape[-2:]) for im in images]
    if not imgs:
        raise ValueError("no images to tile")
    if columns < 1:
        raise ValueError("columns must be positive")
    h, w = imgs[0].shape
    cols = min(columns, len(imgs))
    rows = -(-len(imgs) // cols)
    canvas = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep), 255, dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        canvas[r * (h + sep):r * (h + sep) + h, c * (w + sep):c * (w + sep) + w] = quantize(im)
    return canvas


def _png_chunk(kind: bytes, data: bytes) -> bytes:
    return (struct.pack(">I", len(data)) + kind + data
            + struct.pack(">I", zlib.crc32(data, zlib.crc32(kind)) & 0xFFFFFFFF))


def encode_png(gray: np.ndarray) -> bytes:
    """8-bit grayscale, non-interlaced PNG."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    raw = b"".join(b"\x00" + gray[r].tobytes() for r in range(h))
    return (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) 8-bit PGM reader."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w)


def write_image_grid(images, columns: int, path: str | Path, pgm: bool = False) -> Path:
    """Tile ``images`` and write a PNG (plus a sibling .pgm when asked)."""
    grid = tile_images(images, columns)
    path = Path(path)
    _atomic_write(path, encode_png(grid))
    if pgm:
        _atomic_write(path.with_suffix(".pgm"), encode_pgm(grid))
    return path
