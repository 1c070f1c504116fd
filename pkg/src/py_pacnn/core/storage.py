"""Dataset, map and checkpoint storage for Py PACNN.

File formats:

* ``scenes.jsonl``: one annotation record per line (see ``SceneRecord``).
* ``*.pacm``: magic ``PACM``, version byte, u32 width, u32 height, then
  row-major little-endian float32 values.
* ``*.pacp``: magic ``PACP``, version byte, u32 record count, then per
  record a u16 id length, the UTF-8 id, a u8 rank, u32 dims and
  little-endian float32 values.
* ``*.pgm``: binary 8-bit grayscale, per-map min -> 0 and max -> 255.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from .exceptions import FormatError
from .geometry import AnnotatedScene, CameraModel
from .gt_maps import PerspectiveProfile, profile_from_dict
from .model import ModelParams

MAP_MAGIC = b"PACM"
CHECKPOINT_MAGIC = b"PACP"
FORMAT_VERSION = 1
META_PREFIX = "meta."
# multi-channel images are stored as one map per channel: <id>.c0.pacm, <id>.c1.pacm, ...
CHANNEL_PATTERN = ".c*.pacm"

_MAP_HEADER = struct.Struct("<4sBII")
_CHECKPOINT_HEADER = struct.Struct("<4sBI")


# --------------------------------------------------------------------------- annotations


class RLEMask(BaseModel):
    """Row-major run-length mask; runs alternate starting with False."""

    size: tuple[int, int] = Field(description="(height, width)")
    counts: list[int] = Field(description="Run lengths, first run is False")


def encode_rle(mask: np.ndarray) -> RLEMask:
    flat = np.asarray(mask, dtype=bool).ravel()
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(boundaries).tolist()
    if flat.size and flat[0]:
        counts = [0, *counts]
    return RLEMask(size=mask.shape, counts=[int(c) for c in counts])


def decode_rle(rle: RLEMask) -> np.ndarray:
    height, width = rle.size
    if sum(rle.counts) != height * width:
        raise FormatError(f"RLE runs cover {sum(rle.counts)} pixels, mask has {height * width}")
    values = np.arange(len(rle.counts)) % 2 == 1
    return np.repeat(values, rle.counts).reshape(height, width)


class SceneRecord(BaseModel):
    """One line of scenes.jsonl."""

    id: str
    width: int
    height: int
    heads: list[tuple[float, float]] = Field(default_factory=list, description="(x, y) head centers")
    roi: RLEMask | None = None
    camera: CameraModel | None = None
    horizon_row: float | None = None
    per_head_scale: list[float] | None = None
    image: str | None = Field(default=None, description="Image path relative to the dataset root")

    @classmethod
    def from_scene(cls, scene: AnnotatedScene, image: str | None = None) -> "SceneRecord":
        return cls(
            id=scene.id,
            width=scene.width,
            height=scene.height,
            heads=[(float(x), float(y)) for x, y in scene.heads],
            roi=encode_rle(scene.roi) if scene.roi is not None else None,
            camera=scene.camera,
            horizon_row=scene.horizon_row,
            per_head_scale=scene.per_head_scale.tolist() if scene.per_head_scale is not None else None,
            image=image,
        )

    def to_scene(self, image: np.ndarray | None = None) -> AnnotatedScene:
        return AnnotatedScene(
            id=self.id,
            width=self.width,
            height=self.height,
            heads=np.array(self.heads, dtype=np.float64).reshape(-1, 2),
            image=image,
            roi=decode_rle(self.roi) if self.roi is not None else None,
            camera=self.camera,
            horizon_row=self.horizon_row,
            per_head_scale=np.array(self.per_head_scale) if self.per_head_scale is not None else None,
        )


def write_annotations(path: Path, records: list[SceneRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json(exclude_none=True) + "\n")


def read_annotations(path: Path) -> list[SceneRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(SceneRecord.model_validate_json(line))
            except ValidationError as e:
                raise FormatError(f"{path}:{number}: invalid scene record: {e}") from e
    return records


# --------------------------------------------------------------------------- maps


def encode_map(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"PACM maps are 2D, got shape {values.shape}")
    height, width = values.shape
    return _MAP_HEADER.pack(MAP_MAGIC, FORMAT_VERSION, width, height) + values.astype("<f4").tobytes()


def decode_map(data: bytes) -> np.ndarray:
    if len(data) < _MAP_HEADER.size:
        raise FormatError("Truncated PACM header")
    magic, version, width, height = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise FormatError(f"Not a PACM file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported PACM version {version}")
    expected = _MAP_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise FormatError(f"PACM payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size).reshape(height, width).astype(np.float32)


def write_map(path: Path, values: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_map(values))


def read_map(path: Path) -> np.ndarray:
    return decode_map(Path(path).read_bytes())


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit PGM heatmap, min -> 0 and max -> 255 (all zeros for a constant map)."""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    scaled = np.zeros(values.shape) if high <= low else (values - low) / (high - low) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii") + pixels.tobytes())


# --------------------------------------------------------------------------- checkpoints


def encode_checkpoint(params: ModelParams) -> bytes:
    records = list(params.arrays.items())
    records += [(f"{META_PREFIX}{key}", np.array([value])) for key, value in sorted(params.meta.items())]

    chunks = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(records))]
    for record_id, array in records:
        encoded_id = record_id.encode("utf-8")
        array = np.asarray(array)
        chunks.append(struct.pack("<H", len(encoded_id)) + encoded_id)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.astype("<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes) -> ModelParams:
    try:
        magic, version, count = _CHECKPOINT_HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"Not a PACP checkpoint (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise FormatError(f"Unsupported PACP version {version}")

        offset = _CHECKPOINT_HEADER.size
        arrays: dict[str, np.ndarray] = {}
        meta: dict[str, float] = {}
        for _ in range(count):
            (id_length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            record_id = data[offset : offset + id_length].decode("utf-8")
            offset += id_length
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(data):
                raise FormatError(f"Checkpoint record {record_id} is truncated")
            array = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size

            if record_id.startswith(META_PREFIX):
                key = record_id[len(META_PREFIX) :]
                if key in meta:
                    raise FormatError(f"Duplicate checkpoint record id {record_id}")
                meta[key] = float(array.ravel()[0])
            else:
                if record_id in arrays:
                    raise FormatError(f"Duplicate checkpoint record id {record_id}")
                arrays[record_id] = array
    except FormatError:
        raise
    except (struct.error, ValueError) as e:
        raise FormatError(f"Malformed checkpoint: {e}") from e

    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last checkpoint record")
    return ModelParams(arrays, meta)


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_checkpoint(path: Path, params: ModelParams) -> str:
    """Write a PACP checkpoint and return its id (SHA-256 of the bytes)."""
    data = encode_checkpoint(params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return checkpoint_id(data)


def read_checkpoint(path: Path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------- dataset directories


class DatasetStore:
    """Reads and writes one dataset directory.

    Layout: ``scenes.jsonl``, ``images/<id>.pacm`` and, after GT generation,
    ``gt/<id>.density.pacm``, ``gt/<id>.perspective.pacm``,
    ``gt/perspective_fits.jsonl`` and ``gt/summary.json``.
    """

    def __init__(self, root: Path):
        """Initialize the store rooted at a dataset directory."""
        self.root = Path(root)
        self.logger = logger.bind(name="DatasetStore")

    @property
    def annotations_path(self) -> Path:
        return self.root / "scenes.jsonl"

    @property
    def gt_dir(self) -> Path:
        return self.root / "gt"

    def exists(self) -> bool:
        return self.annotations_path.exists()

    def write_scenes(self, scenes: list[AnnotatedScene]) -> None:
        records = []
        for scene in scenes:
            image_path = None
            if scene.image is not None:
                image_path = self._write_image(scene.id, scene.image)
            records.append(SceneRecord.from_scene(scene, image_path))
        write_annotations(self.annotations_path, records)
        self.logger.info(f"Wrote {len(records)} scenes to {self.root}")

    def read_scenes(self, with_images: bool = True) -> list[AnnotatedScene]:
        if not self.exists():
            raise FileNotFoundError(f"No scenes.jsonl in {self.root}")
        scenes = []
        for record in read_annotations(self.annotations_path):
            image = self._read_image(record.image) if with_images and record.image else None
            scenes.append(record.to_scene(image))
        self.logger.debug(f"Read {len(scenes)} scenes from {self.root}")
        return scenes

    def _write_image(self, scene_id: str, image: np.ndarray) -> str:
        image = np.asarray(image)
        if image.ndim == 2:
            image = image[None]
        if image.shape[0] == 1:
            relative = f"images/{scene_id}.pacm"
            write_map(self.root / relative, image[0])
            return relative
        for c, channel in enumerate(image):
            write_map(self.root / f"images/{scene_id}.c{c}.pacm", channel)
        return f"images/{scene_id}{CHANNEL_PATTERN}"

    def _read_image(self, relative: str) -> np.ndarray:
        if relative.endswith(CHANNEL_PATTERN):
            stem = relative.removesuffix(CHANNEL_PATTERN)
            channels = []
            while (path := self.root / f"{stem}.c{len(channels)}.pacm").exists():
                channels.append(read_map(path))
            if not channels:
                raise FileNotFoundError(f"No channel maps for {relative} in {self.root}")
            return np.stack(channels)
        return read_map(self.root / relative)[None]

    def write_ground_truth(self, scene_id: str, density: np.ndarray, perspective: np.ndarray) -> None:
        write_map(self.gt_dir / f"{scene_id}.density.pacm", density)
        write_map(self.gt_dir / f"{scene_id}.perspective.pacm", perspective)

    def read_density(self, scene_id: str) -> np.ndarray:
        return read_map(self.gt_dir / f"{scene_id}.density.pacm")

    def read_perspective(self, scene_id: str) -> np.ndarray:
        return read_map(self.gt_dir / f"{scene_id}.perspective.pacm")

    def write_fits(self, fits: dict[str, PerspectiveProfile]) -> None:
        self.gt_dir.mkdir(parents=True, exist_ok=True)
        with open(self.gt_dir / "perspective_fits.jsonl", "w", encoding="utf-8") as f:
            for scene_id, profile in fits.items():
                f.write(json.dumps({"id": scene_id, **profile.to_dict()}) + "\n")

    def read_fits(self) -> dict[str, PerspectiveProfile]:
        path = self.gt_dir / "perspective_fits.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"No perspective fits in {self.gt_dir}; run gen-gt first")
        fits = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    fits[record.pop("id")] = profile_from_dict(record)
        return fits

    def write_summary(self, summary: dict) -> None:
        self.gt_dir.mkdir(parents=True, exist_ok=True)
        with open(self.gt_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)

    def read_summary(self) -> dict:
        path = self.gt_dir / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"No GT summary in {self.gt_dir}; run gen-gt first")
        with open(path, encoding="utf-8") as f:
            return json.load(f)


def write_table(path: Path, table: pd.DataFrame) -> None:
    """Write a run table as JSON lines (.jsonl) or CSV (anything else)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".jsonl":
        table.to_json(path, orient="records", lines=True)
    else:
        table.to_csv(path, index=False)
