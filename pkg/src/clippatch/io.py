"""Dataset ingestion, patch artifacts and result files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import struct
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .core import LabeledImage, PatchSpec, as_image
from .encoders import LabelVocabulary
from .errors import IncompatibleVersionError, IngestError, IntegrityError, ParameterError
from .evaluation import EvalRecord
from .video import VideoSample

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}
MAGIC = b"CLPATCH\x00"
FORMAT_VERSION = 1


def load_image(path):
    with Image.open(path) as im:
        return as_image(np.asarray(im.convert("RGB")))


def save_image(image, path):
    arr = (image.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def class_name(dirname):
    """Caltech-256 style ``"052.cake"`` -> ``"cake"``; other names pass through."""
    m = re.match(r"^\d+\.(.+)$", dirname)
    return m.group(1) if m else dirname


def _image_files(folder):
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


@dataclass
class DatasetManifest:
    root: str
    classes: list
    class_images: dict  # class name -> list of paths relative to root
    split: dict  # relative path -> "train" | "val"
    seed: int = 0
    val_fraction: float = 0.3

    def vocabulary(self, prompt_template="{}"):
        return LabelVocabulary(tuple(self.classes), prompt_template)

    def paths(self, which):
        return [(rel, self.classes.index(c))
                for c in self.classes for rel in self.class_images[c] if self.split[rel] == which]

    def load_split(self, which):
        """Decode every image of ``which`` (``"train"`` or ``"val"``) into :class:`LabeledImage`."""
        if which not in ("train", "val"):
            raise ParameterError(f"unknown split {which!r}")
        return [LabeledImage(load_image(Path(self.root) / rel), label, rel)
                for rel, label in self.paths(which)]

    def to_dict(self):
        return {"root": self.root, "classes": self.classes, "class_images": self.class_images,
                "split": self.split, "seed": self.seed, "val_fraction": self.val_fraction}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def load_image_dataset(root, val_fraction=0.3, seed=0):
    """Index a class-per-directory image tree and split each class train/val.

    Each class contributes ``round(val_fraction * n)`` validation images,
    chosen by a generator seeded with ``seed``. Classes with fewer than two
    images stay entirely in train.
    """
    root = Path(root)
    if not 0 <= val_fraction < 1:
        raise ParameterError("val_fraction must lie in [0, 1)")
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a directory")
    classes, class_images, split = [], {}, {}
    rng = np.random.default_rng(seed)
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        files = _image_files(folder)
        if not files:
            continue
        name = class_name(folder.name)
        if name in class_images:
            raise IngestError(f"duplicate class name {name!r}")
        rels = [str(f.relative_to(root)) for f in files]
        classes.append(name)
        class_images[name] = rels
        if len(rels) < 2:
            log.warning("class %r has %d image(s); keeping it in train", name, len(rels))
            split.update({r: "train" for r in rels})
            continue
        n_val = int(round(val_fraction * len(rels)))
        val_idx = set(rng.permutation(len(rels))[:n_val].tolist())
        split.update({r: ("val" if i in val_idx else "train") for i, r in enumerate(rels)})
    if not classes:
        raise IngestError(f"no class directories with images under {root}")
    return DatasetManifest(str(root), classes, class_images, split, seed, val_fraction)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def save_patch(patch, path):
    """Write ``patch`` as magic, length-prefixed JSON header, length-prefixed little-endian payload."""
    if patch.params is not None:
        arr = patch.params.detach().cpu().numpy()
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        payload = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        shape = list(arr.shape)
    else:
        dtype, payload, shape = "<f4", b"", None
    header = {
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "created": _timestamp(),
        "kind": patch.kind,
        "shape": shape,
        "dtype": dtype,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "frame_width": patch.frame_width,
        "text": patch.text,
        "area_fraction": patch.area_fraction,
        "target_label_id": patch.target_label_id,
        "metadata": _jsonable(patch.metadata),
    }
    head = json.dumps(header, sort_keys=True).encode()
    with _open_out(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def read_artifact(path):
    """Return ``(header, payload_bytes)`` after integrity and version checks."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a patch artifact")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen + 8:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError:
        raise IntegrityError(f"{path}: corrupt header") from None
    pos += hlen
    version = header.get("format_version")
    if not isinstance(version, int):
        raise IntegrityError(f"{path}: missing format version")
    if version > FORMAT_VERSION:
        raise IncompatibleVersionError(
            f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    (plen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    payload = data[pos:pos + plen]
    if len(payload) != plen or len(data) != pos + plen:
        raise IntegrityError(f"{path}: payload length mismatch")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")
    shape = header.get("shape")
    itemsize = np.dtype(header.get("dtype", "<f4")).itemsize
    expected = int(np.prod(shape)) * itemsize if shape is not None else 0
    if expected != plen:
        raise IntegrityError(f"{path}: payload size does not match shape {shape}")
    return header, payload


def load_patch(path):
    header, payload = read_artifact(path)
    params = None
    if header["shape"] is not None:
        arr = np.frombuffer(payload, dtype=header["dtype"]).reshape(header["shape"])
        params = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    return PatchSpec(header["kind"], params, frame_width=header.get("frame_width"),
                     text=header.get("text"), area_fraction=header.get("area_fraction"),
                     target_label_id=header["target_label_id"], metadata=header["metadata"])


def _open_out(path, mode, **kw):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, mode, **kw)


def write_records(path, records):
    with _open_out(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path):
    with open(path) as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_json(path, obj):
    with _open_out(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows, columns):
    with _open_out(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({c: row.get(c, "") for c in columns})


def load_video_dir(videos_dir, captions_path):
    """One sub-directory of frame images per video, captions from a JSON ``{id: caption}`` file."""
    videos_dir = Path(videos_dir)
    with open(captions_path) as fh:
        captions = json.load(fh)
    if not videos_dir.is_dir():
        raise IngestError(f"{videos_dir} is not a directory")
    videos = []
    for folder in sorted(p for p in videos_dir.iterdir() if p.is_dir()):
        frames = _image_files(folder)
        if not frames:
            continue
        if folder.name not in captions:
            raise IngestError(f"no caption for video {folder.name!r}")
        videos.append(VideoSample([load_image(f) for f in frames], captions[folder.name], folder.name))
    if not videos:
        raise IngestError(f"no videos under {videos_dir}")
    return videos
