"""Archive-to-container conversion and emitted-file verification.

MedMNIST archives are npz files holding ``{split}_images`` and
``{split}_labels`` arrays per split.  Conversion is a straight field
mapping: pixels are copied byte for byte (no resizing, no rescaling),
labels are flattened to unsigned bytes, and the class count is read
off the label array.  Each emitted file gets a JSON manifest sidecar
recording its sha256 so later verification can detect corruption.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from .zvds import FormatError, parse_header, write_container

MANIFEST_SUFFIX = ".manifest.json"
SPLIT_NAMES = ("train", "val", "test")


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class ConversionManifest:
    source: str
    split: str
    resolution: Tuple[int, int]  # (height, width), as found in the archive
    output: str
    sha256: str

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "split": self.split,
            "resolution": list(self.resolution),
            "output": self.output,
            "sha256": self.sha256,
        }


def manifest_path(out) -> Path:
    return Path(str(out) + MANIFEST_SUFFIX)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_arrays(archive, split: str):
    if split not in SPLIT_NAMES:
        raise ConversionError(f"unknown split {split!r}, expected one of {SPLIT_NAMES}")
    with np.load(archive) as npz:
        wanted = (f"{split}_images", f"{split}_labels")
        missing = [key for key in wanted if key not in npz.files]
        if missing:
            raise ConversionError(f"archive is missing arrays: {', '.join(missing)}")
        return npz[wanted[0]], npz[wanted[1]]


def _shape_images(images: np.ndarray) -> np.ndarray:
    if images.dtype != np.uint8:
        raise ConversionError(f"images are {images.dtype}, expected uint8")
    if images.ndim == 3:  # grayscale archives omit the channel axis
        images = images[..., np.newaxis]
    if images.ndim != 4:
        raise ConversionError(
            f"images have shape {images.shape}, expected (n, h, w) or (n, h, w, c)"
        )
    if images.shape[3] not in (1, 3):
        raise ConversionError(f"unsupported channel count {images.shape[3]}, expected 1 or 3")
    return np.ascontiguousarray(images)


def _shape_labels(labels: np.ndarray, n: int) -> Tuple[np.ndarray, int]:
    if not np.issubdtype(labels.dtype, np.integer):
        raise ConversionError(f"labels are {labels.dtype}, expected an integer type")
    flat = labels.reshape(-1)
    if flat.size != n:
        raise ConversionError(f"{n} images but {flat.size} labels")
    if n == 0:
        raise ConversionError("split is empty")
    low, high = int(flat.min()), int(flat.max())
    if low < 0:
        raise ConversionError(f"negative label {low}")
    class_count = high + 1
    if class_count > 256:
        raise ConversionError(f"labels reach {high}: more than 256 classes")
    if class_count < 2:
        raise ConversionError("split contains a single class, need at least 2")
    return flat.astype(np.uint8), class_count


def convert(archive, split: str, out, task: Optional[str] = None) -> ConversionManifest:
    images, labels = _load_arrays(archive, split)
    images = _shape_images(images)
    labels, class_count = _shape_labels(labels, images.shape[0])
    task_kind = task or ("binary" if class_count == 2 else "multiclass")
    if task_kind == "binary" and class_count != 2:
        raise ConversionError(f"binary task needs exactly 2 classes, found {class_count}")
    write_container(out, images, labels, class_count, task_kind)
    manifest = ConversionManifest(
        source=str(archive),
        split=split,
        resolution=(images.shape[1], images.shape[2]),
        output=str(out),
        sha256=file_sha256(out),
    )
    manifest_path(out).write_text(json.dumps(manifest.to_json_dict(), indent=2) + "\n")
    return manifest


def verify(path, write: Callable[[str], None] = print) -> bool:
    """Re-parse a container header, echo its fields, recheck the checksum.

    Returns False when the recorded manifest checksum no longer matches
    the file; malformed files raise FormatError instead.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = parse_header(blob)
    write(
        "n={n} H={height} W={width} C={channels} "
        "class_count={class_count} task={task_kind}".format(**fields)
    )
    digest = hashlib.sha256(blob).hexdigest()
    write(f"sha256={digest}")
    sidecar = manifest_path(path)
    if not sidecar.exists():
        write("no manifest sidecar, nothing to compare against")
        return True
    recorded = json.loads(sidecar.read_text())["sha256"]
    if recorded != digest:
        write(f"checksum mismatch: manifest records {recorded}, file hashes to {digest}")
        return False
    write("checksum matches manifest")
    return True
