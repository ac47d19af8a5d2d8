"""Dataset container, resizing, few-shot sampling, synthetic tasks.

The on-disk container is a purpose-built little-endian binary ("ZVDS")
so loading needs no third-party ingestion stack.  Images are stored as
raw unsigned bytes exactly as given; all resizing and normalisation
happens downstream at model-input time.

Two synthetic generators cover the opposite ends of the layout
spectrum: "patch-histogram" tasks are solvable from local intensity
statistics alone, "layout" tasks only from where patches sit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng

MAGIC = b"ZVDS"
FORMAT_VERSION = 1

TASK_BINARY = "binary"
TASK_MULTICLASS = "multiclass"
_TASK_CODES = {TASK_BINARY: 0, TASK_MULTICLASS: 1}
_TASK_NAMES = {code: name for name, code in _TASK_CODES.items()}


class FormatError(ValueError):
    """A container file that cannot be parsed; messages carry byte offsets."""


class SamplingError(ValueError):
    pass


@dataclass
class DatasetSplit:
    images: np.ndarray  # [n, H, W, C] uint8
    labels: np.ndarray  # [n] uint8
    class_count: int
    task_kind: str

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise FormatError(f"images must be [n, H, W, C], got {self.images.shape}")
        n, _, _, c = self.images.shape
        if c not in (1, 3):
            raise FormatError(f"channel count must be 1 or 3, got {c}")
        if self.labels.shape != (n,):
            raise FormatError(
                f"{n} images but {self.labels.shape[0]} labels"
            )
        if not 2 <= self.class_count <= 256:
            raise FormatError(f"class_count {self.class_count} outside [2, 256]")
        if self.task_kind not in _TASK_CODES:
            raise FormatError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == TASK_BINARY and self.class_count != 2:
            raise FormatError(
                f"binary task with class_count {self.class_count}"
            )
        if n and int(self.labels.max()) >= self.class_count:
            bad = int(self.labels.max())
            raise FormatError(
                f"label {bad} out of range for class_count {self.class_count}"
            )

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices) -> "DatasetSplit":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetSplit(
            images=self.images[idx],
            labels=self.labels[idx],
            class_count=self.class_count,
            task_kind=self.task_kind,
        )


def save_container(split: DatasetSplit, path) -> None:
    n, height, width, channels = split.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                "<IIHHBHB",
                FORMAT_VERSION,
                n,
                height,
                width,
                channels,
                split.class_count,
                _TASK_CODES[split.task_kind],
            )
        )
        fh.write(split.images.tobytes())
        fh.write(split.labels.tobytes())


def load_container(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<IIHHBHB")
    if len(blob) < 4:
        raise FormatError(f"file is {len(blob)} bytes, too short for magic at byte 0")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at byte 0")
    if len(blob) < 4 + header:
        raise FormatError(
            f"truncated header: need {4 + header} bytes, have {len(blob)}"
        )
    version, n, height, width, channels, class_count, task_code = struct.unpack_from(
        "<IIHHBHB", blob, 4
    )
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if task_code not in _TASK_NAMES:
        raise FormatError(f"unknown task kind code {task_code} at byte {4 + header - 1}")
    image_bytes = n * height * width * channels
    offset = 4 + header
    need = offset + image_bytes + n
    if len(blob) != need:
        raise FormatError(
            f"expected {need} bytes, have {len(blob)}: "
            f"missing {need - len(blob)} at byte {len(blob)}"
            if len(blob) < need
            else f"expected {need} bytes, have {len(blob)}: {len(blob) - need} trailing"
        )
    images = np.frombuffer(blob, dtype=np.uint8, count=image_bytes, offset=offset)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset + image_bytes)
    return DatasetSplit(
        images=images.reshape(n, height, width, channels).copy(),
        labels=labels.copy(),
        class_count=class_count,
        task_kind=_TASK_NAMES[task_code],
    )


# ---------------------------------------------------------------------------
# resizing


def _axis_positions(src: int, dst: int) -> np.ndarray:
    # corner-aligned sampling: output endpoints hit input endpoints
    if dst == 1 or src == 1:
        return np.zeros(dst)
    return np.linspace(0.0, src - 1.0, dst)


def _interp_axis(arr: np.ndarray, dst: int) -> np.ndarray:
    """Linear interpolation along axis 0."""
    src = arr.shape[0]
    if src == dst:
        return arr.astype(np.float64)
    pos = _axis_positions(src, dst)
    lo = np.minimum(pos.astype(np.int64), max(src - 2, 0))
    frac = (pos - lo).reshape((dst,) + (1,) * (arr.ndim - 1))
    hi = np.minimum(lo + 1, src - 1)
    a = arr[lo].astype(np.float64)
    b = arr[hi].astype(np.float64)
    return a * (1.0 - frac) + b * frac


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """[H, W, C] of any numeric dtype -> [target, target, C] float64 in [0, 255]."""
    if image.ndim != 3:
        raise ValueError(f"expected [H, W, C], got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1 or target < 1:
        raise ValueError("degenerate resize")
    out = _interp_axis(image, target)
    out = _interp_axis(out.transpose(1, 0, 2), target).transpose(1, 0, 2)
    return np.clip(out, 0.0, 255.0)


def to_model_input(image: np.ndarray, input_size: int) -> np.ndarray:
    """Raw uint8 image -> float64 [S, S, C] in [0, 1] for the model."""
    resized = resize_bilinear(image, input_size)
    return resized / 255.0


# ---------------------------------------------------------------------------
# few-shot sampling


@dataclass
class FewShotSample:
    source: DatasetSplit
    shots: int
    seed: int
    indices: np.ndarray

    def subset(self) -> DatasetSplit:
        return self.source.subset(self.indices)


def few_shot_sample(split: DatasetSplit, k: int, seed: int) -> FewShotSample:
    """Stratified draw of min(k, available) per class, without replacement.

    Uses the package's own generator, one stream for the whole draw, so
    the selected index set is a pure function of (split, k, seed).
    """
    if k < 1:
        raise SamplingError(f"shots per class must be >= 1, got {k}")
    rng = Rng(seed)
    chosen = []
    for cls in range(split.class_count):
        pool = np.flatnonzero(split.labels == cls)
        if pool.size == 0:
            raise SamplingError(f"class {cls} absent from split")
        pool = list(pool)
        take = min(k, len(pool))
        # partial Fisher-Yates: first `take` slots are the draw
        for j in range(take):
            swap = j + rng.below(len(pool) - j)
            pool[j], pool[swap] = pool[swap], pool[j]
        chosen.extend(sorted(pool[:take]))
    return FewShotSample(
        source=split, shots=k, seed=seed, indices=np.array(chosen, dtype=np.int64)
    )


# ---------------------------------------------------------------------------
# synthetic tasks

MODE_HISTOGRAM = "patch-histogram"
MODE_LAYOUT = "layout"

# per-image mean intensity for histogram class c; >= 30/255 margins by design
_LEVEL_LO = 56.0
_LEVEL_HI = 208.0


def _histogram_levels(class_count: int) -> np.ndarray:
    return np.linspace(_LEVEL_LO, _LEVEL_HI, class_count)


def _histogram_image(rng: Rng, cls: int, size: int, class_count: int, noise: float) -> np.ndarray:
    """Class sets both the brightness level and the dominant colour channel,
    uniformly over space; nothing positional distinguishes classes."""
    level = _histogram_levels(class_count)[cls]
    # channel weights average to 1 so the per-image mean stays at `level`
    weights = np.full(3, 0.4)
    weights[cls % 3] = 2.2
    base = level * weights  # one mean per channel
    jitter = np.array(rng.uniform_list(size * size * 3)).reshape(size, size, 3)
    img = base.reshape(1, 1, 3) + (2.0 * jitter - 1.0) * noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _layout_permutations(class_count: int) -> list:
    """One tile arrangement per class: rotate the four quadrant groups."""
    if class_count > 4:
        raise ValueError("layout mode supports at most 4 classes")
    return [[(g + c) % 4 for g in range(4)] for c in range(class_count)]


def _layout_image(rng: Rng, cls: int, size: int, class_count: int) -> np.ndarray:
    """Sixteen distinct constant tiles; the class decides which quadrant each
    brightness group occupies.  Tiles inside a quadrant are shuffled per
    image, so images vary while every class shares one patch multiset."""
    if size % 4 != 0:
        raise ValueError(f"layout size must be divisible by 4, got {size}")
    tile = size // 4
    levels = np.linspace(8.0, 248.0, 16).round().astype(np.uint8)
    quadrant_of_group = _layout_permutations(class_count)[cls]
    img = np.zeros((size, size, 1), dtype=np.uint8)
    quadrant_corner = [(0, 0), (0, 2), (2, 0), (2, 2)]  # in tile units
    for group in range(4):
        members = list(levels[group * 4 : (group + 1) * 4])
        rng.shuffle(members)
        qy, qx = quadrant_corner[quadrant_of_group[group]]
        slots = [(qy, qx), (qy, qx + 1), (qy + 1, qx), (qy + 1, qx + 1)]
        for (ty, tx), value in zip(slots, members):
            img[
                ty * tile : (ty + 1) * tile,
                tx * tile : (tx + 1) * tile,
                0,
            ] = value
    return img


def make_synthetic(
    class_count: int,
    n_per_class: int,
    size: int,
    mode: str,
    seed: int = 0,
    noise: float = 12.0,
) -> DatasetSplit:
    if class_count < 2:
        raise ValueError("need at least two classes")
    if n_per_class < 1 or size < 4:
        raise ValueError("degenerate synthetic spec")
    rng = Rng(seed)
    images, labels = [], []
    for cls in range(class_count):
        for _ in range(n_per_class):
            if mode == MODE_HISTOGRAM:
                images.append(_histogram_image(rng, cls, size, class_count, noise))
            elif mode == MODE_LAYOUT:
                images.append(_layout_image(rng, cls, size, class_count))
            else:
                raise ValueError(f"unknown synthetic mode {mode!r}")
            labels.append(cls)
    return DatasetSplit(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.uint8),
        class_count=class_count,
        task_kind=TASK_BINARY if class_count == 2 else TASK_MULTICLASS,
    )
