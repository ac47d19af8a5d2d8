"""Minimal writer and header parser for the ZVDS container format.

Deliberately self-contained: this tool only has to emit the documented
byte layout and re-parse headers, so it carries its own codec instead
of depending on the training library.  Layout: 4-byte magic "ZVDS",
then little-endian (version u32, n u32, height u16, width u16,
channels u8, class_count u16, task u8), then n*h*w*c raw pixel bytes,
then n label bytes.
"""

import struct

import numpy as np

MAGIC = b"ZVDS"
FORMAT_VERSION = 1
HEADER = "<IIHHBHB"
HEADER_SIZE = struct.calcsize(HEADER)

TASK_CODES = {"binary": 0, "multiclass": 1}
TASK_NAMES = {code: name for name, code in TASK_CODES.items()}


class FormatError(ValueError):
    """A container file that cannot be parsed."""


def write_container(path, images: np.ndarray, labels: np.ndarray, class_count: int, task_kind: str) -> None:
    n, height, width, channels = images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                HEADER,
                FORMAT_VERSION,
                n,
                height,
                width,
                channels,
                class_count,
                TASK_CODES[task_kind],
            )
        )
        fh.write(images.tobytes())
        fh.write(labels.tobytes())


def parse_header(blob: bytes) -> dict:
    """Parse and validate a whole container, returning the header fields.

    The full byte count is checked so truncated or padded files are
    rejected, but pixel data itself is never materialised here.
    """
    if len(blob) < 4:
        raise FormatError(f"file is {len(blob)} bytes, too short for magic")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 4 + HEADER_SIZE:
        raise FormatError(f"truncated header: need {4 + HEADER_SIZE} bytes, have {len(blob)}")
    version, n, height, width, channels, class_count, task_code = struct.unpack_from(HEADER, blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if task_code not in TASK_NAMES:
        raise FormatError(f"unknown task kind code {task_code}")
    need = 4 + HEADER_SIZE + n * height * width * channels + n
    if len(blob) != need:
        raise FormatError(f"expected {need} bytes, have {len(blob)}")
    return {
        "n": n,
        "height": height,
        "width": width,
        "channels": channels,
        "class_count": class_count,
        "task_kind": TASK_NAMES[task_code],
    }
