"""One-shot converter from MedMNIST npz archives to ZVDS containers."""

from .convert import ConversionError, ConversionManifest, convert, verify
from .zvds import FormatError

__all__ = [
    "ConversionError",
    "ConversionManifest",
    "FormatError",
    "convert",
    "verify",
]
