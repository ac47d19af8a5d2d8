"""Compact vision transformer over unordered patch sets.

An image is cut into non-overlapping patches, each patch is linearly
embedded, and a stack of pre-norm attention blocks mixes the resulting
rows.  Nothing in the default path depends on patch order: there is no
positional code, pooling is symmetric, and attention itself is
permutation-equivariant.  Order sensitivity can be reintroduced on
purpose (learned positional rows, a class token) for ablation runs.

Blocks may shrink the width from one stage to the next.  A skip across
a width change is carried by a learned projection that starts at zero,
so every block behaves as an identity-plus-update at initialisation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional

import numpy as np

from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    max_rows,
    mean_rows,
    permute_rows,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax,
    transpose,
)

POOLING_KINDS = ("gap", "max", "attention", "cls")

MAGIC = b"ZVIT"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """A model configuration that cannot be built."""


class ParamsError(ValueError):
    """A parameter file that does not match the expected layout."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    channels: int
    patch_size: int
    unit_dims: tuple
    mlp_dims: tuple
    heads: int
    num_classes: int
    pooling: str = "gap"
    use_positional: bool = False
    use_adaptive_residual: bool = True
    shuffle_patches: bool = False

    def __post_init__(self):
        object.__setattr__(self, "unit_dims", tuple(int(d) for d in self.unit_dims))
        object.__setattr__(self, "mlp_dims", tuple(int(d) for d in self.mlp_dims))
        if self.input_size <= 0 or self.patch_size <= 0:
            raise ConfigError("input_size and patch_size must be positive")
        if self.input_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide input_size {self.input_size}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not self.unit_dims:
            raise ConfigError("unit_dims must name at least one block width")
        if any(d <= 0 for d in self.unit_dims):
            raise ConfigError("unit_dims must be positive")
        if not self.mlp_dims or any(d <= 0 for d in self.mlp_dims):
            raise ConfigError("mlp_dims must be a non-empty list of positive widths")
        if len(self.mlp_dims) > len(self.unit_dims):
            raise ConfigError("more mlp_dims than blocks")
        if self.heads <= 0:
            raise ConfigError("heads must be positive")
        for d in self.unit_dims:
            if d % self.heads != 0:
                raise ConfigError(f"width {d} is not divisible by {self.heads} heads")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def patch_count(self) -> int:
        side = self.input_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def block_io(self) -> list:
        """(d_in, d_out) per block; the first block keeps its width."""
        dims = self.unit_dims
        return [(dims[max(i - 1, 0)], dims[i]) for i in range(len(dims))]

    def hidden_dims(self) -> tuple:
        """mlp_dims padded to one hidden width per block."""
        padded = list(self.mlp_dims)
        while len(padded) < len(self.unit_dims):
            padded.append(padded[-1])
        return tuple(padded)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_size": self.input_size,
                "channels": self.channels,
                "patch_size": self.patch_size,
                "unit_dims": list(self.unit_dims),
                "mlp_dims": list(self.mlp_dims),
                "heads": self.heads,
                "num_classes": self.num_classes,
                "pooling": self.pooling,
                "use_positional": self.use_positional,
                "use_adaptive_residual": self.use_adaptive_residual,
                "shuffle_patches": self.shuffle_patches,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config JSON must be an object")
        required = {
            "input_size",
            "channels",
            "patch_size",
            "unit_dims",
            "mlp_dims",
            "heads",
            "num_classes",
        }
        missing = required - raw.keys()
        if missing:
            raise ConfigError(f"config missing fields: {sorted(missing)}")
        known = required | {
            "pooling",
            "use_positional",
            "use_adaptive_residual",
            "shuffle_patches",
        }
        unknown = raw.keys() - known
        if unknown:
            raise ConfigError(f"config has unknown fields: {sorted(unknown)}")
        return cls(**raw)


def baseline_config(num_classes: int, channels: int = 3, **overrides) -> ModelConfig:
    """The reference configuration: 64px input, 16px patches, two blocks."""
    base = dict(
        input_size=64,
        channels=channels,
        patch_size=16,
        unit_dims=(128, 64),
        mlp_dims=(128, 64),
        heads=8,
        num_classes=num_classes,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameter layout


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    res_proj: Optional[Tensor]
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff1_weight: Tensor
    ff1_bias: Tensor
    ff2_weight: Tensor
    ff2_bias: Tensor


@dataclass
class ModelParams:
    patch_weight: Tensor
    patch_bias: Tensor
    positional: Optional[Tensor]
    cls_token: Optional[Tensor]
    blocks: list = field(default_factory=list)
    attn_query: Optional[Tensor] = None
    head_weight: Tensor = None
    head_bias: Tensor = None

    def named_tensors(self) -> Iterator:
        """Canonical (name, tensor) walk shared by init, optimisers and I/O."""
        yield "patch.weight", self.patch_weight
        yield "patch.bias", self.patch_bias
        if self.positional is not None:
            yield "positional", self.positional
        if self.cls_token is not None:
            yield "cls_token", self.cls_token
        for i, b in enumerate(self.blocks):
            p = f"block{i}."
            yield p + "ln1.gain", b.ln1_gain
            yield p + "ln1.bias", b.ln1_bias
            yield p + "q.weight", b.q_weight
            yield p + "q.bias", b.q_bias
            yield p + "k.weight", b.k_weight
            yield p + "k.bias", b.k_bias
            yield p + "v.weight", b.v_weight
            yield p + "v.bias", b.v_bias
            yield p + "out.weight", b.out_weight
            yield p + "out.bias", b.out_bias
            if b.res_proj is not None:
                yield p + "res_proj", b.res_proj
            yield p + "ln2.gain", b.ln2_gain
            yield p + "ln2.bias", b.ln2_bias
            yield p + "ff1.weight", b.ff1_weight
            yield p + "ff1.bias", b.ff1_bias
            yield p + "ff2.weight", b.ff2_weight
            yield p + "ff2.bias", b.ff2_bias
        if self.attn_query is not None:
            yield "attn_pool.query", self.attn_query
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def trainable(self) -> list:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.trainable():
            t.zero_grad()


def component_layout(config: ModelConfig) -> list:
    """(name, shape, init kind) for every parameter, in canonical order.

    Kinds: "glorot" (fan from the matrix shape), "vector_glorot" (fan_in =
    length, fan_out = 1), "zeros", "ones", "table" (N(0, 0.02^2) rows).
    """
    d0 = config.unit_dims[0]
    out = [
        ("patch.weight", (config.patch_dim, d0), "glorot"),
        ("patch.bias", (d0,), "zeros"),
    ]
    if config.use_positional:
        out.append(("positional", (config.patch_count, d0), "table"))
    if config.pooling == "cls":
        out.append(("cls_token", (1, d0), "table"))
    hidden = config.hidden_dims()
    for i, (d_in, d_out) in enumerate(config.block_io()):
        p = f"block{i}."
        out += [
            (p + "ln1.gain", (d_in,), "ones"),
            (p + "ln1.bias", (d_in,), "zeros"),
            (p + "q.weight", (d_in, d_out), "glorot"),
            (p + "q.bias", (d_out,), "zeros"),
            (p + "k.weight", (d_in, d_out), "glorot"),
            (p + "k.bias", (d_out,), "zeros"),
            (p + "v.weight", (d_in, d_out), "glorot"),
            (p + "v.bias", (d_out,), "zeros"),
            (p + "out.weight", (d_out, d_out), "glorot"),
            (p + "out.bias", (d_out,), "zeros"),
        ]
        if d_in != d_out and config.use_adaptive_residual:
            out.append((p + "res_proj", (d_out, d_in), "zeros"))
        out += [
            (p + "ln2.gain", (d_out,), "ones"),
            (p + "ln2.bias", (d_out,), "zeros"),
            (p + "ff1.weight", (d_out, hidden[i]), "glorot"),
            (p + "ff1.bias", (hidden[i],), "zeros"),
            (p + "ff2.weight", (hidden[i], d_out), "glorot"),
            (p + "ff2.bias", (d_out,), "zeros"),
        ]
    d_last = config.unit_dims[-1]
    if config.pooling == "attention":
        out.append(("attn_pool.query", (d_last,), "vector_glorot"))
    out += [
        ("head.weight", (d_last, config.num_classes), "glorot"),
        ("head.bias", (config.num_classes,), "zeros"),
    ]
    return out


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in component_layout(config))


def param_breakdown(config: ModelConfig) -> dict:
    return {name: int(np.prod(shape)) for name, shape, _ in component_layout(config)}


def format_breakdown(config: ModelConfig) -> str:
    rows = param_breakdown(config)
    width = max(len(n) for n in rows)
    lines = [f"{name:<{width}}  {size:>8d}" for name, size in rows.items()]
    lines.append(f"{'total':<{width}}  {sum(rows.values()):>8d}")
    return "\n".join(lines)


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    flat = np.array([(2.0 * rng.uniform() - 1.0) * limit for _ in range(n)])
    return flat.reshape(shape)


def _init_array(rng: Rng, shape, kind: str) -> np.ndarray:
    if kind == "glorot":
        return _glorot(rng, shape[0], shape[1], shape)
    if kind == "vector_glorot":
        return _glorot(rng, shape[0], 1, shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "table":
        n = int(np.prod(shape))
        flat = np.array([0.02 * rng.normal() for _ in range(n)])
        return flat.reshape(shape)
    raise AssertionError(f"unknown init kind {kind}")


def _assemble(config: ModelConfig, tensors: dict) -> ModelParams:
    def grab(name):
        return tensors.get(name)

    blocks = []
    for i in range(len(config.unit_dims)):
        p = f"block{i}."
        blocks.append(
            BlockParams(
                ln1_gain=grab(p + "ln1.gain"),
                ln1_bias=grab(p + "ln1.bias"),
                q_weight=grab(p + "q.weight"),
                q_bias=grab(p + "q.bias"),
                k_weight=grab(p + "k.weight"),
                k_bias=grab(p + "k.bias"),
                v_weight=grab(p + "v.weight"),
                v_bias=grab(p + "v.bias"),
                out_weight=grab(p + "out.weight"),
                out_bias=grab(p + "out.bias"),
                res_proj=grab(p + "res_proj"),
                ln2_gain=grab(p + "ln2.gain"),
                ln2_bias=grab(p + "ln2.bias"),
                ff1_weight=grab(p + "ff1.weight"),
                ff1_bias=grab(p + "ff1.bias"),
                ff2_weight=grab(p + "ff2.weight"),
                ff2_bias=grab(p + "ff2.bias"),
            )
        )
    return ModelParams(
        patch_weight=grab("patch.weight"),
        patch_bias=grab("patch.bias"),
        positional=grab("positional"),
        cls_token=grab("cls_token"),
        blocks=blocks,
        attn_query=grab("attn_pool.query"),
        head_weight=grab("head.weight"),
        head_bias=grab("head.bias"),
    )


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Fresh parameters.  Zero-size kinds ("zeros", "ones") draw nothing
    from the stream, so toggling a zero-initialised component cannot shift
    any other tensor's values."""
    tensors = {}
    for name, shape, kind in component_layout(config):
        tensors[name] = Tensor(_init_array(rng, shape, kind), requires_grad=True)
    return _assemble(config, tensors)


# ---------------------------------------------------------------------------
# forward pieces


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[S, S, C] image -> [N, patch_size^2 * C] rows, row-major grid order.

    Within a patch, pixels are flattened row-major with channels innermost.
    Treated as input preprocessing: no gradient flows back to pixels.
    """
    if image.data.ndim != 3:
        raise ShapeError(f"patchify expects [S, S, C], got {image.shape}")
    side, side2, channels = image.shape
    if side != side2:
        raise ShapeError(f"patchify expects a square image, got {image.shape}")
    if side % patch_size != 0:
        raise ConfigError(f"patch size {patch_size} does not divide side {side}")
    grid = side // patch_size
    arr = (
        image.data.reshape(grid, patch_size, grid, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid * grid, patch_size * patch_size * channels)
    )
    return Tensor(arr)


def embed(patches: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    z = add(matmul(patches, params.patch_weight), params.patch_bias)
    if config.use_positional:
        if params.positional is None:
            raise ConfigError("config asks for positional rows but params have none")
        z = add(z, params.positional)
    if config.pooling == "cls":
        if params.cls_token is None:
            raise ConfigError("cls pooling needs a cls token")
        # the class token never receives a positional row
        z = concat_rows([params.cls_token, z])
    return z


def adaptive_residual(x: Tensor, y: Tensor, proj: Optional[Tensor] = None) -> Tensor:
    """Skip connection that survives width changes.

    Same width: plain x + y.  Different widths with a projection:
    x @ proj^T + y, where proj is [d_out, d_in] and starts at zero so the
    block output equals y at init.  Different widths without a projection
    (the ablated form): the skip is dropped and y passes through alone.
    """
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"residual over {x.shape} and {y.shape}")
    if x.shape[1] == y.shape[1]:
        return add(x, y)
    if proj is None:
        return y
    if proj.shape != (y.shape[1], x.shape[1]):
        raise ShapeError(
            f"projection {proj.shape} cannot map {x.shape[1]} -> {y.shape[1]}"
        )
    return add(matmul(x, transpose(proj)), y)


def attention_block(
    z: Tensor, bp: BlockParams, heads: int, use_adaptive_residual: bool = True
) -> Tensor:
    d_in = bp.q_weight.shape[0]
    d_out = bp.q_weight.shape[1]
    if z.shape[1] != d_in:
        raise ShapeError(f"block expects width {d_in}, got {z.shape[1]}")
    if use_adaptive_residual and d_in != d_out and bp.res_proj is None:
        raise ConfigError("width-changing block is missing its residual projection")
    head_dim = d_out // heads

    normed = layer_norm(z, bp.ln1_gain, bp.ln1_bias)
    q = add(matmul(normed, bp.q_weight), bp.q_bias)
    k = add(matmul(normed, bp.k_weight), bp.k_bias)
    v = add(matmul(normed, bp.v_weight), bp.v_bias)

    mixed_heads = []
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        att = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), axis=-1)
        mixed_heads.append(matmul(att, vh))
    mixed = mixed_heads[0] if heads == 1 else concat_cols(mixed_heads)
    attended = add(matmul(mixed, bp.out_weight), bp.out_bias)

    proj = bp.res_proj if use_adaptive_residual else None
    carried = adaptive_residual(z, attended, proj)

    normed2 = layer_norm(carried, bp.ln2_gain, bp.ln2_bias)
    hidden = gelu(add(matmul(normed2, bp.ff1_weight), bp.ff1_bias))
    ff = add(matmul(hidden, bp.ff2_weight), bp.ff2_bias)
    # widths agree here, so this is always the plain sum
    return adaptive_residual(carried, ff)


def pool(z: Tensor, params: ModelParams, pooling: str) -> Tensor:
    """[M, d] rows -> [d] summary."""
    d = z.shape[1]
    if pooling == "gap":
        return mean_rows(z)
    if pooling == "max":
        return max_rows(z)
    if pooling == "attention":
        if params.attn_query is None:
            raise ConfigError("attention pooling needs a query vector")
        q = reshape(params.attn_query, (d, 1))
        scores = scale(matmul(z, q), 1.0 / math.sqrt(d))
        weights = softmax(scores, axis=0)
        return reshape(matmul(transpose(z), weights), (d,))
    if pooling == "cls":
        return reshape(slice_rows(z, 0, 1), (d,))
    raise ConfigError(f"unknown pooling {pooling!r}")


def forward(
    image: Tensor,
    params: ModelParams,
    config: ModelConfig,
    rng: Optional[Rng] = None,
) -> Tensor:
    """One image -> [num_classes] logits.

    `rng` is consulted only when the config shuffles patches; a fresh
    permutation is drawn per call, so the same image can land in a
    different order on every presentation.
    """
    expected = (config.input_size, config.input_size, config.channels)
    if image.shape != expected:
        raise ShapeError(f"expected image {expected}, got {image.shape}")
    patches = patchify(image, config.patch_size)
    if config.shuffle_patches:
        if rng is None:
            raise ConfigError("shuffle_patches needs an rng to draw permutations")
        patches = permute_rows(patches, rng.permutation(patches.shape[0]))
    z = embed(patches, params, config)
    for bp in params.blocks:
        z = attention_block(z, bp, config.heads, config.use_adaptive_residual)
    pooled = pool(z, params, config.pooling)
    row = reshape(pooled, (1, z.shape[1]))
    logits = add(matmul(row, params.head_weight), params.head_bias)
    return reshape(logits, (config.num_classes,))


def forward_patches(
    patches: Tensor, params: ModelParams, config: ModelConfig
) -> Tensor:
    """Logits straight from pre-cut patch rows; used by the invariance probes."""
    if patches.shape != (config.patch_count, config.patch_dim):
        raise ShapeError(
            f"expected patches {(config.patch_count, config.patch_dim)}, got {patches.shape}"
        )
    z = embed(patches, params, config)
    for bp in params.blocks:
        z = attention_block(z, bp, config.heads, config.use_adaptive_residual)
    pooled = pool(z, params, config.pooling)
    row = reshape(pooled, (1, z.shape[1]))
    logits = add(matmul(row, params.head_weight), params.head_bias)
    return reshape(logits, (config.num_classes,))


# ---------------------------------------------------------------------------
# parameter files


def _write_component(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f8").tobytes())


def save_params(params: ModelParams, path) -> None:
    items = list(params.named_tensors())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(items)))
        for name, tensor in items:
            _write_component(fh, name, tensor.data)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParamsError("parameter file ends mid-record")
    return buf


def read_params_file(path) -> dict:
    """Raw name -> array mapping, no config needed."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ParamsError("not a parameter file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise ParamsError(f"unsupported parameter file version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
            )
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(shape)
            if name in out:
                raise ParamsError(f"duplicate component {name!r}")
            out[name] = arr.astype(np.float64)
        if fh.read(1):
            raise ParamsError("trailing bytes after final component")
    return out


def load_params(path, config: ModelConfig) -> ModelParams:
    raw = read_params_file(path)
    layout = component_layout(config)
    expected = {name: shape for name, shape, _ in layout}
    missing = expected.keys() - raw.keys()
    if missing:
        raise ParamsError(f"file is missing components: {sorted(missing)}")
    extra = raw.keys() - expected.keys()
    if extra:
        raise ParamsError(f"file has unexpected components: {sorted(extra)}")
    tensors = {}
    for name, shape, _ in layout:
        arr = raw[name]
        if arr.shape != shape:
            raise ParamsError(
                f"component {name!r} has shape {arr.shape}, expected {shape}"
            )
        tensors[name] = Tensor(arr, requires_grad=True)
    return _assemble(config, tensors)
