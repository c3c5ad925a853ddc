"""Full encoder/decoder assembly, its shortcut-free ablation, the persistence
baseline, and the checkpoint container.

Topology (variant ``sar``): five encoder levels of Residual DSC block + CBAM,
with 2x2 max pooling between levels. The CBAM output is both the skip tensor
and the input pooled into the next level. Encoder block output channels are
``base * (1, 2, 4, 8, 16)``; the deepest level (the bottleneck) has no
pooling below it. Each decoder level applies a channel-halving 1x1
convolution, doubles the spatial size bilinearly, concatenates the stored
skip (skip first, upsampled second), and runs a Residual DSC block that
halves the concatenated channels. A linear 1x1 convolution produces the
output; no final activation.

Variant ``smaat`` (the smaat-config ablation): plain double-DSC blocks, CBAM
feeding the skip only (pooling consumes the block output), ``base * 8``
bottleneck channels, and no pre-upsample 1x1 convolutions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import ops
from .blocks import (BatchNorm2d, Cbam, Conv2dLayer, DoubleDscBlock,
                     ResidualDscBlock, param_count)
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor4, read_t4, write_t4

__all__ = [
    "ModelConfig", "Model", "ActivationTrace", "build", "persistence_forward",
    "save_checkpoint", "load_checkpoint", "write_checkpoint_section",
    "read_checkpoint_section", "plain_unet_param_count",
]

_VARIANTS = ("sar", "smaat")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``depth`` is fixed at 4 poolings."""

    in_channels: int
    out_channels: int
    base_channels: int = 64
    depth: int = 4
    variant: str = "sar"
    cbam_reduction: int = 16
    shortcut_bn: bool = False

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * (16 if self.variant == "sar" else 8)

    def encoder_channels(self) -> list[int]:
        b = self.base_channels
        if self.variant == "sar":
            return [b, 2 * b, 4 * b, 8 * b, 16 * b]
        return [b, 2 * b, 4 * b, 8 * b, 8 * b]

    def decoder_channels(self) -> list[int]:
        """Decoder block output channels indexed by decoder depth 0..3."""
        b = self.base_channels
        if self.variant == "sar":
            return [b, 2 * b, 4 * b, 8 * b]
        return [b, b, 2 * b, 4 * b]

    def validate(self) -> None:
        if self.variant not in _VARIANTS:
            raise ConfigurationError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if self.depth != 4:
            raise ConfigurationError(f"depth is fixed at 4 poolings, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.cbam_reduction < 1:
            raise ConfigurationError("cbam_reduction must be >= 1")
        for c in self.encoder_channels():
            if c % self.cbam_reduction != 0:
                raise ConfigurationError(
                    f"cbam_reduction {self.cbam_reduction} must divide every encoder "
                    f"channel count, violated at {c}")


@dataclass
class ActivationTrace:
    """Retained forward activations keyed by layer name; gradients appear on
    the tensors' ``grad`` buffers after a backward pass."""

    tensors: dict[str, Tensor4] = field(default_factory=dict)

    def get(self, name: str) -> Tensor4:
        if name not in self.tensors:
            raise UsageError(f"activation {name!r} was not traced")
        return self.tensors[name]


class _Tap:
    """Collects requested activations and applies output overrides in-line."""

    def __init__(self, wanted: Iterable[str], overrides: Optional[dict[str, Tensor4]],
                 valid: set[str]):
        self.wanted = set(wanted)
        self.overrides = dict(overrides) if overrides else {}
        unknown = (self.wanted | set(self.overrides)) - valid
        if unknown:
            raise UsageError(
                f"unknown layer name(s) {sorted(unknown)}; valid names: {sorted(valid)}")
        self.got: dict[str, Tensor4] = {}

    def put(self, name: str, t: Tensor4) -> Tensor4:
        o = self.overrides.get(name)
        if o is not None:
            if o.shape != t.shape:
                raise DimensionError(
                    f"override for {name!r} has shape {o.shape}, expected {t.shape}")
            t = o
        if name in self.wanted:
            self.got[name] = t
        return t


class Model:
    """Built network: parameters, fixed wiring, and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        enc_ch = config.encoder_channels()
        dec_ch = config.decoder_channels()
        block_cls = ResidualDscBlock if config.variant == "sar" else DoubleDscBlock
        kw = {"shortcut_bn": config.shortcut_bn} if config.variant == "sar" else {}

        self.enc_blocks = []
        self.enc_cbams = []
        cin = config.in_channels
        for d in range(5):
            self.enc_blocks.append(block_cls(cin, enc_ch[d], rng, dtype, **kw))
            self.enc_cbams.append(Cbam(enc_ch[d], config.cbam_reduction, rng, dtype))
            cin = enc_ch[d]

        self.dec_reduce: list[Optional[Conv2dLayer]] = [None] * 4
        self.dec_blocks = [None] * 4
        x_ch = enc_ch[4]
        for d in (3, 2, 1, 0):
            if config.variant == "sar":
                self.dec_reduce[d] = Conv2dLayer(x_ch, x_ch // 2, 1, rng, dtype)
                up_ch = x_ch // 2
            else:
                up_ch = x_ch
            cat_ch = enc_ch[d] + up_ch
            self.dec_blocks[d] = block_cls(cat_ch, dec_ch[d], rng, dtype, **kw)
            x_ch = dec_ch[d]
        self.out_conv = Conv2dLayer(dec_ch[0], config.out_channels, 1, rng, dtype)

    # -- enumeration ---------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        assert not prefix, "model names are absolute"
        for d in range(5):
            yield from self.enc_blocks[d].named_parameters(f"enc{d}.block")
            yield from self.enc_cbams[d].named_parameters(f"enc{d}.cbam")
        for d in (3, 2, 1, 0):
            if self.dec_reduce[d] is not None:
                yield from self.dec_reduce[d].named_parameters(f"dec{d}.reduce")
            yield from self.dec_blocks[d].named_parameters(f"dec{d}.block")
        yield from self.out_conv.named_parameters("out")

    def named_buffers(self):
        for d in range(5):
            yield from self.enc_blocks[d].named_buffers(f"enc{d}.block")
        for d in (3, 2, 1, 0):
            yield from self.dec_blocks[d].named_buffers(f"dec{d}.block")

    def parameters(self) -> list[Tensor4]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def trace_names(self) -> set[str]:
        names = {"out"}
        sub = self.config.variant == "sar"
        for d in range(5):
            names.add(f"enc{d}.block")
            names.add(f"enc{d}.cbam")
            if sub:
                names.add(f"enc{d}.block.dsc_path")
                names.add(f"enc{d}.block.shortcut")
            if d < 4:
                names.add(f"enc{d}.pool_in")
        for d in range(4):
            names.add(f"dec{d}.block")
            if sub:
                names.add(f"dec{d}.reduce")
                names.add(f"dec{d}.block.dsc_path")
                names.add(f"dec{d}.block.shortcut")
        return names

    def spatial_sizes(self, h: int) -> list[int]:
        """Encoder spatial side lengths per level for an input of side ``h``."""
        return [h // (2 ** d) for d in range(5)]

    # -- forward ---------------------------------------------------------------

    def forward(self, x: Tensor4, train: bool = False,
                trace_request: Iterable[str] = (),
                overrides: Optional[dict[str, Tensor4]] = None
                ) -> tuple[Tensor4, ActivationTrace]:
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise DimensionError(
                f"model expects {self.config.in_channels} input channels, got {c}")
        if h % 16 or w % 16:
            raise DimensionError(f"input spatial dims must be divisible by 16, got {h}x{w}")
        if x.dtype != self.dtype:
            raise UsageError(f"model built for {self.dtype}, input is {x.dtype}")
        tap = _Tap(trace_request, overrides, self.trace_names())
        sar = self.config.variant == "sar"

        skips = []
        cur = x
        for d in range(5):
            blk = self.enc_blocks[d].forward(cur, train, tap, f"enc{d}.block")
            blk = tap.put(f"enc{d}.block", blk)
            att = tap.put(f"enc{d}.cbam", self.enc_cbams[d].forward(blk, train))
            if d < 4:
                skips.append(att)
                pool_in = tap.put(f"enc{d}.pool_in", att if sar else blk)
                cur = ops.max_pool2(pool_in)
            else:
                cur = att
        for d in (3, 2, 1, 0):
            if self.dec_reduce[d] is not None:
                cur = tap.put(f"dec{d}.reduce", self.dec_reduce[d].forward(cur))
            cur = ops.upsample_bilinear2(cur)
            cur = ops.concat_channels(skips[d], cur)
            blk = self.dec_blocks[d].forward(cur, train, tap, f"dec{d}.block")
            cur = tap.put(f"dec{d}.block", blk)
        y = tap.put("out", self.out_conv.forward(cur))
        return y, ActivationTrace(tap.got)


def build(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize a model from ``seed``."""
    return Model(config, seed, dtype)


def persistence_forward(x: Tensor4, out_ch: int) -> Tensor4:
    """Baseline: replicate the last input channel ``out_ch`` times."""
    last = x.data[:, -1:, :, :]
    return Tensor4(np.repeat(last, out_ch, axis=1), _checked=True)


def plain_unet_param_count(in_channels: int, out_channels: int, base: int) -> int:
    """Analytic trainable-scalar count of a dense-convolution UNet at the same
    widths: two 3x3 convolutions (+bias +bn) per level, bilinear decoder with
    skip concatenation, 1x1 output convolution. Comparison reference only;
    the network itself is out of scope.
    """
    def double_conv(cin: int, cout: int) -> int:
        c1 = 9 * cin * cout + cout
        c2 = 9 * cout * cout + cout
        return c1 + c2 + 2 * (2 * cout)

    enc = [base, 2 * base, 4 * base, 8 * base, 16 * base]
    total = 0
    cin = in_channels
    for c in enc:
        total += double_conv(cin, c)
        cin = c
    for d in (3, 2, 1, 0):
        total += double_conv(enc[d] + cin, enc[d])
        cin = enc[d]
    total += cin * out_channels + out_channels
    return total


# -- checkpoints ("SARv1") -----------------------------------------------------
#
# Layout, all little-endian:
#   magic "SARv1"
#   u32 line count, then per line: u32 byte length + UTF-8 "key=value"
#   u64 tensor count, then per tensor: u32 name length + name + T4v1 record
# Config keys come first; callers may append extra metadata keys (for example
# the data normalization scale). Round-trips are bitwise exact.

_CKPT_MAGIC = b"SARv1"
_CONFIG_KEYS = ("in_channels", "out_channels", "base_channels", "depth",
                "variant", "cbam_reduction", "shortcut_bn")


def _write_kv(f, key: str, value: str) -> None:
    line = f"{key}={value}".encode("utf-8")
    f.write(struct.pack("<I", len(line)))
    f.write(line)


def _read_kv(f) -> tuple[str, str]:
    (length,) = struct.unpack("<I", f.read(4))
    line = f.read(length).decode("utf-8")
    key, _, value = line.partition("=")
    return key, value


def write_checkpoint_section(f, model: Model, extra: Optional[dict[str, str]] = None) -> None:
    """Write the SARv1 section (config meta + named tensors) to a file object."""
    cfg = model.config
    meta = {k: str(getattr(cfg, k)) for k in _CONFIG_KEYS}
    if extra:
        overlap = set(extra) & set(meta)
        if overlap:
            raise UsageError(f"extra checkpoint keys shadow config keys: {sorted(overlap)}")
        meta.update({k: str(v) for k, v in extra.items()})
    tensors = [(name, t.data) for name, t in model.named_parameters()]
    tensors += [(name, buf.reshape(1, -1, 1, 1)) for name, buf in model.named_buffers()]
    f.write(_CKPT_MAGIC)
    f.write(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        _write_kv(f, k, v)
    f.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        write_t4(f, arr)


def save_checkpoint(path, model: Model, extra: Optional[dict[str, str]] = None) -> None:
    with open(path, "wb") as f:
        write_checkpoint_section(f, model, extra)


def _parse_bool(s: str) -> bool:
    return s == "True"


def read_checkpoint_section(f, path="<stream>") -> tuple["Model", dict[str, str]]:
    """Read one SARv1 section from a file object; the stream is left
    positioned just past the section."""
    if f.read(5) != _CKPT_MAGIC:
        raise UsageError(f"{path}: not a SARv1 checkpoint")
    (n_meta,) = struct.unpack("<I", f.read(4))
    meta = dict(_read_kv(f) for _ in range(n_meta))
    (n_tensors,) = struct.unpack("<Q", f.read(8))
    tensors = {}
    for _ in range(n_tensors):
        (ln,) = struct.unpack("<I", f.read(4))
        name = f.read(ln).decode("utf-8")
        tensors[name] = read_t4(f)
    try:
        config = ModelConfig(
            in_channels=int(meta.pop("in_channels")),
            out_channels=int(meta.pop("out_channels")),
            base_channels=int(meta.pop("base_channels")),
            depth=int(meta.pop("depth")),
            variant=meta.pop("variant"),
            cbam_reduction=int(meta.pop("cbam_reduction")),
            shortcut_bn=_parse_bool(meta.pop("shortcut_bn")),
        )
    except KeyError as e:
        raise UsageError(f"{path}: checkpoint missing config key {e}") from None
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    model = Model(config, seed=0, dtype=dtype)
    for name, t in model.named_parameters():
        if name not in tensors:
            raise UsageError(f"{path}: checkpoint missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != t.data.shape:
            raise DimensionError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data[...] = arr
    for name, buf in model.named_buffers():
        if name not in tensors:
            raise UsageError(f"{path}: checkpoint missing buffer {name!r}")
        buf[...] = tensors.pop(name).reshape(buf.shape)
    if tensors:
        raise UsageError(f"{path}: checkpoint holds unknown tensors {sorted(tensors)}")
    return model, meta


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    """Rebuild a model from a checkpoint file; returns (model, extra metadata)."""
    with open(path, "rb") as f:
        return read_checkpoint_section(f, str(path))
