"""Residual conv backbone, checkpoint serialization, and view->diagnosis transfer.

The backbone family is a pre-activation residual stack: a 3x3 stem, one
group of residual blocks per entry in ``widths`` (stride 2 between
groups), global average pooling, and a linear head. Heads are named
``head.*``; an optional second head for joint view+diagnosis training is
``aux_head.*``. Everything else counts as backbone and is what
warm-start transfer copies.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from ssl_echo.tensor_core import (
    ShapeError,
    Tensor,
    batchnorm2d,
    conv2d,
    matmul,
    relu,
    tensor_mean,
)

__all__ = [
    "BackboneConfig",
    "ModelCheckpoint",
    "ConfigError",
    "CheckpointError",
    "CheckpointVersionError",
    "TransferError",
    "build_backbone",
    "add_aux_head",
    "forward_logits",
    "trainable",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "warm_start_from_view",
]

SUPPORTED_INPUT_SIZES = (16, 32, 64)
CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"SSLECKPT"
_HEAD_PREFIXES = ("head.", "aux_head.")

# Shape-defining fields that must match for a warm start to be legal.
_BACKBONE_FIELDS = ("input_size", "channels", "widths", "blocks_per_stage",
                    "normalization")


class ConfigError(ValueError):
    """Invalid backbone configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class TransferError(ValueError):
    """Warm-start source and target architectures differ."""


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 16
    channels: int = 1
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 3
    normalization: str = "batchnorm"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_size not in SUPPORTED_INPUT_SIZES:
            raise ConfigError(
                f"input_size must be one of {SUPPORTED_INPUT_SIZES}, "
                f"got {self.input_size}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ConfigError(
                f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}"
            )
        if self.normalization not in ("batchnorm", "none"):
            raise ConfigError(
                f"normalization must be 'batchnorm' or 'none', "
                f"got {self.normalization!r}"
            )

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "channels": self.channels,
            "widths": list(self.widths),
            "blocks_per_stage": self.blocks_per_stage,
            "num_classes": self.num_classes,
            "normalization": self.normalization,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_size=d["input_size"],
            channels=d["channels"],
            widths=tuple(d["widths"]),
            blocks_per_stage=d["blocks_per_stage"],
            num_classes=d["num_classes"],
            normalization=d["normalization"],
            seed=d["seed"],
        )


@dataclass
class ModelCheckpoint:
    config: BackboneConfig
    parameters: dict
    task: str
    epoch: int
    validation_balanced_accuracy: float
    run_id: str = ""


def _he_conv(rng, out_c, in_c, kh, kw):
    std = np.sqrt(2.0 / (in_c * kh * kw))
    return Tensor(rng.normal(0.0, std, size=(out_c, in_c, kh, kw)),
                  requires_grad=True)


def _bn_params(params, prefix, c):
    params[f"{prefix}.gamma"] = Tensor(np.ones(c), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(c), requires_grad=True)
    params[f"{prefix}.running_mean"] = Tensor(np.zeros(c), requires_grad=False)
    params[f"{prefix}.running_var"] = Tensor(np.ones(c), requires_grad=False)


def _init_head(rng, in_c, num_classes):
    std = np.sqrt(2.0 / in_c)
    w = Tensor(rng.normal(0.0, std, size=(in_c, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    return w, b


def build_backbone(config):
    """Deterministic parameter map for ``config`` (He init from config.seed)."""
    rng = np.random.default_rng(config.seed)
    bn = config.normalization == "batchnorm"
    params = {}
    params["stem.w"] = _he_conv(rng, config.widths[0], config.channels, 3, 3)
    in_c = config.widths[0]
    for s, width in enumerate(config.widths):
        for b in range(config.blocks_per_stage):
            prefix = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            if bn:
                _bn_params(params, f"{prefix}.bn1", in_c)
            params[f"{prefix}.conv1.w"] = _he_conv(rng, width, in_c, 3, 3)
            if bn:
                _bn_params(params, f"{prefix}.bn2", width)
            params[f"{prefix}.conv2.w"] = _he_conv(rng, width, width, 3, 3)
            if stride != 1 or in_c != width:
                params[f"{prefix}.shortcut.w"] = _he_conv(rng, width, in_c, 1, 1)
            in_c = width
    if bn:
        _bn_params(params, "final_bn", in_c)
    params["head.w"], params["head.b"] = _init_head(rng, in_c, config.num_classes)
    return params


def add_aux_head(params, config, seed_offset=1):
    """Attach a second linear head (for joint view+diagnosis training)."""
    rng = np.random.default_rng(config.seed + seed_offset)
    in_c = config.widths[-1]
    w, b = _init_head(rng, in_c, config.num_classes)
    params["aux_head.w"] = w
    params["aux_head.b"] = b
    return params


def _apply_bn(params, prefix, x, training):
    return batchnorm2d(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"].data,
        params[f"{prefix}.running_var"].data,
        training=training,
    )


def forward_logits(config, params, batch, training=False, head="head"):
    """Logits for a (B, channels, S, S) batch; pure function in inference mode."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expect = (config.channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(
            f"batch shape {x.shape} does not match (B, {expect[0]}, "
            f"{expect[1]}, {expect[2]})"
        )
    bn = config.normalization == "batchnorm"
    h = conv2d(x, params["stem.w"], stride=1, padding=1)
    for s in range(len(config.widths)):
        for b in range(config.blocks_per_stage):
            prefix = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            a = relu(_apply_bn(params, f"{prefix}.bn1", h, training)) if bn else relu(h)
            branch = conv2d(a, params[f"{prefix}.conv1.w"], stride=stride, padding=1)
            branch = (relu(_apply_bn(params, f"{prefix}.bn2", branch, training))
                      if bn else relu(branch))
            branch = conv2d(branch, params[f"{prefix}.conv2.w"], stride=1, padding=1)
            if f"{prefix}.shortcut.w" in params:
                sc = conv2d(h, params[f"{prefix}.shortcut.w"], stride=stride,
                            padding=0)
            else:
                sc = h
            h = branch + sc
    h = relu(_apply_bn(params, "final_bn", h, training)) if bn else relu(h)
    pooled = tensor_mean(h, axis=(2, 3))
    return matmul(pooled, params[f"{head}.w"]) + params[f"{head}.b"]


def trainable(params):
    return {name: p for name, p in params.items() if p.requires_grad}


def parameter_count(params):
    return sum(p.size for p in trainable(params).values())


def _clone_params(params):
    return {
        name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
        for name, p in params.items()
    }


def save_checkpoint(ckpt, path):
    """Write a checkpoint: JSON header then named float64 tensor blobs."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "task": ckpt.task,
        "epoch": ckpt.epoch,
        "validation_balanced_accuracy": ckpt.validation_balanced_accuracy,
        "run_id": ckpt.run_id,
        "n_tensors": len(ckpt.parameters),
    }
    buf = io.BytesIO()
    buf.write(_MAGIC)
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hjson)))
    buf.write(hjson)
    for name, p in ckpt.parameters.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", 1 if p.requires_grad else 0))
        buf.write(struct.pack("<I", p.ndim))
        for dim in p.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} "
                f"at offset {self.off}"
            )
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]


def load_checkpoint(path):
    """Lossless inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(len(_MAGIC), "magic")
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {magic!r}")
    hlen = r.u64("header length")
    try:
        header = json.loads(r.take(hlen, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(
            f"unparseable JSON header at offset {len(_MAGIC) + 8}: {exc}"
        ) from exc
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} != "
            f"supported {CHECKPOINT_FORMAT_VERSION}"
        )
    config = BackboneConfig.from_dict(header["config"])
    params = {}
    for _ in range(header["n_tensors"]):
        nlen = r.u32("name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        req = bool(r.u8("requires_grad flag"))
        ndim = r.u32("ndim")
        shape = tuple(r.u64(f"dim of {name}") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * 8, f"data of {name}")
        data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=req)
    if r.off != len(blob):
        raise CheckpointError(
            f"trailing bytes after last tensor at offset {r.off}"
        )
    return ModelCheckpoint(
        config=config,
        parameters=params,
        task=header["task"],
        epoch=header["epoch"],
        validation_balanced_accuracy=header["validation_balanced_accuracy"],
        run_id=header.get("run_id", ""),
    )


def warm_start_from_view(view_ckpt, diag_config):
    """Copy backbone weights from a view checkpoint; fresh head from diag seed."""
    differing = [
        f for f in _BACKBONE_FIELDS
        if getattr(view_ckpt.config, f) != getattr(diag_config, f)
    ]
    if differing:
        raise TransferError(
            "backbone architecture mismatch in fields: " + ", ".join(differing)
        )
    params = build_backbone(diag_config)
    for name, src in view_ckpt.parameters.items():
        if name.startswith(_HEAD_PREFIXES):
            continue
        if name not in params:
            raise TransferError(f"source tensor {name!r} has no target slot")
        if src.shape != params[name].shape:
            raise TransferError(
                f"shape mismatch for {name!r}: {src.shape} vs {params[name].shape}"
            )
        params[name] = Tensor(src.data.copy(), requires_grad=params[name].requires_grad)
    return params
