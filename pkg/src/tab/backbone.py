"""Visual encoder: a small residual CNN with stage taps and a projection head.

Stage ``s`` runs at ``input / 2**s`` spatial resolution with
``stage_channels[s]`` channels (stage 0 keeps full resolution). The head
global-average-pools the last stage and projects to the text-embedding
dimension, L2-normalized. Normalization inside blocks is per-instance, so
encoding is independent of batch composition.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tab.errors import ConfigError, DimensionError, FormatError
from tab.tensor import (
    Tensor,
    add,
    bias_add,
    conv2d,
    global_avg_pool,
    instance_norm,
    l2_normalize_rows,
    matmul,
    relu,
)

CHECKPOINT_MAGIC = b"TABCKPT1"


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    embed_dim: int = 64

    def __post_init__(self):
        if not self.stage_channels:
            raise ConfigError("stage_channels must be nonempty")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.input_size < 2 ** (len(self.stage_channels) - 1):
            raise ConfigError("input_size too small for the stage count")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    def to_json_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stage_channels": list(self.stage_channels),
            "blocks_per_stage": self.blocks_per_stage,
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "BackboneConfig":
        try:
            return BackboneConfig(
                input_size=int(d["input_size"]),
                stage_channels=tuple(d["stage_channels"]),
                blocks_per_stage=int(d["blocks_per_stage"]),
                embed_dim=int(d["embed_dim"]),
            )
        except KeyError as e:
            raise ConfigError(f"backbone config missing field {e}") from e


def parameter_shapes(cfg: BackboneConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Shape of every named parameter implied by the config, in storage order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    ch = cfg.stage_channels
    shapes["stem.conv.w"] = (ch[0], 3, 3, 3)
    shapes["stem.norm.g"] = (ch[0],)
    shapes["stem.norm.b"] = (ch[0],)
    cin = ch[0]
    for s, cout in enumerate(ch):
        for b in range(cfg.blocks_per_stage):
            p = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            shapes[f"{p}.conv1.w"] = (cout, cin, 3, 3)
            shapes[f"{p}.norm1.g"] = (cout,)
            shapes[f"{p}.norm1.b"] = (cout,)
            shapes[f"{p}.conv2.w"] = (cout, cout, 3, 3)
            shapes[f"{p}.norm2.g"] = (cout,)
            shapes[f"{p}.norm2.b"] = (cout,)
            if stride != 1 or cin != cout:
                shapes[f"{p}.down.conv.w"] = (cout, cin, 1, 1)
                shapes[f"{p}.down.norm.g"] = (cout,)
                shapes[f"{p}.down.norm.b"] = (cout,)
            cin = cout
    shapes["head.proj.w"] = (ch[-1], cfg.embed_dim)
    shapes["head.proj.b"] = (cfg.embed_dim,)
    return shapes


def parameter_count(cfg: BackboneConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


class Backbone:
    """Encoder parameters + config + training metadata (an in-memory checkpoint)."""

    def __init__(self, config: BackboneConfig, params: "OrderedDict[str, Tensor]", meta: dict):
        self.config = config
        self.params = params
        self.meta = meta

    # -- construction -------------------------------------------------------

    @staticmethod
    def init(config: BackboneConfig, seed: int = 0) -> "Backbone":
        rng = np.random.default_rng(seed)
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".w") and len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith("proj.w"):
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            elif name.endswith(".g"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data.astype(np.float32), requires_grad=True)
        meta = {"seed": seed, "steps": 0, "loss_curve": []}
        return Backbone(config, params, meta)

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def clone(self) -> "Backbone":
        params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items()
        )
        return Backbone(self.config, params, dict(self.meta))

    # -- forward ------------------------------------------------------------

    def _block(self, x: Tensor, prefix: str, stride: int) -> Tensor:
        p = self.params
        out = conv2d(x, p[f"{prefix}.conv1.w"], stride=stride, padding=1)
        out = relu(instance_norm(out, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
        out = conv2d(out, p[f"{prefix}.conv2.w"], stride=1, padding=1)
        out = instance_norm(out, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
        if f"{prefix}.down.conv.w" in p:
            skip = conv2d(x, p[f"{prefix}.down.conv.w"], stride=stride, padding=0)
            skip = instance_norm(skip, p[f"{prefix}.down.norm.g"], p[f"{prefix}.down.norm.b"])
        else:
            skip = x
        return relu(add(out, skip))

    def _stages(self, images: Tensor, upto: int) -> list[Tensor]:
        cfg = self.config
        if images.data.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W) images, got {images.shape}")
        if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise ConfigError(
                f"input is {images.shape[2]}x{images.shape[3]}, "
                f"checkpoint expects {cfg.input_size}x{cfg.input_size}"
            )
        p = self.params
        x = conv2d(images, p["stem.conv.w"], stride=1, padding=1)
        x = relu(instance_norm(x, p["stem.norm.g"], p["stem.norm.b"]))
        outs = []
        for s in range(upto + 1):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                x = self._block(x, f"stage{s}.block{b}", stride)
            outs.append(x)
        return outs

    def pooled(self, images: Tensor) -> Tensor:
        """Global-average-pooled last-stage features, (B, stage_channels[-1])."""
        last = self._stages(images, len(self.config.stage_channels) - 1)[-1]
        return global_avg_pool(last)

    def encode(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, embed_dim), rows L2-normalized."""
        proj = bias_add(
            matmul(self.pooled(images), self.params["head.proj.w"]),
            self.params["head.proj.b"],
        )
        return l2_normalize_rows(proj)

    def maps(self, images: Tensor, stages) -> list[Tensor]:
        """Pre-pooling activations of the requested stages, ascending stage order."""
        ids = sorted(set(int(s) for s in stages))
        n = len(self.config.stage_channels)
        for s in ids:
            if s < 0 or s >= n:
                raise ConfigError(f"unknown stage {s}; valid stages are 0..{n - 1}")
        if not ids:
            raise ConfigError("at least one stage must be requested")
        outs = self._stages(images, max(ids))
        return [outs[s] for s in ids]


def images_to_batch(images_u8: np.ndarray, dtype=np.float32) -> Tensor:
    """(B, H, W, 3) or (H, W, 3) uint8 -> (B, 3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(images_u8)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise DimensionError(f"expected (B, H, W, 3) uint8 images, got {arr.shape}")
    x = arr.astype(dtype) / dtype(255.0)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def encode_global(images, bb: Backbone) -> Tensor:
    """Functional wrapper: embeddings for uint8 HWC images or a prepared batch."""
    if isinstance(images, Tensor):
        return bb.encode(images)
    return bb.encode(images_to_batch(images))


def feature_maps(images, bb: Backbone, stages) -> list[Tensor]:
    if isinstance(images, Tensor):
        return bb.maps(images, stages)
    return bb.maps(images_to_batch(images), stages)


# ---------------------------------------------------------------------------
# checkpoint serialization (TABCKPT1)
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(bb: Backbone, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    doc = dict(bb.config.to_json_dict())
    doc["meta"] = bb.meta
    blob = _canonical_json(doc)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, t in bb.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated checkpoint while reading {what} at offset {f.tell()}")
    return b


def load_checkpoint(path) -> Backbone:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (jlen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            doc = json.loads(_read_exact(f, jlen, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"invalid checkpoint config JSON: {e}") from e
        meta = doc.pop("meta", {})
        config = BackboneConfig.from_json_dict(doc)
        params: OrderedDict[str, Tensor] = OrderedDict()
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError(f"truncated checkpoint at offset {f.tell()}")
            (nlen,) = struct.unpack("<H", head)
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
            dims = struct.unpack(
                "<" + "I" * rank, _read_exact(f, 4 * rank, f"{name} dims")
            )
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 4 * count, f"{name} data")
            data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
            if not np.all(np.isfinite(data)):
                raise FormatError(f"non-finite values in tensor {name}")
            params[name] = Tensor(data.copy(), requires_grad=True)
    expected = parameter_shapes(config)
    if list(params.keys()) != list(expected.keys()):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise FormatError(
            f"checkpoint tensors do not match config (missing={sorted(missing)}, "
            f"extra={sorted(extra)})"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(
                f"tensor {name} has shape {params[name].shape}, config implies {shape}"
            )
    return Backbone(config, params, meta)
