"""Four-stage pyramid backbone assembled from EAT blocks.

The stem and every stage-entry downsample are strided MSRA modules; the
classifier is a Task-Related Head (norm + global average pool + linear),
with no CLS token and no position embeddings anywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, NumericError
from .blocks import (EATBlock, GLIConfig, LayerNorm, Linear, Module, MSRA,
                     MSRAConfig, gli_param_formula)


class SpecError(ValueError):
    """Invalid model specification; message lists every violated constraint."""


@dataclass(frozen=True)
class StageSpec:
    depth: int
    channels: int
    heads: int
    split_ratio: float = 0.5
    downsample: bool = True
    use_mdmsa: bool = False


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple
    num_classes: int
    input_resolution: tuple = (32, 32)
    stem_channels: int = 16
    stem_stride: int = 4
    hidden_ratio: float = 2.0
    local_kernel: int = 3

    def validate(self) -> list[str]:
        problems = []
        if len(self.stages) != 4:
            problems.append(f"expected 4 stages, got {len(self.stages)}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem_channels < 1:
            problems.append("stem_channels must be positive")
        if self.stem_stride < 1:
            problems.append("stem_stride must be positive")
        factor = self.stem_stride
        for i, st in enumerate(self.stages):
            if st.depth < 1:
                problems.append(f"stage {i}: depth must be >= 1")
            if st.channels < 1:
                problems.append(f"stage {i}: channels must be positive")
            cg = int(round(st.split_ratio * st.channels))
            if not 0.0 <= st.split_ratio <= 1.0:
                problems.append(f"stage {i}: split_ratio outside [0,1]")
            elif cg > 0 and cg % st.heads:
                problems.append(
                    f"stage {i}: global channels {cg} not divisible by "
                    f"heads {st.heads}")
            if st.downsample:
                factor *= 2
        h, w = self.input_resolution
        if h % factor or w % factor:
            problems.append(
                f"input resolution {h}x{w} not divisible by total downsample "
                f"factor {factor}")
        return problems

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["input_resolution"] = list(self.input_resolution)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        stages = tuple(StageSpec(**s) for s in d["stages"])
        rest = {k: v for k, v in d.items() if k != "stages"}
        rest["input_resolution"] = tuple(rest["input_resolution"])
        return ModelSpec(stages=stages, **rest)


def desk_spec(num_classes: int = 3, resolution: int = 32) -> ModelSpec:
    """Small default configuration for desk-scale experiments."""
    return ModelSpec(
        stages=(
            StageSpec(depth=1, channels=16, heads=1, downsample=False),
            StageSpec(depth=1, channels=32, heads=2),
            StageSpec(depth=2, channels=64, heads=4, use_mdmsa=True),
            StageSpec(depth=1, channels=128, heads=8, use_mdmsa=True),
        ),
        num_classes=num_classes,
        input_resolution=(resolution, resolution),
        stem_channels=16,
    )


def micro_spec(num_classes: int = 3, resolution: int = 16) -> ModelSpec:
    """Tiny configuration used by the exhaustive gradient-integrity suite."""
    return ModelSpec(
        stages=(
            StageSpec(depth=1, channels=4, heads=1, downsample=False),
            StageSpec(depth=1, channels=4, heads=2),
            StageSpec(depth=1, channels=4, heads=2, use_mdmsa=True),
            StageSpec(depth=1, channels=4, heads=2, downsample=False),
        ),
        num_classes=num_classes,
        input_resolution=(resolution, resolution),
        stem_channels=4,
        hidden_ratio=1.0,
    )


class TaskRelatedHead(Module):
    """Norm + global average pooling over tokens + linear classifier."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.norm = self.add_child("norm", LayerNorm(channels))
        self.fc = self.add_child("fc", Linear(channels, num_classes, rng))

    def forward(self, tokens: Tensor) -> Tensor:
        pooled = self.norm.forward(tokens).mean(axis=1)
        return self.fc.forward(pooled)

    def flops(self, length: int) -> int:
        return self.fc.flops(1)


class Model(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        problems = spec.validate()
        if problems:
            raise SpecError("invalid model spec:\n  " + "\n  ".join(problems))
        self.spec = spec
        s = spec.stem_stride
        self.stem = self.add_child("stem", MSRA(MSRAConfig(
            in_channels=3, out_channels=spec.stem_channels,
            branch_specs=((3, s, 1), (5, s, 1))), rng))
        self.stages: list[list[EATBlock]] = []
        cin = spec.stem_channels
        for si, st in enumerate(spec.stages):
            blocks = []
            for bi in range(st.depth):
                first = bi == 0
                stride = 2 if (first and st.downsample) else 1
                in_ch = cin if first else st.channels
                mcfg = MSRAConfig(
                    in_channels=in_ch, out_channels=st.channels,
                    branch_specs=((3, stride, 1), (3, stride, 2)))
                gcfg = GLIConfig(channels=st.channels,
                                 split_ratio=st.split_ratio,
                                 local_kernel=spec.local_kernel,
                                 heads=st.heads, use_mdmsa=st.use_mdmsa)
                blk = EATBlock(mcfg, gcfg, spec.hidden_ratio, rng)
                blocks.append(self.add_child(f"stage{si}.block{bi}", blk))
            self.stages.append(blocks)
            cin = st.channels
        self.head = self.add_child("head", TaskRelatedHead(
            cin, spec.num_classes, rng))

    def forward(self, images: Tensor) -> Tensor:
        B, C, H, W = images.shape
        eh, ew = self.spec.input_resolution
        if C != 3 or (H, W) != (eh, ew):
            raise ValueError(
                f"expected input [B,3,{eh},{ew}], got {list(images.shape)}")
        if not np.all(np.isfinite(images.data)):
            raise NumericError("non-finite values in input images")
        x = self.stem.forward(images)
        for blocks in self.stages:
            for blk in blocks:
                x = blk.forward(x)
        B, C, H, W = x.shape
        tokens = x.reshape(B, C, H * W).transpose(0, 2, 1)
        logits = self.head.forward(tokens)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits")
        return logits


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic construction: identical seed, bitwise-identical parameters."""
    rng = np.random.default_rng(seed)
    return Model(spec, rng)


# -- parameter / FLOPs accounting ------------------------------------------------


@dataclass
class ParamRow:
    name: str
    params: int
    flops: int
    gli_formula: int | None = None
    gli_delta: int | None = None


@dataclass
class ParamReport:
    rows: list[ParamRow] = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "rows": [asdict(r) for r in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }, indent=2)

    def to_text(self) -> str:
        lines = [f"{'module':<28}{'params':>12}{'flops':>16}  gli-formula/delta"]
        for r in self.rows:
            extra = ""
            if r.gli_formula is not None:
                extra = f"{r.gli_formula} / {r.gli_delta:+d}"
            lines.append(f"{r.name:<28}{r.params:>12}{r.flops:>16}  {extra}")
        lines.append(f"{'TOTAL':<28}{self.total_params:>12}{self.total_flops:>16}")
        return "\n".join(lines)


def count_params_flops(model: Model, resolution: tuple[int, int] | None = None
                       ) -> ParamReport:
    """Per-module parameter and FLOP accounting.

    Parameter counts come from enumerating parameter tensors; GLI rows also
    carry the closed-form tally and the delta between the two.
    """
    h, w = resolution or model.spec.input_resolution
    report = ParamReport()

    def add(name: str, module: Module, flops: int, gli=None):
        row = ParamRow(name, module.param_count(), flops)
        if gli is not None:
            row.gli_formula = gli.formula_params()
            row.gli_delta = gli.param_count() - row.gli_formula
        report.rows.append(row)

    add("stem", model.stem, model.stem.flops(h, w))
    h, w = model.stem.out_hw(h, w)
    for si, blocks in enumerate(model.stages):
        for bi, blk in enumerate(blocks):
            name = f"stage{si}.block{bi}"
            add(f"{name}.msra", blk.msra, blk.msra.flops(h, w))
            h, w = blk.out_hw(h, w)
            add(f"{name}.norm1", blk.norm1, 0)
            add(f"{name}.gli", blk.gli, blk.gli.flops(h, w), gli=blk.gli)
            add(f"{name}.norm2", blk.norm2, 0)
            add(f"{name}.ffn", blk.ffn, blk.ffn.flops(h * w))
    add("head", model.head, model.head.flops(h * w))
    report.total_params = sum(r.params for r in report.rows)
    report.total_flops = sum(r.flops for r in report.rows)
    assert report.total_params == model.param_count()
    return report


# -- checkpoint format -----------------------------------------------------------

_MAGIC = b"EATCKPT1"
_FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, seed: int, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, JSON manifest, little-endian raw data."""
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": seed,
        "tensors": entries,
        "extra": extra or {},
    }
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}")
    spec = ModelSpec.from_dict(manifest["spec"])
    model = build_model(spec, manifest["seed"])
    data = blob[16 + hlen:]
    params = dict(model.named_parameters())
    names = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        start = entry["offset"]
        if start + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)),
                            offset=start).reshape(shape)
        params[name].data = np.asarray(arr, dtype=T.get_dtype()).copy()
        names.add(name)
    missing = set(params) - names
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:4]}")
    return model, manifest
