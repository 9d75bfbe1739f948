"""Neural building blocks: dense/variance heads, MC-dropout, the
three-stage self-attention backbone, and the incremental model.

The backbone is three blocks of (3x3 conv -> relu -> self-attention stage
-> dropout -> 2x2 average pool) followed by global average pooling. The
attention stage computes spatial query/key/value attention with a learned
residual gain that starts at 0, so a freshly initialized backbone behaves
exactly like the plain conv stack.

Classifier state is split into an old-class head and a new-class head (and
matching variance heads); ``expand_heads`` merges them when a new task
arrives, and ``snapshot`` freezes a deep copy to serve as the teacher.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ParameterError
from .rng import Rng
from .tensor import Tensor

DROPOUT_MODES = ("train", "mc-eval", "off")

# Keeps variance-head outputs strictly positive even where softplus
# underflows to 0 in float64 (raw input below about -745).
VARIANCE_FLOOR = 1e-12


@dataclass
class ArchConfig:
    """Backbone layout. ``widths`` are the three conv channel counts;
    ``attn_reduction`` divides the channel count for the query/key/value
    projections (floor, minimum 1)."""
    in_channels: int = 1
    widths: tuple = (16, 32, 64)
    attn_reduction: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ParameterError(f"backbone needs exactly 3 widths, got {self.widths}")
        if not (0.0 <= self.dropout < 1.0):
            raise ParameterError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.attn_reduction < 1:
            raise ParameterError(f"attn_reduction must be >= 1, got {self.attn_reduction}")


class DenseLayer:
    """y = x @ W.T + b with weight (out, in)."""

    def __init__(self, out_features: int, in_features: int):
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, T.swap_last2(self.weight)), self.bias)


class VarianceHead:
    """Linear layer followed by softplus; outputs per-logit variances.

    A tiny additive floor keeps every output strictly positive in float64.
    """

    def __init__(self, out_features: int, in_features: int):
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        raw = T.add(T.matmul(x, T.swap_last2(self.weight)), self.bias)
        return T.add(T.softplus(raw), VARIANCE_FLOOR)


class DropoutLayer:
    """Inverted dropout. In ``train`` and ``mc-eval`` modes each unit is
    zeroed with probability p and survivors are scaled by 1/(1-p); in
    ``off`` mode the input passes through untouched."""

    def __init__(self, rate: float):
        if not (0.0 <= rate < 1.0):
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, mode: str, rng: Rng | None) -> Tensor:
        if mode not in DROPOUT_MODES:
            raise ParameterError(f"unknown dropout mode {mode!r}")
        if mode == "off" or self.rate == 0.0:
            return x
        if rng is None:
            raise ParameterError("dropout in stochastic mode needs an rng")
        keep = (rng.uniform(x.shape) >= self.rate) / (1.0 - self.rate)
        return T.mul(x, Tensor(keep))


class SelfAttentionStage:
    """Spatial self-attention over an (N, C, H, W) feature map.

    Query/key/value are 1x1 convolutions to C//reduction channels, the
    attended value is re-projected to C channels by another 1x1
    convolution, and the stage output is x + gain * attended with the
    ``gain`` scalar learned (initialized to 0).
    """

    def __init__(self, channels: int, reduction: int = 2):
        inner = max(1, channels // reduction)
        self.channels = channels
        self.inner = inner
        self.query = Tensor(np.zeros((inner, channels, 1, 1)), requires_grad=True)
        self.key = Tensor(np.zeros((inner, channels, 1, 1)), requires_grad=True)
        self.value = Tensor(np.zeros((inner, channels, 1, 1)), requires_grad=True)
        self.proj = Tensor(np.zeros((channels, inner, 1, 1)), requires_grad=True)
        self.gain = Tensor(np.zeros(1), requires_grad=True)


def attention_map(stage: SelfAttentionStage, x: Tensor) -> Tensor:
    """Pre-residual attended map of a stage.

    beta[i, j] = softmax_j(q_i . k_j / sqrt(inner)) over spatial positions,
    output o = proj(beta @ value). The caller adds the gained residual.
    """
    if x.ndim != 4 or x.shape[1] != stage.channels:
        raise DimensionError(
            f"attention stage expects (N, {stage.channels}, H, W), got {x.shape}")
    n, c, h, w = x.shape
    p = h * w
    q = T.reshape(T.conv2d(x, stage.query), (n, stage.inner, p))
    k = T.reshape(T.conv2d(x, stage.key), (n, stage.inner, p))
    v = T.reshape(T.conv2d(x, stage.value), (n, stage.inner, p))
    energy = T.mul(T.bmm(T.swap_last2(q), k), 1.0 / math.sqrt(stage.inner))
    beta = T.softmax_temperature(energy, 1.0)          # rows over key positions
    attended = T.bmm(v, T.swap_last2(beta))            # (n, inner, p)
    return T.conv2d(T.reshape(attended, (n, stage.inner, h, w)), stage.proj)


@dataclass
class ForwardOutput:
    logits_old: Tensor          # (N, old classes), second extent 0 at task 1
    logits_new: Tensor          # (N, new classes)
    var_old: Tensor             # (N, old classes), strictly positive
    var_new: Tensor             # (N, new classes), strictly positive
    attention: list = field(default_factory=list)   # 3 pre-residual stage maps


class IncrementalModel:
    """Backbone + split heads. ``n_old`` may be 0 (first task)."""

    def __init__(self, arch: ArchConfig, n_old: int, n_new: int):
        if n_new < 1:
            raise ParameterError(f"model needs at least one new class, got {n_new}")
        self.arch = arch
        cs = [arch.in_channels, *arch.widths]
        self.conv_w = [Tensor(np.zeros((cs[i + 1], cs[i], 3, 3)), requires_grad=True)
                       for i in range(3)]
        self.conv_b = [Tensor(np.zeros(cs[i + 1]), requires_grad=True) for i in range(3)]
        self.stages = [SelfAttentionStage(cs[i + 1], arch.attn_reduction) for i in range(3)]
        self.dropout = DropoutLayer(arch.dropout)
        feat = arch.widths[-1]
        self.head_old = DenseLayer(n_old, feat)
        self.head_new = DenseLayer(n_new, feat)
        self.var_old = VarianceHead(n_old, feat)
        self.var_new = VarianceHead(n_new, feat)

    @property
    def n_old(self) -> int:
        return self.head_old.out_features

    @property
    def n_new(self) -> int:
        return self.head_new.out_features

    @property
    def n_classes(self) -> int:
        return self.n_old + self.n_new

    def parameters(self) -> list:
        """Stable (name, tensor) list; order fixes init and update order."""
        out = []
        for i in range(3):
            out.append((f"block{i + 1}.weight", self.conv_w[i]))
            out.append((f"block{i + 1}.bias", self.conv_b[i]))
            s = self.stages[i]
            out.append((f"attn{i + 1}.query", s.query))
            out.append((f"attn{i + 1}.key", s.key))
            out.append((f"attn{i + 1}.value", s.value))
            out.append((f"attn{i + 1}.proj", s.proj))
            out.append((f"attn{i + 1}.gain", s.gain))
        for name, layer in (("head_old", self.head_old), ("head_new", self.head_new),
                            ("var_old", self.var_old), ("var_new", self.var_new)):
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def backbone_parameters(self) -> list:
        return [(n, t) for n, t in self.parameters()
                if n.startswith(("block", "attn"))]

    def features(self, x: Tensor, mode: str = "off", rng: Rng | None = None) -> tuple:
        """Backbone pass; returns (feature matrix, list of 3 attention maps)."""
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise DimensionError(
                f"model expects (N, {self.arch.in_channels}, H, W), got {x.shape}")
        attn = []
        for i in range(3):
            x = T.relu(T.add(T.conv2d(x, self.conv_w[i], pad=1),
                             T.reshape(self.conv_b[i], (-1, 1, 1))))
            o = attention_map(self.stages[i], x)
            attn.append(o)
            x = T.add(x, T.mul(self.stages[i].gain, o))
            x = self.dropout(x, mode, rng)
            x = T.avg_pool2d(x, 2)
        feats = T.tmean(x, axis=(2, 3))
        return feats, attn

    def forward(self, x: Tensor, mode: str = "off", rng: Rng | None = None) -> ForwardOutput:
        feats, attn = self.features(x, mode, rng)
        return ForwardOutput(
            logits_old=self.head_old(feats),
            logits_new=self.head_new(feats),
            var_old=self.var_old(feats),
            var_new=self.var_new(feats),
            attention=attn,
        )

    def clone(self, frozen: bool = False) -> "IncrementalModel":
        """Deep copy; frozen copies drop grad participation."""
        out = IncrementalModel(self.arch, self.n_old, self.n_new)
        for (_, src), (_, dst) in zip(self.parameters(), out.parameters()):
            dst.data = src.data.copy()
            dst.requires_grad = not frozen
        return out

    def state_dict(self) -> dict:
        return {name: t.data for name, t in self.parameters()}


class ModelSnapshot:
    """Frozen deep copy of a model; the distillation teacher.

    Its unified head covers exactly the classes seen up to the snapshot.
    """

    def __init__(self, model: IncrementalModel):
        self.model = model.clone(frozen=True)

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    def forward(self, x: Tensor) -> ForwardOutput:
        """Deterministic gradient-free forward (dropout off, no recording)."""
        with T.paused():
            return self.model.forward(x, mode="off")


def snapshot(model: IncrementalModel) -> ModelSnapshot:
    return ModelSnapshot(model)


def init_parameters(model: IncrementalModel, rng: Rng, scheme: str = "uniform-fan-in") -> None:
    """Populate all parameters with U(-a, a), a = sqrt(1/fan_in).

    fan_in is the second weight extent times any kernel area; biases use
    their layer's fan_in. Attention gains are set to 0 so the fresh
    backbone equals the plain conv stack.
    """
    if scheme != "uniform-fan-in":
        raise ParameterError(f"unknown init scheme {scheme!r}")
    tensors = dict(model.parameters())
    for name, t in model.parameters():
        if name.endswith(".gain"):
            t.data = np.zeros_like(t.data)
            continue
        if t.ndim >= 2:
            fan_in = int(np.prod(t.shape[1:]))
        else:  # bias draws share the owning layer's fan_in
            sibling = tensors[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = int(np.prod(sibling.shape[1:]))
        a = math.sqrt(1.0 / max(fan_in, 1))
        t.data = (rng.uniform(t.shape) * 2.0 - 1.0) * a


def expand_heads(model: IncrementalModel, new_classes: int, rng: Rng) -> IncrementalModel:
    """Grow the class coverage for the next task.

    The returned model's old-class head is the concatenation of the old
    model's two heads (so its logits over previously seen classes are
    unchanged), the new-class head is freshly initialized, and backbone
    tensors are carried over by reference (the previous model object is
    retired; the teacher is a separate deep copy).
    """
    if new_classes < 1:
        raise ParameterError(f"expand_heads needs new_classes >= 1, got {new_classes}")
    out = IncrementalModel(model.arch, model.n_classes, new_classes)
    out.conv_w, out.conv_b = model.conv_w, model.conv_b
    out.stages = model.stages
    for merged, top, bottom in ((out.head_old, model.head_old, model.head_new),
                                (out.var_old, model.var_old, model.var_new)):
        merged.weight.data = np.concatenate([top.weight.data, bottom.weight.data], axis=0)
        merged.bias.data = np.concatenate([top.bias.data, bottom.bias.data], axis=0)
    feat = model.arch.widths[-1]
    a = math.sqrt(1.0 / feat)
    for layer in (out.head_new, out.var_new):
        layer.weight.data = (rng.uniform(layer.weight.shape) * 2.0 - 1.0) * a
        layer.bias.data = (rng.uniform(layer.bias.shape) * 2.0 - 1.0) * a
    return out


# ----------------------------------------------------------------------
# parameter container (binary, bit-exact round trip)
# ----------------------------------------------------------------------

_MAGIC = b"EVLN"
_VERSION = 1


def write_tensors(path, named: dict) -> None:
    """Write named float64 arrays to the flat binary container.

    Layout (all integers little-endian): magic "EVLN", version u32, count
    u64, then per entry: name length u16, UTF-8 name, rank u8, extents as
    u64, data as little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(named)))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def read_tensors(path) -> dict:
    """Inverse of :func:`write_tensors`; raises FormatError on bad files."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated container while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    off = 0
    magic = take(4, "magic")
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, count = struct.unpack("<IQ", take(12, "header"))
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last tensor")
    return out


def save_model(model: IncrementalModel, path) -> None:
    write_tensors(path, model.state_dict())


def load_model(model: IncrementalModel, path) -> None:
    """Load a container written by :func:`save_model` into a model with the
    same parameter names and shapes."""
    named = read_tensors(path)
    for name, t in model.parameters():
        if name not in named:
            raise FormatError(f"container is missing parameter {name}")
        if named[name].shape != t.shape:
            raise FormatError(
                f"shape mismatch for {name}: file {named[name].shape}, model {t.shape}")
        t.data = named[name]
