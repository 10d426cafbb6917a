"""Input embedding, the residual layer stack and the projection head.

Each layer applies, in order: pre-norm -> slice attention -> residual add ->
pre-norm -> feed-forward (affine, GELU, affine; hidden width ffn_mult * C) ->
residual add. The network maps point geometry (plus optional observed fields)
to per-point output fields and is permutation-equivariant over points when
the slice projector is pointwise.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .attention import AttentionParams, AttnTrace, physics_attention
from .errors import ConfigError, DataError, ShapeError
from .tensor import Graph, Tensor

CHECKPOINT_MAGIC = b"TSLV"
CHECKPOINT_VERSION = 1

PROJECTOR_KINDS = ("pointwise", "stencil3x3", "squares")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Desk-scale defaults; paper-scale values (8 layers, 128+ channels, 8 heads,
    32-64 slices) are selectable but make CPU runs long.
    """

    layers: int = 4
    channels: int = 64
    heads: int = 4
    slices: int = 16
    geom_dim: int = 2
    observed_dim: int = 1
    out_dim: int = 1
    projector: str = "pointwise"
    ffn_mult: int = 2
    square_side: int = 4

    def validate(self):
        for name in ("layers", "channels", "heads", "slices", "geom_dim", "out_dim",
                     "ffn_mult", "square_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.observed_dim < 0:
            raise ConfigError(f"observed_dim must be >= 0, got {self.observed_dim}")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by heads ({self.heads})"
            )
        if self.projector not in PROJECTOR_KINDS:
            raise ConfigError(
                f"projector must be one of {PROJECTOR_KINDS}, got '{self.projector}'"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def input_dim(self) -> int:
        return self.geom_dim + self.observed_dim


class ParamStore:
    """Named, ordered collection of trainable tensors.

    Iteration order is the construction order of ``init_params`` (embedding,
    then per-layer norms/attention/feed-forward, then the head); the
    checkpoint format serializes tensors in exactly this order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())


def param_specs(config: ModelConfig):
    """(name, shape, init) triples in store order; init is ("uniform", fan_in),
    ("zeros",) or ("ones",). The slice projector only exists for learnable
    projectors, which is the sole place the slice count enters the count."""
    c, h, m = config.channels, config.heads, config.slices
    ch = config.head_dim
    hidden = config.ffn_mult * c
    specs = [
        ("embed.w", (config.input_dim, c), ("uniform", config.input_dim)),
        ("embed.b", (c,), ("zeros",)),
    ]
    for i in range(config.layers):
        p = f"layer{i}"
        specs += [
            (f"{p}.ln1.gain", (c,), ("ones",)),
            (f"{p}.ln1.bias", (c,), ("zeros",)),
        ]
        if config.projector == "pointwise":
            specs += [
                (f"{p}.attn.slice_w", (h, ch, m), ("uniform", ch)),
                (f"{p}.attn.slice_b", (h, 1, m), ("zeros",)),
            ]
        elif config.projector == "stencil3x3":
            specs += [
                (f"{p}.attn.slice_w", (h, 3, 3, ch, m), ("uniform", 9 * ch)),
                (f"{p}.attn.slice_b", (h, 1, m), ("zeros",)),
            ]
        for role in ("q", "k", "v"):
            specs += [
                (f"{p}.attn.{role}_w", (h, ch, ch), ("uniform", ch)),
                (f"{p}.attn.{role}_b", (h, 1, ch), ("zeros",)),
            ]
        specs += [
            (f"{p}.attn.out_w", (c, c), ("uniform", c)),
            (f"{p}.attn.out_b", (c,), ("zeros",)),
            (f"{p}.ln2.gain", (c,), ("ones",)),
            (f"{p}.ln2.bias", (c,), ("zeros",)),
            (f"{p}.ffn.w1", (c, hidden), ("uniform", c)),
            (f"{p}.ffn.b1", (hidden,), ("zeros",)),
            (f"{p}.ffn.w2", (hidden, c), ("uniform", hidden)),
            (f"{p}.ffn.b2", (c,), ("zeros",)),
        ]
    specs += [
        ("head.w", (c, config.out_dim), ("uniform", c)),
        ("head.b", (config.out_dim,), ("zeros",)),
    ]
    return specs


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Seed-deterministic init: affine weights uniform in +/- 1/sqrt(fan_in),
    biases zero, layer-norm gains one."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, init in param_specs(config):
        if init[0] == "uniform":
            bound = 1.0 / np.sqrt(init[1])
            data = rng.uniform(-bound, bound, size=shape)
        elif init[0] == "zeros":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        store.add(name, Tensor(data))
    return store


def layer_attention_params(store: ParamStore, config: ModelConfig, i: int) -> AttentionParams:
    p = f"layer{i}.attn"
    learnable = config.projector in ("pointwise", "stencil3x3")
    return AttentionParams(
        kind=config.projector,
        slice_w=store[f"{p}.slice_w"] if learnable else None,
        slice_b=store[f"{p}.slice_b"] if learnable else None,
        q_w=store[f"{p}.q_w"], q_b=store[f"{p}.q_b"],
        k_w=store[f"{p}.k_w"], k_b=store[f"{p}.k_b"],
        v_w=store[f"{p}.v_w"], v_b=store[f"{p}.v_b"],
        out_w=store[f"{p}.out_w"], out_b=store[f"{p}.out_b"],
        square_side=config.square_side,
    )


def embed_inputs(g: Graph, geom, observed, store: ParamStore):
    """x0 = affine(concat(geometry, observed fields)) along the channel axis."""
    geom = g.as_tensor(geom)
    if observed is not None:
        observed = g.as_tensor(observed)
        if observed.shape[:-1] != geom.shape[:-1]:
            raise ShapeError(
                f"geometry rows {geom.shape[:-1]} and observed rows "
                f"{observed.shape[:-1]} disagree"
            )
        x = g.concat([geom, observed], axis=-1)
    else:
        x = geom
    return g.affine(x, store["embed.w"], store["embed.b"])


def transformer_layer(g: Graph, x, store: ParamStore, config: ModelConfig, i: int,
                     grid=None, trace: AttnTrace | None = None):
    """One pre-norm residual block: attention sublayer then feed-forward."""
    p = f"layer{i}"
    attn = physics_attention(
        g,
        g.layer_norm(x, store[f"{p}.ln1.gain"], store[f"{p}.ln1.bias"]),
        layer_attention_params(store, config, i),
        config.heads,
        grid=grid,
        trace=trace,
    )
    x = g.add(x, attn)
    h = g.layer_norm(x, store[f"{p}.ln2.gain"], store[f"{p}.ln2.bias"])
    h = g.affine(h, store[f"{p}.ffn.w1"], store[f"{p}.ffn.b1"])
    h = g.affine(g.gelu(h), store[f"{p}.ffn.w2"], store[f"{p}.ffn.b2"])
    return g.add(x, h)


def forward(g: Graph, geom, observed, store: ParamStore, config: ModelConfig,
            grid=None, traces: list | None = None):
    """Embed -> layer stack -> affine head. Inputs are (..., N, geom_dim) and
    optionally (..., N, observed_dim); output is (..., N, out_dim).

    ``traces``, when given, receives one AttnTrace per layer.
    """
    geom = g.as_tensor(geom)
    if geom.shape[-1] != config.geom_dim:
        raise ShapeError(f"geometry has {geom.shape[-1]} dims, config expects {config.geom_dim}")
    if config.observed_dim == 0:
        observed = None
    elif observed is None:
        raise ShapeError(f"config expects {config.observed_dim} observed channels, got none")
    elif np.shape(observed)[-1] != config.observed_dim:
        raise ShapeError(
            f"observed has {np.shape(observed)[-1]} channels, "
            f"config expects {config.observed_dim}"
        )
    x = embed_inputs(g, geom, observed, store)
    for i in range(config.layers):
        trace = None
        if traces is not None:
            trace = AttnTrace()
            traces.append(trace)
        x = transformer_layer(g, x, store, config, i, grid=grid, trace=trace)
    return g.affine(x, store["head.w"], store["head.b"])


# -- checkpoint serialization -------------------------------------------------

_FIELD_INT, _FIELD_STR = 0, 1


def _write_config(buf, config: ModelConfig):
    flds = fields(ModelConfig)
    buf.write(struct.pack("<I", len(flds)))
    for f in flds:
        value = getattr(config, f.name)
        name = f.name.encode()
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        if f.type in ("int", int):
            buf.write(struct.pack("<BI", _FIELD_INT, value))
        else:
            raw = str(value).encode()
            buf.write(struct.pack("<BI", _FIELD_STR, len(raw)))
            buf.write(raw)


def _read_exact(buf, n):
    raw = buf.read(n)
    if len(raw) != n:
        raise DataError("checkpoint truncated")
    return raw


def _read_config(buf) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    values = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, nlen).decode()
        if name not in known:
            raise DataError(f"checkpoint has unknown config field '{name}'")
        (tag,) = struct.unpack("<B", _read_exact(buf, 1))
        if tag == _FIELD_INT:
            (values[name],) = struct.unpack("<I", _read_exact(buf, 4))
        elif tag == _FIELD_STR:
            (slen,) = struct.unpack("<I", _read_exact(buf, 4))
            values[name] = _read_exact(buf, slen).decode()
        else:
            raise DataError(f"checkpoint has unknown field tag {tag}")
    try:
        return ModelConfig(**values).validate()
    except (TypeError, ConfigError) as exc:
        raise DataError(f"checkpoint config invalid: {exc}") from exc


def save_checkpoint(path, config: ModelConfig, store: ParamStore):
    """Magic "TSLV", version, field-tagged config, then each tensor in store
    order as (name length, name, rank, extents, little-endian float64 data)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_config(buf, config)
    for name, t in store.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Bit-exact inverse of save_checkpoint; validates names and shapes
    against the config's parameter layout."""
    try:
        with open(path, "rb") as fh:
            buf = io.BytesIO(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    config = _read_config(buf)
    store = ParamStore()
    for expect_name, expect_shape, _ in param_specs(config):
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, nlen).decode()
        (rank,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
        if name != expect_name or tuple(shape) != tuple(expect_shape):
            raise DataError(
                f"checkpoint tensor '{name}' {shape} does not match expected "
                f"'{expect_name}' {tuple(expect_shape)}"
            )
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape)
        store.add(name, Tensor(data.copy()))
    if buf.read(1):
        raise DataError("checkpoint has trailing bytes")
    return config, store
