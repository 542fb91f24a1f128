"""TabMixer: LMResidual blocks plus a squeeze head producing a label distribution."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .augment import (
    GateParams,
    LearnerParams,
    NoiseSource,
    gaussian_augment,
    horizontal_attention,
    learner_forward,
    tile_sample,
    uniform_init,
)
from .errors import ConfigurationError, DimensionError, ParseError
from .numerics import Tensor

N_BLOCKS = 12
MLP_HIDDEN = 512
LN_EPS = 1e-5

AUGMENTED = "augmented"
TILED = "tiled"

# block formulations: see lm_residual
LITERAL = "literal"
RESIDUAL = "residual"
BLOCK_FORMS = (LITERAL, RESIDUAL)


@dataclass
class LmResidualParams:
    kernel: Tensor      # [3, 3]
    conv_bias: Tensor   # [1]
    ln_gain: Tensor     # [n]
    ln_bias: Tensor     # [n]
    w1: Tensor          # [n, hidden]
    b1: Tensor          # [hidden]
    w2: Tensor          # [hidden, n]
    b2: Tensor          # [n]
    axis: str = "columns"   # "columns": rows are fed to the MLP as-is; "rows": transposed

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, hidden: int = MLP_HIDDEN,
             axis: str = "columns", prefix: str = "block") -> "LmResidualParams":
        if axis not in ("columns", "rows"):
            raise ConfigurationError(f"unknown mixing axis {axis!r}")
        relu_gain = np.sqrt(2.0)
        t = lambda a, name: Tensor(a, True, f"{prefix}.{name}")  # noqa: E731
        return cls(
            t(uniform_init(rng, 9, (3, 3), relu_gain), "kernel"),
            t(np.zeros(1), "conv_bias"),
            t(np.ones(n), "ln_gain"),
            t(np.zeros(n), "ln_bias"),
            t(uniform_init(rng, n, (n, hidden), relu_gain), "w1"),
            t(np.zeros(hidden), "b1"),
            t(uniform_init(rng, hidden, (hidden, n)), "w2"),
            t(np.zeros(n), "b2"),
            axis,
        )

    def tensors(self) -> list[Tensor]:
        return [self.kernel, self.conv_bias, self.ln_gain, self.ln_bias,
                self.w1, self.b1, self.w2, self.b2]


@dataclass
class TabMixerModel:
    learner: LearnerParams
    gate: GateParams
    blocks: list[LmResidualParams]
    squeeze_w: Tensor   # [n, c]
    squeeze_b: Tensor   # [c]
    form: str = RESIDUAL

    @classmethod
    def init(cls, n: int, c: int, seed: int = 1024, blocks: int = N_BLOCKS,
             hidden: int = MLP_HIDDEN, learner_hidden: int = 64,
             form: str = RESIDUAL) -> "TabMixerModel":
        if n < 1 or c < 1 or blocks < 1 or hidden < 1:
            raise ConfigurationError("model extents must be positive")
        if form not in BLOCK_FORMS:
            raise ConfigurationError(f"unknown block form {form!r}")
        rng = np.random.default_rng(seed)
        learner = LearnerParams.init(n, rng, learner_hidden)
        gate = GateParams.init(n, rng)
        stack = [LmResidualParams.init(n, rng, hidden, "columns" if i % 2 == 0 else "rows",
                                       prefix=f"blocks.{i}")
                 for i in range(blocks)]
        if form == RESIDUAL:
            # the gate is linear in x, so each unscaled branch grows the stream
            # by ~1.3x; shrinking the last projection keeps twelve blocks bounded
            for blk in stack:
                blk.w2.data *= blocks ** -0.5
        sw = Tensor(uniform_init(rng, n, (n, c)), True, "squeeze.weight")
        sb = Tensor(np.zeros(c), True, "squeeze.bias")
        return cls(learner, gate, stack, sw, sb, form)

    @property
    def n(self) -> int:
        return self.squeeze_w.shape[0]

    @property
    def c(self) -> int:
        return self.squeeze_w.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every parameter in checkpoint order."""
        out = [(f"learner.{k}", t) for k, t in zip(("w1", "b1", "w2", "b2", "w3", "b3"),
                                                   self.learner.tensors())]
        out += [("gate.weight", self.gate.weight), ("gate.bias", self.gate.bias)]
        keys = ("kernel", "conv_bias", "ln_gain", "ln_bias", "w1", "b1", "w2", "b2")
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{k}", t) for k, t in zip(keys, blk.tensors())]
        out += [("squeeze.weight", self.squeeze_w), ("squeeze.bias", self.squeeze_b)]
        return out

    def parameters(self, include_learner: bool = True) -> list[Tensor]:
        learner = {id(t) for t in self.learner.tensors()}
        return [t for _, t in self.named_parameters() if include_learner or id(t) not in learner]

    def copy(self) -> "TabMixerModel":
        return load_state(self.state_dict())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.named_parameters()}
        out[FORM_RECORD] = np.array([float(BLOCK_FORMS.index(self.form))])
        return out


def la_block(x, kernel, bias) -> Tensor:
    """Local attention: relu of a same-size 3x3 convolution."""
    return nx.relu(nx.conv2d_3x3(x, kernel, bias))


def lm_residual(x, p: LmResidualParams, form: str = LITERAL) -> Tensor:
    """One mixing block, the MLP acting along ``p.axis``.

    ``literal``:  ``LA(x) * MLP(LayerNorm(x) + x)``
    ``residual``: ``x + LA(x) * MLP(LayerNorm(x))``

    The literal block is quadratic in the scale of ``x`` (the gate and the
    ``+ x`` inside the MLP both grow with it), so a stack of twelve either
    collapses to zero or overflows. The residual form keeps the same gate and
    perceptron but moves the skip connection outside, and is what
    :class:`TabMixerModel` uses unless told otherwise.
    """
    if form not in BLOCK_FORMS:
        raise ConfigurationError(f"unknown block form {form!r}")
    x = nx.as_tensor(x)
    n = x.shape[-1]
    if x.shape[-2] != n or p.w1.shape[0] != n:
        raise DimensionError(f"block of width {p.w1.shape[0]} cannot take input {x.shape}")
    gate = la_block(x, p.kernel, p.conv_bias)
    xt = nx.transpose(x) if p.axis == "rows" else x
    z = nx.layer_norm(xt, p.ln_gain, p.ln_bias, LN_EPS)
    if form == LITERAL:
        z = nx.add(z, xt)
    h = nx.relu(nx.linear(z, p.w1, p.b1))
    mixed = nx.linear(h, p.w2, p.b2)
    if p.axis == "rows":
        mixed = nx.transpose(mixed)
    out = nx.mul(gate, mixed)
    return nx.add(x, out) if form == RESIDUAL else out


def tabmixer_forward(model: TabMixerModel, g_star) -> Tensor:
    """Blocks, column-mean squeeze, linear n -> c, softmax. [.., n, n] -> [.., c]."""
    x = nx.as_tensor(g_star)
    shape = x.shape
    for blk in model.blocks:
        x = lm_residual(x, blk, model.form)
        assert x.shape == shape, "LMResidual changed the feature-map shape"
    pooled = nx.mean_columns(x)
    return nx.softmax_rows(nx.linear(pooled, model.squeeze_w, model.squeeze_b))


def expand(model: TabMixerModel, v, noise: NoiseSource | None, mode: str) -> Tensor:
    """The feature matrix fed to the blocks (after horizontal attention)."""
    if mode == AUGMENTED:
        if noise is None:
            raise ConfigurationError("augmented mode needs a noise source")
        sigma = learner_forward(v, model.learner)
        g = gaussian_augment(v, sigma, noise)
    elif mode == TILED:
        g = tile_sample(v)
    else:
        raise ConfigurationError(f"unknown predict mode {mode!r}")
    return horizontal_attention(g, model.gate)


def predict(model: TabMixerModel, v, noise: NoiseSource | None = None,
            mode: str = AUGMENTED) -> Tensor:
    v = nx.as_tensor(v)
    if v.shape[-1] != model.n:
        raise DimensionError(f"model expects {model.n} features, got {v.shape[-1]}")
    return tabmixer_forward(model, expand(model, v, noise, mode))


def predict_batch(model: TabMixerModel, features: np.ndarray, noise: NoiseSource | None,
                  mode: str = AUGMENTED, chunk: int = 256) -> np.ndarray:
    """Inference over many rows without recording a tape."""
    features = np.asarray(features, dtype=np.float64)
    out = np.empty((features.shape[0], model.c))
    for s in range(0, features.shape[0], chunk):
        out[s:s + chunk] = predict(model, features[s:s + chunk], noise, mode).data
    return out


# ---------------------------------------------------------------------------
# TBMX checkpoints
# ---------------------------------------------------------------------------
#
# little-endian layout:
#   b"TBMX" | u32 version
#   repeated until EOF:
#     u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f64 payload
# Records follow TabMixerModel.named_parameters(), then "model.block_form";
# extra records (e.g. the feature scaler) may follow under other names.

TBMX_MAGIC = b"TBMX"
TBMX_VERSION = 1
# index into BLOCK_FORMS, stored as a one-element record after the parameters
FORM_RECORD = "model.block_form"


def save_checkpoint(model: TabMixerModel, path, extra: dict[str, np.ndarray] | None = None) -> None:
    parts = [TBMX_MAGIC, struct.pack("<I", TBMX_VERSION)]
    records = [(k, t.data) for k, t in model.named_parameters()]
    records.append((FORM_RECORD, np.array([float(BLOCK_FORMS.index(model.form))])))
    records += list((extra or {}).items())
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != TBMX_MAGIC:
        raise ParseError(f"{path}: not a TBMX checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TBMX_VERSION:
        raise ParseError(f"{path}: unsupported TBMX version {version}")
    pos, records = 8, {}
    try:
        while pos < len(raw):
            (ln,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims)) * 8
            if pos + size > len(raw):
                raise ParseError(f"{path}: truncated record {name!r}")
            records[name] = np.frombuffer(raw, "<f8", int(np.prod(dims)), pos).reshape(dims).copy()
            pos += size
    except struct.error:
        raise ParseError(f"{path}: truncated checkpoint") from None
    return records


def load_state(state: dict[str, np.ndarray]) -> TabMixerModel:
    """Rebuild a model from named arrays (dimensions inferred from shapes)."""
    try:
        n, hidden_l = state["learner.w1"].shape
        c = state["squeeze.weight"].shape[1]
        n_blocks = 0
        while f"blocks.{n_blocks}.w1" in state:
            n_blocks += 1
        hidden = state["blocks.0.w1"].shape[1]
    except KeyError as exc:
        raise ParseError(f"checkpoint lacks parameter {exc}") from None
    code = state.get(FORM_RECORD, np.array([float(BLOCK_FORMS.index(RESIDUAL))]))
    if code.shape != (1,) or code[0] not in range(len(BLOCK_FORMS)):
        raise ParseError(f"bad {FORM_RECORD} record {code!r}")
    model = TabMixerModel.init(n, c, seed=0, blocks=n_blocks, hidden=hidden, learner_hidden=hidden_l,
                               form=BLOCK_FORMS[int(code[0])])
    for name, t in model.named_parameters():
        arr = state.get(name)
        if arr is None:
            raise ParseError(f"checkpoint lacks parameter {name!r}")
        if arr.shape != t.shape:
            raise ParseError(f"parameter {name!r} has shape {arr.shape}, expected {t.shape}")
        t.data = np.array(arr, dtype=np.float64)
    return model


def load_checkpoint(path) -> tuple[TabMixerModel, dict[str, np.ndarray]]:
    """Model plus any extra (non-parameter) records."""
    state = read_checkpoint(path)
    model = load_state(state)
    names = {k for k, _ in model.named_parameters()} | {FORM_RECORD}
    return model, {k: v for k, v in state.items() if k not in names}
