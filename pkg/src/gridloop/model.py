"""The recurrent grid transformer.

One trunk of ``trunk_layers`` pre-norm blocks (attention + gated
convolutional FFN) is applied repeatedly to a latent token state:

    z_t = trunk(z_{t-1} + e_t),   t = 1..T

with a learned per-step embedding ``e_t`` (clamped to its last learned row
beyond ``t_train``, so the loop extrapolates to longer inference schedules).
Because the trunk is reused every iteration, parameter count is independent
of T. A ``stacked`` mode applies T distinct blocks once each instead, as the
conventional non-recurrent baseline.

The token sequence is ``n_task_tokens`` demo-summary slots followed by a
dense ``canvas_height x canvas_width`` image canvas. Attention uses 2-D
axial rotary embeddings (first half of each head rotates by row coordinate,
second half by column); task slots sit at coordinate (0, 0). The FFN gates
image tokens through a depthwise 3x3 convolution over the canvas while task
tokens bypass the convolution entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as tl
from .canvas import Canvas, CanvasSpec

LOOPED, STACKED = "looped", "stacked"


class ConfigError(ValueError):
    """Raised for architecturally impossible configurations."""


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_heads: int = 4
    trunk_layers: int = 1
    t_train: int = 4
    t_max: int = 8
    ffn_expansion: int = 4
    n_task_tokens: int = 8
    canvas_height: int = 12
    canvas_width: int = 12
    n_colors: int = 10
    mode: str = LOOPED
    rms_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.mode not in (LOOPED, STACKED):
            raise ConfigError(f"mode must be {LOOPED!r} or {STACKED!r}, got {self.mode!r}")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 4 != 0:
            raise ConfigError(f"head dim {self.dim // self.n_heads} must be divisible "
                              "by 4 for axial rotary pairs")
        if (self.ffn_expansion * self.dim) % 2 != 0:
            raise ConfigError("ffn_expansion * dim must be even")
        if self.t_train < 1 or self.t_max < 1 or self.trunk_layers < 1:
            raise ConfigError("t_train, t_max and trunk_layers must all be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def ffn_width(self) -> int:
        """Inner width f of each ConvGLU branch; the gate/value split halves 2f."""
        return self.ffn_expansion * self.dim // 2

    @property
    def n_classes(self) -> int:
        return self.n_colors + 1  # colors + PAD

    @property
    def n_image_tokens(self) -> int:
        return self.canvas_height * self.canvas_width

    @property
    def n_tokens(self) -> int:
        return self.n_task_tokens + self.n_image_tokens

    @property
    def canvas_spec(self) -> CanvasSpec:
        return CanvasSpec(height=self.canvas_height, width=self.canvas_width,
                          n_task_tokens=self.n_task_tokens, n_colors=self.n_colors)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    attn_gain: tl.Tensor
    wq: tl.Tensor
    wk: tl.Tensor
    wv: tl.Tensor
    wo: tl.Tensor
    ffn_gain: tl.Tensor
    ffn_in: tl.Tensor
    ffn_in_bias: tl.Tensor
    conv_kernel: tl.Tensor
    conv_bias: tl.Tensor
    ffn_out: tl.Tensor
    ffn_out_bias: tl.Tensor

    def named(self, prefix):
        for name in ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "ffn_in",
                     "ffn_in_bias", "conv_kernel", "conv_bias", "ffn_out",
                     "ffn_out_bias"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class Params:
    """All learnable state, exposed as named tensors in a stable order.

    ``token_embedding`` has ``n_classes + 1`` rows: one per input class
    (colors then PAD) plus a final row of per-dimension projection weights
    that scale pooled demo summaries into task slots.
    """

    token_embedding: tl.Tensor
    slot_embedding: tl.Tensor
    step_embedding: Optional[tl.Tensor]  # None in stacked mode
    blocks: List[BlockParams]
    head_gain: tl.Tensor
    head_w: tl.Tensor
    head_bias: tl.Tensor

    def named(self):
        yield "token_embedding", self.token_embedding
        yield "slot_embedding", self.slot_embedding
        if self.step_embedding is not None:
            yield "step_embedding", self.step_embedding
        for i, block in enumerate(self.blocks):
            yield from block.named(f"blocks.{i}")
        yield "head.gain", self.head_gain
        yield "head.w", self.head_w
        yield "head.bias", self.head_bias

    def tensors(self):
        return [t for _, t in self.named()]


def _trunc_normal(rng, shape, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std)


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, f = config.dim, config.ffn_width

    def weight(shape):
        return tl.Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def ones(shape):
        return tl.Tensor(np.ones(shape), requires_grad=True)

    def zeros(shape):
        return tl.Tensor(np.zeros(shape), requires_grad=True)

    token_embedding = _trunc_normal(rng, (config.n_classes + 1, d))
    token_embedding[-1] = 1.0  # summary projection starts as identity gate
    blocks = []
    for _ in range(config.trunk_layers):
        kernel = _trunc_normal(rng, (f, 3, 3))
        kernel[:, 1, 1] += 1.0  # identity-leaning: early iterations stay near-stable
        blocks.append(BlockParams(
            attn_gain=ones(d),
            wq=weight((d, d)), wk=weight((d, d)), wv=weight((d, d)), wo=weight((d, d)),
            ffn_gain=ones(d),
            ffn_in=weight((d, 2 * f)), ffn_in_bias=zeros(2 * f),
            conv_kernel=tl.Tensor(kernel, requires_grad=True), conv_bias=zeros(f),
            ffn_out=weight((f, d)), ffn_out_bias=zeros(d),
        ))
    return Params(
        token_embedding=tl.Tensor(token_embedding, requires_grad=True),
        slot_embedding=weight((config.n_task_tokens, d)),
        step_embedding=zeros((config.t_train, d)) if config.mode == LOOPED else None,
        blocks=blocks,
        head_gain=ones(d),
        head_w=weight((d, config.n_classes)),
        head_bias=zeros(config.n_classes),
    )


def param_count(config: ModelConfig) -> int:
    """Closed-form learnable-parameter count; independent of loop length."""
    d, f = config.dim, config.ffn_width
    per_block = 2 * d + 4 * d * d + d * 2 * f + 2 * f + 9 * f + f + f * d + d
    count = (config.n_classes + 1) * d + config.n_task_tokens * d
    if config.mode == LOOPED:
        count += config.t_train * d
    count += config.trunk_layers * per_block
    count += d + d * config.n_classes + config.n_classes
    return count


# ---------------------------------------------------------------------------
# rotary tables


@lru_cache(maxsize=8)
def rope_tables(config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(cos, sin) of shape (n_tokens, head_dim) for the axial rotary scheme.

    Within each head, the first half of the dimensions rotates by the token's
    row coordinate and the second half by its column coordinate; pair ``i``
    of a half turns at frequency ``base ** (-2i / half_dim)``. Task slots sit
    at (0, 0), where every rotation is the identity.
    """
    d_h = config.head_dim
    half = d_h // 2
    freqs = config.rope_base ** (-2.0 * np.arange(half // 2) / half)
    rows = np.zeros(config.n_tokens)
    cols = np.zeros(config.n_tokens)
    idx = np.arange(config.n_image_tokens)
    rows[config.n_task_tokens:] = idx // config.canvas_width
    cols[config.n_task_tokens:] = idx % config.canvas_width
    # per-pair angles, then repeated so both elements of a pair share one
    angles = np.concatenate([
        np.repeat(rows[:, None] * freqs[None, :], 2, axis=1),
        np.repeat(cols[:, None] * freqs[None, :], 2, axis=1),
    ], axis=1)
    return np.cos(angles), np.sin(angles)  # float64; callers cast


def apply_rope(x: tl.Tensor, cos: np.ndarray, sin: np.ndarray) -> tl.Tensor:
    """Rotate each (even, odd) dimension pair of x by its table angle."""
    return tl.add(tl.elementwise_mul(x, tl.Tensor._wrap(cos.astype(x.data.dtype))),
                  tl.elementwise_mul(tl.rotate_pairs(x), tl.Tensor._wrap(sin.astype(x.data.dtype))))


# ---------------------------------------------------------------------------
# blocks


def attention(zn: tl.Tensor, block: BlockParams, config: ModelConfig,
              attn_sink: Optional[list] = None) -> tl.Tensor:
    """Multi-head self-attention with axial rotary offsets on Q and K.

    ``attn_sink``, when given, receives the per-head attention weights as
    detached arrays (n_heads, M, M) — diagnostics only.
    """
    cos, sin = rope_tables(config)
    d_h = config.head_dim
    q = tl.matmul(zn, block.wq)
    k = tl.matmul(zn, block.wk)
    v = tl.matmul(zn, block.wv)
    heads = []
    maps = []
    for h in range(config.n_heads):
        lo, hi = h * d_h, (h + 1) * d_h
        qh = apply_rope(tl.slice_cols(q, lo, hi), cos, sin)
        kh = apply_rope(tl.slice_cols(k, lo, hi), cos, sin)
        scores = tl.scale(tl.matmul(qh, tl.transpose(kh)), 1.0 / np.sqrt(d_h))
        weights = tl.softmax_rows(scores)
        if attn_sink is not None:
            maps.append(weights.data.copy())
        heads.append(tl.matmul(weights, tl.slice_cols(v, lo, hi)))
    if attn_sink is not None:
        attn_sink.append(np.stack(maps))
    return tl.matmul(tl.concat_cols(heads), block.wo)


def convglu(zn: tl.Tensor, block: BlockParams, config: ModelConfig) -> tl.Tensor:
    """Gated FFN whose image-token gates pass through a depthwise 3x3 conv."""
    gate, val = convglu_gate_and_value(zn, block, config)
    return tl.linear(tl.elementwise_mul(tl.silu(gate), val),
                     block.ffn_out, block.ffn_out_bias)


def convglu_gate_and_value(zn: tl.Tensor, block: BlockParams,
                           config: ModelConfig) -> Tuple[tl.Tensor, tl.Tensor]:
    """Post-convolution gate (pre-activation) and value branches.

    Exposed so tests can probe the conv receptive field and the task-token
    bypass without going through the output projection.
    """
    f = config.ffn_width
    u = tl.linear(zn, block.ffn_in, block.ffn_in_bias)
    gate = tl.slice_cols(u, 0, f)
    val = tl.slice_cols(u, f, 2 * f)
    gate_task = tl.slice_rows(gate, 0, config.n_task_tokens)
    gate_img = tl.slice_rows(gate, config.n_task_tokens, config.n_tokens)
    channels = tl.reshape(tl.transpose(gate_img),
                          (f, config.canvas_height, config.canvas_width))
    mixed = tl.dwconv3x3(channels, block.conv_kernel, block.conv_bias)
    gate_img = tl.transpose(tl.reshape(mixed, (f, config.n_image_tokens)))
    return tl.concat_rows([gate_task, gate_img]), val


def block_forward(z: tl.Tensor, block: BlockParams, config: ModelConfig,
                  attn_sink: Optional[list] = None) -> tl.Tensor:
    z = tl.add(z, attention(tl.rmsnorm(z, block.attn_gain, config.rms_eps),
                            block, config, attn_sink))
    return tl.add(z, convglu(tl.rmsnorm(z, block.ffn_gain, config.rms_eps),
                             block, config))


# ---------------------------------------------------------------------------
# embedding, loop, head


def _mean_row(count: int) -> tl.Tensor:
    return tl.Tensor._wrap(np.full((1, count), 1.0 / count,
                                   dtype=tl.default_dtype()))


# Transition slots pool *products* of two embedding rows, whose magnitude at
# initialization is the square of a single row's (std 0.02); this rescale
# lifts the pooled product back to single-row scale so the pathway starts
# with gradients comparable to the other slot contents.
TRANSITION_SCALE = 50.0


def embed(canvas: Canvas, params: Params, config: ModelConfig) -> tl.Tensor:
    """z_0: demo-summary task slots stacked above image-token lookups.

    The first min(n_demos, n_task_tokens) slots carry transition summaries:
    the mean, over a demo pair's occupied canvas cells, of the elementwise
    product between the input-cell and output-cell color embeddings — a
    bilinear co-occurrence feature that exposes which colors map to which.
    Remaining slots carry per-side summaries: the mean cell embedding of one
    grid side, gated by the learned projection row of the embedding table.
    """
    spec = config.canvas_spec
    if canvas.spec != spec:
        raise ConfigError(f"canvas spec {canvas.spec} does not match model {spec}")
    projection = tl.slice_rows(params.token_embedding, config.n_classes,
                               config.n_classes + 1)
    n_transition = min(canvas.n_demos, config.n_task_tokens)
    slots = []
    for j in range(config.n_task_tokens):
        if j < n_transition:
            inp, out = canvas.demo_classes[j]
            keep = np.flatnonzero((inp != spec.pad_class)
                                  | (out != spec.pad_class))
            pairs = tl.elementwise_mul(
                tl.embedding_rows(params.token_embedding, inp[keep]),
                tl.embedding_rows(params.token_embedding, out[keep]))
            content = tl.scale(tl.matmul(_mean_row(keep.size), pairs),
                               TRANSITION_SCALE)
        else:
            demo = ((j - n_transition) // 2) % canvas.n_demos
            side = (j - n_transition) % 2
            cells = canvas.demo_classes[demo, side]
            cells = cells[cells != spec.pad_class]  # pool over the grid itself
            pooled = tl.matmul(_mean_row(cells.size),
                               tl.embedding_rows(params.token_embedding, cells))
            content = tl.elementwise_mul(pooled, projection)
        slots.append(tl.add(tl.slice_rows(params.slot_embedding, j, j + 1),
                            content))
    image = tl.embedding_rows(params.token_embedding, canvas.image_classes)
    return tl.concat_rows(slots + [image])


def step_embedding_vector(params: Params, config: ModelConfig, t: int) -> tl.Tensor:
    """e_t as a flat d-vector; rows clamp at t_train (identity extrapolation)."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    row = min(t, config.t_train) - 1
    return tl.reshape(tl.slice_rows(params.step_embedding, row, row + 1),
                      (config.dim,))


def loop_step(z: tl.Tensor, t: int, params: Params, config: ModelConfig,
              attn_sink: Optional[list] = None) -> tl.Tensor:
    """One recurrence: z <- trunk(z + e_t). All blocks share one parameter set."""
    if config.mode != LOOPED:
        raise ConfigError("loop_step requires looped mode")
    z = tl.add_rowvec(z, step_embedding_vector(params, config, t))
    for block in params.blocks:
        z = block_forward(z, block, config, attn_sink)
    return z


def loop_forward(z0: tl.Tensor, params: Params, config: ModelConfig,
                 n_steps: int, attn_sink: Optional[list] = None) -> List[tl.Tensor]:
    """States [z_1 .. z_T] from iterating the tied trunk T times."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    states = []
    z = z0
    for t in range(1, n_steps + 1):
        z = loop_step(z, t, params, config, attn_sink)
        states.append(z)
    return states


def stacked_forward(z0: tl.Tensor, params: Params, config: ModelConfig,
                    attn_sink: Optional[list] = None) -> List[tl.Tensor]:
    """Baseline: distinct blocks applied once each, no step embeddings."""
    if config.mode != STACKED:
        raise ConfigError("stacked_forward requires stacked mode")
    states = []
    z = z0
    for block in params.blocks:
        z = block_forward(z, block, config, attn_sink)
        states.append(z)
    return states


def head_logits(z: tl.Tensor, params: Params, config: ModelConfig) -> tl.Tensor:
    """Per-token class logits (M, n_classes)."""
    return tl.linear(tl.rmsnorm(z, params.head_gain, config.rms_eps),
                     params.head_w, params.head_bias)


def image_logits(z: tl.Tensor, params: Params, config: ModelConfig) -> tl.Tensor:
    """Logits restricted to the image canvas rows (n_image_tokens, n_classes)."""
    return tl.slice_rows(head_logits(z, params, config),
                         config.n_task_tokens, config.n_tokens)


def image_probs(z: tl.Tensor, params: Params, config: ModelConfig) -> np.ndarray:
    """Per-pixel class distributions as a plain array (inference path)."""
    with tl.no_grad():
        return tl.softmax_rows(image_logits(z, params, config)).data


def flops_per_step(config: ModelConfig) -> int:
    """Analytic multiply-accumulate count for one trunk application."""
    m, d, f = config.n_tokens, config.dim, config.ffn_width
    d_h = config.head_dim
    attn = 4 * m * d * d + 2 * config.n_heads * m * m * d_h
    ffn = m * d * 2 * f + config.n_image_tokens * f * 9 + m * f * d
    return config.trunk_layers * (attn + ffn)
