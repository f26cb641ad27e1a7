"""Anchor-injected cross-attention alignment of one 8-frame slice.

Per slice: frame anchors (class token and patch-mean, each repeated X times
per frame) are concatenated with the instance prompts and added elementwise
onto learnable base queries. The optimized queries cross-attend over all
slice tokens (multi-head scaled dot-product, pre-attention layer norm on the
query stream, residual from the injected queries), then a two-layer GELU MLP
projects D -> 4D -> d_out.

Every step runs on the tape ops from :mod:`ipf.tensor`, so the whole block
is differentiable for the toy-fit runner and the finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .grouping import InstancePromptSet
from .tensor import Tape, Tensor

PARAM_NAMES = ("base_queries", "wq", "wk", "wv", "wo", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass(frozen=True)
class AlignConfig:
    """Dimensions of the alignment block.

    query_count = frames_per_slice * 2 * x_repeat + v_max (160 at defaults).
    ``patch_tokens`` is the per-frame patch count (the class token comes on
    top of it, so a slice carries frames_per_slice x (patch_tokens + 1)
    tokens of dimension d_model).
    """

    d_model: int
    d_out: int | None = None
    x_repeat: int = 5
    v_max: int = 80
    heads: int = 8
    frames_per_slice: int = 8
    patch_tokens: int = 256

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1:
            raise ValueError("d_model and heads must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if min(self.x_repeat, self.v_max, self.frames_per_slice, self.patch_tokens) < 1:
            raise ValueError("x_repeat, v_max, frames_per_slice, patch_tokens must be positive")
        if self.d_out is None:
            object.__setattr__(self, "d_out", self.d_model)

    @property
    def query_count(self) -> int:
        return self.frames_per_slice * 2 * self.x_repeat + self.v_max

    @property
    def tokens_per_frame(self) -> int:
        return self.patch_tokens + 1

    @property
    def hidden(self) -> int:
        return 4 * self.d_model

    def slice_shape(self) -> tuple[int, int, int]:
        return (self.frames_per_slice, self.tokens_per_frame, self.d_model)


@dataclass
class AlignParams:
    """Learnable state: base queries, attention projections, MLP weights."""

    base_queries: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def validate(self, config: AlignConfig) -> None:
        d, h, out = config.d_model, config.hidden, config.d_out
        expected = {
            "base_queries": (config.query_count, d),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "mlp_w1": (d, h),
            "mlp_b1": (h,),
            "mlp_w2": (h, out),
            "mlp_b2": (out,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ShapeError(f"parameter {name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name} contains non-finite values")


@dataclass
class AlignedSliceTokens:
    """query_count x d_out output of one slice."""

    tokens: Tensor
    slice_index: int = 0


def init_params(config: AlignConfig, seed: int = 0) -> AlignParams:
    """Deterministic seeded init: base queries N(0, 0.02), projections scaled 1/sqrt(D)."""
    rng = np.random.default_rng(seed)
    d, h, out = config.d_model, config.hidden, config.d_out

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    params = AlignParams(
        base_queries=normal((config.query_count, d), 0.02),
        wq=normal((d, d), 1.0 / math.sqrt(d)),
        wk=normal((d, d), 1.0 / math.sqrt(d)),
        wv=normal((d, d), 1.0 / math.sqrt(d)),
        wo=normal((d, d), 1.0 / math.sqrt(d)),
        mlp_w1=normal((d, h), 1.0 / math.sqrt(d)),
        mlp_b1=T.zeros((h,)),
        mlp_w2=normal((h, out), 1.0 / math.sqrt(h)),
        mlp_b2=T.zeros((out,)),
    )
    params.validate(config)
    return params


def _slice_array(slice_features: Tensor | np.ndarray, config: AlignConfig) -> np.ndarray:
    arr = slice_features.data if isinstance(slice_features, Tensor) else np.asarray(slice_features)
    if arr.shape != config.slice_shape():
        raise ShapeError(f"slice has shape {arr.shape}, expected {config.slice_shape()}")
    return arr


def frame_tokens(slice_features: Tensor | np.ndarray, x_repeat: int, config: AlignConfig) -> Tensor:
    """Per-frame anchor block: X copies of the class token, then X copies of
    the patch mean, stacked over the slice's frames -> (frames, 2X, D).

    Token index ``patch_tokens`` within each frame is the class token; the
    preceding indices are the patch tokens, in the layout the feature writer
    fixed.
    """
    arr = _slice_array(slice_features, config)
    cls = arr[:, config.patch_tokens, :]
    gf = arr[:, : config.patch_tokens, :].mean(axis=1)
    ft = np.empty((config.frames_per_slice, 2 * x_repeat, config.d_model), dtype=arr.dtype)
    ft[:, :x_repeat, :] = cls[:, None, :]
    ft[:, x_repeat:, :] = gf[:, None, :]
    return Tensor(ft)


def assemble_anchors(ft: Tensor, prompts: InstancePromptSet, config: AlignConfig) -> Tensor:
    """Flatten the frame anchors and append the instance prompts -> (query_count, D)."""
    expected_ft = (config.frames_per_slice, 2 * config.x_repeat, config.d_model)
    if ft.shape != expected_ft:
        raise ShapeError(f"frame tokens have shape {ft.shape}, expected {expected_ft}")
    if prompts.tokens.shape != (config.v_max, config.d_model):
        raise ShapeError(
            f"prompt set has shape {prompts.tokens.shape}, expected {(config.v_max, config.d_model)}"
        )
    flat = ft.data.reshape(-1, config.d_model)
    return Tensor(np.concatenate([flat, prompts.tokens], axis=0))


def _attention(q0, kv, params, config, tape, collect=None):
    """Multi-head cross-attention with residual; optionally collects weights."""
    qn = T.layernorm_rows(q0, tape=tape)
    q = T.matmul(qn, params.wq, tape=tape)
    k = T.matmul(kv, params.wk, tape=tape)
    v = T.matmul(kv, params.wv, tape=tape)
    head_dim = config.d_model // config.heads
    inv_scale = 1.0 / math.sqrt(head_dim)
    outputs = []
    for h in range(config.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = T.slice_cols(q, lo, hi, tape=tape)
        kh = T.slice_cols(k, lo, hi, tape=tape)
        vh = T.slice_cols(v, lo, hi, tape=tape)
        scores = T.scale(T.matmul(qh, T.transpose(kh, tape=tape), tape=tape), inv_scale, tape=tape)
        T.check_finite(scores, f"attention scores head {h}")
        weights = T.softmax_rows(scores, tape=tape)
        if collect is not None:
            collect.append(weights.data)
        outputs.append(T.matmul(weights, vh, tape=tape))
    merged = T.concat_cols(outputs, tape=tape)
    projected = T.matmul(merged, params.wo, tape=tape)
    T.check_finite(projected, "attention output projection")
    return T.add(q0, projected, tape=tape)


def align_forward(
    slice_features: Tensor | np.ndarray,
    anchors: Tensor,
    params: AlignParams,
    config: AlignConfig,
    slice_index: int = 0,
    tape: Tape | None = None,
    return_attention: bool = False,
):
    """Run the alignment block on one slice.

    Returns :class:`AlignedSliceTokens`; with ``return_attention=True`` also
    returns the per-head attention weight matrices (query_count x key_count).
    """
    arr = _slice_array(slice_features, config)
    if anchors.shape != (config.query_count, config.d_model):
        raise ShapeError(
            f"anchors have shape {anchors.shape}, expected {(config.query_count, config.d_model)}"
        )
    kv = Tensor(arr.reshape(-1, config.d_model))
    q0 = T.add(params.base_queries, anchors, tape=tape)
    collect = [] if return_attention else None
    attended = _attention(q0, kv, params, config, tape, collect)
    hidden = T.gelu(T.add_bias(T.matmul(attended, params.mlp_w1, tape=tape), params.mlp_b1, tape=tape), tape=tape)
    out = T.add_bias(T.matmul(hidden, params.mlp_w2, tape=tape), params.mlp_b2, tape=tape)
    T.check_finite(out, "mlp projection")
    result = AlignedSliceTokens(tokens=out, slice_index=slice_index)
    if return_attention:
        return result, collect
    return result


@dataclass
class TokenBudget:
    """Compressed vs full-projection token counts for an F-frame video."""

    frames: int
    slices: int
    per_slice: int
    compressed: int
    full_projection: int

    @property
    def ratio(self) -> float:
        return self.compressed / self.full_projection


def token_budget(config: AlignConfig, n_frames: int) -> TokenBudget:
    """floor(F/8) slices of query_count tokens, against the 8x257 baseline."""
    if n_frames < config.frames_per_slice:
        raise ValueError(
            f"need at least {config.frames_per_slice} frames, got {n_frames}"
        )
    slices = n_frames // config.frames_per_slice
    per_slice = config.query_count
    full_per_slice = config.frames_per_slice * config.tokens_per_frame
    return TokenBudget(
        frames=n_frames,
        slices=slices,
        per_slice=per_slice,
        compressed=slices * per_slice,
        full_projection=slices * full_per_slice,
    )


# ---------------------------------------------------------------------------
# Toy reconstruction fit and gradient verification of the block.
# ---------------------------------------------------------------------------

MICRO_CONFIG = AlignConfig(
    d_model=8, x_repeat=1, v_max=2, heads=2, frames_per_slice=2, patch_tokens=4
)


def reconstruction_loss(
    slice_features: Tensor,
    anchors: Tensor,
    params: AlignParams,
    config: AlignConfig,
    tape: Tape | None = None,
) -> Tensor:
    """Mean squared error between the aligned tokens and the anchor content."""
    if config.d_out != config.d_model:
        raise ShapeError("reconstruction target requires d_out == d_model")
    out = align_forward(slice_features, anchors, params, config, tape=tape).tokens
    diff = T.sub(out, anchors, tape=tape)
    return T.scale(T.sum_all(T.mul(diff, diff, tape=tape), tape=tape), 1.0 / out.size, tape=tape)


def _fixture_slice(config: AlignConfig, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=config.slice_shape()))


def _fixture_anchors(config: AlignConfig, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=(config.query_count, config.d_model)))


@dataclass
class ToyFitResult:
    initial_loss: float
    final_loss: float
    steps: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_loss / self.initial_loss


def toy_fit(steps: int = 200, lr: float = 0.05, seed: int = 0, config: AlignConfig | None = None) -> ToyFitResult:
    """Plain gradient descent of the reconstruction loss on a fixed synthetic slice."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    config = config or AlignConfig(d_model=32, heads=4)
    rng = np.random.default_rng(seed)
    slice_features = _fixture_slice(config, rng)
    anchors = _fixture_anchors(config, rng)
    params = init_params(config, seed=seed)

    initial = None
    loss_value = None
    for _ in range(steps):
        tape = Tape()
        loss = reconstruction_loss(slice_features, anchors, params, config, tape=tape)
        loss_value = loss.item()
        if initial is None:
            initial = loss_value
        leaves = params.named()
        grads = tape.gradients(loss, list(leaves.values()))
        updated = {
            name: Tensor(leaf.data - lr * grad)
            for (name, leaf), grad in zip(leaves.items(), grads)
        }
        params = AlignParams(**updated)
    final = reconstruction_loss(slice_features, anchors, params, config).item()
    return ToyFitResult(initial_loss=initial, final_loss=final, steps=steps)


def alignment_grad_checks(step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Finite-difference errors of the micro-config block loss, one entry per parameter."""
    config = MICRO_CONFIG
    rng = np.random.default_rng(seed)
    slice_features = _fixture_slice(config, rng)
    anchors = _fixture_anchors(config, rng)
    params = init_params(config, seed=seed)

    errors: dict[str, float] = {}
    for name in PARAM_NAMES:
        def loss_of(value: Tensor, tape: Tape | None, _name=name) -> Tensor:
            probe = replace(params, **{_name: value})
            return reconstruction_loss(slice_features, anchors, probe, config, tape=tape)

        errors[name] = T.grad_check(loss_of, getattr(params, name), step=step)
    return errors
