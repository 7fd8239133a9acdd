"""Patch-token transformer encoder with an optional quality token.

Two branches share this code. The error-map branch encodes the N patch
tokens alone. The quality branch prepends one learnable token whose
attention over the patch tokens is captured per layer for diagnostics
and whose final-layer state feeds the fusion head.

Blocks are pre-norm: x += attn(norm(x)); x += mlp(norm(x)). Setting
``literal_block`` switches to an alternate wiring in which the
attention residual feeds the MLP directly and the MLP path has no
second normalization (kept for comparison runs; not the default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .imaging import GrayImage
from .params import ParamStore, trunc_normal
from .rng import CounterRng

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    use_pqt: bool = True
    selected_layers: tuple = (0, 1, 2, 4)
    gap_grid: int = 1
    pqt_attn_capture: bool = True
    literal_block: bool = False

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ArgumentError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ArgumentError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim < 1 or self.layers < 1 or self.heads < 1:
            raise ArgumentError("embed_dim, layers, and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ArgumentError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ArgumentError("mlp_ratio must be positive")
        sel = tuple(int(x) for x in self.selected_layers)
        if not sel:
            raise ArgumentError("selected_layers must not be empty")
        if list(sel) != sorted(set(sel)):
            raise ArgumentError("selected_layers must be strictly ascending")
        if sel[0] < 0 or sel[-1] > self.layers:
            raise ArgumentError(f"selected_layers must lie in 0..{self.layers}, got {sel}")
        object.__setattr__(self, "selected_layers", sel)
        if self.gap_grid < 1:
            raise ArgumentError("gap_grid must be at least 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


def paper_scale_config() -> ModelConfig:
    """Full-scale preset; expressible but far beyond desk budgets."""
    return ModelConfig(
        image_size=224,
        patch_size=16,
        embed_dim=768,
        layers=12,
        heads=16,
        selected_layers=(0, 2, 6, 11),
    )


def tiny_config(use_pqt: bool = True) -> ModelConfig:
    """Small configuration for gradient checks and fast tests."""
    return ModelConfig(
        image_size=32,
        patch_size=8,
        embed_dim=16,
        layers=2,
        heads=2,
        use_pqt=use_pqt,
        selected_layers=(0, 1, 2),
        gap_grid=2,
    )


@dataclass
class EncoderOutput:
    """Per-layer token records from one encoder forward.

    layer_tokens holds patch tokens (quality token stripped) for each
    selected layer index, 0 meaning the embedding output. pqt_tokens and
    pqt_attention are per-block records for the quality branch; the
    attention vectors are detached numpy arrays over the N patch tokens,
    head-averaged and renormalized to sum to 1.
    """

    layer_tokens: dict
    pqt_tokens: list | None = None
    pqt_attention: list | None = None


def init_encoder_params(
    store: ParamStore,
    cfg: ModelConfig,
    rng: CounterRng,
    prefix: str,
    with_token: bool,
    dtype=np.float32,
) -> None:
    d = cfg.embed_dim
    p2 = cfg.patch_size * cfg.patch_size
    hid = cfg.mlp_hidden
    if with_token:
        store.add(f"{prefix}.token", (rng.normal(d) * INIT_STD).astype(dtype), dtype=dtype)
    store.add(f"{prefix}.embed.w", trunc_normal(rng, (p2, d), INIT_STD, dtype), dtype=dtype)
    store.add(f"{prefix}.embed.b", np.zeros(d, dtype=dtype), dtype=dtype)
    store.add(f"{prefix}.pos", trunc_normal(rng, (cfg.num_patches, d), INIT_STD, dtype), dtype=dtype)
    for layer in range(1, cfg.layers + 1):
        base = f"{prefix}.block{layer}"
        store.add(f"{base}.ln1.g", np.ones(d, dtype=dtype), dtype=dtype)
        store.add(f"{base}.ln1.b", np.zeros(d, dtype=dtype), dtype=dtype)
        for proj in ("wq", "wk", "wv", "wo"):
            store.add(f"{base}.attn.{proj}", trunc_normal(rng, (d, d), INIT_STD, dtype), dtype=dtype)
        for bias in ("bq", "bk", "bv", "bo"):
            store.add(f"{base}.attn.{bias}", np.zeros(d, dtype=dtype), dtype=dtype)
        if not cfg.literal_block:
            store.add(f"{base}.ln2.g", np.ones(d, dtype=dtype), dtype=dtype)
            store.add(f"{base}.ln2.b", np.zeros(d, dtype=dtype), dtype=dtype)
        store.add(f"{base}.mlp.w1", trunc_normal(rng, (d, hid), INIT_STD, dtype), dtype=dtype)
        store.add(f"{base}.mlp.b1", np.zeros(hid, dtype=dtype), dtype=dtype)
        store.add(f"{base}.mlp.w2", trunc_normal(rng, (hid, d), INIT_STD, dtype), dtype=dtype)
        store.add(f"{base}.mlp.b2", np.zeros(d, dtype=dtype), dtype=dtype)


def extract_patches(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) -> (N, patch*patch), patches ordered row-major."""
    h, w = pixels.shape
    gh, gw = h // patch, w // patch
    tiles = pixels.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch))


def patchify_embed(img: GrayImage, store: ParamStore, cfg: ModelConfig, prefix: str) -> T.Tensor:
    """Project flattened patches and add the learned position embedding."""
    if (img.height, img.width) != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image is {img.height}x{img.width}, config expects "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    w = store[f"{prefix}.embed.w"]
    patches = T.constant(extract_patches(img.pixels, cfg.patch_size), dtype=w.data.dtype)
    tokens = T.linear(patches, w, store[f"{prefix}.embed.b"])
    return T.add(tokens, store[f"{prefix}.pos"])


def encoder_block(
    x: T.Tensor,
    store: ParamStore,
    cfg: ModelConfig,
    prefix: str,
    layer: int,
    capture: bool = False,
):
    """One transformer block; optionally captures the token's attention.

    Returns (tokens, attention) where attention is a detached (N,) numpy
    vector over the patch tokens (row 0 of the attention matrix with the
    self entry dropped, renormalized per head, then head-averaged), or
    None when capture is off.
    """
    base = f"{prefix}.block{layer}"
    n_tokens = x.shape[0]
    d = cfg.embed_dim
    dh = d // cfg.heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    xn = T.layer_norm(x, store[f"{base}.ln1.g"], store[f"{base}.ln1.b"])
    q = T.linear(xn, store[f"{base}.attn.wq"], store[f"{base}.attn.bq"])
    k = T.linear(xn, store[f"{base}.attn.wk"], store[f"{base}.attn.bk"])
    v = T.linear(xn, store[f"{base}.attn.wv"], store[f"{base}.attn.bv"])

    heads_out = []
    att_acc = None
    for i in range(cfg.heads):
        lo, hi = i * dh, (i + 1) * dh
        qi = T.slice_cols(q, lo, hi)
        ki = T.slice_cols(k, lo, hi)
        vi = T.slice_cols(v, lo, hi)
        logits = T.scale(T.matmul(qi, T.transpose(ki)), inv_sqrt)
        att = T.softmax_rows(logits)
        if capture:
            row = att.data[0, 1:].astype(np.float64)
            row = row / row.sum()
            att_acc = row if att_acc is None else att_acc + row
        heads_out.append(T.matmul(att, vi))
    merged = heads_out[0] if cfg.heads == 1 else T.concat(heads_out, axis=1)
    attn_out = T.linear(merged, store[f"{base}.attn.wo"], store[f"{base}.attn.bo"])
    t = T.add(x, attn_out)

    if cfg.literal_block:
        m = T.linear(t, store[f"{base}.mlp.w1"], store[f"{base}.mlp.b1"])
        m = T.gelu(m)
        m = T.linear(m, store[f"{base}.mlp.w2"], store[f"{base}.mlp.b2"])
    else:
        tn = T.layer_norm(t, store[f"{base}.ln2.g"], store[f"{base}.ln2.b"])
        m = T.linear(tn, store[f"{base}.mlp.w1"], store[f"{base}.mlp.b1"])
        m = T.gelu(m)
        m = T.linear(m, store[f"{base}.mlp.w2"], store[f"{base}.mlp.b2"])
    out = T.add(t, m)

    vec = None
    if capture and att_acc is not None:
        vec = (att_acc / cfg.heads).astype(np.float32)
    return out, vec


def encode(
    img: GrayImage,
    store: ParamStore,
    cfg: ModelConfig,
    branch: str = "pem",
    weight_prefix: str | None = None,
    capture: bool | None = None,
) -> EncoderOutput:
    """Run the encoder for one branch.

    branch "pem" consumes the N patch tokens; branch "pqt" prepends the
    learnable quality token (requires cfg.use_pqt). ``weight_prefix``
    overrides which parameter family the blocks read, which is how a
    shared backbone is expressed; the quality token itself always lives
    under "pqt.token".
    """
    if branch not in ("pem", "pqt"):
        raise ArgumentError(f"unknown branch {branch!r}")
    with_token = branch == "pqt"
    if with_token and not cfg.use_pqt:
        raise ArgumentError("quality-token branch requested but use_pqt is off")
    prefix = weight_prefix if weight_prefix is not None else branch
    if capture is None:
        capture = cfg.pqt_attn_capture
    capture = capture and with_token

    x = patchify_embed(img, store, cfg, prefix)
    n = cfg.num_patches
    if with_token:
        token = T.reshape(store["pqt.token"], (1, cfg.embed_dim))
        x = T.concat([token, x], axis=0)

    def patch_rows(tokens: T.Tensor) -> T.Tensor:
        return T.slice_rows(tokens, 1, n + 1) if with_token else tokens

    selected = set(cfg.selected_layers)
    layer_tokens: dict = {}
    pqt_tokens: list = [] if with_token else None
    pqt_attention: list = [] if capture else None
    if 0 in selected:
        layer_tokens[0] = patch_rows(x)
    for layer in range(1, cfg.layers + 1):
        x, vec = encoder_block(x, store, cfg, prefix, layer, capture=capture)
        if layer in selected:
            layer_tokens[layer] = patch_rows(x)
        if with_token:
            pqt_tokens.append(T.reshape(T.slice_rows(x, 0, 1), (cfg.embed_dim,)))
        if capture:
            pqt_attention.append(vec)
    return EncoderOutput(layer_tokens, pqt_tokens, pqt_attention)
