"""Fusion head, quality regression loss, and attention-map export.

The predicted error map is pooled and linearly lifted to the token
width; the lifted vector is summed with the final quality-token state
and regressed to a scalar by a two-layer head with a single shared
PReLU. Ablation modes regress either vector alone through the same
head.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import ModelConfig
from .errors import ArgumentError, DimensionError
from .imaging import GrayImage
from .params import ParamStore, trunc_normal
from .rng import CounterRng

INIT_STD = 0.02
ABLATION_MODES = ("both", "pem_only", "pqt_only")

# below this spread an attention map is treated as constant on export
_FLAT_EPS = 1e-9


def init_fusion_params(
    store: ParamStore,
    cfg: ModelConfig,
    rng: CounterRng,
    mode: str = "both",
    prefix: str = "fuse",
    dtype=np.float32,
) -> None:
    """Create the head parameters a given ablation mode actually uses."""
    if mode not in ABLATION_MODES:
        raise ArgumentError(f"unknown ablation mode {mode!r}")
    d = cfg.embed_dim
    if mode != "pqt_only":
        k = cfg.gap_grid * cfg.gap_grid
        store.add(f"{prefix}.mlp1.w", trunc_normal(rng, (k, d), INIT_STD, dtype), dtype=dtype)
        store.add(f"{prefix}.mlp1.b", np.zeros(d, dtype=dtype), dtype=dtype)
    store.add(f"{prefix}.mlp2.w1", trunc_normal(rng, (d, d), INIT_STD, dtype), dtype=dtype)
    store.add(f"{prefix}.mlp2.b1", np.zeros(d, dtype=dtype), dtype=dtype)
    store.add(f"{prefix}.mlp2.slope", np.asarray(0.25, dtype=dtype), dtype=dtype)
    store.add(f"{prefix}.mlp2.w2", trunc_normal(rng, (d, 1), INIT_STD, dtype), dtype=dtype)
    store.add(f"{prefix}.mlp2.b2", np.zeros(1, dtype=dtype), dtype=dtype)


def fuse_and_predict(
    pem: T.Tensor | None,
    pqt_token: T.Tensor | None,
    store: ParamStore,
    cfg: ModelConfig,
    mode: str = "both",
    prefix: str = "fuse",
) -> T.Tensor:
    """Regress one scalar score from the available branch outputs."""
    if mode not in ABLATION_MODES:
        raise ArgumentError(f"unknown ablation mode {mode!r}")
    d = cfg.embed_dim

    v_pem = None
    if mode != "pqt_only":
        if pem is None:
            raise ArgumentError(f"mode {mode!r} needs a predicted error map")
        pooled = T.global_average_pool(pem, cfg.gap_grid)
        pooled = T.reshape(pooled, (1, pooled.size))
        v_pem = T.linear(pooled, store[f"{prefix}.mlp1.w"], store[f"{prefix}.mlp1.b"])

    z_pqt = None
    if mode != "pem_only":
        if pqt_token is None:
            raise ArgumentError(f"mode {mode!r} needs a quality-token state")
        if pqt_token.size != d:
            raise DimensionError(f"quality token has {pqt_token.size} entries, expected {d}")
        z_pqt = T.reshape(pqt_token, (1, d))

    if mode == "both":
        fused = T.add(v_pem, z_pqt)
    elif mode == "pem_only":
        fused = v_pem
    else:
        fused = z_pqt

    hidden = T.linear(fused, store[f"{prefix}.mlp2.w1"], store[f"{prefix}.mlp2.b1"])
    hidden = T.prelu(hidden, store[f"{prefix}.mlp2.slope"])
    out = T.linear(hidden, store[f"{prefix}.mlp2.w2"], store[f"{prefix}.mlp2.b2"])
    return T.reshape(out, ())


def quality_loss(preds: T.Tensor, targets) -> T.Tensor:
    """Mean absolute error between predicted and target scores."""
    t = targets if isinstance(targets, T.Tensor) else T.constant(
        np.asarray(targets, dtype=preds.data.dtype), dtype=preds.data.dtype
    )
    if t.shape != preds.shape:
        raise DimensionError(f"prediction shape {preds.shape} vs target shape {t.shape}")
    if preds.size < 1:
        raise ArgumentError("need at least one prediction")
    return T.mean(T.abs_(T.sub(preds, t)))


def extract_attention_map(layer_vectors: list, out_h: int, out_w: int) -> GrayImage:
    """Average per-layer attention vectors into a normalized spatial map.

    Vectors are the captured per-layer quality-token attentions (each
    sums to 1 over the N patch tokens). The average is reshaped onto the
    patch grid, bilinearly resized, then min-max normalized; a constant
    map is defined as all zeros.
    """
    if not layer_vectors:
        raise ArgumentError("no attention vectors given")
    n = layer_vectors[0].shape[0]
    grid = int(round(np.sqrt(n)))
    if grid * grid != n:
        raise ArgumentError(f"attention length {n} is not a perfect square")
    for v in layer_vectors:
        if v.shape != (n,):
            raise ArgumentError("attention vectors disagree in length")
    avg = np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in layer_vectors]), axis=0)
    fmap = T.constant(avg.reshape(1, grid, grid), dtype=np.float64)
    resized = T.bilinear_resize(fmap, out_h, out_w).data[0]
    lo = float(resized.min())
    hi = float(resized.max())
    if hi - lo <= _FLAT_EPS * max(1.0, abs(hi)):
        return GrayImage(out_h, out_w, np.zeros((out_h, out_w), dtype=np.float32))
    norm = (resized - lo) / (hi - lo)
    return GrayImage(out_h, out_w, np.clip(norm, 0.0, 1.0).astype(np.float32))
