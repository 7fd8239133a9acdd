"""Finite-difference verification of every backward rule.

Each registered case builds leaf tensors and a forward closure that
reduces to a scalar, then compares taped gradients against central
differences (step 1e-3) computed in float64. Cases cover every
differentiable op exactly once plus composite graphs up to a full tiny
two-branch model. Inputs for abs/prelu are nudged away from the kink
at zero, where the subgradient and the secant legitimately disagree.

The error metric is scale-guarded: |analytic - numeric| divided by
max(1, |analytic|, |numeric|), so tiny gradients are judged by
absolute error and large ones relatively. Tolerance is 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import decode, init_decoder_params
from .encoder import ModelConfig, encode, encoder_block, init_encoder_params, tiny_config
from .errors import ArgumentError
from .imaging import make_texture
from .params import ParamStore
from .quality import fuse_and_predict, init_fusion_params, quality_loss
from .rng import CounterRng, derive_seed
from .supervision import PemLossConfig, compute_oem, pem_loss
from .tensor import Tape, Tensor, backward

STEP = 1e-3
TOLERANCE = 1e-3
_KINK_MARGIN = 5e-3


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _normal(rng: CounterRng, shape) -> np.ndarray:
    size = int(np.prod(shape)) if shape else 1
    return rng.normal(size).reshape(shape)


def _leaf(rng: CounterRng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(_normal(rng, shape) * scale, requires_grad=True, dtype=np.float64)


def _away_from_kink(t: Tensor) -> Tensor:
    """Shift entries out of the +-margin band around zero."""
    d = t.data
    small = np.abs(d) < _KINK_MARGIN
    sign = np.where(d >= 0.0, 1.0, -1.0)
    t.data = np.where(small, d + sign * (2.0 * _KINK_MARGIN), d)
    return t


def _projector(rng: CounterRng, shape):
    """Scalar reduction with a probe drawn once, so replays see one function."""
    probe = T.constant(_normal(rng, shape), dtype=np.float64)
    if shape == ():
        return lambda out: T.mul(out, probe)
    return lambda out: T.sum_(T.mul(out, probe))


# --- case builders ----------------------------------------------------------
# each returns (leaves, forward); forward recomputes the scalar loss from
# the leaves' current data, so it can be replayed for finite differences


def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    proj = _projector(rng, (3, 4))
    return [a, b], lambda: proj(T.add(a, b))


def _case_sub(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    proj = _projector(rng, (3, 4))
    return [a, b], lambda: proj(T.sub(a, b))


def _case_mul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    proj = _projector(rng, (3, 4))
    return [a, b], lambda: proj(T.mul(a, b))


def _case_scale(rng):
    a = _leaf(rng, 3, 4)
    proj = _projector(rng, (3, 4))
    return [a], lambda: proj(T.scale(a, -1.7))


def _case_abs(rng):
    a = _away_from_kink(_leaf(rng, 5, 5))
    proj = _projector(rng, (5, 5))
    return [a], lambda: proj(T.abs_(a))


def _case_square(rng):
    a = _leaf(rng, 4, 3)
    proj = _projector(rng, (4, 3))
    return [a], lambda: proj(T.square(a))


def _case_mean(rng):
    a = _leaf(rng, 6, 2)
    proj = _projector(rng, ())
    return [a], lambda: proj(T.mean(a))


def _case_sum(rng):
    a = _leaf(rng, 2, 7)
    proj = _projector(rng, ())
    return [a], lambda: proj(T.sum_(a))


def _case_gelu(rng):
    a = _leaf(rng, 4, 4, scale=1.5)
    proj = _projector(rng, (4, 4))
    return [a], lambda: proj(T.gelu(a))


def _case_prelu(rng):
    a = _away_from_kink(_leaf(rng, 5, 3))
    slope = Tensor(np.array(0.25), requires_grad=True, dtype=np.float64)
    proj = _projector(rng, (5, 3))
    return [a, slope], lambda: proj(T.prelu(a, slope))


def _case_sigmoid(rng):
    a = _leaf(rng, 3, 5, scale=2.0)
    proj = _projector(rng, (3, 5))
    return [a], lambda: proj(T.sigmoid(a))


def _case_matmul(rng):
    a, b = _leaf(rng, 4, 6), _leaf(rng, 6, 3)
    proj = _projector(rng, (4, 3))
    return [a, b], lambda: proj(T.matmul(a, b))


def _case_transpose(rng):
    a = _leaf(rng, 3, 5)
    proj = _projector(rng, (5, 3))
    return [a], lambda: proj(T.transpose(a))


def _case_reshape(rng):
    a = _leaf(rng, 4, 6)
    proj = _projector(rng, (2, 12))
    return [a], lambda: proj(T.reshape(a, (2, 12)))


def _case_concat(rng):
    a, b, c = _leaf(rng, 2, 5), _leaf(rng, 3, 5), _leaf(rng, 1, 5)
    proj = _projector(rng, (6, 5))
    return [a, b, c], lambda: proj(T.concat([a, b, c], axis=0))


def _case_slice_rows(rng):
    a = _leaf(rng, 6, 4)
    proj = _projector(rng, (3, 4))
    return [a], lambda: proj(T.slice_rows(a, 1, 4))


def _case_slice_cols(rng):
    a = _leaf(rng, 4, 8)
    proj = _projector(rng, (4, 5))
    return [a], lambda: proj(T.slice_cols(a, 2, 7))


def _case_add_row_bias(rng):
    a, b = _leaf(rng, 5, 3), _leaf(rng, 3)
    proj = _projector(rng, (5, 3))
    return [a, b], lambda: proj(T.add_row_bias(a, b))


def _case_linear(rng):
    x, w, b = _leaf(rng, 4, 6), _leaf(rng, 6, 3), _leaf(rng, 3)
    proj = _projector(rng, (4, 3))
    return [x, w, b], lambda: proj(T.linear(x, w, b))


def _case_softmax(rng):
    a = _leaf(rng, 4, 7, scale=2.0)
    proj = _projector(rng, (4, 7))
    return [a], lambda: proj(T.softmax_rows(a))


def _case_layer_norm(rng):
    x = _leaf(rng, 5, 8)
    gamma = Tensor(1.0 + 0.1 * rng.normal(8), requires_grad=True, dtype=np.float64)
    beta = _leaf(rng, 8, scale=0.1)
    proj = _projector(rng, (5, 8))
    return [x, gamma, beta], lambda: proj(T.layer_norm(x, gamma, beta))


def _case_conv2d(rng):
    x = _leaf(rng, 3, 6, 5)
    w = _leaf(rng, 2, 3, 3, 3, scale=0.5)
    b = _leaf(rng, 2)
    proj = _projector(rng, (2, 6, 5))
    return [x, w, b], lambda: proj(T.conv2d_3x3(x, w, b))


def _case_bilinear(rng):
    x = _leaf(rng, 2, 4, 4)
    proj = _projector(rng, (2, 7, 9))
    return [x], lambda: proj(T.bilinear_resize(x, 7, 9))


def _case_gap(rng):
    x = _leaf(rng, 3, 5, 5)
    proj = _projector(rng, (12,))
    return [x], lambda: proj(T.global_average_pool(x, 2))


# --- composites -------------------------------------------------------------


def _case_encoder_block(rng):
    cfg = tiny_config()
    store = ParamStore()
    init_encoder_params(
        store, cfg, CounterRng(rng.randint(1 << 30)), "pem", with_token=False, dtype=np.float64
    )
    x = _leaf(rng, cfg.num_patches + 1, cfg.embed_dim, scale=0.5)
    proj = _projector(rng, (cfg.num_patches + 1, cfg.embed_dim))
    # only the first block runs, so only its parameters are leaves
    leaves = [x] + [t for name, t in store.items() if name.startswith("pem.block1.")]

    def forward():
        out, _vec = encoder_block(x, store, cfg, "pem", 1, capture=False)
        return proj(out)

    return leaves, forward


def _case_decoder(rng):
    cfg = tiny_config()
    store = ParamStore()
    init_decoder_params(store, cfg, CounterRng(rng.randint(1 << 30)), "dec", dtype=np.float64)
    tokens = [_leaf(rng, cfg.num_patches, cfg.embed_dim, scale=0.5) for _ in cfg.selected_layers]
    proj = _projector(rng, (1, cfg.image_size, cfg.image_size))
    leaves = tokens + list(store.tensors())

    def forward():
        out = decode(tokens, store, cfg, cfg.image_size, cfg.image_size)
        return proj(out)

    return leaves, forward


def _case_fusion(rng):
    cfg = tiny_config()
    store = ParamStore()
    init_fusion_params(store, cfg, CounterRng(rng.randint(1 << 30)), mode="both", dtype=np.float64)
    pem = Tensor(
        0.3 + 0.05 * _normal(rng, (1, cfg.image_size, cfg.image_size)),
        requires_grad=True,
        dtype=np.float64,
    )
    token = _leaf(rng, cfg.embed_dim, scale=0.5)
    leaves = [pem, token] + list(store.tensors())

    def forward():
        return fuse_and_predict(pem, token, store, cfg, "both")

    return leaves, forward


def _case_pem_loss(rng):
    cfg = tiny_config()
    dist = make_texture(cfg.image_size, cfg.image_size, rng.randint(1 << 30))
    ref = make_texture(cfg.image_size, cfg.image_size, rng.randint(1 << 30))
    oem = compute_oem(dist, ref)
    pem = Tensor(
        0.25 + 0.02 * _normal(rng, (1, cfg.image_size, cfg.image_size)),
        requires_grad=True,
        dtype=np.float64,
    )
    loss_cfg = PemLossConfig(oem_lambda=0.3)

    def forward():
        return pem_loss(pem, oem, dist, ref, loss_cfg)

    return [pem], forward


def _case_quality_loss(rng):
    preds = _leaf(rng, 6, scale=0.3)
    preds.data += 0.5
    targets = np.clip(0.5 + 0.2 * rng.normal(6), 0.0, 1.0)
    # keep every residual off the L1 kink by more than the fd step
    close = np.abs(preds.data - targets) < _KINK_MARGIN
    preds.data = np.where(close, targets + 3.0 * _KINK_MARGIN, preds.data)
    return [preds], lambda: quality_loss(preds, targets)


def build_tiny_model_case(cfg: ModelConfig | None = None):
    """Joint two-branch graph: pem_loss + quality_loss, nothing frozen."""

    def builder(rng):
        model = cfg if cfg is not None else tiny_config()
        store = ParamStore()
        init_encoder_params(
            store, model, CounterRng(rng.randint(1 << 30)), "pem", with_token=False, dtype=np.float64
        )
        init_decoder_params(store, model, CounterRng(rng.randint(1 << 30)), "dec", dtype=np.float64)
        init_encoder_params(
            store, model, CounterRng(rng.randint(1 << 30)), "pqt", with_token=True, dtype=np.float64
        )
        init_fusion_params(
            store, model, CounterRng(rng.randint(1 << 30)), mode="both", dtype=np.float64
        )
        size = model.image_size
        dist = make_texture(size, size, rng.randint(1 << 30))
        ref = make_texture(size, size, rng.randint(1 << 30))
        oem = compute_oem(dist, ref)
        loss_cfg = PemLossConfig()
        leaves = list(store.tensors())

        # Place the head's PReLU preactivations a safe distance from the
        # kink at the operating point, so the fd step cannot straddle it.
        probe_enc = encode(dist, store, model, branch="pem", weight_prefix="pem", capture=False)
        probe_pem = decode(
            [probe_enc.layer_tokens[layer] for layer in model.selected_layers],
            store, model, size, size,
        )
        pooled = T.global_average_pool(probe_pem, model.gap_grid)
        v_pem = T.linear(
            T.reshape(pooled, (1, pooled.size)), store["fuse.mlp1.w"], store["fuse.mlp1.b"]
        )
        probe_tok = encode(dist, store, model, branch="pqt", capture=False).pqt_tokens[-1]
        fused = T.add(v_pem, T.reshape(probe_tok, (1, model.embed_dim)))
        pre = T.linear(fused, store["fuse.mlp2.w1"], store["fuse.mlp2.b1"]).data[0]
        signs = np.where(_normal(rng, (model.embed_dim,)) >= 0.0, 1.0, -1.0)
        store["fuse.mlp2.b1"].data += 0.05 * signs - pre

        def forward():
            enc = encode(dist, store, model, branch="pem", weight_prefix="pem", capture=False)
            tokens = [enc.layer_tokens[layer] for layer in model.selected_layers]
            pem = decode(tokens, store, model, size, size)
            l_em = pem_loss(pem, oem, dist, ref, loss_cfg)
            token = encode(dist, store, model, branch="pqt", capture=False).pqt_tokens[-1]
            score = fuse_and_predict(pem, token, store, model, "both")
            l_q = quality_loss(score, np.float64(0.7))
            return T.add(l_em, l_q)

        return leaves, forward

    return builder


CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "abs": _case_abs,
    "square": _case_square,
    "mean": _case_mean,
    "sum": _case_sum,
    "gelu": _case_gelu,
    "prelu": _case_prelu,
    "sigmoid": _case_sigmoid,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "slice_rows": _case_slice_rows,
    "slice_cols": _case_slice_cols,
    "add_row_bias": _case_add_row_bias,
    "linear": _case_linear,
    "softmax_rows": _case_softmax,
    "layer_norm": _case_layer_norm,
    "conv2d_3x3": _case_conv2d,
    "bilinear_resize": _case_bilinear,
    "global_average_pool": _case_gap,
    "encoder_block": _case_encoder_block,
    "decoder": _case_decoder,
    "fusion_head": _case_fusion,
    "pem_loss": _case_pem_loss,
    "quality_loss": _case_quality_loss,
    "tiny_model": build_tiny_model_case(),
}

# the joint model touches every parameter; a handful of probes per tensor
# keeps the whole suite well inside the runtime budget
_CHECKS_PER_TENSOR = {"tiny_model": 6}
_DEFAULT_CHECKS = 24


def _indices(size: int, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, limit).astype(np.int64))


def run_case(name: str, seed: int = 0, case=None) -> CaseResult:
    if case is None:
        if name not in CASES:
            raise ArgumentError(f"unknown gradcheck case {name!r}")
        case = CASES[name]
    rng = CounterRng(derive_seed(seed, "gradcheck", name))
    leaves, forward = case(rng)

    with Tape() as tape:
        loss = forward()
    backward(loss, tape)
    analytic = [None if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    limit = _CHECKS_PER_TENSOR.get(name, _DEFAULT_CHECKS)
    worst = 0.0
    checked = 0
    for leaf, grad in zip(leaves, analytic):
        if grad is None:
            raise ArgumentError(f"case {name!r}: leaf received no gradient")
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in _indices(flat.size, limit):
            orig = flat[idx]
            flat[idx] = orig + STEP
            f_plus = forward().item()
            flat[idx] = orig - STEP
            f_minus = forward().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * STEP)
            a = float(gflat[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            checked += 1
    return CaseResult(name, worst, checked)


def run_all(seed: int = 0, model_cfg: ModelConfig | None = None) -> list:
    """Every registered case once; optional model override for the full graph."""
    results = []
    for name, case in CASES.items():
        if name == "tiny_model" and model_cfg is not None:
            case = build_tiny_model_case(model_cfg)
        results.append(run_case(name, seed=seed, case=case))
    return results
