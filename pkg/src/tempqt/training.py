"""Two-stage training: error-map pretraining, then quality regression.

Stage 1 trains the patch encoder and decoder against objective error
maps. Stage 2 freezes that branch bit-for-bit, builds the quality-token
branch and fusion head, and regresses scores with an L1 loss. Both
stages use classic Adam with L2-coupled weight decay and a stepped
learning-rate schedule.

Checkpoints are a small binary format (magic ``TQTCKPT``): embedded
configuration text, named float32 parameter blocks in store order, an
optional optimizer state, and the epoch counter. Little-endian
throughout; a save/load/save round trip is byte-identical.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetManifest, eval_crops, sample_patches
from .decoder import decode, init_decoder_params
from .encoder import INIT_STD, EncoderOutput, ModelConfig, encode, init_encoder_params
from .errors import (
    ArgumentError,
    CheckpointError,
    CompatibilityError,
    DataError,
    TrainingError,
)
from .imaging import GrayImage, load_image
from .params import ParamStore
from .quality import ABLATION_MODES, fuse_and_predict, init_fusion_params, quality_loss
from .rng import CounterRng, derive_seed
from .supervision import PemLossConfig, compute_oem, pem_loss
from .tensor import Tape, backward, zero_grads

CHECKPOINT_MAGIC = b"TQTCKPT"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for both stages.

    alpha is the stage-1 learning rate, beta the stage-2 rate. The
    desk-scale defaults are tuned for training the small configuration
    from scratch; ``paper_train_config`` preserves the full-scale
    fine-tuning preset.
    """

    alpha: float = 1e-3
    beta: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    epochs_stage1: int = 3
    epochs_stage2: int = 10
    lr_decay: float = 0.9
    lr_period: int = 5
    seed: int = 0
    share_backbone: bool = False
    ablation_mode: str = "both"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ArgumentError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ArgumentError("epoch counts must be nonnegative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ArgumentError("lr_decay must be in (0, 1]")
        if self.lr_period < 1:
            raise ArgumentError("lr_period must be positive")
        if self.ablation_mode not in ABLATION_MODES:
            raise ArgumentError(f"ablation_mode must be one of {ABLATION_MODES}")


def paper_train_config() -> TrainConfig:
    """Full-scale preset: fine-tuning rates, up to 15 epochs per stage."""
    return TrainConfig(alpha=2e-5, beta=2e-5, epochs_stage1=15, epochs_stage2=15)


def lr_at(epoch: int, cfg: TrainConfig, base: float | None = None) -> float:
    """Stepped schedule: base * decay ** (epoch // period)."""
    if epoch < 0:
        raise ArgumentError("epoch must be nonnegative")
    if base is None:
        base = cfg.alpha
    return base * cfg.lr_decay ** (epoch // cfg.lr_period)


class AdamState:
    """First/second moment buffers for the trainable parameters."""

    def __init__(self, store: ParamStore | None = None):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        if store is not None:
            for name, p in store.trainable():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adam_step(store: ParamStore, state: AdamState, lr: float, weight_decay: float) -> None:
    """One coupled-decay Adam update over every trainable parameter."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in store.trainable():
        if p.grad is None:
            raise TrainingError(f"missing gradient for trainable parameter {name!r}")
        g = p.grad
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# model assembly


def build_pem_store(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fresh error-map branch: patch encoder (no quality token) + decoder."""
    store = ParamStore()
    init_encoder_params(
        store, cfg, CounterRng(derive_seed(seed, "init", "pem")), "pem", with_token=False, dtype=dtype
    )
    init_decoder_params(store, cfg, CounterRng(derive_seed(seed, "init", "dec")), "dec", dtype=dtype)
    return store


def build_quality_store(
    cfg: ModelConfig, train_cfg: TrainConfig, pem_arrays: dict, dtype=np.float32
) -> ParamStore:
    """Frozen error-map branch plus fresh quality-token branch and head."""
    mode = train_cfg.ablation_mode
    if mode != "pem_only" and not cfg.use_pqt:
        raise CompatibilityError(f"ablation mode {mode!r} needs use_pqt", ("use_pqt",))
    store = ParamStore()
    for name, arr in pem_arrays.items():
        store.add(name, arr, dtype=dtype)
    store.freeze_prefix("pem.")
    store.freeze_prefix("dec.")
    seed = train_cfg.seed
    if mode != "pem_only":
        rng = CounterRng(derive_seed(seed, "init", "pqt"))
        if train_cfg.share_backbone:
            # token only; blocks and embedding are read from the frozen branch
            store.add("pqt.token", (rng.normal(cfg.embed_dim) * INIT_STD).astype(dtype), dtype=dtype)
        else:
            init_encoder_params(store, cfg, rng, "pqt", with_token=True, dtype=dtype)
    init_fusion_params(store, cfg, CounterRng(derive_seed(seed, "init", "fuse")), mode=mode, dtype=dtype)
    return store


def forward_pem(img: GrayImage, store: ParamStore, cfg: ModelConfig) -> T.Tensor:
    """Encode with the error-map branch and decode to a (1, H, W) map."""
    enc = encode(img, store, cfg, branch="pem", weight_prefix="pem", capture=False)
    tokens = [enc.layer_tokens[layer] for layer in cfg.selected_layers]
    return decode(tokens, store, cfg, cfg.image_size, cfg.image_size)


def forward_pqt(
    img: GrayImage,
    store: ParamStore,
    cfg: ModelConfig,
    share_backbone: bool = False,
    capture: bool | None = None,
) -> EncoderOutput:
    prefix = "pem" if share_backbone else "pqt"
    return encode(img, store, cfg, branch="pqt", weight_prefix=prefix, capture=capture)


def _score_crop(
    crop: GrayImage,
    store: ParamStore,
    cfg: ModelConfig,
    mode: str,
    share_backbone: bool,
) -> float:
    pem_t = forward_pem(crop, store, cfg) if mode != "pqt_only" else None
    token = None
    if mode != "pem_only":
        token = forward_pqt(crop, store, cfg, share_backbone, capture=False).pqt_tokens[-1]
    return fuse_and_predict(pem_t, token, store, cfg, mode).item()


def predict_score(
    img: GrayImage,
    store: ParamStore,
    cfg: ModelConfig,
    mode: str = "both",
    share_backbone: bool = False,
) -> float:
    """Mean predicted score over the deterministic evaluation crops."""
    crops = eval_crops(img, cfg.image_size)
    return float(np.mean([_score_crop(c, store, cfg, mode, share_backbone) for c in crops]))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    loss_cfg: PemLossConfig
    params: dict
    adam: AdamState | None = None
    epoch: int = 0


def store_from_checkpoint(ckpt: Checkpoint) -> ParamStore:
    """Rebuild an inference store: every parameter present, all frozen."""
    store = ParamStore()
    for name, arr in ckpt.params.items():
        store.add(name, arr)
    for t in store.tensors():
        t.requires_grad = False
        t.needs_grad = False
    return store


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .config import serialize_settings

    text = serialize_settings(ckpt.model_cfg, ckpt.train_cfg, ckpt.loss_cfg).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    chunks.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        for dim in data.shape:
            chunks.append(struct.pack("<I", dim))
        raw = data.tobytes()
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
    adam = ckpt.adam
    if adam is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<Q", adam.t))
        chunks.append(struct.pack("<I", len(adam.m)))
        for name in adam.m:
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(np.ascontiguousarray(adam.m[name], dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(adam.v[name], dtype="<f4").tobytes())
    chunks.append(struct.pack("<I", ckpt.epoch))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def load_checkpoint(path) -> Checkpoint:
    from .config import parse_settings

    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data, path)
    if cur.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = cur.unpack("<B", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    text_len = cur.unpack("<I", "config length")
    try:
        text = cur.take(text_len, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config text is not UTF-8") from exc
    model_cfg, train_cfg, loss_cfg = parse_settings(text)

    n_params = cur.unpack("<I", "parameter count")
    params: dict = {}
    for _ in range(n_params):
        name_len = cur.unpack("<H", "name length")
        name = cur.take(name_len, "parameter name").decode("utf-8")
        ndim = cur.unpack("<B", "ndim")
        shape = tuple(cur.unpack("<I", "dimension") for _ in range(ndim))
        nbytes = cur.unpack("<Q", "data length")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != 4 * count:
            raise CheckpointError(f"{path}: parameter {name!r} length mismatch")
        raw = cur.take(nbytes, f"data for {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    adam = None
    if cur.unpack("<B", "optimizer flag"):
        adam = AdamState()
        adam.t = cur.unpack("<Q", "optimizer step")
        n_entries = cur.unpack("<I", "optimizer entry count")
        for _ in range(n_entries):
            name_len = cur.unpack("<H", "optimizer name length")
            name = cur.take(name_len, "optimizer name").decode("utf-8")
            if name not in params:
                raise CheckpointError(f"{path}: optimizer state for unknown parameter {name!r}")
            nbytes = 4 * params[name].size
            adam.m[name] = (
                np.frombuffer(cur.take(nbytes, "m"), dtype="<f4").reshape(params[name].shape).copy()
            )
            adam.v[name] = (
                np.frombuffer(cur.take(nbytes, "v"), dtype="<f4").reshape(params[name].shape).copy()
            )
    epoch = cur.unpack("<I", "epoch")
    return Checkpoint(model_cfg, train_cfg, loss_cfg, params, adam, epoch)


def check_model_compat(ckpt_cfg: ModelConfig, cfg: ModelConfig) -> None:
    diffs = tuple(
        f.name
        for f in dataclasses.fields(ModelConfig)
        if getattr(ckpt_cfg, f.name) != getattr(cfg, f.name)
    )
    if diffs:
        raise CompatibilityError("checkpoint model configuration differs", diffs)


# ---------------------------------------------------------------------------
# training loops


class _Log:
    def __init__(self, path):
        self.path = path
        if path is not None:
            # truncate: each run owns its log
            with open(path, "w", encoding="utf-8"):
                pass

    def line(self, text: str) -> None:
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(text + "\n")


def _load_pairs(manifest: DatasetManifest, need_ref: bool) -> list:
    samples = manifest.split_samples("train")
    if not samples:
        raise DataError("manifest has no train samples")
    out = []
    for s in samples:
        dist = load_image(manifest.resolve(s.dist_path))
        ref = None
        if need_ref:
            if not s.ref_path:
                raise DataError(f"{s.dist_path}: error-map pretraining needs a reference image")
            ref = load_image(manifest.resolve(s.ref_path))
            if (ref.height, ref.width) != (dist.height, dist.width):
                raise DataError(f"{s.dist_path}: reference size differs from distorted size")
        out.append((dist, ref, s.score))
    return out


def pretrain_pem(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: PemLossConfig | None = None,
    patch_count: int = 4,
    augment: bool = True,
    log_path=None,
) -> Checkpoint:
    """Stage 1: train encoder+decoder against objective error maps."""
    loss_cfg = loss_cfg if loss_cfg is not None else PemLossConfig()
    pairs = _load_pairs(manifest, need_ref=True)
    store = build_pem_store(model_cfg, train_cfg.seed)
    state = AdamState(store)
    log = _Log(log_path)
    crop = model_cfg.image_size
    logged_first = False

    for epoch in range(train_cfg.epochs_stage1):
        lr = lr_at(epoch, train_cfg, base=train_cfg.alpha)
        items = []
        for si, (dist, ref, _score) in enumerate(pairs):
            pseed = derive_seed(train_cfg.seed, "patch", 1, epoch, si)
            dp = sample_patches(dist, patch_count, crop, pseed, augment)
            rp = sample_patches(ref, patch_count, crop, pseed, augment)
            items.extend(zip(dp, rp))
        CounterRng(derive_seed(train_cfg.seed, "order", 1, epoch)).shuffle(items)

        epoch_losses = []
        for start in range(0, len(items), train_cfg.batch_size):
            batch = items[start : start + train_cfg.batch_size]
            with Tape() as tape:
                total = None
                for d, r in batch:
                    pem = forward_pem(d, store, model_cfg)
                    item = pem_loss(pem, compute_oem(d, r), d, r, loss_cfg)
                    total = item if total is None else T.add(total, item)
                loss = T.scale(total, 1.0 / len(batch))
            backward(loss, tape)
            adam_step(store, state, lr, train_cfg.weight_decay)
            zero_grads(store.tensors())
            value = loss.item()
            if not logged_first:
                log.line(f"stage=1 init_batch_loss={value!r}")
                logged_first = True
            epoch_losses.append(value)
        log.line(f"stage=1 epoch={epoch} lr={lr!r} loss={float(np.mean(epoch_losses))!r}")

    return Checkpoint(
        model_cfg, train_cfg, loss_cfg, store.arrays(), adam=state, epoch=train_cfg.epochs_stage1
    )


def train_quality(
    manifest: DatasetManifest,
    pem_ckpt: Checkpoint,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    patch_count: int = 4,
    augment: bool = True,
    log_path=None,
) -> Checkpoint:
    """Stage 2: freeze the error-map branch, train token branch + head."""
    check_model_compat(pem_ckpt.model_cfg, model_cfg)
    pem_arrays = {
        n: a for n, a in pem_ckpt.params.items() if n.startswith(("pem.", "dec."))
    }
    skeleton = build_pem_store(model_cfg, seed=0)
    expected = {name: t.data.shape for name, t in skeleton.items()}
    got = {name: arr.shape for name, arr in pem_arrays.items()}
    if expected != got:
        missing = sorted(set(expected) ^ set(got))[:6]
        raise CompatibilityError("checkpoint does not hold a complete error-map branch", tuple(missing))

    mode = train_cfg.ablation_mode
    store = build_quality_store(model_cfg, train_cfg, pem_arrays)
    state = AdamState(store)
    log = _Log(log_path)
    samples = _load_pairs(manifest, need_ref=False)
    crop = model_cfg.image_size
    need_pem = mode != "pqt_only"
    need_token = mode != "pem_only"
    logged_first = False

    for epoch in range(train_cfg.epochs_stage2):
        lr = lr_at(epoch, train_cfg, base=train_cfg.beta)
        items = []
        for si, (dist, _ref, score) in enumerate(samples):
            pseed = derive_seed(train_cfg.seed, "patch", 2, epoch, si)
            for patch in sample_patches(dist, patch_count, crop, pseed, augment):
                items.append((patch, score))
        CounterRng(derive_seed(train_cfg.seed, "order", 2, epoch)).shuffle(items)

        epoch_losses = []
        for start in range(0, len(items), train_cfg.batch_size):
            batch = items[start : start + train_cfg.batch_size]
            # the frozen branch runs off-tape: its maps enter as constants
            pem_maps = [forward_pem(p, store, model_cfg).data if need_pem else None for p, _y in batch]
            with Tape() as tape:
                scores = []
                for (patch, _y), pem_arr in zip(batch, pem_maps):
                    pem_t = T.constant(pem_arr) if need_pem else None
                    token = None
                    if need_token:
                        token = forward_pqt(
                            patch, store, model_cfg, train_cfg.share_backbone, capture=False
                        ).pqt_tokens[-1]
                    s = fuse_and_predict(pem_t, token, store, model_cfg, mode)
                    scores.append(T.reshape(s, (1,)))
                preds = scores[0] if len(scores) == 1 else T.concat(scores, axis=0)
                targets = np.array([y for _p, y in batch], dtype=np.float32)
                loss = quality_loss(preds, targets)
            backward(loss, tape)
            adam_step(store, state, lr, train_cfg.weight_decay)
            zero_grads(store.tensors())
            value = loss.item()
            if not logged_first:
                log.line(f"stage=2 init_batch_loss={value!r}")
                logged_first = True
            epoch_losses.append(value)
        log.line(f"stage=2 epoch={epoch} lr={lr!r} loss={float(np.mean(epoch_losses))!r}")

    return Checkpoint(
        model_cfg, train_cfg, pem_ckpt.loss_cfg, store.arrays(), adam=state, epoch=train_cfg.epochs_stage2
    )


def evaluate_manifest(
    manifest: DatasetManifest, ckpt: Checkpoint, splits: tuple = ("train", "test")
) -> dict:
    """Predict every sample; returns {split: (paths, targets, predictions)}."""
    store = store_from_checkpoint(ckpt)
    if not store.has_prefix("fuse."):
        raise CompatibilityError("checkpoint has no fusion head; evaluate a quality checkpoint")
    cfg = ckpt.model_cfg
    mode = ckpt.train_cfg.ablation_mode
    share = ckpt.train_cfg.share_backbone
    out = {}
    for split in splits:
        paths, targets, preds = [], [], []
        for s in manifest.split_samples(split):
            img = load_image(manifest.resolve(s.dist_path))
            paths.append(s.dist_path)
            targets.append(s.score)
            preds.append(predict_score(img, store, cfg, mode, share))
        out[split] = (paths, targets, preds)
    return out
