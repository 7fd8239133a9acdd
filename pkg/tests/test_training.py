"""Optimizer math, schedules, checkpoints, and the two-stage protocol."""

import dataclasses

import numpy as np
import pytest

from conftest import build_overfit_dataset
from tempqt.data import load_manifest
from tempqt.encoder import tiny_config
from tempqt.errors import (
    ArgumentError,
    CheckpointError,
    CompatibilityError,
    TrainingError,
)
from tempqt.params import ParamStore
from tempqt.supervision import PemLossConfig
from tempqt.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    build_quality_store,
    check_model_compat,
    evaluate_manifest,
    load_checkpoint,
    lr_at,
    paper_train_config,
    pretrain_pem,
    save_checkpoint,
    store_from_checkpoint,
    train_quality,
)

MICRO = dict(alpha=1e-3, beta=1e-3, batch_size=8, epochs_stage1=2, epochs_stage2=2, seed=0)


@pytest.fixture(scope="module")
def micro_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    return load_manifest(build_overfit_dataset(str(root)))


@pytest.fixture(scope="module")
def micro_pem_ckpt(micro_manifest):
    return pretrain_pem(
        micro_manifest, tiny_config(), TrainConfig(**MICRO), patch_count=1, augment=False
    )


@pytest.fixture(scope="module")
def micro_quality_ckpt(micro_manifest, micro_pem_ckpt):
    return train_quality(
        micro_manifest, micro_pem_ckpt, tiny_config(), TrainConfig(**MICRO),
        patch_count=1, augment=False,
    )


# ---------------------------------------------------------------------------
# config and schedule


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(alpha=0.0),
        dict(beta=-1e-3),
        dict(weight_decay=-1e-6),
        dict(batch_size=0),
        dict(epochs_stage1=-1),
        dict(lr_decay=0.0),
        dict(lr_decay=1.5),
        dict(lr_period=0),
        dict(ablation_mode="none"),
    ],
)
def test_train_config_rejects(kwargs):
    with pytest.raises(ArgumentError):
        TrainConfig(**kwargs)


def test_lr_schedule_steps():
    cfg = paper_train_config()
    assert lr_at(0, cfg) == pytest.approx(2e-5, rel=1e-12)
    assert lr_at(4, cfg) == pytest.approx(2e-5, rel=1e-12)
    assert lr_at(5, cfg) == pytest.approx(1.8e-5, rel=1e-12)
    assert lr_at(10, cfg) == pytest.approx(1.62e-5, rel=1e-12)


def test_lr_schedule_base_override_and_guard():
    cfg = TrainConfig(alpha=1e-3, beta=4e-4, lr_decay=0.5, lr_period=2)
    assert lr_at(0, cfg, base=cfg.beta) == pytest.approx(4e-4)
    assert lr_at(2, cfg, base=cfg.beta) == pytest.approx(2e-4)
    with pytest.raises(ArgumentError, match="nonnegative"):
        lr_at(-1, cfg)


# ---------------------------------------------------------------------------
# Adam


def one_param_store(value, grad):
    store = ParamStore()
    t = store.add("p", np.array([value], dtype=np.float64), dtype=np.float64)
    t.grad = np.array([grad], dtype=np.float64)
    return store


def test_adam_first_step_is_signed_lr():
    for grad in (0.3, -2.0, 1e-4):
        store = one_param_store(1.0, grad)
        adam_step(store, AdamState(store), lr=0.01, weight_decay=0.0)
        # m_hat = g, v_hat = g^2 on step 1, so the move is -lr * sign(g)
        expect = 1.0 - 0.01 * np.sign(grad) * (abs(grad) / (abs(grad) + 1e-8))
        assert store["p"].data[0] == pytest.approx(expect, abs=1e-9)


def test_adam_zero_lr_is_noop():
    store = one_param_store(0.7, 1.3)
    state = AdamState(store)
    adam_step(store, state, lr=0.0, weight_decay=0.0)
    assert store["p"].data[0] == 0.7
    assert state.t == 1


def test_adam_coupled_weight_decay_moves_zero_grad_param():
    store = one_param_store(2.0, 0.0)
    adam_step(store, AdamState(store), lr=0.1, weight_decay=0.01)
    # effective gradient is wd * p > 0, so the parameter shrinks
    assert store["p"].data[0] < 2.0


def test_adam_skips_frozen_and_requires_grads():
    store = ParamStore()
    frozen = store.add("frozen", np.ones(2))
    frozen.requires_grad = False
    live = store.add("live", np.ones(2))
    state = AdamState(store)
    with pytest.raises(TrainingError, match="missing gradient"):
        adam_step(store, state, lr=0.1, weight_decay=0.0)
    live.grad = np.full(2, 0.5, dtype=np.float32)
    adam_step(store, state, lr=0.1, weight_decay=0.0)
    assert np.all(frozen.data == 1.0)
    assert np.all(live.data < 1.0)


def test_adam_step_counter_shared():
    store = ParamStore()
    a = store.add("a", np.ones(2))
    b = store.add("b", np.ones(3))
    a.grad = np.ones(2, dtype=np.float32)
    b.grad = np.ones(3, dtype=np.float32)
    state = AdamState(store)
    adam_step(store, state, lr=0.01, weight_decay=0.0)
    adam_step(store, state, lr=0.01, weight_decay=0.0)
    assert state.t == 2


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bytes(micro_pem_ckpt, tmp_path):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(micro_pem_ckpt, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_fields_survive(micro_pem_ckpt, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(micro_pem_ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.model_cfg == micro_pem_ckpt.model_cfg
    assert loaded.train_cfg == micro_pem_ckpt.train_cfg
    assert loaded.loss_cfg == micro_pem_ckpt.loss_cfg
    assert loaded.epoch == micro_pem_ckpt.epoch
    assert set(loaded.params) == set(micro_pem_ckpt.params)
    for name, arr in micro_pem_ckpt.params.items():
        assert np.array_equal(loaded.params[name], arr.astype(np.float32))
    assert loaded.adam is not None
    assert loaded.adam.t == micro_pem_ckpt.adam.t


def test_checkpoint_without_optimizer(micro_pem_ckpt, tmp_path):
    slim = Checkpoint(
        micro_pem_ckpt.model_cfg, micro_pem_ckpt.train_cfg, micro_pem_ckpt.loss_cfg,
        micro_pem_ckpt.params, adam=None, epoch=3,
    )
    path = tmp_path / "slim.ckpt"
    save_checkpoint(slim, path)
    loaded = load_checkpoint(path)
    assert loaded.adam is None
    assert loaded.epoch == 3


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTCKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_truncation(micro_pem_ckpt, tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(micro_pem_ckpt, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_version(micro_pem_ckpt, tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(micro_pem_ckpt, path)
    blob = bytearray(path.read_bytes())
    blob[7] = 99  # version byte sits right after the magic
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(path)


def test_store_from_checkpoint_is_frozen(micro_pem_ckpt):
    store = store_from_checkpoint(micro_pem_ckpt)
    assert len(store) == len(micro_pem_ckpt.params)
    assert all(not t.requires_grad for t in store.tensors())


def test_check_model_compat_lists_fields():
    a = tiny_config()
    b = dataclasses.replace(a, embed_dim=32, heads=4)
    with pytest.raises(CompatibilityError) as exc:
        check_model_compat(a, b)
    assert "embed_dim" in str(exc.value)


# ---------------------------------------------------------------------------
# stage 1


def test_pretrain_returns_complete_branch(micro_pem_ckpt):
    names = set(micro_pem_ckpt.params)
    assert any(n.startswith("pem.") for n in names)
    assert any(n.startswith("dec.") for n in names)
    assert not any(n.startswith(("pqt.", "fuse.")) for n in names)
    assert micro_pem_ckpt.epoch == MICRO["epochs_stage1"]
    # 8 images, 1 patch each, batch 8 -> 1 step per epoch
    assert micro_pem_ckpt.adam.t == MICRO["epochs_stage1"]


def test_pretrain_deterministic(micro_manifest, tmp_path):
    cfgs = [
        pretrain_pem(micro_manifest, tiny_config(), TrainConfig(**MICRO), patch_count=1, augment=False)
        for _ in range(2)
    ]
    paths = [tmp_path / "r0.ckpt", tmp_path / "r1.ckpt"]
    for ck, p in zip(cfgs, paths):
        save_checkpoint(ck, p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_pretrain_logs_schedule(micro_manifest, tmp_path):
    log = tmp_path / "s1.log"
    pretrain_pem(
        micro_manifest, tiny_config(), TrainConfig(**MICRO),
        patch_count=1, augment=False, log_path=str(log),
    )
    lines = log.read_text().splitlines()
    assert lines[0].startswith("stage=1 init_batch_loss=")
    epochs = [ln for ln in lines if " epoch=" in ln]
    assert len(epochs) == MICRO["epochs_stage1"]
    assert all(ln.startswith("stage=1 epoch=") for ln in epochs)


# ---------------------------------------------------------------------------
# stage 2


def test_stage2_freezes_pem_branch_bitwise(micro_pem_ckpt, micro_quality_ckpt):
    for name, arr in micro_pem_ckpt.params.items():
        after = micro_quality_ckpt.params[name]
        assert np.array_equal(arr, after), f"{name} changed during stage 2"


def test_stage2_adds_quality_params(micro_quality_ckpt):
    names = set(micro_quality_ckpt.params)
    assert any(n.startswith("pqt.") for n in names)
    assert any(n.startswith("fuse.") for n in names)


def test_stage2_rejects_incompatible_model(micro_manifest, micro_pem_ckpt):
    other = dataclasses.replace(tiny_config(), embed_dim=32, heads=4, layers=2)
    with pytest.raises(CompatibilityError):
        train_quality(micro_manifest, micro_pem_ckpt, other, TrainConfig(**MICRO))


def test_stage2_rejects_incomplete_pem_branch(micro_manifest, micro_pem_ckpt):
    partial = {n: a for n, a in micro_pem_ckpt.params.items() if not n.startswith("dec.")}
    broken = Checkpoint(
        micro_pem_ckpt.model_cfg, micro_pem_ckpt.train_cfg, micro_pem_ckpt.loss_cfg, partial
    )
    with pytest.raises(CompatibilityError, match="complete error-map branch"):
        train_quality(micro_manifest, broken, tiny_config(), TrainConfig(**MICRO))


def test_share_backbone_trains_token_only(micro_manifest, micro_pem_ckpt):
    tc = TrainConfig(**{**MICRO, "share_backbone": True})
    ck = train_quality(micro_manifest, micro_pem_ckpt, tiny_config(), tc, patch_count=1, augment=False)
    names = set(ck.params)
    assert "pqt.token" in names
    assert not any(n.startswith("pqt.block") for n in names)
    assert not any(n.startswith("pqt.embed") for n in names)


def test_ablation_param_sets(micro_manifest, micro_pem_ckpt):
    pem_only = train_quality(
        micro_manifest, micro_pem_ckpt, tiny_config(),
        TrainConfig(**{**MICRO, "ablation_mode": "pem_only"}), patch_count=1, augment=False,
    )
    assert not any(n.startswith("pqt.") for n in pem_only.params)
    pqt_only = train_quality(
        micro_manifest, micro_pem_ckpt, tiny_config(),
        TrainConfig(**{**MICRO, "ablation_mode": "pqt_only"}), patch_count=1, augment=False,
    )
    assert "fuse.mlp1.w" not in pqt_only.params


def test_build_quality_store_needs_pqt_flag():
    cfg = tiny_config(use_pqt=False)
    with pytest.raises(CompatibilityError, match="use_pqt"):
        build_quality_store(cfg, TrainConfig(), {})


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_manifest_outputs(micro_manifest, micro_quality_ckpt):
    out = evaluate_manifest(micro_manifest, micro_quality_ckpt)
    assert set(out) == {"train", "test"}
    paths, targets, preds = out["train"]
    n_train = len(micro_manifest.split_samples("train"))
    assert len(paths) == len(targets) == len(preds) == n_train
    assert all(np.isfinite(p) for p in preds)
    assert out["test"] == ([], [], [])


def test_evaluate_rejects_pem_checkpoint(micro_manifest, micro_pem_ckpt):
    with pytest.raises(CompatibilityError, match="no fusion head"):
        evaluate_manifest(micro_manifest, micro_pem_ckpt)
