import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dermfoundry.core import ConfigError, ShapeError, ValidationError
from dermfoundry.pretrain import (
    ArchConfig,
    NonFiniteLossError,
    PatchGridSpec,
    PatchMask,
    PretrainBatchLoss,
    PretrainModel,
    Pretrainer,
    PretrainSettings,
    RandomFrozenTeacher,
    TeacherUnavailableError,
    alignment_loss,
    build_encoder,
    build_teacher,
    cosine_lr,
    encode_visible,
    generate_block_mask,
    largest_block_area,
    regress_masked,
    split_targets,
    teacher_targets,
)
from dermfoundry.pretrain.model import MaskRegressor, arch_from_hyperparameters

from _helpers import fixture_problem

FIX = ArchConfig.fixture()


# -- geometry and masks -----------------------------------------------------


def test_default_grid_matches_table():
    spec = PatchGridSpec()
    assert spec.grid == 14 and spec.num_patches == 196
    assert spec.teacher_patch_side * spec.grid == 196


def test_grid_validation():
    with pytest.raises(ValidationError):
        PatchGridSpec(image_side=225)
    with pytest.raises(ValidationError):
        PatchGridSpec(image_side=224, patch_side=16, teacher_image_side=200)


@settings(max_examples=60, deadline=None)
@given(grid=st.integers(2, 16), frac=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_block_mask_count_exact(grid, frac, seed):
    spec = PatchGridSpec(image_side=grid * 2, patch_side=2, teacher_image_side=grid * 3)
    target = int(round(frac * grid * grid))
    m = generate_block_mask(spec, target, np.random.default_rng(seed))
    assert m.count_masked == target
    assert m.masked.size == grid * grid


def test_block_mask_table_count_and_empty(rng):
    spec = PatchGridSpec()
    assert generate_block_mask(spec, 118, rng).count_masked == 118
    assert generate_block_mask(spec, 0, rng).count_masked == 0
    with pytest.raises(ValidationError):
        generate_block_mask(spec, 197, rng)
    with pytest.raises(ValidationError):
        generate_block_mask(spec, -1, rng)


def test_block_mask_blocks_and_marginals():
    spec = PatchGridSpec()
    rng = np.random.default_rng(0)
    freq = np.zeros(196)
    for _ in range(1000):
        m = generate_block_mask(spec, 98, rng)
        assert largest_block_area(m, 14) >= 4
        freq += m.masked
    freq /= 1000
    assert freq.min() >= 0.3 and freq.max() <= 0.7


def test_patch_mask_counts():
    m = PatchMask(np.array([[True, False], [False, True]]))
    assert m.count_masked == 2
    assert list(m.visible_index) == [1, 2]
    assert list(m.masked_index) == [0, 3]


# -- teacher ------------------------------------------------------------------


def test_teacher_frozen_and_deterministic():
    teacher = RandomFrozenTeacher(FIX)
    x = torch.rand(1, 3, 32, 32)
    a = teacher_targets(teacher, x, FIX.grid_spec)
    b = teacher_targets(teacher, x, FIX.grid_spec)
    assert torch.equal(a, b)
    assert all(not p.requires_grad for p in teacher.parameters())
    assert a.shape == (1, 64, FIX.target_dim)
    # building a second teacher reproduces the same weights and leaves the global stream alone
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    again = RandomFrozenTeacher(FIX)
    assert torch.equal(torch.rand(1), before)
    for p, q in zip(teacher.parameters(), again.parameters()):
        assert torch.equal(p, q)


def test_teacher_nonconstant():
    teacher = RandomFrozenTeacher(FIX)
    zeros = teacher_targets(teacher, torch.zeros(1, 3, 32, 32), FIX.grid_spec)
    ones = teacher_targets(teacher, torch.ones(1, 3, 32, 32), FIX.grid_spec)
    assert not torch.allclose(zeros, ones)


def test_target_partition_table_counts(rng):
    spec = PatchGridSpec()
    targets = torch.randn(1, 196, 8)
    vis, msk = split_targets(targets, generate_block_mask(spec, 118, rng))
    assert vis.shape[1] == 78 and msk.shape[1] == 118


def test_teacher_unavailable_message(tmp_path):
    with pytest.raises(TeacherUnavailableError, match="random"):
        build_teacher(FIX, str(tmp_path / "missing.pt"))
    assert isinstance(build_teacher(FIX, "random"), RandomFrozenTeacher)


# -- encoder and regressor ----------------------------------------------------


def test_encode_visible_rows_and_firewall(rng):
    torch.manual_seed(0)
    enc = build_encoder(FIX).eval()
    mask = generate_block_mask(FIX.grid_spec, 38, rng)
    x = torch.rand(1, 3, 32, 32)
    out = encode_visible(enc, x, mask)
    assert out.shape == (1, 64 - 38, FIX.embed_dim)
    # scramble every masked pixel
    pix = torch.from_numpy(np.kron(mask.masked.reshape(8, 8), np.ones((4, 4)))).bool()
    y = x.clone()
    y[:, :, pix] = torch.rand(1, 3, int(pix.sum()))
    assert torch.equal(encode_visible(enc, y, mask), out)


def test_encode_visible_all_masked():
    enc = build_encoder(FIX)
    with pytest.raises(ValidationError):
        encode_visible(enc, torch.rand(1, 3, 32, 32), PatchMask(np.ones(64, bool)))


def test_vit_large_contract():
    arch = ArchConfig.vit_large()
    assert (arch.depth, arch.embed_dim, arch.num_heads) == (24, 1024, 16)
    assert (arch.regressor_depth, arch.regressor_dim, arch.regressor_heads) == (4, 1024, 16)
    assert arch.target_dim == 768


def test_regressor_rows_and_empty(rng):
    torch.manual_seed(0)
    reg = MaskRegressor(FIX).eval()
    mask = generate_block_mask(FIX.grid_spec, 20, rng)
    vis = torch.randn(1, 44, FIX.embed_dim)
    assert regress_masked(reg, vis, mask).shape == (1, 20, FIX.regressor_dim)
    empty = PatchMask(np.zeros(64, bool))
    out = regress_masked(reg, torch.randn(1, 64, FIX.embed_dim), empty)
    assert out.shape == (1, 0, FIX.regressor_dim)
    assert float(alignment_loss(out, torch.zeros(1, 0, FIX.regressor_dim))) == 0.0


def test_regressor_permutation_equivariance(rng):
    torch.manual_seed(0)
    reg = MaskRegressor(FIX).double().eval()
    mask = generate_block_mask(FIX.grid_spec, 24, rng)
    vis_pos = torch.from_numpy(mask.visible_index)[None]
    msk_pos = torch.from_numpy(mask.masked_index)[None]
    vis = torch.randn(1, len(mask.visible_index), FIX.embed_dim, dtype=torch.float64)
    base = reg.forward_positions(vis, vis_pos, msk_pos)
    perm = torch.from_numpy(rng.permutation(vis.shape[1]))
    shuffled = reg.forward_positions(vis[:, perm], vis_pos[:, perm], msk_pos)
    assert torch.allclose(base, shuffled, atol=1e-12)
    # masked queries are equivariant too
    qp = torch.from_numpy(rng.permutation(msk_pos.shape[1]))
    out = reg.forward_positions(vis, vis_pos, msk_pos[:, qp])
    assert torch.allclose(out, base[:, qp], atol=1e-12)


# -- loss -------------------------------------------------------------------


def test_alignment_loss_cases():
    x = torch.randn(5, 8)
    assert float(alignment_loss(x, x)) == pytest.approx(0.0, abs=1e-12)
    e = torch.eye(4)
    assert float(alignment_loss(e[:2], e[2:])) == pytest.approx(2.0)
    y = torch.randn(5, 8)
    scaled = x.clone()
    scaled[2] *= 2
    assert float(alignment_loss(scaled, y)) == pytest.approx(float(alignment_loss(x, y)), abs=1e-6)
    with pytest.raises(ShapeError):
        alignment_loss(torch.randn(3, 8), torch.randn(4, 8))
    with pytest.raises(ShapeError):
        alignment_loss(torch.randn(3, 8), torch.randn(3, 6))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_alignment_loss_bounds(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(6, 5, generator=g), torch.randn(6, 5, generator=g)
    v = float(alignment_loss(a, b))
    assert 0.0 <= v <= 4.0 + 1e-6


def test_batch_loss_total():
    assert PretrainBatchLoss(0.7, 0.3).total == 0.7
    assert PretrainBatchLoss(0.7, 0.3, 1.0, 0.5).total == pytest.approx(0.85)


def test_single_weight_finite_difference():
    model, loss_fn = fixture_problem(seed=3)
    w = model.encoder.blocks[0].attn.q.weight
    model.zero_grad()
    loss_fn().backward()
    analytic = float(w.grad[1, 2])
    eps = 1e-6
    with torch.no_grad():
        orig = float(w[1, 2])
        w[1, 2] = orig + eps
        up = float(loss_fn())
        w[1, 2] = orig - eps
        down = float(loss_fn())
        w[1, 2] = orig
    numeric = (up - down) / (2 * eps)
    assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-4


# -- training step ------------------------------------------------------------


def _trainer(lr=1.5e-3, w_visible=0.0, seed=0):
    torch.manual_seed(seed)
    model = PretrainModel(FIX)
    teacher = RandomFrozenTeacher(FIX)
    s = PretrainSettings(mask_count=38, learning_rate=lr, total_steps=10, warmup_steps=0, w_visible=w_visible)
    return Pretrainer(model, teacher, s, np.random.default_rng(seed))


def test_step_total_equals_masked_when_visible_weight_zero():
    tr = _trainer()
    out = tr.step(torch.rand(4, 3, 32, 32))
    assert out.total == out.masked_align
    assert math.isfinite(out.total) and out.visible_align >= 0


def test_zero_lr_leaves_parameters_unchanged():
    tr = _trainer(lr=0.0)
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    tr.step(torch.rand(4, 3, 32, 32), lr=0.0)
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_teacher_unchanged_by_training():
    tr = _trainer(w_visible=1.0)
    before = [p.clone() for p in tr.teacher.parameters()]
    for _ in range(3):
        tr.step(torch.rand(4, 3, 32, 32))
    for p, q in zip(tr.teacher.parameters(), before):
        assert torch.equal(p, q)


def test_nonfinite_loss_aborts_with_snapshot():
    tr = _trainer()
    with torch.no_grad():
        tr.model.proj_masked.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        tr.step(torch.rand(2, 3, 32, 32))
    snap = info.value.snapshot
    assert snap["step"] == 0 and "param_norms" in snap


def test_cosine_schedule():
    assert cosine_lr(0, 100, 10, 1.0) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 10, 1.0) == pytest.approx(1.0)
    assert cosine_lr(10, 100, 10, 1.0) == pytest.approx(1.0)
    assert cosine_lr(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_settings_from_table():
    from dermfoundry.config import resolve_hyperparameters

    hp = resolve_hyperparameters("pretrain", env={})
    arch = arch_from_hyperparameters(hp)
    s = PretrainSettings.from_hyperparameters(hp, arch)
    assert s.mask_count == round(64 * 118 / 196)
    assert s.clip_norm == 3.0 and s.learning_rate == 1.5e-3
    assert (s.w_masked, s.w_visible) == (1.0, 0.0)
    big = PretrainSettings.from_hyperparameters({**hp, "encoder_preset": "vit_large"}, ArchConfig.vit_large())
    assert big.mask_count == 118
    with pytest.raises(ConfigError):
        arch_from_hyperparameters({"encoder_preset": "resnet"})
