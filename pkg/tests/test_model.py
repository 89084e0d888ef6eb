import numpy as np
import pytest

from expnet.gradcheck import adaptive_numeric_gradient, relative_error
from expnet.gradsuite import STEPS, run_case
from expnet.model import (ConfigError, CrossAttentionFusion, ExpNet, MLPAddFusion, ModelConfig,
                          ResidualStage, expnet_forward, fuse_embeddings, load_checkpoint,
                          residual_stage_forward, save_checkpoint, training_loss)
from expnet.tensor import Tensor, backward


def small32(**changes):
    return ModelConfig(image_size=32, widths=(4, 8, 16, 32), hidden=16, fusion_width=16,
                       **changes)


# config ---------------------------------------------------------------------------


def test_config_text_roundtrip():
    cfg = ModelConfig(fusion="cross_attention", ci=False, widths=(8, 16, 32, 64))
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_text("stages=4\ncolour=blue\n")


@pytest.mark.parametrize("text", ["stages=1\nwidths=8\nblocks=1", "fusion=concat", "p=1",
                                  "image_size=60"])
def test_config_validation(text):
    with pytest.raises(ConfigError):
        ModelConfig.from_text(text)


def test_default_is_desk_scale_small():
    cfg = ModelConfig()
    assert (cfg.stages, cfg.widths, cfg.blocks, cfg.p) == (4, (16, 32, 64, 128), (2, 2, 2, 2), 4)
    assert (cfg.image_size, cfg.hidden, cfg.heads, cfg.fusion_width) == (64, 128, 4, 128)


# residual stages ------------------------------------------------------------------------


def test_zero_residual_branch_is_identity():
    rng = np.random.default_rng(0)
    stage = ResidualStage(rng, 4, 2)
    for block in stage.blocks:
        block.conv2.weight.data[...] = 0
        block.conv2.bias.data[...] = 0
    f = rng.normal(size=(16, 16, 4)).astype(np.float32)
    out = residual_stage_forward(f, stage)
    assert out.shape == (16, 16, 4)
    assert np.array_equal(out.data, f)


def test_stage_rejects_wrong_channels():
    with pytest.raises(ValueError):
        ResidualStage(np.random.default_rng(0), 4, 1)(Tensor(np.zeros((1, 8, 8, 3))))


def test_one_block_stage_gradient():
    assert run_case("residual_stage", instances=3) <= 1e-5


# fusion -------------------------------------------------------------------------------------


def _identity_mlp(mlp, d):
    mlp.fc1.weight.data = np.eye(d)
    mlp.fc1.bias.data = np.zeros(d)
    mlp.fc2.weight.data = np.eye(d)
    mlp.fc2.bias.data = np.zeros(d)


def test_mlp_add_identity_adapters_sum():
    rng = np.random.default_rng(1)
    fusion = MLPAddFusion(rng, 6, [6, 6, 6], 6)
    _identity_mlp(fusion.focal, 6)
    for m in fusion.impressions:
        _identity_mlp(m, 6)
    # positive inputs make the hidden relu the identity
    focal = rng.uniform(0.1, 1, size=6)
    imps = [rng.uniform(0.1, 1, size=6) for _ in range(3)]
    fused = fuse_embeddings(focal, imps, fusion).data
    np.testing.assert_allclose(fused, focal + sum(imps), atol=1e-12)


@pytest.mark.parametrize("mode", ["mlp_add", "cross_attention"])
def test_fused_length_is_fusion_width(mode):
    rng = np.random.default_rng(2)
    if mode == "mlp_add":
        fusion = MLPAddFusion(rng, 10, [4, 4, 4], 12)
    else:
        fusion = CrossAttentionFusion(rng, 10, [4, 4, 4], 12, 4)
    out = fuse_embeddings(rng.normal(size=10), [rng.normal(size=4) for _ in range(3)], fusion)
    assert out.shape == (12,)


def test_per_source_adapters_are_order_sensitive():
    rng = np.random.default_rng(3)
    fusion = MLPAddFusion(rng, 5, [5, 5, 5], 8).astype(np.float64)
    focal = rng.normal(size=5)
    imps = [rng.normal(size=5) for _ in range(3)]
    a = fuse_embeddings(focal, imps, fusion).data
    b = fuse_embeddings(focal, imps[::-1], fusion).data
    assert not np.allclose(a, b)


def test_fusion_rejects_empty_impressions():
    fusion = MLPAddFusion(np.random.default_rng(0), 5, [5], 8)
    with pytest.raises(ValueError):
        fuse_embeddings(np.zeros(5), [], fusion)


# forward ------------------------------------------------------------------------------------------


def test_forward_lengths_and_logits():
    cfg = small32(num_classes=5)
    model = ExpNet(cfg)
    x = np.random.default_rng(4).normal(size=(32, 32, 3)).astype(np.float32)
    out = expnet_forward(x, model, cfg)
    assert out.logits.shape == (5,)
    assert len(out.impressions) == 3 and len(out.saliency_maps) == 3
    assert [m.stage_index for m in out.saliency_maps] == [1, 2, 3]
    assert out.focal_embedding.shape == (1, 32)


@pytest.mark.parametrize("stages", [2, 3])
def test_list_lengths_follow_stage_count(stages):
    cfg = ModelConfig(stages=stages, widths=(4, 8, 16)[:stages], blocks=(1,) * stages,
                      image_size=16, p=2, hidden=8, fusion_width=8)
    out = ExpNet(cfg)(np.zeros((2, 16, 16, 3), dtype=np.float32))
    assert len(out.impressions) == len(out.saliency_maps) == stages - 1


def test_forward_bit_deterministic():
    model = ExpNet(small32())
    x = np.random.default_rng(5).normal(size=(2, 32, 32, 3)).astype(np.float32)
    assert np.array_equal(model(x).logits.data, model(x).logits.data)
    assert np.array_equal(ExpNet(small32())(x).logits.data, model(x).logits.data)


def test_forward_rejects_wrong_size():
    with pytest.raises(ValueError):
        ExpNet(small32())(np.zeros((16, 16, 3)))


def test_focal_off_has_no_maps():
    out = ExpNet(small32(focal=False))(np.zeros((1, 32, 32, 3), dtype=np.float32))
    assert out.saliency_maps == [] and out.impressions == []
    assert out.logits.shape == (1, 4)


@pytest.mark.parametrize("toggle", ["ci", "sine", "band"])
def test_single_toggle_variants_run(toggle):
    out = ExpNet(small32(**{toggle: False}))(np.zeros((1, 32, 32, 3), dtype=np.float32))
    assert out.logits.shape == (1, 4) and len(out.saliency_maps) == 3


# loss -------------------------------------------------------------------------------------------------


class _Out:
    def __init__(self, logits):
        self.logits = Tensor(np.asarray(logits, dtype=np.float64))


def test_loss_uniform_and_saturated():
    assert training_loss(_Out(np.zeros(10)), 7).item() == pytest.approx(np.log(10), abs=1e-12)
    logits = np.zeros(4)
    logits[1] = 30
    assert training_loss(_Out(logits), 1).item() <= 1e-12
    with pytest.raises(ValueError):
        training_loss(_Out(np.zeros(4)), 4)


def test_loss_reaches_nefirf_conditioning():
    model = ExpNet(small32())
    x = np.random.default_rng(6).normal(size=(2, 32, 32, 3)).astype(np.float32)
    backward(training_loss(model(x), np.array([0, 1])))
    for shift in model.shifts:
        for head in shift.saliency.heads:
            assert np.abs(head.weight.grad).sum() > 0


def mixed_maps(model, rng):
    """Undo the all-focus start so maps hold several context patches."""
    for shift in model.shifts:
        last = shift.saliency.convs[-1]
        last.weight.data[...] = rng.uniform(-1, 1, last.weight.shape)
        last.bias.data[...] = 0


def test_field_starts_all_focus():
    out = ExpNet(small32())(np.random.default_rng(9).normal(size=(3, 32, 32, 3)).astype(np.float32))
    for m in out.saliency_maps:
        assert np.all(m.binary.sum(axis=(1, 2)) == 15)


def test_no_dead_parameters_on_a_smoke_batch():
    model = ExpNet(small32())
    rng = np.random.default_rng(7)
    # one context patch would leave the attention query without influence
    mixed_maps(model, rng)
    seen = {name: False for name, _ in model.named_parameters()}
    for _ in range(2):
        model.zero_grad()
        x = rng.normal(size=(4, 32, 32, 3)).astype(np.float32)
        backward(training_loss(model(x), rng.integers(0, 4, 4)))
        for name, p in model.named_parameters():
            seen[name] |= bool(np.any(p.grad != 0))
    dead = [name for name, ok in seen.items() if not ok]
    # the offset predictors start at zero but still receive gradient
    assert dead == []


@pytest.mark.parametrize("case", ["full_model_mlp_add", "full_model_cross_attention"])
def test_tiny_model_gradients(case):
    assert run_case(case, instances=1) <= 1e-4


def test_expnet_small_sampled_coordinates():
    """Default ExpNet-small, one image, 20 coordinates sampled over all parameters."""
    rng = np.random.default_rng(8)
    model = ExpNet(ModelConfig()).astype(np.float64)
    for shift in model.shifts:
        shift.deform.offset_weight.data[...] = 0.01 * rng.normal(size=shift.deform.offset_weight.shape)
    x = Tensor(rng.normal(size=(1, 64, 64, 3)))
    params = model.parameters()
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), 20, replace=False)
    owners = np.searchsorted(np.cumsum(sizes), picks, side="right")
    with model.frozen_saliency(jitter=1e-2):
        fn = lambda: training_loss(model(x), 2)
        model.zero_grad()
        backward(fn())
        analytic, numeric = [], []
        for pick, owner in zip(picks, owners):
            p = params[owner]
            local = int(pick - (sizes[:owner].sum()))
            analytic.append(p.grad.reshape(-1)[local])
            numeric.append(adaptive_numeric_gradient(fn, p, STEPS, [local])[0])
    assert relative_error(np.array(analytic), np.array(numeric)) <= 1e-4


# checkpoints ---------------------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = ExpNet(small32(fusion="cross_attention"))
    save_checkpoint(model, tmp_path / "ck", epoch=3, seed=11)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert loaded.cfg == model.cfg
    assert meta["epoch"] == "3" and meta["train_seed"] == "11"
    for (na, a), (nb, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and np.array_equal(a.data, b.data)


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="no manifest"):
        load_checkpoint(tmp_path)
