import numpy as np
import pytest

from dglprompt import tensor as T
from dglprompt.backbone import init_backbone
from dglprompt.config import PRESETS, TINY
from dglprompt.prompts import (
    GeneratorModeError,
    PromptBank,
    generate_linear,
    generate_transformer,
    prompt_shapes,
    reverse_direction,
    trainable_param_count,
)
from dglprompt.tensor import GradTape

VITB = PRESETS["vitb32-linear"]


def test_vitb32_linear_count_closed_form():
    expected = 12 * 4 * 768 + 4 * 768 + 2 * (768 * 512 + 512)
    assert expected == 827_392
    assert trainable_param_count(VITB) == expected
    assert round(trainable_param_count(VITB) / 1e6, 2) == 0.83


def test_vitb32_transformer_count_in_range():
    n = trainable_param_count(PRESETS["vitb32-transformer"])
    assert 7e6 <= n <= 11e6
    # unified prompts + one generator block + text MLP + global prompts
    assert n == 12 * 12 * 768 + 7_087_872 + (768 * 768 + 768 + 768 * 512 + 512) + 4 * 768


def test_no_prompt_baseline_count_is_zero():
    cfg = VITB.with_(attn_mode="baseline_cls_mean", generator="none", n_f=0, n_g=0, n_pre=0, n_post=0)
    assert trainable_param_count(cfg) == 0


def test_visual_only_deep_prompt_count():
    cfg = VITB.with_(attn_mode="baseline_cls_mean", generator="none", n_g=0, n_pre=0, n_post=0)
    assert trainable_param_count(cfg) == 36_864


def test_bank_fields_follow_generator():
    assert set(prompt_shapes(TINY)) == {
        "frame_prompts", "linear_pre.w", "linear_pre.b", "linear_post.w", "linear_post.b", "global_prompts",
    }
    pre_only = prompt_shapes(TINY.with_(text_positions="pre_only"))
    assert "linear_post.w" not in pre_only
    rev = prompt_shapes(TINY.with_(projection_direction="t_to_v"))
    assert "frame_prompts" not in rev and rev["text_pre"] == (TINY.N, 4, TINY.d_t)
    tr = prompt_shapes(TINY.with_(generator="transformer"))
    assert tr["unified_prompts"] == (TINY.N, 12, TINY.d_v)
    assert "gen.attn.w_q" in tr and "text_adjust.w2" in tr


def test_bank_count_matches_config_count_and_all_trainable():
    for gen in ("linear", "transformer", "none"):
        cfg = TINY.with_(generator=gen)
        bank = PromptBank(cfg)
        assert trainable_param_count(bank) == trainable_param_count(cfg)
        assert all(p.requires_grad for p in bank.params.values())


def test_unshared_copies_backbone_attention():
    cfg = TINY.with_(attn_mode="global_local_unshared")
    bb = init_backbone(cfg)
    bank = PromptBank(cfg, bb)
    np.testing.assert_array_equal(bank["global_attn.1.w_k"].data, bb["visual.1.attn.w_k"].data)
    assert bank["global_attn.1.w_k"].data is not bb["visual.1.attn.w_k"].data
    with pytest.raises(ValueError):
        PromptBank(cfg)


def test_linear_generation_zero_in_zero_out():
    bank = PromptBank(TINY)
    bank["frame_prompts"].data = np.zeros_like(bank["frame_prompts"].data)
    out = generate_linear(bank, 0)
    assert np.all(out.t_pre.data == 0) and np.all(out.t_post.data == 0)


def test_linear_generation_is_layer_local():
    bank = PromptBank(TINY)
    before = [generate_linear(bank, i).t_pre.data for i in range(TINY.N)]
    fp = bank["frame_prompts"].data.copy()
    fp[0] += 1.0
    bank["frame_prompts"].data = fp
    after = [generate_linear(bank, i).t_pre.data for i in range(TINY.N)]
    assert not np.allclose(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])


def test_shared_space_jacobian_is_w_pre_transpose():
    bank = PromptBank(TINY)
    fp = bank["frame_prompts"]
    probe = np.random.default_rng(0).normal(size=(TINY.n_pre, TINY.d_t))
    with GradTape() as tape:
        out = T.sum(T.mul(generate_linear(bank, 1).t_pre, T.Tensor(probe)))
    tape.backward(out)
    expected = np.zeros_like(fp.data)
    expected[1] = probe @ bank["linear_pre.w"].data.T
    np.testing.assert_allclose(fp.grad, expected, atol=1e-14)


def test_reverse_direction_mirror():
    cfg = TINY.with_(projection_direction="t_to_v")
    bank = PromptBank(cfg)
    out = reverse_direction(bank, 0)
    np.testing.assert_array_equal(out.t_pre.data, bank["text_pre"].data[0])
    expected_f = (bank["text_pre"].data[0] @ bank["proj_pre.w"].data + bank["proj_pre.b"].data
                  + bank["text_post"].data[0] @ bank["proj_post.w"].data + bank["proj_post.b"].data)
    np.testing.assert_allclose(out.f.data, expected_f, atol=1e-15)
    bank["text_pre"].data = np.zeros_like(bank["text_pre"].data)
    bank["text_post"].data = np.zeros_like(bank["text_post"].data)
    zero = reverse_direction(bank, 0)
    assert np.all(zero.f.data == 0) and np.all(zero.t_pre.data == 0)


def test_wrong_generator_mode_errors():
    with pytest.raises(GeneratorModeError):
        generate_transformer(PromptBank(TINY), 0)
    with pytest.raises(GeneratorModeError):
        generate_linear(PromptBank(TINY.with_(generator="transformer")), 0)
    with pytest.raises(GeneratorModeError):
        reverse_direction(PromptBank(TINY), 0)


def test_transformer_split_sizes():
    cfg = TINY.with_(generator="transformer", n_pre=3, n_post=2, n_f=5)
    out = generate_transformer(PromptBank(cfg), 1)
    assert out.t_pre.shape == (3, cfg.d_t)
    assert out.t_post.shape == (2, cfg.d_t)
    assert out.f.shape == (5, cfg.d_v)


def test_generation_is_pure():
    bank = PromptBank(TINY.with_(generator="transformer"))
    a, b = bank.generate(0), bank.generate(0)
    np.testing.assert_array_equal(a.t_pre.data, b.t_pre.data)
    np.testing.assert_array_equal(a.f.data, b.f.data)


def test_checkpoint_roundtrip_and_hash_check(tmp_path):
    bank = PromptBank(TINY, seed=5)
    path = tmp_path / "p.dglp"
    bank.save(path)
    other = PromptBank(TINY, seed=6)
    other.load(path)
    for k in bank.params:
        np.testing.assert_array_equal(other[k].data, bank[k].data)
    with pytest.raises(ValueError):
        PromptBank(TINY.with_(n_g=2)).load(path)
