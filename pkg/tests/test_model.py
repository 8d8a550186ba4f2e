import math

import numpy as np
import pytest

from dglprompt import tensor as T
from dglprompt.config import TINY
from dglprompt.data import SyntheticSpec, generate_dataset
from dglprompt.metrics import ranks
from dglprompt.model import DGLModel, RetrievalBatch, find_eot, similarity, symmetric_ce_loss
from dglprompt.tensor import GradTape, ShapeError, Tensor, grad_check

import reference as ref

PLAIN = TINY.with_(attn_mode="baseline_cls_mean", generator="none", n_f=0, n_g=0, n_pre=0, n_post=0)


def tiny_batch(n=4, seed=0):
    return generate_dataset(SyntheticSpec(n_pairs=max(n, 16), n_classes=2, seed=seed)).batch.subset(np.arange(n))


def test_plain_text_tower_matches_reference():
    m = DGLModel(PLAIN)
    b = tiny_batch()
    out = m.encode_text(b.captions).data
    w = ref.raw_weights(m.backbone)
    for i in range(len(b)):
        np.testing.assert_allclose(out[i], ref.text_encoder(b.captions[i], w, PLAIN.N, PLAIN.H_t), rtol=0, atol=1e-12)


def test_plain_visual_tower_matches_reference():
    m = DGLModel(PLAIN)
    b = tiny_batch()
    out = m.encode_video(b.videos).data
    w = ref.raw_weights(m.backbone)
    for i in range(len(b)):
        np.testing.assert_allclose(out[i], ref.video_avg_cls(b.videos[i], w, PLAIN.N, PLAIN.H_v), rtol=0, atol=1e-12)


@pytest.mark.parametrize("cfg", [TINY, TINY.with_(generator="transformer"), TINY.with_(text_positions="pre_only"),
                                 TINY.with_(projection_direction="t_to_v"), TINY.with_(attn_mode="local_only"),
                                 TINY.with_(attn_mode="global_only"), TINY.with_(attn_mode="global_local_unshared"),
                                 TINY.with_(visual_output="avg_global_local")])
def test_unit_norm_outputs(cfg):
    m = DGLModel(cfg)
    b = tiny_batch()
    tf, vf = m.encode_text(b.captions).data, m.encode_video(b.videos).data
    assert tf.shape == vf.shape == (4, cfg.d_joint)
    np.testing.assert_allclose(np.linalg.norm(tf, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(vf, axis=1), 1.0, atol=1e-12)


def test_identical_videos_identical_embeddings_and_permutation_invariance():
    m = DGLModel(TINY)
    b = tiny_batch(2)
    vids = np.stack([b.videos[0], b.videos[0], b.videos[0][[2, 0, 3, 1]]])
    out = m.encode_video(vids).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_allclose(out[2], out[0], rtol=0, atol=1e-9)


def test_eot_detection():
    caps = np.array([[1, 5, 2, 0], [1, 2, 0, 0]])
    np.testing.assert_array_equal(find_eot(caps), [2, 1])
    with pytest.raises(ValueError):
        find_eot(np.array([[1, 5, 6, 0]]))


def test_similarity_examples():
    e = Tensor(np.eye(2))
    np.testing.assert_array_equal(similarity(e, e, math.log(1.0)).data, np.eye(2))
    a = Tensor([[1.0, 0.0]])
    b = Tensor([[0.0, 1.0]])
    assert similarity(a, b, 3.0).data[0, 0] == 0.0
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    S = similarity(Tensor(x), Tensor(x), 2.0).data
    assert np.all(np.argmax(S, axis=1) == np.arange(5))


def test_loss_examples():
    assert symmetric_ce_loss(Tensor(np.zeros((4, 4)))).item() == pytest.approx(math.log(4), abs=1e-14)
    assert symmetric_ce_loss(Tensor(100.0 * np.eye(3))).item() < 1e-40
    S = np.random.default_rng(1).normal(size=(3, 3))

    def ce(M):
        return np.mean([-(M[i, i] - math.log(sum(math.exp(v) for v in M[i]))) for i in range(3)])

    assert abs(symmetric_ce_loss(Tensor(S)).item() - 0.5 * (ce(S) + ce(S.T))) < 1e-12
    assert abs(symmetric_ce_loss(Tensor(S.T)).item() - symmetric_ce_loss(Tensor(S)).item()) < 1e-15
    with pytest.raises(ShapeError):
        symmetric_ce_loss(Tensor(np.zeros((2, 3))))


def test_rank_invariance_under_positive_scale():
    S = np.random.default_rng(2).normal(size=(6, 6))
    np.testing.assert_array_equal(ranks(S), ranks(3.7 * S))


def test_similarity_batch_reorder_equivariance():
    m = DGLModel(TINY)
    b = tiny_batch()
    S = m.similarity(b).data
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(m.similarity(b.subset(perm)).data, S[np.ix_(perm, perm)], atol=1e-12)


def _grads(model, batch):
    model.bank.zero_grad()
    with GradTape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)
    return {k: p.grad for k, p in model.trainable().items()}


def test_gradient_reach_and_frozen_untouched():
    m = DGLModel(TINY)
    g = _grads(m, tiny_batch())
    for name, grad in g.items():
        if name.startswith("linear_post"):
            # postfix rows sit after EOT; the causal mask hides them from the feature
            assert grad is None or not np.any(grad), name
        else:
            assert grad is not None and np.abs(grad).max() > 0, name
    assert all(t.grad is None for t in m.backbone.tensors.values())


def test_transformer_generator_grads_reach_both_branches():
    cfg = TINY.with_(generator="transformer")
    m = DGLModel(cfg)
    g = _grads(m, tiny_batch())["unified_prompts"]
    text_rows = g[:, : cfg.n_pre]
    frame_rows = g[:, cfg.n_pre + cfg.n_post :]
    assert np.abs(text_rows).max() > 0 and np.abs(frame_rows).max() > 0
    assert all(np.abs(v).max() > 0 for k, v in _grads(m, tiny_batch()).items() if k.startswith("gen."))


def test_whole_model_grad_check_small():
    cfg = TINY.with_(d_v=8, d_t=8, d_joint=8, H_v=2, H_t=2, n_f=2, n_pre=2, n_post=2, n_g=2)
    m = DGLModel(cfg)
    b = tiny_batch(2)
    for name in ("global_prompts", "frame_prompts", "linear_pre.w", "linear_post.w"):
        p = m.bank[name]
        assert grad_check(lambda x: m.loss(b), p) < 1e-4, name


def test_trainable_logit_scale_gets_gradient():
    m = DGLModel(TINY.with_(train_logit_scale=True))
    g = _grads(m, tiny_batch())
    assert g["logit_scale"] is not None and g["logit_scale"] != 0


def test_retrieval_batch_validation():
    with pytest.raises(ShapeError):
        RetrievalBatch(np.array([[1, 2]]), np.zeros((2, 4, 4, 16)))
