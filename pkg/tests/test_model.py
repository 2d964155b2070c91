import math

import numpy as np
import pytest

from mctoken.autodiff import Tensor, default_dtype, ops
from mctoken.model import (
    ConceptScores,
    ConceptTokenTransformer,
    ModelConfig,
    TokenLayout,
    build_text_bank,
    predict,
    pseudo_text_embeddings,
    read_embedding_file,
    write_embedding_file,
)
from mctoken.objectives import total_loss
from mctoken.optim import AdamW


def small_cfg(variant="hybrid", **kw):
    base = dict(image_size=16, patch_size=4, num_concepts=3, embed_dim=16, heads=2, depth=4,
                patch_layers=2, text_layers=1, visual_layers=1, text_dim=24, variant=variant,
                layer_scale_init=0.5)
    base.update(kw)
    return ModelConfig(**base)


def make_model(variant="hybrid", dtype=np.float64, **kw):
    cfg = small_cfg(variant, **kw)
    bank = None
    if cfg.needs_text_bank:
        bank = build_text_bank(num_concepts=cfg.num_concepts, text_dim=cfg.text_dim, embed_dim=cfg.embed_dim)
    return ConceptTokenTransformer(cfg, bank, dtype=dtype)


def images(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3))


@pytest.mark.parametrize("variant", ["baseline", "token-fusion", "text-guided", "hybrid"])
def test_shapes_and_trace(variant):
    model = make_model(variant)
    cfg = model.config
    out = model(images(), record_trace=True)
    c, m = cfg.num_concepts, cfg.num_patches
    has_text = variant in ("text-guided", "hybrid")
    assert out.tokens.shape == (2, (2 * c if has_text else c) + m, cfg.embed_dim)
    assert len(out.trace.patch) == cfg.patch_layers
    assert len(out.trace.text) == (cfg.text_layers if has_text else 0)
    assert len(out.trace.visual) == cfg.visual_layers
    for a in out.trace.patch + out.trace.text + out.trace.visual:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)
    assert (out.scores.text is not None) == has_text
    assert out.cam.shape == (2, cfg.grid, cfg.grid, c)


def test_desk_layout_length():
    cfg = ModelConfig()
    assert cfg.layout.length == 2 * 6 + 64
    assert TokenLayout(6, 64, has_text=False).length == 70


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=9)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=130)
    with pytest.raises(ValueError):
        ModelConfig(variant="fusion")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})


def test_zero_weights_give_half():
    model = make_model()
    for p in model.parameters():
        p.data[...] = 0
    out = model(images())
    for br in out.scores.branches():
        np.testing.assert_array_equal(br.data, 0)
    np.testing.assert_array_equal(predict(out.scores), 0.5)


def test_predict_closed_forms():
    t = lambda v: Tensor(np.full((1, 1), v), dtype=np.float64)
    assert predict(ConceptScores(t(2.0), t(-2.0), t(0.0)))[0, 0] == 0.5
    assert predict(ConceptScores(t(1.0), t(1.0), t(1.0)))[0, 0] == pytest.approx(1 / (1 + math.exp(-1)))
    assert predict(ConceptScores(t(1.0), t(3.0)))[0, 0] == pytest.approx(1 / (1 + math.exp(-2)))


def test_forward_is_deterministic():
    x = images()
    a = make_model(dtype=np.float32)(x)
    b = make_model(dtype=np.float32)(x)
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)


def test_patch_embedding_locality_and_zero_image():
    model = make_model()
    x = images(1)
    y = x.copy()
    y[0, 4:8, 8:12] += 0.5  # patch (1, 2)
    ex, ey = model.patch_embed(x).data[0], model.patch_embed(y).data[0]
    changed = np.nonzero(np.abs(ex - ey).max(-1) > 0)[0]
    assert changed.tolist() == [1 * 4 + 2]
    z = model.patch_embed(np.zeros((1, 16, 16, 3))).data[0]
    np.testing.assert_allclose(z, model.pos_embed.data, atol=1e-12)


def test_bad_image_shape():
    with pytest.raises(ValueError):
        make_model().patch_embed(np.zeros((1, 12, 12, 3)))


def test_patch_tokens_independent_of_text_tokens():
    x = images()
    a = make_model()
    b = make_model()
    b.text_tokens.data[...] = np.random.default_rng(9).standard_normal(b.text_tokens.shape)
    lay = a.config.layout
    oa, ob = a(x), b(x)
    np.testing.assert_array_equal(oa.tokens.data[:, lay.patch], ob.tokens.data[:, lay.patch])
    assert not np.array_equal(oa.tokens.data[:, lay.text], ob.tokens.data[:, lay.text])


def test_concept_permutation_equivariance():
    x = images()
    y = np.array([[1, 0, 1], [0, 1, 1]])
    perm = np.array([2, 0, 1])
    a, b = make_model(), make_model()
    b.visual_tokens.data[...] = a.visual_tokens.data[perm]
    b.text_tokens.data[...] = a.text_tokens.data[perm]
    b.cam_head.weight.data[...] = a.cam_head.weight.data[..., perm]
    b.cam_head.bias.data[...] = a.cam_head.bias.data[perm]

    def loss(m, labels):
        o = m(x)
        return total_loss(o.scores.visual, o.scores.patch, o.scores.text, o.visual_layer_tokens, labels).total.item()

    assert loss(a, y) == pytest.approx(loss(b, y[:, perm]), abs=1e-12)


def test_frozen_text_tokens_survive_step():
    model = make_model(dtype=np.float32)
    before = model.text_tokens.data.copy()
    opt = AdamW(model.named_parameters(), lr=1e-2)
    o = model(images().astype(np.float32))
    total_loss(o.scores.visual, o.scores.patch, o.scores.text, o.visual_layer_tokens,
               np.ones((2, 3), dtype=int)).total.backward()
    opt.step()
    np.testing.assert_array_equal(model.text_tokens.data, before)
    assert "text_tokens" not in dict(model.named_parameters())


def test_trainable_projection_mode():
    model = make_model(freeze_text_tokens=False)
    names = dict(model.named_parameters())
    assert "text_projection" in names
    np.testing.assert_allclose(model.concept_text_tokens().data,
                               model.text_embeddings.data @ model.text_projection.data)


def test_text_bank_construction(tmp_path):
    e = pseudo_text_embeddings(6, 1024)
    cos = e @ e.T
    assert np.abs(cos - np.diag(np.diag(cos))).max() < 0.1
    bank = build_text_bank(num_concepts=4, text_dim=8, embed_dim=8, projection="identity")
    np.testing.assert_allclose(bank.tokens, bank.embeddings)
    path = tmp_path / "emb.txt"
    write_embedding_file(path, pseudo_text_embeddings(5, 8))
    with pytest.raises(ValueError, match="5 embedding rows"):
        read_embedding_file(path, num_concepts=6, text_dim=8)
    loaded = build_text_bank(path, num_concepts=5, text_dim=8, embed_dim=4)
    np.testing.assert_allclose(loaded.embeddings, pseudo_text_embeddings(5, 8))


def test_text_variants_require_bank():
    with pytest.raises(ValueError):
        ConceptTokenTransformer(small_cfg("hybrid"), None)


@pytest.mark.parametrize("kind", ["gap", "gmp", "gwrp"])
def test_cam_constant_map_pools_to_constant(kind):
    model = make_model(pooling=kind, cam_kernel=1)
    head = model.cam_head
    head.weight.data[...] = 0
    head.bias.data[...] = np.array([0.3, -1.0, 2.0])
    cam, logits = head(Tensor(np.random.default_rng(0).standard_normal((2, 16, 16)), dtype=np.float64))
    np.testing.assert_allclose(logits.data, np.tile([0.3, -1.0, 2.0], (2, 1)))


def test_cam_hand_2x2_gmp():
    cfg = small_cfg(image_size=8, patch_size=4, cam_kernel=1, pooling="gmp")
    model = ConceptTokenTransformer(cfg, build_text_bank(num_concepts=3, text_dim=24, embed_dim=16), dtype=np.float64)
    head = model.cam_head
    head.weight.data[...] = 0
    head.weight.data[0, 0, 0, :] = [1.0, -1.0, 2.0]
    head.bias.data[...] = 0
    tokens = np.zeros((1, 4, 16))
    tokens[0, :, 0] = [0.5, -2.0, 1.5, 0.0]
    cam, logits = head(Tensor(tokens, dtype=np.float64))
    hand = np.outer([0.5, -2.0, 1.5, 0.0], [1.0, -1.0, 2.0])
    np.testing.assert_allclose(logits.data[0], hand.max(axis=0))
    with pytest.raises(ValueError):
        head(Tensor(np.zeros((1, 5, 16)), dtype=np.float64))


def test_state_dict_round_trip_and_astype():
    a = make_model()
    b = make_model(seed=5)
    b.load_state_dict(a.state_dict())
    x = images()
    np.testing.assert_array_equal(a(x).tokens.data, b(x).tokens.data)
    b.astype(np.float32)
    assert b.dtype == np.float32
    with default_dtype(np.float64):
        assert ops.sum(b(x.astype(np.float32)).tokens).data.dtype == np.float32
