import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gp3 import diffcore as dc
from gp3.diffcore import Parameter
from gp3.encoder import (
    Encoder,
    EncoderConfig,
    film_mask,
    gfilm_apply,
    layer_mask,
    lora_forward,
    lora_merge,
    lora_wrap,
)
from gp3.gradsuite import small_encoder_config
from gp3.losses import depth_loss


@pytest.fixture(scope="module")
def enc():
    return Encoder(small_encoder_config(image_size=(16, 16)), seed=3)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(embed_dim=30, n_heads=4)
    with pytest.raises(ValueError, match="even"):
        EncoderConfig(n_blocks=3)
    with pytest.raises(ValueError, match="patch"):
        EncoderConfig(patch=5)


def test_layer_mask_flags_global_blocks():
    cfg = EncoderConfig(n_blocks=6)
    assert layer_mask(cfg) == [False, True] * 3
    enc = Encoder(EncoderConfig(n_blocks=6, embed_dim=16, n_heads=2))
    assert [b.kind == "global" for b in enc.blocks] == layer_mask(cfg)
    assert film_mask(EncoderConfig(film="all")) == [True] * 4
    assert film_mask(EncoderConfig(film="none")) == [False] * 4


def test_patchify_token_count():
    enc = Encoder(EncoderConfig(embed_dim=16, n_heads=2))
    assert enc.patchify(np.zeros((1, 1, 32, 32, 3))).shape == (1, 1, 17, 16)


def test_patchify_rejects_indivisible():
    enc = Encoder(EncoderConfig(embed_dim=16, n_heads=2))
    with pytest.raises(ValueError, match="not divisible"):
        enc.patchify(np.zeros((1, 1, 30, 30, 3)))


def test_patchify_centred_image_gives_position_and_camera_tokens():
    # pixels are centred at 0.5, so mid-grey is the zero input of the patch projection
    enc = Encoder(small_encoder_config(image_size=(16, 16), view_embed=False), seed=3)
    tokens = enc.patchify(np.full((1, 2, 16, 16, 3), 0.5)).data
    np.testing.assert_array_equal(tokens[0, :, 0], np.broadcast_to(enc.camera_token.data, (2, 16)))
    np.testing.assert_allclose(tokens[0, 0, 1:], enc.pos_embed.data + enc.patch_embed.bias.data, atol=1e-15)


def test_patchify_distinct_images_give_distinct_tokens(enc):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(2, 1, 1, 16, 16, 3))
    assert not np.allclose(enc.patchify(a).data[..., 1:, :], enc.patchify(b).data[..., 1:, :])


def test_gfilm_examples():
    f = np.array([[0.5, -1.0]])
    np.testing.assert_array_equal(gfilm_apply(f, np.ones(2), np.zeros(2), True).data, f)
    assert gfilm_apply(f, np.array([9.0, 9]), np.array([3.0, 3]), False) is f
    np.testing.assert_array_equal(gfilm_apply(f, np.array([2.0, 2]), np.array([1.0, 1]), True).data, [[2.0, -1.0]])
    with pytest.raises(ValueError, match="gamma"):
        gfilm_apply(f, np.ones(3), np.zeros(3), True)


def test_single_view_frame_and_global_agree(enc):
    img = np.random.default_rng(1).uniform(size=(1, 1, 16, 16, 3))
    rec = {}
    out = enc.forward(img, record=rec).data
    assert np.all(np.isfinite(out))
    # with one view both kinds of block see the same token set
    assert rec["attn"][0].shape[-1] == rec["attn"][1].shape[-1] == enc.cfg.n_tokens


def test_view_permutation_equivariance():
    e = Encoder(small_encoder_config(image_size=(16, 16), view_embed=False), seed=3)
    imgs = np.random.default_rng(2).uniform(size=(1, 3, 16, 16, 3))
    perm = [2, 0, 1]
    a = e.forward(imgs).data
    b = e.forward(imgs[:, perm]).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_view_embedding_breaks_permutation_symmetry(enc):
    imgs = np.random.default_rng(2).uniform(size=(1, 3, 16, 16, 3))
    a = enc.forward(imgs).data
    b = enc.forward(imgs[:, [2, 0, 1]]).data
    assert not np.allclose(b, a[:, [2, 0, 1]])
    with pytest.raises(ValueError, match="max_views"):
        enc.patchify(np.zeros((1, 5, 16, 16, 3)))


def test_attention_weights_normalise_over_their_scope(enc):
    imgs = np.random.default_rng(3).uniform(size=(2, 3, 16, 16, 3))
    rec = {}
    enc.forward(imgs, record=rec)
    n = enc.cfg.n_tokens
    for j, block in enumerate(enc.blocks):
        w = rec["attn"][j]
        keys = n if block.kind == "frame" else 3 * n
        assert w.shape[-1] == keys
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_camera_head_zero_weights():
    enc = Encoder(small_encoder_config(), seed=0)
    enc.camera_head.weight.data[:] = 0
    g = enc.camera_head_out(enc.forward(np.zeros((1, 2, 8, 8, 3)))).data
    np.testing.assert_allclose(g, np.broadcast_to([1, 0, 0, 0, 0, 0, 0, math.pi / 2], (1, 2, 8)), atol=1e-15)


def test_depth_head_zero_weights():
    enc = Encoder(small_encoder_config(), seed=0)
    enc.depth_head.weight.data[:] = 0
    d, s = enc.depth_head_out(enc.forward(np.zeros((1, 2, 8, 8, 3))))
    np.testing.assert_allclose(d.data, math.log(2), atol=1e-14)
    np.testing.assert_allclose(s.data, 1.0, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_head_outputs_valid_for_any_weights(seed):
    rng = np.random.default_rng(seed)
    enc = Encoder(small_encoder_config(), seed=seed)
    enc.camera_head.weight.data = rng.normal(0, 3, enc.camera_head.weight.shape)
    enc.depth_head.weight.data = rng.normal(0, 3, enc.depth_head.weight.shape)
    tokens = enc.forward(rng.uniform(size=(1, 2, 8, 8, 3)))
    g = enc.camera_head_out(tokens).data
    np.testing.assert_allclose(np.linalg.norm(g[..., :4], axis=-1), 1.0, atol=1e-9)
    assert np.all(g[..., 0] >= 0) and np.all((g[..., 7] > 0) & (g[..., 7] < math.pi))
    d, s = enc.depth_head_out(tokens)
    assert np.all(s.data > 0) and np.all(d.data >= 0)


def test_head_gradchecks():
    rng = np.random.default_rng(4)
    enc = Encoder(small_encoder_config(), seed=5)
    for p in (enc.camera_head.weight, enc.depth_head.weight):
        p.data = rng.normal(0, 0.3, p.shape)
    imgs = rng.uniform(size=(1, 2, 8, 8, 3))
    with dc.no_grad():
        tokens = enc.forward(imgs).data
    w = rng.normal(size=(1, 2, 8))
    err = dc.gradcheck_params(lambda: dc.sum(enc.camera_head_out(tokens) * w), enc.camera_head.parameters(), 1e-6)
    assert err <= 1e-4
    gt = rng.uniform(0.5, 1.5, (1, 2, 8, 8))

    def dloss():
        d, s = enc.depth_head_out(tokens)
        return depth_loss(d, s, gt)

    assert dc.gradcheck_params(dloss, enc.depth_head.parameters(), 1e-6, max_coords=30, rng=rng) <= 1e-4


def test_embed_instruction_examples():
    enc = Encoder(small_encoder_config(), seed=0)
    table = enc.lang_table.data
    np.testing.assert_array_equal(enc.embed_instruction([]).data, np.zeros(8))
    np.testing.assert_array_equal(enc.embed_instruction([5]).data, table[5])
    np.testing.assert_allclose(enc.embed_instruction([2, 4]).data, (table[2] + table[4]) / 2, atol=1e-15)
    with pytest.raises(ValueError, match="vocabulary"):
        enc.embed_instruction([32])


def test_lora_examples():
    adapter = lora_wrap(Parameter(np.zeros((2, 2))), 1, 1.0)
    adapter.lora_A.data = np.array([[1.0, 2.0]])
    adapter.lora_B.data = np.array([[3.0], [4.0]])
    np.testing.assert_array_equal(lora_merge(adapter), [[3, 6], [4, 8]])
    rng = np.random.default_rng(6)
    w0 = Parameter(rng.normal(size=(5, 7)))
    ad = lora_wrap(w0, 2, 4.0, rng)
    assert not w0.requires_grad and ad.lora_A.shape == (2, 7) and ad.lora_B.shape == (5, 2)
    x = rng.normal(size=(3, 7))
    np.testing.assert_array_equal(lora_forward(ad, x).data, x @ w0.data.T)
    ad.lora_B.data = rng.normal(size=(5, 2))
    before = w0.data.copy()
    merged = lora_merge(ad)
    assert np.max(np.abs(lora_forward(ad, x).data - x @ merged.T)) <= 1e-12
    np.testing.assert_array_equal(w0.data, before)
    with pytest.raises(ValueError, match="rank"):
        lora_wrap(Parameter(np.zeros((3, 4))), 3, 1.0)


def test_encoder_lora_zero_init_is_exact(enc):
    e = Encoder(small_encoder_config(image_size=(16, 16)), seed=3)
    imgs = np.random.default_rng(7).uniform(size=(1, 2, 16, 16, 3))
    before = e.forward(imgs).data
    e.add_lora(2, 4.0, seed=1)
    assert len(e.lora_adapters()) == 4 * len(e.blocks)
    np.testing.assert_array_equal(e.forward(imgs).data, before)


def test_film_mask_and_identity_init():
    e = Encoder(small_encoder_config(image_size=(16, 16)), seed=8)
    rng = np.random.default_rng(9)
    imgs = rng.uniform(size=(2, 2, 16, 16, 3))
    lang = e.embed_batch([[3, 4, 8, 16], [2, 4, 9, 17]])
    r0, r1 = {}, {}
    plain = e.forward(imgs, None, r0).data
    assert np.max(np.abs(e.forward(imgs, lang, r1).data - plain)) <= 1e-12
    for proj in e.film.values():
        for p in proj.parameters():
            p.data = rng.normal(0, 0.5, p.shape)
    r2 = {}
    e.forward(imgs, lang, r2)
    for j, block in enumerate(e.blocks):
        if block.kind == "frame":
            assert r2["inputs"][j].tobytes() == r2["pre"][j].tobytes()
        else:
            assert not np.allclose(r2["inputs"][j], r2["pre"][j])
    assert r2["inputs"][0].tobytes() == r0["inputs"][0].tobytes()


def test_checkpoint_round_trip(tmp_path):
    e = Encoder(small_encoder_config(), seed=10)
    e.add_lora(2, 4.0)
    for a in e.lora_adapters().values():
        a.lora_B.data = np.random.default_rng(0).normal(size=a.lora_B.shape)
    e.save(tmp_path / "e.gp3w")
    back = Encoder.load(tmp_path / "e.gp3w")
    imgs = np.random.default_rng(1).uniform(size=(1, 2, 8, 8, 3))
    np.testing.assert_array_equal(back.forward(imgs).data, e.forward(imgs).data)
    names = dict(back.named_parameters())
    assert "blocks.0.attn.q.adapter.lora_A" in names


def test_checkpoint_missing_entries_named(tmp_path):
    from gp3.checkpoint import load_checkpoint, save_checkpoint

    e = Encoder(small_encoder_config(), seed=10)
    e.save(tmp_path / "e.gp3w")
    arrays, meta = load_checkpoint(tmp_path / "e.gp3w")
    del arrays["encoder.norm.gain"]
    save_checkpoint(tmp_path / "bad.gp3w", arrays, meta)
    with pytest.raises(KeyError, match="norm.gain"):
        Encoder.load(tmp_path / "bad.gp3w")
