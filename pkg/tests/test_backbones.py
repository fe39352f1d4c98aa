import numpy as np
import pytest
import torch

import oracles
from ovrseg.backbones import (
    DEFAULT_ANGLES,
    GuidancePyramid,
    StubGuidanceEncoder,
    StubTextEncoder,
    StubVisionEncoder,
    TextEmbeddingSet,
    encode_class_registry,
    encode_guidance,
    encode_image_ensemble,
    encode_text,
    resize_bilinear,
    rotate_map,
    validate_angles,
)
from ovrseg.registry import ClassRegistry, build_prompts


def test_validate_angles():
    validate_angles(DEFAULT_ANGLES)
    validate_angles((0,))
    with pytest.raises(ValueError):
        validate_angles(())
    with pytest.raises(ValueError):
        validate_angles((90, 180))  # missing 0
    with pytest.raises(ValueError):
        validate_angles((0, 90, 90))
    with pytest.raises(ValueError):
        validate_angles((0, 45))


def test_rotate_map_quarter_turn():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).unsqueeze(-1)
    r = rotate_map(m, 90)
    expected = torch.tensor([[2.0, 4.0], [1.0, 3.0]]).unsqueeze(-1)
    assert torch.equal(r, expected)


def test_rotate_map_round_trip():
    m = torch.randn(6, 6, 3)
    for angle in (0, 90, 180, 270):
        assert torch.equal(rotate_map(rotate_map(m, angle), -angle), m)
    with pytest.raises(ValueError):
        rotate_map(torch.randn(2, 3, 1), 90)
    with pytest.raises(ValueError):
        rotate_map(m, 45)


def test_rotate_map_composition():
    m = torch.randn(4, 4, 2)
    assert torch.equal(rotate_map(rotate_map(m, 90), 90), rotate_map(m, 180))
    assert torch.equal(rotate_map(rotate_map(m, 90), 180), rotate_map(m, 270))


def test_stub_vision_encoder_shapes_and_determinism():
    enc_a = StubVisionEncoder(patch_size=8, embed_dim=16, seed=3)
    enc_b = StubVisionEncoder(patch_size=8, embed_dim=16, seed=3)
    img = torch.rand(32, 32, 3)
    fa, fb = enc_a(img), enc_b(img)
    assert fa.shape == (4, 4, 16)
    assert torch.equal(fa, fb)
    enc_c = StubVisionEncoder(patch_size=8, embed_dim=16, seed=4)
    assert not torch.equal(fa, enc_c(img))


def test_stub_vision_encoder_rejects_bad_inputs():
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=0)
    with pytest.raises(ValueError):
        enc(torch.rand(30, 30, 3))  # not divisible by patch
    with pytest.raises(ValueError):
        enc(torch.rand(32, 24, 3))  # not square
    with pytest.raises(ValueError):
        enc(torch.rand(32, 32, 4))


def test_stub_vision_encoder_qv_flags():
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=0, with_qv_head=True)
    trainable = {n for n, p in enc.named_parameters() if p.requires_grad}
    assert trainable == {"head.q_proj", "head.v_proj"}
    for name in trainable:
        assert any(name.startswith(p) for p in enc.FINETUNE_QV_PREFIXES)
    bare = StubVisionEncoder(patch_size=8, embed_dim=16, seed=0, with_qv_head=False)
    assert all(not p.requires_grad for p in bare.parameters())


def test_encode_image_ensemble_shapes():
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=1)
    img = torch.rand(32, 32, 3)
    feats = encode_image_ensemble(img, DEFAULT_ANGLES, enc)
    assert len(feats) == len(DEFAULT_ANGLES)
    for f in feats:
        assert f.shape == (4, 4, 16)


def test_ensemble_identity_angle_matches_plain_encode():
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=1)
    img = torch.rand(32, 32, 3)
    feats = encode_image_ensemble(img, DEFAULT_ANGLES, enc)
    assert torch.equal(feats[0], enc(img))


def test_ensemble_entries_rotate_back():
    """Each entry is the un-rotated encoding of the rotated image."""
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=1)
    img = torch.rand(32, 32, 3)
    feats = encode_image_ensemble(img, DEFAULT_ANGLES, enc)
    for i, angle in enumerate(DEFAULT_ANGLES):
        direct = rotate_map(enc(rotate_map(img, angle)), -angle)
        assert torch.equal(feats[i], direct)


def test_ensemble_equivariance_under_input_rotation():
    """Rotating the input permutes the ensemble entries cyclically."""
    enc = StubVisionEncoder(patch_size=8, embed_dim=16, seed=1, with_qv_head=True)
    img = torch.rand(32, 32, 3)
    base = encode_image_ensemble(img, DEFAULT_ANGLES, enc)
    rotated = encode_image_ensemble(rotate_map(img, 90), DEFAULT_ANGLES, enc)
    for i, angle in enumerate(DEFAULT_ANGLES):
        j = DEFAULT_ANGLES.index((angle + 90) % 360)
        expected = rotate_map(base[j], 90)
        assert torch.equal(rotated[i], expected)


def test_text_embedding_set():
    per_prompt = torch.randn(3, 4, 8)
    ts = TextEmbeddingSet(per_prompt=per_prompt, prompt_averaged=per_prompt.mean(dim=1))
    assert ts.n_classes == 3
    assert ts.dim == 8
    assert ts.prompt_averaged.shape == (3, 8)
    perm = ts.permuted([2, 0, 1])
    assert torch.equal(perm.per_prompt, per_prompt[[2, 0, 1]])
    assert torch.equal(perm.prompt_averaged, ts.prompt_averaged[[2, 0, 1]])


def test_stub_text_encoder_determinism_and_norm():
    enc_a = StubTextEncoder(embed_dim=16, seed=5)
    enc_b = StubTextEncoder(embed_dim=16, seed=5)
    prompts = ["A satellite image of a ship", "A satellite image of a harbor"]
    ea, eb = enc_a(prompts), enc_b(prompts)
    assert ea.shape == (2, 16)
    assert torch.equal(ea, eb)
    norms = torch.linalg.vector_norm(ea, dim=1)
    assert torch.allclose(norms, torch.ones(2), atol=1e-5)
    # distinct prompts get distinct embeddings
    assert not torch.allclose(ea[0], ea[1])


def test_stub_text_encoder_pools_words_as_a_set():
    enc = StubTextEncoder(embed_dim=16, seed=5)
    e = enc(["ship harbor", "harbor ship", "ship dock"])
    assert torch.allclose(e[0], e[1])  # no positional terms in the stub
    assert not torch.allclose(e[0], e[2])
    with pytest.raises(ValueError):
        enc([""])


def test_encode_text_groups_by_class():
    enc = StubTextEncoder(embed_dim=16, seed=2)
    reg = ClassRegistry(names=("ship", "harbor"), seen_flags=(True, True))
    ts = encode_text(build_prompts(reg), enc, reg)
    assert ts.per_prompt.shape == (2, 4, 16)
    flat = enc([t.replace("[CLS]", "ship") for t in reg.templates])
    assert torch.equal(ts.per_prompt[0], flat)
    same = encode_class_registry(reg, enc)
    assert torch.equal(same.per_prompt, ts.per_prompt)


def test_encode_text_count_mismatch():
    enc = StubTextEncoder(embed_dim=16, seed=2)
    reg = ClassRegistry(names=("ship", "harbor"), seen_flags=(True, True))
    with pytest.raises(ValueError):
        encode_text(["only one prompt"], enc, reg)


def test_guidance_pyramid_validation():
    g1 = torch.randn(8, 8, 4)
    g2 = torch.randn(8, 8, 6)
    g3 = torch.randn(4, 4, 8)
    GuidancePyramid(level1=g1, level2=g2, level3=g3)
    with pytest.raises(ValueError):
        GuidancePyramid(level1=torch.randn(2, 2, 4), level2=g2, level3=g3)


def test_stub_guidance_encoder_shapes():
    enc = StubGuidanceEncoder(patch_sizes=(4, 8, 8), dims=(8, 12, 16), seed=0)
    img = torch.rand(32, 32, 3)
    l1, l2, l3 = enc(img)
    assert l1.shape == (8, 8, 8)
    assert l2.shape == (4, 4, 12)
    assert l3.shape == (4, 4, 16)
    assert all(not p.requires_grad for p in enc.parameters())


def test_encode_guidance_aligns_level3():
    enc = StubGuidanceEncoder(patch_sizes=(4, 8, 8), dims=(8, 12, 16), seed=0)
    img = torch.rand(32, 32, 3)
    pyr = encode_guidance(img, enc, vl_grid=(2, 2))
    assert pyr.level3.shape == (2, 2, 16)
    assert pyr.level1.shape == (8, 8, 8)


def test_resize_bilinear_against_oracle():
    x = torch.rand(5, 5, 3, dtype=torch.float64)
    got = resize_bilinear(x, (8, 8))
    want = oracles.bilinear_resize_oracle(x.numpy(), 8, 8)
    assert np.max(np.abs(got.numpy() - want)) < 1e-12


def test_resize_bilinear_identity():
    x = torch.rand(4, 4, 2)
    assert resize_bilinear(x, (4, 4)) is x
