import numpy as np
import pytest
import torch

from textcape.embedders import (EmbeddingError, FeatureProjector, ImageFeatureMap,
                                PrecomputedImageBackend, PrecomputedTextBackend, ToyImageBackend,
                                ToyTextBackend, embed_image, embed_texts, project_features,
                                toy_text_embed)
from textcape.posegraph import CapacityError
from textcape.tensorfile import (KIND_IMAGE, KIND_TEXT, TensorFileError, read_tensor,
                                 write_tensor)


def cos(a, b):
    return float(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b))


def test_determinism_identical_rows():
    out = embed_texts(["nose", "nose"], ToyTextBackend(64))
    assert torch.equal(out[0], out[1])


def test_rows_unit_norm():
    out = embed_texts(["left eye", "tail tip", "a b c d e f"], ToyTextBackend(32))
    np.testing.assert_allclose(out.norm(dim=1).numpy(), 1.0, atol=1e-6)


def test_shared_tokens_raise_similarity():
    e = lambda s: toy_text_embed(s, 64)
    assert cos(e("left eye"), e("left ear")) > cos(e("left eye"), e("right hip"))


def test_case_folding():
    np.testing.assert_array_equal(toy_text_embed("nose", 32), toy_text_embed("Nose", 32))


def test_compositional_definition():
    v = lambda s: toy_text_embed(s, 64, normalize=False)
    expected = v("left") + v("eye")
    np.testing.assert_allclose(toy_text_embed("left eye", 64), expected / np.linalg.norm(expected))


def test_self_cosine():
    v = toy_text_embed("top right side of the left eye", 64)
    assert cos(v, v) == pytest.approx(1.0)


def test_toy_errors():
    with pytest.raises(EmbeddingError):
        toy_text_embed("   ", 32)
    with pytest.raises(EmbeddingError):
        toy_text_embed("a", 4)
    with pytest.raises(EmbeddingError):
        embed_texts([], ToyTextBackend(32))


def test_order_equivariance():
    texts = ["left eye", "nose", "right wing tip", "tail"]
    b = ToyTextBackend(32)
    perm = [2, 0, 3, 1]
    assert torch.equal(embed_texts(texts, b)[perm], embed_texts([texts[i] for i in perm], b))


@pytest.mark.parametrize("size,tokens,grid", [(64, 16, (4, 4)), (256, 256, (16, 16))])
def test_image_grid_shapes(size, tokens, grid):
    fm = embed_image(np.zeros((size, size, 3), np.uint8), ToyImageBackend(3, 8, 16))
    assert fm.tokens.shape == (1, tokens, 8)
    assert (fm.grid_h, fm.grid_w) == grid


def test_indivisible_image():
    with pytest.raises(EmbeddingError):
        embed_image(np.zeros((60, 64, 3), np.uint8), ToyImageBackend(3, 8, 16))


def test_precomputed_image_features(tmp_path):
    arr = np.random.default_rng(0).normal(size=(4, 4, 8)).astype(np.float32)
    write_tensor(tmp_path / "s1.tcpf", arr, KIND_IMAGE)
    fm = embed_image("s1", PrecomputedImageBackend(tmp_path, grid=(4, 4)))
    np.testing.assert_array_equal(fm.tokens[0].numpy(), arr.reshape(16, 8))


def test_precomputed_shape_mismatch(tmp_path):
    # header declares 4x4 but only 15 tokens are stored
    write_tensor(tmp_path / "bad.tcpf", np.zeros((4, 4, 8)), KIND_IMAGE)
    raw = (tmp_path / "bad.tcpf").read_bytes()
    (tmp_path / "bad.tcpf").write_bytes(raw[:-8 * 4])
    with pytest.raises(TensorFileError, match="shape mismatch"):
        PrecomputedImageBackend(tmp_path).load("bad")
    write_tensor(tmp_path / "g15.tcpf", np.zeros((3, 5, 8)), KIND_IMAGE)
    with pytest.raises(TensorFileError):
        PrecomputedImageBackend(tmp_path, grid=(4, 4)).load("g15")
    with pytest.raises(EmbeddingError):
        ImageFeatureMap(torch.zeros(1, 15, 8), 4, 4)


def test_precomputed_text_backend(tmp_path):
    rows = np.array([[3.0, 4.0, 0, 0, 0, 0, 0, 0], [0, 0, 1.0, 0, 0, 0, 0, 0]])
    write_tensor(tmp_path / "emb.tcpf", rows, KIND_TEXT)
    (tmp_path / "emb.txt").write_text("left eye\nnose\n")
    b = PrecomputedTextBackend(tmp_path / "emb")
    out = embed_texts(["nose", "left eye"], b)
    np.testing.assert_allclose(out.numpy()[1, :2], [0.6, 0.8], atol=1e-7)
    with pytest.raises(EmbeddingError, match="right ear"):
        embed_texts(["right ear"], b)


def test_tensor_container_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_tensor(tmp_path / "t.tcpf", arr)
    kind, back = read_tensor(tmp_path / "t.tcpf")
    assert kind == 2
    np.testing.assert_array_equal(back, arr)
    # 12-byte header + 3 dims, little-endian f32 payload
    assert (tmp_path / "t.tcpf").read_bytes()[24:28] == np.float32(0).tobytes()


def _projector(ct=8, ci=6, c=8):
    torch.manual_seed(0)
    return FeatureProjector(ct, ci, c)


def test_projection_no_padding():
    text = torch.nn.functional.normalize(torch.randn(3, 8), dim=1)
    img = ImageFeatureMap(torch.randn(1, 4, 6), 2, 2)
    pf = project_features(text, img, 3, _projector())
    assert pf.keypoint_mask.all() and pf.support.shape == (1, 3, 8)


def test_projection_padding_contract():
    text = torch.nn.functional.normalize(torch.randn(2, 8), dim=1)
    img = ImageFeatureMap(torch.randn(1, 4, 6), 2, 2)
    pf = project_features(text, img, 4, _projector())
    assert pf.keypoint_mask[0].tolist() == [True, True, False, False]
    assert not pf.support[0, 2:].any()
    with pytest.raises(CapacityError):
        project_features(text, img, 1, _projector())


def test_identity_projection():
    proj = _projector(8, 6, 8)
    with torch.no_grad():
        proj.text_proj.weight.copy_(torch.eye(8))
        proj.text_proj.bias.zero_()
    text = embed_texts(["left eye", "nose"], ToyTextBackend(8))
    pf = project_features(text, ImageFeatureMap(torch.randn(1, 4, 6), 2, 2), 5, proj)
    assert torch.equal(pf.support[0, :2], text)


def test_image_projection_is_a_1x1_conv():
    proj = _projector(8, 6, 8)
    tokens = torch.randn(1, 12, 6)
    pf = proj(torch.zeros(1, 2, 8), ImageFeatureMap(tokens, 3, 4), torch.ones(1, 2, dtype=torch.bool))
    conv = torch.nn.Conv2d(6, 8, 1)
    with torch.no_grad():
        conv.weight.copy_(proj.image_proj.weight[:, :, None, None])
        conv.bias.copy_(proj.image_proj.bias)
    grid = tokens.transpose(1, 2).reshape(1, 6, 3, 4)
    ref = conv(grid).flatten(2).transpose(1, 2)
    torch.testing.assert_close(pf.query, ref, atol=1e-6, rtol=1e-6)


def test_image_projection_commutes_with_token_permutation():
    proj = _projector()
    tokens = torch.randn(1, 9, 6)
    perm = torch.randperm(9)
    mask = torch.ones(1, 1, dtype=torch.bool)
    a = proj(torch.zeros(1, 1, 8), ImageFeatureMap(tokens, 3, 3), mask).query[:, perm]
    b = proj(torch.zeros(1, 1, 8), ImageFeatureMap(tokens[:, perm], 3, 3), mask).query
    assert torch.equal(a, b)


def test_frozen_backend_gets_no_gradient():
    b = ToyTextBackend(16, frozen=True)
    out = b(b.raw(["left eye", "nose"]))
    assert not out.requires_grad
    tuned = ToyTextBackend(16, frozen=False)
    tuned(tuned.raw(["left eye"])).sum().backward()
    assert tuned.mixing.grad is not None
