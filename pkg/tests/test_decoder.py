import numpy as np
import pytest
import torch
import torch.nn.functional as F
from conftest import finite_difference_check

from textcape.decoder import (DecoderConfig, GraphDecoder, TracingDisabledError, attention_maps,
                              decode, gcn_layer)
from textcape.encoder import RefinedFeatures, positional_encoding
from textcape.posegraph import PoseGraph, build_adjacency


def make_refined(k_real, K, grid=(2, 3), C=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    support = torch.zeros(1, K, C, dtype=dtype)
    support[:, :k_real] = torch.randn(1, k_real, C, generator=g, dtype=dtype)
    query = torch.randn(1, grid[0] * grid[1], C, generator=g, dtype=dtype)
    mask = torch.zeros(1, K, dtype=torch.bool)
    mask[:, :k_real] = True
    return RefinedFeatures(support, query, mask, *grid, positional_encoding(*grid, C, dtype))


def make_decoder(kind="graph", L=2, C=16, heads=2, seed=0, dtype=torch.float32, offsets=True):
    torch.manual_seed(seed)
    cfg = DecoderConfig(L, C, heads, decoder_kind=kind)
    dec = GraphDecoder(cfg).to(dtype)
    if offsets:
        with torch.no_grad():
            for layer in dec.layers:
                layer.offset_head.weight.normal_(0, 0.3)
                layer.offset_head.bias.normal_(0, 0.1)
    return cfg, dec


def chain(n, K):
    g = PoseGraph.from_texts([f"p{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)])
    return torch.tensor(build_adjacency(g, K).matrix)


def proposals(K, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(1, K, 2, generator=g, dtype=dtype) * 0.9 + 0.05)


def test_zero_offset_head_is_identity():
    cfg, dec = make_decoder(offsets=False)
    r = make_refined(3, 3)
    props = proposals(3)
    out = decode(props, r, chain(3, 3), r.keypoint_mask, cfg, dec)
    for layer_coords in out.coords_per_layer:
        torch.testing.assert_close(layer_coords, props, atol=1e-6, rtol=0)


def test_output_contract():
    cfg, dec = make_decoder(L=3)
    r = make_refined(4, 6)
    out = decode(proposals(6), r, chain(4, 6), r.keypoint_mask, cfg, dec)
    assert out.coords_per_layer.shape == (3, 1, 6, 2)
    c = out.coords_per_layer
    assert ((c > 0) & (c < 1)).all()
    assert (c[:, :, 4:] == 0.5).all()


def test_permutation_equivariance():
    cfg, dec = make_decoder(dtype=torch.float64)
    K = 5
    r = make_refined(K, K, dtype=torch.float64)
    props = proposals(K, dtype=torch.float64)
    g = PoseGraph.from_texts([f"p{i}" for i in range(K)], [(0, 1), (1, 2), (1, 3), (3, 4)])
    perm = [3, 0, 4, 2, 1]
    base = decode(props, r, build_adjacency(g, K).matrix, r.keypoint_mask, cfg, dec)
    rp = RefinedFeatures(r.support[:, perm], r.query, r.keypoint_mask, r.grid_h, r.grid_w,
                         r.query_pos)
    out = decode(props[:, perm], rp, build_adjacency(g.permuted(perm), K).matrix,
                 r.keypoint_mask, cfg, dec)
    assert (out.coords_per_layer - base.coords_per_layer[:, :, perm]).abs().max() <= 1e-6


def test_padding_invariance():
    cfg, dec = make_decoder()
    small, big = make_refined(5, 5), make_refined(5, 100)
    props_small = proposals(5)
    props_big = torch.full((1, 100, 2), 0.5)
    props_big[:, :5] = props_small
    a = decode(props_small, small, chain(5, 5), small.keypoint_mask, cfg, dec)
    b = decode(props_big, big, chain(5, 100), big.keypoint_mask, cfg, dec)
    assert (a.coords_per_layer - b.coords_per_layer[:, :, :5]).abs().max() <= 1e-5


def test_mlp_kind_ignores_skeleton():
    cfg, dec = make_decoder("mlp")
    r = make_refined(4, 4)
    props = proposals(4)
    a = decode(props, r, chain(4, 4), r.keypoint_mask, cfg, dec)
    b = decode(props, r, torch.eye(4), r.keypoint_mask, cfg, dec)
    assert torch.equal(a.coords_per_layer, b.coords_per_layer)


def test_graph_kind_uses_skeleton():
    cfg, dec = make_decoder("graph")
    r = make_refined(4, 4)
    props = proposals(4)
    a = decode(props, r, chain(4, 4), r.keypoint_mask, cfg, dec)
    b = decode(props, r, torch.eye(4), r.keypoint_mask, cfg, dec)
    assert not torch.equal(a.coords_per_layer, b.coords_per_layer)


def test_adjacency_size_mismatch():
    cfg, dec = make_decoder()
    r = make_refined(3, 4)
    with pytest.raises(ValueError):
        decode(proposals(4), r, chain(3, 3), r.keypoint_mask, cfg, dec)


def test_gcn_isolated_node_doubles():
    x = torch.tensor([[1.0, -2.0, 3.0]])
    out = gcn_layer(x, np.eye(1), torch.eye(3))
    assert torch.equal(out, 2 * x)


def test_gcn_two_node_average():
    a = build_adjacency(PoseGraph.from_texts(["a", "b"], [(0, 1)]), 2)
    x = torch.tensor([[1.0, 2.0], [3.0, -4.0]], dtype=torch.float64)
    mixed = gcn_layer(x, a, torch.eye(2, dtype=torch.float64)) - x
    expected = 0.5 * (x[0] + x[1])
    torch.testing.assert_close(mixed, torch.stack([expected, expected]), atol=1e-12, rtol=0)


def test_gcn_zero_weight_is_residual():
    x = torch.randn(4, 3)
    assert torch.equal(gcn_layer(x, np.eye(4), torch.zeros(3, 3), F.gelu), x)


def test_attention_maps_contract():
    cfg, dec = make_decoder(L=2)
    r = make_refined(3, 5, grid=(2, 3))
    out = decode(proposals(5), r, chain(3, 5), r.keypoint_mask, cfg, dec, trace=True)
    maps = attention_maps(out)
    assert maps.shape == (2, 1, 5, 6)
    torch.testing.assert_close(maps.sum(-1), torch.ones(2, 1, 5), atol=1e-5, rtol=0)
    assert (maps[:, :, 3:] == 1 / 6).all()
    with pytest.raises(TracingDisabledError):
        attention_maps(decode(proposals(5), r, chain(3, 5), r.keypoint_mask, cfg, dec))


def test_masked_rows_do_not_affect_real_rows():
    cfg, dec = make_decoder()
    r = make_refined(3, 6)
    props = proposals(6)
    base = decode(props, r, chain(3, 6), r.keypoint_mask, cfg, dec, trace=True)
    noisy_support = r.support.clone()
    noisy_support[:, 3:] = torch.randn(1, 3, 16) * 5
    noisy_props = props.clone()
    noisy_props[:, 3:] = torch.rand(1, 3, 2)
    rn = RefinedFeatures(noisy_support, r.query, r.keypoint_mask, r.grid_h, r.grid_w, r.query_pos)
    out = decode(noisy_props, rn, chain(3, 6), r.keypoint_mask, cfg, dec, trace=True)
    assert (out.coords_per_layer - base.coords_per_layer).abs().max() <= 1e-6
    assert (attention_maps(out) - attention_maps(base)).abs().max() <= 1e-6


def test_trace_matches_fused_path():
    cfg, dec = make_decoder()
    r = make_refined(3, 4)
    props = proposals(4)
    a = decode(props, r, chain(3, 4), r.keypoint_mask, cfg, dec, trace=True)
    b = decode(props, r, chain(3, 4), r.keypoint_mask, cfg, dec)
    assert (a.coords_per_layer - b.coords_per_layer).abs().max() <= 1e-6


@pytest.mark.parametrize("kind", ["graph", "mlp"])
def test_decoder_gradients_match_finite_differences(kind):
    cfg, dec = make_decoder(kind, L=1, C=16, heads=2, dtype=torch.float64)
    r = make_refined(3, 3, grid=(2, 2), dtype=torch.float64)
    props = proposals(3, dtype=torch.float64)
    adj = chain(3, 3).double()
    target = torch.rand(1, 1, 3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(9))

    def loss():
        out = decode(props, r, adj, r.keypoint_mask, cfg, dec)
        return ((out.coords_per_layer - target) ** 2).sum()

    assert finite_difference_check(list(dec.parameters()), loss) <= 1e-4
