import math

import numpy as np
import pytest
import torch

from dqseg.decoder import (
    Attention,
    DecoderBlock,
    MaskDecoder,
    attention_gate,
    build_mask_embedding,
    decode,
    positional_encoding,
    predict_masks,
)
from dqseg.errors import ContractError, NumericError

from fdcheck import check_gradients

D = torch.double


def test_positional_encoding_range_and_equal_rows():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-12.8, 12.8, (50, 3))
    pos[7] = pos[3]
    pe = positional_encoding(pos, 32, 12.8)
    assert pe.shape == (50, 32)
    assert pe.abs().max() <= 1
    assert torch.equal(pe[7], pe[3])
    assert torch.count_nonzero(pe[:, 30:]) == 0  # 32 is padded from 30


def test_positional_encoding_at_origin():
    pe = positional_encoding(np.zeros((1, 3)), 12, 12.8)
    np.testing.assert_array_equal(pe[0].numpy(), [0, 1, 0, 1] * 3)


def test_mask_embedding_identities():
    f, p = torch.randn(5, 6), torch.randn(5, 6)
    assert torch.equal(build_mask_embedding(f, torch.zeros(5, 6)), f)
    assert torch.equal(build_mask_embedding(torch.zeros(5, 6), p), p)
    b = torch.randn(5, 6)
    torch.testing.assert_close(build_mask_embedding(f + b, p), build_mask_embedding(f, p) + b)
    with pytest.raises(ContractError):
        build_mask_embedding(f, torch.zeros(4, 6))


def test_predict_masks_examples():
    E = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    torch.testing.assert_close(predict_masks(torch.tensor([[0.0, math.log(3)]], dtype=D), E),
                               torch.tensor([[0.5, 0.75]], dtype=D))
    assert torch.equal(predict_masks(torch.tensor([[0.0, 0.0]], dtype=D), E), torch.full((1, 2), 0.5, dtype=D))
    sat = predict_masks(1e3 * E[:1], E)
    assert sat[0, 0] == 1.0


def _block(dim=8, seed=0):
    torch.manual_seed(seed)
    return DecoderBlock(dim).double()


def test_all_ones_mask_equals_unmasked():
    blk = _block()
    q, f, E = torch.randn(4, 8, dtype=D), torch.randn(20, 8, dtype=D), torch.randn(20, 8, dtype=D)
    ones = torch.ones(4, 20, dtype=D)
    a = blk(q, f, ones, E, masked=True)
    b = blk(q, f, ones, E, masked=False)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_attention_rows_sum_to_one_over_active_points():
    torch.manual_seed(1)
    att = Attention(8).double()
    prev = torch.rand(5, 30, dtype=D)
    prev[2] = 0.1  # empty active set falls back to all points
    gate = attention_gate(prev)
    w = att.weights(torch.randn(5, 8, dtype=D), torch.randn(30, 8, dtype=D), gate)[0]
    torch.testing.assert_close(w.sum(1), torch.ones(5, dtype=D), rtol=0, atol=1e-6)
    assert float(w[gate].abs().max().detach()) < 1e-6
    assert not gate[2].any()


def test_single_key_cross_attention():
    blk = _block()
    q, f = torch.randn(1, 8, dtype=D), torch.randn(1, 8, dtype=D)
    out = blk.cross_attention(q, f, torch.ones(1, 1, dtype=D))
    torch.testing.assert_close(out, blk.cross.v(f) + q, rtol=0, atol=1e-12)
    with torch.no_grad():
        blk.cross.q.weight.mul_(50)
    torch.testing.assert_close(blk.cross_attention(q, f), blk.cross.v(f) + q, rtol=0, atol=1e-12)


def test_decoder_permutation_equivariance():
    torch.manual_seed(2)
    dec = MaskDecoder(8).double()
    q = torch.randn(5, 8, dtype=D)
    feats = [torch.randn(15, 8, dtype=D) for _ in range(3)]
    E = torch.randn(15, 8, dtype=D)
    perm = torch.tensor([3, 0, 4, 1, 2])
    logits, final = dec(q, feats, E)
    logits_p, final_p = dec(q[perm], feats, E)
    for a, b in zip(logits, logits_p):
        torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-10)
    torch.testing.assert_close(final[perm], final_p, rtol=0, atol=1e-10)


def test_decode_shapes_and_empty():
    torch.manual_seed(3)
    dec = MaskDecoder(6)
    masks, _ = decode(dec, torch.randn(2, 6), [torch.randn(10, 6)] * 3, torch.randn(10, 6))
    assert len(masks) == 3
    for m in masks:
        assert m.shape == (2, 10) and ((m > 0) & (m < 1)).all()
    masks, _ = decode(dec, torch.zeros(0, 6), [torch.randn(10, 6)] * 3, torch.randn(10, 6))
    assert masks == []


def test_decoder_contract_errors():
    dec = MaskDecoder(6, n_blocks=2)
    with pytest.raises(ContractError):
        dec(torch.randn(2, 6), [torch.randn(4, 6)] * 3, torch.randn(4, 6))
    with pytest.raises(ContractError):
        MaskDecoder(6, n_blocks=0)


def test_non_finite_names_sublayer():
    blk = _block()
    with torch.no_grad():
        blk.cross.v.weight.fill_(float("nan"))
    with pytest.raises(NumericError, match="cross-attention"):
        blk(torch.randn(2, 8, dtype=D), torch.randn(3, 8, dtype=D), torch.ones(2, 3, dtype=D), torch.randn(3, 8, dtype=D))


def test_decoder_gradients_match_finite_differences():
    torch.manual_seed(4)
    dec = MaskDecoder(6, n_blocks=2, ffn_mult=2).double()
    q = torch.randn(3, 6, dtype=D, requires_grad=True)
    feats = [torch.randn(12, 6, dtype=D, requires_grad=True) for _ in range(2)]
    E = torch.randn(12, 6, dtype=D, requires_grad=True)

    def loss():
        logits, _ = dec(q, feats, E)
        return torch.sigmoid(logits[-1]).sum()

    tensors = {n: p for n, p in dec.named_parameters()}
    tensors.update(q=q, E=E, f0=feats[0], f1=feats[1])
    errors = check_gradients(loss, tensors)
    assert max(errors.values()) < 1e-4, errors
