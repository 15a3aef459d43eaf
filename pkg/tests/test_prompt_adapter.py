import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from seguidance.attention_store import IDENTITY_SMOOTHING, AggregatedAttention, subject_maps
from seguidance.prompt_adapter import (
    SOT,
    Conditioning,
    CrossAttentionBlock,
    ImageEncoder,
    OutOfVocabularyError,
    Subject,
    SubjectSet,
    Vocabulary,
    cross_attention,
    decoupled_attention,
    default_vocabulary,
    encode_image,
    encode_text,
)
from seguidance.attention_store import LayerId

VOCAB = default_vocabulary(("red", "blue"), ("circle", "square"))


def subjects(*phrases):
    return SubjectSet([Subject(p.split()[-1], p) for p in phrases])


def test_two_subject_prompt_spans():
    emb = encode_text("a red circle and a blue square", VOCAB, subjects=subjects("circle", "square"))
    assert emb.num_tokens == 8
    assert emb.tokens[0] == VOCAB.sot_id
    assert emb.subject_spans == [("circle", [3]), ("square", [7])]
    assert emb.features is None


def test_encoding_is_deterministic(tiny_model):
    a = tiny_model.encode_prompt("a red circle")
    b = tiny_model.encode_prompt("a red circle")
    assert a.tokens == b.tokens and torch.equal(a.features, b.features)
    assert a.features.shape == (4, tiny_model.cfg.denoiser.context_dim)


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        encode_text("   ", VOCAB)


def test_oov_lists_the_word():
    with pytest.raises(OutOfVocabularyError, match="hexagon"):
        encode_text("a red hexagon", VOCAB)


def test_missing_phrase_rejected():
    with pytest.raises(ValueError, match="square"):
        encode_text("a red circle", VOCAB, subjects=subjects("square"))


def test_two_token_subject_averages_to_one_map():
    emb = encode_text("a red circle", VOCAB, subjects=SubjectSet([Subject("c", "red circle")]))
    assert emb.subject_spans == [("c", [2, 3])]
    g = torch.Generator().manual_seed(0)
    a = torch.randn(16, emb.num_tokens, generator=g, dtype=torch.float64).softmax(-1)
    maps = subject_maps(AggregatedAttention({4: a}, 0), emb.subject_spans, 4, IDENTITY_SMOOTHING)
    expect = [[(float(a[i * 4 + j, 2]) + float(a[i * 4 + j, 3])) / 2 for j in range(4)] for i in range(4)]
    assert oracles.max_abs_diff(maps.maps["c"], expect) <= 1e-12


def test_repeated_phrase_takes_successive_occurrences():
    s = SubjectSet([Subject("c1", "circle"), Subject("c2", "circle")])
    emb = encode_text("a red circle and a blue circle", VOCAB, subjects=s)
    assert emb.subject_spans == [("c1", [3]), ("c2", [7])]


def test_vocabulary_file_roundtrip(tmp_path):
    VOCAB.to_file(tmp_path / "vocab.txt")
    back = Vocabulary.from_file(tmp_path / "vocab.txt")
    assert back.tokens == VOCAB.tokens and back.sot_id == 0
    with pytest.raises(ValueError):
        Vocabulary(["a", "b"])
    with pytest.raises(ValueError):
        Vocabulary([SOT, "a", "a"])


def test_encode_image_contract():
    torch.manual_seed(0)
    enc = ImageEncoder(dim=16, tokens=4, width=16)
    z = encode_image(np.zeros((3, 64, 64)), enc)
    assert z.shape == (4, 16) and torch.isfinite(z).all()
    img = np.random.default_rng(0).random((3, 64, 64))
    assert torch.equal(encode_image(img, enc), encode_image(img, enc))
    with pytest.raises(ValueError):
        encode_image(np.zeros((3, 32, 32)), enc)
    with pytest.raises(ValueError):
        encode_image(np.full((3, 64, 64), 1.5), enc)


@pytest.mark.slow
def test_trained_image_tokens_separate_shapes(trained_model):
    from seguidance.harness.synth import render_reference

    pooled = {}
    for shape in ("circle", "square", "triangle"):
        views = [render_reference("red", shape, np.random.default_rng(k)) for k in range(4)]
        with torch.no_grad():
            pooled[shape] = [trained_model.subject_tokens([v]).mean(0) for v in views]

    def cos(a, b):
        return float(torch.nn.functional.cosine_similarity(a, b, dim=0))

    same = np.mean([cos(v[i], v[j]) for v in pooled.values() for i in range(4) for j in range(i + 1, 4)])
    diff = np.mean([cos(a, b) for s1 in pooled for s2 in pooled if s1 < s2
                    for a in pooled[s1] for b in pooled[s2]])
    assert diff < same


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_single_key_attends_fully():
    f, c = rand(4, 6), rand(1, 5, seed=1)
    w = (rand(3, 6, seed=2), rand(3, 5, seed=3), rand(6, 5, seed=4))
    seen = []
    out = cross_attention(f, c, w, publish=seen.append)
    assert torch.equal(seen[0], torch.ones(1, 1, 4, 1, dtype=torch.float64))
    torch.testing.assert_close(out, (c @ w[2].T).expand(4, 6))


def test_saturated_softmax_picks_dominant_key():
    d = 4
    f = torch.eye(d, dtype=torch.float64)[:2] * 10.0
    c = torch.zeros(3, d, dtype=torch.float64)
    c[1, 0] = c[1, 1] = 10.0  # both queries score 100/sqrt(4)=50 on key 1, zero elsewhere
    eye = torch.eye(d, dtype=torch.float64)
    w_v = rand(d, d, seed=7)
    out = cross_attention(f, c, (eye, eye, w_v))
    expect = (c[1] @ w_v.T).expand(2, d)
    assert torch.max(torch.abs(out - expect)) <= 1e-6


def test_cross_attention_matches_scalar_loop():
    f, c = rand(4, 5), rand(3, 6, seed=1)
    wq, wk, wv = rand(3, 5, seed=2), rand(3, 6, seed=3), rand(5, 6, seed=4)
    seen = []
    out = cross_attention(f, c, (wq, wk, wv), publish=seen.append)
    ref_out, ref_probs = oracles.attention(f, c, wq, wk, wv)
    assert oracles.max_abs_diff(out, ref_out) <= 1e-5
    assert oracles.max_abs_diff(seen[0][0, 0], ref_probs) <= 1e-5
    assert torch.max(torch.abs(seen[0].sum(-1) - 1)) <= 1e-6


def block(seed=0, channels=8, ctx=6):
    torch.manual_seed(seed)
    return CrossAttentionBlock(channels, ctx, LayerId("mid", 1), 2, attn_dim=4).double()


def test_lambda_zero_is_bit_equal_to_text_path():
    b = block()
    f, text = rand(1, 4, 8), rand(1, 3, 6, seed=1)
    cond = Conditioning(text, [rand(1, 2, 6, seed=2)], lam=0.0, subject_ids=["x"])
    assert torch.equal(decoupled_attention(f, cond, b), cross_attention(f, text, b.text_weights))
    assert torch.equal(decoupled_attention(f, Conditioning(text, lam=1.0), b),
                       cross_attention(f, text, b.text_weights))


def test_single_subject_matches_single_sum_form():
    b = block()
    f, text, img = rand(1, 4, 8), rand(1, 3, 6, seed=1), rand(1, 2, 6, seed=2)
    out = decoupled_attention(f, Conditioning(text, [img], lam=0.7, subject_ids=["x"]), b)
    expect = cross_attention(f, text, b.text_weights) + 0.7 * cross_attention(f, img, b.image_weights)
    torch.testing.assert_close(out, expect, atol=1e-12, rtol=0)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        Conditioning(rand(1, 2, 6), lam=-0.1)
    cond = Conditioning(rand(1, 2, 6))
    cond.lam = -1.0
    with pytest.raises(ValueError):
        decoupled_attention(rand(1, 4, 8), cond, block())


def test_two_orthogonal_subjects_superpose():
    b = block()
    f, text = rand(1, 4, 8), rand(1, 3, 6, seed=1)
    a = torch.zeros(1, 2, 6, dtype=torch.float64)
    a[0, :, :3] = rand(2, 3, seed=2)
    c = torch.zeros(1, 2, 6, dtype=torch.float64)
    c[0, :, 3:] = rand(2, 3, seed=3)
    both = decoupled_attention(f, Conditioning(text, [a, c], 1.0, ["a", "c"]), b)
    one = decoupled_attention(f, Conditioning(text, [a], 1.0, ["a"]), b)
    two = decoupled_attention(f, Conditioning(text, [c], 1.0, ["c"]), b)
    zt = decoupled_attention(f, Conditioning(text), b)
    torch.testing.assert_close(both, one + two - zt, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lambda_linearity(seed):
    b = block(seed % 7)
    f, text = rand(1, 4, 8, seed=seed), rand(1, 3, 6, seed=seed + 1)
    imgs = [rand(1, 2, 6, seed=seed + 2), rand(1, 2, 6, seed=seed + 3)]
    out = {lam: decoupled_attention(f, Conditioning(text, imgs, lam, ["x", "y"]), b) for lam in (0.0, 0.5, 1.0)}
    mid = out[0.5] - out[0.0]
    assert torch.max(torch.abs(2 * mid - (out[1.0] - out[0.0]))) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 4))
def test_subject_order_does_not_matter(seed, n):
    b = block(seed % 5)
    f, text = rand(1, 4, 8, seed=seed), rand(1, 3, 6, seed=seed + 1)
    imgs = [rand(1, 2, 6, seed=seed + 10 + k) for k in range(n)]
    ids = [str(k) for k in range(n)]
    perm = np.random.default_rng(seed).permutation(n)
    fwd = decoupled_attention(f, Conditioning(text, imgs, 0.8, ids), b)
    rev = decoupled_attention(f, Conditioning(text, [imgs[k] for k in perm], 0.8, [ids[k] for k in perm]), b)
    assert torch.max(torch.abs(fwd - rev)) <= 1e-6


def test_block_softmax_rows_sum_to_one(tiny_model):
    from seguidance.attention_store import AttentionStore

    store = AttentionStore(tiny_model.denoiser.attention_registry)
    s = SubjectSet([Subject("circle", "circle", [np.full((3, 64, 64), 0.5)])])
    _, cond, _ = tiny_model.conditioning("a red circle", s, lam=1.0)
    with torch.no_grad():
        tiny_model.denoiser(torch.randn(1, *tiny_model.latent_shape), 300, cond, store)
    for rec in store.records.values():
        assert torch.max(torch.abs(rec.probs.sum(-1) - 1)) <= 1e-6
