import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dam.data import Conversation, ECECInstance, Utterance
from dam.encoder import EncoderConfig, ToyTokenizer, build_encoder, pool_utterances
from dam.ingestion import EncoderInput, serialize_instance, tokenize_input
from helpers import gradient_error


def small_encoder(hidden=16, **kw):
    cfg = EncoderConfig(hidden_dim=hidden, layers=1, heads=2, vocab_size=64, max_length=32, dropout=0.0, **kw)
    torch.manual_seed(0)
    return build_encoder(cfg)


class TestEncode:
    def test_default_width(self):
        torch.manual_seed(0)
        enc = build_encoder(EncoderConfig(layers=1, vocab_size=256, max_length=32)).eval()
        inp = EncoderInput("x", (1, 12, 13, 2), {1: (1, 3)})
        out = enc.encode(inp)
        assert out.token_states.shape == (4, 768)
        assert out.cls_state.shape == (768,)

    def test_single_utterance_is_row_sum(self):
        enc = small_encoder().eval()
        conv = Conversation("c", (Utterance(1, "A", "one two three four"),))
        inst = ECECInstance("c", 1, 1, "happiness", (1,), 1)
        inp = tokenize_input(serialize_instance(inst, conv, speaker_prefix=False), enc.tokenizer, 32)
        start, end = inp.utterance_spans[1]
        assert end - start == 4
        out = enc.encode(inp)
        np.testing.assert_allclose(out.utterance_states[1].detach().numpy(),
                                   out.token_states[start:end].sum(0).detach().numpy(), rtol=1e-6, atol=1e-6)

    def test_inference_is_bitwise_deterministic(self):
        enc = small_encoder().eval()
        inp = EncoderInput("x", (1, 20, 21, 22, 2), {1: (1, 4)})
        with torch.no_grad():
            a = enc.encode(inp).cls_state
            b = enc.encode(inp).cls_state
        assert torch.equal(a, b)

    def test_over_length_names_instance(self):
        enc = small_encoder()
        with pytest.raises(ValueError, match="long-one"):
            enc.encode(EncoderInput("long-one", tuple([5] * 40), {}))

    def test_padding_does_not_leak(self):
        enc = small_encoder().eval()
        with torch.no_grad():
            alone = enc.encode_batch([(1, 20, 2)])[0]
            padded = enc.encode_batch([(1, 20, 2), (1, 20, 21, 22, 23, 2)])[0, :3]
        np.testing.assert_allclose(alone.numpy(), padded.numpy(), atol=1e-5)

    def test_gradient_wrt_token_embeddings(self):
        enc = small_encoder(hidden=8).double().train()
        ids = torch.tensor([[1, 20, 21, 2]])
        emb = enc.backend.embed(ids).detach().clone().requires_grad_(True)
        weights = torch.randn(4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

        def loss():
            return (enc.backend(inputs_embeds=emb) * weights).sum()

        assert gradient_error(loss, [emb]) < 1e-4


class TestPool:
    def test_singleton_span(self):
        s = torch.randn(5, 3)
        np.testing.assert_array_equal(pool_utterances(s, [(2, 3)])[0].numpy(), s[2].numpy())

    def test_zero_states(self):
        assert not pool_utterances(torch.zeros(5, 3), [(0, 5)]).any()

    def test_three_token_span_oracle(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(6, 4))
        out = pool_utterances(torch.from_numpy(s), {1: (1, 4), 2: (4, 6)}).numpy()
        np.testing.assert_allclose(out[0], s[1] + s[2] + s[3], rtol=1e-12)
        np.testing.assert_allclose(out[1], s[4] + s[5], rtol=1e-12)

    def test_mean_mode(self):
        s = torch.arange(12.0).view(4, 3)
        np.testing.assert_allclose(pool_utterances(s, [(0, 2)], "mean")[0].numpy(), [1.5, 2.5, 3.5])

    def test_empty_span_raises(self):
        with pytest.raises(ValueError, match="empty span"):
            pool_utterances(torch.zeros(4, 2), [(2, 2)])

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            pool_utterances(torch.zeros(4, 2), [(2, 6)])

    @given(st.floats(-5, 5), st.integers(0, 2**16))
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, a, seed):
        s = torch.randn(6, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        spans = [(0, 2), (2, 5), (5, 6)]
        np.testing.assert_allclose(pool_utterances(a * s, spans).numpy(), a * pool_utterances(s, spans).numpy(),
                                   rtol=1e-9, atol=1e-12)


class TestToyTokenizer:
    def test_stable_ids(self):
        tok = ToyTokenizer(128)
        assert tok.tokenize("Hello, world") == tok.tokenize("hello , WORLD")
        assert all(tok.num_special <= i < 128 for i in tok.tokenize("some words here"))

    def test_unknown_emotion(self):
        with pytest.raises(KeyError):
            ToyTokenizer(128).emotion_id("boredom")
