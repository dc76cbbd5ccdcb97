import numpy as np
import pytest

import vico.numerics as N
from vico import text as T


@pytest.fixture
def state():
    return T.TextEncoderState(T.TextConfig(), T.Vocabulary.default(), seed=7)


def test_tokenize_photo_prompt():
    seq = T.tokenize("a photo of a {}", T.Vocabulary.default())
    assert seq.s_star_index == 5 and seq.eot_index == 6
    assert seq.ids[0] == T.BOS and seq.ids[5] == T.PLACEHOLDER and seq.ids[6] == T.EOT
    assert all(t == T.PAD for t in seq.ids[7:])
    assert len(seq) == 16


def test_tokenize_bare_slot():
    seq = T.tokenize("{}", T.Vocabulary.default())
    assert (seq.s_star_index, seq.eot_index) == (1, 2)


def test_tokenize_beach_prompt():
    seq = T.tokenize("a {} on the beach", T.Vocabulary.default())
    assert (seq.s_star_index, seq.eot_index) == (2, 6)


def test_tokenize_rejects_bad_prompts():
    vocab = T.Vocabulary.default()
    with pytest.raises(T.VocabularyError, match="unknown word"):
        T.tokenize("a {} zzzqqq", vocab)
    with pytest.raises(T.VocabularyError, match="exactly one"):
        T.tokenize("a photo of a dog", vocab)
    with pytest.raises(T.VocabularyError, match="exactly one"):
        T.tokenize("{} and {}", vocab)


def test_token_indices_invariant_enforced():
    with pytest.raises(T.VocabularyError):
        T.TokenSequence((T.BOS, T.EOT, T.PLACEHOLDER, T.PAD), 2, 1)


def test_encode_deterministic(state):
    seq = T.tokenize("a photo of a {}", state.vocab)
    a = state.encode(seq).data
    b = state.encode(seq).data
    assert a.tobytes() == b.tobytes()
    assert a.shape == (16, 32)


def test_encode_depends_on_placeholder_row(state):
    seq = T.tokenize("a photo of a {}", state.vocab)
    before = state.encode(seq).data.copy()
    state.set_placeholder(state.get_placeholder() + 0.5)
    after = state.encode(seq).data
    assert not np.array_equal(before, after)


def test_placeholder_gradient_matches_finite_differences(state):
    N.set_default_dtype("f64")
    try:
        st = T.TextEncoderState(T.TextConfig(d_text=8, context_len=8, heads=2), T.Vocabulary.default(), seed=3)
        seq = T.tokenize("a photo of a {}", st.vocab, context_len=8)

        def loss(_):
            c = st.encode(seq)
            return N.sum_(N.mul(c, c))

        value = loss(None)
        N.backward(value)
        (fd,) = N.finite_diff_grad(loss, [st.s_star], h=1e-4)
        assert N.max_relative_error(st.s_star.grad, fd) < 1e-3
    finally:
        N.set_default_dtype("f32")


def test_gradient_reaches_only_placeholder(state):
    seq = T.tokenize("a {} on the beach", state.vocab)
    frozen_before = {k: v.copy() for k, v in state.frozen_parameters().items()}
    out = state.encode(seq)
    N.backward(N.sum_(N.mul(out, out)))
    assert np.any(state.s_star.grad != 0.0)
    for k, v in state.frozen_parameters().items():
        assert v.tobytes() == frozen_before[k].tobytes(), k


def test_init_placeholder_copies_word_row(state):
    state.init_placeholder("object")
    row = state.table[state.vocab.lookup("object")]
    assert state.s_star.data.tobytes() == row.tobytes()
    with pytest.raises(T.VocabularyError):
        state.init_placeholder("zzzqqq")


def test_placeholder_roundtrip_and_validation(state):
    v = np.linspace(-1, 1, 32).astype(np.float32)
    state.set_placeholder(v)
    assert state.get_placeholder().tobytes() == v.tobytes()
    with pytest.raises(ValueError, match="shape"):
        state.set_placeholder(np.zeros(5))


def test_vocab_roundtrip():
    vocab = T.Vocabulary.default()
    again = T.Vocabulary.from_json_dict(vocab.to_json_dict())
    assert again.word_to_id == vocab.word_to_id
    with pytest.raises(T.VocabularyError, match="dense"):
        T.Vocabulary.from_json_dict({"a": 0, "b": 5})


def test_plain_tokens_for_warmup(state):
    plain = T.tokenize_plain("a photo of a duck", state.vocab)
    assert plain.ids[plain.eot_index] == T.EOT
    out = state.encode_plain_batch([plain])
    assert out.shape == (1, 16, 32)
    with pytest.raises(T.VocabularyError):
        T.tokenize_plain("a photo of a {}", state.vocab)
