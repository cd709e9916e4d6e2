import json
import math

import numpy as np
import pytest

from conftest import small_model
from relkit.data import WordPair
from relkit.encoder import (
    Aggregation,
    CheckpointError,
    DEFAULT_AGGREGATION,
    EncoderConfig,
    EncoderModel,
    SPECIALS,
    Vocabulary,
    VocabError,
    aggregation_weights,
    build_vocab,
    embed_pair,
    embed_pairs,
    load_checkpoint,
    pad_batch,
    read_manifest,
    save_checkpoint,
)
from relkit.encoder.gradcheck import check_gradients
from relkit.prompting import get_template, render

# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocab_order_and_specials():
    vocab = build_vocab(["b a b", "c b a"])
    assert vocab.tokens[: len(SPECIALS)] == list(SPECIALS)
    assert vocab.tokens[len(SPECIALS):] == ["b", "a", "c"]
    assert vocab.encode("a zzz") == [vocab.index["a"], vocab.unk_id]
    assert vocab.encode("a", add_delimiters=True) == [vocab.bos_id, vocab.index["a"], vocab.eos_id]


def test_vocab_min_freq_and_empty():
    assert "c" not in build_vocab(["b a b", "c b a"], min_freq=2)
    with pytest.raises(VocabError):
        build_vocab(["x"], min_freq=2)


def test_vocab_case_policy_and_hash():
    lower = build_vocab(["Sun STAR"], case_policy="lower")
    assert lower.tokenize("Sun <mask>") == ["sun", "<mask>"]
    preserve = Vocabulary(lower.tokens, "preserve")
    assert lower.hash != preserve.hash


def test_vocab_save_load(tmp_path):
    vocab = build_vocab(["héllo wörld", "x"])
    vocab.save(tmp_path / "v.txt")
    again = Vocabulary.load(tmp_path / "v.txt")
    assert again.tokens == vocab.tokens and again.hash == vocab.hash


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return small_model(["sun", "star", "dog", "animal", "cat", "pet"], seed=3)


def encode(model, pairs, template=1):
    prompts = [render(get_template(template), p, model.vocab) for p in pairs]
    return pad_batch([p.token_ids for p in prompts], model.vocab.pad_id)


def test_single_token_shape(model):
    out = model.forward(np.array([[5]]))
    assert out.shape == (1, 1, model.config.d_model)


def test_batch_permutation(model):
    ids, mask = encode(model, [WordPair("sun", "star"), WordPair("dog", "animal"), WordPair("cat", "pet")])
    out = model.forward(ids, mask)
    perm = [2, 0, 1]
    np.testing.assert_array_equal(model.forward(ids[perm], mask[perm]), out[perm])


def test_padding_invariance(model):
    ids, mask = encode(model, [WordPair("sun", "star")])
    base = model.forward(ids, mask)
    padded = np.concatenate([ids, np.zeros((1, 5), dtype=ids.dtype)], axis=1)
    out = model.forward(padded, padded != model.vocab.pad_id)
    np.testing.assert_allclose(out[:, : ids.shape[1]], base, rtol=0, atol=1e-6)


def test_same_seed_same_model(model):
    other = small_model(["sun", "star", "dog", "animal", "cat", "pet"], seed=3)
    for name in model.params:
        np.testing.assert_array_equal(model.params[name], other.params[name])
    ids, mask = encode(model, [WordPair("sun", "star")])
    np.testing.assert_array_equal(model.forward(ids, mask), other.forward(ids, mask))


def test_forward_input_errors(model):
    with pytest.raises(ValueError, match="out of range"):
        model.forward(np.array([[len(model.vocab)]]))
    with pytest.raises(ValueError, match="max_len"):
        model.forward(np.ones((1, model.config.max_len + 1), dtype=int))


def test_zeroed_sublayers_give_normalized_embeddings():
    vocab = build_vocab(["a b c"])
    cfg = EncoderConfig(len(vocab), d_model=4, n_heads=1, n_layers=1, d_ff=8, max_len=8)
    m = EncoderModel(cfg, vocab, seed=1, dtype=np.float64)
    for name in ("attn.wo", "attn.bo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"):
        m.params[f"blocks.0.{name}"][...] = 0.0
    ids = np.array([[vocab.bos_id, 5, 6, vocab.eos_id]])
    out = m.forward(ids)
    for t, tok in enumerate(ids[0]):
        x = [float(m.params["tok_emb"][tok, j] + m.params["pos_emb"][t, j]) for j in range(4)]
        mu = sum(x) / 4
        var = sum((v - mu) ** 2 for v in x) / 4
        expected = [(v - mu) / math.sqrt(var + 1e-5) for v in x]
        np.testing.assert_allclose(out[0, t], expected, rtol=1e-12, atol=1e-12)


def test_mlm_distributions_normalized(model):
    ids, mask = encode(model, [WordPair("sun", "star"), WordPair("dog", "animal")])
    probs = np.exp(model.mlm_logprobs(ids, mask).astype(np.float64))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregation_definitions(model):
    pair = WordPair("sun", "star")
    ids, mask = encode(model, [pair], template=3)
    hidden = model.forward(ids, mask).astype(np.float64)[0]
    content = [t for t, tok in enumerate(ids[0]) if tok not in (model.vocab.bos_id, model.vocab.eos_id)]
    masks = [t for t in content if ids[0, t] == model.vocab.mask_id]
    rest = [t for t in content if t not in masks]
    tpl = get_template(3)
    emb = {a: embed_pair(model, tpl, pair, a).vector.astype(np.float64) for a in Aggregation}
    np.testing.assert_allclose(emb[Aggregation.MASK], hidden[masks[0]], atol=1e-6)
    np.testing.assert_allclose(emb[Aggregation.AVERAGE], hidden[content].mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(emb[Aggregation.AVERAGE_WO_MASK], hidden[rest].mean(axis=0), atol=1e-6)
    n, n_wo = len(content), len(rest)
    np.testing.assert_allclose(
        emb[Aggregation.AVERAGE], (n_wo * emb[Aggregation.AVERAGE_WO_MASK] + hidden[masks].sum(axis=0)) / n, atol=1e-6
    )


def test_aggregation_three_positions():
    vocab = build_vocab(["u v"])
    cfg = EncoderConfig(len(vocab), d_model=4, n_heads=1, n_layers=1, d_ff=4, max_len=8)
    m = EncoderModel(cfg, vocab)
    ids = np.array([[vocab.bos_id, vocab.index["u"], vocab.index["v"], vocab.mask_id, vocab.eos_id, vocab.pad_id]])
    w = {a: aggregation_weights(ids, m, a)[0] for a in Aggregation}
    np.testing.assert_allclose(w[Aggregation.AVERAGE], [0, 1 / 3, 1 / 3, 1 / 3, 0, 0], rtol=1e-7)
    np.testing.assert_array_equal(w[Aggregation.AVERAGE_WO_MASK], [0, 0.5, 0.5, 0, 0, 0])
    np.testing.assert_array_equal(w[Aggregation.MASK], [0, 0, 0, 1, 0, 0])


def test_default_aggregation_and_provenance(model):
    assert DEFAULT_AGGREGATION is Aggregation.AVERAGE_WO_MASK
    emb = embed_pair(model, get_template(2), WordPair("dog", "animal"))
    assert emb.aggregation is Aggregation.AVERAGE_WO_MASK and emb.template_id == 2
    assert emb.model_id == model.model_id


def test_embed_pairs_chunking_consistent(model):
    pairs = [WordPair("sun", "star"), WordPair("dog", "animal"), WordPair("cat", "pet")]
    tpl = get_template(4)
    np.testing.assert_allclose(embed_pairs(model, tpl, pairs, batch_size=1), embed_pairs(model, tpl, pairs),
                               atol=1e-6)


def test_overlength_prompt_rejected():
    m = small_model(["a", "b"], max_len=8)
    with pytest.raises(ValueError, match="max_len"):
        embed_pair(m, get_template(1), WordPair("a", "b"))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_requires_forward():
    m = small_model(["a"])
    with pytest.raises(RuntimeError):
        m.backward(np.zeros((1, 1, m.config.d_model)))


def test_backward_sum_of_outputs(model):
    ids, mask = encode(model, [WordPair("sun", "star")])
    m = model.astype(np.float64)
    m.forward(ids, mask, record=True)
    grads = m.backward(np.ones((1, ids.shape[1], m.config.d_model)))
    # final affine layer: d(sum y)/d b = number of positions, d(sum y)/d g = sum of normalised inputs
    np.testing.assert_allclose(grads["ln_f.b"], np.full(m.config.d_model, ids.shape[1]))
    xhat = (m.forward(ids, mask) - m.params["ln_f.b"]) / m.params["ln_f.g"]
    np.testing.assert_allclose(grads["ln_f.g"], xhat.sum(axis=(0, 1)), atol=1e-10)


def test_unused_rows_have_zero_gradient(model):
    ids, mask = encode(model, [WordPair("sun", "star")])
    model.forward(ids, mask, record=True)
    grads = model.backward(np.random.default_rng(0).standard_normal((1, ids.shape[1], model.config.d_model)))
    unused = sorted(set(range(len(model.vocab))) - set(ids.ravel().tolist()))
    assert np.all(grads["tok_emb"][unused] == 0)
    assert np.all(grads["pos_emb"][ids.shape[1]:] == 0)
    assert np.all(grads["mlm.bias"] == 0)


def test_small_gradcheck_wide_precision():
    # wide precision: some true gradients are exactly 0 (key biases), where float64 noise dominates
    m = small_model(["sun", "star"], d_model=8, n_layers=1, d_ff=8, max_len=24, seed=2).astype(np.longdouble)
    rng = np.random.default_rng(1)
    for name in m.params:
        m.params[name] = m.params[name] + rng.normal(0, 0.1, m.params[name].shape).astype(np.longdouble)
    ids, mask = encode(m, [WordPair("sun", "star"), WordPair("star", "sun")], template=3)
    target = rng.standard_normal((*ids.shape, m.config.d_model)).astype(np.longdouble)

    def head(hidden):
        return (hidden * target).sum() + 0.5 * (hidden**2).sum(), target + hidden

    errors = check_gradients(m, ids, mask, head, step=1e-5)
    assert max(errors.values()) < 1e-4
    # key-bias gradients are exactly 0, so only there the 1e-8 floor of the metric shows
    assert max(v for k, v in errors.items() if not k.endswith("attn.bk")) < 1e-6


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck", training_config={"loss": "infonce"})
    again = load_checkpoint(tmp_path / "ck", expected_vocab_hash=model.vocab.hash)
    assert list(again.params) == list(model.params)
    for name, value in model.params.items():
        assert again.params[name].tobytes() == value.tobytes()
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["training_config"] == {"loss": "infonce"}
    assert manifest["architecture"] == model.config.to_dict()


def test_manifest_sections_tile_blob(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck")
    manifest = read_manifest(tmp_path / "ck")
    offset = 0
    for sec in manifest["sections"]:
        assert sec["offset"] == offset
        assert sec["nbytes"] == 4 * math.prod(sec["shape"])
        offset += sec["nbytes"]
    assert offset == manifest["blob_length"] == (tmp_path / "ck" / "params.bin").stat().st_size


def test_checkpoint_vocab_hash_mismatch(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck")
    with pytest.raises(CheckpointError, match="vocab hash"):
        load_checkpoint(tmp_path / "ck", expected_vocab_hash="0" * 64)


def test_checkpoint_corruption_detected(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC32"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_version_mismatch(tmp_path, model):
    save_checkpoint(model, tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")
