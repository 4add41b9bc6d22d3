import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3s.data import (BOS, EOS, PAD, UNK, Corpus, Record, SynthConfig, Vocab, build_vocab, corpus_texts,
                      detokenize, directions_for, encode_target, make_batch, read_corpus, read_vision,
                      strip_special, synth_corpus, tokenize, write_corpus, write_vision)
from m3s.errors import ConfigError, DataError
from m3s.model import ModelConfig

LANGS = ("en", "id", "ru", "ur")


@pytest.fixture(scope="module")
def synth():
    train, test, vision = synth_corpus(SynthConfig(seed=5, n_articles=3, n_test=1))
    vocab = build_vocab(corpus_texts(train), LANGS)
    cfg = ModelConfig(d_model=8, d_vision=16, d_common=4, heads=2, vocab_size=len(vocab), max_src_len=12,
                      max_tgt_len=6, n_images=2, n_regions=3, n_langs=4)
    return train, test, vision, vocab, cfg


def test_tokenize_empty():
    assert tokenize("", Vocab(["a"], LANGS)) == [EOS]


def test_vocab_order_and_unk():
    vocab = build_vocab(["b a b", "c a b"], LANGS, max_size=2)
    assert vocab.tokens == ["b", "a"]
    assert vocab.lang_id("en") == 4 and vocab.lang_id("ur") == 7
    assert tokenize("B a c", vocab) == [8, 9, UNK, EOS]


def test_vocab_deterministic_and_persisted(tmp_path):
    texts = ["z y x", "y x", "x"]
    v1, v2 = build_vocab(texts, LANGS), build_vocab(list(reversed(texts)), LANGS)
    assert v1 == v2
    v1.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt", LANGS) == v1


def test_vocab_needs_two_languages():
    with pytest.raises(ConfigError):
        Vocab(["a"], ["en"])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta", "gamma", "delta"]), max_size=12))
def test_tokenize_round_trip(words):
    vocab = build_vocab(["alpha beta gamma delta"], LANGS)
    text = " ".join(words)
    ids = tokenize(text, vocab)
    assert ids[-1] == EOS
    assert detokenize(ids, vocab) == text
    assert strip_special([BOS] + ids + [PAD]) == ids[:-1]


def test_encode_target_keeps_eos():
    vocab = build_vocab(["a b c d e"], LANGS)
    ids = encode_target("a b c d e", vocab, 3)
    assert len(ids) == 3 and ids[-1] == EOS


def test_batch_invariants(synth):
    train, _, vision, vocab, cfg = synth
    corpus = Corpus(train)
    batches = {d: make_batch(corpus, corpus.urls, d, vocab, vision, cfg) for d in directions_for(LANGS)}
    for (src, tgt), b in batches.items():
        assert np.all(b.dec_in[:, 0] == BOS)
        np.testing.assert_array_equal(b.dec_in[:, 1:][b.tgt_mask[:, 1:] == 1], b.tgt_ids[:, :-1][b.tgt_mask[:, 1:] == 1])
        assert np.all(b.src_ids[b.src_mask == 0] == PAD)
        assert np.all(b.src_ids[:, 0] == vocab.lang_id(tgt))
        np.testing.assert_array_equal(b.tgt_ids, batches[(tgt, tgt)].tgt_ids)
        if src == tgt:
            np.testing.assert_array_equal(b.src_ids, b.teacher_src_ids)
        else:
            assert not np.array_equal(b.src_ids, b.teacher_src_ids)
        assert b.vision.mask.shape == (len(corpus.urls), 2, 3)


def test_missing_alignment_names_sample(synth):
    train, *_ = synth
    broken = [Record(**{**r.__dict__, "aligned": {}}) if r.id.endswith("-ru") and r.id.startswith("00001") else r
              for r in train]
    corpus = Corpus(broken)
    with pytest.raises(DataError, match="00001-ru"):
        corpus.check_directions(directions_for(LANGS))
    corpus.check_directions([("en", "en"), ("ru", "ru")])


def test_synth_counts_and_alignment(synth):
    train, test, vision, _, _ = synth
    assert len(train) == 12 and len(test) == 4
    corpus = Corpus(train)
    for d in directions_for(LANGS):
        assert len(corpus.urls_for(d)) == 3
    for r in train + test:
        assert set(r.aligned) == set(LANGS) - {r.lang}
        feats, boxes, mask = vision[r.vision_ref]
        assert mask.any()
        assert np.all(boxes[..., 0] <= boxes[..., 2]) and np.all(boxes[..., 1] <= boxes[..., 3])
        assert not feats[mask == 0].any()
        assert len(r.summary.split()) < len(r.doc.split()) + 1


def test_synth_byte_identical(tmp_path):
    paths = []
    for k in range(2):
        train, _, vision = synth_corpus(SynthConfig(seed=11, n_articles=2))
        write_corpus(train, tmp_path / f"c{k}.jsonl")
        write_vision(((key, *v) for key, v in sorted(vision.items())), tmp_path / f"v{k}.bin")
        paths.append(k)
    assert (tmp_path / "c0.jsonl").read_bytes() == (tmp_path / "c1.jsonl").read_bytes()
    assert (tmp_path / "v0.bin").read_bytes() == (tmp_path / "v1.bin").read_bytes()
    other, _, _ = synth_corpus(SynthConfig(seed=12, n_articles=2))
    assert [r.doc for r in other] != [r.doc for r in read_corpus(tmp_path / "c0.jsonl")]


def test_corpus_round_trip(tmp_path, synth):
    train, *_ = synth
    write_corpus(train, tmp_path / "c.jsonl")
    assert read_corpus(tmp_path / "c.jsonl") == train


def test_vision_round_trip_exact(tmp_path, synth):
    _, _, vision, _, _ = synth
    write_vision(((k, *v) for k, v in vision.items()), tmp_path / "v.bin")
    back = read_vision(tmp_path / "v.bin")
    assert back.keys() == vision.keys()
    for k, (f, b, m) in vision.items():
        assert back[k][0].tobytes() == f.tobytes()
        assert back[k][1].tobytes() == b.tobytes()
        np.testing.assert_array_equal(back[k][2], m)


def test_vision_truncated(tmp_path, synth):
    _, _, vision, _, _ = synth
    write_vision(((k, *v) for k, v in vision.items()), tmp_path / "v.bin")
    data = (tmp_path / "v.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(DataError, match="truncated"):
        read_vision(tmp_path / "t.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataError):
        read_vision(tmp_path / "bad.bin")


def test_bad_record():
    import json
    with pytest.raises(DataError):
        Record.from_dict(json.loads('{"id": "x"}'))


def test_directions():
    assert len(directions_for(LANGS)) == 16
    assert len(directions_for(LANGS, cross_only=True)) == 12
