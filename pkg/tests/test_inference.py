import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from conftest import micro_config, random_model, random_vision, tiny_setup
from hypothesis import given, settings
from hypothesis import strategies as st
from m3s import autodiff as ad
from m3s.data import BOS, EOS, directions_for
from m3s.errors import ConfigError
from m3s.inference import (BeamConfig, Grid, RougeReport, beam_search, eval_grid, generate, length_norm,
                           rouge_l, rouge_n)
from m3s.model import Summarizer


def brute_rouge_n(cand, ref, n):
    cg = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    overlap = sum(min(cg.count(g), rg.count(g)) for g in set(cg))
    return overlap, len(cg), len(rg)


def brute_lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))
    return go(0, 0)


def f1(overlap, nc, nr):
    p = overlap / nc if nc else 0.0
    r = overlap / nr if nr else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


class TestRouge:
    def test_unigram_fixture(self):
        s = rouge_n("a b c".split(), "a b d".split(), 1)
        assert (s.precision, s.recall) == (2 / 3, 2 / 3)
        assert s.f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_bigram_fixture(self):
        assert rouge_n("a b c".split(), "a b d".split(), 2).f1 == 0.5

    def test_lcs_fixture(self):
        assert rouge_l("a b c".split(), "a c b".split()).f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_disjoint_and_prefix(self):
        assert rouge_n(["x"], ["y"]).f1 == 0.0
        assert rouge_l(["a", "b", "c"], ["a", "b"]).recall == 1.0

    def test_empty_reference_flag(self):
        s = rouge_n(["a"], [])
        assert s.f1 == 0.0 and s.empty_reference
        assert not rouge_n(["a"], ["a"]).empty_reference

    def test_clipping(self):
        assert rouge_n("the the the".split(), "the cat".split()).precision == 1 / 3

    def test_bad_order(self):
        with pytest.raises(ConfigError):
            rouge_n(["a"], ["a"], 0)

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.integers(0, 5, size=rng.integers(0, 12)).tolist()
            b = rng.integers(0, 5, size=rng.integers(0, 12)).tolist()
            for n in (1, 2):
                assert rouge_n(a, b, n).f1 == f1(*brute_rouge_n(a, b, n))
            assert rouge_l(a, b).f1 == f1(brute_lcs(tuple(a), tuple(b)), len(a), len(b))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
    def test_f1_symmetric(self, a, b):
        for fn in (lambda x, y: rouge_n(x, y, 1), lambda x, y: rouge_n(x, y, 2), rouge_l):
            assert fn(a, b).f1 == pytest.approx(fn(b, a).f1, abs=1e-15)
            assert 0.0 <= fn(a, b).f1 <= 1.0


def greedy(model, src_ids, vision, max_len):
    from m3s.inference import _encode_memory
    with ad.no_grad():
        memory, mask = _encode_memory(model, src_ids, vision)
        toks = []
        for _ in range(max_len):
            _, logits = model.decode(np.array([[BOS] + toks]), np.ones((1, len(toks) + 1)), ad.Tensor(memory), mask)
            tok = int(np.argmax(logits.data[0, -1]))
            toks.append(tok)
            if tok == EOS:
                break
    return toks


def all_logprob(model, src_ids, vision, seq):
    from m3s.inference import _encode_memory
    with ad.no_grad():
        memory, mask = _encode_memory(model, src_ids, vision)
        dec_in = np.array([[BOS] + list(seq[:-1])])
        _, logits = model.decode(dec_in, np.ones_like(dec_in), ad.Tensor(memory), mask)
        lp = ad.log_softmax(logits, -1).data[0].astype(np.float64)
    return float(sum(lp[i, t] for i, t in enumerate(seq)))


@pytest.fixture(scope="module")
def decoder_case():
    cfg = micro_config(vocab_size=6, max_tgt_len=3)
    with ad.precision(64):
        model = random_model(cfg, seed=8, scale=3.0)
        vision = random_vision(np.random.default_rng(1), cfg, batch=1)
    return cfg, model, vision


class TestBeam:
    def test_beam_one_is_greedy(self, decoder_case):
        cfg, model, vision = decoder_case
        rng = np.random.default_rng(0)
        with ad.precision(64):
            for _ in range(10):
                src = rng.integers(4, cfg.vocab_size, size=4)
                got = beam_search(model, src, vision, BeamConfig(beam_size=1)).tokens
                assert got == greedy(model, src, vision, cfg.max_tgt_len)

    @pytest.mark.parametrize("gamma", [0.0, 0.6])
    def test_exhaustive_beam_matches_oracle(self, decoder_case, gamma):
        cfg, model, vision = decoder_case
        V, L = cfg.vocab_size, 2
        src = np.array([4, 5, 4, 3])
        with ad.precision(64):
            best = beam_search(model, src, vision, BeamConfig(beam_size=V ** L, length_penalty=gamma, max_len=L))
            cands = [s + (EOS,) for n in range(L) for s in itertools.product([t for t in range(V) if t != EOS],
                                                                              repeat=n)]
            scored = [(all_logprob(model, src, vision, c) / length_norm(len(c), gamma), c) for c in cands]
        top_score, top = max(scored)
        assert best.finished
        assert tuple(best.tokens) == top
        assert best.score == pytest.approx(top_score, abs=1e-9)

    def test_length_norm(self):
        assert length_norm(1, 0.6) == 1.0
        assert length_norm(7, 0.0) == 1.0
        assert length_norm(11, 1.0) == pytest.approx(16 / 6)

    def test_generate_strips_eos(self, decoder_case):
        cfg, model, vision = decoder_case
        out = generate(model, np.array([4, 5]), vision)
        assert EOS not in out and len(out) <= cfg.max_tgt_len

    def test_bad_beam(self):
        with pytest.raises(ConfigError):
            BeamConfig(beam_size=0)


@pytest.fixture(scope="module")
def grid_case():
    corpus, vocab, vision, cfg = tiny_setup(seed=2)
    model = Summarizer.create(cfg, seed=0)
    return corpus, vocab, vision, model


def test_grid_shape_and_averages(grid_case):
    corpus, vocab, vision, model = grid_case
    outputs = []
    grid = eval_grid(model, corpus, vocab, vision, directions_for(vocab.langs), BeamConfig(beam_size=2), outputs)
    K = len(vocab.langs)
    assert len(grid.cells) == K * K
    assert len(outputs) == K * K * len(corpus.urls)
    for s in vocab.langs:
        row = [grid.cells[(s, t)].r1.f1 for t in vocab.langs]
        assert abs(grid.row_average(s).r1.f1 - np.mean(row)) <= 1e-12
    lines = grid.table().splitlines()
    assert len(lines) == K + 1 and lines[0].split()[-1] == "Avg."
    assert len(grid.jsonl().splitlines()) == K * K


def test_grid_subset_rows(grid_case):
    corpus, vocab, vision, model = grid_case
    grid = eval_grid(model, corpus, vocab, vision, [("en", "en"), ("ru", "en")], BeamConfig(beam_size=1))
    lines = grid.table().splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["en", "ru"]
    assert lines[0].split() == ["src\\tgt", "en", "Avg."]


def test_report_of_identical():
    rep = RougeReport.of([5, 6, 7], [5, 6, 7])
    assert rep.r1.f1 == rep.r2.f1 == rep.rl.f1 == 1.0
    assert isinstance(Grid({}, []).jsonl(), str)
    assert math.isclose(rouge_l([1, 2], [2, 1]).f1, 0.5)
