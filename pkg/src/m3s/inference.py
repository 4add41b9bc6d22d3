"""Beam-search generation and ROUGE scoring over direction grids."""

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from m3s import autodiff as ad
from m3s import kernels as K
from m3s.data import BOS, EOS, encode_source, encode_target, stack_vision, strip_special
from m3s.errors import ConfigError


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    length_penalty: float = 0.6
    max_len: int = 0  # 0 -> model max_tgt_len
    eos_id: int = EOS

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty must be >= 0")


def length_norm(length, gamma):
    return ((5.0 + length) / 6.0) ** gamma


@dataclass
class Hypothesis:
    tokens: list
    logprob: float
    score: float
    finished: bool


def _encode_memory(model, src_ids, vision):
    src_ids = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_mask = np.ones_like(src_ids, dtype=np.int8)
    text = model.encode_text(src_ids, src_mask)
    vstates = model.encode_vision(vision)
    fused = model.fuse(text, vstates, src_mask, vision.flat_mask)
    return fused.out.data, src_mask


def beam_search(model, src_ids, vision, beam):
    """Decode one article. ``vision`` is a VisionBatch with B = 1.

    Live hypotheses are ranked by summed log-probability; finished ones by
    ``logprob / ((5 + len) / 6) ** gamma``. Returns the best finished
    hypothesis, or the best live one if none finished within ``max_len``.
    """
    max_len = beam.max_len or model.cfg.max_tgt_len
    max_len = min(max_len, model.cfg.max_tgt_len)
    k = beam.beam_size
    with ad.no_grad():
        memory, src_mask = _encode_memory(model, src_ids, vision)
        live = [Hypothesis([], 0.0, 0.0, False)]
        finished = []
        for t in range(max_len):
            n = len(live)
            dec_in = np.array([[BOS] + h.tokens for h in live], dtype=np.int64)
            mem = ad.Tensor(np.repeat(memory, n, axis=0))
            mask = np.repeat(src_mask, n, axis=0)
            _, logits = model.decode(dec_in, np.ones_like(dec_in), mem, mask)
            logp = ad.log_softmax(logits, axis=-1).data[:, -1, :].astype(np.float64)
            total = np.array([h.logprob for h in live])[:, None] + logp
            flat = total.reshape(-1)
            # stable order: best score first, ties by (hypothesis, token) index
            order = np.lexsort((np.arange(flat.size), -flat))[:2 * k]
            new_live = []
            for rank, idx in enumerate(order):
                h_i, tok = divmod(int(idx), logp.shape[1])
                lp = float(flat[idx])
                toks = live[h_i].tokens + [tok]
                if tok == beam.eos_id:
                    if rank < k:
                        finished.append(Hypothesis(toks, lp, lp / length_norm(len(toks), beam.length_penalty), True))
                    continue
                if len(new_live) < k:
                    new_live.append(Hypothesis(toks, lp, lp / length_norm(len(toks), beam.length_penalty), False))
            live = new_live
            if len(finished) >= k or not live:
                break
    pool = finished or live
    return max(pool, key=lambda h: h.score)


def generate(model, src_ids, vision, beam=BeamConfig()):
    """Token ids of the best hypothesis, without the trailing EOS."""
    return strip_special(beam_search(model, src_ids, vision, beam).tokens)


# ------------------------------------------------------------------ ROUGE

@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float
    empty_reference: bool = False


def _prf(overlap, n_cand, n_ref):
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return Score(p, r, f, empty_reference=n_ref == 0)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n=1):
    """Clipped n-gram overlap. An empty reference scores 0 with ``empty_reference`` set."""
    if n < 1:
        raise ConfigError("n-gram order must be >= 1")
    c, r = ngrams(list(candidate), n), ngrams(list(reference), n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a, b):
    return int(K.lcs_length(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


def rouge_l(candidate, reference):
    candidate, reference = list(candidate), list(reference)
    if candidate and not isinstance(candidate[0], (int, np.integer)) or \
            reference and not isinstance(reference[0], (int, np.integer)):
        # map arbitrary hashable tokens to ids for the integer kernel
        table = {}
        candidate = [table.setdefault(t, len(table)) for t in candidate]
        reference = [table.setdefault(t, len(table)) for t in reference]
    return _prf(lcs_length(candidate, reference), len(candidate), len(reference))


@dataclass(frozen=True)
class RougeReport:
    r1: Score
    r2: Score
    rl: Score

    @classmethod
    def of(cls, candidate, reference):
        return cls(rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), rouge_l(candidate, reference))


def mean_report(reports):
    def avg(scores):
        return Score(float(np.mean([s.precision for s in scores])), float(np.mean([s.recall for s in scores])),
                     float(np.mean([s.f1 for s in scores])))
    return RougeReport(avg([r.r1 for r in reports]), avg([r.r2 for r in reports]), avg([r.rl for r in reports]))


# ------------------------------------------------------------------ grids

def sample_vision(vision, ref, cfg):
    return stack_vision(vision, [ref], cfg)


def generate_direction(model, corpus, vocab, vision, direction, beam):
    """Yield (record, candidate ids, reference ids) for every article serving ``direction``."""
    src, tgt = direction
    cfg = model.cfg
    for u in corpus.urls_for(direction):
        rec = corpus.by_url[u][tgt]
        src_ids = encode_source(corpus.source_text(u, src, tgt), tgt, vocab, cfg.max_src_len)
        cand = generate(model, src_ids, sample_vision(vision, rec.vision_ref, cfg), beam)
        ref = strip_special(encode_target(rec.summary, vocab, cfg.max_tgt_len))
        yield rec, cand, ref


@dataclass
class Grid:
    cells: dict  # (src, tgt) -> RougeReport
    langs: list

    def row_average(self, src):
        row = [self.cells[(src, t)] for t in self.langs if (src, t) in self.cells]
        return mean_report(row) if row else None

    def records(self):
        for (s, t), rep in self.cells.items():
            yield {"src": s, "tgt": t,
                   "r1": rep.r1.f1, "r2": rep.r2.f1, "rl": rep.rl.f1,
                   "r1_p": rep.r1.precision, "r1_r": rep.r1.recall,
                   "r2_p": rep.r2.precision, "r2_r": rep.r2.recall,
                   "rl_p": rep.rl.precision, "rl_r": rep.rl.recall}

    def jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def table(self):
        """Source rows x target columns of R1/R2/RL F1 (x100), plus a row average."""
        cols = [t for t in self.langs if any((s, t) in self.cells for s in self.langs)]
        rows = [s for s in self.langs if any((s, t) in self.cells for t in self.langs)]
        header = ["src\\tgt"] + cols + ["Avg."]
        lines = [header]
        for s in rows:
            line = [s]
            for t in cols:
                rep = self.cells.get((s, t))
                line.append("-" if rep is None else
                            f"{100 * rep.r1.f1:.2f}/{100 * rep.r2.f1:.2f}/{100 * rep.rl.f1:.2f}")
            avg = self.row_average(s)
            line.append(f"{100 * avg.r1.f1:.2f}/{100 * avg.r2.f1:.2f}/{100 * avg.rl.f1:.2f}")
            lines.append(line)
        widths = [max(len(r[c]) for r in lines) for c in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines) + "\n"


def eval_grid(model, corpus, vocab, vision, directions, beam=BeamConfig(), outputs=None):
    """Score every requested direction; ``outputs`` (a list) collects generated summaries."""
    corpus.check_directions(directions)
    cells = {}
    for direction in directions:
        reports = []
        for rec, cand, ref in generate_direction(model, corpus, vocab, vision, direction, beam):
            reports.append(RougeReport.of(cand, ref))
            if outputs is not None:
                outputs.append({"id": rec.id, "src": direction[0], "tgt": direction[1],
                                "summary": " ".join(vocab.id_to_token(i) for i in cand),
                                "reference": " ".join(vocab.id_to_token(i) for i in ref)})
        cells[tuple(direction)] = mean_report(reports)
    langs = list(dict.fromkeys([d[0] for d in directions] + [d[1] for d in directions]))
    ordered = [L for L in vocab.langs if L in langs]
    return Grid(cells=cells, langs=ordered)


def exact_match_rate(model, corpus, vocab, vision, directions, beam=BeamConfig(beam_size=1)):
    hits = total = 0
    for d in directions:
        for _, cand, ref in generate_direction(model, corpus, vocab, vision, d, beam):
            hits += cand == ref
            total += 1
    return hits / max(total, 1), hits, total


def summarize_scores(grid, cross_only=True):
    vals = [rep.r1.f1 for (s, t), rep in grid.cells.items() if not (cross_only and s == t)]
    return float(np.mean(vals)) if vals else math.nan
