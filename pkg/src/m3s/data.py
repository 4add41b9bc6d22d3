"""Corpus records, toy tokenizer, batching and the synthetic corpus generator.

On disk a corpus is JSON lines, one article per line::

    {"id": ..., "url": ..., "lang": ..., "doc": ..., "summary": ...,
     "aligned": {lang: doc, ...}, "vision_ref": ...}

``aligned`` holds the same article (matched by URL) in other languages, and
every language version of an article points at one vision record.
"""

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from m3s.errors import ConfigError, DataError
from m3s.model import VisionBatch

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_SPECIAL = 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
DEFAULT_LANGS = ("en", "id", "ru", "ur")

VISION_MAGIC = b"M3SV"
VISION_VERSION = 1


# ------------------------------------------------------------------ records

@dataclass
class Record:
    id: str
    url: str
    lang: str
    doc: str
    summary: str
    aligned: dict = field(default_factory=dict)
    vision_ref: str = ""

    def to_json(self):
        return json.dumps({"id": self.id, "url": self.url, "lang": self.lang, "doc": self.doc,
                           "summary": self.summary, "aligned": dict(sorted(self.aligned.items())),
                           "vision_ref": self.vision_ref}, ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(id=str(d["id"]), url=str(d["url"]), lang=str(d["lang"]), doc=d["doc"],
                       summary=d["summary"], aligned=dict(d.get("aligned") or {}),
                       vision_ref=str(d.get("vision_ref", "")))
        except KeyError as exc:
            raise DataError(f"corpus record missing field {exc}") from None


def write_corpus(records, path):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_corpus(path):
    records = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(Record.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


class Corpus:
    """Records indexed by URL and language."""

    def __init__(self, records):
        self.records = list(records)
        self.by_url = {}
        for r in self.records:
            self.by_url.setdefault(r.url, {})[r.lang] = r
        self.urls = sorted(self.by_url)
        seen = []
        for r in self.records:
            if r.lang not in seen:
                seen.append(r.lang)
        self.langs = seen

    def __len__(self):
        return len(self.records)

    def source_text(self, url, src_lang, tgt_lang):
        rec = self.by_url[url][tgt_lang]
        if src_lang == tgt_lang:
            return rec.doc
        if src_lang in rec.aligned:
            return rec.aligned[src_lang]
        raise DataError(f"sample {rec.id}: no aligned {src_lang} document for direction {src_lang}->{tgt_lang}")

    def urls_for(self, direction):
        """URLs that can serve ``(src, tgt)``: target summary and aligned source both present."""
        src, tgt = direction
        out = []
        for u in self.urls:
            rec = self.by_url[u].get(tgt)
            if rec is not None and (src == tgt or src in rec.aligned):
                out.append(u)
        return out

    def check_directions(self, directions):
        for src, tgt in directions:
            missing = [self.by_url[u][tgt].id for u in self.urls
                       if tgt in self.by_url[u] and src != tgt and src not in self.by_url[u][tgt].aligned]
            if not self.urls_for((src, tgt)):
                raise DataError(f"direction {src}->{tgt}: no sample provides it")
            if missing:
                raise DataError(f"direction {src}->{tgt}: missing alignment for samples {missing[:5]}")


# ------------------------------------------------------------------ vocab

class Vocab:
    """Reserved ids, then one tag per language, then corpus tokens."""

    def __init__(self, tokens, langs):
        if len(langs) < 2:
            raise ConfigError("need at least two languages")
        self.langs = list(langs)
        self.tokens = list(tokens)
        self.offset = N_SPECIAL + len(self.langs)
        self.index = {t: i + self.offset for i, t in enumerate(self.tokens)}

    def __len__(self):
        return self.offset + len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.langs == other.langs

    def lang_id(self, lang):
        try:
            return N_SPECIAL + self.langs.index(lang)
        except ValueError:
            raise DataError(f"unknown language {lang!r}") from None

    def id_to_token(self, i):
        if i < N_SPECIAL:
            return SPECIAL_TOKENS[i]
        if i < self.offset:
            return f"<2{self.langs[i - N_SPECIAL]}>"
        return self.tokens[i - self.offset]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, langs):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, langs)


def build_vocab(texts, langs, max_size=None):
    """Frequency-ranked token list (ties lexicographic); overflow maps to UNK."""
    counts = Counter()
    for t in texts:
        counts.update(t.lower().split())
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(ranked, langs)


def corpus_texts(records):
    for r in records:
        yield r.doc
        yield r.summary
        yield from r.aligned.values()


def tokenize(text, vocab):
    return [vocab.index.get(w, UNK) for w in text.lower().split()] + [EOS]


def detokenize(ids, vocab):
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.id_to_token(int(i)))
    return " ".join(words)


def strip_special(ids):
    """Token ids up to (not including) the first EOS, without PAD/BOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(i)
    return out


# ------------------------------------------------------------------ vision file

def write_vision(records, path):
    """``records``: iterable of (id, features n x m x d_v, boxes n x m x 4, mask n x m)."""
    with Path(path).open("wb") as f:
        f.write(VISION_MAGIC + struct.pack("<I", VISION_VERSION))
        for rid, feats, boxes, mask in records:
            key = rid.encode("utf-8")
            n, m, dv = feats.shape
            f.write(struct.pack("<I", len(key)) + key + struct.pack("<III", n, m, dv))
            f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(boxes, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(mask, dtype="u1").tobytes())


def read_vision(path):
    """Vision file -> {id: (features, boxes, mask)}."""
    buf = Path(path).read_bytes()
    if buf[:4] != VISION_MAGIC:
        raise DataError(f"{path}: not a vision feature file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VISION_VERSION:
        raise DataError(f"{path}: unsupported vision file version {version}")
    pos, out = 8, {}

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise DataError(f"{path}: truncated vision file")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(buf):
        (klen,) = struct.unpack("<I", take(4))
        rid = take(klen).decode("utf-8")
        n, m, dv = struct.unpack("<III", take(12))
        feats = np.frombuffer(take(4 * n * m * dv), dtype="<f4").reshape(n, m, dv).astype(np.float32)
        boxes = np.frombuffer(take(4 * n * m * 4), dtype="<f4").reshape(n, m, 4).astype(np.float32)
        mask = np.frombuffer(take(n * m), dtype="u1").reshape(n, m).copy()
        out[rid] = (feats, boxes, mask)
    return out


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    direction: tuple
    ids: list
    src_ids: np.ndarray
    src_mask: np.ndarray
    teacher_src_ids: np.ndarray  # same articles in the target language
    teacher_src_mask: np.ndarray
    tgt_ids: np.ndarray
    tgt_mask: np.ndarray
    dec_in: np.ndarray
    vision: VisionBatch

    def __len__(self):
        return len(self.ids)


def _pad(seqs, length):
    arr = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=np.int8)
    for k, s in enumerate(seqs):
        arr[k, :len(s)] = s
        mask[k, :len(s)] = 1
    return arr, mask


def encode_source(text, tgt_lang, vocab, max_len):
    """Target-language tag, then the document, head-truncated."""
    return ([vocab.lang_id(tgt_lang)] + tokenize(text, vocab))[:max_len]


def encode_target(text, vocab, max_len):
    ids = tokenize(text, vocab)
    if len(ids) > max_len:
        ids = ids[:max_len - 1] + [EOS]
    return ids


def stack_vision(vision, refs, cfg):
    """Pad/truncate stored image sequences to the configured n x m layout."""
    n, m, dv = cfg.n_images, cfg.n_regions, cfg.d_vision
    B = len(refs)
    feats = np.zeros((B, n, m, dv), dtype=np.float32)
    boxes = np.zeros((B, n, m, 4), dtype=np.float32)
    mask = np.zeros((B, n, m), dtype=np.int8)
    for k, ref in enumerate(refs):
        try:
            f, b, msk = vision[ref]
        except KeyError:
            raise DataError(f"vision record {ref!r} not found") from None
        if f.shape[2] != dv:
            raise DataError(f"vision record {ref!r}: feature width {f.shape[2]} != {dv}")
        nn, mm = min(n, f.shape[0]), min(m, f.shape[1])
        feats[k, :nn, :mm] = f[:nn, :mm]
        boxes[k, :nn, :mm] = b[:nn, :mm]
        mask[k, :nn, :mm] = msk[:nn, :mm]
    return VisionBatch(feats, boxes, mask)


def make_batch(corpus, urls, direction, vocab, vision, cfg):
    """Student inputs for ``direction`` = (src, tgt) plus the aligned teacher inputs."""
    src_lang, tgt_lang = direction
    src, teacher, tgt, refs, ids = [], [], [], [], []
    for u in urls:
        langs = corpus.by_url[u]
        if tgt_lang not in langs:
            raise DataError(f"url {u}: no {tgt_lang} record")
        rec = langs[tgt_lang]
        src.append(encode_source(corpus.source_text(u, src_lang, tgt_lang), tgt_lang, vocab, cfg.max_src_len))
        teacher.append(encode_source(rec.doc, tgt_lang, vocab, cfg.max_src_len))
        tgt.append(encode_target(rec.summary, vocab, cfg.max_tgt_len))
        refs.append(rec.vision_ref)
        ids.append(rec.id)
    M = max(len(s) for s in src + teacher)
    N = max(len(t) for t in tgt)
    src_ids, src_mask = _pad(src, M)
    t_ids, t_mask = _pad(teacher, M)
    tgt_ids, tgt_mask = _pad(tgt, N)
    dec_in = np.full_like(tgt_ids, PAD)
    dec_in[:, 0] = BOS
    dec_in[:, 1:] = tgt_ids[:, :-1]
    return Batch(direction=tuple(direction), ids=ids, src_ids=src_ids, src_mask=src_mask,
                 teacher_src_ids=t_ids, teacher_src_mask=t_mask, tgt_ids=tgt_ids, tgt_mask=tgt_mask,
                 dec_in=dec_in, vision=stack_vision(vision, refs, cfg))


# ------------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    langs: tuple = DEFAULT_LANGS
    n_articles: int = 8  # one article covers every ordered language pair
    n_test: int = 0
    latent_vocab: int = 16
    doc_len: tuple = (6, 10)
    summary_len: tuple = (3, 4)
    n_images: int = 2
    n_regions: int = 3
    d_vision: int = 16
    noise: float = 0.1


def synth_corpus(cfg):
    """Deterministic URL-aligned toy corpus with informative region features.

    Each article is a latent token sequence; language L renders latent token k
    as the word ``f"{L}{perm_L[k]:02d}"`` (a per-language bijection). The gold
    summary is the first few latent tokens. Region features are a fixed random
    embedding of one latent token each: summary tokens first, then other
    document tokens as distractors, plus noise; unused slots are masked.

    Returns (train records, test records, vision dict).
    """
    if len(cfg.langs) < 2:
        raise ConfigError("synthetic corpus needs at least two languages")
    rng = np.random.default_rng(cfg.seed)
    V = cfg.latent_vocab
    perms = {L: rng.permutation(V) for L in cfg.langs}
    probe = rng.normal(size=(V, cfg.d_vision)).astype(np.float32)
    slots = cfg.n_images * cfg.n_regions

    def render(lang, latent):
        return " ".join(f"{lang}{perms[lang][k]:02d}" for k in latent)

    records, vision = [], {}
    total = cfg.n_articles + cfg.n_test
    for a in range(total):
        n_doc = int(rng.integers(cfg.doc_len[0], cfg.doc_len[1] + 1))
        n_sum = int(rng.integers(cfg.summary_len[0], min(cfg.summary_len[1], n_doc) + 1))
        latent = rng.integers(0, V, size=n_doc)
        summary = latent[:n_sum]
        shown = list(summary) + list(latent[n_sum:])
        used = min(slots, len(shown), max(n_sum, int(rng.integers(n_sum, slots + 1))))
        feats = np.zeros((slots, cfg.d_vision), dtype=np.float32)
        mask = np.zeros(slots, dtype=np.uint8)
        order = rng.permutation(slots)[:used]
        for k, slot in enumerate(order):
            feats[slot] = probe[shown[k]] + cfg.noise * rng.normal(size=cfg.d_vision)
            mask[slot] = 1
        boxes = np.sort(rng.uniform(0.0, 1.0, size=(slots, 2, 2)), axis=1).reshape(slots, 4)
        boxes = boxes * mask[:, None]
        url = f"synth://article/{a:05d}"
        vref = f"v{a:05d}"
        vision[vref] = (feats.reshape(cfg.n_images, cfg.n_regions, -1),
                        boxes.astype(np.float32).reshape(cfg.n_images, cfg.n_regions, 4),
                        mask.reshape(cfg.n_images, cfg.n_regions))
        docs = {L: render(L, latent) for L in cfg.langs}
        for L in cfg.langs:
            records.append(Record(id=f"{a:05d}-{L}", url=url, lang=L, doc=docs[L],
                                  summary=render(L, summary),
                                  aligned={o: docs[o] for o in cfg.langs if o != L}, vision_ref=vref))
    split = cfg.n_articles * len(cfg.langs)
    return records[:split], records[split:], vision


def directions_for(langs, cross_only=False):
    return [(s, t) for t in langs for s in langs if not (cross_only and s == t)]
