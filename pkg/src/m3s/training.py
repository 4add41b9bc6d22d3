"""Training loop over sampled direction pairs, Adam, and checkpoint I/O.

Checkpoint layout (little-endian)::

    b"M3CK" | version u32 | header_len u32 | header (JSON, UTF-8)
    per tensor: name_len u32 | name | rank u32 | dims u32[rank] | f32 data
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from m3s import autodiff as ad
from m3s.autodiff import Tensor
from m3s.data import Corpus, Vocab, make_batch
from m3s.errors import CheckpointError, ConfigError, NumericError
from m3s.model import ModelConfig, Summarizer, param_shapes
from m3s.objectives import alpha_schedule, step_objective

log = logging.getLogger(__name__)

CKPT_MAGIC = b"M3CK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    anneal_horizon: int = 1000
    lr: float = 3e-3
    warmup: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.998
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    beta: float = 1.0  # contrastive weight
    tau: float = 0.1
    kd_mode: str = "cosine"
    fixed_alpha: float = -1.0  # >= 0 disables annealing (one-way distillation ablation)
    max_grad_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    eval_interval: int = 100
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.warmup < 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and warmup >= 0 required")
        if self.anneal_horizon <= 0:
            raise ConfigError("anneal_horizon must be positive")
        if self.anneal_horizon > self.steps:
            raise ConfigError(f"anneal_horizon {self.anneal_horizon} exceeds steps {self.steps}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.kd_mode not in ("cosine", "kl"):
            raise ConfigError(f"unknown kd_mode {self.kd_mode!r}")
        if self.fixed_alpha > 1.0:
            raise ConfigError("fixed_alpha must be <= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def alpha(self, step):
        if self.fixed_alpha >= 0:
            return self.fixed_alpha
        return alpha_schedule(step, self.anneal_horizon)


def learning_rate(step, peak, warmup):
    """Linear warmup to ``peak`` at ``warmup`` steps, then inverse-sqrt decay."""
    if warmup == 0:
        return peak / math.sqrt(max(step, 1)) if step > 1 else peak
    if step < warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.998, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainState:
    model: Summarizer
    optimizer: Adam
    train_cfg: TrainConfig
    vocab: Vocab
    step: int = 0
    rng_state: dict = None
    history: list = None


def new_state(model_cfg, train_cfg, vocab):
    model = Summarizer.create(model_cfg, seed=train_cfg.seed)
    opt = Adam(model.params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    rng = np.random.default_rng(train_cfg.seed + 1)
    return TrainState(model=model, optimizer=opt, train_cfg=train_cfg, vocab=vocab, step=0,
                      rng_state=rng.bit_generator.state, history=[])


def cross_pairs(langs):
    return [(j, i) for i in langs for j in langs if j != i]


def train_step(state, corpus, vision, pairs, rng):
    """One update on a sampled ordered pair; returns the loss record."""
    tc = state.train_cfg
    model = state.model
    j, i = pairs[int(rng.integers(len(pairs)))]
    pool = corpus.urls_for((j, i))
    take = min(tc.batch_size, len(pool))
    urls = [pool[k] for k in np.sort(rng.choice(len(pool), size=take, replace=False))]
    batch = make_batch(corpus, urls, (j, i), state.vocab, vision, model.cfg)
    alpha = tc.alpha(state.step)
    lr = learning_rate(state.step, tc.lr, tc.warmup)
    names = list(model.params)
    with ad.Tape() as tape:
        bundle, _, _ = step_objective(model, batch, alpha, tc.beta, tc.tau, tc.kd_mode, tc.label_smoothing)
        grads = tape.gradients(bundle.joint, [model.params[k] for k in names])
    rec = bundle.as_dict()
    if not all(math.isfinite(v) for v in rec.values()):
        raise NumericError("train", f"non-finite loss at step {state.step}, direction {j}->{i}: {rec}")
    grads = dict(zip(names, grads))
    if tc.max_grad_norm > 0:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > tc.max_grad_norm:
            scale = np.float32(tc.max_grad_norm / norm)
            grads = {k: g * scale for k, g in grads.items()}
    state.optimizer.step(grads, lr)
    rec.update(step=state.step, lr=lr, src=j, tgt=i)
    state.step += 1
    return rec


def train(state, corpus, vision, until=None, metrics_path=None, checkpoint_path=None, progress=None):
    """Advance ``state`` to step ``until`` (default: the configured total).

    Metrics are appended as JSON lines every ``eval_interval`` steps;
    checkpoints are written at the same cadence and at the end.
    """
    tc = state.train_cfg
    until = tc.steps if until is None else until
    langs = state.vocab.langs
    corpus.check_directions(cross_pairs(langs) + [(L, L) for L in langs])
    pairs = cross_pairs(langs)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    mf = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < until:
            rec = train_step(state, corpus, vision, pairs, rng)
            state.history.append(rec["joint"])
            state.rng_state = rng.bit_generator.state
            if state.step % tc.eval_interval == 0 or state.step == until:
                line = {k: rec[k] for k in ("step", "alpha", "l_mms", "l_mxls", "l_kd_ts", "l_kd_st",
                                           "l_tco", "joint", "lr")}
                line["step"] = state.step
                if mf:
                    mf.write(json.dumps(line) + "\n")
                    mf.flush()
                if progress:
                    progress(line)
                if checkpoint_path:
                    save_checkpoint(state, checkpoint_path)
    finally:
        if mf:
            mf.close()
    return state


# ------------------------------------------------------------------ checkpoints

def _header(state):
    return {
        "format": CKPT_VERSION,
        "model": state.model.cfg.to_dict(),
        "train": state.train_cfg.to_dict(),
        "step": state.step,
        "activation": state.model.cfg.activation,
        "rng_state": state.rng_state,
        "adam_t": state.optimizer.t,
        "langs": state.vocab.langs,
        "vocab": state.vocab.tokens,
        "history": state.history,
    }


def save_checkpoint(state, path):
    header = json.dumps(_header(state), sort_keys=True, ensure_ascii=False).encode("utf-8")
    tensors = [(k, p.data) for k, p in state.model.params.items()]
    tensors += [(f"adam.m.{k}", a) for k, a in state.optimizer.m.items()]
    tensors += [(f"adam.v.{k}", a) for k, a in state.optimizer.v.items()]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    for name, arr in tensors:
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: float32 array}); validates layout."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    tensors = {}
    while pos < len(buf):
        (klen,) = struct.unpack("<I", take(4, "tensor name"))
        name = take(klen, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    return header, tensors


def load_checkpoint(path):
    """Rebuild a TrainState; nothing is returned unless every tensor checks out."""
    header, tensors = read_checkpoint(path)
    try:
        mcfg = ModelConfig.from_dict(header["model"])
        tcfg = TrainConfig.from_dict(header["train"])
        vocab = Vocab(header["vocab"], header["langs"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from None
    shapes = param_shapes(mcfg)
    expected = list(shapes.items())
    expected += [(f"adam.m.{k}", s) for k, s in shapes.items()]
    expected += [(f"adam.v.{k}", s) for k, s in shapes.items()]
    for name, shape in expected:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, config expects {shape}")
    extra = sorted(set(tensors) - {n for n, _ in expected})
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]}")
    params = {k: Tensor(tensors[k], requires_grad=True, name=k, dtype=np.float32) for k in shapes}
    model = Summarizer(mcfg, params)
    opt = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    opt.m = {k: tensors[f"adam.m.{k}"].copy() for k in shapes}
    opt.v = {k: tensors[f"adam.v.{k}"].copy() for k in shapes}
    opt.t = int(header.get("adam_t", header["step"]))
    return TrainState(model=model, optimizer=opt, train_cfg=tcfg, vocab=vocab, step=int(header["step"]),
                      rng_state=header["rng_state"], history=list(header.get("history", [])))


def with_steps(train_cfg, steps):
    return replace(train_cfg, steps=steps)
