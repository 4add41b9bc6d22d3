"""Command-line entry point: ``m3s <subcommand> ...``."""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from m3s import __version__
from m3s.data import (DEFAULT_LANGS, Corpus, SynthConfig, Vocab, build_vocab, corpus_texts, directions_for,
                      read_corpus, read_vision, synth_corpus, write_corpus, write_vision)
from m3s.errors import ConfigError, DataError, M3SError
from m3s.inference import BeamConfig, eval_grid
from m3s.model import ModelConfig
from m3s.training import TrainConfig, load_checkpoint, new_state, read_checkpoint, save_checkpoint, train

log = logging.getLogger("m3s")


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get("M3S_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"M3S_SEED must be an integer, got {env!r}") from None
    return 0


def _langs(value):
    """``"4"`` -> the first four default tags; ``"en,fr"`` -> explicit tags."""
    if value.isdigit():
        k = int(value)
        tags = list(DEFAULT_LANGS) + [f"l{i}" for i in range(len(DEFAULT_LANGS), k)]
        langs = tags[:k]
    else:
        langs = [s.strip() for s in value.split(",") if s.strip()]
    if len(langs) < 2:
        raise ConfigError("at least two languages are required (K >= 2)")
    if len(set(langs)) != len(langs):
        raise ConfigError(f"duplicate language tags in {value!r}")
    return langs


def _directions(value, langs):
    if not value or value == "all":
        return directions_for(langs)
    if value == "cross":
        return directions_for(langs, cross_only=True)
    out = []
    for item in value.split(","):
        try:
            s, t = item.strip().split("-")
        except ValueError:
            raise ConfigError(f"bad direction {item!r}; expected src-tgt") from None
        for L in (s, t):
            if L not in langs:
                raise DataError(f"direction {item}: language {L!r} not in {langs}")
        out.append((s, t))
    return out


def _write_manifest(out_dir, manifest):
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_config_file(path):
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(cfg) - {"model", "train", "beam"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return cfg


# ------------------------------------------------------------------ commands

def cmd_synth_data(args):
    langs = _langs(args.langs)
    cfg = SynthConfig(seed=_seed(args.seed), langs=tuple(langs), n_articles=args.per_pair, n_test=args.test,
                      latent_vocab=args.latent_vocab, n_images=args.images, n_regions=args.regions,
                      d_vision=args.d_vision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_recs, test_recs, vision = synth_corpus(cfg)
    write_corpus(train_recs, out / "train.jsonl")
    write_corpus(test_recs, out / "test.jsonl")
    write_vision([(k, *v) for k, v in vision.items()], out / "vision.bin")
    corpus = Corpus(train_recs)
    for d in directions_for(langs):
        print(f"{d[0]}->{d[1]}: {len(corpus.urls_for(d))}")
    _write_manifest(out, {"command": "synth-data", "synth": {**cfg.__dict__, "langs": list(cfg.langs)},
                          "outputs": ["train.jsonl", "test.jsonl", "vision.bin"]})
    return 0


def cmd_build_vocab(args):
    records = read_corpus(args.corpus)
    corpus = Corpus(records)
    vocab = build_vocab(corpus_texts(records), corpus.langs, args.max_size)
    vocab.save(args.out)
    print(f"{len(vocab.tokens)} tokens (+{vocab.offset} reserved) -> {args.out}")
    return 0


def _resolve_train(args, file_cfg, vocab):
    tdict = dict(file_cfg.get("train", {}))
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"),
                      ("anneal_horizon", "anneal_horizon"), ("beta", "beta"), ("tau", "tau"),
                      ("eval_interval", "eval_interval"), ("kd_mode", "kd_mode")):
        val = getattr(args, flag, None)
        if val is not None:
            tdict[key] = val
    tdict["seed"] = _seed(args.seed if args.seed is not None else tdict.get("seed"))
    if "steps" in tdict and "anneal_horizon" not in tdict:
        tdict["anneal_horizon"] = max(1, tdict["steps"] // 2)
    tcfg = TrainConfig.from_dict(tdict)
    mdict = dict(file_cfg.get("model", {}))
    mdict["vocab_size"] = len(vocab)
    mdict["n_langs"] = len(vocab.langs)
    return ModelConfig.from_dict(mdict), tcfg


def cmd_train(args):
    data = Path(args.data)
    out = Path(args.out)
    file_cfg = _load_config_file(args.config)
    records = read_corpus(data / "train.jsonl")
    corpus = Corpus(records)
    vision = read_vision(data / "vision.bin")
    vocab_path = data / "vocab.txt"
    if vocab_path.exists():
        vocab = Vocab.load(vocab_path, corpus.langs)
    else:
        vocab = build_vocab(corpus_texts(records), corpus.langs)
        log.info("built vocabulary of %d tokens", len(vocab.tokens))
    corpus.check_directions(directions_for(vocab.langs))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.m3ck"
    metrics = out / "metrics.jsonl"
    if args.resume:
        state = load_checkpoint(args.resume)
        if args.steps is not None:
            state.train_cfg = replace(state.train_cfg, steps=args.steps)
    else:
        mcfg, tcfg = _resolve_train(args, file_cfg, vocab)
        state = new_state(mcfg, tcfg, vocab)
        metrics.write_text("")
    first = next(iter(vision.values()))[0]
    if first.shape[2] != state.model.cfg.d_vision:
        raise ConfigError(f"vision features are {first.shape[2]}-d but d_vision={state.model.cfg.d_vision}")
    _write_manifest(out, {"command": "train", "model": state.model.cfg.to_dict(),
                          "train": state.train_cfg.to_dict(), "beam": BeamConfig().__dict__,
                          "inputs": {"data": str(data), "resume": args.resume, "config": args.config},
                          "seed": state.train_cfg.seed,
                          "outputs": [str(ckpt), str(metrics)]})

    def progress(line):
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in line.items()),
              flush=True)

    train(state, corpus, vision, metrics_path=metrics, checkpoint_path=ckpt, progress=progress)
    save_checkpoint(state, ckpt)
    print(f"checkpoint -> {ckpt}")
    return 0


def _beam(args, file_cfg=None):
    b = dict((file_cfg or {}).get("beam", {}))
    if args.beam is not None:
        b["beam_size"] = args.beam
    if args.length_penalty is not None:
        b["length_penalty"] = args.length_penalty
    return BeamConfig(**b)


def _inference_inputs(args):
    state = load_checkpoint(args.checkpoint)
    corpus = Corpus(read_corpus(args.corpus))
    vision_path = args.vision or str(Path(args.corpus).with_name("vision.bin"))
    vision = read_vision(vision_path)
    directions = _directions(args.directions, state.vocab.langs)
    corpus.check_directions(directions)
    return state, corpus, vision, directions, vision_path


def cmd_generate(args):
    state, corpus, vision, directions, vision_path = _inference_inputs(args)
    beam = _beam(args)
    outputs = []
    eval_grid(state.model, corpus, state.vocab, vision, directions, beam, outputs=outputs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(o, ensure_ascii=False) + "\n" for o in outputs), encoding="utf-8")
    _write_manifest(out.parent, {"command": "generate", "beam": beam.__dict__, "model": state.model.cfg.to_dict(),
                                 "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus,
                                            "vision": vision_path},
                                 "directions": [f"{s}-{t}" for s, t in directions],
                                 "seed": state.train_cfg.seed, "outputs": [str(out)]})
    print(f"{len(outputs)} summaries -> {out}")
    return 0


def cmd_evaluate(args):
    state, corpus, vision, directions, vision_path = _inference_inputs(args)
    beam = _beam(args)
    outputs = []
    grid = eval_grid(state.model, corpus, state.vocab, vision, directions, beam, outputs=outputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.txt").write_text(grid.table(), encoding="utf-8")
    (out / "grid.jsonl").write_text(grid.jsonl(), encoding="utf-8")
    (out / "summaries.jsonl").write_text(
        "".join(json.dumps(o, ensure_ascii=False) + "\n" for o in outputs), encoding="utf-8")
    _write_manifest(out, {"command": "evaluate", "beam": beam.__dict__, "model": state.model.cfg.to_dict(),
                          "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus, "vision": vision_path},
                          "directions": [f"{s}-{t}" for s, t in directions],
                          "seed": state.train_cfg.seed,
                          "outputs": ["grid.txt", "grid.jsonl", "summaries.jsonl"]})
    print(grid.table(), end="")
    return 0


def cmd_inspect(args):
    header, tensors = read_checkpoint(args.checkpoint)
    print(f"format {header.get('format')}  step {header.get('step')}  activation {header.get('activation')}")
    print(f"langs {','.join(header.get('langs', []))}  vocab {len(header.get('vocab', []))} tokens")
    print("model " + json.dumps(header.get("model"), sort_keys=True))
    print("train " + json.dumps(header.get("train"), sort_keys=True))
    n_params = 0
    for name, arr in tensors.items():
        if not name.startswith("adam."):
            n_params += arr.size
            if args.verbose:
                print(f"  {name:28s} {'x'.join(map(str, arr.shape))}")
    print(f"{n_params} parameters in {sum(not k.startswith('adam.') for k in tensors)} tensors")
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="m3s", description="Many-to-many multimodal summarization toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic aligned corpus with region features")
    s.add_argument("--seed", type=int)
    s.add_argument("--langs", default="4", help="language count K or comma-separated tags")
    s.add_argument("--per-pair", type=int, default=8, help="training articles per direction")
    s.add_argument("--test", type=int, default=0, help="held-out articles")
    s.add_argument("--latent-vocab", type=int, default=16)
    s.add_argument("--images", type=int, default=2)
    s.add_argument("--regions", type=int, default=3)
    s.add_argument("--d-vision", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("build-vocab", help="build a frequency-ranked vocabulary")
    s.add_argument("--corpus", required=True)
    s.add_argument("--max-size", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("train", help="train on a data directory")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--anneal-horizon", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--kd-mode", choices=("cosine", "kl"))
    s.add_argument("--eval-interval", type=int)
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("generate", cmd_generate, "write generated summaries"),
                              ("evaluate", cmd_evaluate, "score a direction grid with ROUGE")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--vision")
        s.add_argument("--directions", default="all", help="all, cross, or e.g. en-en,ru-en")
        s.add_argument("--beam", type=int)
        s.add_argument("--length-penalty", type=float)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("inspect-checkpoint", help="print a checkpoint header and tensor table")
    s.add_argument("checkpoint")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (M3SError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
