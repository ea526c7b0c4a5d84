"""Command-line entry point: ``m3p <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import collate, detokenize, load_corpus_dir, load_image, make_sample
from .evaluate import dump_attention, evaluate_bleu, export_embeddings, masked_source_eval
from .model import ablate_vision
from .toydata import generate_toy_corpus
from .train import load_model, train


def _single_sample(args, vocab, cfg, src: str = ""):
    image = load_image(args.image, Path.cwd())
    src_lang = getattr(args, "src_lang", None) or args.tgt_lang
    return make_sample(src, "", src_lang, args.tgt_lang, image, vocab, cfg.data.patch_size)


def cmd_gen_toy_data(args) -> int:
    meta = generate_toy_corpus(args.out, langs=args.langs, size=args.size, img=args.img, patch=args.patch,
                               seed=args.seed, test_size=args.test_size)
    print(f"wrote {meta['size']} train / {meta['test_size']} test scenes in {len(meta['langs'])} languages "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    result = train(cfg, Path(args.out) if args.out else None)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"steps": len(result.metrics), "final": last, "evals": result.evals,
                      "checkpoint": str(result.checkpoint)}))
    return 0


def cmd_translate(args) -> int:
    model, vocab, cfg = load_model(args.ckpt)
    sample = _single_sample(args, vocab, cfg, args.src)
    batch = collate([sample], vocab)
    ids = model.greedy_translate(batch, args.max_len, "fused")[0]
    print(detokenize(ids, vocab))
    if args.dump_attn:
        attn = model.fusion.last_attention
        if attn is None:
            raise SystemExit(f"fusion '{cfg.model.fusion}' has no attention map to dump")
        words = [vocab.tokens[t] for t in sample.src_tokens]
        dump_attention(attn[0], words, args.dump_attn)
    return 0


def cmd_caption(args) -> int:
    model, vocab, cfg = load_model(args.ckpt)
    batch = collate([_single_sample(args, vocab, cfg)], vocab)
    print(detokenize(model.greedy_translate(batch, args.max_len, "caption")[0], vocab))
    return 0


def cmd_eval(args) -> int:
    model, vocab, cfg = load_model(args.ckpt)
    if args.ablate_vision:
        model = ablate_vision(model)
    test_dir = Path(args.test) if args.test else cfg.data_paths()[1]
    samples = load_corpus_dir(test_dir, vocab, cfg.data.patch_size).all_samples()
    if args.limit:
        samples = samples[: args.limit]
    if args.mask_ratio is None:
        bleu = evaluate_bleu(model, samples, vocab, args.mode, args.max_len)
        print(json.dumps({"mode": args.mode, "samples": len(samples), "bleu": bleu}))
    else:
        res = masked_source_eval(model, samples, vocab, [args.mask_ratio], args.mode, args.seed, args.max_len)
        print(json.dumps({"mode": args.mode, "samples": len(samples), "mask_ratio": args.mask_ratio,
                          "bleu": res[float(args.mask_ratio)]}))
    return 0


def cmd_export_embeddings(args) -> int:
    model, vocab, cfg = load_model(args.ckpt)
    corpus_dir = Path(args.corpus) if args.corpus else cfg.data_paths()[1]
    samples = load_corpus_dir(corpus_dir, vocab, cfg.data.patch_size).all_samples()
    n = export_embeddings(model, samples, vocab, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3p", description="Multilingual multimodal translation at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy-data", help="write the synthetic scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--langs", type=int, default=4)
    p.add_argument("--size", type=int, default=200, help="training scenes")
    p.add_argument("--test-size", type=int, default=None, help="held-out scenes (default size/5)")
    p.add_argument("--img", type=int, default=32)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--seed", type=int, default=17)
    p.set_defaults(func=cmd_gen_toy_data)

    p = sub.add_parser("train", help="train from a TOML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override train.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one sentence with its image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--image", required=True, help="PPM path or base64:<data>")
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--dump-attn", default=None, help="CSV path for the fusion attention map")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("caption", help="describe an image in the target language")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="corpus BLEU on a test directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", default=None, help="directory of *.jsonl corpora (default: config test dir)")
    p.add_argument("--mode", choices=["translate", "caption"], default="translate")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--ablate-vision", action="store_true", help="zero the fusion output projection first")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="pooled sentence embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", default=None, help="directory of *.jsonl corpora (default: config test dir)")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
