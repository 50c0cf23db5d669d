"""Command line front end: extract features, verify CTXF files."""
from __future__ import annotations

import argparse
import sys

from .ctxf import read_ctxf
from .layermap import DEFAULTS, MODEL_NAMES, LayerMap


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssl-extract",
        description="Extract SSL layer features into CTXF teacher files.",
        epilog="Layer indices are 1-based: --phoneme-layer 11 is the 11th "
               "transformer layer. The mel proxy indexes the convolutional "
               "encoder, whose last layer is 7 in base-size models. Defaults: "
               "hubert/wavlm phoneme=11 word=9; wav2vec2 phoneme=6 word=8; "
               "mel_proxy=7.")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="featurize every source in a manifest")
    ex.add_argument("--model", required=True, choices=MODEL_NAMES)
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--layers", default="phoneme,word",
                    help="comma-separated roles: phoneme,word[,mel]")
    ex.add_argument("--out", default=None,
                    help="output directory (default: teachers/ next to the manifest)")
    ex.add_argument("--checkpoint", default=None,
                    help="local path or hub id (default: the base-size checkpoint)")
    ex.add_argument("--phoneme-layer", type=int, default=None,
                    help="override the phoneme transformer layer (1-based)")
    ex.add_argument("--word-layer", type=int, default=None,
                    help="override the word transformer layer (1-based)")
    ex.add_argument("--mel-layer", type=int, default=None,
                    help="override the mel-proxy conv layer (1-based)")
    ex.add_argument("--workers", type=int, default=1)

    vf = sub.add_parser("verify-ctxf", help="validate one CTXF file")
    vf.add_argument("--path", required=True)
    return parser


def _layer_map(args) -> LayerMap | None:
    overrides = (args.phoneme_layer, args.word_layer, args.mel_layer)
    if all(v is None for v in overrides):
        return None
    base = DEFAULTS[args.model]
    return LayerMap(args.model,
                    phoneme_layer=args.phoneme_layer or base.phoneme_layer,
                    word_layer=args.word_layer or base.word_layer,
                    mel_proxy_layer=args.mel_layer or base.mel_proxy_layer)


def cmd_extract(args) -> int:
    from .extract import Extractor, extract_manifest

    roles = tuple(r.strip() for r in args.layers.split(",") if r.strip())
    extractor = Extractor(args.model, checkpoint=args.checkpoint,
                          layer_map=_layer_map(args))
    for line in extractor.header_lines():
        print(line)
    extract_manifest(extractor, args.manifest, roles, out_dir=args.out,
                     workers=args.workers)
    return 0


def cmd_verify(args) -> int:
    rec = read_ctxf(args.path)
    frames, dim = rec.values.shape
    print(f"{args.path}: kind={rec.kind} rate={rec.frame_rate_hz:g} Hz "
          f"shape={frames}x{dim} id={rec.utterance_id!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"extract": cmd_extract, "verify-ctxf": cmd_verify}[args.command]
    try:
        return handler(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
