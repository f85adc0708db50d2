"""featx command line.

    featx extract --items manifest.json --images DIR --dict words.txt \
                  --n 15 --out store.bin [--backend models|hashed]
    featx fetch-models

`extract` reads a JSON-lines manifest (item_id, sentences[],
image_paths[]) and writes the consumer's binary feature-store format.
The default backend needs pretrained weights; run `featx fetch-models`
once with network access, or use `--backend hashed` for a deterministic
offline stand-in.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from .embedders import fetch_models, make_backend
from .records import ManifestError, load_manifest
from .store import StoreFormatError
from .tokens import TokenDictionary


def default_dictionary_words() -> list[str]:
    text = resources.files("featx").joinpath("words.txt").read_text(encoding="utf-8")
    return [w.strip() for w in text.splitlines() if w.strip()]


def cmd_extract(args) -> int:
    records = load_manifest(args.items)
    embedder, scorer = make_backend(args.backend)
    if args.dict is not None:
        words = [w.strip() for w in Path(args.dict).read_text(encoding="utf-8").splitlines() if w.strip()]
    else:
        words = default_dictionary_words()
    dictionary = TokenDictionary.from_words(words, scorer)
    from .extract import build_feature_store

    size = build_feature_store(
        records, dictionary, args.n, args.out, embedder, scorer, image_root=args.images
    )
    print(f"extract: {len(records)} items, dictionary {len(dictionary)} words, "
          f"top-{args.n} tokens per image -> {args.out} ({size} bytes)")
    return 0


def cmd_fetch_models(args) -> int:
    fetch_models()
    print("fetch-models: pretrained weights cached")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="build a feature-store file")
    p.add_argument("--items", required=True, help="JSON-lines item manifest")
    p.add_argument("--images", help="base directory for relative image paths")
    p.add_argument("--dict", help="word list file (default: bundled list)")
    p.add_argument("--n", type=int, default=15, help="tokens kept per image")
    p.add_argument("--out", required=True, help="output store path")
    p.add_argument("--backend", choices=("models", "hashed"), default="models")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("fetch-models", help="download pretrained weights")
    p.set_defaults(fn=cmd_fetch_models)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ManifestError, StoreFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ImportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
