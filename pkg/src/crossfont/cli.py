"""Command-line entry point: generate / train / embed / eval / serve / ablate.

Every command takes an optional --config TOML file (keys mirror TrainConfig
fields) plus repeatable --set KEY=VALUE overrides; overrides win. Exit codes:
0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import TrainConfig, desk_config, load_config, parse_override
from .data import load_manifest, split_by_class, synth_generate
from .errors import ConfigError, ContractViolation, ManifestError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _resolve_config(args) -> TrainConfig:
    overrides = dict(parse_override(s) for s in (args.set or []))
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        base = desk_config().to_dict() if args.preset == "desk" else TrainConfig().to_dict()
        base.update(overrides)
        cfg = TrainConfig.from_dict(base)
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    cfg.validate()
    return cfg


def _split_for(manifest, cfg: TrainConfig):
    return split_by_class(manifest, cfg.holdout_fraction, cfg.seed)


def cmd_generate(args) -> int:
    manifest = synth_generate(args.classes, args.per_font, args.seed, args.out,
                              image_size=args.size)
    print(f"wrote {len(manifest.entries)} images across {manifest.class_count} classes "
          f"to {args.out} (manifest checksum {manifest.checksum[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    split = _split_for(manifest, cfg)
    result = train(cfg, manifest, split, args.out)
    print(f"trained {cfg.epochs} epochs; final checkpoint {result.checkpoint_path} "
          f"(hash {result.final_hash[:12]})")
    if result.counters.skipped_classes:
        print(f"warning: {result.counters.skipped_classes} class(es) lacked one font role",
              file=sys.stderr)
    return EXIT_OK


def cmd_embed(args) -> int:
    from .model import load_checkpoint
    from .retrieval import extract_embeddings, write_embeddings

    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    entries = [e for e in manifest.entries if args.font is None or e.font_id == args.font]
    if not entries:
        raise ManifestError(f"manifest has no {args.font!r} entries")
    records, skipped = extract_embeddings(checkpoint.model, manifest, entries)
    if skipped:
        print(f"warning: skipped {len(skipped)} unreadable image(s)", file=sys.stderr)
    write_embeddings(args.out, records)
    print(f"wrote {len(records)} embeddings (dim {records[0].vector.shape[0]}) to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import ClassSplit
    from .model import load_checkpoint
    from .retrieval import evaluate

    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    known = frozenset(checkpoint.class_vocab)
    test = frozenset(manifest.class_ids()) - known
    if not test:
        raise ManifestError("manifest has no classes outside the checkpoint's training "
                            "vocabulary; nothing to evaluate zero-shot")
    split = ClassSplit(train_classes=known, test_classes=test,
                       seed=checkpoint.config.seed)
    report = evaluate(checkpoint.model, manifest, split)
    print(report.table(os.path.basename(args.checkpoint)))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        print(f"report written to {args.report}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    port = int(os.environ.get("CROSSFONT_PORT", args.port))
    threads = os.environ.get("CROSSFONT_THREADS")
    labels = None
    if args.labels:
        with open(args.labels, "r", encoding="utf-8") as f:
            labels = {int(k): str(v) for k, v in json.load(f).items()}
    serve(args.checkpoint, args.gallery, host=args.host, port=port, labels=labels,
          threads=int(threads) if threads else None)
    return EXIT_OK


ABLATION_ROWS = {
    "components": [
        ("full", {}),
        ("no_mfi", {"mfi_enabled": False}),
        ("encoder_only", {"mfi_enabled": False, "mrc_enabled": False}),
    ],
    "resolutions": [
        ("scales_0.5_1.0", {"scales": (0.5, 1.0)}),
        ("scales_1.0_2.0", {"scales": (1.0, 2.0)}),
        ("scales_0.5_2.0", {"scales": (0.5, 2.0)}),
    ],
}


def run_ablation(base: TrainConfig, manifest, rows, out_dir: str) -> list[dict]:
    """Train + evaluate each toggle row; failures mark the row, others continue."""
    from .retrieval import evaluate
    from .train import train

    results = []
    for name, overrides in rows:
        row_dir = os.path.join(out_dir, name)
        row = {"name": name, "overrides": {k: list(v) if isinstance(v, tuple) else v
                                           for k, v in overrides.items()}}
        try:
            cfg_dict = base.to_dict()
            for k, v in overrides.items():
                cfg_dict[k] = list(v) if isinstance(v, tuple) else v
            cfg = TrainConfig.from_dict(cfg_dict)
            split = _split_for(manifest, cfg)
            trained = train(cfg, manifest, split, row_dir)
            report = evaluate(trained.model, manifest, split)
            row.update({"status": "ok", "metrics": report.to_dict()})
        except Exception as e:  # row failure must not sink the matrix
            row.update({"status": "failed", "error": f"{type(e).__name__}: {e}"})
        results.append(row)
    return results


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'Row':<16}  Recall@1  Recall@5  Recall@10  Recall@1%  AP"]
    for row in rows:
        if row["status"] != "ok":
            lines.append(f"{row['name']:<16}  FAILED ({row['error']})")
            continue
        m = row["metrics"]
        lines.append(f"{row['name']:<16}  {m['recall_at_1'] * 100:8.2f}  "
                     f"{m['recall_at_5'] * 100:8.2f}  {m['recall_at_10'] * 100:9.2f}  "
                     f"{m['recall_at_1pct'] * 100:9.2f}  {m['ap'] * 100:5.2f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    rows = ABLATION_ROWS[args.matrix]
    results = run_ablation(cfg, manifest, rows, args.out)
    table = format_ablation_table(results)
    print(table)
    report_path = os.path.join(args.out, "ablation_report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump({"rows": results}, f, indent=2, sort_keys=True)
    print(f"report written to {report_path}")
    return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossfont",
                                     description="cross-font glyph retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="TOML config file (keys mirror TrainConfig)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override; repeatable, wins over --config")
        p.add_argument("--preset", choices=["paper", "desk"], default="desk",
                       help="base config when no --config is given")

    p = sub.add_parser("generate", help="write a synthetic cross-font dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-font", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64, help="rendered image side length")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a manifest with a class-disjoint split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract embeddings into a binary dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--font", choices=["query", "gallery"],
                   help="restrict to one font role")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="zero-shot retrieval metrics on held-out classes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="write the MetricsReport JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP retrieval service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True, help="embedding dump for the gallery")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--labels", help="JSON file mapping class_id to display label")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ablate", help="run a toggle matrix of train+eval rows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--matrix", choices=sorted(ABLATION_ROWS), default="components")
    add_config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
