"""Command-line surface: synth | build-cache | train | eval | ablate.

Config precedence is CLI flags > --config file > built-in defaults, and the
resolved config is written next to every output for provenance. All
randomness derives from the --seed flag, so rerunning a subcommand with
identical inputs produces byte-identical artifacts.

Exit codes: 0 success, 2 validation error, 3 format error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adapter import TrainConfig, load_checkpoint, save_checkpoint, train
from .cache_model import build_cache, read_cache, write_cache
from .dataio import (
    BundleGeometry,
    EpisodeSpec,
    LayerGeometry,
    generate_synthetic,
    read_bundle,
    read_manifest,
    sample_episode,
    split_indices,
    write_bundle,
    write_manifest,
)
from .errors import FormatError, ValidationError
from .fusion import BranchWeights, evaluate, result_records

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FORMAT = 3
EXIT_IO = 4

OUT_DIR_ENV = "MFADAPTER_OUT"


def _parse_geometry(spec: str) -> BundleGeometry:
    """Parse '3:2x10x10,4:4x7x7,D:32' into a geometry."""
    layers = {}
    dim = None
    for part in spec.split(","):
        key, _, value = part.partition(":")
        key = key.strip()
        if not value:
            raise ValidationError(f"bad geometry fragment {part!r}")
        if key.upper() == "D":
            dim = int(value)
        else:
            dims = [int(x) for x in value.lower().split("x")]
            if len(dims) != 3:
                raise ValidationError(f"layer geometry needs CxHxW, got {value!r}")
            layers[int(key)] = LayerGeometry(*dims)
    if dim is None:
        raise ValidationError(f"geometry {spec!r} does not define D")
    return BundleGeometry(layers=layers, dim=dim)


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _out_path(args, name):
    path = getattr(args, name)
    if path is None or os.path.isabs(path):
        return path
    base = args.out_dir or os.environ.get(OUT_DIR_ENV) or "."
    return os.path.join(base, path)


def _resolve(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit CLI flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValidationError(f"config file has unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _write_config(cfg: dict, out_path: str) -> None:
    with open(out_path + ".config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _weights_for(branches: str | None, layers) -> BranchWeights | None:
    if branches is None or branches == "all":
        return None
    return BranchWeights.isolate([b.strip() for b in branches.split(",") if b.strip()], layers)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    defaults = {
        "classes": 5,
        "shots": 16,
        "test_per_class": 20,
        "separation": 10.0,
        "seed": 0,
        "geometry": "3:2x10x10,4:4x7x7,D:32",
    }
    cfg = _resolve(args, defaults)
    geometry = _parse_geometry(cfg["geometry"])
    bundle, manifest = generate_synthetic(
        n_classes=cfg["classes"],
        shots=cfg["shots"],
        test_per_class=cfg["test_per_class"],
        geometry=geometry,
        separation=cfg["separation"],
        seed=cfg["seed"],
    )
    out = _out_path(args, "out")
    write_bundle(bundle, out)
    write_manifest(manifest, out + ".manifest.json")
    _write_config(cfg, out)
    print(f"wrote {out}: {len(bundle.items)} items, {bundle.n_classes} classes, D={geometry.dim}")
    for lid in sorted(geometry.layers):
        g = geometry.layers[lid]
        print(f"  layer{lid}: {g.channels}x{g.height}x{g.width}")
    return EXIT_OK


def cmd_build_cache(args) -> int:
    defaults = {"shots": 16, "seed": 0, "scale": 2, "layers": "3,4"}
    cfg = _resolve(args, defaults)
    bundle = read_bundle(args.bundle)
    manifest = read_manifest(args.manifest)
    layers = _parse_int_list(str(cfg["layers"]))
    spec = EpisodeSpec(n_shots=cfg["shots"], seed=cfg["seed"])
    support_idx, _ = sample_episode(bundle, spec, manifest)
    support = bundle.subset(support_idx)
    cache, global_cache = build_cache(support, scale=cfg["scale"], layers=layers)
    out = _out_path(args, "out")
    write_cache(out, cache, global_cache, support.item_ids())
    _write_config(cfg, out)
    print(
        f"wrote {out}: N={cache.n_classes} K={cache.n_shots} NK={cache.labels_onehot.shape[0]} "
        f"scale={cache.scale}"
    )
    for lid in sorted(cache.per_layer_ms):
        print(f"  layer{lid}: ms={cache.per_layer_ms[lid]}")
    return EXIT_OK


def cmd_train(args) -> int:
    defaults = {
        "lr": 1e-4,
        "batch_size": 256,
        "epochs": 100,
        "seed": 0,
        "affinity": "exp",
        "beta": 5.5,
        "branches": "all",
        "warm_start": False,
    }
    cfg = _resolve(args, defaults)
    bundle = read_bundle(args.bundle)
    cache, global_cache, support_ids = read_cache(args.cache)
    if global_cache is None:
        raise ValidationError(f"cache {args.cache} lacks the global branch arrays")
    if support_ids is None:
        raise ValidationError(f"cache {args.cache} does not record its support item ids")
    index_of = {iid: i for i, iid in enumerate(bundle.item_ids())}
    missing = [iid for iid in support_ids if iid not in index_of]
    if missing:
        raise ValidationError(f"bundle lacks support items {missing[:5]} (and possibly more)")
    support = bundle.subset([index_of[iid] for iid in support_ids])

    config = TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        scale=cache.scale,
        layers=cache.layers,
        weights=_weights_for(cfg["branches"], cache.layers),
        affinity=cfg["affinity"],
        affinity_beta=cfg["beta"],
        warm_start=bool(cfg["warm_start"]),
    )
    print(
        f"training: lr={config.lr} batch_size={config.batch_size} epochs={config.epochs} "
        f"seed={config.seed} scale={config.scale} layers={','.join(map(str, config.layers))}"
    )
    result = train(support, cache, global_cache, config)
    out = _out_path(args, "out")
    save_checkpoint(out, result.params, config)
    with open(out + ".loss.json", "w", encoding="utf-8") as fh:
        json.dump(result.loss_history, fh)
        fh.write("\n")
    _write_config(cfg, out)
    if result.loss_history:
        print(f"loss: first={result.loss_history[0]:.6f} last={result.loss_history[-1]:.6f}")
    else:
        print("loss: no epochs run")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    defaults = {
        "seed": 0,
        "split": "test",
        "branches": "all",
        "affinity": "exp",
        "beta": 5.5,
        "format": "text",
    }
    cfg = _resolve(args, defaults)
    if cfg["split"] not in ("test", "support", "all"):
        raise ValidationError(f"--split must be test, support, or all, got {cfg['split']!r}")
    bundle = read_bundle(args.bundle)
    manifest = read_manifest(args.manifest)
    cache, global_cache, _ = read_cache(args.cache)
    if global_cache is None:
        raise ValidationError(f"cache {args.cache} lacks the global branch arrays")
    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    indices = None if cfg["split"] == "all" else split_indices(bundle, manifest, cfg["split"])
    result = evaluate(
        bundle,
        indices,
        cache,
        global_cache,
        params=params,
        weights=_weights_for(cfg["branches"], cache.layers),
        affinity=cfg["affinity"],
        beta=cfg["beta"],
    )

    print(f"items: {result.n_items}")
    print(f"accuracy: {result.accuracy:.4f}")
    for branch, acc in sorted(result.per_branch_accuracy.items()):
        print(f"  {branch}: {acc:.4f}")

    out = _out_path(args, "out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            if cfg["format"] == "jsonl":
                for rec in result_records(result):
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            else:
                fh.write(f"items: {result.n_items}\n")
                fh.write(f"accuracy: {result.accuracy:.4f}\n")
                for branch, acc in sorted(result.per_branch_accuracy.items()):
                    fh.write(f"{branch}: {acc:.4f}\n")
        _write_config(cfg, out)
        print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    defaults = {
        "shots": 16,
        "seed": 0,
        "scales": "1,2,3,4,5",
        "scale": 2,
        "lr": 1e-4,
        "batch_size": 256,
        "epochs": 100,
        "affinity": "exp",
        "beta": 5.5,
    }
    cfg = _resolve(args, defaults)
    bundle = read_bundle(args.bundle)
    manifest = read_manifest(args.manifest)
    spec = EpisodeSpec(n_shots=cfg["shots"], seed=cfg["seed"])
    support_idx, test_idx = sample_episode(bundle, spec, manifest)
    support = bundle.subset(support_idx)

    def run_cell(scale, layers):
        cache, global_cache = build_cache(support, scale=scale, layers=layers)
        config = TrainConfig(
            lr=cfg["lr"],
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            scale=scale,
            layers=layers,
            affinity=cfg["affinity"],
            affinity_beta=cfg["beta"],
        )
        result = train(support, cache, global_cache, config)
        ev = evaluate(
            bundle, test_idx, cache, global_cache, params=result.params,
            affinity=cfg["affinity"], beta=cfg["beta"],
        )
        return ev.accuracy

    scales = _parse_int_list(str(cfg["scales"]))
    scale_row = [(s, run_cell(s, (3, 4))) for s in scales]
    layer_sets = [(3,), (4,), (3, 4)]
    layer_rows = [(ls, run_cell(cfg["scale"], ls)) for ls in layer_sets]

    lines = []
    lines.append(f"scale ablation (layers 3,4; K={cfg['shots']}, seed={cfg['seed']})")
    lines.append("scale    " + "  ".join(f"{s:>7d}" for s, _ in scale_row))
    lines.append("accuracy " + "  ".join(f"{a:7.4f}" for _, a in scale_row))
    lines.append("")
    lines.append(f"layer ablation (scale {cfg['scale']}; K={cfg['shots']}, seed={cfg['seed']})")
    lines.append("layers    accuracy")
    for ls, acc in layer_rows:
        lines.append(f"{','.join(map(str, ls)):<9s} {acc:.4f}")
    table = "\n".join(lines) + "\n"

    print(table, end="")
    out = _out_path(args, "out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(table)
        _write_config(cfg, out)
        print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfadapter",
        description="Few-shot classification on precomputed feature bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--out-dir", help=f"directory for relative outputs (or ${OUT_DIR_ENV})")
        p.add_argument("--seed", type=int, help="root seed (default 0)")

    p = sub.add_parser("synth", help="generate a synthetic feature bundle")
    common(p)
    p.add_argument("--out", required=True, help="output bundle path")
    p.add_argument("--classes", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--separation", type=float)
    p.add_argument("--geometry", help="e.g. 3:2x10x10,4:4x7x7,D:32")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-cache", help="sample an episode and freeze the support cache")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output cache path")
    p.add_argument("--shots", type=int, help="K shots per class (default 16)")
    p.add_argument("--scale", type=int)
    p.add_argument("--layers", help="comma list, default 3,4")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("train", help="train the adapter against a frozen cache")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--affinity", choices=["exp", "tip"])
    p.add_argument("--beta", type=float)
    p.add_argument("--branches", help="branches kept in the training loss (default all)")
    p.add_argument("--warm-start", action="store_const", const=True, dest="warm_start")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report accuracy of the fused prediction")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", help="adapter checkpoint; omit for the induction path")
    p.add_argument("--out", help="report path (optional)")
    p.add_argument("--split", choices=["test", "support", "all"])
    p.add_argument("--branches", help="comma list of local3,local4,high,text or 'all'")
    p.add_argument("--affinity", choices=["exp", "tip"])
    p.add_argument("--beta", type=float)
    p.add_argument("--format", choices=["text", "jsonl"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="scale and layer ablation tables")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="table output path (optional)")
    p.add_argument("--shots", type=int)
    p.add_argument("--scales", help="comma list for the scale table (default 1,2,3,4,5)")
    p.add_argument("--scale", type=int, help="scale used by the layer table (default 2)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--affinity", choices=["exp", "tip"])
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValidationError, ValueError, IndexError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
