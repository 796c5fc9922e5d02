"""Command-line entry point: gen-data, train, align, eval, bench, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .scenegraph import MODALITIES, ModalityKind, ValidationError

log = logging.getLogger("sgalign")

PRECEDENCE = "Options given on the command line override values read from --config."

DEFAULTS: dict[str, dict] = {
    "gen-data": {"scenes": 200, "pairs_per_scene": 3, "negatives_per_scene": 0, "overlap_min": 0.1,
                 "overlap_max": 0.9, "objects_min": 10, "objects_max": 16, "transform": "random"},
    "train": {"manifest": None, "epochs": 50, "batch_size": 4, "lr": 1e-3, "dropout": 0.15, "resolution": 512,
              "mesh_train_points": 512, "no_augment": False, "embed_dim": 512, "hidden": 128},
    "align": {"g1": None, "g2": None, "checkpoint": None, "threshold": 0.75, "unify": None, "transform": None,
              "resolution": 512},
    "eval": {"checkpoint": None, "manifest": None, "split": "val", "transform": "random", "resolution": 512,
             "src": "PMSTR", "ref": "PMSTR", "predicted": False},
    "bench": {"checkpoint": None, "manifest": None, "split": "val", "pairs": 10, "runs": 5, "resolution": 512},
    "ablate": {"axis": None, "checkpoint": None, "manifest": None, "split": "val", "seeds": 1},
}
REQUIRED = {
    "train": ("manifest",),
    "align": ("g1", "g2", "checkpoint"),
    "eval": ("checkpoint", "manifest"),
    "bench": ("checkpoint", "manifest"),
    "ablate": ("axis", "checkpoint", "manifest"),
}

CROSS_MODAL_ROWS = (
    ("P", "P"), ("P", "M"), ("M", "P"), ("P", "T"), ("P", "R"), ("P", "TR"),
    ("PM", "TR"), ("TR", "P"), ("PMSTR", "PMSTR"),
)
MODALITY_ROWS = ("P", "PM", "PMS", "PMST", "PMSTR")


class CliError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; validation errors are 1 here
        raise CliError(message)


def parse_modalities(text: str) -> tuple[ModalityKind, ...]:
    text = text.upper().replace("+", "").replace(",", "")
    if not text:
        raise CliError("empty modality set")
    try:
        kinds = tuple(dict.fromkeys(ModalityKind[c] for c in text))
    except KeyError as exc:
        raise CliError(f"unknown modality letter {exc.args[0]!r} (use P, M, S, T, R)") from None
    return tuple(sorted(kinds))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="sgalign",
        description="Cross-modal 3D scene-graph alignment on synthetic scenes.",
        epilog=PRECEDENCE + " Exit codes: 0 ok, 1 invalid input, 2 runtime failure. "
               "SGPP_THREADS caps evaluation workers.",
    )
    p.add_argument("--seed", type=int, default=None, help="random seed for every stochastic step (default 0)")
    p.add_argument("--config", type=Path, help="JSON or TOML file; keys per subcommand, e.g. [train] epochs = 10")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for all outputs (default .)")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic corpus", epilog=PRECEDENCE)
    g.add_argument("--scenes", type=int, help="number of scenes (default 200)")
    g.add_argument("--pairs-per-scene", type=int, help="overlapping pairs per scene (default 3)")
    g.add_argument("--negatives-per-scene", type=int, help="non-overlapping pairs per scene (default 0)")
    g.add_argument("--overlap-min", type=float, help="lowest target overlap (default 0.1)")
    g.add_argument("--overlap-max", type=float, help="highest target overlap (default 0.9)")
    g.add_argument("--objects-min", type=int, help="fewest objects per scene (default 10)")
    g.add_argument("--objects-max", type=int, help="most objects per scene (default 16)")
    g.add_argument("--transform", choices=["random", "identity"], help="transform applied to g2 (default random)")

    t = sub.add_parser("train", help="train a model on a corpus", epilog=PRECEDENCE)
    t.add_argument("--manifest", type=Path, help="corpus manifest or its directory (required)")
    t.add_argument("--epochs", type=int, help="training epochs (default 50)")
    t.add_argument("--batch-size", type=int, help="scene pairs per step (default 4)")
    t.add_argument("--lr", type=float, help="base learning rate (default 0.001)")
    t.add_argument("--dropout", type=float, help="modality dropout probability per scene (default 0.15)")
    t.add_argument("--resolution", type=int, help="points per object cloud, one of 64/128/256/512 (default 512)")
    t.add_argument("--mesh-train-points", type=int, help="mesh samples per object during training (default 512)")
    t.add_argument("--no-augment", action="store_true", default=None, help="disable random rotation augmentation")
    t.add_argument("--embed-dim", type=int, help="joint embedding dimension (default 512)")
    t.add_argument("--hidden", type=int, help="encoder and head width (default 128)")

    a = sub.add_parser("align", help="match the nodes of two scene graphs", epilog=PRECEDENCE)
    a.add_argument("g1", nargs="?", type=Path, help="source scene-graph JSON")
    a.add_argument("g2", nargs="?", type=Path, help="reference scene-graph JSON")
    a.add_argument("--checkpoint", type=Path, help="model checkpoint (required)")
    a.add_argument("--threshold", type=float, help="similarity acceptance threshold in [0, 1] (default 0.75)")
    a.add_argument("--unify", type=Path, help="also write the unified scene graph to this file")
    a.add_argument("--transform", type=Path, help="JSON file with the 16 row-major entries of the g1->g2 transform")
    a.add_argument("--resolution", type=int, help="points per object cloud (default 512)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split", epilog=PRECEDENCE)
    e.add_argument("--checkpoint", type=Path, help="model checkpoint (required)")
    e.add_argument("--manifest", type=Path, help="corpus manifest or its directory (required)")
    e.add_argument("--split", choices=["train", "val", "all"], help="manifest split (default val)")
    e.add_argument("--transform", choices=["random", "identity"], help="keep the stored transform or undo it (default random)")
    e.add_argument("--resolution", type=int, help="points per object cloud (default 512)")
    e.add_argument("--src", help="source modalities as letters, e.g. PM (default PMSTR)")
    e.add_argument("--ref", help="reference modalities as letters (default PMSTR)")
    e.add_argument("--predicted", action="store_true", default=None, help="evaluate on simulated predicted data")

    b = sub.add_parser("bench", help="time inference per modality subset", epilog=PRECEDENCE)
    b.add_argument("--checkpoint", type=Path, help="model checkpoint (required)")
    b.add_argument("--manifest", type=Path, help="corpus manifest or its directory (required)")
    b.add_argument("--split", choices=["train", "val", "all"], help="manifest split (default val)")
    b.add_argument("--pairs", type=int, help="pairs timed per run (default 10)")
    b.add_argument("--runs", type=int, help="repetitions (default 5)")
    b.add_argument("--resolution", type=int, help="points per object cloud (default 512)")

    ab = sub.add_parser("ablate", help="evaluate a grid of configurations", epilog=PRECEDENCE)
    ab.add_argument("--axis", choices=["resolution", "modality", "cross-modal"], help="ablation axis (required)")
    ab.add_argument("--checkpoint", type=Path, help="model checkpoint (required)")
    ab.add_argument("--manifest", type=Path, help="corpus manifest or its directory (required)")
    ab.add_argument("--split", choices=["train", "val", "all"], help="manifest split (default val)")
    ab.add_argument("--seeds", type=int, help="evaluation seeds averaged per row (default 1)")
    return p


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            doc = tomllib.loads(text)
        else:
            doc = json.loads(text)
    except Exception as exc:
        raise CliError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError("config must be a table/object")
    return doc


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (in increasing priority)."""
    cmd = args.command
    doc = _load_config(args.config)
    section = doc.get(cmd, {})
    if not isinstance(section, dict):
        raise CliError(f"config section [{cmd}] must be a table")
    opts = dict(DEFAULTS[cmd])
    for key, value in section.items():
        k = key.replace("-", "_")
        if k not in opts:
            raise CliError(f"unknown option {key!r} in config section [{cmd}]")
        opts[k] = value
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    for key in REQUIRED.get(cmd, ()):
        if opts.get(key) is None:
            raise CliError(f"{cmd}: missing required option --{key.replace('_', '-')}")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if not isinstance(seed, int):
        raise CliError("seed must be an integer")
    opts["seed"] = seed
    return opts


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SGPP_THREADS", "1")))
    except ValueError:
        raise CliError("SGPP_THREADS must be an integer") from None


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands
def cmd_gen_data(o: dict, out: Path) -> dict:
    from .datagen import SyntheticSceneConfig, generate_corpus

    cfg = SyntheticSceneConfig(object_count=(int(o["objects_min"]), int(o["objects_max"])))
    m = generate_corpus(cfg, int(o["scenes"]), int(o["pairs_per_scene"]),
                        (float(o["overlap_min"]), float(o["overlap_max"])), seed=o["seed"], out_dir=out,
                        negatives_per_scene=int(o["negatives_per_scene"]), transform=o["transform"])
    splits = {s: len(m.split(s)) for s in ("train", "val")}
    return {"manifest": str(out / "manifest.jsonl"), "pairs": len(m.entries), "splits": splits}


def cmd_train(o: dict, out: Path, quiet: bool) -> dict:
    from .training import TrainConfig, train

    cfg = TrainConfig(epochs=int(o["epochs"]), batch_size=int(o["batch_size"]), base_lr=float(o["lr"]),
                      seed=o["seed"], modality_dropout=float(o["dropout"]), point_resolution=int(o["resolution"]),
                      mesh_train_points=int(o["mesh_train_points"]), augment=not o["no_augment"],
                      embed_dim=int(o["embed_dim"]), hidden=int(o["hidden"])).validate()

    def progress(epoch, mean):
        if not quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs} mean loss {mean:.4f}", file=sys.stderr)

    res = train(Path(o["manifest"]), cfg, out_dir=out, progress=progress)
    return {"checkpoint": str(res.checkpoint), "history": str(out / "history.csv"),
            "first_epoch_loss": res.epoch_means[0], "last_epoch_loss": res.epoch_means[-1]}


def cmd_align(o: dict, out: Path) -> dict:
    from .alignment import alignment_score, build_unified_graph, match_nodes, matches_json, similarity_matrix
    from .fusion import AlignerModel, embed_scene
    from .scenegraph import load_scene_graph

    model = AlignerModel.load(o["checkpoint"])
    g1, g2 = load_scene_graph(o["g1"]), load_scene_graph(o["g2"])
    threshold = float(o["threshold"])
    if not 0.0 <= threshold <= 1.0:
        raise CliError("--threshold must lie in [0, 1]")
    e1 = embed_scene(model, g1, point_resolution=int(o["resolution"]), seed=o["seed"])
    e2 = embed_scene(model, g2, point_resolution=int(o["resolution"]), seed=o["seed"] + 1)
    S = similarity_matrix(e1, e2)
    ms = match_nodes(S, threshold)
    doc = matches_json(ms, alignment_score(S, threshold))
    (out / "matches.json").write_text(json.dumps(doc, indent=2) + "\n")
    if o["unify"] is not None:
        t = None
        if o["transform"] is not None:
            vals = json.loads(Path(o["transform"]).read_text())
            t = np.asarray(vals, dtype=float).reshape(4, 4)
        build_unified_graph(g1, g2, ms, t).save(o["unify"])
        doc["unified"] = str(o["unify"])
    return doc


def _eval_pairs(o: dict):
    from .training import load_pairs

    pairs = load_pairs(Path(o["manifest"]), o["split"])
    if not pairs:
        raise CliError(f"split {o['split']!r} of {o['manifest']} is empty")
    return pairs


def cmd_eval(o: dict, out: Path) -> dict:
    from .training import EvalOptions, evaluate

    opts = EvalOptions(transform_mode="identity" if o["transform"] == "identity" else "random",
                       point_resolution=int(o["resolution"]), modality_mask_src=parse_modalities(o["src"]),
                       modality_mask_ref=parse_modalities(o["ref"]), predicted=bool(o["predicted"]),
                       seed=o["seed"]).validate()
    rep = evaluate(Path(o["checkpoint"]), _eval_pairs(o), opts, workers=_threads())
    doc = rep.to_json()
    (out / "eval.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out / "eval.csv").write_text(rep.to_csv())
    return doc


def cmd_bench(o: dict, out: Path) -> dict:
    from .training import bench, write_bench

    pairs = _eval_pairs(o)[: int(o["pairs"])]
    if int(o["runs"]) < 1:
        raise CliError("--runs must be >= 1")
    rows = bench(Path(o["checkpoint"]), pairs, runs=int(o["runs"]), point_resolution=int(o["resolution"]))
    write_bench(out / "bench.csv", rows)
    return {"bench": str(out / "bench.csv"),
            "rows": [{"modalities": r.label, "mean_ms": r.mean_ms, "std_ms": r.std_ms, "buffer_bytes": r.buffer_bytes}
                     for r in rows]}


def ablation_rows(axis: str) -> list[tuple[str, dict]]:
    if axis == "resolution":
        return [(f"K={k}", {"point_resolution": k}) for k in (64, 128, 256, 512)]
    if axis == "modality":
        return [("+".join(s), {"modality_mask_src": parse_modalities(s), "modality_mask_ref": parse_modalities(s)})
                for s in MODALITY_ROWS]
    if axis == "cross-modal":
        return [(f"{'+'.join(s)}->{'+'.join(r)}",
                 {"modality_mask_src": parse_modalities(s), "modality_mask_ref": parse_modalities(r),
                  "transform_mode": "identity"}) for s, r in CROSS_MODAL_ROWS]
    raise CliError(f"unknown ablation axis {axis!r}")


def cmd_ablate(o: dict, out: Path) -> dict:
    from .fusion import AlignerModel
    from .training import EvalOptions, evaluate

    rows = ablation_rows(o["axis"])
    seeds = int(o["seeds"])
    if seeds < 1:
        raise CliError("--seeds must be >= 1")
    model = AlignerModel.load(o["checkpoint"])
    pairs = _eval_pairs(o)
    table = []
    for name, kw in rows:
        reps = [evaluate(model, pairs, EvalOptions(seed=o["seed"] + s, **kw), workers=_threads()) for s in range(seeds)]
        table.append({"config": name, "mean_rr": float(np.mean([r.mean_rr for r in reps])),
                      **{f"hits@{k}": float(np.mean([r.hits[k] for r in reps])) for k in (1, 3, 5)},
                      "count": reps[0].count, "tags": ";".join(reps[0].tags)})
    path = out / f"ablate_{o['axis']}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        for row in table:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})
    return {"ablation": str(path), "rows": table}


def run(argv: list[str] | None = None) -> dict:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    o = resolve(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "gen-data":
        return cmd_gen_data(o, out)
    if cmd == "train":
        return cmd_train(o, out, args.quiet)
    if cmd == "align":
        return cmd_align(o, out)
    if cmd == "eval":
        return cmd_eval(o, out)
    if cmd == "bench":
        return cmd_bench(o, out)
    return cmd_ablate(o, out)


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        doc = run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CliError, ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        return _fail(1, exc)
    except Exception as exc:
        return _fail(2, exc)
    _emit(doc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
