"""Command-line entry point: synth-data, train, generate, eval."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import generation as gen
from . import landmarks as lm
from . import training as tr
from .checkpoint import ModelConfig, ModelState, load_checkpoint, read_manifest, save_checkpoint
from .errors import ConfigurationError, ParseError, SmileGenError, ValidationError

log = logging.getLogger("smilegen")

EXIT_CODES = {
    "error": 1,
    "validation": 2, "degenerate-geometry": 2, "shape": 2, "parse": 2,
    "configuration": 3,
    "dependency": 4,
    "incompatible-checkpoint": 5,
    "non-finite-loss": 6,
    "io": 7,
}

CHECKPOINT_NAME = "checkpoint.zip"
CONFIG_NAME = "config.json"


def default_config() -> dict:
    synth = {f.name: getattr(ds.SynthConfig(), f.name) for f in fields(ds.SynthConfig)
             if f.name not in ("dynamics", "modes", "labels", "seed")}
    model = asdict(ModelConfig())
    model.pop("seed")
    return {
        "seed": 0,
        "deterministic": False,
        "synth": synth,
        "data": {"train_fraction": 2 / 3},
        "model": model,
        "optimizer": {k: v for k, v in asdict(tr.OptimizerConfig()).items() if k != "seed"},
        "weights": asdict(tr.LossWeights()),
        "phases": {p: {"epochs": e, "frames_per_sequence": None, "teacher_forcing": True, "lr": None,
                       "frame_batch": None}
                   for p, e in tr.DEFAULT_EPOCHS.items()},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigurationError(f"unknown configuration key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- command-line flags."""
    cfg = default_config()
    if args.config:
        cfg = _merge(cfg, load_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    cmd = args.command
    if cmd == "synth-data":
        if args.identities is not None:
            cfg["synth"]["num_identities"] = args.identities
    if cmd in ("synth-data", "train", "generate", "eval") and getattr(args, "T", None) is not None:
        cfg["synth"]["T"] = cfg["model"]["T"] = args.T
    if cmd in ("train", "generate") and getattr(args, "k", None) is not None:
        cfg["model"]["K"] = args.k
    if cmd == "generate" and args.modes is not None:
        cfg["model"]["K"] = args.modes
    if cmd == "train":
        if args.epochs is not None:
            cfg["phases"][args.phase]["epochs"] = args.epochs
        if args.lr is not None:
            cfg["optimizer"]["lr"] = args.lr
    cfg["command"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    return cfg


def write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(cfg, sort_keys=True, indent=1, default=str))


def synth_config(cfg: dict) -> ds.SynthConfig:
    return ds.SynthConfig(**{**cfg["synth"], "seed": cfg["seed"]})


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "seed": cfg["seed"]})


def load_config(cfg: dict) -> ds.LoadConfig:
    return ds.LoadConfig(T=cfg["model"]["T"], train_fraction=cfg["data"]["train_fraction"], seed=cfg["seed"],
                         side=cfg["model"]["side"])


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: dict, args, out: Path) -> dict:
    split = ds.synthesize(synth_config(cfg))
    ds.write_corpus(split, out)
    counts = {}
    for s in split.all:
        key = f"{s.label}/mode{s.mode_tag}"
        counts[key] = counts.get(key, 0) + 1
    summary = {"sequences": len(split.all), "train": split.n_train, "test": split.n_test, "per_class_mode": counts}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


def cmd_train(cfg: dict, args, out: Path) -> dict:
    mcfg = model_config(cfg)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, expected=mcfg)
    else:
        state = ModelState(mcfg)
    tr.check_prerequisites(state, args.phase)
    data = ds.load_dataset(args.data, load_config(cfg))
    ph = cfg["phases"][args.phase]
    plan = tr.PhasePlan(args.phase, ph["epochs"], ph.get("frames_per_sequence"), ph.get("teacher_forcing", True))
    opt = {**cfg["optimizer"], "betas": tuple(cfg["optimizer"]["betas"]), "seed": cfg["seed"]}
    # per-phase optimizer overrides; --lr still wins
    if ph.get("lr") is not None and args.lr is None:
        opt["lr"] = ph["lr"]
    if ph.get("frame_batch") is not None:
        opt["frame_batch"] = ph["frame_batch"]
    opt = tr.OptimizerConfig(**opt)
    weights = tr.LossWeights(**cfg["weights"])
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    records = tr.run_phase(state, plan, data, opt, weights, log_path=metrics, dump_dir=out)
    ckpt = save_checkpoint(state, out / CHECKPOINT_NAME)
    return {"checkpoint": str(ckpt), "lineage": state.lineage, "epochs": len(records),
            "final": records[-1] if records else None}


def _read_first_points(path):
    """Landmark file ({"points": ...}) or a dataset sequence.json (first frame used).

    Returns aligned points, the alignment transform and the source id if known."""
    path = Path(path)
    if path.is_dir():
        path = path / "sequence.json"
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if isinstance(obj, dict) and "frames" in obj:
        first = lm.LandmarkSet.from_json(obj["frames"][0])
        source = obj.get("source_id")
    else:
        first = lm.LandmarkSet.from_json(obj)
        source = None
    aligned, transform = lm.align(first)
    return aligned.points, transform, source


def _read_neutral(path, transform: lm.AlignmentTransform, side: int) -> np.ndarray:
    from PIL import Image

    return ds.to_face_array(ds.warp_face(Image.open(path).convert("RGB"), transform), side)


def cmd_generate(cfg: dict, args, out: Path) -> dict:
    state = load_checkpoint(args.checkpoint, expected=model_config(cfg))
    points, transform, source = _read_first_points(args.landmarks)
    neutral = _read_neutral(args.neutral, transform, state.config.side) if args.neutral else None
    seqs = gen.generate(state, points, args.label, neutral_face=neutral, modes=state.config.K > 0)
    sidecar = {"label": args.label, "K": state.config.K, "T": state.config.T,
               "checkpoint_fingerprint": state.fingerprint(), "lineage": state.lineage,
               "seed": cfg["seed"], "reference": args.reference or source}
    gen.write_generated(seqs, out, sidecar, reference=args.reference or source)
    return {"sequences": [s.tag for s in seqs], "T": state.config.T}


def load_corpus_dir(root, cfg: ds.LoadConfig) -> list[tuple]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.rglob("sequence.json"))
    if not dirs:
        raise ValidationError(f"{root}: no sequence.json entries found")
    out = []
    for d in dirs:
        meta = json.loads((d / "sequence.json").read_text())
        out.append((ds.load_sequence_dir(d, cfg), meta))
    return out


def _native_T(root) -> int:
    first = next(Path(root).rglob("sequence.json"), None)
    if first is None:
        raise ValidationError(f"{root}: no sequence.json entries found")
    return len(json.loads(first.read_text())["frames"])


def cmd_eval(cfg: dict, args, out: Path) -> dict:
    gen_T, ref_T = _native_T(args.generated), _native_T(args.reference)
    if gen_T != ref_T:
        raise ValidationError(f"generated sequences have {gen_T} frames, reference sequences {ref_T}")
    lcfg = ds.LoadConfig(T=gen_T, side=cfg["model"]["side"])
    generated = load_corpus_dir(args.generated, lcfg)
    reference = [s for s, _ in load_corpus_dir(args.reference, lcfg)]
    classifier = None
    labelled = [s for s in reference if s.faces is not None]
    if labelled:
        classes = sorted({(s.identity, s.label) for s in labelled})
        index = {c: i for i, c in enumerate(classes)}
        frames = np.concatenate([s.faces for s in labelled])
        targets = np.concatenate([[index[(s.identity, s.label)]] * s.T for s in labelled])
        classifier = ev.train_frame_classifier(frames, targets, len(classes), seed=cfg["seed"]).predict_proba
    metadata = {"generated": str(args.generated), "reference": str(args.reference),
                "is_classifier": "small CNN trained on reference identity x class labels" if classifier else None}
    if args.checkpoint:
        man = read_manifest(args.checkpoint)
        metadata.update(checkpoint_fingerprint=man["fingerprint"], K=man["K"])
    else:
        # generated trees may hold one generate run per subdirectory
        sides = [json.loads(p.read_text()) for p in sorted(Path(args.generated).rglob("generation.json"))]
        for key in ("checkpoint_fingerprint", "K"):
            if len({json.dumps(sd.get(key)) for sd in sides}) == 1:
                metadata[key] = sides[0].get(key)
    metadata["config"] = cfg
    report = ev.evaluate_corpus(generated, reference, classifier, metadata)
    ev.write_report(report, out, plot=not args.no_plot)
    return {"aggregate": report.aggregate}


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smilegen", description="Conditional multi-mode smile sequence generation.")
    p.add_argument("--config", type=Path, help="JSON configuration document")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write the synthetic corpus")
    s.add_argument("--identities", type=int)
    s.add_argument("--T", type=int)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", required=True, choices=tr.PHASES)
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--checkpoint", type=Path, help="checkpoint from the previous phase")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--k", type=int, help="number of mode generators")
    t.add_argument("--T", type=int)

    g = sub.add_parser("generate", help="generate conditional and multi-mode sequences")
    g.add_argument("--checkpoint", required=True, type=Path)
    g.add_argument("--landmarks", required=True, type=Path, help="landmark JSON or a sequence directory")
    g.add_argument("--neutral", type=Path, help="neutral face PNG")
    g.add_argument("--label", required=True, choices=ds.LABELS)
    g.add_argument("--modes", type=int, help="K; must match the checkpoint")
    g.add_argument("--reference", help="source id of the real sequence this output is compared with")
    g.add_argument("--T", type=int)

    e = sub.add_parser("eval", help="score generated sequences against a reference corpus")
    e.add_argument("--generated", required=True, type=Path)
    e.add_argument("--reference", required=True, type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--no-plot", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if cfg["deterministic"]:
            tr.configure_determinism()
        out = Path(args.out)
        write_config(cfg, out)
        result = COMMANDS[args.command](cfg, args, out)
    except SmileGenError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["io"]
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
