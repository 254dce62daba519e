"""Command-line driver: ``defnet {gen,gradcheck,train,eval,ensemble,ablate}``.

Metrics go to stdout as one JSON document; human-readable tables go to
stderr.  Exit codes: 0 success, 1 a check failed, 2 usage / spec / missing
input.  ``--config FILE`` supplies any long flag as a JSON key (dashes or
underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .net import Network, hinge_loss
from .pipeline.data import DatasetSpec, SpecError, generate_dataset, load_dataset, save_dataset
from .pipeline.evaluate import evaluate_map
from .pipeline.experiment import ModelSpec, PipelineConfig, Workspace
from .tensor import ParameterError

log = logging.getLogger("defnet")


class UsageError(Exception):
    """Bad flags, unreadable config or missing inputs (exit code 2)."""


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _pipeline_flags(p):
    p.add_argument("--data", help="dataset directory written by 'gen'")
    p.add_argument("--keep-fraction", type=float, default=PipelineConfig.keep_fraction)
    p.add_argument("--radius", type=int, default=PipelineConfig.radius)


def _train_flags(p):
    p.add_argument("--iterations", type=int, default=PipelineConfig.finetune_iterations)
    p.add_argument("--pretrain-iterations", type=int, default=PipelineConfig.pretrain_iterations)
    p.add_argument("--lr", type=float, default=PipelineConfig.lr)
    p.add_argument("--batch-size", type=int, default=PipelineConfig.batch_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defnet", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    parser.commands = {}

    def command(name, help):
        p = parser.commands[name] = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("gen", "generate a synthetic dataset")
    p.add_argument("--out", help="dataset directory to write")
    p.add_argument("--classes", type=int, default=DatasetSpec.classes)
    p.add_argument("--scenes", type=int, default=DatasetSpec.train_scenes, help="training scenes")
    p.add_argument("--val-scenes", type=int, default=DatasetSpec.val_scenes)
    p.add_argument("--deformation", type=float, default=DatasetSpec.deformation)

    p = command("gradcheck", "finite-difference checks of all backward passes")
    p.add_argument("--eps", type=float, default=1e-5)

    p = command("train", "pretrain + fine-tune one detector and save it")
    _pipeline_flags(p)
    _train_flags(p)
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--defpool", type=_on_off, default=True, help="on|off")
    p.add_argument("--scheme", choices=("none", "image", "object"), default="object")

    p = command("eval", "score a saved detector and report mAP")
    _pipeline_flags(p)
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--split", choices=("train", "val", "val1", "val2"), default="val2")
    p.add_argument("--rejection", type=_on_off, default=True, help="on|off")
    p.add_argument("--context", type=_on_off, default=False, help="on|off")
    p.add_argument("--bbox", type=_on_off, default=False, help="on|off")
    p.add_argument("--dump", help="write detections as JSON lines to this file")

    p = command("ensemble", "greedy model averaging over saved detectors")
    _pipeline_flags(p)
    p.add_argument("--models", nargs="+", default=[], help="checkpoint directories")

    p = command("ablate", "component ladder from a max-pool baseline to the full pipeline")
    _pipeline_flags(p)
    _train_flags(p)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        known = vars(args)
        defaults = {}
        for key, value in file_cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known or dest in ("command", "config"):
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            if dest in ("defpool", "rejection", "context", "bbox") and isinstance(value, str):
                if value not in ("on", "off"):
                    raise UsageError(f"{key} must be 'on' or 'off'")
                value = value == "on"
            defaults[dest] = value
        parser.commands[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _table(rows, header) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)), file=sys.stderr)


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig(keep_fraction=args.keep_fraction, radius=args.radius)
    if hasattr(args, "iterations"):
        cfg = replace(cfg, finetune_iterations=args.iterations,
                      pretrain_iterations=args.pretrain_iterations, lr=args.lr,
                      batch_size=args.batch_size)
    if not 0 < cfg.keep_fraction <= 1:
        raise UsageError("--keep-fraction must lie in (0, 1]")
    return cfg


def _workspace(args) -> Workspace:
    _need(args, "data")
    if not (Path(args.data) / "manifest.json").is_file():
        raise UsageError(f"no dataset at {args.data}")
    return Workspace(load_dataset(args.data), _pipeline_config(args), args.seed)


def _load_model(directory) -> tuple[Network, dict]:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no model at {directory}")
    return Network.load(directory), json.loads(path.read_text())["info"]


# -- commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    _need(args, "out")
    spec = DatasetSpec(classes=args.classes, train_scenes=args.scenes,
                       val_scenes=args.val_scenes, deformation=args.deformation, seed=args.seed)
    ds = generate_dataset(spec)
    save_dataset(ds, args.out)
    counts = np.bincount([c for sc in ds.train for c, _ in sc.objects], minlength=spec.classes)
    _table([[k, int(n)] for k, n in enumerate(counts)], ["class", "train objects"])
    _emit({"command": "gen", "spec": asdict(spec),
           "scenes": {"train": len(ds.train), "val": len(ds.val)},
           "train_objects": counts.tolist()})
    return 0


def cmd_gradcheck(args) -> int:
    errors, ok = gradcheck.run_all(args.eps, args.seed)
    _table([[k, f"{v:.3e}"] for k, v in errors.items()], ["group", "max rel err"])
    _emit({"command": "gradcheck", "eps": args.eps, "seed": args.seed, "errors": errors,
           "tolerance": {"defpool": gradcheck.DEFPOOL_TOL, "network": gradcheck.NETWORK_TOL},
           "passed": ok})
    return 0 if ok else 1


def cmd_train(args) -> int:
    _need(args, "out")
    ws = _workspace(args)
    spec = ModelSpec("defpool" if args.defpool else "maxpool", args.scheme)
    net = ws.model(spec)
    x, y = ws.finetune_set
    loss = float(hinge_loss(net.forward(x), y)[0].mean())
    info = {"model": spec.id, "pipeline": asdict(ws.cfg), "data_seed": ws.ds.spec.seed}
    net.save(args.out, info)
    print(f"{spec.id}: fine-tuning hinge loss {loss:.4f}", file=sys.stderr)
    _emit({"command": "train", "model": spec.id, "seed": args.seed, "samples": len(x),
           "finetune_loss": loss})
    return 0


def cmd_eval(args) -> int:
    _need(args, "model")
    ws = _workspace(args)
    net, info = _load_model(args.model)
    dets = ws.detect(net, args.split, args.rejection, args.context, args.bbox)
    truth = [sc.objects for sc in ws.scenes(args.split)]
    ap, mean = evaluate_map([d.as_tuple() for d in dets], truth, ws.K)
    if args.dump:
        with open(args.dump, "w") as fh:
            for d in dets:
                fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
    _table([[k, f"{v:.4f}"] for k, v in ap.items()] + [["mAP", f"{mean:.4f}"]], ["class", "AP"])
    _emit({"command": "eval", "model": info.get("model"), "split": args.split,
           "rejection": args.rejection, "context": args.context, "bbox": args.bbox,
           "ap": {str(k): v for k, v in ap.items()}, "map": mean, "detections": len(dets)})
    return 0


def cmd_ensemble(args) -> int:
    if len(args.models) < 2:
        raise UsageError("ensembling needs at least two models")
    ws = _workspace(args)
    nets = {}
    for i, directory in enumerate(args.models):
        net, info = _load_model(directory)
        nets[f"{i}:{info.get('model', 'unknown')}"] = net
    sel = ws.ensemble_nets(nets)
    _table([[m, f"{v:.4f}", "yes" if m in sel.selected else ""] for m, v in sel.single_map.items()],
           ["model", "val2 mAP", "selected"])
    print(f"ensemble mAP {sel.ensemble_map:.4f}", file=sys.stderr)
    ok = sel.ensemble_map >= max(sel.single_map.values())
    _emit({"command": "ensemble", **sel.to_json()})
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    ws = _workspace(args)
    rows = ws.ablation()
    _table([[r["step"], r["model"], f"{r['map']:.4f}"] for r in rows], ["step", "model", "val2 mAP"])
    _emit({"command": "ablate", "seed": args.seed, "steps": rows})
    return 0


COMMANDS = {"gen": cmd_gen, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "ensemble": cmd_ensemble, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return 2 if exc.code else 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SpecError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
