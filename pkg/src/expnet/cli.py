"""Command-line entry point: ``expnet <verb> [--flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on validation or
runtime failures (with a one-line diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

TOGGLES = ("focal", "ci", "sine", "band")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit; route through run() instead
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _set_threads() -> None:
    threads = os.environ.get("EXPNET_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expnet", allow_abbrev=False,
                     description="Focal/context decoupling classifier on synthetic expert-level data.")
    verbs = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    verbs.required = True

    def verb(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text, allow_abbrev=False)
        sub.add_argument("--seed", type=int, default=None, help="override every seed")
        return sub

    p = verb("gen-data", "generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="dataset spec file (key=value)")
    p.add_argument("--out", required=True)

    p = verb("train", "train a model")
    p.add_argument("--model", required=True, help="model config file")
    p.add_argument("--train", required=True, help="train config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("mlp_add", "cross_attention"))

    p = verb("eval", "evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = verb("gradcheck", "run the finite-difference suite")
    p.add_argument("--out", help="optional file for the per-op lines")

    p = verb("saliency", "export saliency masks, boxes and the metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, default=None)

    p = verb("ablate", "train and evaluate across the toggle grid")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("mlp_add", "cross_attention"))
    p.add_argument("--toggles", help='one variant, e.g. "focal=off,ci=on,sine=on,band=off"')
    return parser


def parse_toggles(text: str) -> Dict[str, bool]:
    out: Dict[str, bool] = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in TOGGLES or value not in ("on", "off"):
            raise UsageError(f"bad toggle {item!r}; expected name=on|off with name in {TOGGLES}")
        out[key] = value == "on"
    return out


def ablation_grid(toggles: Optional[str]) -> List[Dict[str, bool]]:
    """Full model plus each single toggle off, or the one requested variant."""
    if toggles:
        return [parse_toggles(toggles)]
    grid = [dict.fromkeys(TOGGLES, True)]
    for name in TOGGLES:
        row = dict.fromkeys(TOGGLES, True)
        row[name] = False
        grid.append(row)
    return grid


def _require(path: str, what: str, is_dir: bool = False) -> Path:
    p = Path(path)
    if not (p.is_dir() if is_dir else p.is_file()):
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _load_split(path: str, seed: Optional[int]):
    from .data import load_dataset, split_dataset

    data = load_dataset(_require(path, "dataset directory", is_dir=True))
    return split_dataset(data, data.seed if seed is None else seed)


def _configs(args):
    from .model import ModelConfig
    from .train import TrainConfig

    mc = ModelConfig.from_file(_require(args.model, "model config"))
    tc = TrainConfig.from_file(_require(args.train, "train config"))
    if args.seed is not None:
        mc, tc = mc.replace(seed=args.seed), tc.replace(seed=args.seed)
    if args.fusion:
        mc = mc.replace(fusion=args.fusion)
    return mc, tc


def cmd_gen_data(args) -> None:
    from .data import SyntheticSpec, directory_digest, generate_synthetic_dataset

    spec = SyntheticSpec.from_file(_require(args.spec, "dataset spec"))
    if args.seed is not None:
        spec = SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    data = generate_synthetic_dataset(spec, args.out)
    print(f"wrote {len(data)} images to {args.out} digest={directory_digest(args.out)[:16]}")


def cmd_train(args) -> None:
    from .train import evaluate, train

    mc, tc = _configs(args)
    tr, te = _load_split(args.data, args.seed)
    mc = mc.replace(num_classes=tr.num_classes) if mc.num_classes != tr.num_classes else mc
    result = train(mc, tc, tr, args.out, eval_dataset=te)
    print(result.log[-1])
    print(f"test {evaluate(result.model, te).format()}")
    print(f"checkpoint {result.final_checkpoint}")


def cmd_eval(args) -> None:
    from .train import evaluate

    _require(args.checkpoint, "checkpoint directory", is_dir=True)
    _, te = _load_split(args.data, args.seed)
    print(evaluate(args.checkpoint, te).format())


def cmd_gradcheck(args) -> int:
    from .gradsuite import REGISTRY, run_case

    lines, worst = [], 0.0
    for name in REGISTRY:
        err = run_case(name, instances=10, seed=args.seed or 0)
        worst = max(worst, err)
        line = f"{name} max_rel_error={err:.3e} {'ok' if err <= 1e-4 else 'FAIL'}"
        print(line, flush=True)
        lines.append(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    if worst > 1e-4:
        print(f"expnet: gradient check failed, worst error {worst:.3e}", file=sys.stderr)
        return 1
    return 0


def cmd_saliency(args) -> None:
    from .model import load_checkpoint
    from .saliency import saliency_report

    model, _ = load_checkpoint(_require(args.checkpoint, "checkpoint directory", is_dir=True))
    _, te = _load_split(args.data, args.seed)
    metrics = saliency_report(model, te, args.out, checkpoint=args.checkpoint, dataset=args.data,
                              stage=args.stage, seed=args.seed or 0)
    for key, value in metrics.items():
        print(f"{key} = {value:.6f}")


def cmd_ablate(args) -> None:
    from .train import evaluate, train

    mc, tc = _configs(args)
    grid = ablation_grid(args.toggles)
    tr, te = _load_split(args.data, args.seed)
    mc = mc.replace(num_classes=tr.num_classes)
    rows = ["focal ci sine band test_acc"]
    for toggles in grid:
        name = "_".join(f"{k}-{'on' if v else 'off'}" for k, v in toggles.items())
        cfg = mc.replace(**toggles)
        result = train(cfg, tc, tr, Path(args.out) / name, eval_dataset=te)
        acc = evaluate(result.model, te).accuracy
        flags = " ".join("on" if toggles.get(k, True) else "off" for k in TOGGLES)
        rows.append(f"{flags} {acc:.4f}")
        print(rows[-1], flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation.txt").write_text("\n".join(rows) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "saliency": cmd_saliency,
    "ablate": cmd_ablate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    _set_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "toggles", None):
            parse_toggles(args.toggles)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        status = COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"expnet: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"expnet {args.verb}: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
