"""``dynln`` command line: data generation, training, evaluation and checks."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .adapt import variance_penalty
from .data import (Dataset, SyntheticSpec, cluster_purity, export_summaries, gen_synthetic,
                   load_splits, modal_speaker_frequency, save_splits, write_summaries)
from .recurrent import (DIRECTIONS, StackConfig, count_params, format_count, load_checkpoint,
                        save_checkpoint, stack_forward)
from .tensor import grad_check_detail
from .train import TrainConfig, fit, frame_error_rate, init_model, nll_loss


_LARGE = dict(num_layers=3, cell_size=512, proj_size=256, input_dim=123, summary_size=64)

PRESETS: dict[str, dict] = {
    "wsj-baseline": dict(_LARGE, num_classes=3436, dln_enabled=False, lam=0.0),
    "wsj-dln": dict(_LARGE, num_classes=3436, dln_enabled=True, lam=0.0),
    "ted-baseline": dict(_LARGE, num_classes=4174, dln_enabled=False, lam=0.0),
    "ted-dln": dict(_LARGE, num_classes=4174, dln_enabled=True, lam=10.0),
    # desk-scale stack matching the default synthetic data
    "desk": dict(num_layers=2, cell_size=32, proj_size=16, input_dim=16, num_classes=8,
                 summary_size=8, dln_enabled=False, lam=0.0),
    "tiny": dict(num_layers=2, cell_size=8, proj_size=4, input_dim=5, num_classes=3,
                 summary_size=3, dln_enabled=False, lam=0.0),
}


@dataclass
class RunConfig:
    """One JSON document: ``{"model": {...}, "train": {...}, "data": path}``."""

    model: StackConfig = field(default_factory=lambda: StackConfig(**PRESETS["desk"]))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        model = dict(PRESETS["desk"])
        model.update(d.get("model", {}))
        return cls(StackConfig.from_dict(model), TrainConfig.from_dict(d.get("train", {})),
                   d.get("data"))

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data}


def load_run_config(spec: str | None) -> RunConfig:
    """A preset name, a path to a JSON run config, or ``None`` for the desk defaults."""
    if spec is None:
        return RunConfig()
    if spec in PRESETS:
        return RunConfig(model=StackConfig(**PRESETS[spec]))
    with open(spec) as fh:
        return RunConfig.from_dict(json.load(fh))


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _override(cfg: StackConfig, **changes) -> StackConfig:
    d = cfg.to_dict()
    d.update({k: v for k, v in changes.items() if v is not None})
    return StackConfig.from_dict(d)


def _check_compatible(cfg: StackConfig, ds: Dataset, name: str) -> None:
    if len(ds) and ds.frame_dim != cfg.input_dim:
        raise ValueError(f"{name}: frame dim {ds.frame_dim} but model input_dim {cfg.input_dim}")
    if len(ds) and ds.max_label() >= cfg.num_classes:
        raise ValueError(f"{name}: label {ds.max_label()} but model has {cfg.num_classes} classes")


# commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(num_speakers=args.speakers, utterances_per_speaker=args.utts_per_speaker,
                         frame_dim=args.dim, num_classes=args.classes, len_min=args.len_min,
                         len_max=args.len_max, noise=args.noise, seed=args.seed,
                         held_out=args.held_out, speaker_rank=args.speaker_rank or None)
    splits = gen_synthetic(spec)
    save_splits(splits, args.out)
    for name, ds in splits.items():
        print(f"{name}\tutterances={len(ds)}\tframes={ds.num_frames}\t"
              f"speakers={len(ds.speakers)}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    model_cfg = _override(run.model, dln_enabled=args.dln, lam=args.lam)
    train_cfg = TrainConfig.from_dict({**run.train.to_dict(),
                                       **{k: v for k, v in (("epochs", args.epochs),
                                                            ("seed", args.seed)) if v is not None}})
    data_path = args.data or run.data
    if data_path is None:
        raise ValueError("no data given (use --data or the config's data key)")
    splits = load_splits(data_path)
    if "train" not in splits:
        raise ValueError(f"{data_path} has no train split")
    for name, ds in splits.items():
        _check_compatible(model_cfg, ds, name)
    model = init_model(model_cfg, train_cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    history = fit(model, splits["train"], train_cfg, splits.get("dev"),
                  log_path=os.path.join(args.out, "train_log.tsv"),
                  timing_path=os.path.join(args.out, "timing.tsv"))
    save_checkpoint(model, args.out)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs; final loss {last.mean_loss:.4f}, "
              f"train FER {last.train_fer:.2f}%")
    else:
        print("no epochs run; checkpoint holds the initialization")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    for name, ds in load_splits(args.data).items():
        if len(ds) == 0:
            continue
        _check_compatible(model.config, ds, name)
        print(f"{name}\tFER {frame_error_rate(model, ds):.2f}%")
    return 0


def cmd_count_params(args) -> int:
    cfg = load_run_config(args.config).model
    if args.dln is not None:
        cfg = _override(cfg, dln_enabled=args.dln)
    print(format_count(count_params(cfg)))
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_run_config(args.config).model
    cfg = _override(cfg, dln_enabled=args.dln, lam=args.lam)
    model = init_model(cfg, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    # perturb the trivial LN/bias initial values so every parameter is exercised
    for _, p in model.named_parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    T, B = args.frames, args.batch
    frames = rng.standard_normal((T, B, cfg.input_dim))
    labels = rng.integers(0, cfg.num_classes, size=(T, B))
    mask = np.ones((T, B))
    if T > 1 and B > 1:
        mask[T - 1, 0] = 0.0
    names = list(model.params)
    params = model.parameters()

    def loss():
        logits, summaries = stack_forward(model, frames, mask)
        out = nll_loss(logits, labels, mask)
        if summaries is not None and cfg.lam > 0:
            out = out + variance_penalty(summaries, cfg.lam)
        return out

    err, k, j = grad_check_detail(loss, params, args.step)
    where = "-" if k < 0 else f"{names[k]}{[int(i) for i in np.unravel_index(j, params[k].shape)]}"
    ok = err <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}\tmax relative error {err:.3e}\tworst {where}\t"
          f"tolerance {args.tolerance:g}\tparameters {sum(p.size for p in params)}")
    return 0 if ok else 1


def cmd_export_summaries(args) -> int:
    model = load_checkpoint(args.model)
    if not model.config.dln_enabled:
        raise ValueError("checkpoint has DLN disabled; there are no summaries to export")
    splits = load_splits(args.data)
    if args.split != "all":
        if args.split not in splits:
            raise ValueError(f"no split {args.split!r} under {args.data}")
        splits = {args.split: splits[args.split]}
    utts = [u for ds in splits.values() for u in ds]
    if not utts:
        raise ValueError("no utterances to export")
    _check_compatible(model.config, Dataset(utts, utts[0].frames.shape[1]), "data")
    layers = args.layers or list(range(1, model.config.num_layers + 1))
    records = export_summaries(model, utts, layers)
    write_summaries(records, args.out)
    k = len({u.speaker_id for u in utts})
    print(f"wrote {len(records)} rows to {args.out}; k = {k} speakers")
    for l in layers:
        for d in DIRECTIONS:
            sub = [r for r in records if r.layer == l and r.direction == d]
            print(f"layer {l}\t{d}\tpurity {cluster_purity(sub, min(k, len(sub)), args.seed):.4f}"
                  f"\tchance {modal_speaker_frequency(sub):.4f}")
    return 0


# parser -------------------------------------------------------------------------

def _layers(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("layers are comma-separated integers, e.g. 1,2")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dynln", formatter_class=fmt,
                                     description="BLSTMP acoustic models with dynamic layer norm.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    cfg_help = f"preset ({', '.join(PRESETS)}) or JSON run-config path"

    p = sub.add_parser("gen-data", formatter_class=fmt, help="write synthetic train/dev/test data")
    p.add_argument("--speakers", type=int, default=16, help="total speakers")
    p.add_argument("--utts-per-speaker", type=int, default=40, help="utterances per speaker")
    p.add_argument("--dim", type=int, default=16, help="frame dimension D")
    p.add_argument("--classes", type=int, default=8, help="number of frame classes")
    p.add_argument("--len-min", type=int, default=20, help="shortest utterance (frames)")
    p.add_argument("--len-max", type=int, default=40, help="longest utterance (frames)")
    p.add_argument("--noise", type=float, default=0.3, help="Gaussian noise std")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--held-out", type=int, default=4,
                   help="speakers kept out of train and split over dev/test (0: split by utterance)")
    p.add_argument("--speaker-rank", type=int, default=4,
                   help="rank of the speaker gain/offset subspace (0: independent per dimension)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model and write a checkpoint")
    p.add_argument("--config", default=None, help=cfg_help + " (default: desk)")
    p.add_argument("--data", default=None, help="directory holding train/dev[/test] containers")
    p.add_argument("--dln", type=_on_off, default=None, help="on|off (default: from config)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="variance penalty weight (default: from config)")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default: from config)")
    p.add_argument("--seed", type=int, default=None, help="init/shuffle seed (default: from config)")
    p.add_argument("--out", required=True, help="checkpoint and log directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt, help="frame error rate per split")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset container or split directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", formatter_class=fmt, help="exact trainable parameter count")
    p.add_argument("--config", default="wsj-baseline", help=cfg_help)
    p.add_argument("--dln", type=_on_off, default=None, help="on|off (default: from config)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", formatter_class=fmt,
                       help="central-difference check of NLL plus variance penalty")
    p.add_argument("--config", default="tiny", help=cfg_help)
    p.add_argument("--dln", type=_on_off, default=None, help="on|off (default: from config)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="variance penalty weight (default: from config)")
    p.add_argument("--seed", type=int, default=0, help="model and batch seed")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step (five-point stencil)")
    p.add_argument("--frames", type=int, default=5, help="frames per utterance")
    p.add_argument("--batch", type=int, default=2, help="utterances in the batch")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-summaries", formatter_class=fmt,
                       help="write per-utterance summary vectors and report cluster purity")
    p.add_argument("--model", required=True, help="DLN checkpoint directory")
    p.add_argument("--data", required=True, help="dataset container or split directory")
    p.add_argument("--split", default="all", help="split to export, or 'all'")
    p.add_argument("--layers", type=_layers, default=None, help="e.g. 1,3 (default: every layer)")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(func=cmd_export_summaries)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if getattr(args, "tolerance", 1.0) <= 0:
        parser.error("--tolerance must be positive")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"dynln {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
