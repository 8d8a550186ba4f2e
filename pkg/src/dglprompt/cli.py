"""Command-line entry point.

Subcommands: gen-data, train, eval, params, dump-attention, grad-check.
Configuration comes from a preset, then an optional key=value file
(``model.*``, ``data.*``, ``train.*``; bare keys mean ``model.*``), then flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .attention import attention_rows
from .backbone import FrozenBackbone, backbone_param_count
from .config import ATTN_MODES, DIRECTIONS, GENERATORS, PRESETS, TEXT_POSITIONS, VISUAL_OUTPUTS, override, read_kv_file
from .data import SyntheticSpec, generate_splits, load_dataset, save_dataset
from .metrics import compute_metrics
from .model import DGLModel
from .prompts import PromptBank, prompt_shapes, trainable_param_count
from .tensor import grad_check
from .train import TrainConfig, evaluate, fit, format_log

COMMANDS = ("gen-data", "train", "eval", "params", "dump-attention", "grad-check")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file")
    common.add_argument("--seed", type=int, help="seed for model, data and training")
    common.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    common.add_argument("--out", help="run directory")
    common.add_argument("--attn-mode", choices=ATTN_MODES)
    common.add_argument("--visual-output", choices=VISUAL_OUTPUTS)
    common.add_argument("--generator", choices=GENERATORS)
    common.add_argument("--text-positions", choices=TEXT_POSITIONS)
    common.add_argument("--projection-direction", choices=DIRECTIONS)

    parser = argparse.ArgumentParser(prog="dglprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="write synthetic train/val splits")
    p = sub.add_parser("train", parents=[common], help="prompt-tune on synthetic data")
    p.add_argument("--data", help="directory written by gen-data (default: generate)")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("eval", parents=[common], help="retrieval metrics")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--similarity", help="CSV similarity matrix (rows: texts)")
    src.add_argument("--run", help="run directory written by train")
    p.add_argument("--direction", choices=("t2v", "v2t"), default="t2v")
    p = sub.add_parser("params", parents=[common], help="trainable parameter count")
    p.add_argument("--breakdown", action="store_true", help="also list each tensor")
    p = sub.add_parser("dump-attention", parents=[common], help="global-prompt attention CSV")
    p.add_argument("--run", help="run directory written by train (default: untrained model)")
    p.add_argument("--index", type=int, default=0, help="validation video to trace")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the loss gradient")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve(args):
    """(ModelConfig, SyntheticSpec, TrainConfig) from preset, config file and flags."""
    model = PRESETS[args.preset]
    values = {"model": {}, "data": {}, "train": {}}
    if args.config:
        for key, value in read_kv_file(args.config).items():
            section, _, name = key.rpartition(".")
            section = section or "model"
            if section not in values:
                raise SystemExit(f"unknown config section {section!r} in key {key!r}")
            values[section][name] = value
    for flag in ("attn_mode", "visual_output", "generator", "text_positions", "projection_direction"):
        if getattr(args, flag, None) is not None:
            values["model"][flag] = getattr(args, flag)
    if args.seed is not None:
        for section in values:
            values[section]["seed"] = args.seed
    model = override(model, values["model"])
    data = SyntheticSpec(V=model.V, L=model.L, t=model.t, P=model.P, raw_dim=model.raw_dim, seed=model.seed)
    data = override(data, values["data"])
    train = override(TrainConfig(seed=model.seed), values["train"])
    if getattr(args, "epochs", None):
        train = replace(train, epochs=args.epochs)
    return model, data, train


def _out_dir(args) -> Path:
    out = Path(args.out or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_embeddings(path: Path, emb: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"dim{j}" for j in range(emb.shape[1])])
        for i, row in enumerate(emb):
            w.writerow([i] + [repr(float(x)) for x in row])


def _write_matrix(path: Path, S: np.ndarray) -> None:
    np.savetxt(path, S, delimiter=",", fmt="%.17g")


def _print_metrics(m) -> None:
    print(" ".join(f"R@{k}={v:.3f}" for k, v in sorted(m.r_at.items())) + f" MnR={m.mnr:.3f}")


def cmd_gen_data(args) -> int:
    _, spec, _ = resolve(args)
    out = _out_dir(args)
    tr, va = generate_splits(spec)
    save_dataset(out / "train.dgld", tr, spec)
    save_dataset(out / "val.dgld", va, spec)
    print(f"wrote {len(tr)} train and {len(va)} val pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, spec, tc = resolve(args)
    out = _out_dir(args)
    if args.data:
        tr, _ = load_dataset(Path(args.data) / "train.dgld")
        va, _ = load_dataset(Path(args.data) / "val.dgld")
    else:
        tr, va = generate_splits(spec)
        save_dataset(out / "val.dgld", va, spec)
    model = DGLModel(cfg)
    digest = model.backbone.digest()
    t0 = time.time()

    def report(row):
        print(f"epoch {row['epoch']} loss {row['loss']:.4f} val R@1 {row['val_r1']:.3f}", file=sys.stderr)

    res = fit(model, tr.batch, tc, va.batch, on_epoch=report)
    if model.backbone.digest() != digest:
        raise RuntimeError("backbone changed during training")
    (out / "train_log.csv").write_text(format_log(res.log))
    model.backbone.save(out / "backbone.dglb")
    model.bank.save(out / "prompts.dglp")
    best = PromptBank(cfg, model.backbone)
    best.load_state_dict(res.best_state)
    best.save(out / "best.dglp")
    (out / "config.json").write_text(json.dumps({"model": cfg.to_dict(), "data": asdict(spec), "train": asdict(tc)}, indent=2))

    tf, vf = model.embed(va.batch)
    _write_embeddings(out / "text_emb.csv", tf)
    _write_embeddings(out / "video_emb.csv", vf)
    _write_matrix(out / "similarity.csv", tf @ vf.T)
    m = compute_metrics(tf @ vf.T)
    _print_metrics(m)
    print(f"initial R@1={res.initial_r1:.3f} best R@1={res.best_r1:.3f} time={time.time() - t0:.1f}s", file=sys.stderr)
    return 0


def load_run(run: Path):
    backbone = FrozenBackbone.load(run / "backbone.dglb")
    bank = PromptBank(backbone.config, backbone)
    bank.load(run / "prompts.dglp")
    return DGLModel(backbone.config, backbone, bank)


def cmd_eval(args) -> int:
    if args.similarity:
        S = np.loadtxt(args.similarity, delimiter=",", ndmin=2)
        m = compute_metrics(S, args.direction)
    else:
        run = Path(args.run)
        model = load_run(run)
        va, _ = load_dataset(run / "val.dgld")
        m = evaluate(model, va.batch, args.direction)
    _print_metrics(m)
    return 0


def cmd_params(args) -> int:
    cfg, _, _ = resolve(args)
    print(trainable_param_count(cfg))
    if args.breakdown:
        for name, shape in prompt_shapes(cfg).items():
            print(f"  {name} {tuple(shape)} {int(np.prod(shape))}")
        print(f"backbone (excluding embedding tables) {backbone_param_count(cfg)}")
        print(f"backbone (all) {backbone_param_count(cfg, include_embeddings=True)}")
    return 0


def cmd_dump_attention(args) -> int:
    if args.run:
        model = load_run(Path(args.run))
        va, _ = load_dataset(Path(args.run) / "val.dgld")
    else:
        cfg, spec, _ = resolve(args)
        model = DGLModel(cfg)
        _, va = generate_splits(spec)
    cfg = model.config
    if not cfg.has_global:
        print(f"attn_mode={cfg.attn_mode} has no global prompts", file=sys.stderr)
        return 1
    trace: list = []
    model.encode_video(va.batch.videos[args.index : args.index + 1], trace=trace)
    n_f = cfg.n_f if cfg.frame_prompts_in_video else 0
    if args.run and not args.out:
        args.out = args.run
    out = _out_dir(args) / "attention.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "frame", "key_type", "key_index", "weight"])
        for layer, weights in enumerate(trace):
            row = weights[0].mean(axis=0)[0]  # batch item 0, head mean, first global prompt
            for frame, kind, idx, val in attention_rows(row, cfg.t, n_f, cfg.P, cfg.n_g):
                w.writerow([layer, frame, kind, idx, repr(val)])
    print(out)
    return 0


def cmd_grad_check(args) -> int:
    cfg, spec, _ = resolve(args)
    model = DGLModel(cfg)
    tr, _ = generate_splits(replace(spec, n_pairs=max(spec.n_pairs, 2 * spec.n_classes)))
    batch = tr.batch.subset(np.arange(2))
    worst = 0.0
    for name, p in model.trainable().items():
        err = grad_check(lambda x: model.loss(batch), p, args.step)
        worst = max(worst, err)
        print(f"{name} {err:.3e}")
    print(f"max {worst:.3e}")
    return 0 if worst < args.tol else 1


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "dump-attention": cmd_dump_attention,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return HANDLERS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
