"""Command-line entry point: ``loopus <command> [options]``.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
4 I/O or checkpoint-format error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cache import bench_cache, generate
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import CheckpointFormatError, ConfigError, ContractError, NumericError
from .experiments import (
    ABLATIONS,
    build_dataset,
    exit_depths,
    run_ablation,
    run_depth_sweep,
    run_dynamics_report,
    save_run,
    train_run,
    write_manifest,
)
from .geometry import layer_cosine_profile, pca_trajectory, propose_split, write_distance_tsv, write_pca_tsv
from .halting import HaltPolicy
from .loop import LoopUSModel, eval_depth
from .model import BlockSplit, ModelConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")

    halt = argparse.ArgumentParser(add_help=False)
    halt.add_argument("--halt-mode", choices=["threshold", "convergence", "cdf", "fixed"])
    halt.add_argument("--q-th", type=float)
    halt.add_argument("--eps", type=float)
    halt.add_argument("--max-depth", type=int)
    halt.add_argument("--eval-interval", type=int)

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.ckpt)")

    p = argparse.ArgumentParser(prog="loopus", description="Looped refinement of a pretrained toy transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="pretrain, then train the loop; writes model.ckpt and metrics.csv")

    e = sub.add_parser("eval", parents=[common, ckpt, halt], help="validation CE / accuracy at a depth or under halting")
    e.add_argument("--depth", type=int, help="fixed depth (otherwise the halting policy is used)")

    g = sub.add_parser("generate", parents=[common, ckpt, halt], help="KV-cached generation")
    g.add_argument("--prompt", required=True)
    g.add_argument("--max-new", type=int, default=8)
    g.add_argument("--sampling", choices=["greedy", "temperature"], default="greedy")
    g.add_argument("--temperature", type=float, default=1.0)

    s = sub.add_parser("sweep-depth", parents=[common, ckpt], help="metrics at fixed depths, beyond training B too")
    s.add_argument("--depths", type=_int_list, default=[0, 1, 2, 4, 8, 16, 32])

    sub.add_parser("analyze-geometry", parents=[common, ckpt], help="cosine profile, split proposal, PCA traces")

    a = sub.add_parser(
        "ablate",
        parents=[common],
        help="train an ablation variant over several seeds",
        description="Variants:\n" + "\n".join(f"  {k}: {v}" for k, v in ABLATIONS.items()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    a.add_argument("--variant", required=True, help="one of a..f")
    a.add_argument("--mono-act", choices=["relu", "silu", "selu", "softplus"], help="activation for variant e")
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])

    b = sub.add_parser("bench-cache", parents=[common, ckpt], help="cached vs uncached seconds per token")
    b.add_argument("--prompt-len", type=int, default=16)
    b.add_argument("--gen-len", type=int, default=512)
    b.add_argument("--depth", type=int, default=4)
    b.add_argument("--runs", type=int, default=5)

    d = sub.add_parser("dynamics", parents=[common, ckpt], help="per-depth losses, distance and token traces")
    d.add_argument("--position", type=int)
    d.add_argument("--top-k", type=int, default=5)
    return p


def _config(args) -> RunConfig:
    over = {"seed": args.seed, "out": args.out}
    if getattr(args, "halt_mode", None) is not None:
        over["halt.mode"] = args.halt_mode
    for flag, key in (("q_th", "halt.q_th"), ("eps", "halt.eps"), ("max_depth", "halt.max_budget"),
                      ("eval_interval", "halt.eval_interval")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    return load_config(args.config, over)


def _load(args, cfg: RunConfig):
    path = Path(args.checkpoint or Path(cfg.out) / "model.ckpt")
    model, meta = load_checkpoint(path)
    return model, meta, path


def _dataset_for(cfg: RunConfig, meta: dict):
    ds = build_dataset(cfg)
    if meta.get("vocab") is not None and meta["vocab"] != ds.vocab.to_text():
        raise ConfigError("checkpoint vocabulary does not match the configured data")
    return ds


def _halt_policy(cfg: RunConfig) -> HaltPolicy:
    return HaltPolicy(**asdict(cfg.halt))


def cmd_train(args, cfg):
    ds = build_dataset(cfg)
    res = train_run(cfg, ds, log=lambda m: print(m, flush=True))
    ckpt = save_run(cfg.out, cfg, res, ds)
    write_manifest(cfg.out, cfg, "train", ckpt)
    print(f"wrote {ckpt}")


def cmd_eval(args, cfg):
    model, meta, path = _load(args, cfg)
    vb = _dataset_for(cfg, meta).val_batch()
    if args.depth is not None:
        r = eval_depth(model, vb, args.depth)
    else:
        pol = _halt_policy(cfg)
        ex = exit_depths(model, vb, pol)
        r = {"halt_mode": pol.mode, "mean_exit_depth": float(ex.mean())}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(r))
        w.writerow(list(r.values()))
    write_manifest(out, cfg, "eval", path)
    for k, v in r.items():
        print(f"{k}\t{v}")


def cmd_generate(args, cfg):
    model, meta, path = _load(args, cfg)
    from .data import Vocab

    vocab = Vocab(meta.get("vocab", ""))
    ids = np.array([vocab.encode(args.prompt)])
    res = generate(model, ids, args.max_new, _halt_policy(cfg), args.sampling, args.temperature,
                   np.random.default_rng(cfg.seed))
    text = vocab.decode(res.tokens[0].tolist())
    write_manifest(cfg.out, cfg, "generate", path, {"prompt": args.prompt, "completion": text,
                                                    "exit_depths": res.exit_depths})
    print(args.prompt + text)
    print("exit depths: " + " ".join(str(d) for d in res.exit_depths))


def cmd_sweep(args, cfg):
    model, meta, path = _load(args, cfg)
    vb = _dataset_for(cfg, meta).val_batch()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_depth_sweep(model, vb, args.depths, out / "depth_sweep.csv")
    write_manifest(out, cfg, "sweep-depth", path)
    for r in rows:
        print(f"{r['depth']}\t{r['val_ce']:.4f}\t{r['task_acc']:.4f}")


def cmd_geometry(args, cfg):
    model, meta, path = _load(args, cfg)
    vb = _dataset_for(cfg, meta).val_batch()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    prof = layer_cosine_profile(model.transformer, [vb.tokens])
    write_distance_tsv(out / "cosine_profile.tsv", prof.distances)
    prop = propose_split(prof, model.cfg.n_layers)
    states = model.transformer.layer_states(vb.tokens)
    layer_pca = pca_trajectory([s.mean(axis=(0, 1)) for s in states])
    write_pca_tsv(out / "layer_pca.tsv", layer_pca)
    write_manifest(out, cfg, "analyze-geometry", path, {
        "proposed_split": [prop.split.enc_end, prop.split.dec_start], "note": prop.note,
        "averaging": prof.averaging, "excluded_vectors": prof.n_excluded,
    })
    print("layer\tcosine_distance")
    for i, v in enumerate(prof.distances):
        print(f"{i}\t{v:.4f}")
    print(f"proposed split: enc_end={prop.split.enc_end} dec_start={prop.split.dec_start} ({prop.note})")


def cmd_ablate(args, cfg):
    if args.variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {args.variant!r}; choose from {', '.join(ABLATIONS)}")
    out = Path(cfg.out)
    r = run_ablation(args.variant, cfg, args.seeds, out, args.mono_act, log=lambda m: print(m, flush=True))
    write_manifest(out, cfg, f"ablate {args.variant}", extra={"final_val_lm": r["final_val_lm"]})
    print(f"variant {args.variant}: final validation LM per seed {r['final_val_lm']}")


def cmd_bench(args, cfg):
    if args.checkpoint:
        model, _, path = _load(args, cfg)
    else:
        need = args.prompt_len + args.gen_len
        m = cfg.model
        mc = ModelConfig(vocab_size=16, context_len=max(need, m.context_len), d_model=m.d_model,
                         n_heads=m.n_heads, n_layers=m.n_layers, split=BlockSplit(m.enc_end, m.dec_start),
                         mlp_ratio=m.mlp_ratio, seed=cfg.seed)
        model, path = LoopUSModel(mc), None
    r = bench_cache(model, args.prompt_len, args.gen_len, args.depth, args.runs, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    r.write_csv(out / "bench_cache.csv")
    write_manifest(out, cfg, "bench-cache", path, {"speedup": r.speedup})
    print(f"cached {r.median('cached'):.5f} s/tok, uncached {r.median('uncached'):.5f} s/tok, "
          f"speedup {r.speedup:.2f}x")


def cmd_dynamics(args, cfg):
    model, meta, path = _load(args, cfg)
    vb = _dataset_for(cfg, meta).val_batch()
    out = Path(cfg.out)
    r = run_dynamics_report(model, vb, out, position=args.position, k=args.top_k)
    write_manifest(out, cfg, "dynamics", path)
    print("loop_index\tloss_lm\tloss_mono\tloss_q")
    for row in r["losses"]:
        print("\t".join(f"{x:.4f}" if isinstance(x, float) else str(x) for x in row))


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "sweep-depth": cmd_sweep,
    "analyze-geometry": cmd_geometry,
    "ablate": cmd_ablate,
    "bench-cache": cmd_bench,
    "dynamics": cmd_dynamics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointFormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
