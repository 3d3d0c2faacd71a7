"""Experiment orchestration: pretraining, looped training, sweeps, ablations.

Every run draws all randomness from ``np.random.default_rng(seed)`` and is
single-threaded, so identical configs reproduce metrics byte-for-byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autograd as ag
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Batch, Dataset, ingest_synthetic, ingest_text
from .errors import ConfigError, ContractError
from .geometry import loop_distance_trace, token_distribution_trace
from .halting import HaltPolicy, run_halting
from .loop import (
    METRIC_COLUMNS,
    LoopConfig,
    LoopUSModel,
    confidence_target,
    encode_no_grad,
    eval_depth,
    tbptt_train_step,
    train_step,
    unroll_eval,
)
from .model import BlockSplit, ModelConfig
from .optim import AdamW, cosine_lr

DYNAMICS_INDICES = (0, 2, 4, 8, 12, 16, 19)

ABLATIONS = {
    "a": "no selective gate (h <- M(h))",
    "b": "no encoder/decoder split: loop the whole stack, encoder = embedding, decoder = final norm + LM head",
    "c": "no random deep supervision: every depth supervised, one update per depth",
    "d": "sigmoid gate instead of the decay gate",
    "e": "monotonicity activation swapped (relu, selu, softplus; silu is the default recipe)",
    "f": "truncated backpropagation through time over the full unroll",
}


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    bs = cfg.optimizer.batch_size
    if d.corpus:
        return ingest_text(d.corpus, seq_len=d.seq_len, batch_size=bs, val_ratio=d.val_ratio)
    return ingest_synthetic(cfg.synthetic_spec(), seed=cfg.seed, batch_size=bs, val_ratio=d.val_ratio)


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=vocab_size,
        context_len=m.context_len,
        d_model=m.d_model,
        n_heads=m.n_heads,
        n_layers=m.n_layers,
        split=BlockSplit(m.enc_end, m.dec_start),
        rope=m.rope,
        rope_base=m.rope_base,
        mlp_ratio=m.mlp_ratio,
        seed=cfg.seed,
    )


def pretrain(model: LoopUSModel, ds: Dataset, cfg: RunConfig, rng: np.random.Generator) -> list[float]:
    """Ordinary single-pass next-token training of the base transformer."""
    p = cfg.pretrain
    if p.steps == 0:
        return []
    params = model.transformer.parameters()
    opt = AdamW(params, lr=p.lr, weight_decay=cfg.optimizer.weight_decay, clip_norm=cfg.optimizer.clip_norm)
    it = ds.iterate(cfg.optimizer.batch_size, rng)
    losses = []
    for step in range(p.steps):
        b = next(it)
        loss = ag.cross_entropy(model.transformer.single_pass(b.tokens), b.targets, b.mask)
        ag.backward(loss)
        opt.step(cosine_lr(step, p.lr, p.warmup, p.steps))
        opt.zero_grad()
        losses.append(loss.item())
    return losses


def variant_settings(variant: str | None, cfg: RunConfig, mono_act: str | None = None) -> dict:
    """Model/loop settings for the default recipe (``None``) or ablation ``a``..``f``."""
    s = {"gate": cfg.model.gate, "monolithic": False, "loop": replace(cfg.loop), "mode": "rds"}
    if variant in (None, "default"):
        return s
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {', '.join(ABLATIONS)}")
    if variant == "a":
        s["gate"] = "none"
    elif variant == "b":
        s["monolithic"] = True
    elif variant == "c":
        s["mode"] = "all"
    elif variant == "d":
        s["gate"] = "sigmoid"
    elif variant == "e":
        s["loop"] = replace(cfg.loop, mono_act=mono_act or "relu")
    elif variant == "f":
        s["mode"] = "tbptt"
        if s["loop"].tbptt_window is None:
            s["loop"] = replace(cfg.loop, tbptt_window=max(cfg.loop.B // 2, 1))
    return s


@dataclass
class TrainResult:
    model: LoopUSModel
    rows: list[list] = field(default_factory=list)
    step_lm: list[float] = field(default_factory=list)
    step_mono: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    pretrain_losses: list[float] = field(default_factory=list)

    def window_mean(self, key: str, first: bool, frac: float = 0.1) -> float:
        vals = self.step_lm if key == "lm" else self.step_mono
        n = max(int(len(vals) * frac), 1)
        return float(np.mean(vals[:n] if first else vals[-n:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r[0], r[1]] + [f"{x:.6g}" for x in r[2:]])


def train_run(
    cfg: RunConfig,
    ds: Dataset | None = None,
    variant: str | None = None,
    mono_act: str | None = None,
    base_state: dict | None = None,
    log=None,
) -> TrainResult:
    """Pretrain (or load ``base_state``), then train the loop with the chosen recipe."""
    ds = ds or build_dataset(cfg)
    s = variant_settings(variant, cfg, mono_act)
    model = LoopUSModel(model_config(cfg, len(ds.vocab)), s["gate"], s["monolithic"])
    res = TrainResult(model)
    if base_state is not None:
        model.transformer.load_state_dict(base_state)
    else:
        res.pretrain_losses = pretrain(model, ds, cfg, np.random.default_rng([cfg.seed, 0]))
    # separate stream so a shared pretrained base gives the same run
    rng = np.random.default_rng([cfg.seed, 1])
    o = cfg.optimizer
    opt = AdamW(model.parameters(), lr=o.lr, weight_decay=o.weight_decay, clip_norm=o.clip_norm)
    lc: LoopConfig = s["loop"]
    it = ds.iterate(o.batch_size, rng)
    t0 = time.perf_counter()
    for step in range(o.total_steps):
        lr = cosine_lr(step, o.lr, o.warmup, o.total_steps)
        batch = next(it)
        if s["mode"] == "tbptt":
            rep = tbptt_train_step(model, batch, opt, lc, lc.tbptt_window, lr)
        elif s["mode"] == "all":
            rep = train_step(model, batch, opt, lc, rng, lr, supervised=list(range(lc.B)))
        else:
            rep = train_step(model, batch, opt, lc, rng, lr)
        for d in rep.depths:
            res.rows.append(d.row(step))
        res.step_lm.append(rep.mean("loss_lm"))
        res.step_mono.append(rep.mean("loss_mono"))
        if log and (step % 500 == 0 or step == o.total_steps - 1):
            log(f"step {step} lm {res.step_lm[-1]:.4f} mono {res.step_mono[-1]:.4f}")
    res.wall_time = time.perf_counter() - t0
    return res


def base_state_for(cfg: RunConfig, ds: Dataset) -> dict:
    """Pretrained transformer weights for ``cfg.seed``, to share across variants."""
    model = LoopUSModel(model_config(cfg, len(ds.vocab)))
    pretrain(model, ds, cfg, np.random.default_rng([cfg.seed, 0]))
    return model.transformer.state_dict()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def mean_val_lm(model: LoopUSModel, batch: Batch, depth: int) -> float:
    """Validation LM loss averaged over depths ``1..depth``."""
    traj = unroll_eval(model, encode_no_grad(model, batch.tokens), depth, batch)
    return float(np.mean([e.mean() for e in traj.energies[1:]]))


def run_depth_sweep(model: LoopUSModel, batch: Batch, depths, out_csv=None) -> list[dict]:
    """CE and task accuracy at each distinct fixed depth (sorted)."""
    depths = sorted({int(d) for d in depths})
    if not depths or depths[0] < 0:
        raise ContractError("depths must be non-negative and non-empty")
    rows = [eval_depth(model, batch, d) for d in depths]
    if out_csv:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["depth", "val_ce", "task_acc"])
            for r in rows:
                w.writerow([r["depth"], f"{r['val_ce']:.6g}", f"{r['task_acc']:.6g}"])
    return rows


def exit_depths(model: LoopUSModel, batch: Batch, policy: HaltPolicy) -> np.ndarray:
    """Per-sequence exit depth (each sequence halted on its own)."""
    out = []
    for i in range(len(batch)):
        h0 = encode_no_grad(model, batch.tokens[i : i + 1])
        _, trace = run_halting(h0, policy, model)
        out.append(trace.exit_depth)
    return np.array(out)


def run_ablation(
    variant: str, cfg: RunConfig, seeds=(0, 1, 2), out_dir=None, mono_act: str | None = None,
    base_states: dict | None = None, log=None,
) -> dict:
    """Train ``variant`` for each seed; returns curves and final validation LM."""
    variant_settings(variant, cfg, mono_act)
    curves, finals = [], []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        ds = build_dataset(c)
        base = None if base_states is None else base_states.get(seed)
        res = train_run(c, ds, variant, mono_act, base_state=base, log=log)
        curves.append(res.step_lm)
        finals.append(mean_val_lm(res.model, ds.val_batch(), c.loop.B))
    curve = np.mean(np.array(curves), axis=0)
    out = {"variant": variant, "seeds": list(seeds), "curve": curve, "final_val_lm": finals,
           "final_train_lm": [float(np.mean(c[-max(len(c) // 10, 1):])) for c in curves]}
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"ablation_{variant}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss_lm_mean"])
            for i, v in enumerate(curve):
                w.writerow([i, f"{v:.6g}"])
        with open(out_dir / f"ablation_{variant}_final.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "final_val_lm", "final_train_lm"])
            for s, a, b in zip(seeds, finals, out["final_train_lm"]):
                w.writerow([s, f"{a:.6g}", f"{b:.6g}"])
    return out


def run_dynamics_report(
    model: LoopUSModel, batch: Batch, out_dir, indices=DYNAMICS_INDICES, position: int | None = None, k: int = 5
) -> dict:
    """Per-depth losses at ``indices``, loop-distance and token-distribution traces."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = max(indices) + 1
    traj = unroll_eval(model, encode_no_grad(model, batch.tokens), depth, batch)
    if traj.diverged:
        raise ContractError("unroll diverged")
    E = np.array(traj.energies)
    rows = []
    for b in indices:
        with ag.no_grad():
            logits = model.decode(ag.Tensor(traj.states[b])).data
        acc = confidence_target(logits.argmax(-1), batch.targets, batch.mask)
        q = np.clip(traj.confidences[b], 1e-12, 1 - 1e-12)
        lq = float(np.mean(-(acc * np.log(q) + (1 - acc) * np.log1p(-q))))
        dE = E[b + 1] - E[b]
        mono = float(np.mean(dE / (1.0 + np.exp(-dE))))
        rows.append((b, float(E[b].mean()), mono, lq))
    with open(out_dir / "depth_losses.tsv", "w") as f:
        f.write("loop_index\tloss_lm\tloss_mono\tloss_q\n")
        for r in rows:
            f.write(f"{r[0]}\t{r[1]:.6g}\t{r[2]:.6g}\t{r[3]:.6g}\n")
    dist = loop_distance_trace(traj)
    with open(out_dir / "distance_trace.tsv", "w") as f:
        f.write("iter\tdistance\n")
        for i, v in enumerate(dist):
            f.write(f"{i + 1}\t{v:.6g}\n")
    if position is None:
        position = int(np.flatnonzero(batch.mask[0])[-1])
    ids, probs = token_distribution_trace(model, traj, position, k)
    with open(out_dir / "token_trace.tsv", "w") as f:
        f.write("iter\trank\ttoken_id\tprob\n")
        for i in range(len(ids)):
            for r in range(ids.shape[1]):
                f.write(f"{i}\t{r}\t{ids[i, r]}\t{probs[i, r]:.6g}\n")
    return {"losses": rows, "distance": dist, "token_ids": ids, "token_probs": probs}


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def git_blob_sha1(path) -> str:
    data = Path(path).read_bytes()
    h = hashlib.sha1(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def write_manifest(out_dir, cfg: RunConfig, command: str, checkpoint=None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command,
        "config_hash": cfg.hash(),
        "checkpoint_sha1": git_blob_sha1(checkpoint) if checkpoint and Path(checkpoint).is_file() else None,
        "version": __version__,
        "seed": cfg.seed,
    }
    man.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def save_run(out_dir, cfg: RunConfig, res: TrainResult, ds: Dataset) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(ckpt, res.model, meta={"vocab": ds.vocab.to_text(), "config_hash": cfg.hash()})
    res.write_csv(out_dir / "metrics.csv")
    return ckpt
