import json
from dataclasses import replace

import numpy as np
import pytest

from loopus.checkpoint import MAGIC, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from loopus.config import RunConfig, dump_config, env_overrides, load_config, parse_config_text
from loopus.data import SyntheticTaskSpec, Vocab, ingest, ingest_string, ingest_synthetic, make_example
from loopus.errors import CheckpointFormatError, ConfigError, ContractError
from loopus.experiments import (
    ABLATIONS,
    DYNAMICS_INDICES,
    exit_depths,
    git_blob_sha1,
    run_depth_sweep,
    run_dynamics_report,
    train_run,
    variant_settings,
    write_manifest,
)
from loopus.halting import HaltPolicy
from loopus.loop import LoopUSModel
from loopus.model import BlockSplit, ModelConfig
from loopus.optim import AdamW


def tiny_cfg(**over) -> RunConfig:
    cfg = load_config(overrides={
        "model.d_model": 16, "model.n_heads": 2, "model.n_layers": 3, "model.enc_end": 1,
        "model.dec_start": 2, "model.mlp_ratio": 2, "model.context_len": 16,
        "loop.B": 3, "loop.K": 2, "optimizer.total_steps": 6, "optimizer.batch_size": 4,
        "optimizer.warmup": 2, "pretrain.steps": 3, "data.n_samples": 64,
    }, environ={})
    return replace(cfg, **over) if over else cfg


# -- data -------------------------------------------------------------------


def test_vocab_abab():
    ds = ingest_string("abab", seq_len=2, batch_size=1)
    assert ds.vocab.itos == ["\x00", "a", "b"] and len(ds.vocab) == 3


def test_vocab_round_trip():
    text = "hello, world\nzebra 123"
    v = Vocab.from_text(text)
    assert v.decode(v.encode(text)) == text
    assert v.itos[1:] == sorted(set(text))
    with pytest.raises(ContractError):
        v.encode("Q")


def test_modular_add_example():
    spec = SyntheticTaskSpec(modulus=10)
    rng = np.random.default_rng(0)
    for _ in range(50):
        prompt, ans = make_example(spec, rng)
        a, b = prompt[:-1].split("+")
        assert int(ans) == (int(a) + int(b)) % 10
    ds = ingest_synthetic(spec, seed=0)
    row = ds.train[0]
    text = ds.vocab.decode(row)
    a, b = text[:-2].split("+")
    assert text.endswith(str((int(a) + int(b)) % 10))
    # the answer mask marks exactly the target slot of the answer digit
    j = np.flatnonzero(ds.train_answer[0])
    assert ds.vocab.itos[row[j[0] + 1]] == text[-1]


def test_three_plus_four():
    v = Vocab(SyntheticTaskSpec().charset())
    ids = v.encode("3+4=7")
    assert v.decode(ids[:4]) == "3+4=" and v.itos[ids[4]] == "7"


@pytest.mark.parametrize("task", ["copy", "reverse"])
def test_string_tasks(task):
    spec = SyntheticTaskSpec(task=task, n_samples=40)
    prompt, ans = make_example(spec, np.random.default_rng(1))
    src = prompt[:-1]
    assert ans == (src if task == "copy" else src[::-1])
    ds = ingest_synthetic(spec)
    assert ds.vocab.decode(ds.vocab.encode(prompt + ans)) == prompt + ans


def test_validation_split_minimum_one_batch():
    ds = ingest_synthetic(SyntheticTaskSpec(n_samples=1000), batch_size=8)
    assert ds.val.shape[0] == 8
    ds = ingest_synthetic(SyntheticTaskSpec(n_samples=1000), batch_size=8, val_ratio=0.1)
    assert ds.val.shape[0] == 100


def test_empty_corpus(tmp_path):
    with pytest.raises(ContractError):
        ingest_string("")
    p = tmp_path / "empty.txt"
    p.write_text("")
    with pytest.raises(ContractError):
        ingest(p)


def test_bad_task_spec():
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(task="sort")
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(modulus=1)


def test_iterate_is_seeded():
    ds = ingest_synthetic(SyntheticTaskSpec(n_samples=200))
    a = next(ds.iterate(4, np.random.default_rng(5))).tokens
    b = next(ds.iterate(4, np.random.default_rng(5))).tokens
    np.testing.assert_array_equal(a, b)


# -- config -----------------------------------------------------------------


def test_parse_config_text():
    vals = parse_config_text("# comment\nloop.B = 20  # trailing\nmodel.rope = false\noptimizer.lr = 5e-5\n\n")
    assert vals == {"loop.B": 20, "model.rope": False, "optimizer.lr": 5e-5}
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_load_config_layers(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("loop.B = 20\nloop.K = 5\noptimizer.lr = 5e-5\noptimizer.warmup = 300\n")
    cfg = load_config(p, environ={"LOOPUS_LOOP_K": "4"}, overrides={"seed": 7})
    assert cfg.loop.B == 20 and cfg.loop.K == 4 and cfg.seed == 7
    assert cfg.optimizer.lr == 5e-5 and cfg.optimizer.warmup == 300


def test_env_override_names():
    assert env_overrides({"LOOPUS_OPTIMIZER_TOTAL_STEPS": "500", "HOME": "/x"}) == {"optimizer.total_steps": 500}
    with pytest.raises(ConfigError):
        env_overrides({"LOOPUS_NOT_A_KEY": "1"})


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides={"loop.Q": 1}, environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"loop.B": "many"}, environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"loop.K": 30}, environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"halt.q_th": 1.5}, environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"data.corpus": str(tmp_path / "missing.txt")}, environ={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg", environ={})


def test_config_dump_round_trip_and_hash(tmp_path):
    cfg = tiny_cfg()
    p = tmp_path / "dump.cfg"
    p.write_text(dump_config(cfg))
    again = load_config(p, environ={})
    assert again.to_flat() == cfg.to_flat()
    assert again.hash() == cfg.hash()
    assert replace(cfg, seed=1).hash() != cfg.hash()


# -- checkpoint -------------------------------------------------------------


def small_model(seed=0):
    cfg = ModelConfig(vocab_size=7, context_len=16, d_model=8, n_heads=2, n_layers=3,
                      split=BlockSplit(1, 2), seed=seed)
    return LoopUSModel(cfg)


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = small_model()
    rng = np.random.default_rng(0)
    for p in m.parameters().values():
        p.data[...] = rng.normal(size=p.shape).astype(np.float32)
    opt = AdamW(m.parameters(), lr=1e-3)
    for p in m.parameters().values():
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, opt, meta={"note": "x"})
    m2, meta = load_checkpoint(path)
    assert meta["note"] == "x" and meta["gate_kind"] == "decay"
    for k, v in m.state_dict().items():
        assert v.tobytes() == m2.state_dict()[k].tobytes(), k
    opt2 = AdamW(m2.parameters(), lr=1e-3)
    load_checkpoint(path, m2, opt2)
    for k, v in opt.state_dict().items():
        np.testing.assert_array_equal(v, opt2.state_dict()[k])


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_model())
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "head.ckpt").write_bytes(raw[:20])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "head.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_model())
    raw = path.read_bytes()
    (tmp_path / "v2.ckpt").write_bytes(b"LOOPUS2\n" + raw[len(MAGIC):])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_model())
    other = LoopUSModel(ModelConfig(vocab_size=9, context_len=16, d_model=8, n_heads=2, n_layers=3,
                                    split=BlockSplit(1, 2)))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path, other)


def test_save_arrays_scalar_and_meta(tmp_path):
    path = tmp_path / "a.bin"
    save_arrays(path, {"s": np.float32(2.5), "m": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1})
    arrays, meta = load_arrays(path)
    assert arrays["s"].shape == () and arrays["s"] == 2.5
    np.testing.assert_array_equal(arrays["m"], np.arange(6).reshape(2, 3))
    assert meta == {"k": 1}


# -- experiments ------------------------------------------------------------


def test_variant_settings():
    cfg = tiny_cfg()
    assert variant_settings("a", cfg)["gate"] == "none"
    assert variant_settings("b", cfg)["monolithic"] is True
    assert variant_settings("c", cfg)["mode"] == "all"
    assert variant_settings("d", cfg)["gate"] == "sigmoid"
    assert variant_settings("e", cfg, "selu")["loop"].mono_act == "selu"
    # silu is the default recipe's activation
    assert variant_settings("e", cfg, "silu")["loop"] == variant_settings(None, cfg)["loop"]
    f = variant_settings("f", cfg)
    assert f["mode"] == "tbptt" and f["loop"].tbptt_window == 1
    with pytest.raises(ConfigError):
        variant_settings("z", cfg)
    assert set(ABLATIONS) == set("abcdef")


def test_variant_a_logs_alpha_one():
    res = train_run(tiny_cfg(), variant="a")
    alphas = [r[6] for r in res.rows]
    assert alphas and all(a == 1.0 for a in alphas)


@pytest.mark.parametrize("variant", [None, "b", "c", "d", "e", "f"])
def test_every_variant_trains(variant):
    res = train_run(tiny_cfg(), variant=variant)
    assert len(res.step_lm) == 6 and np.isfinite(res.step_lm).all()


def test_training_is_reproducible(tmp_path):
    cfg = tiny_cfg()
    a = train_run(cfg)
    b = train_run(cfg)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = train_run(replace(cfg, seed=1))
    c.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_bytes() != (tmp_path / "a.csv").read_bytes()


def test_depth_sweep(tmp_path):
    cfg = tiny_cfg()
    res = train_run(cfg)
    ds_val = ingest_synthetic(cfg.synthetic_spec(), batch_size=4).val_batch()
    rows = run_depth_sweep(res.model, ds_val, [4, 0, 2, 2, 40], tmp_path / "sweep.csv")
    assert [r["depth"] for r in rows] == [0, 2, 4, 40]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "depth,val_ce,task_acc" and len(lines) == 5
    with pytest.raises(ContractError):
        run_depth_sweep(res.model, ds_val, [])


def test_exit_depths_in_range():
    cfg = tiny_cfg()
    res = train_run(cfg)
    vb = ingest_synthetic(cfg.synthetic_spec(), batch_size=4).val_batch()
    d = exit_depths(res.model, vb, HaltPolicy(mode="threshold", max_budget=5))
    assert d.shape == (len(vb),) and ((d >= 1) & (d <= 5)).all()


def test_dynamics_report_untrained(tmp_path):
    cfg = tiny_cfg()
    ds = ingest_synthetic(cfg.synthetic_spec(), batch_size=4)
    m = LoopUSModel(ModelConfig(vocab_size=len(ds.vocab), context_len=16, d_model=16, n_heads=2,
                                n_layers=3, split=BlockSplit(1, 2)))
    out = run_dynamics_report(m, ds.val_batch(), tmp_path)
    assert [r[0] for r in out["losses"]] == list(DYNAMICS_INDICES) == [0, 2, 4, 8, 12, 16, 19]
    assert len(out["distance"]) == 20 and out["token_probs"].shape[0] == 21
    for name in ("depth_losses.tsv", "distance_trace.tsv", "token_trace.tsv"):
        text = (tmp_path / name).read_text()
        assert "nan" not in text.lower()
    assert len((tmp_path / "distance_trace.tsv").read_text().splitlines()) == 21


def test_manifest(tmp_path):
    cfg = tiny_cfg()
    ck = tmp_path / "m.ckpt"
    save_checkpoint(ck, small_model())
    path = write_manifest(tmp_path, cfg, "train", ck)
    man = json.loads(path.read_text())
    assert man["config_hash"] == cfg.hash()
    assert man["checkpoint_sha1"] == git_blob_sha1(ck)
    assert man["version"]


def test_git_blob_sha1_known_value(tmp_path):
    # `printf 'hello\n' | git hash-object --stdin`
    p = tmp_path / "h"
    p.write_bytes(b"hello\n")
    assert git_blob_sha1(p) == "ce013625030ba8dba906f756967f9e9ca394464a"
