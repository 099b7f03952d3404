"""Training loop, optimizers, schedule, config round-trip, CLI."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fot import numerics as N
from fot.config import (TrainConfig, apply_overrides, config_hash, emit_config,
                        get_preset, parse_config)
from fot.errors import ConfigError
from fot.model import ModelConfig, Transformer, load_checkpoint
from fot.numerics import Tensor
from fot.pipeline import TrainBatch, make_eval_exposure_plan
from fot.training import Adam, AdaFactor, RunManifest, inverse_sqrt_lr, train


def small_train_cfg(**kw):
    cfg = TrainConfig(model=ModelConfig(
        n_layers=2, d_model=32, n_heads=2, head_dim=16, ff_dim=64,
        vocab_size=64, memory_layers=(1,), local_ctx_len=32))
    cfg.dict_doc_len = 64
    cfg.b_s = 4
    cfg.steps = 4
    cfg.warmup_steps = 2
    cfg.log_every = 1
    cfg.d_kind = "constant"
    cfg.d = 2
    base = {k: v for k, v in kw.items()}
    for k, v in base.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# schedule + optimizers
# ---------------------------------------------------------------------------

def test_lr_warmup_and_inverse_sqrt_decay():
    max_lr, min_lr, warmup = 1e-2, 1e-6, 100
    assert inverse_sqrt_lr(0, max_lr, min_lr, warmup) < inverse_sqrt_lr(warmup - 1, max_lr, min_lr, warmup)
    at_warmup = inverse_sqrt_lr(warmup - 1, max_lr, min_lr, warmup)
    assert abs(at_warmup - max_lr) / max_lr < 0.02
    # decay proportional to step^-1/2 after warmup
    a = inverse_sqrt_lr(400 - 1, max_lr, min_lr, warmup)
    b = inverse_sqrt_lr(1600 - 1, max_lr, min_lr, warmup)
    assert abs(a / b - 2.0) < 1e-9
    # clamped into [min_lr, max_lr]
    assert inverse_sqrt_lr(10**12, max_lr, min_lr, warmup) == min_lr


def _quadratic_params(seed=0):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((4, 3)).astype(np.float32)
    p = Tensor(np.zeros((4, 3), dtype=np.float32), requires_grad=True)
    return p, target


@pytest.mark.parametrize("opt_cls", [Adam, AdaFactor])
def test_optimizers_descend_quadratic(opt_cls):
    p, target = _quadratic_params()
    opt = opt_cls({"p": p})
    for _ in range(300):
        p.grad = 2 * (p.data - target)
        opt.step(0.05)
    assert np.abs(p.data - target).max() < 0.05


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def test_train_deterministic_reruns_bit_identical(tmp_path):
    cfg = small_train_cfg(steps=6)
    r1 = train(cfg, tmp_path / "a")
    r2 = train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "final.fotc").read_bytes() == \
           (tmp_path / "b" / "final.fotc").read_bytes()
    assert r1.losses == r2.losses


def test_train_seed_changes_everything(tmp_path):
    a = train(small_train_cfg(steps=3), tmp_path / "a")
    cfg2 = small_train_cfg(steps=3)
    cfg2.seed = 7
    b = train(cfg2, tmp_path / "b")
    assert (tmp_path / "a" / "final.fotc").read_bytes() != \
           (tmp_path / "b" / "final.fotc").read_bytes()


def test_overfit_one_batch_loss_decreases():
    """1-layer model overfits a single fixed batch to < 0.1 quickly."""
    cfg = ModelConfig(n_layers=1, d_model=32, n_heads=2, head_dim=16, ff_dim=64,
                      vocab_size=16, memory_layers=(), local_ctx_len=16)
    model = Transformer(cfg, seed=0)
    rng = np.random.default_rng(1)
    toks = rng.integers(0, 16, size=(2, 16))
    tgt = rng.integers(0, 16, size=(2, 16))
    batch = TrainBatch(toks, tgt, np.ones((2, 16)), np.zeros((2, 1, 16), np.int64),
                       np.zeros((2, 1), bool), np.arange(2), np.zeros(2, np.int64), 0)
    from fot.pipeline import CrossbatchPlan
    plan = CrossbatchPlan([[], []], 1, [0, 0], [[], []])
    opt = Adam(model.params)
    losses = []
    for step in range(500):
        model.zero_grads()
        fwd = model.forward_train(batch, plan, compute_loss=True, collect_records=False)
        N.backward(fwd.tape, fwd.loss)
        opt.step(3e-3)
        losses.append(fwd.loss.item())
        if losses[-1] < 0.1:
            break
    assert losses[-1] < 0.1, f"stuck at {losses[-1]:.3f}"
    assert losses[-1] < losses[0]


def test_train_writes_manifest_before_metrics(tmp_path):
    cfg = small_train_cfg(steps=2)
    res = train(cfg, tmp_path / "run")
    man = RunManifest.read(res.manifest_path)
    assert man.status == "done"
    assert man.end_step == 2
    assert str(res.metrics_path) in man.metric_files
    assert str(res.checkpoint_path) in man.checkpoint_files
    # config round-trips from the emitted file
    back = parse_config(Path(man.config_path).read_text())
    assert back == cfg


def test_train_resumes_from_checkpoint(tmp_path):
    cfg = small_train_cfg(steps=2)
    first = train(cfg, tmp_path / "a")
    cfg2 = small_train_cfg(steps=1, warmup_steps=1)
    cfg2.init_checkpoint = str(first.checkpoint_path)
    second = train(cfg2, tmp_path / "b")
    assert second.checkpoint_path.exists()
    bad = small_train_cfg(steps=1, warmup_steps=1)
    bad.model.d_model = 64
    bad.model.n_heads = 4
    bad.init_checkpoint = str(first.checkpoint_path)
    with pytest.raises(ConfigError):
        train(bad, tmp_path / "c")


# ---------------------------------------------------------------------------
# config round-trip
# ---------------------------------------------------------------------------

def test_config_roundtrip_identity():
    cfg = get_preset("desk")
    cfg.steps = 123
    cfg.model.memory_layers = (1, 3)
    cfg.segments = "0.5:1:1,0.5:0:0"
    back = parse_config(emit_config(cfg))
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_overrides():
    cfg = get_preset("desk")
    apply_overrides(cfg, ["model.n_layers=2", "steps=77", "train.max_lr=0.5",
                          "model.memory_layers=0,1"])
    assert cfg.model.n_layers == 2 and cfg.steps == 77
    assert cfg.max_lr == 0.5 and cfg.model.memory_layers == (0, 1)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["bogus_key=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["steps;77"])


def test_config_validation_errors():
    cfg = get_preset("desk")
    cfg.warmup_steps = cfg.steps + 1
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = get_preset("desk")
    cfg.min_lr = cfg.max_lr * 10
    with pytest.raises(ConfigError):
        cfg.validate()
    with pytest.raises(ConfigError):
        get_preset("nope")


def test_presets_validate():
    for name in ("desk", "desk-byte", "dict-small", "ref-37m", "ref-184m"):
        get_preset(name).validate()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def run_cli(*argv):
    from fot.cli import main
    import io
    from contextlib import redirect_stdout, redirect_stderr
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def test_cli_train_and_inspect(tmp_path):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(
        "train", "--preset", "desk",
        "--override", "model.n_layers=2", "--override", "model.d_model=32",
        "--override", "model.n_heads=2", "--override", "model.head_dim=16",
        "--override", "model.ff_dim=64", "--override", "model.local_ctx_len=32",
        "--override", "model.memory_layers=1", "--override", "dict_doc_len=64",
        "--override", "steps=2", "--override", "warmup_steps=1",
        "--override", "b_s=2", "--override", "d=2",
        "--out", str(out))
    assert code == 0, stdout
    ck = out / "final.fotc"
    code, stdout, _ = run_cli("inspect", "--checkpoint", str(ck))
    assert code == 0
    assert "parameters" in stdout and "memory" in stdout
    # inspect agrees with the analytic count
    cfg, params = load_checkpoint(ck)
    total = sum(p.data.size for p in params.values())
    assert f"parameters {total} (analytic {total})" in stdout


def test_cli_bad_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.fotc"
    bad.write_bytes(b"XXXXgarbage")
    code, _, err = run_cli("inspect", "--checkpoint", str(bad))
    assert code == 2 and "config error" in err
    code, _, err = run_cli("inspect", "--checkpoint", str(tmp_path / "missing.fotc"))
    assert code == 3


def test_cli_gen_data_and_eval(tmp_path):
    code, _, _ = run_cli("gen-data", "--task", "text", "--out", str(tmp_path / "c.txt"),
                         "--n-docs", "4", "--doc-len", "300")
    assert code == 0
    code, _, _ = run_cli("gen-data", "--task", "passkey", "--out",
                         str(tmp_path / "p.txt"), "--n-docs", "3", "--prompt-len", "128")
    assert code == 0
    assert (tmp_path / "p.answers.txt").read_text().count("\n") == 3

    out = tmp_path / "run"
    run_cli("train", "--preset", "desk",
            "--override", "model.n_layers=2", "--override", "model.d_model=32",
            "--override", "model.n_heads=2", "--override", "model.head_dim=16",
            "--override", "model.ff_dim=64", "--override", "model.local_ctx_len=32",
            "--override", "model.memory_layers=1", "--override", "dict_doc_len=64",
            "--override", "steps=2", "--override", "warmup_steps=1",
            "--override", "b_s=2", "--override", "d=2", "--out", str(out))
    csv_path = tmp_path / "m.csv"
    code, stdout, err = run_cli("eval", "--checkpoint", str(out / "final.fotc"),
                                "--suite", "dict", "--axis", "memory=64",
                                "--n-docs", "1", "--k", "8", "--out", str(csv_path))
    assert code == 0, err
    from fot.analysis import read_metrics_csv
    rows = read_metrics_csv(csv_path)
    assert rows and rows[0].metric == "dict_accuracy"


def test_cli_sweep_reduces_to_train(tmp_path):
    out = tmp_path / "sweep"
    code, stdout, err = run_cli(
        "sweep", "--preset", "desk",
        "--override", "model.n_layers=2", "--override", "model.d_model=32",
        "--override", "model.n_heads=2", "--override", "model.head_dim=16",
        "--override", "model.ff_dim=64", "--override", "model.local_ctx_len=32",
        "--override", "model.memory_layers=1", "--override", "dict_doc_len=64",
        "--override", "steps=2", "--override", "warmup_steps=1",
        "--override", "b_s=2",
        "--grid", "d=1,2", "--out", str(out))
    assert code == 0, err
    summary = (out / "summary.csv").read_text().strip().splitlines()
    assert len(summary) == 3  # header + 2 cells
    assert (out / "cell000" / "final.fotc").exists()
    assert (out / "cell001" / "final.fotc").exists()
    # distinct config hashes per cell
    h0 = json.loads((out / "cell000" / "manifest.json").read_text())["config_hash"]
    h1 = json.loads((out / "cell001" / "manifest.json").read_text())["config_hash"]
    assert h0 != h1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fot.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "train" in proc.stdout and "sweep" in proc.stdout
