import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from modalign import checkpoint
from modalign import numkernel as nk
from modalign import trainer as tr
from modalign.encoders import ModalityRecord, make_toy_dataset
from modalign.templates import MissingTemplates, load_templates
from modalign.trainer import (BatchItem, ConfigError, DatasetSpec, LoadedDataset, TrainConfig, TrainState,
                              build_aligner, sample_batch, sampling_probabilities, select_checkpoint, train,
                              training_step)


def spec(n, name=None, **kw):
    return DatasetSpec(name or f"d{n}", "image", size=n, **kw)


def test_sqrt_probabilities_small():
    assert np.allclose(sampling_probabilities([spec(4), spec(16)]), [1 / 3, 2 / 3])
    assert sampling_probabilities([spec(7)]).tolist() == [1.0]


def test_sqrt_probabilities_caption_corpora():
    sizes = [566747, 859739, 821774]
    roots = [math.sqrt(s) for s in sizes]
    expected = [r / sum(roots) for r in roots]
    got = sampling_probabilities([spec(s, f"c{i}") for i, s in enumerate(sizes)])
    assert np.allclose(got, expected, atol=1e-15, rtol=0)
    assert got.sum() == pytest.approx(1.0, abs=1e-15)


def test_override_replaces_weight():
    # weights: override 3.0 * (2 + 4) = 18 against sqrt(16) = 4
    got = sampling_probabilities([spec(4, upsample_override=3.0), spec(16)])
    assert np.allclose(got, [18 / 22, 4 / 22])


def test_invalid_sizes_rejected():
    with pytest.raises(ConfigError):
        spec(0)
    with pytest.raises(ValueError):
        sampling_probabilities([spec(4)], sizes=[0])
    with pytest.raises(ValueError):
        sampling_probabilities([])


def _loaded(n, name):
    return LoadedDataset(spec(n, name), make_toy_dataset("image", n, 0))


def test_monte_carlo_frequencies_and_chi_square():
    data = [_loaded(4, "a"), _loaded(16, "b")]
    batch = sample_batch(data, load_templates(), np.random.default_rng(0), batch_size=100_000)
    counts = np.array([sum(b.dataset == n for b in batch) for n in ("a", "b")])
    assert np.allclose(counts / 1e5, [1 / 3, 2 / 3], atol=0.01)
    assert stats.chisquare(counts, 1e5 * np.array([1 / 3, 2 / 3])).pvalue > 0.01


def test_qa_template_fill():
    rec = ModalityRecord("image", {"attributes": {"size": "small", "color": "red", "shape": "cube"}},
                         "cube", "q0", instruction="What is the shape?", task="qa")
    data = [LoadedDataset(DatasetSpec("qa", "image", "qa", size=1), [rec])]
    reg = {"image": {"qa": ["Question: {question} Answer:"]}}
    [item] = sample_batch(data, reg, np.random.default_rng(0))
    assert item.instruction == "Question: What is the shape? Answer:"


def test_missing_templates_names_task():
    data = [_loaded(3, "a")]
    with pytest.raises(MissingTemplates, match="caption"):
        sample_batch(data, {"image": {"qa": ["{question}"]}}, np.random.default_rng(0))


def test_sampling_deterministic():
    data = [_loaded(4, "a"), _loaded(16, "b")]
    reg = load_templates()
    a = sample_batch(data, reg, np.random.default_rng(5), batch_size=50)
    b = sample_batch(data, reg, np.random.default_rng(5), batch_size=50)
    assert [(x.record.record_id, x.instruction) for x in a] == [(x.record.record_id, x.instruction) for x in b]


# ---------------------------------------------------------------------------
# steps


def small_config(**kw):
    d = {"modality": "image", "iterations": 6, "batch_size": 2, "warmup_steps": 2, "val_every": 3,
         "val_size": 4, "qformer": {"K": 2},
         "datasets": [{"name": "cap", "modality": "image", "task": "caption", "size": 60},
                      {"name": "qa", "modality": "image", "task": "qa", "size": 30}]}
    d.update(kw)
    return TrainConfig.from_dict(d)


@pytest.fixture
def state():
    cfg = small_config()
    al = build_aligner(cfg)
    return cfg, TrainState(al, nk.OptimizerState(), np.random.default_rng(0))


def fixed_batch():
    return [BatchItem(r, "describe the image", "cap") for r in make_toy_dataset("image", 3, 1)]


def test_step_updates_theta_only(state):
    cfg, st_ = state
    al = st_.aligner
    frozen = {k: checkpoint.tensors_hash({k: v}) for k, v in al.frozen_tensors().items()}
    before = {k: v.detach().clone() for k, v in al.theta.items()}
    loss = training_step(st_, fixed_batch(), 1, cfg)
    assert math.isfinite(loss)
    assert {k: checkpoint.tensors_hash({k: v}) for k, v in al.frozen_tensors().items()} == frozen
    changed = {k for k in before if not torch.equal(before[k], al.theta[k])}
    assert changed == set(al.theta)


def test_overfit_one_batch(state):
    cfg, st_ = state
    cfg.warmup_steps = 1
    batch = fixed_batch()
    losses = [training_step(st_, batch, s, cfg) for s in range(1, 51)]
    assert losses[-1] < losses[0]


def test_lr_spy(state, monkeypatch):
    cfg, st_ = state
    seen = []
    real = nk.adamw_step

    def spy(opt, params, grads, lr):
        seen.append(lr)
        return real(opt, params, grads, lr)

    monkeypatch.setattr(nk, "adamw_step", spy)
    for s in (1, 2, 4):
        training_step(st_, fixed_batch()[:1], s, cfg)
    assert seen == [nk.lr_at_step(s, cfg.warmup_steps, cfg.peak_lr, cfg.floor_init, cfg.iterations) for s in (1, 2, 4)]


def test_non_finite_loss_names_batch(state, monkeypatch):
    cfg, st_ = state
    monkeypatch.setattr(st_.aligner, "loss", lambda items: torch.tensor(float("nan")))
    with pytest.raises(nk.NonFiniteError, match="image-caption-1-00000"):
        training_step(st_, fixed_batch(), 1, cfg)


@pytest.mark.parametrize("series,expected", [
    ([(1, 50), (2, 55), (3, 53), (4, 60)], 2),
    ([(1, 10), (2, 20), (3, 30)], 3),
    ([(7, 1.0)], 7),
    ([50, 55, 53, 60], 1),
])
def test_select_checkpoint(series, expected):
    assert select_checkpoint(series) == expected


def test_select_checkpoint_empty():
    with pytest.raises(ValueError):
        select_checkpoint([])


def test_yaml_unknown_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("modality: image\niteratons: 5\n")
    with pytest.raises(ConfigError, match="iteratons"):
        TrainConfig.from_yaml(p)
    p.write_text("modality: image\nqformer:\n  KK: 2\n")
    with pytest.raises(ConfigError, match="KK"):
        TrainConfig.from_yaml(p)


def test_yaml_roundtrip(tmp_path):
    cfg = small_config()
    cfg.to_yaml(tmp_path / "c.yaml")
    assert TrainConfig.from_yaml(tmp_path / "c.yaml") == cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="audio"):
        TrainConfig(modality="image", datasets=[DatasetSpec("x", "audio", size=3)])


# ---------------------------------------------------------------------------
# outer loop


def test_train_logs_and_is_deterministic(tmp_path):
    a = train(small_config(), out_dir=tmp_path / "a")
    b = train(small_config(), out_dir=tmp_path / "b")
    ma = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(l) for l in ma.decode().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 7))
    assert set(rows[0]) == {"step", "loss", "lr", "dataset", "seed"}
    assert [s for s, _, _ in a.checkpoints] == [3, 6]
    assert [h for _, _, h in a.checkpoints] == [h for _, _, h in b.checkpoints]
    assert len(a.val_series) == 2


def test_resume_gives_identical_checkpoint(tmp_path):
    full = train(small_config(), out_dir=tmp_path / "full")
    train(small_config(), out_dir=tmp_path / "part", stop_after=3)
    resumed = train(small_config(), out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_000003.bin")
    assert resumed.checkpoints[-1][2] == full.checkpoints[-1][2]
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_prefix_flag_only_changes_assembly(tmp_path, monkeypatch):
    traces = {}
    real = tr.sample_batch

    for flag in (True, False):
        calls = []

        def spy(*a, **kw):
            out = real(*a, **kw)
            calls.append([(b.record.record_id, b.instruction) for b in out])
            return out

        monkeypatch.setattr(tr, "sample_batch", spy)
        res = train(small_config(prefix_enabled=flag), out_dir=tmp_path / str(flag))
        rows = [json.loads(l) for l in (tmp_path / str(flag) / "metrics.jsonl").read_text().splitlines()]
        traces[flag] = (calls, [(r["lr"], r["dataset"]) for r in rows], res)
    assert traces[True][0] == traces[False][0]
    assert traces[True][1] == traces[False][1]
    # the cue is the only difference, so losses differ
    assert traces[True][2].val_series != traces[False][2].val_series


def test_checkpoint_write_error_names_path(tmp_path):
    bad = tmp_path / "file"
    bad.write_text("")
    with pytest.raises(OSError):
        train(small_config(iterations=3, val_every=3), out_dir=bad)
