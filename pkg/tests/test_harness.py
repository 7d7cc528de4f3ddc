import copy

import numpy as np
import pytest
from scipy import stats

from convlora import cli
from convlora.ablation import ablation_driver, best_scale
from convlora.config import RunConfig, dump_config, load_config, parse_config, set_value
from convlora.data import DatasetSpec, flip_batch, gen_synthetic, object_radii
from convlora.errors import CheckpointError, ConfigError
from convlora.optim import Adam
from convlora.tensor import Tensor
from convlora.training import (build_model, evaluate, evaluate_model, load_checkpoint,
                               param_checksum, read_manifest, save_checkpoint, train)


def tiny(variant="conv-lora", out=None, **kw):
    cfg = RunConfig(variant=variant, epochs=2, batch_size=2, lr=3e-3)
    cfg.data.image_size = 32
    cfg.data.n_train, cfg.data.n_val, cfg.data.n_test = 6, 4, 4
    cfg.data.r_min, cfg.data.r_max = 2.0, 10.0
    cfg.model.dim = 16
    cfg.adapter.scales = [1.0, 2.0, 4.0]
    if out is not None:
        cfg.out = str(out)
    for k, v in kw.items():
        set_value(cfg, k, v)
    return cfg


# --- data


def test_dataset_is_deterministic():
    spec = DatasetSpec(n_train=5)
    a, b = gen_synthetic(spec, 3), gen_synthetic(spec, 3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = gen_synthetic(spec, 4)
    assert not np.array_equal(a.images, c.images)


def test_splits_use_distinct_streams():
    spec = DatasetSpec(n_train=4, n_val=4)
    tr, va = gen_synthetic(spec, 0, "train"), gen_synthetic(spec, 0, "val")
    assert not any(np.array_equal(x, y) for x in tr.images for y in va.images)


def test_multiclass_labels():
    ds = gen_synthetic(DatasetSpec(n_train=20, n_classes=3), 0)
    assert set(np.unique(ds.labels)) <= {0, 1, 2, 3}
    assert len(set(np.unique(ds.labels))) > 2


def test_binary_labels_and_image_shape():
    ds = gen_synthetic(DatasetSpec(n_train=3), 0)
    assert ds.images.shape == (3, 3, 64, 64)
    assert set(np.unique(ds.labels)) <= {0, 1}


@pytest.mark.parametrize("dist", ["loguniform", "uniform"])
def test_radius_distribution_ks(dist):
    spec = DatasetSpec(radius_dist=dist)
    r = object_radii(spec, 11, 7000)[:10_000]
    assert len(r) == 10_000
    assert stats.kstest(r, spec.radius_distribution().cdf).pvalue > 0.01
    assert r.min() >= 2 and r.max() <= 24


def test_rendered_radii_match_layout():
    spec = DatasetSpec(n_train=6)
    assert np.allclose(gen_synthetic(spec, 2).radii, object_radii(spec, 2, 6))


@pytest.mark.parametrize("kw", [dict(r_min=0.0), dict(r_min=5, r_max=4), dict(radius_dist="normal"),
                                dict(n_classes=5), dict(min_objects=0), dict(image_size=4)])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(DatasetSpec(**kw), 0)


def test_flip_batch_flips_images_and_labels_together():
    ds = gen_synthetic(DatasetSpec(n_train=8, image_size=16, r_max=6), 0)
    im, lab = flip_batch(ds.images, ds.labels, np.random.default_rng(0))
    for i in range(8):
        flipped = np.array_equal(im[i], ds.images[i][..., ::-1])
        assert flipped or np.array_equal(im[i], ds.images[i])
        assert np.array_equal(lab[i], ds.labels[i][..., ::-1] if flipped else ds.labels[i])


# --- config


def test_defaults_mirror_settings():
    cfg = RunConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (1e-4, 1e-4, 4, 30)
    assert cfg.adapter.rank == 3 and cfg.adapter.top_k == 1 and len(cfg.adapter.scales) == 8


def test_parse_sections_and_dotted_keys(tmp_path):
    text = """
    # comment
    seed = 3
    [adapter]
    rank = 4   # trailing
    scales = 1, 2.5
    data.n_train = 12
    [run]
    variant = lora
    """
    assert parse_config(text)["adapter.rank"] == "4"
    p = tmp_path / "a.cfg"
    p.write_text(text)
    cfg = load_config(p, {"lr": "3e-4"})
    assert cfg.seed == 3 and cfg.adapter.rank == 4 and cfg.adapter.scales == [1.0, 2.5]
    assert cfg.data.n_train == 12 and cfg.variant == "lora" and cfg.lr == 3e-4


def test_dump_round_trip(tmp_path):
    cfg = tiny(**{"adapter.scales": "1, 3", "flip": "false", "loss.dice": "2"})
    p = tmp_path / "r.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


@pytest.mark.parametrize("key,value", [("adapter.nope", "1"), ("bogus.rank", "1"), ("flip", "maybe"),
                                       ("variant", "vpt"), ("adapter.top_k", "x")])
def test_bad_config_values(key, value):
    with pytest.raises((ConfigError, ValueError)):
        load_config(None, {key: value})


def test_malformed_line():
    with pytest.raises(ConfigError):
        parse_config("seed 3")


# --- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model, mask = build_model(tiny())
    save_checkpoint(model, mask, tmp_path / "ck")
    entries = read_manifest(tmp_path / "ck")
    assert [e[0] for e in entries] == sorted(n for n, _ in model.named_parameters())
    assert {e[0]: e[2] for e in entries} == mask
    other, _ = build_model(tiny(seed="5"))
    assert param_checksum(other) != param_checksum(model)
    load_checkpoint(other, tmp_path / "ck")
    assert param_checksum(other) == param_checksum(model)


def test_checkpoint_mismatch(tmp_path):
    model, mask = build_model(tiny())
    save_checkpoint(model, mask, tmp_path / "ck")
    lora, _ = build_model(tiny("lora"))
    with pytest.raises(CheckpointError):
        load_checkpoint(lora, tmp_path / "ck")
    wide, _ = build_model(tiny(**{"adapter.rank": "4"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(wide, tmp_path / "ck")
    blob = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(model, tmp_path / "ck")


# --- training and evaluation


def test_pretrained_base_independent_of_downstream_data():
    from convlora import training

    def base(**kw):
        training._PRETRAINED.clear()
        model, _ = build_model(tiny("lora", **{"model.pretrain_steps": "3", **kw}))
        return param_checksum(model.encoder)

    ref = base()
    # a different task distribution or batch size must not change the warm start
    assert base(**{"data.r_min": "12", "data.r_max": "16", "batch_size": "3"}) == ref
    training._PRETRAINED.clear()

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.3, -5.0])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    r1 = train(tiny(out=tmp_path / "a"))
    train(tiny(out=tmp_path / "b"))
    for f in ("checkpoint.bin", "checkpoint.manifest", "metrics.csv", "gate_log.csv", "run.cfg"):
        assert (tmp_path / "a" / f).exists()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    head = (tmp_path / "a" / "gate_log.csv").read_text().splitlines()
    assert head[0] == "layer,step,sample,expert,gate"
    # k = 1: one row per sample per adapter per step
    assert len(head) - 1 == r1.steps * 2 * 6


def test_evaluate_reproduces_recorded_validation(tmp_path):
    res = train(tiny(out=tmp_path))
    rec, decisions = evaluate(tmp_path, "val")
    assert rec.values == res.best_val.values
    again, _ = evaluate(tmp_path, "val")
    assert again.values == rec.values
    assert len(decisions) == 6  # one batch of 4, six adapters


def test_freeze_contract_during_training():
    cfg = tiny("lora")
    base, mask = build_model(cfg)
    before = {n: p.data.copy() for n, p in base.named_parameters()}
    res = train(cfg, write=False)
    changed = {n for n, p in res.model.named_parameters() if not np.array_equal(p.data, before[n])}
    trainable = {n for n, f in res.mask.items() if f}
    assert changed == trainable


def test_decoder_only_keeps_encoder_checksum():
    cfg = tiny("decoder-only")
    model, mask = build_model(cfg)
    enc = {n for n in mask if n.startswith("encoder.")}
    before = param_checksum(model, enc)
    res = train(cfg, write=False)
    assert param_checksum(res.model, enc) == before


def test_fresh_conv_lora_matches_frozen_base():
    cfg = tiny("conv-lora")
    a, _ = build_model(cfg)
    b, _ = build_model(tiny("decoder-only"))
    test = gen_synthetic(cfg.data, cfg.seed, "test")
    ra, _ = evaluate_model(cfg, a, test)
    rb, _ = evaluate_model(cfg, b, test)
    assert ra.values == rb.values


def test_multiclass_training_runs():
    cfg = tiny("conv-lora", task="multiclass", **{"data.n_classes": "3", "epochs": "1"})
    res = train(cfg, write=False)
    assert 0 <= res.test["mIoU"] <= 1


# --- ablations


def test_moe_vs_multiscale_counter_ratio(tmp_path):
    base = tiny(epochs="1")
    rows = ablation_driver("moe-vs-multiscale", base, seeds=(0,), out=tmp_path)
    moe, dense = rows
    n, k = len(base.adapter.scales), base.adapter.top_k
    assert moe["expert_evals"] * n == dense["expert_evals"] * k
    assert moe["expert_evals"] == k * 6 * moe["steps"] * base.batch_size
    header = (tmp_path / "moe-vs-multiscale.csv").read_text().splitlines()[0]
    assert "expert_evals" in header and "iter_per_sec" in header


def test_rank_sweep_counts_increase():
    base = tiny(epochs="0")
    base.model.dim = 32
    rows = ablation_driver("rank-sweep", base)
    counts = [r["trainable_params"] for r in rows]
    assert [r["rank"] for r in rows] == [3, 6, 12, 24]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_best_scale_tie_goes_to_smaller():
    rows = [dict(dataset="d", seed=0, scale=s, value=v) for s, v in ((1.0, 0.5), (2.0, 0.7), (4.0, 0.7))]
    assert best_scale(rows, "d", 0) == 2.0


def test_unknown_suite():
    with pytest.raises(ConfigError):
        ablation_driver("width-sweep")


# --- CLI


def test_cli_usage_errors(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--no-such-flag"]) == 2
    assert cli.main(["ablate", "--suite", "nope"]) == 2
    assert cli.main(["train", "--set", "novalue"]) == 2
    assert cli.main([]) == 2


def test_cli_runtime_error_exit_one(tmp_path, capsys):
    assert cli.main(["train", "--variant", "vpt", "--out", str(tmp_path)]) == 1
    assert cli.main(["eval", str(tmp_path / "missing")]) == 1


def test_cli_train_eval_analyze(tmp_path, capsys):
    cfg = tiny()
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(dump_config(cfg))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfgfile), "--variant", "conv-lora", "--out", str(out)]) == 0
    assert (out / "checkpoint.bin").exists() and (out / "metrics.csv").exists()
    assert cli.main(["eval", str(out), "--split", "val"]) == 0
    assert (out / "eval_val.csv").exists() and (out / "utilization_val.csv").exists()
    assert cli.main(["analyze", str(out), "--images", "4"]) == 0
    for f in ("attention_distance.csv", "spectrum.csv", "utilization.csv", "pred_0.pgm"):
        assert (out / "analysis" / f).exists()
    assert "IoU" in capsys.readouterr().out


def test_cli_gen_data(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "data.n_train=3", "--seed", "2"]) == 0
    z = np.load(tmp_path / "train.npz")
    assert z["images"].shape == (3, 3, 64, 64)
    assert np.array_equal(z["images"], gen_synthetic(DatasetSpec(n_train=3), 2).images)


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seed", "7", "--n-seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "conv_lora_layer" in out and "FAIL" not in out
