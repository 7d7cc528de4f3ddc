"""Segmentation model assembly, training loop, evaluation and checkpoints."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import tensor as T
from .adapters import EvalCounter, moe_balance_loss
from .config import RunConfig, dump_config, load_config
from .data import DatasetSpec, SyntheticDataset, flip_batch, gen_synthetic
from .encoder import EncoderConfig, ForwardState, MiniViT, apply_freeze
from .errors import CheckpointError, NonFiniteError
from .nn import Module
from .optim import Adam
from .seg import (MaskDecoder, MetricsRecord, Segment, compute_metrics, hungarian_match,
                  match_cost, multiclass_loss, semantic_inference, structure_loss,
                  write_metrics_csv)

log = logging.getLogger(__name__)


class SegModel(Module):
    def __init__(self, encoder: MiniViT, decoder: MaskDecoder):
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, images, rng=None):
        feats, state = self.encoder(images, rng)
        return self.decoder(feats), state


def variant_setup(variant: str) -> tuple[str, str]:
    """variant -> (adapter kind, freeze policy)."""
    return {
        "decoder-only": ("none", "decoder-only"),
        "lora": ("lora", "peft"),
        "conv-lora": ("conv-lora", "peft"),
        "multi-scale": ("multi-scale", "peft"),
        "single-expert": ("conv-lora", "peft"),
        "full": ("none", "full"),
        "from-scratch": ("none", "from-scratch"),
    }[variant]


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    kind, _ = variant_setup(cfg.variant)
    a = cfg.adapter
    m = cfg.model
    n = len(a.scales)
    return EncoderConfig(image_size=cfg.data.image_size, patch_size=m.patch_size, dim=m.dim,
                         depth=m.depth, heads=m.heads, mlp_ratio=m.mlp_ratio, adapter=kind,
                         rank=a.rank, n_experts=n, scales=list(a.scales), top_k=min(a.top_k, n),
                         gate_init_std=None if a.gate_init_std < 0 else a.gate_init_std,
                         expert_init=a.expert_init)


def n_decoder_classes(cfg: RunConfig) -> int:
    # background counts as a semantic category in the multiclass task
    return 1 if cfg.task == "binary" else cfg.data.n_classes + 1


def build_model(cfg: RunConfig) -> tuple[SegModel, dict[str, bool]]:
    """Encoder (frozen base + adapters) and decoder, freeze policy applied.

    Base weights depend only on ``cfg.seed``, so every variant of a seed adapts
    the same frozen encoder.
    """
    kind, policy = variant_setup(cfg.variant)
    ss = np.random.SeedSequence(cfg.seed)
    base_seed, adapter_seed, dec_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    if policy == "from-scratch":
        base_seed += 1
    enc = MiniViT(encoder_config(cfg), seed=base_seed, adapter_seed=adapter_seed)
    if cfg.model.pretrain_steps and policy != "from-scratch":
        pretrain_base(enc, cfg)
    n_tokens = cfg.model.n_tokens if cfg.task == "binary" else max(cfg.model.n_tokens, 16)
    # the binary structure loss never reads class logits, so that task gets no class branch
    dec = MaskDecoder(cfg.model.dim, n_tokens, n_decoder_classes(cfg), cfg.data.image_size,
                      np.random.default_rng(dec_seed), class_head=cfg.task != "binary")
    model = SegModel(enc, dec)
    mask = apply_freeze(model, policy)
    return model, mask


_PRETRAINED: dict = {}
PRETRAIN_BATCH = 4


def pretrain_base(enc: MiniViT, cfg: RunConfig) -> None:
    """Warm-start the backbone with full training on a generic pretext scene set.

    Pretext objects differ from the background by colour only (same texture),
    so downstream texture cues still need adaptation.  Results are cached
    per (seed, backbone shape, image size, steps).
    """
    key = (cfg.seed, cfg.model.patch_size, cfg.model.dim, cfg.model.depth, cfg.model.heads,
           cfg.model.mlp_ratio, cfg.data.image_size, cfg.model.pretrain_steps)
    base_names = [n for n, _ in enc.named_parameters() if ".adapter." not in n]
    if key not in _PRETRAINED:
        pre_cfg = copy.deepcopy(cfg)
        pre_cfg.variant = "full"
        pre_cfg.task = "binary"
        # fixed scene distribution: only the image size follows the downstream task
        pre_cfg.data = DatasetSpec(image_size=cfg.data.image_size, n_train=64, fg_shift=1.0,
                                   fg_sigma=DatasetSpec.bg_sigma)
        pre_cfg.batch_size = PRETRAIN_BATCH
        pre_cfg.model.pretrain_steps = 0
        pre_cfg.adapter.scales = [1.0]
        model, _ = build_model(pre_cfg)
        data = gen_synthetic(pre_cfg.data, cfg.seed + 104729, "train")
        opt = Adam(model.parameters(), lr=1e-3)
        rng = np.random.default_rng(cfg.seed + 7)
        for _ in range(cfg.model.pretrain_steps):
            idx = rng.choice(len(data), PRETRAIN_BATCH, replace=False)
            out, _ = model(data.images[idx])
            loss = structure_loss(out.mask_logits, data.masks[idx][:, None])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        src = dict(model.encoder.named_parameters())
        _PRETRAINED[key] = {n: src[n].data.copy() for n in base_names}
    params = dict(enc.named_parameters())
    for n in base_names:
        params[n].data[...] = _PRETRAINED[key][n]


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Module, mask: dict[str, bool], path) -> None:
    """Flat little-endian float64 blob plus a ``name<TAB>shape<TAB>trainable`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    names = sorted(params)
    with open(path.with_suffix(".bin"), "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())
    with open(path.with_suffix(".manifest"), "w") as fh:
        for n in names:
            shape = "x".join(str(s) for s in params[n].shape) or "scalar"
            fh.write(f"{n}\t{shape}\t{int(mask.get(n, False))}\n")


def read_manifest(path) -> list[tuple[str, tuple[int, ...], bool]]:
    entries = []
    for line in Path(path).with_suffix(".manifest").read_text().splitlines():
        name, shape, flag = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        entries.append((name, dims, flag == "1"))
    return entries


def load_checkpoint(model: Module, path) -> None:
    path = Path(path)
    entries = read_manifest(path)
    params = dict(model.named_parameters())
    if sorted(params) != [e[0] for e in entries]:
        raise CheckpointError("checkpoint parameter names do not match the model")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    offset = 0
    for name, shape, _ in entries:
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} vs model {params[name].shape}")
        n = int(np.prod(shape)) if shape else 1
        if offset + n > blob.size:
            raise CheckpointError("checkpoint blob is truncated")
        params[name].data[...] = blob[offset:offset + n].reshape(shape)
        offset += n
    if offset != blob.size:
        raise CheckpointError("checkpoint blob has trailing data")


def param_checksum(model: Module, names=None) -> str:
    import hashlib

    h = hashlib.sha256()
    for n, p in sorted(model.named_parameters()):
        if names is None or n in names:
            h.update(n.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# training and evaluation


@dataclass
class RunResult:
    cfg: RunConfig
    model: SegModel
    mask: dict
    metrics_rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: MetricsRecord | None = None
    test: MetricsRecord | None = None
    step_times: list = field(default_factory=list)
    expert_evals: int = 0
    steps: int = 0
    gate_rows: list = field(default_factory=list)


def gt_segments(labels: np.ndarray) -> list[Segment]:
    return [Segment(int(c), (labels == c).astype(np.float64)) for c in np.unique(labels)]


def compute_loss(cfg: RunConfig, out, state: ForwardState, labels: np.ndarray,
                 rng: np.random.Generator) -> T.Tensor:
    decisions = [d for _, _, d in state.decisions]
    moe = moe_balance_loss(decisions, 1.0, cfg.adapter.balance_source) if decisions else None
    if cfg.task == "binary":
        loss = structure_loss(out.mask_logits[:, :1], (labels > 0).astype(np.float64)[:, None])
        if moe is not None:
            loss = loss + moe * cfg.adapter.balance_weight
        return loss
    gts = [gt_segments(l) for l in labels]
    matchings = []
    for b, segs in enumerate(gts):
        cost = match_cost(out.mask_logits.data[b], out.class_logits.data[b], segs, cfg.loss,
                          cfg.num_points, rng)
        matchings.append(hungarian_match(cost))
    weights = copy.copy(cfg.loss)
    weights.moe = cfg.adapter.balance_weight
    return multiclass_loss(out, gts, matchings, weights, moe, cfg.num_points, rng)


def predict(cfg: RunConfig, model: SegModel, images: np.ndarray, batch: int = 8):
    """Eval-mode predictions -> (labels or masks, foreground probs, ForwardState list)."""
    model.eval()
    preds, probs, states = [], [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out, state = model(images[i:i + batch])
            states.append(state)
            if cfg.task == "binary":
                p = special.expit(out.mask_logits.data[:, 0])
                preds.append(p > 0.5)
                probs.append(p)
            else:
                preds.append(semantic_inference(out))
    model.train()
    pred = np.concatenate(preds)
    return pred, (np.concatenate(probs) if probs else None), states


def evaluate_model(cfg: RunConfig, model: SegModel, data: SyntheticDataset):
    pred, prob, states = predict(cfg, model, data.images)
    if cfg.task == "binary":
        rec = compute_metrics(pred, data.labels > 0, prob)
    else:
        rec = compute_metrics(pred, data.labels, n_classes=cfg.data.n_classes)
    return rec, states


def primary_metric(cfg: RunConfig) -> str:
    return "IoU" if cfg.task == "binary" else "mIoU"


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.variant}-s{cfg.seed}"


def train(cfg: RunConfig, write: bool = True) -> RunResult:
    """Train one variant; keeps the best-on-validation parameters.

    Writes ``checkpoint.bin/.manifest``, ``metrics.csv``, ``gate_log.csv`` and
    ``run.cfg`` under ``cfg.out`` when ``write`` is set.
    """
    cfg.validate()
    model, mask = build_model(cfg)
    trainable = [p for n, p in model.named_parameters() if mask[n]]
    opt = Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ss = np.random.SeedSequence([cfg.seed, 1])
    shuffle_rng, flip_rng, noise_rng, point_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    train_set = gen_synthetic(cfg.data, cfg.seed, "train")
    val_set = gen_synthetic(cfg.data, cfg.seed, "val")
    res = RunResult(cfg, model, mask)
    rid = run_id(cfg)
    key = primary_metric(cfg)
    best_score, best_params = -np.inf, None
    params = dict(model.named_parameters())
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            images, labels = train_set.images[idx], train_set.labels[idx]
            if cfg.flip:
                images, labels = flip_batch(images, labels, flip_rng)
            t0 = time.perf_counter()
            out, state = model(images, noise_rng)
            loss = compute_loss(cfg, out, state, labels, point_rng)
            if not np.isfinite(loss.data).all():
                raise NonFiniteError(f"loss diverged at epoch {epoch}, step {step}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            res.step_times.append(time.perf_counter() - t0)
            res.expert_evals += state.counter.count
            losses.append(float(loss.data))
            for layer, proj, dec in state.decisions:
                for b, row in enumerate(dec.gates.data):
                    for e in np.flatnonzero(row > 0):
                        res.gate_rows.append((f"{layer}.{proj}", step, b, int(e), float(row[e])))
            step += 1
        res.steps = step
        val, _ = evaluate_model(cfg, model, val_set)
        res.metrics_rows.append((rid, epoch, "train", "loss", float(np.mean(losses)) if losses else 0.0))
        res.metrics_rows.extend(val.rows(rid, epoch, "val"))
        if val[key] > best_score:
            best_score = val[key]
            res.best_epoch, res.best_val = epoch, val
            best_params = {n: params[n].data.copy() for n in params if mask[n]}
    if best_params is not None:
        for n, v in best_params.items():
            params[n].data[...] = v
    test_set = gen_synthetic(cfg.data, cfg.seed, "test")
    res.test, _ = evaluate_model(cfg, model, test_set)
    res.metrics_rows.extend(res.test.rows(rid, res.best_epoch, "test"))
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, mask, out / "checkpoint")
        (out / "run.cfg").write_text(dump_config(cfg))
        write_metrics_csv(out / "metrics.csv", res.metrics_rows)
        with open(out / "gate_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("layer", "step", "sample", "expert", "gate"))
            w.writerows(res.gate_rows)
    return res


def evaluate(checkpoint_dir, split: str = "test") -> tuple[MetricsRecord, list]:
    """Reload a run directory and evaluate one split in eval mode (no gate noise).

    Returns the metrics and the gate decisions logged during the pass.
    """
    d = Path(checkpoint_dir)
    cfg = load_config(d / "run.cfg")
    model, _ = build_model(cfg)
    load_checkpoint(model, d / "checkpoint")
    data = gen_synthetic(cfg.data, cfg.seed, split)
    rec, states = evaluate_model(cfg, model, data)
    decisions = [item for s in states for item in s.decisions]
    return rec, decisions
