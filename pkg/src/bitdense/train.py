"""Training: Adam with separate learning-rate groups for binary latents
and full-precision parameters, the per-epoch loop, metrics logging and
checkpointing.

Runs are deterministic for a fixed seed: data order, bottleneck noise
and initialization all come from seeded generators.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import nn, tape, tasks, vib as vib_mod
from .checkpoint import load_model, save_checkpoint
from .config import RunConfig
from .distill import kd_loss
from .model import MultiTaskModel, build
from .synth import SceneSample, dataset_read
from .tape import Tape


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; the last good checkpoint is kept."""


class Adam:
    def __init__(self, named_params, lr_binary: float, lr_fp: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)  # (name, Tensor, klass)
        self.lr = {nn.PARAM_BINARY: lr_binary, nn.PARAM_FP: lr_fp}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.values) for name, t, _ in self.params}
        self.v = {name: np.zeros_like(t.values) for name, t, _ in self.params}

    def zero_grad(self):
        for _, t, _ in self.params:
            t.grad = np.zeros_like(t.values)

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, t, klass in self.params:
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            t.values -= self.lr[klass] * update
            if klass == nn.PARAM_BINARY:
                # keep latents inside the estimator pass-band
                np.clip(t.values, -1.0, 1.0, out=t.values)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def meta(self) -> dict:
        return {"t": self.t}


def batch_from_samples(samples: list[SceneSample]) -> dict:
    return {
        "image": np.stack([s.image.astype(np.float64) for s in samples]),
        "seg": np.stack([s.seg.astype(np.int64) for s in samples]),
        "depth": np.stack([s.depth.astype(np.float64) for s in samples]),
        "normal": np.stack([s.normal.astype(np.float64) for s in samples]),
        "boundary": np.stack([s.boundary.astype(np.float64) for s in samples]),
    }


def _index_batch(arrays: dict, idx) -> dict:
    return {k: v[idx] for k, v in arrays.items()}


def task_losses_for(outputs, batch, kinds) -> dict[str, tape.Tensor]:
    """Per-task loss: final prediction plus every initial (auxiliary)
    prediction, all against the full-resolution labels."""
    loss_fn = {
        "semseg": lambda p: tasks.semseg_loss(p, batch["seg"]),
        "depth": lambda p: tasks.depth_loss(p, batch["depth"]),
        "normal": lambda p: tasks.normal_loss(p, batch["normal"]),
        "boundary": lambda p: tasks.boundary_loss(p, batch["boundary"]),
    }
    losses = {}
    for kind in kinds:
        total = loss_fn[kind](outputs.final[kind])
        for pred in outputs.initial[kind]:
            total = total + loss_fn[kind](pred)
        losses[kind] = total
    return losses


def eval_metrics(model: MultiTaskModel, samples: list[SceneSample],
                 batch_size: int = 16) -> dict:
    """Task metrics of eval-mode final predictions over a dataset."""
    kinds = [t.kind for t in model.spec.tasks]
    preds = {k: [] for k in kinds}
    labels = {"seg": [], "depth": [], "normal": [], "boundary": []}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = batch_from_samples(chunk)
        out = model.forward(batch["image"], mode="eval")
        for k in kinds:
            preds[k].append(out.final[k].values)
        for key in labels:
            labels[key].append(batch[key])
    labels = {k: np.concatenate(v) for k, v in labels.items()}
    metrics = {}
    if "semseg" in kinds:
        seg_pred = np.argmax(np.concatenate(preds["semseg"]), axis=1)
        k = next(t.classes for t in model.spec.tasks if t.kind == "semseg")
        metrics["semseg_miou"] = tasks.metric_miou(seg_pred, labels["seg"], k)
    if "depth" in kinds:
        metrics["depth_rmse"] = tasks.metric_rmse(
            np.concatenate(preds["depth"])[:, 0], labels["depth"]
        )
    if "normal" in kinds:
        metrics["normal_merr"] = tasks.metric_merr(
            np.concatenate(preds["normal"]), labels["normal"]
        )
    if "boundary" in kinds:
        logits = np.concatenate(preds["boundary"])[:, 0]
        prob = 1.0 / (1.0 + np.exp(-logits))
        metrics["boundary_f"] = tasks.metric_boundary_f(prob, labels["boundary"])
    return metrics


def train_run(cfg: RunConfig, log=None) -> dict:
    """Run one training job; returns the final eval metrics record."""
    cfg.validate()
    spec = cfg.model_spec()
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")

    train_samples = dataset_read(cfg.dataset)
    eval_samples = dataset_read(cfg.eval_dataset) if cfg.eval_dataset else []

    model = build(spec, seed=cfg.seed)
    if cfg.init_from:
        init_model, _ = load_model(cfg.init_from, expect_spec=spec)
        model.load_state_dict(init_model.state_dict())

    teacher = None
    kd_tap_ids: list[str] = []
    if cfg.teacher:
        teacher, _ = load_model(cfg.teacher)
        kd_tap_ids = list(cfg.kd_taps) if cfg.kd_taps else model.tap_names()

    optimizer = Adam(model.named_parameters(), cfg.lr_binary, cfg.lr_fp,
                     cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])

    records = []

    def emit(record):
        records.append(record)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        if log:
            log(record)

    open(metrics_path, "w").close()
    kinds = [t.kind for t in spec.tasks]
    train_arrays = batch_from_samples(train_samples)
    last_record = {}
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_samples))
        sums: dict[str, float] = {}
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = _index_batch(train_arrays, idx)

            teacher_taps = None
            if teacher is not None:
                tout = teacher.forward(batch["image"], mode="frozen_batch")
                teacher_taps = {tid: tout.taps[tid] for tid in kd_tap_ids}

            with Tape() as tp:
                out = model.forward(batch["image"], mode="train", rng=noise_rng)
                losses = task_losses_for(out, batch, kinds)
                kl = None
                if out.posteriors is not None:
                    kl = vib_mod.kl_loss(out.posteriors[0])
                    for post in out.posteriors[1:]:
                        kl = kl + vib_mod.kl_loss(post)
                    kl = kl * (1.0 / len(out.posteriors))
                kd = None
                if teacher_taps is not None:
                    kd = kd_loss([(out.taps[tid], teacher_taps[tid]) for tid in kd_tap_ids])
                weights = {t.kind: t.loss_weight for t in spec.tasks}
                total = tasks.total_loss(losses, weights, kl=kl, kd=kd,
                                         beta=cfg.beta, lambda_kd=cfg.lambda_kd)
            if not np.isfinite(total.values).all():
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: {ckpt_path}"
                )
            optimizer.zero_grad()
            tp.backward(total)
            optimizer.step()

            nb += 1
            sums["loss"] = sums.get("loss", 0.0) + total.item()
            for k, v in losses.items():
                sums[f"loss_{k}"] = sums.get(f"loss_{k}", 0.0) + v.item()
            if kl is not None:
                sums["kl"] = sums.get("kl", 0.0) + kl.item()
            if kd is not None:
                sums["kd"] = sums.get("kd", 0.0) + kd.item()

        record = {"epoch": epoch, "split": "train"}
        record.update({k: v / nb for k, v in sums.items()})
        emit(record)

        if eval_samples:
            ev = {"epoch": epoch, "split": "eval"}
            ev.update(eval_metrics(model, eval_samples))
            emit(ev)
            last_record = ev

        save_checkpoint(
            ckpt_path, model, epoch=epoch,
            optimizer_arrays=optimizer.state_arrays(),
            optimizer_meta=optimizer.meta(),
            rng_state={"shuffle": shuffle_rng.bit_generator.state,
                       "noise": noise_rng.bit_generator.state},
        )
    return last_record
