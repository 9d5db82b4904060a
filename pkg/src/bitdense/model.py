"""Full multi-task dense prediction network.

Pipeline: shared multi-scale backbone -> (optional variational
bottleneck) -> per-task initial heads -> feature transform -> cross-task
fusion -> per-task final heads, built in three variants:

* ``fp``: nothing binary; sigmoid-gated fusion.
* ``a``: full-precision front-end, binarized fusion module only.
* ``b``: every layer binary except the stem conv, downsampling convs,
  prediction convs, final convs, batchnorm and bottleneck heads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import bitcore, mmd as mmd_mod, nn, tape, vib as vib_mod
from .tape import Tensor
from .tasks import TaskSpec

VARIANTS = ("fp", "a", "b")

DEFAULT_TASKS = (
    TaskSpec("semseg", classes=5),
    TaskSpec("depth"),
    TaskSpec("normal"),
    TaskSpec("boundary"),
)


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "b"
    widths: tuple[int, ...] = (16, 32)
    tasks: tuple[TaskSpec, ...] = DEFAULT_TASKS
    vib: bool = False
    kd_taps: tuple[str, ...] = ()
    estimator: str = "ste"
    head_blocks: int = 2
    blocks_per_scale: int = 1
    stem_stride: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.tasks) < 1:
            raise ValueError("at least one task required")
        if self.head_blocks < 1:
            raise ValueError("head_blocks must be >= 1")
        kinds = [t.kind for t in self.tasks]
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate task kinds in spec")

    @property
    def scales(self) -> int:
        return len(self.widths)

    def canonical_json(self) -> str:
        payload = {
            "variant": self.variant,
            "widths": list(self.widths),
            "tasks": [
                {"kind": t.kind, "classes": t.classes, "loss_weight": t.loss_weight}
                for t in self.tasks
            ],
            "vib": self.vib,
            "kd_taps": list(self.kd_taps),
            "estimator": self.estimator,
            "head_blocks": self.head_blocks,
            "blocks_per_scale": self.blocks_per_scale,
            "stem_stride": self.stem_stride,
        }
        return json.dumps(payload, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def spec_from_dict(d: dict) -> ModelSpec:
    tasks = tuple(
        TaskSpec(t["kind"], classes=t.get("classes", 0),
                 loss_weight=t.get("loss_weight", 1.0))
        for t in d["tasks"]
    )
    return ModelSpec(
        variant=d["variant"],
        widths=tuple(d["widths"]),
        tasks=tasks,
        vib=d["vib"],
        kd_taps=tuple(d.get("kd_taps", ())),
        estimator=d.get("estimator", "ste"),
        head_blocks=d.get("head_blocks", 2),
        blocks_per_scale=d.get("blocks_per_scale", 1),
        stem_stride=d.get("stem_stride", 1),
    )


@dataclass
class ForwardOutputs:
    initial: dict[str, list[Tensor]]        # task kind -> per-scale preds (input res)
    final: dict[str, Tensor]                # task kind -> prediction (input res)
    posteriors: list[vib_mod.GaussianPosterior] | None
    taps: dict[str, Tensor] = field(default_factory=dict)


class MultiTaskModel:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        binary_trunk = spec.variant == "b"
        binary_mmd = spec.variant in ("a", "b")
        est = spec.estimator

        self.backbone = nn.build_backbone(
            spec.widths, binary=binary_trunk, estimator=est,
            stem_stride=spec.stem_stride, blocks_per_scale=spec.blocks_per_scale, rng=rng,
        )
        self.vib_layers = (
            [vib_mod.VIBLayer(w, rng=rng) for w in spec.widths] if spec.vib else None
        )
        # binary heads consume a normalized, re-binarized bottleneck sample
        self.vib_bns = (
            [nn.BatchNorm2d(w) for w in spec.widths]
            if (spec.vib and binary_trunk) else None
        )

        self.heads: dict[str, list[list]] = {}
        self.pred_convs: dict[str, list[nn.Conv2d]] = {}
        self.transform_convs: dict[str, list] = {}
        self.transform_bns: dict[str, list[nn.BatchNorm2d]] = {}
        for task in spec.tasks:
            self.heads[task.kind] = [
                [nn.make_block(w, binary_trunk, est, rng) for _ in range(spec.head_blocks)]
                for w in spec.widths
            ]
            self.pred_convs[task.kind] = [
                nn.Conv2d(w, task.out_channels, bias=True, rng=rng) for w in spec.widths
            ]
            if binary_trunk:
                self.transform_convs[task.kind] = [
                    nn.BinConv2d(task.out_channels, w, estimator=est, rng=rng)
                    for w in spec.widths
                ]
            else:
                self.transform_convs[task.kind] = [
                    nn.Conv2d(task.out_channels, w, rng=rng) for w in spec.widths
                ]
            self.transform_bns[task.kind] = [nn.BatchNorm2d(w) for w in spec.widths]

        n_tasks = len(spec.tasks)
        if binary_mmd:
            self.mmds = [mmd_mod.BinaryMMD(n_tasks, w, est, rng) for w in spec.widths]
        else:
            self.mmds = [mmd_mod.SigmoidMMD(n_tasks, w, rng) for w in spec.widths]

        fused_channels = sum(spec.widths)
        self.final_convs = {
            task.kind: nn.Conv2d(fused_channels, task.out_channels, bias=True, rng=rng)
            for task in spec.tasks
        }

    # ------------------------------------------------------------------
    # structure walks

    def _components(self):
        spec = self.spec
        yield "backbone", self.backbone
        if self.vib_layers is not None:
            for s, layer in enumerate(self.vib_layers):
                yield f"vib.s{s}", layer
        if self.vib_bns is not None:
            for s, bn in enumerate(self.vib_bns):
                yield f"vib_bn.s{s}", bn
        for task in spec.tasks:
            k = task.kind
            for s in range(spec.scales):
                for i, block in enumerate(self.heads[k][s]):
                    yield f"head.{k}.s{s}.b{i}", block
                yield f"pred.{k}.s{s}", self.pred_convs[k][s]
                yield f"transform.{k}.s{s}", self.transform_convs[k][s]
                yield f"transform.{k}.s{s}.bn", self.transform_bns[k][s]
        for s, m in enumerate(self.mmds):
            yield f"mmd.s{s}", m
        for task in spec.tasks:
            yield f"final.{task.kind}", self.final_convs[task.kind]

    def named_parameters(self):
        for prefix, comp in self._components():
            for name, t, klass in comp.parameters():
                yield f"{prefix}.{name}", t, klass

    def batchnorms(self):
        for prefix, comp in self._components():
            if isinstance(comp, nn.BatchNorm2d):
                yield prefix, comp
                continue
            for attr in ("bn_in", "bn1", "bn2"):
                if hasattr(comp, attr):
                    yield f"{prefix}.{attr}", getattr(comp, attr)
            if isinstance(comp, nn.Backbone):
                for i, blocks in enumerate(comp.stages):
                    for j, block in enumerate(blocks):
                        yield f"{prefix}.stage{i}.block{j}.bn1", block.bn1
                        yield f"{prefix}.stage{i}.block{j}.bn2", block.bn2
                for i, (_, bn) in enumerate(comp.downs):
                    yield f"{prefix}.down{i}.bn", bn

    def parameter_audit(self) -> tuple[int, int]:
        fp = sum(t.size for _, t, klass in self.named_parameters() if klass == nn.PARAM_FP)
        binary = sum(t.size for _, t, klass in self.named_parameters() if klass == nn.PARAM_BINARY)
        return fp, binary

    def tap_names(self) -> list[str]:
        names = [f"backbone.s{s}" for s in range(self.spec.scales)]
        for task in self.spec.tasks:
            for s in range(self.spec.scales):
                names.append(f"mmd.{task.kind}.s{s}")
        return names

    # ------------------------------------------------------------------
    # forward

    def forward(self, images, mode: str = "train",
                rng: np.random.Generator | None = None) -> ForwardOutputs:
        spec = self.spec
        x = tape.as_tensor(images)
        n, c, h, w = x.shape
        divisor = spec.stem_stride * (2 ** (spec.scales - 1))
        if h % divisor or w % divisor:
            raise ValueError(f"spatial size {h}x{w} not divisible by {divisor}")

        feats = self.backbone.forward(x, mode)
        taps = {f"backbone.s{s}": f for s, f in enumerate(feats)}

        posteriors = None
        if self.vib_layers is not None:
            posteriors = [vib_mod.vib_encode(l, f) for l, f in zip(self.vib_layers, feats)]
            zs = [vib_mod.reparameterize(p, rng, mode) for p in posteriors]
            if self.vib_bns is not None:
                zs = [
                    tape.ste_sign(bn.forward(z, mode))
                    for bn, z in zip(self.vib_bns, zs)
                ]
        else:
            zs = feats

        initial: dict[str, list[Tensor]] = {}
        task_feats: list[list[Tensor]] = [[] for _ in range(spec.scales)]
        preds_native: dict[str, list[Tensor]] = {}
        for task in spec.tasks:
            k = task.kind
            preds_native[k] = []
            for s in range(spec.scales):
                hfeat = zs[s]
                for block in self.heads[k][s]:
                    hfeat = block.forward(hfeat, mode)
                pred = self.pred_convs[k][s].forward(hfeat)
                preds_native[k].append(pred)
                tfeat = self.transform_bns[k][s].forward(
                    self.transform_convs[k][s].forward(pred), mode
                )
                task_feats[s].append(tfeat)

        fused_per_scale = [m.forward(task_feats[s], mode) for s, m in enumerate(self.mmds)]
        for ti, task in enumerate(spec.tasks):
            for s in range(spec.scales):
                taps[f"mmd.{task.kind}.s{s}"] = fused_per_scale[s][ti]

        base_hw = fused_per_scale[0][0].shape[2:]
        final: dict[str, Tensor] = {}
        for ti, task in enumerate(spec.tasks):
            parts = [fused_per_scale[0][ti]]
            for s in range(1, spec.scales):
                parts.append(tape.upsample_bilinear(fused_per_scale[s][ti], base_hw))
            cat = tape.concat(parts, axis=1) if len(parts) > 1 else parts[0]
            out = self.final_convs[task.kind].forward(cat)
            final[task.kind] = tape.upsample_bilinear(out, (h, w))

        for task in spec.tasks:
            initial[task.kind] = [
                tape.upsample_bilinear(p, (h, w)) for p in preds_native[task.kind]
            ]

        return ForwardOutputs(initial=initial, final=final, posteriors=posteriors, taps=taps)

    # ------------------------------------------------------------------
    # accounting

    def count_ops(self, input_hw: tuple[int, int]) -> tuple[float, float]:
        """Per-sample conv FLOPs (2*MACs) split into fp and binary.
        Convolutions only; normalization, sign and resize ops are not
        counted (the convention the reports state)."""
        spec = self.spec
        h, w = input_hw

        def out_size(size, kernel, stride, padding):
            return (size + 2 * padding - kernel) // stride + 1

        fp = 0.0
        binary = 0.0

        def add(conv, oh, ow):
            nonlocal fp, binary
            macs = conv.macs(oh, ow)
            if isinstance(conv, nn.BinConv2d):
                binary += 2.0 * macs
            else:
                fp += 2.0 * macs

        h0 = out_size(h, 3, spec.stem_stride, 1)
        w0 = out_size(w, 3, spec.stem_stride, 1)
        add(self.backbone.conv_in, h0, w0)
        sizes = [(h0, w0)]
        for s in range(1, spec.scales):
            ph, pw = sizes[-1]
            sizes.append((out_size(ph, 3, 2, 1), out_size(pw, 3, 2, 1)))
        for s, blocks in enumerate(self.backbone.stages):
            sh, sw = sizes[s]
            for block in blocks:
                add(block.conv1, sh, sw)
                add(block.conv2, sh, sw)
        for i, (down, _) in enumerate(self.backbone.downs):
            add(down, *sizes[i + 1])
        if self.vib_layers is not None:
            for s, layer in enumerate(self.vib_layers):
                add(layer.mu_head, *sizes[s])
                add(layer.logvar_head, *sizes[s])
        for task in spec.tasks:
            k = task.kind
            for s in range(spec.scales):
                sh, sw = sizes[s]
                for block in self.heads[k][s]:
                    add(block.conv1, sh, sw)
                    add(block.conv2, sh, sw)
                add(self.pred_convs[k][s], sh, sw)
                add(self.transform_convs[k][s], sh, sw)
        if len(spec.tasks) > 1:
            for s, m in enumerate(self.mmds):
                sh, sw = sizes[s]
                if isinstance(m, mmd_mod.BinaryMMD):
                    convs = list(m.weights.attention) + list(m.weights.message)
                else:
                    convs = list(m.attention) + list(m.message)
                for conv in convs:
                    add(conv, sh, sw)
        for task in spec.tasks:
            add(self.final_convs[task.kind], *sizes[0])
        return fp, binary

    def effective_flops(self, input_hw: tuple[int, int]) -> float:
        fp, binary = self.count_ops(input_hw)
        return bitcore.ops_estimate(fp, binary)

    def memory_footprint(self) -> float:
        fp, binary = self.parameter_audit()
        return bitcore.memory_footprint(fp, binary)

    # ------------------------------------------------------------------
    # state

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.values.copy() for name, t, _ in self.named_parameters()}
        for name, bn in self.batchnorms():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, t, _ in self.named_parameters():
            if name not in state:
                raise ValueError(f"checkpoint missing parameter {name}")
            if state[name].shape != t.values.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.values[...] = state[name]
        for name, bn in self.batchnorms():
            bn.running_mean = state[f"{name}.running_mean"].copy()
            bn.running_var = state[f"{name}.running_var"].copy()


def build(spec: ModelSpec, seed: int = 0) -> MultiTaskModel:
    """Construct a model with deterministic, seed-controlled weights."""
    return MultiTaskModel(spec, rng=np.random.default_rng(seed))
