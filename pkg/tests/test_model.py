import numpy as np
import pytest

from bitdense import nn, tape, tasks
from bitdense.distill import capture_taps, kd_loss
from bitdense.model import DEFAULT_TASKS, ModelSpec, MultiTaskModel, build, spec_from_dict
from bitdense.tape import Tape, Tensor
from bitdense.tasks import TaskSpec


def tiny_spec(variant="b", vib=False, tasks=None, widths=(4, 8)):
    return ModelSpec(
        variant=variant,
        widths=widths,
        tasks=tasks or (
            TaskSpec("semseg", classes=3),
            TaskSpec("depth"),
        ),
        vib=vib,
        head_blocks=1,
    )


class TestBuildAndAudit:
    def test_fp_variant_all_fp(self):
        m = build(tiny_spec("fp"), seed=0)
        fp, binary = m.parameter_audit()
        assert binary == 0
        assert fp > 0

    def test_variant_a_binary_is_exactly_mmd(self):
        m = build(tiny_spec("a"), seed=0)
        binary_names = [n for n, _, k in m.named_parameters() if k == nn.PARAM_BINARY]
        assert binary_names
        assert all(n.startswith("mmd.") for n in binary_names)

    def test_variant_b_fp_parameters_are_boundary_layers(self):
        m = build(tiny_spec("b", vib=True), seed=0)
        for name, _, klass in m.named_parameters():
            if klass != nn.PARAM_FP:
                continue
            boundary = (
                "conv_in" in name or "down" in name or "gamma" in name
                or "beta" in name or "bias" in name
                or name.startswith("pred.") or name.startswith("final.")
                or name.startswith("vib.")
            )
            assert boundary, f"unexpected FP parameter {name}"

    def test_audit_matches_hand_tally_variant_b(self):
        spec = ModelSpec(variant="b", widths=(4,),
                         tasks=(TaskSpec("depth"),), head_blocks=1)
        m = build(spec, seed=0)
        fp, binary = m.parameter_audit()
        # binary: 1 backbone block (2 convs 4->4) + 1 head block + transform 1->4
        want_binary = 2 * (4 * 4 * 9) + 2 * (4 * 4 * 9) + 4 * 1 * 9
        # fp: stem conv 4*3*9, bn_in 8, block bns 2*(8+8), pred conv 1*4*9+1,
        # transform bn 8, final conv 1*4*9+1
        want_fp = 4 * 3 * 9 + 8 + 16 + 16 + (4 * 9 + 1) + 8 + (4 * 9 + 1)
        assert binary == want_binary
        assert fp == want_fp

    def test_counts_invariant_across_forward(self):
        m = build(tiny_spec("b"), seed=1)
        before = m.parameter_audit()
        m.forward(np.random.default_rng(0).standard_normal((1, 3, 8, 8)), mode="eval")
        assert m.parameter_audit() == before

    def test_footprint_monotone_across_variants(self):
        specs = {v: tiny_spec(v) for v in ("fp", "a", "b")}
        foot = {v: build(s, seed=0).memory_footprint() for v, s in specs.items()}
        assert foot["b"] < foot["a"] < foot["fp"]

    def test_effective_flops_ordering(self):
        flops = {
            v: build(tiny_spec(v), seed=0).effective_flops((16, 16))
            for v in ("fp", "a", "b")
        }
        assert flops["b"] < flops["a"] < flops["fp"]

    def test_op_count_matches_hand_tally(self):
        spec = ModelSpec(variant="b", widths=(4,), tasks=(TaskSpec("depth"),),
                         head_blocks=1, stem_stride=1)
        m = build(spec, seed=0)
        fp_flops, binary_ops = m.count_ops((16, 16))
        px = 16 * 16
        stem = px * 3 * 9 * 4
        backbone_block = 2 * px * 4 * 9 * 4
        head_block = 2 * px * 4 * 9 * 4
        pred = px * 4 * 9 * 1
        transform = px * 1 * 9 * 4
        final = px * 4 * 9 * 1
        assert fp_flops == 2 * (stem + pred + final)
        assert binary_ops == 2 * (backbone_block + head_block + transform)
        want_effective = 2 * (stem + pred + final) + 2 * (
            backbone_block + head_block + transform) / 64
        assert m.effective_flops((16, 16)) == want_effective

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="variant"):
            ModelSpec(variant="x")
        with pytest.raises(ValueError, match="task"):
            ModelSpec(tasks=())
        with pytest.raises(ValueError, match="duplicate"):
            ModelSpec(tasks=(TaskSpec("depth"), TaskSpec("depth")))

    def test_spec_hash_roundtrip(self):
        spec = tiny_spec("a", vib=True)
        d = __import__("json").loads(spec.canonical_json())
        assert spec_from_dict(d).hash() == spec.hash()

    def test_parameters_registered_exactly_once(self):
        m = build(ModelSpec(variant="b", widths=(4, 8), tasks=DEFAULT_TASKS,
                            vib=True, head_blocks=2), seed=0)
        params = list(m.named_parameters())
        names = [n for n, _, _ in params]
        ids = [id(t) for _, t, _ in params]
        assert len(names) == len(set(names))
        assert len(ids) == len(set(ids))

    def test_default_spec_output_contract_64px(self):
        m = build(ModelSpec(variant="b", tasks=DEFAULT_TASKS), seed=0)
        out = m.forward(np.zeros((1, 3, 64, 64)), mode="eval")
        assert out.final["semseg"].shape == (1, 5, 64, 64)
        assert out.final["depth"].shape == (1, 1, 64, 64)
        assert out.final["normal"].shape == (1, 3, 64, 64)
        assert out.final["boundary"].shape == (1, 1, 64, 64)


class TestForward:
    def test_output_shapes_four_tasks(self):
        spec = ModelSpec(variant="b", widths=(4, 8), tasks=DEFAULT_TASKS, head_blocks=1)
        m = build(spec, seed=0)
        rng = np.random.default_rng(0)
        out = m.forward(rng.standard_normal((1, 3, 16, 16)), mode="eval")
        assert out.final["semseg"].shape == (1, 5, 16, 16)
        assert out.final["depth"].shape == (1, 1, 16, 16)
        assert out.final["normal"].shape == (1, 3, 16, 16)
        assert out.final["boundary"].shape == (1, 1, 16, 16)
        for k in out.initial:
            assert len(out.initial[k]) == 2
            for p in out.initial[k]:
                assert p.shape[2:] == (16, 16)

    def test_eval_deterministic(self):
        m = build(tiny_spec("b", vib=True), seed=2)
        x = np.random.default_rng(1).standard_normal((2, 3, 8, 8))
        out1 = m.forward(x, mode="eval")
        out2 = m.forward(x, mode="eval")
        for k in out1.final:
            assert np.array_equal(out1.final[k].values, out2.final[k].values)

    def test_indivisible_size_rejected(self):
        m = build(tiny_spec("b"), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            m.forward(np.zeros((1, 3, 9, 9)))

    def test_front_end_purity(self):
        m = build(tiny_spec("b"), seed=3)
        x = np.random.default_rng(2).standard_normal((1, 3, 8, 8))
        before = {k: [p.values.copy() for p in v]
                  for k, v in m.forward(x, mode="eval").initial.items()}
        for _, t, _ in m.mmds[0].parameters():
            t.values[:] = -t.values
        for conv in m.final_convs.values():
            conv.weight.values[:] = 0.0
        after = m.forward(x, mode="eval").initial
        for k in before:
            for a, b in zip(before[k], after[k]):
                assert np.array_equal(a, b.values)

    def test_fp_vs_gateclosed_variant_a_identical(self):
        # with transform BNs forced to emit -1 maps, variant A's gates all
        # close and the fp variant's zeroed message convs send nothing, so
        # the two models' final heads see identical fused features
        spec_fp = tiny_spec("fp")
        spec_a = tiny_spec("a")
        m_fp = build(spec_fp, seed=7)
        m_a = build(spec_a, seed=7)
        x = np.random.default_rng(3).standard_normal((1, 3, 8, 8))

        for m in (m_fp, m_a):
            for kind in m.transform_bns:
                for bn in m.transform_bns[kind]:
                    bn.gamma.values[:] = 0.0
                    bn.beta.values[:] = -1.0
        for mm in m_a.mmds:
            for conv in mm.weights.attention:
                conv.latent_weight.values[:] = 0.5  # +1 kernels -> gates closed
        for mm in m_fp.mmds:
            for conv in mm.message:
                conv.weight.values[:] = 0.0

        out_fp = m_fp.forward(x, mode="eval")
        out_a = m_a.forward(x, mode="eval")
        for k in out_fp.final:
            assert np.allclose(out_fp.final[k].values, out_a.final[k].values)

    def test_no_dead_parameters(self):
        rng = np.random.default_rng(4)
        spec = ModelSpec(variant="b", widths=(4, 8), tasks=DEFAULT_TASKS,
                         vib=True, head_blocks=1)
        m = build(spec, seed=5)
        alive = {name: False for name, _, _ in m.named_parameters()}
        for trial in range(10):
            x = rng.standard_normal((2, 3, 8, 8))
            labels_seg = rng.integers(0, 5, (2, 8, 8))
            depth = rng.uniform(1, 3, (2, 8, 8))
            nraw = rng.standard_normal((2, 3, 8, 8))
            normal = nraw / np.linalg.norm(nraw, axis=1, keepdims=True)
            bnd = rng.integers(0, 2, (2, 8, 8)).astype(float)
            for _, t, _ in m.named_parameters():
                t.grad = None
            with Tape() as tp:
                out = m.forward(x, mode="train", rng=rng)
                losses = {
                    "semseg": tasks.semseg_loss(out.final["semseg"], labels_seg),
                    "depth": tasks.depth_loss(out.final["depth"], depth),
                    "normal": tasks.normal_loss(out.final["normal"], normal),
                    "boundary": tasks.boundary_loss(out.final["boundary"], bnd),
                }
                for kind in losses:
                    for p in out.initial[kind]:
                        losses[kind] = losses[kind] + {
                            "semseg": tasks.semseg_loss,
                            "depth": tasks.depth_loss,
                            "normal": tasks.normal_loss,
                            "boundary": tasks.boundary_loss,
                        }[kind](p, {"semseg": labels_seg, "depth": depth,
                                    "normal": normal, "boundary": bnd}[kind])
                kl = sum((__import__("bitdense.vib", fromlist=["kl_loss"]).kl_loss(p)
                          for p in out.posteriors), tape.constant(0.0))
                loss = tasks.total_loss(losses, kl=kl, beta=0.01)
            tp.backward(loss)
            for name, t, _ in m.named_parameters():
                if t.grad is not None and np.any(t.grad != 0):
                    alive[name] = True
        dead = [n for n, ok in alive.items() if not ok]
        assert not dead, f"dead parameters: {dead}"


class TestStateDict:
    def test_roundtrip_bitexact_forward(self):
        m = build(tiny_spec("b", vib=True), seed=8)
        rng = np.random.default_rng(5)
        # move running stats off their init values
        m.forward(rng.standard_normal((2, 3, 8, 8)), mode="train", rng=rng)
        x = rng.standard_normal((1, 3, 8, 8))
        want = m.forward(x, mode="eval").final
        state = m.state_dict()
        m2 = build(tiny_spec("b", vib=True), seed=999)
        m2.load_state_dict(state)
        got = m2.forward(x, mode="eval").final
        for k in want:
            assert np.array_equal(want[k].values, got[k].values)

    def test_missing_key_rejected(self):
        m = build(tiny_spec("b"), seed=0)
        state = m.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ValueError):
            m.load_state_dict(state)


class TestTaps:
    def test_tap_shapes_and_order(self):
        spec = tiny_spec("b")
        m = build(spec, seed=9)
        x = np.random.default_rng(6).standard_normal((1, 3, 8, 8))
        feats = capture_taps(m, ["backbone.s0", "backbone.s1"], x)
        assert feats[0].shape == (1, 4, 8, 8)
        assert feats[1].shape == (1, 8, 4, 4)

    def test_zero_taps_empty(self):
        m = build(tiny_spec("b"), seed=9)
        x = np.random.default_rng(6).standard_normal((1, 3, 8, 8))
        assert capture_taps(m, [], x) == []

    def test_unknown_tap_rejected(self):
        m = build(tiny_spec("b"), seed=9)
        with pytest.raises(ValueError, match="unknown tap"):
            capture_taps(m, ["nope"], np.zeros((1, 3, 8, 8)))

    def test_mmd_tap_count(self):
        spec = ModelSpec(variant="b", widths=(4, 8), tasks=DEFAULT_TASKS, head_blocks=1)
        m = build(spec, seed=9)
        mmd_taps = [t for t in m.tap_names() if t.startswith("mmd.")]
        assert len(mmd_taps) == len(DEFAULT_TASKS) * 2

    def test_mmd_taps_are_binary(self):
        m = build(tiny_spec("b"), seed=10)
        x = np.random.default_rng(7).standard_normal((1, 3, 8, 8))
        out = m.forward(x, mode="eval")
        for name, t in out.taps.items():
            if name.startswith("mmd."):
                assert set(np.unique(t.values)) <= {-1.0, 1.0}

    def test_teacher_student_kd_zero_for_same_model(self):
        spec = tiny_spec("fp")
        m = build(spec, seed=11)
        x = np.random.default_rng(8).standard_normal((1, 3, 8, 8))
        taps = ["backbone.s0", "backbone.s1"]
        s_feats = capture_taps(m, taps, x)
        t_feats = capture_taps(m, taps, x)
        assert kd_loss(list(zip(s_feats, t_feats))).item() == 0.0
