import numpy as np
import pytest

from bitdense import tape, tasks
from bitdense.tape import Tensor, gradcheck
from bitdense.tasks import (
    TaskSpec,
    boundary_loss,
    depth_loss,
    metric_boundary_f,
    metric_merr,
    metric_miou,
    metric_rmse,
    normal_loss,
    semseg_loss,
    total_loss,
)


class TestTaskSpec:
    def test_out_channels(self):
        assert TaskSpec("semseg", classes=5).out_channels == 5
        assert TaskSpec("depth").out_channels == 1
        assert TaskSpec("normal").out_channels == 3
        assert TaskSpec("boundary").out_channels == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            TaskSpec("semseg", classes=1)
        with pytest.raises(ValueError):
            TaskSpec("flying")
        with pytest.raises(ValueError):
            TaskSpec("depth", loss_weight=0.0)


class TestSemseg:
    def test_confident_correct_goes_to_zero(self):
        labels = np.array([[[0, 1], [2, 3]]])
        logits = np.full((1, 4, 2, 2), -50.0)
        for i in range(2):
            for j in range(2):
                logits[0, labels[0, i, j], i, j] = 50.0
        loss = semseg_loss(Tensor(logits), labels)
        assert loss.item() < 1e-8

    def test_uniform_logits_log_k(self):
        labels = np.zeros((1, 3, 3), dtype=int)
        logits = np.zeros((1, 4, 3, 3))
        assert semseg_loss(Tensor(logits), labels).item() == pytest.approx(np.log(4))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((2, 5, 4, 4))
        labels = rng.integers(0, 5, (2, 4, 4))
        got = semseg_loss(Tensor(logits), labels).item()
        total = 0.0
        for n in range(2):
            for i in range(4):
                for j in range(4):
                    z = logits[n, :, i, j]
                    p = np.exp(z - z.max())
                    p /= p.sum()
                    total += -np.log(p[labels[n, i, j]])
        assert got == pytest.approx(total / 32, abs=1e-8)

    def test_ignore_index_excluded(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((1, 3, 2, 2))
        labels = np.array([[[0, 255], [1, 255]]])
        base = semseg_loss(Tensor(logits), labels).item()
        perturbed = logits.copy()
        perturbed[0, :, 0, 1] += 100.0
        perturbed[0, :, 1, 1] -= 50.0
        assert semseg_loss(Tensor(perturbed), labels).item() == base

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            semseg_loss(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 7))

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
        labels = rng.integers(0, 4, (1, 3, 3))
        assert gradcheck(lambda p: semseg_loss(p, labels), [logits]) < 1e-6


class TestDepth:
    def test_perfect(self):
        label = np.ones((1, 3, 3))
        assert depth_loss(Tensor(label.reshape(1, 1, 3, 3)), label).item() == 0.0

    def test_constant_offset(self):
        label = np.ones((1, 3, 3))
        pred = Tensor(label.reshape(1, 1, 3, 3) + 0.5)
        assert depth_loss(pred, label).item() == pytest.approx(0.5)

    def test_matches_loop_oracle_with_mask(self):
        rng = np.random.default_rng(3)
        label = rng.uniform(1, 5, (2, 4, 4))
        pred = rng.uniform(1, 5, (2, 1, 4, 4))
        valid = rng.random((2, 4, 4)) > 0.3
        got = depth_loss(Tensor(pred), label, valid).item()
        diffs = [abs(pred[n, 0, i, j] - label[n, i, j])
                 for n in range(2) for i in range(4) for j in range(4) if valid[n, i, j]]
        assert got == pytest.approx(np.mean(diffs))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            depth_loss(Tensor(np.ones((1, 1, 2, 2))), np.ones((1, 2, 2)),
                       np.zeros((1, 2, 2), dtype=bool))

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        pred = Tensor(rng.uniform(1, 3, (1, 1, 3, 3)), requires_grad=True)
        label = rng.uniform(1, 3, (1, 3, 3))
        assert gradcheck(lambda p: depth_loss(p, label), [pred]) < 1e-4


class TestBoundary:
    def test_confident_correct_goes_to_zero(self):
        labels = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        logits = np.where(labels > 0, 60.0, -60.0).reshape(1, 1, 2, 2)
        assert boundary_loss(Tensor(logits), labels).item() < 1e-8

    def test_half_positive_at_even_odds(self):
        labels = np.array([[[1.0, 0.0]]])
        logits = np.zeros((1, 1, 1, 2))
        got = boundary_loss(Tensor(logits), labels).item()
        assert got == pytest.approx(0.5 * np.log(2))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((1, 1, 3, 3))
        labels = rng.integers(0, 2, (1, 3, 3)).astype(float)
        got = boundary_loss(Tensor(logits), labels).item()
        total = 0.0
        for i in range(3):
            for j in range(3):
                x = logits[0, 0, i, j]
                p = 1 / (1 + np.exp(-x))
                y = labels[0, i, j]
                total += -(0.95 * y * np.log(p) + 0.05 * (1 - y) * np.log(1 - p))
        assert got == pytest.approx(total / 9, abs=1e-8)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        logits = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        labels = rng.integers(0, 2, (1, 3, 3)).astype(float)
        assert gradcheck(lambda p: boundary_loss(p, labels), [logits]) < 1e-6


class TestNormal:
    def test_perfect(self):
        label = np.zeros((1, 3, 2, 2))
        label[:, 2] = 1.0
        assert normal_loss(Tensor(label * 3.0), label).item() == pytest.approx(0.0, abs=1e-6)

    def test_opposite_axis_aligned(self):
        label = np.zeros((1, 3, 2, 2))
        label[:, 0] = 1.0
        assert normal_loss(Tensor(-label), label).item() == pytest.approx(2.0, abs=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        pred = rng.standard_normal((1, 3, 3, 3))
        raw = rng.standard_normal((1, 3, 3, 3))
        label = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        got = normal_loss(Tensor(pred), label).item()
        total = 0.0
        for i in range(3):
            for j in range(3):
                p = pred[0, :, i, j]
                p = p / np.sqrt((p * p).sum() + 1e-12)
                total += np.abs(p - label[0, :, i, j]).sum()
        assert got == pytest.approx(total / 9)

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        pred = Tensor(rng.uniform(0.5, 1.5, (1, 3, 2, 2)), requires_grad=True)
        raw = rng.standard_normal((1, 3, 2, 2))
        label = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        assert gradcheck(lambda p: normal_loss(p, label), [pred]) < 1e-4


class TestTotalLoss:
    def test_single_task_passthrough(self):
        t = total_loss({"semseg": tape.constant(1.5)})
        assert t.item() == 1.5

    def test_all_zero(self):
        t = total_loss({"a": tape.constant(0.0)}, kl=tape.constant(0.0),
                       kd=tape.constant(0.0), beta=1.0, lambda_kd=1.0)
        assert t.item() == 0.0

    def test_arithmetic(self):
        t = total_loss(
            {"a": tape.constant(1.0), "b": tape.constant(2.0)},
            weights={"a": 2.0, "b": 0.5},
            kl=tape.constant(3.0), kd=tape.constant(4.0), beta=0.01, lambda_kd=0.1,
        )
        assert t.item() == pytest.approx(2.0 + 1.0 + 0.03 + 0.4)


class TestMetrics:
    def test_miou_perfect_and_disjoint(self):
        labels = np.array([[0, 1], [1, 0]])
        assert metric_miou(labels, labels, 2) == 1.0
        assert metric_miou(1 - labels, labels, 2) == 0.0

    def test_miou_hand_confusion(self):
        pred = np.array([[0, 0, 1], [1, 1, 0]])
        labels = np.array([[0, 1, 1], [1, 1, 1]])
        iou0 = 1 / 3  # inter {(0,0)}, union {(0,0),(0,1),(1,2)}
        iou1 = 3 / 5
        assert metric_miou(pred, labels, 2) == pytest.approx((iou0 + iou1) / 2)

    def test_miou_respects_ignore(self):
        pred = np.array([[0, 1]])
        labels = np.array([[0, 255]])
        assert metric_miou(pred, labels, 2) == pytest.approx(1.0)

    def test_rmse(self):
        assert metric_rmse(np.ones(5), np.ones(5)) == 0.0
        assert metric_rmse(np.ones(5) + 2.0, np.ones(5)) == pytest.approx(2.0)
        rng = np.random.default_rng(9)
        p, l = rng.standard_normal(20), rng.standard_normal(20)
        want = np.sqrt(np.mean([(a - b) ** 2 for a, b in zip(p, l)]))
        assert metric_rmse(p, l) == pytest.approx(want)

    def test_merr(self):
        up = np.zeros((1, 3, 2, 2))
        up[:, 2] = 1.0
        east = np.zeros((1, 3, 2, 2))
        east[:, 0] = 1.0
        assert metric_merr(up, up) == pytest.approx(0.0, abs=1e-6)
        assert metric_merr(east, up) == pytest.approx(90.0)
        assert metric_merr(-up, up) == pytest.approx(180.0)

    def test_boundary_f_extremes(self):
        labels = np.array([[1, 1, 0, 0]])
        assert metric_boundary_f(labels.astype(float), labels) == 1.0
        assert metric_boundary_f(np.zeros((1, 4)), labels) == 0.0

    def test_boundary_f_hand_case(self):
        prob = np.array([[0.9, 0.4, 0.6, 0.1]])
        labels = np.array([[1, 1, 0, 0]])
        # thr <= 0.4: tp=2 fp=1 fn=0 -> F1 = 4/5; thr in (0.4, 0.6]: tp=1 fp=1 fn=1 -> 1/2
        # thr in (0.6, 0.9]: tp=1 fp=0 fn=1 -> 1/2
        assert metric_boundary_f(prob, labels) == pytest.approx(0.8)

    def test_metric_ranges(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            pred = rng.integers(0, 3, (4, 4))
            labels = rng.integers(0, 3, (4, 4))
            assert 0.0 <= metric_miou(pred, labels, 3) <= 1.0
            prob = rng.random((4, 4))
            blab = rng.integers(0, 2, (4, 4))
            assert 0.0 <= metric_boundary_f(prob, blab) <= 1.0
            v = rng.standard_normal((1, 3, 4, 4))
            w = rng.standard_normal((1, 3, 4, 4))
            w = w / np.linalg.norm(w, axis=1, keepdims=True)
            assert 0.0 <= metric_merr(v, w) <= 180.0

    def test_masked_pixels_inert(self):
        rng = np.random.default_rng(11)
        label = rng.uniform(1, 2, (1, 4, 4))
        pred = rng.uniform(1, 2, (1, 4, 4))
        valid = rng.random((1, 4, 4)) > 0.5
        base = metric_rmse(pred, label, valid)
        pred2 = pred.copy()
        pred2[~valid] += 100.0
        assert metric_rmse(pred2, label, valid) == base


class TestKD:
    def test_identical_zero(self):
        from bitdense.distill import kd_loss
        rng = np.random.default_rng(12)
        f = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert kd_loss([(f, Tensor(f.values.copy()))]).item() == 0.0

    def test_constant_offset_pair(self):
        from bitdense.distill import kd_loss
        s = Tensor(np.zeros((1, 2, 3, 3)))
        t = Tensor(np.ones((1, 2, 3, 3)))
        assert kd_loss([(s, t)]).item() == pytest.approx(1.0)

    def test_matches_loop_oracle(self):
        from bitdense.distill import kd_loss
        rng = np.random.default_rng(13)
        pairs = [(Tensor(rng.standard_normal((1, 2, 2, 2))),
                  Tensor(rng.standard_normal((1, 2, 2, 2)))) for _ in range(3)]
        got = kd_loss(pairs).item()
        want = 0.0
        for s, t in pairs:
            acc = 0.0
            for a, b in zip(s.values.ravel(), t.values.ravel()):
                acc += (a - b) ** 2
            want += acc / s.values.size
        assert got == pytest.approx(want, abs=1e-10)

    def test_value_symmetric_grad_one_sided(self):
        from bitdense.distill import kd_loss
        from bitdense.tape import Tape
        rng = np.random.default_rng(14)
        sv = rng.standard_normal((1, 2, 2, 2))
        tv = rng.standard_normal((1, 2, 2, 2))
        s = Tensor(sv.copy(), requires_grad=True)
        t = Tensor(tv.copy(), requires_grad=True)
        assert kd_loss([(s, t)]).item() == pytest.approx(kd_loss([(t, s)]).item())
        with Tape() as tp:
            loss = kd_loss([(s, t)])
        tp.backward(loss)
        assert s.grad is not None and np.any(s.grad != 0)
        assert t.grad is None

    def test_shape_mismatch_names_pair(self):
        from bitdense.distill import kd_loss
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="pair 1"):
            kd_loss([(a, Tensor(np.zeros((1, 2, 3, 3)))), (a, b)])

    def test_gradcheck(self):
        from bitdense.distill import kd_loss
        rng = np.random.default_rng(15)
        s = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        t = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert gradcheck(lambda p: kd_loss([(p, t)]), [s]) < 1e-6
