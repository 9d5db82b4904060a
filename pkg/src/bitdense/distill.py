"""Feature distillation from a full-precision teacher.

The loss is a sum of per-pair feature MSEs; teacher features enter as
constants so no gradient ever reaches the teacher.
"""

from __future__ import annotations

from . import tape
from .tape import Tensor


def kd_loss(pairs: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Sum over pairs of mean((student - teacher)^2).  Teacher features
    are detached; gradient flows to the student side only."""
    total = tape.constant(0.0)
    for i, (student, teacher) in enumerate(pairs):
        if student.shape != teacher.shape:
            raise ValueError(
                f"distill pair {i}: shape mismatch {student.shape} vs {teacher.shape}"
            )
        diff = student - tape.constant(teacher.values)
        total = total + tape.tmean(diff * diff)
    return total


def capture_taps(model, tap_ids: list[str], images, mode: str = "eval",
                 rng=None) -> list[Tensor]:
    """Run a forward pass and return the activations at the named tap
    points, in model graph order.  The forward outputs are unaffected."""
    known = model.tap_names()
    wanted = set(tap_ids)
    for tid in tap_ids:
        if tid not in known:
            raise ValueError(f"unknown tap id {tid!r}; known taps: {known}")
    outputs = model.forward(images, mode=mode, rng=rng)
    return [outputs.taps[tid] for tid in known if tid in wanted]
