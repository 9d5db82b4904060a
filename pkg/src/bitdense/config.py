"""Run configuration: a flat key-value text format with dotted sections.

Lines are ``section.key = value``; ``#`` starts a comment.  Unknown keys
are rejected so typos fail loudly.  Booleans are ``true``/``false``,
lists are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelSpec
from .tasks import TaskSpec


@dataclass
class RunConfig:
    # model
    variant: str = "b"
    widths: tuple[int, ...] = (16, 32)
    tasks: tuple[str, ...] = ("semseg", "depth", "normal", "boundary")
    semseg_classes: int = 5
    vib: bool = False
    estimator: str = "ste"
    head_blocks: int = 2
    blocks_per_scale: int = 1
    stem_stride: int = 1
    # optim (two learning-rate groups)
    lr_binary: float = 1e-5
    lr_fp: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # train
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    beta: float = 0.01
    lambda_kd: float = 1.0
    dataset: str = ""
    eval_dataset: str = ""
    out_dir: str = "run"
    teacher: str = ""
    init_from: str = ""
    kd_taps: tuple[str, ...] = ()
    # data generation
    height: int = 64
    width: int = 64
    classes: int = 5
    shapes: int = 6
    noise_std: float = 0.05
    count: int = 1000

    def validate(self):
        if self.lr_binary <= 0 or self.lr_fp <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.beta < 0 or self.lambda_kd < 0:
            raise ValueError("beta and lambda_kd must be >= 0")
        return self

    def model_spec(self) -> ModelSpec:
        task_specs = []
        for kind in self.tasks:
            if kind == "semseg":
                task_specs.append(TaskSpec("semseg", classes=self.semseg_classes))
            else:
                task_specs.append(TaskSpec(kind))
        return ModelSpec(
            variant=self.variant,
            widths=tuple(self.widths),
            tasks=tuple(task_specs),
            vib=self.vib,
            kd_taps=tuple(self.kd_taps),
            estimator=self.estimator,
            head_blocks=self.head_blocks,
            blocks_per_scale=self.blocks_per_scale,
            stem_stride=self.stem_stride,
        )


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


SCHEMA = {
    "model.variant": ("variant", str),
    "model.widths": ("widths", _parse_int_list),
    "model.tasks": ("tasks", _parse_str_list),
    "model.semseg_classes": ("semseg_classes", int),
    "model.vib": ("vib", _parse_bool),
    "model.estimator": ("estimator", str),
    "model.head_blocks": ("head_blocks", int),
    "model.blocks_per_scale": ("blocks_per_scale", int),
    "model.stem_stride": ("stem_stride", int),
    "optim.lr_binary": ("lr_binary", float),
    "optim.lr_fp": ("lr_fp", float),
    "optim.beta1": ("beta1", float),
    "optim.beta2": ("beta2", float),
    "optim.eps": ("eps", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.seed": ("seed", int),
    "train.beta": ("beta", float),
    "train.lambda_kd": ("lambda_kd", float),
    "train.dataset": ("dataset", str),
    "train.eval_dataset": ("eval_dataset", str),
    "train.out_dir": ("out_dir", str),
    "train.teacher": ("teacher", str),
    "train.init_from": ("init_from", str),
    "train.kd_taps": ("kd_taps", _parse_str_list),
    "data.height": ("height", int),
    "data.width": ("width", int),
    "data.classes": ("classes", int),
    "data.shapes": ("shapes", int),
    "data.noise_std": ("noise_std", float),
    "data.count": ("count", int),
}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        attr, parser = SCHEMA[key]
        try:
            setattr(cfg, attr, parser(value))
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad value for {key}: {e}") from e
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to the flat text format (defaults included)."""
    attr_to_key = {attr: key for key, (attr, _) in SCHEMA.items()}
    lines = []
    for f in fields(cfg):
        key = attr_to_key[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
