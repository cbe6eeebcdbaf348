"""Run configuration: namespaced keys, JSON files, ``--set`` overrides."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .conditioning import EncoderStubConfig
from .distill import DistillConfig
from .edit import EditConfig
from .flow import Stage, TrainSchedule
from .model import SparseDiTConfig


class RunConfigError(ValueError):
    """Bad configuration; ``line`` points into the offending file when known."""

    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class ModelSection:
    d: int = 32
    n_heads: int = 2
    L_dual: int = 1
    L_single: int = 1
    patch_size: int = 2
    in_channels: int = 1
    n_experts: int = 4
    top_k: int = 2
    shared_expert: bool = True
    expert_hidden: int = 64
    load_balance_coeff: float = 0.01
    resolution: int = 8
    eps: float = 1e-6


@dataclass
class EncoderSection:
    d_t5: int = 32
    d_llm: int = 32
    M_t5: int = 2
    M_llm: int = 2
    L: int = 2
    d_clip: int = 32
    seed: int = 0


@dataclass
class FlowSection:
    dataset: str = "gaussian"
    mu: float = 0.8
    sigma: float = 0.3
    # [resolution, steps, batch_size] per stage
    stages: list = field(default_factory=lambda: [[8, 2000, 32]])
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    p_drop: float = 0.1
    t_sampler: str = "uniform"
    log_every: int = 100
    checkpoint: str = ""
    finetune_steps: int = 200
    finetune_batch: int = 32
    finetune_lr: float = 1e-5
    sample_steps: int = 50
    guidance: float = 1.0
    n_samples: int = 16
    prompt_id: int = 1
    image_format: str = "pgm"


@dataclass
class DistillSection:
    teacher: str = ""
    student_steps: int = 4
    lambda_adv: float = 0.1
    student_lr: float = 2e-4
    fake_lr: float = 1e-3
    disc_lr: float = 1e-3
    feature_taps: list | None = None
    g_teacher: float = 1.0
    t_feat: float = 0.25
    steps: int = 300
    batch_size: int = 32
    fake_updates: int = 1
    disc_hidden: int = 32
    log_every: int = 50


@dataclass
class EditSection:
    base: str = ""
    checkpoint: str = ""
    tasks: list = field(default_factory=lambda: ["recolor"])
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 50
    tau: float = 0.1
    alpha: float = 4.0
    p_drop: float = 0.1
    pretrain_steps: int = 300
    instruction: str = "recolor"
    sample_steps: int = 50
    guidance: float = 1.0
    n_eval: int = 16
    log_every: int = 100


@dataclass
class DatapipeSection:
    manifest: str = ""
    K: int = 32
    theta: float = 0.95
    subset_fraction: float = 1.0
    kmeans_iters: int = 20
    extractor: str = "builtin-downsample"
    # list of {"name", "threshold", "direction", "scores"}; name "bytes_per_pixel" is built in
    filters: list = field(default_factory=list)
    missing_policy: str = "error"
    jpeg_quality: int = 75


SECTIONS = {
    "model": ModelSection,
    "encoder": EncoderSection,
    "flow": FlowSection,
    "distill": DistillSection,
    "edit": EditSection,
    "datapipe": DatapipeSection,
}
TOP_LEVEL = ("seed", "output_dir", "precision")


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    flow: FlowSection = field(default_factory=FlowSection)
    distill: DistillSection = field(default_factory=DistillSection)
    edit: EditSection = field(default_factory=EditSection)
    datapipe: DatapipeSection = field(default_factory=DatapipeSection)
    seed: int = 0
    output_dir: str = "runs/default"
    precision: str = "f32"

    # -- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict, source: str | None = None, text: str | None = None) -> "RunConfig":
        cfg = cls()
        if not isinstance(data, dict):
            raise RunConfigError("top level must be a JSON object", source, 1)
        for key, value in data.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise RunConfigError(f"section {key!r} must be an object", source, _line_of(text, key))
                for sub, v in value.items():
                    cfg.set(f"{key}.{sub}", v, source=source, line=_line_of(text, sub))
            else:
                cfg.set(key, value, source=source, line=_line_of(text, key))
        cfg.validate(source)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", str(path), exc.lineno) from exc
        return cls.from_dict(data, str(path), text)

    def set(self, key: str, value, source: str | None = None, line: int | None = None) -> None:
        section, _, name = key.partition(".")
        if not name:
            if key not in TOP_LEVEL:
                raise RunConfigError(f"unknown key {key!r}", source, line)
            setattr(self, key, _coerce(key, value, getattr(self, key), source, line))
            return
        if section not in SECTIONS:
            raise RunConfigError(f"unknown section {section!r} in key {key!r}", source, line)
        obj = getattr(self, section)
        if name not in {f.name for f in fields(obj)}:
            raise RunConfigError(f"unknown key {key!r}", source, line)
        setattr(obj, name, _coerce(key, value, getattr(obj, name), source, line))

    def apply_overrides(self, pairs: list[str]) -> None:
        """``key=value`` strings; the value is parsed as JSON, else taken as a string."""
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise RunConfigError(f"override {pair!r} is not key=value", "--set")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(key.strip(), value, source="--set")
        self.validate("--set")

    def validate(self, source: str | None = None) -> None:
        if self.precision not in ("f32", "f64"):
            raise RunConfigError(f"precision must be f32 or f64, got {self.precision!r}", source)
        try:
            self.model_config()
            self.encoder_config()
            self.schedule()
            self.distill_config()
            self.edit_config()
        except (ValueError, TypeError) as exc:
            if isinstance(exc, RunConfigError):
                raise
            raise RunConfigError(str(exc), source) from exc
        if self.datapipe.missing_policy not in ("drop", "keep", "error"):
            raise RunConfigError("datapipe.missing_policy must be drop, keep or error", source)

    # -- module configs ---------------------------------------------------
    def model_config(self) -> SparseDiTConfig:
        m = asdict(self.model)
        res = m.pop("resolution")
        return SparseDiTConfig(**m, height=res, width=res, precision=self.precision)

    def encoder_config(self) -> EncoderStubConfig:
        return EncoderStubConfig(d=self.model.d, **asdict(self.encoder))

    def schedule(self) -> TrainSchedule:
        f = self.flow
        stages = []
        for st in f.stages:
            if not (isinstance(st, (list, tuple)) and len(st) == 3):
                raise RunConfigError(f"flow.stages entries must be [resolution, steps, batch_size], got {st!r}")
            stages.append(Stage(int(st[0]), int(st[1]), int(st[2])))
        return TrainSchedule(stages, lr=f.lr, warmup_steps=f.warmup_steps, weight_decay=f.weight_decay)

    def finetune_schedule(self, resolution: int) -> TrainSchedule:
        f = self.flow
        return TrainSchedule.finetune(resolution, f.finetune_steps, f.finetune_batch, f.finetune_lr)

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(
            student_steps=d.student_steps,
            lambda_adv=d.lambda_adv,
            student_lr=d.student_lr,
            fake_lr=d.fake_lr,
            disc_lr=d.disc_lr,
            feature_taps=tuple(d.feature_taps) if d.feature_taps else None,
            g_teacher=d.g_teacher,
            t_feat=d.t_feat,
            steps=d.steps,
            batch_size=d.batch_size,
            fake_updates=d.fake_updates,
            disc_hidden=d.disc_hidden,
        )

    def edit_config(self) -> EditConfig:
        e = self.edit
        return EditConfig(
            steps=e.steps,
            batch_size=e.batch_size,
            lr=e.lr,
            warmup_steps=e.warmup_steps,
            tau=e.tau,
            alpha=e.alpha,
            p_drop=e.p_drop,
            resolution=self.model.resolution,
            tasks=tuple(e.tasks),
        )

    # -- echo -------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out.update({k: getattr(self, k) for k in TOP_LEVEL})
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _line_of(text: str | None, key: str) -> int | None:
    if text is None:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(key, value, current, source, line):
    """Type-check ``value`` against the default it replaces."""
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise RunConfigError(f"{key} expects true/false, got {value!r}", source, line)
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(f"{key} expects an integer, got {value!r}", source, line)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(f"{key} expects a number, got {value!r}", source, line)
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise RunConfigError(f"{key} expects a string, got {value!r}", source, line)
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise RunConfigError(f"{key} expects a list, got {value!r}", source, line)
        return value
    return value
