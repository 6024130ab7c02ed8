"""Run configuration: nested sections, strict text round-trip, CLI overrides.

The on-disk format is a minimal ``[section]`` / ``key = value`` text file.
Every field has a default, so an empty string parses to the default config;
unknown sections or keys are rejected rather than ignored, and the canonical
serialization is what gets embedded into checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from ..backbone import MiniDiTConfig
from ..degradation import DegradationRecipe
from ..prompting import PROMPT_MODES

__all__ = ["RunConfig", "parse_config", "serialize_config", "apply_overrides",
           "load_config"]


@dataclass
class PathsConfig:
    hq_dir: str = "data/hq"
    manifest: str = "data/manifest.csv"
    out_dir: str = "runs/default"


@dataclass
class ModelConfig:
    latent_channels: int = 8
    patch_size: int = 2
    model_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    prompt_dim: int = 64
    pooled_dim: int = 32
    ae_factor: int = 8
    ae_widths: tuple[int, ...] = (24, 32, 48, 64)

    def dit(self) -> MiniDiTConfig:
        return MiniDiTConfig(self.latent_channels, self.patch_size,
                             self.model_dim, self.num_blocks, self.num_heads,
                             self.prompt_dim, self.pooled_dim)


@dataclass
class FlowConfig:
    sample_steps: int = 25
    time_sampling: str = "logit_normal"
    tile: int = 8
    tile_overlap: int = 2


@dataclass
class ConditioningConfig:
    grid: int = 3
    mode: str = "dual"
    encoder_res: int = 16
    enc1_dim: int = 32
    enc2_dim: int = 16
    extractor_widths: tuple[int, ...] = (16, 16)
    vocab: str = ("red green blue yellow circle square triangle cross "
                  "fine stripes checker dots rings plain texture")


@dataclass
class DegradationConfig:
    blur_lo: float = 0.4
    blur_hi: float = 1.6
    kernels: str = "iso,aniso"
    scale: int = 4
    resize_mode: str = "bicubic"
    noise_lo: float = 0.02
    noise_hi: float = 0.08
    quality_lo: int = 55
    quality_hi: int = 95
    second_pass: bool = False

    def recipe(self, seed: int) -> DegradationRecipe:
        return DegradationRecipe(
            blur_sigma=(self.blur_lo, self.blur_hi),
            blur_kernels=tuple(k for k in self.kernels.split(",") if k),
            scale=self.scale, resize_mode=self.resize_mode,
            noise_sigma=(self.noise_lo, self.noise_hi),
            quality=(self.quality_lo, self.quality_hi),
            second_pass=self.second_pass, seed=seed)


@dataclass
class OptimConfig:
    dit_lr: float = 3e-4
    extractor_lr: float = 3e-4
    prompt_lr: float = 3e-4
    ae_lr: float = 1e-3
    ae_finetune_lr: float = 1e-4
    disc_lr: float = 1e-4
    weight_decay: float = 0.0


@dataclass
class ScheduleConfig:
    ae_pretrain_steps: int = 4000
    ae_finetune_steps: int = 2000
    dpir_steps: int = 5000
    gan_warmup_steps: int = 500
    alpha: float = 1.0
    beta: float = 0.1
    encoder_warmup_steps: int = 0
    log_every: int = 1


@dataclass
class DataConfig:
    hq_patch: int = 64
    holdout: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.dit()
        if self.conditioning.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.conditioning.mode!r}; "
                             f"choose from {PROMPT_MODES}")
        if self.conditioning.grid < 1 or self.conditioning.grid % 2 == 0:
            raise ValueError(f"grid must be odd and positive, "
                             f"got {self.conditioning.grid}")
        patch = self.data.hq_patch
        if patch % self.degradation.scale:
            raise ValueError(f"hq_patch {patch} not divisible by "
                             f"scale {self.degradation.scale}")
        if patch % self.model.ae_factor:
            raise ValueError(f"hq_patch {patch} not divisible by "
                             f"ae_factor {self.model.ae_factor}")
        grid = patch // self.model.ae_factor
        if grid % self.model.patch_size:
            raise ValueError(f"latent grid {grid} not divisible by "
                             f"patch_size {self.model.patch_size}")
        if self.flow.tile <= self.flow.tile_overlap:
            raise ValueError(f"tile {self.flow.tile} must exceed overlap "
                             f"{self.flow.tile_overlap}")
        if self.flow.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")
        self.degradation.recipe(0)
        return self

    def latent_grid(self) -> int:
        """Latent tokens per side of one training patch."""
        return self.data.hq_patch // self.model.ae_factor

    def vocab_words(self) -> tuple[str, ...]:
        return tuple(self.conditioning.vocab.split())


_SECTIONS: tuple[tuple[str, type], ...] = (
    ("paths", PathsConfig), ("model", ModelConfig), ("flow", FlowConfig),
    ("conditioning", ConditioningConfig), ("degradation", DegradationConfig),
    ("optim", OptimConfig), ("schedule", ScheduleConfig), ("data", DataConfig))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, ftype):
    text = text.strip()
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if ftype is str:
        return text
    # remaining fields are tuples of ints declared as tuple[int, ...]
    if not text:
        return ()
    return tuple(int(x) for x in text.split(","))


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: fixed section order, declaration-order keys."""
    lines = [f"seed = {cfg.seed}", ""]
    for name, _ in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _field_types(section) -> dict[str, type]:
    out = {}
    for f in fields(section):
        t = f.type if isinstance(f.type, type) else None
        if t is None:
            raw = str(f.type)
            t = {"int": int, "float": float, "bool": bool, "str": str}.get(raw, tuple)
        out[f.name] = t
    return out


def _set_field(cfg: RunConfig, section_name: str, key: str, raw: str) -> None:
    if section_name == "":
        if key != "seed":
            raise ValueError(f"unknown top-level key {key!r} (only 'seed')")
        cfg.seed = int(raw)
        return
    for name, _ in _SECTIONS:
        if name == section_name:
            section = getattr(cfg, name)
            types = _field_types(section)
            if key not in types:
                raise ValueError(f"unknown key {key!r} in section [{section_name}]")
            setattr(section, key, _parse_value(raw, types[key]))
            return
    raise ValueError(f"unknown section [{section_name}]")


def parse_config(text: str) -> RunConfig:
    """Parse the key=value text; every omitted field keeps its default."""
    cfg = RunConfig()
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in [s for s, _ in _SECTIONS]:
                raise ValueError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        try:
            _set_field(cfg, section, key.strip(), value.strip())
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return cfg.validate()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` pairs (plain ``seed=N`` for the top level)."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, _, value = item.partition("=")
        dotted = dotted.strip()
        if "." in dotted:
            section, _, key = dotted.partition(".")
        else:
            section, key = "", dotted
        _set_field(cfg, section, key, value.strip())
    return cfg.validate()


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Config from an optional file plus optional CLI overrides."""
    if path is None:
        cfg = RunConfig().validate()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
