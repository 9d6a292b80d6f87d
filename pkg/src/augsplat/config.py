"""Pipeline configuration: defaults, flat key=value files and overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .densify2d import DensifyConfig
from .errors import ConfigError
from .optim import JOINT_LRS, OptimizationPlan


@dataclass
class PipelineConfig:
    ratio: float = 0.10
    growth_interval: int = 200
    growth_fraction: float = 0.20
    prune_opacity: float = 0.005
    prune_pixels: int = 25
    finetune_steps: int = 1000
    init_opacity_2d: float = 0.01
    init_scale_2d: float = 4.0
    joint_multiplier: int = 30
    lobe_c: float = 7.0
    lambda_ssim: float = 0.2
    sh_order: int = 3
    seed: int = 0
    lobes: bool = True
    baseline_iterations: int = 2000
    # 2D stage rates; the centre rate is multiplied by mean(W, H)
    lr2d_center: float = 0.001
    lr2d_color: float = 0.01
    lr2d_opacity: float = 0.02
    lr2d_scale: float = 0.001
    lr2d_rotation: float = 0.02
    # joint stage rates
    lr_position: float = JOINT_LRS["positions"]
    lr_sh_dc: float = JOINT_LRS["sh_dc"]
    lr_sh_rest: float = JOINT_LRS["sh_rest"]
    lr_opacity: float = JOINT_LRS["opacity_logits"]
    lr_scale: float = JOINT_LRS["log_scales"]
    lr_rotation: float = JOINT_LRS["quats"]
    lr_lobe_dir: float = JOINT_LRS["lobe_dirs"]
    lr_lobe_T: float = JOINT_LRS["lobe_T"]
    lr_lobe_beta: float = JOINT_LRS["lobe_beta"]

    def validate(self) -> PipelineConfig:
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.sh_order not in (0, 1, 2, 3):
            raise ConfigError(f"sh_order must be 0..3, got {self.sh_order}")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ConfigError("lambda_ssim must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for f in fields(self):
            if f.name in ("ratio", "sh_order", "lambda_ssim", "seed", "lobes"):
                continue
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        return self

    def densify(self) -> DensifyConfig:
        return DensifyConfig(
            interval=self.growth_interval, growth_fraction=self.growth_fraction,
            finetune_steps=self.finetune_steps, init_opacity=self.init_opacity_2d,
            init_scale_px=self.init_scale_2d, prune_opacity=self.prune_opacity,
            prune_min_pixels=self.prune_pixels, lambda_ssim=self.lambda_ssim,
            lr_center_factor=self.lr2d_center, lr_color=self.lr2d_color, lr_opacity=self.lr2d_opacity,
            lr_scale=self.lr2d_scale, lr_rotation=self.lr2d_rotation,
        )

    def plan(self) -> OptimizationPlan:
        lrs = {
            "positions": self.lr_position, "sh_dc": self.lr_sh_dc, "sh_rest": self.lr_sh_rest,
            "opacity_logits": self.lr_opacity, "log_scales": self.lr_scale, "quats": self.lr_rotation,
            "lobe_dirs": self.lr_lobe_dir, "lobe_T": self.lr_lobe_T, "lobe_beta": self.lr_lobe_beta,
        }
        return OptimizationPlan(lrs=lrs, iterations_per_view=self.joint_multiplier,
                                lambda_ssim=self.lambda_ssim, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, overrides: dict) -> PipelineConfig:
        data = self.to_dict()
        for key, value in overrides.items():
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = _coerce(key, value, type(data[key]))
        return PipelineConfig(**data).validate()


def _coerce(key, value, kind):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        return kind(float(text)) if kind is float else kind(text)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={value!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return PipelineConfig().with_overrides(values)
