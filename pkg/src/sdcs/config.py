"""Configuration dataclasses for every pipeline stage, plus the UTF-8
``section.key = value`` text format used by the command line.

Unknown keys are rejected at parse time; every config validates itself on
construction so a bad file fails before any work starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

CLASS_NAMES = ("ki67_pos", "ki67_neg", "stroma", "lymphocyte")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

# 3-way segmentation targets: Ki67-positive (DAB) nuclei vs any
# hematoxylin-stained nucleus; the 4-way split happens at the center
# classifier.
SEG_BACKGROUND = 0
SEG_KI67_POS = 1
SEG_HEMATOXYLIN = 2
SEG_CLASS_OF = {
    "ki67_pos": SEG_KI67_POS,
    "ki67_neg": SEG_HEMATOXYLIN,
    "stroma": SEG_HEMATOXYLIN,
    "lymphocyte": SEG_HEMATOXYLIN,
}


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class SdcsConfig:
    """Backbone + hypercolumn + head geometry for the segmentation network."""

    patch_size: int = 64
    block_convs: tuple = (2, 2, 3, 3, 3)
    block_widths: tuple = (64, 128, 256, 512, 512)
    hypercolumn_blocks: tuple = (1, 2, 5)  # 1-indexed block taps
    head_widths: tuple = (256, 256)
    num_classes: int = 3
    sparse_samples_per_patch: int = 512
    label_disk_radius: int = 3

    def __post_init__(self):
        if len(self.block_convs) != len(self.block_widths):
            raise ConfigError(
                f"block_convs ({len(self.block_convs)}) and block_widths "
                f"({len(self.block_widths)}) must have equal length"
            )
        n_blocks = len(self.block_widths)
        for b in self.hypercolumn_blocks:
            if not 1 <= b <= n_blocks:
                raise ConfigError(f"hypercolumn block {b} outside declared blocks 1..{n_blocks}")
        if len(set(self.hypercolumn_blocks)) != len(self.hypercolumn_blocks):
            raise ConfigError("hypercolumn_blocks must be distinct")
        divisor = 2 ** (max(self.hypercolumn_blocks) - 1)
        if self.patch_size % divisor:
            raise ConfigError(
                f"patch_size {self.patch_size} not divisible by 2^(max block - 1) = {divisor}"
            )
        if any(w <= 0 for w in self.head_widths) or len(self.head_widths) != 2:
            raise ConfigError(f"head_widths must be two positive ints, got {self.head_widths}")
        if any(w <= 0 for w in self.block_widths):
            raise ConfigError(f"block widths must be positive, got {self.block_widths}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def total_channels(self) -> int:
        return sum(self.block_widths[b - 1] for b in self.hypercolumn_blocks)


@dataclass
class SdcsTrainConfig:
    """From-scratch training schedule for the segmentation network."""

    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    patches_per_tile: int = 10
    center_jitter: int = 8
    background_patch_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("learning_rate, epochs, and batch_size must be positive")
        if not 0 <= self.background_patch_fraction <= 1:
            raise ConfigError("background_patch_fraction must lie in [0, 1]")


@dataclass
class DetectorConfig:
    """Sliding-window aggregation and local-maxima extraction."""

    window: int = 64
    stride: int = 32
    threshold: float = 0.5
    min_distance: int = 6

    def __post_init__(self):
        if self.stride <= 0 or self.stride > self.window:
            raise ConfigError(f"stride {self.stride} must be in 1..window ({self.window})")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold {self.threshold} must lie in (0, 1)")
        if self.min_distance < 1:
            raise ConfigError(f"min_distance {self.min_distance} must be >= 1")


@dataclass
class CenterConfig:
    """Patch classifier over detected centers (4-way)."""

    patch_size: int = 51
    pad_to: int = 56  # reflect-padded so three 2x2 pools divide evenly
    conv_widths: tuple = (16, 32, 48)
    num_classes: int = 4
    use_probability_channel: bool = True
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 32

    def __post_init__(self):
        if self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        pools = len(self.conv_widths)
        if self.pad_to < self.patch_size or self.pad_to % (2**pools):
            raise ConfigError(
                f"pad_to {self.pad_to} must be >= patch_size and divisible by {2**pools}"
            )

    @property
    def in_channels(self) -> int:
        return 3 + (1 if self.use_probability_channel else 0)


@dataclass
class SvmConfig:
    """RBF-SVM training grid and SMO stopping rule."""

    c_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    gamma_grid: tuple = (0.01, 0.1, 1.0)
    tolerance: float = 1e-3
    max_iterations: int = 20000

    def __post_init__(self):
        if not self.c_grid or not self.gamma_grid:
            raise ConfigError("c_grid and gamma_grid must be non-empty")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")


@dataclass
class SceneConfig:
    """Synthetic Ki67-like tile generator parameters.

    Cell colors are laid out along the hematoxylin/DAB stain axes so that
    optical-density deconvolution behaves as it does on real stains. The
    weak-stain and hollow modes are the stress cases the classical baseline
    is expected to struggle with.
    """

    tile_size: int = 256
    ki67_pos_count: int = 10
    ki67_neg_count: int = 10
    stroma_count: int = 6
    lymphocyte_count: int = 6
    nucleus_radius_min: float = 5.0
    nucleus_radius_max: float = 8.0
    lymphocyte_radius_min: float = 2.5
    lymphocyte_radius_max: float = 4.0
    stroma_length_min: float = 8.0
    stroma_length_max: float = 12.0
    stroma_axis_ratio: float = 3.5
    min_center_spacing: float = 20.0
    dab_od_min: float = 0.85
    dab_od_max: float = 1.25
    hema_od_min: float = 0.55
    hema_od_max: float = 0.95
    dab_class_gap: float = 0.3  # min separation of positive-vs-negative DAB OD
    lymphocyte_od_scale: float = 1.45
    stroma_od_scale: float = 0.5
    weak_stain_fraction: float = 0.25
    weak_stain_factor: float = 0.45
    detectable_od_floor: float = 0.2
    hollow_fraction: float = 0.25
    hollow_core_scale: float = 0.25
    background_od: float = 0.07
    background_texture_amplitude: float = 0.02
    edge_softness: float = 1.2
    coverslip_border: int = 0  # pixels of bare, unstained border (0 = off)

    def __post_init__(self):
        for name in ("ki67_pos_count", "ki67_neg_count", "stroma_count", "lymphocyte_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for lo, hi in (
            (self.nucleus_radius_min, self.nucleus_radius_max),
            (self.lymphocyte_radius_min, self.lymphocyte_radius_max),
            (self.stroma_length_min, self.stroma_length_max),
        ):
            if lo <= 0 or hi < lo:
                raise ConfigError(f"invalid radius range ({lo}, {hi})")
        for name in ("weak_stain_fraction", "hollow_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.weak_stain_factor * self.dab_od_min < self.detectable_od_floor:
            raise ConfigError(
                "weak_stain_factor drops DAB below the detectable floor: "
                f"{self.weak_stain_factor} * {self.dab_od_min} < {self.detectable_od_floor}"
            )

    @property
    def total_cells(self) -> int:
        return (
            self.ki67_pos_count
            + self.ki67_neg_count
            + self.stroma_count
            + self.lymphocyte_count
        )


@dataclass
class DatasetConfig:
    """Tile counts for the synthetic train/validation/test datasets."""

    train_tiles: int = 40
    val_tiles: int = 10
    test_tiles: int = 10

    def __post_init__(self):
        if min(self.train_tiles, self.val_tiles, self.test_tiles) < 0:
            raise ConfigError("tile counts must be >= 0")


@dataclass
class EvalConfig:
    match_radius: float = 6.0

    def __post_init__(self):
        if self.match_radius <= 0:
            raise ConfigError("match_radius must be positive")


@dataclass
class TilingConfig:
    tile_size: int = 2000
    saturation_threshold: float = 0.04
    luminance_threshold: float = 245.0

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")


@dataclass
class PipelineConfig:
    """Everything the batch pipeline needs, one section per stage."""

    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sdcs: SdcsConfig = field(default_factory=SdcsConfig)
    sdcs_train: SdcsTrainConfig = field(default_factory=SdcsTrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    center: CenterConfig = field(default_factory=CenterConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)


def benchmark_pipeline_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale profile: full architecture shape, reduced channel widths.

    Keeps the 5-block/{1,2,5}-tap geometry but shrinks widths so from-scratch
    CPU training of the whole pipeline finishes in minutes.
    """
    cfg = PipelineConfig(seed=seed)
    cfg.sdcs = SdcsConfig(
        block_widths=(12, 16, 24, 32, 32),
        head_widths=(48, 48),
    )
    cfg.center = CenterConfig(conv_widths=(12, 24, 32), epochs=12)
    return cfg


# ---------------------------------------------------------------------------
# text round-trip
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, like) -> object:
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, default) -> object:
    if isinstance(default, tuple):
        element = default[0] if default else 0
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, element) for p in parts)
    return _parse_scalar(text, default)


def config_to_text(cfg: PipelineConfig) -> str:
    """Serialize to the documented ``section.key = value`` format."""
    lines = ["# pipeline configuration", f"seed = {cfg.seed}"]
    for section in fields(cfg):
        if section.name == "seed":
            continue
        sub = getattr(cfg, section.name)
        lines.append("")
        for f in fields(sub):
            lines.append(f"{section.name}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> PipelineConfig:
    """Parse the text format; unknown sections or keys raise ConfigError."""
    defaults = PipelineConfig()
    sections = {f.name: f for f in fields(defaults) if f.name != "seed"}
    raw: dict[str, dict[str, str]] = {name: {} for name in sections}
    seed = defaults.seed
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key == "seed":
            seed = int(value)
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown top-level key {key!r}")
        section, sub = key.split(".", 1)
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        raw[section][sub] = value

    built = {"seed": seed}
    for name, meta in sections.items():
        sub_default = getattr(defaults, name)
        valid = {f.name: getattr(sub_default, f.name) for f in fields(sub_default)}
        kwargs = {}
        for key, value in raw[name].items():
            if key not in valid:
                raise ConfigError(f"unknown key {name}.{key}")
            kwargs[key] = _parse_value(value, valid[key])
        built[name] = type(sub_default)(**{**valid, **kwargs})
    return PipelineConfig(**built)


def load_config(path: str | Path) -> PipelineConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")


def config_digest(cfg: PipelineConfig) -> str:
    """Stable SHA-256 over the canonical text rendering."""
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()


def dataclass_replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
