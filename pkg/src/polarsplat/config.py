"""Pipeline configuration: one JSON file, typed sections, dotted overrides."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .correction import CorrectionConfig
from .errors import ConfigError
from .patchmatch import PmConfig
from .synth import SceneSpec

OUTPUT_ENV = "POLARSPLAT_OUTPUT"


@dataclass
class CameraRig:
    """Camera rings looking at the scene center; views are split evenly over rings."""

    n_views: int = 20
    elevations_deg: tuple = (40.0, -40.0)
    distance: float = 4.0
    width: int = 192
    height: int = 192
    fov_deg: float = 40.0

    def __post_init__(self):
        self.elevations_deg = tuple(float(e) for e in self.elevations_deg)
        if self.n_views < 1 or not self.elevations_deg:
            raise ConfigError("cameras need n_views >= 1 and at least one ring")
        if self.n_views % len(self.elevations_deg):
            raise ConfigError("n_views must be divisible by the number of rings")
        if self.width < 8 or self.height < 8 or self.distance <= 0 or not 0 < self.fov_deg < 180:
            raise ConfigError("camera size, distance or fov out of range")


@dataclass
class InitConfig:
    """Initial Gaussian cloud built from perturbed ground-truth depth.

    Stands in for a partially trained splatting model: depth gets relative
    noise and holes, normals get a random tilt, and surviving points are
    thinned to one surfel per ``spacing`` cell.  ``cloud`` names a PLY
    to use instead.
    """

    depth_noise_rel: float = 0.002
    normal_noise_deg: float = 5.0
    hole_fraction: float = 0.3
    spacing: float = 0.03
    sigma: float = 0.02
    opacity: float = 0.9
    cloud: str = None

    def __post_init__(self):
        if self.cloud is not None and not os.path.isfile(self.cloud):
            raise ConfigError(f"init.cloud {self.cloud!r} does not exist")
        if self.depth_noise_rel < 0 or self.normal_noise_deg < 0:
            raise ConfigError("init noise must be non-negative")
        if not 0 <= self.hole_fraction < 1:
            raise ConfigError("init.hole_fraction must lie in [0, 1)")
        if self.spacing <= 0 or self.sigma <= 0 or not 0 < self.opacity < 1:
            raise ConfigError("init spacing/sigma must be positive and opacity in (0, 1)")


@dataclass
class SplatConfig:
    refine_steps: int = 200
    refine_lr: float = 1.0
    lambda_dssim: float = 0.2
    iterations: int = 1000
    densify_start: int = 1000
    densify_stop: int = 7000
    densify_interval: int = 100
    new_opacity: float = 0.5
    depth_mode: str = "plane"

    def __post_init__(self):
        if self.depth_mode not in ("center", "plane"):
            raise ConfigError("splat.depth_mode must be 'center' or 'plane'")
        if self.refine_steps < 0 or self.refine_lr <= 0 or self.iterations < 0:
            raise ConfigError("splat refine_steps/iterations >= 0 and refine_lr > 0 required")
        if self.densify_interval < 1 or self.densify_start > self.densify_stop:
            raise ConfigError("densify schedule is empty or malformed")
        if not 0 < self.new_opacity < 1:
            raise ConfigError("splat.new_opacity must lie in (0, 1)")


@dataclass
class FusionConfig:
    voxel_size: float = 0.008
    truncation: float = 0.04
    max_depth: float = 10.0
    max_view_angle: float = 60.0
    min_alpha: float = 0.5

    def __post_init__(self):
        if self.voxel_size <= 0 or self.max_depth <= 0 or self.truncation < self.voxel_size:
            raise ConfigError("fusion needs voxel_size > 0, truncation >= voxel_size, max_depth > 0")
        if not 0 < self.max_view_angle <= 90 or not 0 < self.min_alpha <= 1:
            raise ConfigError("fusion.max_view_angle in (0, 90] and min_alpha in (0, 1] required")


@dataclass
class EvalConfig:
    n_samples: int = 100_000
    cd_max: float = 0.024
    mae_max_deg: float = 5.0

    def __post_init__(self):
        if self.n_samples < 1 or self.cd_max <= 0 or self.mae_max_deg <= 0:
            raise ConfigError("eval thresholds and n_samples must be positive")


SECTIONS = {
    "scene": SceneSpec,
    "cameras": CameraRig,
    "init": InitConfig,
    "correction": CorrectionConfig,
    "splat": SplatConfig,
    "patchmatch": PmConfig,
    "fusion": FusionConfig,
    "eval": EvalConfig,
}
SCALARS = ("seed", "output_dir", "input_dir", "threads")


def default_scene():
    """Textured sphere with a specular highlight: exercises every stage."""
    return SceneSpec(texture=0.5, specular_strength=0.5)


@dataclass
class PipelineConfig:
    scene: SceneSpec = field(default_factory=default_scene)
    cameras: CameraRig = field(default_factory=CameraRig)
    init: InitConfig = field(default_factory=InitConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    splat: SplatConfig = field(default_factory=SplatConfig)
    patchmatch: PmConfig = field(default_factory=PmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = None
    input_dir: str = None
    threads: int = 0

    def __post_init__(self):
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_ENV, "polarsplat_out")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 keeps the numba default)")

    @property
    def dataset_dir(self):
        return self.input_dir or os.path.join(self.output_dir, "dataset")

    def validate_paths(self):
        if self.input_dir is not None and not os.path.isdir(self.input_dir):
            raise ConfigError(f"input_dir {self.input_dir!r} does not exist")
        return self

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else _jsonable(asdict(sec))
        for name in SCALARS:
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        extra = set(d) - set(SECTIONS) - set(SCALARS)
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kwargs = {k: d[k] for k in SCALARS if k in d}
        for name, typ in SECTIONS.items():
            if name not in d:
                continue
            sec = d[name]
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            if name == "scene":
                sec = {**default_scene().to_dict(), **sec}
            kwargs[name] = _build(typ, name, sec)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(typ, name, values):
    if hasattr(typ, "from_dict"):
        return typ.from_dict(values)
    known = {f.name for f in fields(typ)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(extra)}")
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def parse_override(text):
    """``"section.key=value"`` -> ``(["section", "key"], value)``; values parse as JSON when they can."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(d, overrides):
    d = json.loads(json.dumps(d))
    for text in overrides:
        path, value = parse_override(text)
        node = d
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a scalar")
        node[path[-1]] = value
    return d


def load_config(path=None, overrides=(), seed=None, threads=None):
    """Read a JSON config (or defaults), apply ``--set`` overrides and flags."""
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
    d = apply_overrides(d, overrides)
    if seed is not None:
        d["seed"] = int(seed)
    if threads is not None:
        d["threads"] = int(threads)
    return PipelineConfig.from_dict(d)


def with_section(cfg, name, **changes):
    """Copy of ``cfg`` with fields of one section replaced."""
    return replace(cfg, **{name: replace(getattr(cfg, name), **changes)})
