"""Run configuration: one flat key set shared by the config file and CLI.

Files are plain text ``key = value`` lines (``#`` comments, blank lines
allowed). Every key has a built-in default; precedence is strictly
default < config file < command-line flag. Unknown keys are an error, so
typos never pass silently.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .errors import ConfigError
from .network import NetworkConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    # network structure
    num_layers: int = 4
    channel_widths: tuple = (16, 64, 128, 256)
    k_neighbors: int = 16
    downsample_ratio: float = 0.25
    attention_points: int = 176
    heads: int = 4
    global_layers: tuple = (1, 2, 3, 4)
    num_classes: int = 19
    in_dim: int = 3
    fusion_mode: str = "orthogonal"
    scalar_kernels: bool = False
    psi_on_query: bool = False
    normalize_attention: bool = False
    standardize_inputs: bool = True
    fps_start: Optional[int] = None
    seed: int = 0
    # optimization schedule
    lr0: float = 1e-2
    decay: float = 0.95
    epochs: int = 100
    batch_size: int = 5
    points_per_sample: int = 45056
    class_weighting: str = "inverse_sqrt"   # or "none"
    # data and artifacts
    data_dir: Optional[str] = None
    out_dir: str = "."
    checkpoint: Optional[str] = None
    label_remap: str = "kitti"              # "kitti", "none", or a file path
    use_remission: bool = False
    # synthetic scenes
    synth_scenes: int = 4
    synth_points: int = 2048
    scene_kind: str = "default"
    # attention benchmark
    bench_sizes: tuple = (16384, 32768, 65536)
    bench_repeats: int = 3
    bench_dim: int = 8
    bench_heads: int = 1
    bench_block: int = 2048

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            num_layers=self.num_layers,
            channel_widths=self.channel_widths,
            k_neighbors=self.k_neighbors,
            downsample_ratio=self.downsample_ratio,
            attention_points=self.attention_points,
            heads=self.heads,
            global_layers=self.global_layers,
            num_classes=self.num_classes,
            in_dim=self.in_dim,
            fusion_mode=self.fusion_mode,
            scalar_kernels=self.scalar_kernels,
            psi_on_query=self.psi_on_query,
            normalize_attention=self.normalize_attention,
            standardize_inputs=self.standardize_inputs,
            fps_start=self.fps_start,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            decay=self.decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            points_per_sample=self.points_per_sample,
        )


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _parse_bool(text):
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got '{text}'") from None


def _parse_int_tuple(text):
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got '{text}'") from None


def _parse_optional_int(text):
    text = text.strip()
    if text.lower() in ("", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer or 'none', got '{text}'") from None


def _parse_optional_str(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else text


_PARSERS = {
    "channel_widths": _parse_int_tuple,
    "global_layers": _parse_int_tuple,
    "bench_sizes": _parse_int_tuple,
    "fps_start": _parse_optional_int,
    "data_dir": _parse_optional_str,
    "checkpoint": _parse_optional_str,
}


def config_field_names():
    return [f.name for f in fields(RunConfig)]


def parse_value(key, text):
    """Convert a raw string to the typed value of a RunConfig field."""
    if key in _PARSERS:
        return _PARSERS[key](text)
    default = RunConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects an integer, got '{text}'") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects a number, got '{text}'") from None
    return text.strip()


def load_config_file(path) -> dict:
    """Parse key = value lines into typed values; unknown keys are errors."""
    known = set(config_field_names())
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{body}'")
            key, _, value = body.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            out[key] = parse_value(key, value.strip())
    return out


def build_run_config(file_path=None, overrides=None) -> RunConfig:
    """Layer the three sources: defaults, then file, then explicit overrides."""
    values = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, val in (overrides or {}).items():
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key '{key}'")
        if val is not None:
            values[key] = val
    cfg = RunConfig(**values)
    try:
        cfg.network_config()
        cfg.train_config()
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def write_config_file(cfg: RunConfig, path):
    """Dump every key in file syntax (round-trips through load_config_file)."""
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    with open(path, "w") as fh:
        for f in fields(RunConfig):
            fh.write(f"{f.name} = {fmt(getattr(cfg, f.name))}\n")
