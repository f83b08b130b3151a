"""Pipeline configuration.

A single YAML (or JSON) file; every field has a default, so an empty file
runs the standard two-channel protocol on ``dataset.root``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class ConfigInvalid(ConfigError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Section):
    root: str = "data/sleep-edf"
    psg_glob: str = "*-PSG.edf"
    # first capture group is the subject id
    subject_pattern: str = r"^[A-Z]{2}\d(\d{2})"
    # PSG and hypnogram files share this many leading characters
    match_prefix: int = Field(7, ge=1)
    hypnogram_suffixes: tuple[str, ...] = ("-Hypnogram.edf", "-Hypnogram.txt")
    sampling_rate: float = Field(100.0, gt=0)


class ScatteringConfig(_Section):
    Q: int = Field(2, ge=1, le=16)
    H: int = Field(17, ge=1, le=40)
    include_lowpass: bool = False


class DiffusionConfig(_Section):
    t: float = Field(0.3, gt=0)
    dim: int = Field(80, ge=1)
    common_dim: int = Field(80, ge=1)
    percentile: float = Field(0.01, gt=0, le=1)
    # sparsify to k nearest neighbours once the cloud exceeds knn_threshold points
    knn: int = Field(256, ge=1)
    knn_threshold: int = Field(20000, ge=2)
    # build the two-view graphs on per-channel diffusion coordinates or on raw features
    multiview_input: Literal["embedding", "features"] = "embedding"


class SvmConfig(_Section):
    C: float = Field(1.0, gt=0)
    # "median" selects the median heuristic per training fold
    sigma: float | Literal["median"] = "median"
    solver: Literal["smo", "libsvm"] = "smo"
    tol: float = Field(1e-4, gt=0)
    standardize: bool = False

    @field_validator("sigma")
    @classmethod
    def _positive(cls, v):
        if not isinstance(v, str) and v <= 0:
            raise ValueError("sigma must be positive")
        return v


class EvaluationConfig(_Section):
    balanced: bool = False
    protocol: Literal["transductive", "inductive"] = "transductive"
    alpha: float = Field(0.05, gt=0, lt=1)


class PipelineConfig(_Section):
    dataset: DatasetConfig = DatasetConfig()
    channels: tuple[str, ...] = ("EEG Fpz-Cz", "EEG Pz-Oz")
    truncation_minutes: float | None = Field(30.0, ge=0)
    scattering: ScatteringConfig = ScatteringConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    svm: SvmConfig = SvmConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    fusion: Literal["single", "concat", "multiview"] = "multiview"
    cache_dir: str = ".diffsleep-cache"
    output_dir: str | None = None
    seed: int = 0
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _channels(self):
        if not 1 <= len(self.channels) <= 2:
            raise ValueError(f"one or two channels required, got {len(self.channels)}")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be distinct")
        if self.fusion in ("concat", "multiview") and len(self.channels) != 2:
            raise ValueError(f"fusion mode {self.fusion!r} needs exactly two channels")
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else Path(self.cache_dir) / "out"

    def subset(self, *keys: str) -> dict:
        """JSON-ready slice of the config used to key a stage cache."""
        d = self.model_dump(mode="json")
        out = {}
        for key in keys:
            node = d
            for part in key.split("."):
                node = node[part]
            out[key] = node
        return out


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_scalar(value)
    return data


def build_config(data: dict | None = None, overrides=None) -> PipelineConfig:
    data = apply_overrides(data or {}, overrides)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'config'}: {e['msg']}" for e in exc.errors())
        raise ConfigInvalid(msgs) from None


def load_config(path=None, overrides=None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigInvalid(f"config {path} must be a mapping at top level")
    return build_config(data, overrides)
