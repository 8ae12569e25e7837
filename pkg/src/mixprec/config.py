"""Experiment configuration: JSON schema, validation, round-trip parsing.

The on-disk format is a single UTF-8 JSON document; `parse -> serialize
-> parse` is the identity. See README for a full annotated example.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .gates import PrecisionSet
from .model import LayerSpec
from .train import TrainConfig

_DATASET_NAMES = ("blobs", "spirals", "idx")


@dataclass
class DatasetSpec:
    name: str
    n: int = 1000
    seed: int = 0
    noise: float = 0.05
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.name not in _DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r} (use one of {_DATASET_NAMES})")
        if self.name == "idx" and (not self.images or not self.labels):
            raise ConfigError("idx dataset needs 'images' and 'labels' paths")
        if self.name != "idx" and self.n < 10:
            raise ConfigError(f"synthetic dataset too small: n={self.n}")


@dataclass
class ExperimentConfig:
    arch: list[LayerSpec]
    input_shape: tuple
    dataset: DatasetSpec
    p_x: PrecisionSet
    p_w: PrecisionSet
    reg_mode: str
    lambdas: list[float]
    train: TrainConfig
    output_dir: str
    lut_path: str = ""
    tied_gamma: bool = False
    pin_first_last: bool = False

    def __post_init__(self):
        if self.reg_mode not in ("size", "energy"):
            raise ConfigError(f"reg_mode must be size|energy, got {self.reg_mode!r}")
        if self.reg_mode == "energy" and not self.lut_path:
            raise ConfigError("energy mode requires 'lut_path'")
        if not self.lambdas:
            raise ConfigError("need at least one lambda")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("lambdas must be >= 0")
        if not any(s.is_quantized and s.searchable for s in self.arch):
            raise ConfigError("architecture has no searchable conv2d/fc layer")

    def effective_layers(self) -> list[LayerSpec]:
        """Architecture with the optional first/last pinning applied."""
        layers = [LayerSpec(**asdict(s)) for s in self.arch]
        if self.pin_first_last:
            idxs = [i for i, s in enumerate(layers) if s.is_quantized and s.searchable]
            if idxs:
                layers[idxs[0]].searchable = False
                layers[idxs[-1]].searchable = False
        return layers

    def to_jsonable(self) -> dict:
        return {
            "arch": [_layer_to_json(s) for s in self.arch],
            "input_shape": list(self.input_shape),
            "dataset": asdict(self.dataset),
            "precision_sets": {"activations": list(self.p_x.bits),
                               "weights": list(self.p_w.bits)},
            "reg_mode": self.reg_mode,
            "lambdas": list(self.lambdas),
            "train": asdict(self.train),
            "output_dir": self.output_dir,
            "lut_path": self.lut_path,
            "tied_gamma": self.tied_gamma,
            "pin_first_last": self.pin_first_last,
        }


def _layer_to_json(spec: LayerSpec) -> dict:
    # drop fields at their defaults to keep configs readable
    out = {"kind": spec.kind}
    for f in fields(spec):
        if f.name == "kind":
            continue
        val = getattr(spec, f.name)
        if val != f.default:
            out[f.name] = val
    return out


def parse_config(obj: dict) -> ExperimentConfig:
    try:
        arch = [LayerSpec(**entry) for entry in obj["arch"]]
        psets = obj["precision_sets"]
        cfg = ExperimentConfig(
            arch=arch,
            input_shape=tuple(obj["input_shape"]),
            dataset=DatasetSpec(**obj["dataset"]),
            p_x=PrecisionSet(tuple(psets["activations"])),
            p_w=PrecisionSet(tuple(psets["weights"])),
            reg_mode=obj["reg_mode"],
            lambdas=[float(x) for x in obj["lambdas"]],
            train=TrainConfig(**obj.get("train", {})),
            output_dir=obj.get("output_dir", "runs"),
            lut_path=obj.get("lut_path", ""),
            tied_gamma=bool(obj.get("tied_gamma", False)),
            pin_first_last=bool(obj.get("pin_first_last", False)),
        )
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"config is missing required key {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"config field mismatch: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_jsonable(), indent=2, sort_keys=False)
