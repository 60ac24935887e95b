"""INI run configuration: defaults, file loading, ``--set`` overrides and
typed views for each command."""

from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path
from typing import Iterable

from .model import ConfigError, GeneratorConfig, LossWeights, ModelConfig, TrainConfig

FORMAT_VERSION = 1

_gen = GeneratorConfig()
_model = ModelConfig()

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"format_version": str(FORMAT_VERSION)},
    "paths": {
        "data_dir": "runs/data",
        "train_dir": "runs/train",
        "pairs_dir": "runs/pairs",
        "fpo_dir": "runs/fpo",
        "eval_dir": "runs/eval",
    },
    "data": {"n_train": "512", "n_heldout": "128", "seed": "7",
             **{f.name: str(getattr(_gen, f.name)) for f in dataclasses.fields(GeneratorConfig)}},
    "model": {"init_seed": "0",
              **{f.name: str(getattr(_model, f.name)) for f in dataclasses.fields(ModelConfig)}},
    "train": {
        "epochs": "50", "lr": "0.003", "batch_size": "8", "seed": "0",
        "sft_weight": "1.0", "gnd_weight": "1.0", "cons_weight": "1.0",
        "evidence_refs": "true",
    },
    "synth": {
        "seed": "0", "splits": "train,heldout",
        "factors": "shift=1,add=1,delete=1,merge=1,distort=1,repeat=1",
        "shift_min": "0.1", "shift_max": "0.4", "max_events": "3",
        "distorter": "rule", "endpoint": "", "timeout": "10.0", "max_in_flight": "4",
    },
    "fpo": {
        "checkpoint": "", "beta": "1.0", "use_reference": "false", "lr": "0.0003",
        "epochs": "2", "batch_size": "8", "seed": "0", "steps": "", "sft_weight": "0.0",
    },
    "eval": {
        "checkpoint": "", "split": "heldout", "thresholds": "0.3,0.5,0.7", "iou_thresh": "0.5",
        "matching": "optimal", "interval_source": "answer", "salient_ratio": "0.6",
        "interval_mode": "run_of_argmax", "regrounding": "true", "limit": "",
    },
    "infer": {"checkpoint": "", "split": "heldout", "sample_id": "", "annotation": ""},
}


class RunConfig:
    """Resolved configuration; every value is kept as text and parsed on access."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    # -------------------------------------------------------------- loading

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_dict(DEFAULTS)
        if path is not None:
            user = configparser.ConfigParser(interpolation=None)
            user.optionxform = str
            try:
                with open(path, encoding="utf-8") as f:
                    user.read_file(f)
            except configparser.Error as exc:
                raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
            for section in user.sections():
                for key, value in user.items(section):
                    cls._set(cp, section, key, value)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(item, "overrides look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            cls._set(cp, section, key.strip(), value.strip())
        cfg = cls(cp)
        if cfg.getint("run", "format_version") != FORMAT_VERSION:
            raise ConfigError("run.format_version", f"unsupported version (expected {FORMAT_VERSION})")
        return cfg

    @staticmethod
    def _set(cp, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(section, "unknown config section")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"{section}.{key}", "unknown config key")
        cp.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        self._set(self.parser, section, key, str(value))

    # -------------------------------------------------------------- accessors

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def _typed(self, section, key, conv, kind):
        raw = self.get(section, key)
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected {kind}, got {raw!r}") from None

    def getint(self, section, key) -> int:
        return self._typed(section, key, int, "an integer")

    def getfloat(self, section, key) -> float:
        return self._typed(section, key, float, "a number")

    def getbool(self, section, key) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected a boolean, got {self.get(section, key)!r}") from None

    def optional_int(self, section, key) -> int | None:
        return None if self.get(section, key).strip() == "" else self.getint(section, key)

    def floats(self, section, key) -> list[float]:
        try:
            return [float(x) for x in self.get(section, key).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key}", "expected comma-separated numbers") from None

    def path(self, section, key) -> Path:
        return Path(self.get(section, key))

    def _dataclass(self, cls, section, skip=()):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in skip or f.name not in DEFAULTS[section]:
                continue
            default = getattr(cls(), f.name) if cls is not ModelConfig else getattr(_model, f.name)
            if isinstance(default, bool):
                kwargs[f.name] = self.getbool(section, f.name)
            elif isinstance(default, int):
                kwargs[f.name] = self.getint(section, f.name)
            elif isinstance(default, float):
                kwargs[f.name] = self.getfloat(section, f.name)
            else:
                kwargs[f.name] = self.get(section, f.name)
        return kwargs

    # -------------------------------------------------------------- typed views

    def generator(self) -> GeneratorConfig:
        g = GeneratorConfig(**self._dataclass(GeneratorConfig, "data"))
        g.validate()
        return g

    def model(self) -> ModelConfig:
        try:
            return ModelConfig(**self._dataclass(ModelConfig, "model"))
        except TypeError as exc:
            raise ConfigError("model", str(exc)) from exc

    def train(self) -> TrainConfig:
        epochs = self.getint("train", "epochs")
        if epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        bs = self.getint("train", "batch_size")
        if bs < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        lr = self.getfloat("train", "lr")
        if lr < 0:
            raise ConfigError("train.lr", "must be >= 0")
        w = LossWeights(self.getfloat("train", "sft_weight"), self.getfloat("train", "gnd_weight"),
                        self.getfloat("train", "cons_weight"))
        return TrainConfig(epochs=epochs, lr=lr, batch_size=bs, seed=self.getint("train", "seed"), weights=w)

    # -------------------------------------------------------------- persistence

    def to_text(self) -> str:
        out = io.StringIO()
        for section in DEFAULTS:
            out.write(f"[{section}]\n")
            for key in sorted(DEFAULTS[section]):
                out.write(f"{key} = {self.get(section, key)}\n")
            out.write("\n")
        return out.getvalue()

    def write(self, directory: str | Path, name: str = "config.ini") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / name
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def default_config_text() -> str:
    return RunConfig.load().to_text()
