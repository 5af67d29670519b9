"""Run configuration and the line-oriented config file format.

A config file holds one ``section.key = value`` assignment per line with
``#`` comments. Values are TOML scalars or arrays; a bare word such as
``adamw`` is read as a string. ``${VAR}`` and ``$VAR`` references are
expanded from the environment (after loading ``.env``) before decoding.
An empty file is the toy preset.

Example::

    model.preset = fpvt
    model.layers = [1, 1, 1, 1]
    optim.lr = 1e-3
    train.steps = 200
    data.noise_std = ${NOISE}
"""

import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import appdirs
import toml
from dotenv import load_dotenv

from fpvt_tensor import OPTIMIZERS, Optimizer

from .data import SyntheticFaceSpec
from .exceptions import ConfigError
from .fdr_head import FdrConfig, LossConfig
from .pyramid import PRESETS, ModelConfig, StageConfig

logger = logging.getLogger(__name__)

PRECISIONS = ("float32", "float64")
DEFAULT_LR = {"adamw": 3e-4, "sgd": 0.1}
STAGE_KEYS = {
    "strides": "stride",
    "pads": "pad",
    "channels": "channels",
    "layers": "layers",
    "reductions": "reduction",
    "heads": "heads",
    "expand": "expand",
}
_BARE_WORD = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-/]*$")


@dataclass
class OptimConfig:
    """Optimizer settings; ``lr`` defaults per kind (3e-4 AdamW, 0.1 SGD)."""

    kind: str = "adamw"
    lr: Optional[float] = None
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer kind must be one of {sorted(OPTIMIZERS)}, got '{self.kind}'")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.kind]
        if self.lr < 0.0 or self.weight_decay < 0.0:
            raise ConfigError(f"lr and weight_decay must be non-negative, got {self.lr}/{self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and 0.0 <= self.momentum < 1.0):
            raise ConfigError("betas and momentum must lie in [0, 1)")

    def build(self, params: Any) -> Optimizer:
        if self.kind == "sgd":
            return OPTIMIZERS["sgd"](params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)
        return OPTIMIZERS["adamw"](
            params, lr=self.lr, betas=(self.beta1, self.beta2), eps=self.eps, weight_decay=self.weight_decay
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimConfig":
        return cls(**data)


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    checkpoint_every: int = 100
    log_every: int = 1
    augment: bool = True
    augment_pad: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("batch_size, checkpoint_every and log_every must be positive")
        if self.augment_pad < 0:
            raise ConfigError(f"augment_pad must be non-negative, got {self.augment_pad}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(**data)


@dataclass
class RunConfig:
    """Everything a run needs: model, head, loss, optimizer, training loop and dataset."""

    model: ModelConfig = field(default_factory=lambda: PRESETS["toy"]())
    fdr: FdrConfig = field(default_factory=FdrConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticFaceSpec = field(default_factory=SyntheticFaceSpec)
    name: str = "default"
    precision: str = "float32"

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got '{self.precision}'")
        if self.data.image_size != self.model.image_size or self.data.channels != self.model.in_channels:
            raise ConfigError(
                f"dataset images {self.data.channels}x{self.data.image_size} do not match model input "
                f"{self.model.in_channels}x{self.model.image_size}"
            )
        if self.fdr.head == "fdr" and self.fdr.groups >= self.data.n_identities:
            raise ConfigError(
                f"fdr.groups ({self.fdr.groups}) must be less than data.n_identities ({self.data.n_identities})"
            )

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the model, head and training seeds replaced."""
        return RunConfig.from_dict(_with_seed(self.to_dict(), seed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "fdr": self.fdr.to_dict(),
            "loss": self.loss.to_dict(),
            "optim": self.optim.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "name": self.name,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls(
            model=ModelConfig.from_dict(data["model"]),
            fdr=FdrConfig.from_dict(data["fdr"]),
            loss=LossConfig.from_dict(data["loss"]),
            optim=OptimConfig.from_dict(data["optim"]),
            train=TrainConfig.from_dict(data["train"]),
            data=SyntheticFaceSpec.from_dict(data["data"]),
            name=data.get("name", "default"),
            precision=data.get("precision", "float32"),
        )


def _with_seed(data: Dict[str, Any], seed: int) -> Dict[str, Any]:
    for section in ("model", "fdr", "train"):
        data[section]["seed"] = seed
    return data


def _field_types(cls: Any, skip: Tuple[str, ...] = ()) -> Dict[str, Any]:
    return {f.name: f.type for f in fields(cls) if f.name not in skip}


SCHEMA: Dict[str, Dict[str, Any]] = {
    "model": {
        "preset": "str",
        **_field_types(ModelConfig, skip=("stages",)),
        **{key: "List[int]" for key in STAGE_KEYS},
    },
    "fdr": _field_types(FdrConfig),
    "loss": _field_types(LossConfig),
    "optim": _field_types(OptimConfig),
    "train": _field_types(TrainConfig),
    "data": _field_types(SyntheticFaceSpec),
    "run": {"name": "str", "precision": "str"},
}


_ENV_REFERENCE = re.compile(r"\$\{([^}]+)\}|\$([A-Z_][A-Z0-9_]*)")
_CLOSERS = {"[": "]", "{": "}"}


def _expand_env_vars(text: str, env: Optional[Mapping[str, str]] = None) -> str:
    """Expand ${VAR} and $VAR references from ``env`` (default os.environ); unknown ones stay as written."""
    source = os.environ if env is None else env
    return _ENV_REFERENCE.sub(lambda m: source.get(m.group(1) or m.group(2), m.group(0)), text)


def _unbalanced(raw: str) -> Optional[str]:
    """Describe the first unclosed quote or bracket in ``raw``, or None."""
    stack: List[str] = []
    quote = ""
    escaped = False
    for char in raw:
        if quote:
            if escaped:
                escaped = False
            elif char == "\\" and quote == "\"":
                escaped = True
            elif char == quote:
                quote = ""
        elif char in "\"'":
            quote = char
        elif char in _CLOSERS:
            stack.append(_CLOSERS[char])
        elif char in "]}":
            if not stack or stack.pop() != char:
                return f"unexpected '{char}'"
    if quote:
        return f"unterminated string ({quote})"
    if stack:
        return f"missing '{stack[-1]}'"
    return None


def decode_value(raw: str) -> Any:
    """Decode one TOML value; a bare word decodes to itself as a string.

    Raises:
        toml.TomlDecodeError: If the value does not decode or its brackets or quotes are unbalanced
    """
    problem = _unbalanced(raw)
    if problem:
        raise toml.TomlDecodeError(problem, raw, len(raw))
    try:
        return toml.loads(f"value = {raw}")["value"]
    except toml.TomlDecodeError:
        if _BARE_WORD.match(raw):
            return raw
        raise


def encode_value(value: Any) -> str:
    return toml.dumps({"value": value}).split("=", 1)[1].strip()


def _coerce(value: Any, type_name: Any, key: str, line: int) -> Any:
    type_name = str(type_name)
    if "List[int]" in type_name:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be an array of integers, got {value!r}", line=line)
        return value
    if type_name in ("bool", "<class 'bool'>"):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}", line=line)
        return value
    if type_name in ("int", "<class 'int'>"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", line=line)
        return value
    if "float" in type_name:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}", line=line)
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}", line=line)
    return value


def parse_assignments(
    text: str,
    environ: Optional[Mapping[str, str]] = None,
) -> Dict[str, Dict[str, Tuple[Any, int]]]:
    """Parse assignments into section -> key -> (value, line), expanding references from ``environ``.

    Raises:
        ConfigError: On syntax errors, unknown keys or ill-typed values, with the line number
    """
    sections: Dict[str, Dict[str, Tuple[Any, int]]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got '{line}'", line=number)
        name, value_text = (part.strip() for part in line.split("=", 1))
        if "." not in name:
            raise ConfigError(f"key '{name}' has no section", line=number)
        section, key = name.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown section '{section}'", line=number)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{name}'", line=number)
        try:
            value = decode_value(_expand_env_vars(value_text, environ))
        except toml.TomlDecodeError as e:
            raise ConfigError(f"cannot decode value of '{name}': {e}", line=number) from e
        sections.setdefault(section, {})[key] = (_coerce(value, SCHEMA[section][key], name, number), number)
    return sections


def _build_model(entries: Dict[str, Tuple[Any, int]]) -> ModelConfig:
    values = {key: value for key, (value, _) in entries.items()}
    preset_name = values.pop("preset", "toy")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown model preset '{preset_name}' (expected {sorted(PRESETS)})", line=entries["preset"][1])
    base = PRESETS[preset_name]().to_dict()
    stage_values = {key: values.pop(key) for key in list(values) if key in STAGE_KEYS}
    if stage_values:
        lengths = {len(v) for v in stage_values.values()}
        count = len(stage_values.get("strides", stage_values[next(iter(stage_values))]))
        if len(lengths) != 1:
            line = max(entries[key][1] for key in stage_values)
            raise ConfigError(f"stage arrays have different lengths: {sorted(lengths)}", line=line)
        stages = base["stages"]
        if count != len(stages):
            if len(stage_values) != len(STAGE_KEYS):
                line = max(entries[key][1] for key in stage_values)
                raise ConfigError(f"changing the stage count to {count} needs all of {sorted(STAGE_KEYS)}", line=line)
            stages = [{} for _ in range(count)]
        for key, column in stage_values.items():
            for stage, value in zip(stages, column):
                stage[STAGE_KEYS[key]] = value
        base["stages"] = stages
    base.update(values)
    base["stages"] = [StageConfig.from_dict(stage).to_dict() for stage in base["stages"]]
    return ModelConfig.from_dict(base)


def build_run_config(
    sections: Mapping[str, Dict[str, Tuple[Any, int]]],
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Assemble a RunConfig from parsed assignments plus FPVT_SEED / FPVT_PRECISION overrides."""
    env = os.environ if environ is None else environ

    def values(section: str) -> Dict[str, Any]:
        return {key: value for key, (value, _) in sections.get(section, {}).items()}

    model = _build_model(dict(sections.get("model", {})))
    data = {"image_size": model.image_size, "channels": model.in_channels, **values("data")}
    run = values("run")
    config = {
        "model": model.to_dict(),
        "fdr": FdrConfig.from_dict(values("fdr")).to_dict(),
        "loss": LossConfig.from_dict(values("loss")).to_dict(),
        "optim": OptimConfig.from_dict(values("optim")).to_dict(),
        "train": TrainConfig.from_dict(values("train")).to_dict(),
        "data": SyntheticFaceSpec.from_dict(data).to_dict(),
        "name": run.get("name", "default"),
        "precision": run.get("precision", "float32"),
    }
    if env.get("FPVT_SEED"):
        try:
            config = _with_seed(config, int(env["FPVT_SEED"]))
        except ValueError as e:
            raise ConfigError(f"FPVT_SEED must be an integer: {e}") from e
    if env.get("FPVT_PRECISION"):
        config["precision"] = env["FPVT_PRECISION"]
    return RunConfig.from_dict(config)


def parse_config_text(text: str, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    return build_run_config(parse_assignments(text, environ), environ)


def load_config(path: Optional[Union[str, Path]] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Load a config file (None means the toy defaults).

    Raises:
        ConfigError: If the file cannot be read or does not parse
    """
    load_dotenv()
    if path is None:
        return parse_config_text("", environ)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    config = parse_config_text(text, environ)
    logger.info(f"Loaded config {path}: {len(config.model.stages)} stages, precision {config.precision}")
    return config


def to_text(config: RunConfig) -> str:
    """Config file text that parses back to an equal RunConfig (used as the checkpoint echo)."""
    data = config.to_dict()
    model = data["model"]
    stages = model.pop("stages")
    lines = ["model.preset = toy"]
    lines += [f"model.{key} = {encode_value(value)}" for key, value in model.items()]
    for key, stage_field in STAGE_KEYS.items():
        lines.append(f"model.{key} = {encode_value([stage[stage_field] for stage in stages])}")
    for section in ("fdr", "loss", "optim", "train", "data"):
        lines += [f"{section}.{key} = {encode_value(value)}" for key, value in data[section].items()]
    lines.append(f"run.name = {encode_value(config.name)}")
    lines.append(f"run.precision = {encode_value(config.precision)}")
    return "\n".join(lines) + "\n"


def default_run_dir(name: str) -> Path:
    """Platform user-data directory for a run, e.g. ~/.local/share/fpvt/runs/<name>."""
    return Path(appdirs.user_data_dir("fpvt", "fpvt")) / "runs" / name


def stage_table(config: ModelConfig) -> List[str]:
    return [
        f"stage{index}: stride={s.stride} pad={s.pad} channels={s.channels} layers={s.layers} "
        f"reduction={s.reduction} heads={s.heads} expand={s.expand}"
        for index, s in enumerate(config.stages, start=1)
    ]
