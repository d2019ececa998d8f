"""Run configuration: dataclass tree plus a flat dotted key=value format.

Config files are UTF-8 documents of `section.key=value` lines; `#` starts a
comment. The same dotted keys work as CLI overrides. The architecture
digest (a CRC over backbone/codebook/adapter/router-shape keys) is stamped
into checkpoints so a load against a different architecture fails loudly.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field, fields

from .backbone import AdapterConfig, BackboneConfig
from .errors import ConfigError
from .router import RouterTrainConfig
from .training import LMTrainConfig, Stage1Config, Stage2Config


@dataclass
class CodebookConfig:
    M: int = 512
    K: int = 16
    refiner_hidden: int = 0  # 0 -> hidden size

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ConfigError("codebook sizes must be positive")


@dataclass
class DataConfig:
    family: str = "strategy_lookup"
    train_n: int = 2000
    test_n: int = 500
    router_n: int = 600
    hard_fraction: float = 0.0      # needs_slow share (modular_arith only)
    n_operands: int = 4


@dataclass
class DatapipeConfig:
    max_retries: int = 4
    teacher_kind: str = "synthetic_deterministic"
    remote_url: str = ""
    remote_timeout: float = 30.0
    template_id: str = "default"
    auth_env: str = "FASTTHINK_TEACHER_TOKEN"


@dataclass
class SlowConfig:
    lr: float = 3e-4
    epochs: int = 4
    batch_size: int = 16
    easy_fraction: float = 0.05     # share of fast-solvable derivations in slow training


@dataclass
class EvalConfig:
    max_new: int = 24


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: LMTrainConfig = field(default_factory=LMTrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    router: RouterTrainConfig = field(default_factory=RouterTrainConfig)
    slow: SlowConfig = field(default_factory=SlowConfig)
    datapipe: DatapipeConfig = field(default_factory=DatapipeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _set_field(obj, name: str, raw: str) -> None:
    match = None
    for f in fields(obj):
        if f.name == name:
            match = f
            break
    if match is None:
        raise ConfigError(f"unknown config key {name!r} on {type(obj).__name__}")
    current = getattr(obj, name)
    ftype = match.type if isinstance(match.type, type) else type(current)
    if isinstance(current, bool) or ftype is bool:
        value = raw.strip().lower() in ("1", "true", "yes", "on")
    elif isinstance(current, int) and not isinstance(current, bool):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    elif isinstance(current, tuple):
        value = tuple(v.strip() for v in raw.split(",") if v.strip())
    else:
        value = raw
    setattr(obj, name, value)


def apply_override(cfg: RunConfig, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
        obj = getattr(obj, part)
    _set_field(obj, parts[-1], raw)


def parse_kv_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    seen: set[str] = set()
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for key, value in parse_kv_lines(f.read()):
                apply_override(cfg, key, value)
                seen.add(key)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        apply_override(cfg, key.strip(), value.strip())
        seen.add(key.strip())
    auto_insert = ("backbone.num_layers" in seen and "backbone.insert_layer" not in seen)
    if auto_insert or cfg.backbone.insert_layer == 0:
        import math
        cfg.backbone.insert_layer = math.ceil(0.75 * cfg.backbone.num_layers)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    cfg.backbone.validate()
    # Re-run sub-config invariants; overrides bypass construction checks.
    for sub in (cfg.codebook, cfg.stage1, cfg.stage2):
        sub.__post_init__()
    if not (0.0 <= cfg.data.hard_fraction <= 1.0):
        raise ConfigError("data.hard_fraction must be in [0, 1]")


def to_flat(cfg: RunConfig, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            out[key] = ",".join(str(v) for v in value)
        else:
            out[key] = str(value)
    return out


ARCH_PREFIXES = ("backbone.", "codebook.", "adapters.", "router.d")


def config_digest(cfg: RunConfig) -> int:
    """CRC-32 over the architecture-shaped subset of the flat config."""
    flat = to_flat(cfg)
    doc = "\n".join(f"{k}={flat[k]}" for k in sorted(flat)
                    if k.startswith(ARCH_PREFIXES))
    return zlib.crc32(doc.encode("utf-8")) & 0xFFFFFFFF


def dump_config(cfg: RunConfig) -> str:
    flat = to_flat(cfg)
    return "\n".join(f"{k}={flat[k]}" for k in sorted(flat)) + "\n"
