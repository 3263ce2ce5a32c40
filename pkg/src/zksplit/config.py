"""Experiment configuration: flat key-value text files and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

DEFENSES = ("zksl", "none", "gold", "metric-ablation")
INITS = ("pretrained", "secure-init")
TRANSPORTS = ("inproc", "tcp")
CHEATS = ("forge-bm", "forge-removal", "substitute-model", "tamper-dct",
          "inflate-scores", "skip-defense", "freq-aware")


@dataclass(frozen=True)
class RunConfig:
    clients: int = 10
    rounds: int = 20
    k: int = 3
    beta_num: int = 7
    beta_den: int = 10
    pmr: float = 0.2
    pdr: float = 0.75
    iid: float = 0.8
    seed: int = 1
    defense: str = "zksl"
    init: str = "pretrained"
    transport: str = "inproc"
    dataset: str = "synthetic"      # or a CSV path
    metric: str = "taxicab"         # for defense=metric-ablation
    cheat: str = ""                 # scripted strategy of malicious clients
    # desk-scale task and training knobs
    d_in: int = 64
    h1: int = 32
    h2: int = 64
    classes: int = 10
    samples: int = 4000
    test_samples: int = 1500
    lr: float = 0.05
    epochs: int = 3
    batch: int = 32
    mal_lr: float = 0.15
    mal_epochs: int = 6
    target_label: int = 3
    timeout_s: float = 30.0
    frac_bits: int = 16
    drop_on_abort: int = 1

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 0:
            raise ConfigError("clients and rounds must be positive")
        if not self.k < self.clients:
            raise ConfigError("need k < clients")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if self.cheat and self.cheat not in CHEATS:
            raise ConfigError(f"cheat must be one of {CHEATS}")
        for name in ("pmr", "pdr", "iid"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0 < self.beta_num <= self.beta_den:
            raise ConfigError("beta must lie in (0, 1]")

    def with_overrides(self, **kw):
        return replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text):
    """Parse `key = value` lines (# comments allowed) into a RunConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, val = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: expected 'key value'")
            key, val = parts
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype in ("int", int):
                values[key] = int(val)
            elif ftype in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
