"""Experiment configuration: a flat text format with dotted nested keys.

Example::

    # phantom + pipeline settings
    out_dir = runs/demo
    seed = 7
    phantom.generator = prolate
    phantom.fa_target = 0.8
    phantom.md = 0.9e-3
    phantom.n_voxels = 200
    phantom.snr_db = 30
    scheme.n_directions = 30
    scheme.bvalue = 1000
    bootstrap.iterations = 1000
    metrics.mpiw_cap.fa = 0.20

Values parse as int, float, bool, or string; commas make a list. Dots nest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("inf", "+inf", "infinity"):
        return float("inf")
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Nested dict from `a.b.c = value` lines; '#' starts a comment."""
    root: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if "," in raw:
            value = [_parse_scalar(tok) for tok in raw.split(",")]
        else:
            value = _parse_scalar(raw)
        node = root
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key} clashes with a scalar key")
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"line {lineno}: {key} clashes with a nested key")
        node[parts[-1]] = value
    return root


@dataclass
class ExperimentConfig:
    """Parsed config plus the raw text (hashed into the run manifest)."""

    values: dict
    text: str
    path: Path = None
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, overrides: dict = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        values = parse_config_text(text)
        cfg = cls(values=values, text=text, path=path, overrides=dict(overrides or {}))
        for key, val in cfg.overrides.items():
            if val is None:
                continue
            node = cfg.values
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = val
            cfg.text += f"\n# override\n{key} = {val}\n"
        return cfg

    def get(self, dotted: str, default=None, required: bool = False):
        node = self.values
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise ConfigError(f"missing config key: {dotted}")
                return default
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def out_dir(self) -> Path:
        out = self.get("out_dir", required=True)
        base = self.path.parent if self.path is not None else Path(".")
        return (base / str(out)).resolve()
