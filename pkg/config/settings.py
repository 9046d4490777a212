"""
config/settings.py: env-driven defaults and the per-run configuration.
- Provides: module-level defaults (EVHOP_* env vars), parse_size(), RunConfig
- CLI flags override these; nothing here touches the filesystem at import.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from core.errors import ConfigError

POLARITY_MODES = ("count", "signed")
NORM_VARIANTS = ("paper", "literal", "subtract-mean", "nz-variance")  # literal == paper
NORM_MODES = ("float", "fixed")
GEN_PATTERNS = ("edge", "noise")


def parse_size(text: str) -> Tuple[int, int]:
    """'64x64' -> (64, 64) as (width, height)."""
    try:
        w_s, h_s = text.lower().replace(" ", "").split("x", 1)
        w, h = int(w_s), int(h_s)
    except Exception:
        raise ConfigError(f"expected WIDTHxHEIGHT, got {text!r}")
    if w < 1 or h < 1:
        raise ConfigError(f"size must be positive, got {text!r}")
    return w, h


# ---------- Defaults (override via env) ----------
K_EVENTS = int(os.environ.get("EVHOP_K_EVENTS", "2000"))
RESOLUTION = os.environ.get("EVHOP_RESOLUTION", "64x64")
SENSOR = os.environ.get("EVHOP_SENSOR", "240x180")  # DAVIS240C
POLARITY_MODE = os.environ.get("EVHOP_POLARITY_MODE", "count")
NORM_VARIANT = os.environ.get("EVHOP_NORM_VARIANT", "paper")
CLOCK_HZ = float(os.environ.get("EVHOP_CLOCK_HZ", "60e6"))
NORM_LANES = int(os.environ.get("EVHOP_NORM_LANES", "22"))
NORM_LATENCY = int(os.environ.get("EVHOP_NORM_LATENCY", "47"))
CNN_MS = float(os.environ.get("EVHOP_CNN_MS", "6.0"))
SW_MS = float(os.environ.get("EVHOP_SW_MS", "4.0"))
MAC_UNITS = int(os.environ.get("EVHOP_MAC_UNITS", "128"))
SEED = int(os.environ.get("EVHOP_SEED", "0"))


@dataclass
class RunConfig:
    """Everything one `pipeline`/`bench` run needs."""
    inputs: List[Path] = field(default_factory=list)
    gen_pattern: Optional[str] = None  # used when inputs is empty
    gen_rate_eps: float = 1_000_000.0
    gen_duration_us: int = 20_000
    seed: int = SEED
    sensor: str = SENSOR
    k_events: int = K_EVENTS
    resolution: str = RESOLUTION
    polarity_mode: str = POLARITY_MODE
    norm_variant: str = NORM_VARIANT
    network: Optional[Path] = None
    timing: str = ""
    out_dir: Path = Path("out")
    threaded: bool = False

    def validate(self) -> "RunConfig":
        if self.k_events < 1:
            raise ConfigError(f"k_events must be >= 1, got {self.k_events}")
        parse_size(self.resolution)
        parse_size(self.sensor)
        if self.polarity_mode not in POLARITY_MODES:
            raise ConfigError(f"polarity_mode must be one of {POLARITY_MODES}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"norm_variant must be one of {NORM_VARIANTS}")
        for p in self.inputs:
            if not Path(p).is_file():
                raise ConfigError(f"input not found: {p}")
        if not self.inputs:
            if self.gen_pattern not in GEN_PATTERNS:
                raise ConfigError("no input files and no generator pattern given")
            if self.gen_rate_eps <= 0:
                raise ConfigError("generator rate must be > 0")
        if self.network is not None and not Path(self.network).is_file():
            raise ConfigError(f"network file not found: {self.network}")
        return self
