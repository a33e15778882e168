"""Line-oriented ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .forecast.model import BiTransGCNConfig

_MODEL_KEYS = {f.name for f in fields(BiTransGCNConfig)} - {"seed"}
_PATH_KEYS = ("flows", "socioeconomic", "edges", "crosswalk")


@dataclass
class RunConfig:
    flows: str = "inputs/flows.csv"
    socioeconomic: str = "inputs/socioeconomic.csv"
    edges: str = ""
    crosswalk: str = ""
    industry: str = "Automotive"
    level: str = "cbg"
    k_neighbors: int = 4
    split_ratio: float = 0.8
    permutations: int = 999
    alpha: float = 0.05
    kmeans_k: int = 6
    moran_y: str = "flow"
    normalize_socio: bool = False
    ridge_alpha: float = 1.0
    background_rows: int = 100
    seed: int = 0
    model: BiTransGCNConfig = field(default_factory=BiTransGCNConfig)

    def model_config(self) -> BiTransGCNConfig:
        return BiTransGCNConfig(**{**self.model.to_dict(), "seed": self.seed}).validate()

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "model"]
        out += [(k, v) for k, v in self.model.to_dict().items() if k != "seed"]
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.items())

    def resolve(self, key: str, base: Path) -> Path | None:
        value = getattr(self, key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        raw = raw.strip()
        if key in _MODEL_KEYS:
            cur = getattr(self.model, key)
            setattr(self.model, key, int(raw) if isinstance(cur, int) else float(raw))
            self.model.validate()
            return
        names = {f.name: f for f in fields(self)}
        if key not in names or key == "model":
            raise KeyError(f"unknown config key {key!r}")
        cur = getattr(self, key)
        if isinstance(cur, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key} expects a boolean, got {raw!r}")
            value = raw.lower() in ("true", "1", "yes")
        elif isinstance(cur, int):
            value = int(raw)
        elif isinstance(cur, float):
            value = float(raw)
        else:
            value = raw
        setattr(self, key, value)


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        try:
            cfg.set(key, value)
        except (KeyError, ValueError) as err:
            raise ValueError(f"{origin}:{lineno}: {err}") from None
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    """Read a config file; relative paths are taken from the file's directory."""
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path))
    if check_paths:
        for key in _PATH_KEYS:
            p = cfg.resolve(key, path.parent)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{path}: {key} path {p} does not exist")
    return cfg
