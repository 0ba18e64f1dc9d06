"""INI run configuration: typed sections, strict keys, resolved echo."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import BadConfig
from .sampler import SampleConfig
from .toydata import DatasetSpec
from .trainer import TrainConfig

# INI key -> SampleConfig field; the INI side uses the hyperparameter-table names
_SAMPLE_KEYS = {"nfe": "steps", "distortion_function": "distortion", "n": "n",
                "n_samples": "n_samples", "seed": "seed"}
_DATA_EXTRA = ("path",)


def _coerce(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise BadConfig(f"expected a boolean, got {raw!r}", key=where)
    if isinstance(default, int) or (default is None and key == "n"):
        if default is None and raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise BadConfig(f"expected an integer, got {raw!r}", key=where) from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise BadConfig(f"expected a number, got {raw!r}", key=where) from None
    return raw


def _build(cls, section: str, values: dict, key_map: Optional[dict] = None):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    key_map = key_map or {k: k for k in defaults}
    kwargs = {}
    for key, raw in values.items():
        if key not in key_map:
            raise BadConfig("unknown key", key=f"{section}.{key}")
        name = key_map[key]
        kwargs[name] = _coerce(section, key, raw, defaults[name])
    try:
        return cls(**kwargs)
    except BadConfig as exc:
        inner = exc.key or "?"
        name = next((k for k, v in key_map.items() if v == inner), inner)
        msg = str(exc).split(": ", 1)[-1]
        raise BadConfig(msg, key=f"{section}.{name}") from None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data_path: Optional[str] = None

    def to_ini(self) -> str:
        """Fully resolved configuration, defaults filled in."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = {k: str(v) for k, v in self.data.to_dict().items()}
        if self.data_path:
            cp["data"]["path"] = self.data_path
        cp["train"] = {k: str(v) for k, v in self.train.to_dict().items()}
        s = dataclasses.asdict(self.sample)
        cp["sample"] = {k: str(s[v]) for k, v in _SAMPLE_KEYS.items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, train=dataclasses.replace(self.train, seed=seed),
            sample=dataclasses.replace(self.sample, seed=seed))


def parse_config(text: str, base: Optional[TrainConfig] = None) -> RunConfig:
    """Parse INI text; unknown sections or keys raise :class:`BadConfig` naming the key path.

    Omitted ``[train]`` keys fall back to the desk profile.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise BadConfig(f"unparseable: {exc.__class__.__name__}", key="config") from None
    for sec in cp.sections():
        if sec not in ("train", "data", "sample"):
            raise BadConfig("unknown section", key=sec)
    base = base or TrainConfig.desk()
    train_vals = dict(cp["train"]) if cp.has_section("train") else {}
    base_vals = {k: str(v) for k, v in base.to_dict().items()}
    base_vals.update(train_vals)
    for key in train_vals:
        if key not in base_vals or key not in base.to_dict():
            raise BadConfig("unknown key", key=f"train.{key}")
    train = _build(TrainConfig, "train", base_vals)
    data_vals = dict(cp["data"]) if cp.has_section("data") else {}
    data_path = data_vals.pop("path", None)
    data = _build(DatasetSpec, "data", data_vals)
    sample_vals = dict(cp["sample"]) if cp.has_section("sample") else {}
    sample = _build(SampleConfig, "sample", sample_vals, _SAMPLE_KEYS)
    return RunConfig(train, data, sample, data_path)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    return parse_config(text)
