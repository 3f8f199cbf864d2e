"""JSON pipeline configuration: one section per stage plus a global seed."""
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

from .errors import ConfigError
from .ganrefine import RefineConfig
from .morphnoise import GridSpec, NoiseConfig, StructuringElement
from .patchmine import MineConfig, VesselStyle
from .postproc import PostprocConfig

SECTIONS = ("mine", "noise", "refine", "postproc", "synth")


def _noise_to_dict(cfg: NoiseConfig) -> Dict[str, Any]:
    return {
        "p_erode": cfg.p_erode,
        "p_dilate": cfg.p_dilate,
        "p_open": cfg.p_open,
        "p_close": cfg.p_close,
        "se_erode_dilate": cfg.se_erode_dilate.side,
        "se_open_close": cfg.se_open_close.side,
        "cell_side": cfg.grid.cell_side,
        "seed": cfg.seed,
    }


def _noise_from_dict(values: Dict[str, Any]) -> NoiseConfig:
    values = dict(values)
    kwargs: Dict[str, Any] = {}
    for key in ("se_erode_dilate", "se_open_close"):
        if key in values:
            kwargs[key] = StructuringElement.square(int(values.pop(key)))
    if "cell_side" in values:
        kwargs["grid"] = GridSpec(int(values.pop("cell_side")))
    return NoiseConfig(**values, **kwargs)


def _plain_to_dict(cfg: Any) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _plain_from_dict(cls: type) -> Callable[[Dict[str, Any]], Any]:
    defaults = cls()

    def build(values: Dict[str, Any]) -> Any:
        kwargs = {}
        for key, value in values.items():
            kwargs[key] = tuple(value) if isinstance(getattr(defaults, key), tuple) and isinstance(value, list) else value
        return cls(**kwargs)

    return build


_CODECS = {
    "mine": (MineConfig, _plain_to_dict, _plain_from_dict(MineConfig)),
    "noise": (NoiseConfig, _noise_to_dict, _noise_from_dict),
    "refine": (RefineConfig, _plain_to_dict, _plain_from_dict(RefineConfig)),
    "postproc": (PostprocConfig, _plain_to_dict, _plain_from_dict(PostprocConfig)),
    "synth": (VesselStyle, _plain_to_dict, _plain_from_dict(VesselStyle)),
}


def section_keys(section: str) -> List[str]:
    cls, to_dict, _ = _CODECS[section]
    return list(to_dict(cls()).keys())


@dataclass
class PipelineConfig:
    seed: int = 0
    mine: MineConfig = field(default_factory=MineConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    synth: VesselStyle = field(default_factory=VesselStyle)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "PipelineConfig":
        """Build from a JSON document; absent sections keep their defaults."""
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown configuration sections: {unknown}")
        kwargs: Dict[str, Any] = {}
        if "seed" in doc:
            kwargs["seed"] = _as_seed(doc["seed"])
        for name in SECTIONS:
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section '{name}' must be an object")
            bad = sorted(set(values) - set(section_keys(name)))
            if bad:
                raise ConfigError(f"unknown keys in section '{name}': {bad}")
            try:
                kwargs[name] = _CODECS[name][2](values)
            except (TypeError, ValueError) as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"invalid value in section '{name}': {e}") from e
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            doc[name] = _CODECS[name][1](getattr(self, name))
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, assignments: Sequence[str]) -> "PipelineConfig":
        """Apply ``section.key=value`` (or ``seed=N``) strings; values are JSON-decoded."""
        doc = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override '{item}' is not of the form section.key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if key == "seed":
                doc["seed"] = value
                continue
            section, dot, name = key.partition(".")
            if not dot or section not in SECTIONS:
                raise ConfigError(f"unknown configuration key '{key}'")
            doc[section][name] = value
        return PipelineConfig.from_dict(doc)

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=_as_seed(seed))

    def resolved(self) -> "PipelineConfig":
        """Copy with every unset section seed filled from the global seed."""
        return dataclasses.replace(
            self,
            mine=self.mine if self.mine.seed is not None else dataclasses.replace(self.mine, seed=self.seed),
            noise=self.noise if self.noise.seed is not None else dataclasses.replace(self.noise, seed=self.seed),
            refine=self.refine if self.refine.seed is not None else dataclasses.replace(self.refine, seed=self.seed),
        )


def _as_seed(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {value!r}")
    return value


def load_config(path: Optional[str]) -> PipelineConfig:
    if not path:
        return PipelineConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: cannot read configuration ({e})") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return PipelineConfig.from_dict(doc)


def describe_defaults() -> str:
    """Every configuration key with its default, one per line."""
    defaults = PipelineConfig().to_dict()
    lines = [f"  seed = {json.dumps(defaults['seed'])}"]
    for name in SECTIONS:
        for key, value in defaults[name].items():
            lines.append(f"  {name}.{key} = {json.dumps(value)}")
    return "\n".join(lines)
