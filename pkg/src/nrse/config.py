"""Experiment configuration: a versioned JSON document with dotted overrides.

Format (version 1)
------------------
A JSON object with these sections; every key is optional and missing keys
take the defaults below.  Unknown keys are errors, so typos do not pass
silently.

``version``      must be 1
``paths``        ``workdir`` (all artifacts go under it) and ``manifests``,
                 a mapping from split name to a manifest path that replaces
                 the synthetic corpus for that split
``synth``        :class:`nrse.corpus.SyntheticTaskConfig`
``features``     :class:`nrse.features.GfbConfig`
``network``      ``name`` (one of ``dnn``, ``cnn``, ``tfcnn``, ``tfcnn-lite``)
                 plus ``options`` passed to the builder, or ``spec``, an
                 inline network spec as written into checkpoints
``train``        :class:`nrse.net.TrainConfig`
``adapt``        :class:`nrse.net.AdaptConfig`
``entropy``      :class:`nrse.entropy.EntropyParams`
``passes``       ``k0``, ``delta_k``, ``num_passes``, ``rescore_with_latest``
``report``       ``layers`` (tapped layers for the correlation sweep) and
                 ``heatmap_neurons``
``seed``         seed for network initialization

Overrides use the dotted path of a key, e.g. ``train.lr0=0.01`` or, on the
command line, ``--train.lr0 0.01``.  Values are parsed as JSON when
possible (so ``[0, 5]`` is a list and ``true`` a bool) and kept as strings
otherwise.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import SyntheticTaskConfig
from .entropy import EntropyParams
from .errors import ConfigError
from .features import GfbConfig
from .net import SPEC_BUILDERS, AdaptConfig, NetworkSpec, TrainConfig
from .selection import PassConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class PassSchedule:
    k0: int = 100
    delta_k: int = 25
    num_passes: int = 3
    rescore_with_latest: bool = True


@dataclass(frozen=True)
class ReportConfig:
    layers: tuple[int, ...] = (2, 3, 4, 5)
    heatmap_neurons: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    workdir: str = "work"
    manifests: dict = field(default_factory=dict)
    synth: SyntheticTaskConfig = SyntheticTaskConfig(
        n_eval_matched=100, n_eval_mismatched=60, duration=(2.0, 4.0))
    features: GfbConfig = GfbConfig()
    network_name: str = "tfcnn-lite"
    network_options: dict = field(default_factory=dict)
    network_spec: dict | None = None
    train: TrainConfig = TrainConfig(max_epochs=12)
    adapt: AdaptConfig = AdaptConfig()
    entropy: EntropyParams = EntropyParams()
    passes: PassSchedule = PassSchedule()
    report: ReportConfig = ReportConfig()
    seed: int = 0

    # ------------------------------------------------------------------
    def validate(self) -> None:
        self.synth.validate()
        self.features.validate()
        self.train.validate()
        self.adapt.validate()
        self.pass_config().validate()
        if self.network_spec is None and self.network_name not in SPEC_BUILDERS:
            raise ConfigError(f"network.name must be one of {sorted(SPEC_BUILDERS)}, "
                              f"got {self.network_name!r}")
        spec = self.build_spec()
        if not 1 <= self.entropy.layer_index <= spec.num_hidden:
            raise ConfigError(f"entropy.layer_index {self.entropy.layer_index} outside "
                              f"1..{spec.num_hidden} for this network")
        for layer in self.report.layers:
            if not 1 <= layer <= spec.num_hidden:
                raise ConfigError(f"report.layers entry {layer} outside 1..{spec.num_hidden}")

    def build_spec(self) -> NetworkSpec:
        if self.network_spec is not None:
            try:
                spec = NetworkSpec.from_dict(self.network_spec)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"network.spec is malformed: {exc}") from None
        else:
            options = {"num_classes": self.synth.num_classes, "num_bands": self.features.num_filters}
            options.update(self.network_options)
            try:
                spec = SPEC_BUILDERS[self.network_name](**options)
            except TypeError as exc:
                raise ConfigError(f"network.options: {exc}") from None
        spec.validate()
        return spec

    def pass_config(self) -> PassConfig:
        return PassConfig(k0=self.passes.k0, delta_k=self.passes.delta_k,
                          num_passes=self.passes.num_passes, entropy=self.entropy,
                          adapt=self.adapt, rescore_with_latest=self.passes.rescore_with_latest)

    @property
    def workpath(self) -> Path:
        return Path(self.workdir)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        network = {"name": self.network_name, "options": dict(self.network_options)}
        if self.network_spec is not None:
            network = {"spec": self.network_spec}
        return {
            "version": CONFIG_VERSION,
            "paths": {"workdir": self.workdir, "manifests": dict(self.manifests)},
            "synth": _plain(asdict(self.synth)),
            "features": asdict(self.features),
            "network": network,
            "train": asdict(self.train),
            "adapt": asdict(self.adapt),
            "entropy": asdict(self.entropy),
            "passes": asdict(self.passes),
            "report": _plain(asdict(self.report)),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = copy.deepcopy(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version: found {version}, expected {CONFIG_VERSION}")
        default = cls()
        known = {"paths", "synth", "features", "network", "train", "adapt", "entropy", "passes",
                 "report", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        paths = _section(d, "paths", {"workdir", "manifests"})
        network = _section(d, "network", {"name", "options", "spec"})
        manifests = paths.get("manifests", {})
        if not isinstance(manifests, dict):
            raise ConfigError("paths.manifests must be an object mapping split to path")
        cfg = cls(
            workdir=str(paths.get("workdir", default.workdir)),
            manifests={str(k): str(v) for k, v in manifests.items()},
            synth=_build(default.synth, _section(d, "synth"), "synth"),
            features=_build(default.features, _section(d, "features"), "features"),
            network_name=str(network.get("name", default.network_name)),
            network_options=dict(network.get("options", {})),
            network_spec=network.get("spec"),
            train=_build(default.train, _section(d, "train"), "train"),
            adapt=_build(default.adapt, _section(d, "adapt"), "adapt"),
            entropy=_build(default.entropy, _section(d, "entropy"), "entropy"),
            passes=_build(default.passes, _section(d, "passes"), "passes"),
            report=_build(default.report, _section(d, "report"), "report"),
            seed=_coerce(d.get("seed", default.seed), default.seed, "seed"),
        )
        return cfg


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(d: dict, name: str, allowed: set | None = None) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    if allowed is not None and set(sec) - allowed:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(set(sec) - allowed))}")
    return sec


def _coerce(value, default, where: str):
    """Convert ``value`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError("expected true or false")
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError("expected a number")
            return float(value)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ValueError("expected a list")
            if len(default) == 2 and len(value) != 2:
                raise ValueError("expected a [low, high] pair")
            proto = default[0] if default else value[0] if value else 0
            return tuple(_coerce(v, proto, where) for v in value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError("expected a string")
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc} (got {value!r})") from None
    return value


def _build(default, overrides: dict, name: str):
    names = {f.name for f in fields(default)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    values = {k: _coerce(v, getattr(default, k), f"{name}.{k}") for k, v in overrides.items()}
    return type(default)(**{**asdict(default), **values}) if values else default


def parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[tuple[str, str]]) -> dict:
    """Return a copy of the raw config dict with dotted ``key=value`` overrides applied."""
    d = copy.deepcopy(d)
    for key, text in overrides:
        parts = key.split(".")
        if len(parts) < 2 and parts[0] != "seed":
            raise ConfigError(f"override {key!r} must be a dotted path like train.lr0")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = parse_override_value(text)
    return d


def load_config(path=None, overrides: list[tuple[str, str]] = ()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    cfg = ExperimentConfig.from_dict(apply_overrides(raw, list(overrides)))
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
