"""Run configuration read from INI-style files.

Exactly one data section (``[usps]``, ``[csv]`` or ``[synth]``) selects the
data source; ``[model]``, ``[experiment]`` and ``[output]`` are optional.
With ``[synth]`` the model defaults to the true atom counts, ``lam = 0.03``
and ``beta = 30``. Example::

    [usps]
    path = data/usps.jf
    target_class = all
    test_size = 500

    [model]
    T = 4
    M = 15
    lam = 0.001
    Gamma = 0.1
    beta = 25

    [experiment]
    repetitions = 3
    base_seed = 0
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import Hyperparams
from .data import SynthSpec

SOURCES = ("usps", "csv", "synth")

# synthetic runs default to the true atom counts and these settings
SYNTH_MODEL_DEFAULTS = {"lam": 0.03, "beta": 30.0, "Gamma": 0.1}


class ConfigError(ValueError):
    pass


@dataclass
class UspsSource:
    path: str = ""
    target_class: str = "all"  # a digit or "all"
    digits: Optional[list] = None
    pos_bags: int = 50
    neg_bags: int = 50
    bag_size: int = 4
    neg_bag_size: int = 50
    targets_per_pos_bag: int = 1
    test_size: int = 500


@dataclass
class CsvSource:
    instances: str = ""
    bags: str = ""
    test_instances: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class SynthSource:
    spec: SynthSpec = field(default_factory=SynthSpec)
    test_size: int = 400
    target_fraction: float = 0.5
    noise_levels: Optional[list] = None


@dataclass
class RunConfig:
    source: str
    data: object
    hp: Hyperparams
    test_lam: Optional[float] = None
    test_iters: int = 100
    out: str = "run"
    repetitions: int = 1
    base_seed: int = 0
    fpr_grid: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    accuracy: bool = True
    workers: int = 1
    text: str = ""  # normalized config minus [output], used for the manifest hash

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        hp = dataclasses.replace(self.hp, seed=seed)
        data = self.data
        if self.source == "synth":
            data = dataclasses.replace(data, spec=dataclasses.replace(data.spec, seed=seed))
        return dataclasses.replace(self, hp=hp, data=data)


# --------------------------------------------------------------------------
# parsing


def _locate(text: str, section: str, key: str) -> Optional[int]:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip().lower()
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line, re.I):
            return n
    return None


class _Reader:
    def __init__(self, parser, text, origin):
        self.parser, self.text, self.origin = parser, text, origin

    def error(self, section, key, msg):
        line = _locate(self.text, section, key)
        where = f"{self.origin}:{line}" if line else self.origin
        return ConfigError(f"{where}: [{section}] {key}: {msg}")

    def get(self, section, key, conv, default):
        if not self.parser.has_option(section, key):
            return default
        raw = self.parser.get(section, key).strip()
        if raw.lower() in ("", "none") and default is None:
            return None
        try:
            return conv(raw)
        except ValueError as exc:
            raise self.error(section, key, str(exc)) from None


def _floats(raw):
    return [float(v) for v in re.split(r"[,\s]+", raw.strip()) if v]


def _ints(raw):
    return [int(v) for v in re.split(r"[,\s]+", raw.strip()) if v]


def _bool(raw):
    v = raw.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _known_keys(section):
    if section == "usps":
        return {f.name for f in dataclasses.fields(UspsSource)}
    if section == "csv":
        return {f.name for f in dataclasses.fields(CsvSource)}
    if section == "synth":
        return ({f.name.lower() for f in dataclasses.fields(SynthSpec)}
                | {"test_size", "target_fraction", "noise_levels"})
    if section == "model":
        return ({f.name.lower() for f in dataclasses.fields(Hyperparams)}
                | {"test_lam", "test_iters"})
    if section == "experiment":
        return {"repetitions", "base_seed", "fpr_grid", "accuracy", "workers"}
    if section == "output":
        return {"out"}
    return None


def parse_config(text: str, origin: str = "<config>", overrides=None, check_paths=True) -> RunConfig:
    """Parse config text. ``overrides`` maps ``"section.key"`` to raw strings."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.lower(), str(value))
    r = _Reader(parser, text, origin)

    for section in parser.sections():
        known = _known_keys(section)
        if known is None:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key in parser.options(section):
            if key not in known:
                raise r.error(section, key, "unknown key")

    present = [s for s in SOURCES if parser.has_section(s)]
    if len(present) != 1:
        raise ConfigError(f"{origin}: need exactly one data section out of "
                          f"{', '.join('[%s]' % s for s in SOURCES)}, found {len(present)}")
    source = present[0]

    if source == "usps":
        d = UspsSource(
            path=r.get("usps", "path", str, ""),
            target_class=r.get("usps", "target_class", str, "all"),
            digits=r.get("usps", "digits", _ints, None),
            pos_bags=r.get("usps", "pos_bags", int, 50),
            neg_bags=r.get("usps", "neg_bags", int, 50),
            bag_size=r.get("usps", "bag_size", int, 4),
            neg_bag_size=r.get("usps", "neg_bag_size", int, 50),
            targets_per_pos_bag=r.get("usps", "targets_per_pos_bag", int, 1),
            test_size=r.get("usps", "test_size", int, 500))
        paths = [("usps", "path", d.path)]
        if d.target_class != "all":
            try:
                int(d.target_class)
            except ValueError:
                raise r.error("usps", "target_class", "must be a digit or 'all'") from None
    elif source == "csv":
        d = CsvSource(
            instances=r.get("csv", "instances", str, ""),
            bags=r.get("csv", "bags", str, ""),
            test_instances=r.get("csv", "test_instances", str, None),
            test_labels=r.get("csv", "test_labels", str, None))
        paths = [("csv", "instances", d.instances), ("csv", "bags", d.bags)]
        if d.test_instances:
            paths.append(("csv", "test_instances", d.test_instances))
        if d.test_labels:
            paths.append(("csv", "test_labels", d.test_labels))
    else:
        base = SynthSpec()
        spec = SynthSpec(**{
            f.name: r.get("synth", f.name.lower(), type(getattr(base, f.name)),
                          getattr(base, f.name))
            for f in dataclasses.fields(SynthSpec)})
        d = SynthSource(spec=spec,
                        test_size=r.get("synth", "test_size", int, 400),
                        target_fraction=r.get("synth", "target_fraction", float, 0.5),
                        noise_levels=r.get("synth", "noise_levels", _floats, None))
        paths = []
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"{origin}: [synth] {exc}") from None

    base_hp = Hyperparams()
    if source == "synth":
        base_hp = Hyperparams(T=d.spec.T_true, M=d.spec.M_true, **SYNTH_MODEL_DEFAULTS)
    hp_kwargs = {}
    for f in dataclasses.fields(Hyperparams):
        default = getattr(base_hp, f.name)
        conv = float if f.name == "psi" else type(default)
        hp_kwargs[f.name] = r.get("model", f.name.lower(), conv, default)
    hp = Hyperparams(**hp_kwargs)
    try:
        hp.validate()
    except ValueError as exc:
        raise ConfigError(f"{origin}: [model] {exc}") from None

    if check_paths:
        for section, key, value in paths:
            if not value:
                raise r.error(section, key, "missing path")
            if not Path(value).exists():
                raise r.error(section, key, f"no such file: {value}")

    cfg = RunConfig(
        source=source, data=d, hp=hp,
        test_lam=r.get("model", "test_lam", float, None),
        test_iters=r.get("model", "test_iters", int, 100),
        out=r.get("output", "out", str, "run"),
        repetitions=r.get("experiment", "repetitions", int, 1),
        base_seed=r.get("experiment", "base_seed", int, 0),
        fpr_grid=r.get("experiment", "fpr_grid", _floats, [0.01, 0.05, 0.1]),
        accuracy=r.get("experiment", "accuracy", _bool, True),
        workers=r.get("experiment", "workers", int, 1))
    if cfg.repetitions < 1:
        raise r.error("experiment", "repetitions", "must be >= 1")
    cfg.text = _normalized(parser)
    return cfg


def _normalized(parser) -> str:
    # the output location does not change results, so it stays out of the hash
    return json.dumps({s: dict(sorted(parser.items(s))) for s in sorted(parser.sections())
                       if s != "output"}, sort_keys=True)


def load_config(path, overrides=None, check_paths=True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides, check_paths)
