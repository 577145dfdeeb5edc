"""Run configuration: INI-style files with a fixed key schema.

Dimension triples are written in-plane first, ``X x Y x Z`` (e.g.
``320x320x16``), and spacings likewise (``0.5x0.5x3``); they are held
Z-first internally. Other values are Python literals (numbers, tuples,
``true``/``false``, ``none``).
"""
import ast
import configparser
from dataclasses import fields
from importlib import resources
from pathlib import Path

from .detect import ExtractParams
from .mesh import MeshConfig
from .phantom import PhantomParams
from .ssl import RecipeProbs
from .train import FinetuneConfig, PretrainConfig


class ConfigError(ValueError):
    pass


PRESETS = ("desk", "paper")

# keys holding spatial triples written in-plane first
_TRIPLES = {"dims", "spacing", "gland_radii_mm", "target_dims", "subvolume_dims",
            "patch_dims", "shuffle_bounds"}


def _names(cls, drop=()):
    return [f.name for f in fields(cls) if f.name not in drop]


SCHEMA = {
    "run": ["seed", "workers"],
    "mesh": _names(MeshConfig),
    "phantom": ["n_cases"] + _names(PhantomParams),
    "preprocess": ["spacing", "margin_mm", "target_dims"],
    "ssl": _names(RecipeProbs),
    "pretrain": _names(PretrainConfig, drop=("probs", "seed")),
    "finetune": _names(FinetuneConfig, drop=("seed",)),
    "extract": _names(ExtractParams),
    "evaluate": ["iou_min"],
}


def parse_triple(text):
    """``'320x320x16'`` -> ``(16, 320, 320)``."""
    parts = str(text).lower().replace("×", "x").split("x")
    if len(parts) != 3:
        raise ConfigError(f"expected an XxYxZ triple, got {text!r}")
    try:
        vals = [ast.literal_eval(p.strip()) for p in parts]
    except (ValueError, SyntaxError):
        raise ConfigError(f"bad triple {text!r}") from None
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
        raise ConfigError(f"bad triple {text!r}")
    return tuple(vals[::-1])


def format_triple(zyx):
    return "x".join(str(int(v)) if float(v).is_integer() else repr(float(v)) for v in zyx[::-1])


def parse_value(key, text):
    text = text.strip()
    low = text.lower()
    if low == "none":
        return None
    if key in _TRIPLES:
        return parse_triple(text)
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(key, value):
    if key in _TRIPLES and value is not None:
        return format_triple(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if not isinstance(value, str) else value


class RunConfig:
    """Nested ``{section: {key: value}}`` settings with schema checks."""

    def __init__(self, sections=None):
        self.sections = {s: {} for s in SCHEMA}
        for s, kv in (sections or {}).items():
            for k, v in kv.items():
                self.set(s, k, v)

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.sections[section][key] = value

    def get(self, section, key, default=None):
        return self.sections[section].get(key, default)

    def section(self, name):
        return dict(self.sections[name])

    def copy(self):
        return RunConfig({s: dict(kv) for s, kv in self.sections.items()})

    def update_from_text(self, text, source="<string>"):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for s in cp.sections():
            if s == "command":  # provenance record of the producing run
                continue
            for k, v in cp.items(s):
                self.set(s, k, parse_value(k, v))
        return self

    def apply_override(self, assignment):
        """``section.key=value`` from the command line."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        lhs, rhs = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key, parse_value(key, rhs))

    def to_text(self, command=None):
        lines = []
        if command:
            lines.append("[command]")
            for k, v in command.items():
                lines.append(f"{k} = {v}")
            lines.append("")
        for s in SCHEMA:
            if not self.sections[s]:
                continue
            lines.append(f"[{s}]")
            for k in SCHEMA[s]:
                if k in self.sections[s]:
                    lines.append(f"{k} = {format_value(k, self.sections[s][k])}")
            lines.append("")
        return "\n".join(lines)

    # typed views
    @property
    def seed(self):
        return int(self.get("run", "seed", 0))

    def mesh(self):
        return MeshConfig(**self.section("mesh"))

    def phantom(self):
        kv = self.section("phantom")
        n = int(kv.pop("n_cases", 60))
        return n, PhantomParams(**kv)

    def probs(self):
        return RecipeProbs(**self.section("ssl"))

    def pretrain(self):
        return PretrainConfig(seed=self.seed, probs=self.probs(), **self.section("pretrain"))

    def finetune(self):
        return FinetuneConfig(seed=self.seed, **self.section("finetune"))

    def extract(self):
        return ExtractParams(**self.section("extract"))

    def validate(self):
        """Build every typed view once so bad values fail before work starts."""
        try:
            self.mesh()
            self.phantom()
            self.pretrain()
            self.finetune()
            self.extract()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        return self


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("zssmnet").joinpath("presets", f"{name}.cfg").read_text()


def load_config(preset="desk", path=None, overrides=()):
    cfg = RunConfig().update_from_text(preset_text(preset), f"{preset}.cfg")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update_from_text(p.read_text(), str(p))
    for o in overrides:
        cfg.apply_override(o)
    return cfg.validate()
