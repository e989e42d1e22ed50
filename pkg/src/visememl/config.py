"""INI campaign files.

Four sections are recognised::

    [gen]        GenConfig fields (seed, noise, silent_gain, ...)
    [train]      TrainConfig fields for the visual model, plus model widths
                 (model_dim, ffn_dim, fc_sizes) and lm_* keys for the
                 language model (lm_lr, lm_epochs, lm_batch_size, lm_hidden,
                 lm_embed_dim)
    [loss]       terms (e.g. NCE+SCE+WKL) and per-term weights (w_wkl = 0.5)
    [campaign]   name, repeats, seeds, fractions, workers, out

Unknown keys are rejected so that typos surface as configuration errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import TERMS, LossConfig
from .models import LanguageConfig, VisualConfig
from .synth import GenConfig
from .training import TrainConfig

SWEEP_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass(frozen=True)
class CampaignConfig:
    name: str = "default"
    gen: GenConfig = GenConfig()
    train: TrainConfig = TrainConfig()
    visual: VisualConfig = VisualConfig()
    lm_train: TrainConfig = TrainConfig.language_defaults()
    language: LanguageConfig = LanguageConfig()
    loss: LossConfig | None = None
    weights: dict = field(default_factory=dict)
    repeats: int = 5
    seeds: tuple[int, ...] = ()
    fractions: tuple[float, ...] = SWEEP_FRACTIONS
    workers: int | None = None
    out: str = "campaign"

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not self.seeds:
            object.__setattr__(self, "seeds", tuple(range(self.repeats)))
        if len(self.seeds) != self.repeats or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must list `repeats` distinct values")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be positive")
        if not self.name or "/" in self.name:
            raise ConfigError(f"bad campaign name {self.name!r}")

    def replace(self, **kw) -> "CampaignConfig":
        return dataclasses.replace(self, **kw)

    @property
    def directory(self) -> Path:
        return Path(self.out) / self.name


def _coerce(text: str, like):
    """Parse ``text`` to the type of the default value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [t for t in text.replace(",", " ").split() if t]
        kind = type(like[0]) if like else float
        return tuple(kind(t) for t in items)
    return text


def _fill(cls, defaults, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kw[key] = _coerce(raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return dataclasses.replace(defaults, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, source: str = "<string>") -> CampaignConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - {"gen", "train", "loss", "campaign"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")

    gen_raw = dict(parser["gen"]) if parser.has_section("gen") else {}
    if "phrases" in gen_raw:
        raise ConfigError("[gen] the phrase list is fixed and cannot be configured")
    gen = _fill(GenConfig, GenConfig(), gen_raw, "gen")

    train_raw = dict(parser["train"]) if parser.has_section("train") else {}
    visual_keys = {f.name for f in dataclasses.fields(VisualConfig)} - {"input_dim", "n_classes"}
    visual_raw = {k: train_raw.pop(k) for k in list(train_raw) if k in visual_keys}
    lm_raw = {k[3:]: train_raw.pop(k) for k in list(train_raw) if k.startswith("lm_")}
    lang_keys = {"hidden", "embed_dim", "max_len"}
    lang_raw = {k: lm_raw.pop(k) for k in list(lm_raw) if k in lang_keys}
    train = _fill(TrainConfig, TrainConfig(), train_raw, "train")
    visual = _fill(VisualConfig, VisualConfig(input_dim=gen.feature_dim), visual_raw, "train")
    lm_train = _fill(TrainConfig, TrainConfig.language_defaults(seed=train.seed), lm_raw, "train")
    language = _fill(LanguageConfig, LanguageConfig(), lang_raw, "train")

    loss, weights = None, {}
    if parser.has_section("loss"):
        raw = dict(parser["loss"])
        terms = raw.pop("terms", None)
        for key, value in raw.items():
            term = key[2:].upper() if key.startswith("w_") else ""
            if term not in TERMS:
                raise ConfigError(f"[loss] unknown key {key!r}")
            try:
                weights[term] = float(value)
            except ValueError:
                raise ConfigError(f"[loss] {key}: not a number") from None
        try:
            if terms is not None:
                loss = LossConfig.parse(terms, weights=weights)
            else:
                LossConfig(weights=weights)
        except ValueError as exc:
            raise ConfigError(f"[loss] {exc}") from None

    camp_raw = dict(parser["campaign"]) if parser.has_section("campaign") else {}
    kw = {}
    try:
        if "name" in camp_raw:
            kw["name"] = camp_raw.pop("name").strip()
        if "out" in camp_raw:
            kw["out"] = camp_raw.pop("out").strip()
        if "repeats" in camp_raw:
            kw["repeats"] = int(camp_raw.pop("repeats"))
        if "seeds" in camp_raw:
            kw["seeds"] = _coerce(camp_raw.pop("seeds"), (0,))
            kw.setdefault("repeats", len(kw["seeds"]))
        if "fractions" in camp_raw:
            kw["fractions"] = _coerce(camp_raw.pop("fractions"), (0.0,))
        if "workers" in camp_raw:
            kw["workers"] = int(camp_raw.pop("workers"))
    except ValueError as exc:
        raise ConfigError(f"[campaign] {exc}") from None
    if camp_raw:
        raise ConfigError(f"[campaign] unknown keys {sorted(camp_raw)}")
    return CampaignConfig(gen=gen, train=train, visual=visual, lm_train=lm_train,
                          language=language, loss=loss, weights=weights, **kw)


def load_config(path: str | Path) -> CampaignConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: CampaignConfig) -> str:
    """Inverse of :func:`parse_config` (defaults included)."""
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(map(str, v))
        return str(v)

    lines = ["[gen]"]
    lines += [f"{f.name} = {fmt(getattr(cfg.gen, f.name))}" for f in dataclasses.fields(GenConfig)
              if f.name != "phrases"]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {fmt(getattr(cfg.train, f.name))}" for f in dataclasses.fields(TrainConfig)]
    lines += [f"{k} = {fmt(getattr(cfg.visual, k))}" for k in ("model_dim", "ffn_dim", "fc_sizes")]
    lines += [f"lm_{f.name} = {fmt(getattr(cfg.lm_train, f.name))}" for f in dataclasses.fields(TrainConfig)]
    lines += [f"lm_{k} = {fmt(getattr(cfg.language, k))}" for k in ("embed_dim", "hidden", "max_len")]
    lines += ["", "[loss]"]
    if cfg.loss is not None:
        lines.append(f"terms = {cfg.loss.label}")
    lines += [f"w_{k.lower()} = {v}" for k, v in sorted(cfg.weights.items())]
    lines += ["", "[campaign]", f"name = {cfg.name}", f"out = {cfg.out}",
              f"repeats = {cfg.repeats}", f"seeds = {fmt(cfg.seeds)}",
              f"fractions = {fmt(cfg.fractions)}"]
    if cfg.workers is not None:
        lines.append(f"workers = {cfg.workers}")
    return "\n".join(lines) + "\n"
