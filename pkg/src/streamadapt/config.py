"""Experiment configuration: a strict flat `key = value` text format.

Every experiment detail lives in one RunConfig: dataset source, model size,
meta-training and adaptation hyperparameters, domain definitions, stream
schedule, seeds, and output directory.  Parsing is strict — unknown keys,
duplicates, and malformed values are errors — and a fully resolved config
(every key explicit) is written next to every run's outputs so reruns are
reproducible from that file alone.

Randomness flows from one per-run seed through four named sub-seeds:
data (dataset generation), init (parameter initialization), stream
(training-stream and support-set draws), adaptation (test-stream
construction).  Each can be pinned independently via seeds.<role> keys.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapt import MODES, AdaptConfig
from .domains import DomainSet, DomainSpec, check_disjoint
from .metatrain import MetaConfig
from .model import ConvNetSpec
from .streams import SCHEDULE_KINDS


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration input."""


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ConfigError(f"expected true or false, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of integers")
    return tuple(_parse_int(p) for p in parts)


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of numbers")
    return tuple(_parse_float(p) for p in parts)


def _parse_seed(text: str) -> str:
    """'auto' (derive from the run seed) or a literal integer."""
    if text == "auto":
        return text
    _parse_int(text)
    return text


def parse_domain_list(text: str, seed: int) -> tuple[DomainSpec, ...]:
    """Parse 'kind:sev' and 'kind:lo-hi' items into domain specs.

    e.g. "gaussian_noise:1-3,spatter:4" -> severities (1,2,3) and (4,).
    """
    out: list[DomainSpec] = []
    for item in (p.strip() for p in text.split(",")):
        if not item:
            continue
        kind, sep, sev = item.partition(":")
        if not sep or not kind or not sev:
            raise ConfigError(f"malformed domain {item!r}; expected kind:severity")
        lo, dash, hi = sev.partition("-")
        try:
            severities = range(_parse_int(lo), _parse_int(hi) + 1) if dash else (_parse_int(lo),)
        except ConfigError:
            raise ConfigError(f"malformed severity in {item!r}") from None
        if not severities:
            raise ConfigError(f"empty severity range in {item!r}")
        for s in severities:
            try:
                out.append(DomainSpec(kind, s, seed=seed))
            except ValueError as exc:
                raise ConfigError(f"{item!r}: {exc}") from None
    if not out:
        raise ConfigError("empty domain list")
    return tuple(out)


def _format_domains(specs: tuple[DomainSpec, ...]) -> str:
    return ",".join(f"{d.kind}:{d.severity}" for d in specs)


@dataclass(frozen=True)
class RunConfig:
    dataset_source: str
    dataset_samples: int
    dataset_classes: int
    dataset_image_size: int
    dataset_channels: int
    model_conv_channels: int
    model_kernel_size: int
    model_gn_groups: int
    model_fc_hidden: int
    meta_inner_lr: float
    meta_outer_lr: float
    meta_inner_lr_final: float
    meta_outer_lr_final: float
    meta_epochs: int
    meta_lr_drop_epoch: int
    meta_iterations_per_epoch: int
    meta_domains_per_stream: int
    meta_samples_per_domain: int
    meta_extra_domains: int
    meta_first_order: bool
    meta_support_reuse: bool
    meta_support_no_extra: bool
    meta_batch_inner: bool
    meta_checkpoint_every: int
    baseline_batch_size: int
    adapt_lr: float
    adapt_mode: str
    adapt_batch_size: int
    adapt_predict_order: str
    adapt_episodic_reset: bool
    adapt_beta_sweep: tuple[float, ...]
    stream_kind: str
    stream_period: int
    stream_length: int
    domains_source: tuple[DomainSpec, ...]
    domains_target: tuple[DomainSpec, ...]
    domains_seed: int
    run_seeds: tuple[int, ...]
    run_out: str
    seeds_data: str
    seeds_init: str
    seeds_stream: str
    seeds_adaptation: str


# key -> (attribute, parser, formatter, default text).  Domain lists are
# handled specially because they depend on domains.seed.
_SCHEMA: dict[str, tuple[str, object, object, str]] = {
    "dataset.source": ("dataset_source", str, str, "synthetic"),
    "dataset.samples": ("dataset_samples", _parse_int, str, "600"),
    "dataset.classes": ("dataset_classes", _parse_int, str, "5"),
    "dataset.image_size": ("dataset_image_size", _parse_int, str, "16"),
    "dataset.channels": ("dataset_channels", _parse_int, str, "1"),
    "model.conv_channels": ("model_conv_channels", _parse_int, str, "16"),
    "model.kernel_size": ("model_kernel_size", _parse_int, str, "5"),
    "model.gn_groups": ("model_gn_groups", _parse_int, str, "4"),
    "model.fc_hidden": ("model_fc_hidden", _parse_int, str, "64"),
    "meta.inner_lr": ("meta_inner_lr", _parse_float, repr, "0.003"),
    "meta.outer_lr": ("meta_outer_lr", _parse_float, repr, "0.01"),
    "meta.inner_lr_final": ("meta_inner_lr_final", _parse_float, repr, "0.0003"),
    "meta.outer_lr_final": ("meta_outer_lr_final", _parse_float, repr, "0.001"),
    "meta.epochs": ("meta_epochs", _parse_int, str, "10"),
    "meta.lr_drop_epoch": ("meta_lr_drop_epoch", _parse_int, str, "8"),
    "meta.iterations_per_epoch": ("meta_iterations_per_epoch", _parse_int, str, "0"),
    "meta.domains_per_stream": ("meta_domains_per_stream", _parse_int, str, "3"),
    "meta.samples_per_domain": ("meta_samples_per_domain", _parse_int, str, "5"),
    "meta.extra_domains": ("meta_extra_domains", _parse_int, str, "20"),
    "meta.first_order": ("meta_first_order", _parse_bool, lambda b: "true" if b else "false", "true"),
    "meta.support_reuse": ("meta_support_reuse", _parse_bool, lambda b: "true" if b else "false", "false"),
    "meta.support_no_extra": ("meta_support_no_extra", _parse_bool, lambda b: "true" if b else "false", "false"),
    "meta.batch_inner": ("meta_batch_inner", _parse_bool, lambda b: "true" if b else "false", "false"),
    "meta.checkpoint_every": ("meta_checkpoint_every", _parse_int, str, "0"),
    "baseline.batch_size": ("baseline_batch_size", _parse_int, str, "64"),
    "adapt.lr": ("adapt_lr", _parse_float, repr, "0.0003"),
    "adapt.mode": ("adapt_mode", str, str, "ours_sample"),
    "adapt.batch_size": ("adapt_batch_size", _parse_int, str, "64"),
    "adapt.predict_order": ("adapt_predict_order", str, str, "auto"),
    "adapt.episodic_reset": ("adapt_episodic_reset", _parse_bool, lambda b: "true" if b else "false", "false"),
    "adapt.beta_sweep": ("adapt_beta_sweep", _parse_floats,
                         lambda v: ",".join(repr(x) for x in v), "0.0,0.0003,0.1"),
    "stream.kind": ("stream_kind", str, str, "periodic"),
    "stream.period": ("stream_period", _parse_int, str, "10"),
    "stream.length": ("stream_length", _parse_int, str, "600"),
    "domains.source": ("domains_source", None, _format_domains,
                       "gaussian_noise:1-5,impulse_noise:1-5,motion_blur:1-5,"
                       "contrast:1-5,brightness:1-5"),
    "domains.target": ("domains_target", None, _format_domains,
                       "spatter:4,elastic_warp:4,jpeg_quantize:4"),
    "domains.seed": ("domains_seed", _parse_int, str, "0"),
    "run.seeds": ("run_seeds", _parse_ints, lambda v: ",".join(str(x) for x in v), "0,1,2,3,4"),
    "run.out": ("run_out", str, str, "runs"),
    "seeds.data": ("seeds_data", _parse_seed, str, "auto"),
    "seeds.init": ("seeds_init", _parse_seed, str, "auto"),
    "seeds.stream": ("seeds_stream", _parse_seed, str, "auto"),
    "seeds.adaptation": ("seeds_adaptation", _parse_seed, str, "auto"),
}

_DOMAIN_KEYS = ("domains.source", "domains.target")


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    """Parse config text; missing keys take documented defaults, which are
    made explicit again by serialize_config."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        if key not in _SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        raw[key] = value

    texts = {key: raw.get(key, default) for key, (_, _, _, default) in _SCHEMA.items()}
    attrs: dict[str, object] = {}
    for key, (attr, parser, _, _) in _SCHEMA.items():
        if key in _DOMAIN_KEYS:
            continue
        try:
            attrs[attr] = parser(texts[key])
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {key}: {exc}") from None
    seed = attrs["domains_seed"]
    for key in _DOMAIN_KEYS:
        attr = _SCHEMA[key][0]
        try:
            attrs[attr] = parse_domain_list(texts[key], seed)
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {key}: {exc}") from None
    cfg = RunConfig(**attrs)
    validate_config(cfg, origin)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), origin=str(path))


def validate_config(cfg: RunConfig, origin: str = "<config>") -> None:
    def bad(key: str, why: str):
        raise ConfigError(f"{origin}: {key}: {why}")

    if not cfg.dataset_source:
        bad("dataset.source", "must be 'synthetic' or a records-manifest path")
    if cfg.dataset_samples < 1:
        bad("dataset.samples", "must be >= 1")
    if cfg.dataset_classes < 2:
        bad("dataset.classes", "must be >= 2")
    if cfg.dataset_image_size < 8 or cfg.dataset_image_size % 8:
        bad("dataset.image_size", "must be a positive multiple of 8")
    if cfg.dataset_channels < 1:
        bad("dataset.channels", "must be >= 1")
    for key, val in (("model.conv_channels", cfg.model_conv_channels),
                     ("model.gn_groups", cfg.model_gn_groups),
                     ("model.fc_hidden", cfg.model_fc_hidden),
                     ("baseline.batch_size", cfg.baseline_batch_size),
                     ("adapt.batch_size", cfg.adapt_batch_size),
                     ("stream.period", cfg.stream_period),
                     ("stream.length", cfg.stream_length)):
        if val < 1:
            bad(key, "must be >= 1")
    if cfg.model_kernel_size < 1 or cfg.model_kernel_size % 2 == 0:
        bad("model.kernel_size", "must be a positive odd integer")
    if cfg.model_conv_channels % cfg.model_gn_groups:
        bad("model.gn_groups", "must divide model.conv_channels")
    if cfg.stream_kind not in SCHEDULE_KINDS or cfg.stream_kind == "inner_training":
        bad("stream.kind", "must be periodic or randomized")
    if cfg.adapt_mode not in MODES:
        bad("adapt.mode", f"must be one of {', '.join(MODES)}")
    if cfg.adapt_predict_order not in ("auto", "adapt_then_predict", "predict_then_adapt"):
        bad("adapt.predict_order", "must be auto, adapt_then_predict, or predict_then_adapt")
    if cfg.adapt_lr < 0 or any(b < 0 for b in cfg.adapt_beta_sweep):
        bad("adapt.lr", "adaptation rates must be >= 0")
    if not cfg.run_seeds:
        bad("run.seeds", "need at least one seed")
    if len(set(cfg.run_seeds)) != len(cfg.run_seeds):
        bad("run.seeds", "seeds must be distinct")
    try:
        check_disjoint(DomainSet(cfg.domains_source, "source"),
                       DomainSet(cfg.domains_target, "target"))
    except ValueError as exc:
        bad("domains.target", str(exc))


def validate_dataset_path(cfg: RunConfig) -> None:
    """For file-backed datasets, confirm the manifest exists before any work."""
    if cfg.dataset_source != "synthetic" and not Path(cfg.dataset_source).exists():
        raise ConfigError(f"dataset.source: no such file: {cfg.dataset_source}")


def serialize_config(cfg: RunConfig) -> str:
    """Render every key explicitly, in schema order; parses back identically."""
    lines = ["# resolved run configuration"]
    for key, (attr, _, fmt, _) in _SCHEMA.items():
        lines.append(f"{key} = {fmt(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def default_config() -> RunConfig:
    return parse_config_text("", origin="<defaults>")


def config_with(cfg: RunConfig, **overrides) -> RunConfig:
    """dataclasses.replace with re-validation."""
    out = replace(cfg, **overrides)
    validate_config(out)
    return out


_SEED_ROLES = ("data", "init", "stream", "adaptation")


@dataclass(frozen=True)
class SeedBundle:
    data: int
    init: int
    stream: int
    adaptation: int


def derive_seeds(cfg: RunConfig, run_seed: int) -> SeedBundle:
    """Named sub-seeds for one run.

    Each role is derived from (run_seed, role label) so the four noise
    sources are independent; a seeds.<role> override pins that role across
    runs without disturbing the others.
    """
    overrides = {"data": cfg.seeds_data, "init": cfg.seeds_init,
                 "stream": cfg.seeds_stream, "adaptation": cfg.seeds_adaptation}

    def sub(role: str) -> int:
        text = overrides[role]
        if text != "auto":
            return int(text)
        ss = np.random.SeedSequence([run_seed & 0xFFFFFFFF, zlib.crc32(role.encode())])
        return int(ss.generate_state(1, np.uint64)[0])

    return SeedBundle(*(sub(r) for r in _SEED_ROLES))


def convnet_spec(cfg: RunConfig) -> ConvNetSpec:
    return ConvNetSpec(in_channels=cfg.dataset_channels,
                       image_size=cfg.dataset_image_size,
                       num_classes=cfg.dataset_classes,
                       conv_channels=cfg.model_conv_channels,
                       kernel_size=cfg.model_kernel_size,
                       gn_groups=cfg.model_gn_groups,
                       fc_hidden=cfg.model_fc_hidden)


def meta_config(cfg: RunConfig, **overrides) -> MetaConfig:
    base = dict(inner_lr=cfg.meta_inner_lr, outer_lr=cfg.meta_outer_lr,
                inner_lr_final=cfg.meta_inner_lr_final,
                outer_lr_final=cfg.meta_outer_lr_final,
                epochs=cfg.meta_epochs, lr_drop_epoch=cfg.meta_lr_drop_epoch,
                iterations_per_epoch=cfg.meta_iterations_per_epoch,
                domains_per_stream=cfg.meta_domains_per_stream,
                samples_per_domain=cfg.meta_samples_per_domain,
                extra_domains=cfg.meta_extra_domains,
                first_order=cfg.meta_first_order,
                support_reuse=cfg.meta_support_reuse,
                support_no_extra=cfg.meta_support_no_extra,
                batch_inner=cfg.meta_batch_inner,
                checkpoint_every=cfg.meta_checkpoint_every)
    base.update(overrides)
    return MetaConfig(**base)


def adapt_config(cfg: RunConfig, **overrides) -> AdaptConfig:
    order = None if cfg.adapt_predict_order == "auto" else cfg.adapt_predict_order
    base = dict(lr=cfg.adapt_lr, mode=cfg.adapt_mode,
                batch_size=cfg.adapt_batch_size, predict_order=order,
                episodic_reset=cfg.adapt_episodic_reset)
    base.update(overrides)
    return AdaptConfig(**base)


def source_domains(cfg: RunConfig) -> DomainSet:
    return DomainSet(cfg.domains_source, "source")


def target_domains(cfg: RunConfig) -> DomainSet:
    return DomainSet(cfg.domains_target, "target")


__all__ = [
    "ConfigError", "RunConfig", "SeedBundle", "adapt_config", "config_with",
    "convnet_spec", "default_config", "derive_seeds", "load_config",
    "meta_config", "parse_config_text", "parse_domain_list", "serialize_config",
    "source_domains", "target_domains", "validate_config", "validate_dataset_path",
]
