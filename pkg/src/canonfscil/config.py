"""Experiment configuration: flat key-value sections, diff-friendly.

A config file fully determines an experiment given its seeds. Parsing
applies defaults and validates every field (errors name the offending
``section.key``); serializing writes the fully resolved form, so a run
manifest can be re-parsed into an identical configuration.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .calibration import UncertaintyMap
from .frontend import MelConfig, SynthSpec
from .nets import EmbedderConfig, EstimatorConfig
from .protocol import ProtocolSpec
from .training import LossWeights, TrainSchedule
from .transform import ContextBounds


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationSwitches:
    canonicalize: bool = True   # inverse-transform canonicalization in the pipeline
    consistency: bool = True    # pseudo-context consistency term in base training
    calibration: bool = True    # uncertainty-conditioned prototype calibration


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "synthetic"
    synth: SynthSpec = field(default_factory=SynthSpec)
    mel: MelConfig = field(default_factory=MelConfig)
    bounds: ContextBounds = field(default_factory=ContextBounds)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    umap: UncertaintyMap = field(default_factory=UncertaintyMap)
    n_ucpc: int = 20
    anchor: str = "canonicalized"
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain: TrainSchedule = TrainSchedule(lr=0.1, epochs=100)
    full_base: TrainSchedule = TrainSchedule(lr=0.01, epochs=10)
    incremental: TrainSchedule = TrainSchedule(lr=0.1, epochs=200)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    seeds: tuple = (0,)
    reseed_splits: bool = False


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"invalid value for {section}.{key}: {e}") from e


def _int_tuple(raw: str):
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _schedule(parser, section, default: TrainSchedule) -> TrainSchedule:
    try:
        return TrainSchedule(
            lr=_get(parser, section, "lr", float, default.lr),
            epochs=_get(parser, section, "epochs", int, default.epochs),
            decay=_get(parser, section, "decay", float, default.decay),
            decay_every=_get(parser, section, "decay_every", int, default.decay_every),
            batch_size=_get(parser, section, "batch_size", int, default.batch_size),
            momentum=_get(parser, section, "momentum", float, default.momentum),
        )
    except ValueError as e:
        raise ConfigError(f"invalid schedule in [{section}]: {e}") from e


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e

    d = ExperimentConfig()
    try:
        bounds = ContextBounds(
            delta_max=_get(parser, "bounds", "delta_max", float, d.bounds.delta_max),
            tau_min=_get(parser, "bounds", "tau_min", float, d.bounds.tau_min),
            tau_max=_get(parser, "bounds", "tau_max", float, d.bounds.tau_max),
            b_max=_get(parser, "bounds", "b_max", float, d.bounds.b_max),
            s_max=_get(parser, "bounds", "s_max", float, d.bounds.s_max))
    except ValueError as e:
        raise ConfigError(f"invalid [bounds]: {e}") from e

    try:
        synth = SynthSpec(
            material_count=_get(parser, "dataset", "materials", int, d.synth.material_count),
            per_class_count=_get(parser, "dataset", "per_class", int, d.synth.per_class_count),
            resonance_count=_get(parser, "dataset", "resonances", int, d.synth.resonance_count),
            noise_std=_get(parser, "dataset", "noise_std", float, d.synth.noise_std),
            mel_bins=_get(parser, "dataset", "mel_bins", int, d.synth.mel_bins),
            frames=_get(parser, "dataset", "frames", int, d.synth.frames),
            channels=_get(parser, "dataset", "channels", int, d.synth.channels),
            rng_seed=_get(parser, "dataset", "seed", int, d.synth.rng_seed),
            bounds=bounds)
    except ValueError as e:
        raise ConfigError(f"invalid [dataset]: {e}") from e

    try:
        mel = MelConfig(
            fft_size=_get(parser, "mel", "fft_size", int, d.mel.fft_size),
            window_len=_get(parser, "mel", "window_len", int, d.mel.window_len),
            hop_len=_get(parser, "mel", "hop_len", int, d.mel.hop_len),
            window=_get(parser, "mel", "window", str, d.mel.window),
            mel_bins=_get(parser, "mel", "mel_bins", int, d.mel.mel_bins),
            sample_rate=_get(parser, "mel", "sample_rate", float, d.mel.sample_rate))
    except ValueError as e:
        raise ConfigError(f"invalid [mel]: {e}") from e

    try:
        estimator = EstimatorConfig(
            block_count=_get(parser, "estimator", "blocks", int, d.estimator.block_count),
            base_width=_get(parser, "estimator", "width", int, d.estimator.base_width),
            in_channels=synth.channels if parser.get("dataset", "source",
                                                     fallback="synthetic") == "synthetic"
            else _get(parser, "estimator", "in_channels", int, 1))
        embedder = EmbedderConfig(
            stage_widths=_get(parser, "embedder", "widths", _int_tuple,
                              d.embedder.stage_widths),
            blocks_per_stage=_get(parser, "embedder", "blocks_per_stage", int,
                                  d.embedder.blocks_per_stage),
            embed_dim=_get(parser, "embedder", "embed_dim", int, d.embedder.embed_dim),
            in_channels=estimator.in_channels)
    except ValueError as e:
        raise ConfigError(f"invalid network config: {e}") from e

    try:
        umap = UncertaintyMap(alpha=_get(parser, "uncertainty", "alpha", float, d.umap.alpha),
                              beta=_get(parser, "uncertainty", "beta", float, d.umap.beta))
    except ValueError as e:
        raise ConfigError(f"invalid [uncertainty]: {e}") from e
    anchor = _get(parser, "uncertainty", "anchor", str, d.anchor)
    if anchor not in ("canonicalized", "true_canonical"):
        raise ConfigError(f"invalid value for uncertainty.anchor: {anchor!r}")
    n_ucpc = _get(parser, "uncertainty", "n_ucpc", int, d.n_ucpc)
    if n_ucpc < 1:
        raise ConfigError("invalid value for uncertainty.n_ucpc: must be >= 1")

    try:
        weights = LossWeights(
            lambda_cat=_get(parser, "loss", "lambda_cat", float, d.weights.lambda_cat),
            lambda_reg=_get(parser, "loss", "lambda_reg", float, d.weights.lambda_reg),
            lambda_old=_get(parser, "loss", "lambda_old", float, d.weights.lambda_old),
            pseudo_per_sample=_get(parser, "loss", "pseudo_per_sample", int,
                                   d.weights.pseudo_per_sample))
    except ValueError as e:
        raise ConfigError(f"invalid [loss]: {e}") from e

    try:
        base_raw = parser.get("protocol", "base_classes", fallback="auto")
        protocol = ProtocolSpec(
            ways=_get(parser, "protocol", "ways", int, d.protocol.ways),
            shots=_get(parser, "protocol", "shots", int, d.protocol.shots),
            sessions=_get(parser, "protocol", "sessions", int, d.protocol.sessions),
            base_class_count=None if base_raw.strip() == "auto" else int(base_raw),
            test_fraction=_get(parser, "protocol", "test_fraction", float,
                               d.protocol.test_fraction),
            seed=_get(parser, "protocol", "seed", int, d.protocol.seed))
    except ValueError as e:
        raise ConfigError(f"invalid [protocol]: {e}") from e

    switches = AblationSwitches(
        canonicalize=_get(parser, "run", "canonicalize", bool, True),
        consistency=_get(parser, "run", "consistency", bool, True),
        calibration=_get(parser, "run", "calibration", bool, True))
    seeds = _get(parser, "run", "seeds", _int_tuple, d.seeds)
    if not seeds:
        raise ConfigError("invalid value for run.seeds: need at least one seed")

    return ExperimentConfig(
        source=parser.get("dataset", "source", fallback="synthetic"),
        synth=synth, mel=mel, bounds=bounds, estimator=estimator, embedder=embedder,
        umap=umap, n_ucpc=n_ucpc, anchor=anchor, weights=weights,
        pretrain=_schedule(parser, "schedule_pretrain", d.pretrain),
        full_base=_schedule(parser, "schedule_base", d.full_base),
        incremental=_schedule(parser, "schedule_incremental", d.incremental),
        protocol=protocol, switches=switches, seeds=seeds,
        reseed_splits=_get(parser, "run", "reseed_splits", bool, d.reseed_splits))


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    """Fully resolved, re-parseable text form of a configuration."""
    p = configparser.ConfigParser()
    p["dataset"] = {
        "source": cfg.source, "materials": cfg.synth.material_count,
        "per_class": cfg.synth.per_class_count, "resonances": cfg.synth.resonance_count,
        "noise_std": repr(cfg.synth.noise_std), "mel_bins": cfg.synth.mel_bins,
        "frames": cfg.synth.frames, "channels": cfg.synth.channels,
        "seed": cfg.synth.rng_seed}
    p["mel"] = {"fft_size": cfg.mel.fft_size, "window_len": cfg.mel.window_len,
                "hop_len": cfg.mel.hop_len, "window": cfg.mel.window,
                "mel_bins": cfg.mel.mel_bins, "sample_rate": repr(cfg.mel.sample_rate)}
    p["bounds"] = {k: repr(getattr(cfg.bounds, k))
                   for k in ("delta_max", "tau_min", "tau_max", "b_max", "s_max")}
    p["estimator"] = {"blocks": cfg.estimator.block_count,
                      "width": cfg.estimator.base_width,
                      "in_channels": cfg.estimator.in_channels}
    p["embedder"] = {"widths": ",".join(map(str, cfg.embedder.stage_widths)),
                     "blocks_per_stage": cfg.embedder.blocks_per_stage,
                     "embed_dim": cfg.embedder.embed_dim}
    p["uncertainty"] = {"alpha": repr(cfg.umap.alpha), "beta": repr(cfg.umap.beta),
                        "n_ucpc": cfg.n_ucpc, "anchor": cfg.anchor}
    p["loss"] = {"lambda_cat": repr(cfg.weights.lambda_cat),
                 "lambda_reg": repr(cfg.weights.lambda_reg),
                 "lambda_old": repr(cfg.weights.lambda_old),
                 "pseudo_per_sample": cfg.weights.pseudo_per_sample}
    for name, sch in (("schedule_pretrain", cfg.pretrain),
                      ("schedule_base", cfg.full_base),
                      ("schedule_incremental", cfg.incremental)):
        p[name] = {"lr": repr(sch.lr), "epochs": sch.epochs, "decay": repr(sch.decay),
                   "decay_every": sch.decay_every, "batch_size": sch.batch_size,
                   "momentum": repr(sch.momentum)}
    p["protocol"] = {"ways": cfg.protocol.ways, "shots": cfg.protocol.shots,
                     "sessions": cfg.protocol.sessions,
                     "base_classes": ("auto" if cfg.protocol.base_class_count is None
                                      else cfg.protocol.base_class_count),
                     "test_fraction": repr(cfg.protocol.test_fraction),
                     "seed": cfg.protocol.seed}
    p["run"] = {"seeds": ",".join(map(str, cfg.seeds)),
                "canonicalize": "on" if cfg.switches.canonicalize else "off",
                "consistency": "on" if cfg.switches.consistency else "off",
                "calibration": "on" if cfg.switches.calibration else "off",
                "reseed_splits": "on" if cfg.reseed_splits else "off"}
    buf = io.StringIO()
    p.write(buf)
    return buf.getvalue()
