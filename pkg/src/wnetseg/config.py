"""Plain-text ``key = value`` configuration for the command-line pipeline.

Every key has a default listed in :data:`DEFAULTS`; a file (and ``--set``
overrides) may change any of them, and unknown keys are rejected.  Lines
starting with ``#`` and blank lines are ignored.  Booleans are written
``true``/``false``; lists are comma separated.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .affinity import AffinityParams
from .contours.cues import CueParams
from .crf import CrfParams
from .model.network import WNetConfig
from .model.train import TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


# key: (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "master seed; the network is initialized from it and training samples from seed+1"),
    "wnet.input_size": (64, "side length images are resized to"),
    "wnet.in_channels": (3, "image channels"),
    "wnet.k": (8, "number of encoder classes"),
    "wnet.depth": (3, "pooling levels per U"),
    "wnet.base_channels": (8, "channels of the first module"),
    "wnet.dropout": (0.35, "drop probability on module outputs during training"),
    "wnet.dropout_is_keep": (False, "read wnet.dropout as a keep probability"),
    "wnet.batch_norm": (True, "batch normalization after every ReLU"),
    "wnet.dtype": ("float32", "network arithmetic, float32 or float64"),
    "train.batch_size": (2, "images per minibatch"),
    "train.lr_initial": (0.3, "initial SGD step size"),
    "train.lr_decay_every": (1000, "iterations between step-size decays"),
    "train.lr_decay_factor": (0.1, "step-size multiplier at each decay"),
    "train.max_iters": (2000, "training iterations"),
    "train.use_ncut": (True, "take the soft normalized-cut step on the encoder"),
    "train.checkpoint_every": (500, "iterations between checkpoint writes"),
    "affinity.sigma_i": (10.0, "intensity bandwidth on the 0-255 scale"),
    "affinity.sigma_x": (4.0, "spatial bandwidth in pixels"),
    "affinity.radius": (5.0, "pixels at distance >= radius are not linked"),
    "crf.iterations": (10, "mean-field iterations"),
    "crf.w_app": (5.0, "appearance kernel weight"),
    "crf.w_smooth": (3.0, "smoothness kernel weight"),
    "crf.theta_alpha": (20.0, "appearance kernel position bandwidth"),
    "crf.theta_beta": (13.0, "appearance kernel colour bandwidth (0-255 scale)"),
    "crf.theta_gamma": (3.0, "smoothness kernel position bandwidth"),
    "crf.max_pixels": (128 * 128, "largest image accepted by exact inference"),
    "cues.scales": ((2.0, 4.0, 8.0), "half-disc radii in pixels"),
    "cues.orientations": (8, "orientations over [0, pi)"),
    "cues.bins": (25, "histogram bins per channel"),
    "cues.gamma": (0.5, "weight of the spectral cue"),
    "cues.use_texture": (False, "add a texton channel"),
    "cues.use_spb": (False, "add the spectral cue"),
    "cues.textons": (16, "texton count"),
    "cues.logistic_a": (8.0, "slope of the strength logistic"),
    "cues.logistic_b": (0.25, "centre of the strength logistic"),
    "cues.spectral_size": (64, "largest side of the eigenproblem grid"),
    "cues.spectral_radius": (5.0, "link radius of the spectral graph"),
    "cues.spectral_rho": (0.1, "contour scale of the spectral affinity"),
    "cues.eigenvectors": (4, "non-trivial eigenvectors used"),
    "regions.min_area": (4, "regions smaller than this are absorbed"),
    "eval.step": (0.05, "spacing of the threshold grid over [0, 1]"),
    "segment.thresholds": ((0.5,), "thresholds written as flat segmentations"),
    "segment.overlay_threshold": (0.5, "threshold whose boundaries are drawn on the overlay"),
    "synth.count": (20, "images in the synthetic corpus"),
    "synth.size": (64, "synthetic image side length"),
    "synth.min_regions": (2, "fewest regions per image"),
    "synth.max_regions": (4, "most regions per image"),
    "synth.noise": (0.02, "Gaussian noise standard deviation"),
    "synth.kind": ("flat", "flat, gradient or noisy"),
    "synth.channels": (3, "1 or 3"),
}


def _parse(key: str, text: str):
    default = DEFAULTS[key][0]
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class PipelineConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                try:
                    cfg.set(key.strip(), value)
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in DEFAULTS)

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def wnet(self) -> WNetConfig:
        return WNetConfig(**self.section("wnet"))

    def train(self) -> TrainConfig:
        sec = self.section("train")
        sec.pop("checkpoint_every")
        return TrainConfig(seed=self["seed"] + 1, **sec)

    def affinity(self) -> AffinityParams:
        return AffinityParams(**self.section("affinity"))

    def crf(self) -> CrfParams:
        return CrfParams(**self.section("crf"))

    def cues(self) -> CueParams:
        return CueParams(seed=self["seed"], **self.section("cues"))

    def synth(self) -> SynthConfig:
        return SynthConfig(seed=self["seed"], **self.section("synth"))

    def eval_grid(self) -> tuple[float, ...]:
        step = self["eval.step"]
        if not 0 < step <= 1:
            raise ConfigError("eval.step must lie in (0, 1]")
        n = int(round(1.0 / step))
        return tuple(round(i / n, 10) for i in range(n + 1))


def describe() -> str:
    """Every key with its default and meaning, in config-file syntax."""
    return "".join(f"# {doc}\n{k} = {_format(v)}\n" for k, (v, doc) in DEFAULTS.items())
