"""``key = value`` run configuration shared by every CLI subcommand.

One key per line, ``#`` starts a comment, blank lines are ignored. Strings
may be bare or double-quoted; booleans accept true/false/yes/no/1/0; list
values are comma-separated. Every key and its default is listed in
:data:`FIELDS` (``mimae`` prints them with ``--help``-style docs via
:func:`describe`).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from mimae.errors import ConfigError, ContractError
from mimae.masking import COUNT_STRATEGIES, STRATEGIES, mask_count


def _opt(default, doc, check=None):
    return field(default=default, metadata={"doc": doc, "check": check})


def _positive(v):
    return None if v > 0 else "must be > 0"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _open_unit(v):
    return None if 0 < v < 1 else "must lie strictly between 0 and 1"


def _unit(v):
    return None if 0 <= v <= 1 else "must lie in [0, 1]"


def _beta(v):
    return None if 0 <= v < 1 else "must lie in [0, 1)"


def _one_of(*choices):
    def check(v):
        return None if v in choices else f"must be one of {', '.join(choices)}"
    return check


def _rhos(v):
    return None if v and all(-1 < r < 1 for r in v) else "needs one or more correlations in (-1, 1)"


def _at_least(n):
    def check(v):
        return None if v >= n else f"must be >= {n}"
    return check


@dataclass(frozen=True)
class RunConfig:
    # data
    data_path: str = _opt("", "dataset file (MIMDS1); empty means generate the synthetic set in memory")
    num_images: int = _opt(512, "synthetic dataset size", _positive)
    class_count: int = _opt(4, "synthetic class count", _positive)
    data_seed: int = _opt(0, "synthetic generator seed")
    noise: float = _opt(0.05, "synthetic pixel noise std", _non_negative)
    out_dir: str = _opt("runs/default", "directory for metrics, checkpoints, plots and reports")
    # model
    image_size: int = _opt(32, "image side length in pixels", _positive)
    channels: int = _opt(1, "image channels", _positive)
    patch_size: int = _opt(8, "patch side length", _positive)
    embed_dim: int = _opt(64, "encoder width", _positive)
    encoder_depth: int = _opt(4, "encoder blocks", _positive)
    decoder_dim: int = _opt(32, "decoder width", _positive)
    decoder_depth: int = _opt(2, "decoder blocks", _positive)
    num_heads: int = _opt(4, "attention heads (encoder and decoder)", _positive)
    latent_dim: int = _opt(64, "pooled latent size; must equal embed_dim", _positive)
    approx_hidden_dim: int = _opt(128, "approximation network hidden width", _positive)
    sigma_floor: float = _opt(1e-4, "lower bound on predicted sigma", _positive)
    mlp_ratio: int = _opt(4, "transformer MLP expansion", _positive)
    latent_pool: str = _opt("cls", "latent pooling: cls or mean", _one_of("cls", "mean"))
    # training
    epochs: int = _opt(50, "pretraining epochs", _positive)
    batch_size: int = _opt(64, "images per step", _at_least(2))
    mask_ratio: float = _opt(0.75, "fraction of masked patches per view", _open_unit)
    mask_count_strategy: str = _opt("complete", "masks per image: complete or fixed4",
                                    _one_of(*COUNT_STRATEGIES))
    mask_strategy: str = _opt("orthogonal", "orthogonal or independent", _one_of(*STRATEGIES))
    lambda1: float = _opt(1.0, "reconstruction weight", _non_negative)
    lambda2: float = _opt(1.0, "InfoNCE (MI maximization) weight", _non_negative)
    lambda3: float = _opt(10.0, "CLUB (MI minimization) weight", _non_negative)
    tau: float = _opt(0.07, "InfoNCE temperature", _positive)
    eps_l: float = _opt(0.5, "reconstruction threshold that opens the gate", _non_negative)
    gate_mode: str = _opt("latch", "latch (epoch mean, never closes), batch or open",
                          _one_of("latch", "batch", "open"))
    base_lr: float = _opt(1.5e-3, "peak learning rate", _non_negative)
    min_lr: float = _opt(0.0, "final learning rate", _non_negative)
    warmup_fraction: float = _opt(0.1, "fraction of steps spent in linear warmup", _unit)
    weight_decay: float = _opt(0.05, "decoupled weight decay", _non_negative)
    beta1: float = _opt(0.9, "AdamW beta1", _beta)
    beta2: float = _opt(0.95, "AdamW beta2", _beta)
    approx_lr: float = _opt(1e-3, "approximation network peak learning rate", _non_negative)
    approx_weight_decay: float = _opt(0.0, "approximation network weight decay", _non_negative)
    norm_pix: bool = _opt(False, "standardize each target patch")
    club_clamp: bool = _opt(False, "floor each CLUB term at 0 so a lagging q cannot be exploited")
    approx_steps: int = _opt(1, "approximation-net updates per training step", _positive)
    seed: int = _opt(0, "training seed")
    checkpoint_every: int = _opt(0, "save a checkpoint every k epochs (0: only at the end)", _non_negative)
    probe_every: int = _opt(0, "linear-probe every k epochs (0: never during training)", _non_negative)
    resume: bool = _opt(False, "continue from out_dir/checkpoint.mimae if present")
    # probing
    checkpoint: str = _opt("", "checkpoint to probe; empty means out_dir/checkpoint.mimae")
    probe_data_path: str = _opt("", "labelled dataset for probing; empty means the training data")
    probe_test_fraction: float = _opt(0.25, "held-out fraction for probe accuracy", _open_unit)
    probe_epochs: int = _opt(100, "probe SGD epochs", _positive)
    probe_lr: float = _opt(0.1, "probe SGD learning rate", _positive)
    # MI verification
    bench_rhos: tuple = _opt((0.0, 0.3, 0.6, 0.9), "correlations to test", _rhos)
    bench_dim: int = _opt(1, "Gaussian dimension", _positive)
    bench_samples: int = _opt(10000, "sample pairs per correlation", _at_least(100))
    bench_batch: int = _opt(128, "InfoNCE contrast batch", _at_least(2))
    bench_tau: float = _opt(0.5, "InfoNCE critic temperature", _positive)
    bench_delta: float = _opt(0.1, "sandwich slack in nats", _non_negative)
    bench_seed: int = _opt(0, "estimator training seed")
    # plotting
    metrics_path: str = _opt("", "metrics CSV to plot; empty means out_dir/metrics.csv")
    plot_dir: str = _opt("", "SVG output directory; empty means out_dir/plots")

    # ---------------------------------------------------------- derived
    @property
    def num_masks(self) -> int:
        return mask_count(self.mask_ratio, self.mask_count_strategy)

    def model_config(self):
        from mimae.model import ModelConfig

        names = {f.name for f in fields(ModelConfig)}
        return _build(ModelConfig, {k: getattr(self, k) for k in names})

    def loss_weights(self):
        from mimae.objectives import LossWeights

        return _build(LossWeights, {k: getattr(self, k) for k in ("lambda1", "lambda2", "lambda3", "tau", "eps_l")})

    def train_config(self):
        from mimae.trainer import TrainConfig

        names = {f.name for f in fields(TrainConfig)} - {"weights"}
        return _build(TrainConfig, {**{k: getattr(self, k) for k in names}, "weights": self.loss_weights()})

    def synthetic_spec(self):
        from mimae.io.dataset import SyntheticSpec

        return SyntheticSpec(self.num_images, self.image_size, self.channels, self.class_count,
                             self.data_seed, self.noise)

    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / default_name

    def validate(self) -> "RunConfig":
        """Cross-key checks (the per-key ranges are enforced on construction)."""
        self.model_config()
        self.train_config()
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def __post_init__(self):
        for f in fields(self):
            check = f.metadata.get("check")
            msg = check(getattr(self, f.name)) if check else None
            if msg:
                raise ConfigError(f"{getattr(self, f.name)!r} {msg}", key=f.name)


FIELDS = {f.name: f for f in fields(RunConfig)}


def _build(cls, kwargs):
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------ text format
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _kind(f) -> str:
    return {"int": "int", "float": "float", "bool": "bool", "str": "str", "tuple": "floats"}[f.type]


def convert(key: str, raw: str, line: int | None = None):
    """Typed value for ``key`` from its textual form."""
    if key not in FIELDS:
        raise ConfigError("unknown key", key=key, line=line)
    kind = _kind(FIELDS[key])
    text = raw.strip()
    try:
        if kind == "str":
            if len(text) >= 2 and text[0] == text[-1] == '"':
                return json.loads(text)
            return text
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int":
            return int(text)
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        return tuple(float(p) for p in text.split(",") if p.strip())
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"expected {kind}, got {text!r}", key=key, line=line) from None


def _check(key: str, value, line):
    check = FIELDS[key].metadata.get("check")
    msg = check(value) if check else None
    if msg:
        raise ConfigError(f"{value!r} {msg}", key=key, line=line)


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse config text, then apply ``key=value`` overrides in order."""
    values: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip() if '"' not in raw_line else _strip_comment(raw_line)
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        values[key] = convert(key, raw, lineno)
        _check(key, values[key], lineno)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        values[key] = convert(key, raw)
        _check(key, values[key], None)
    return RunConfig(**values).validate()


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i].strip()
    return line.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Text that :func:`parse_config` maps back to an equal config."""
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def describe() -> str:
    """One commented line per key with its default."""
    return "".join(f"# {f.metadata['doc']}\n{f.name} = {_format(f.default)}\n\n" for f in fields(RunConfig))


def load_config(path=None, overrides=()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: config is not UTF-8") from exc
    return parse_config(text, overrides)
