"""``key = value`` run configuration with typed keys and flag overrides.

Unknown keys are rejected. Values not given anywhere fall back to the
per-command defaults, and the fully resolved mapping is written next to each
command's outputs so it can be fed back with ``--config``.
"""
import os
from pathlib import Path

from .errors import ConfigError


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


def _floats(text):
    return tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)


def _weights(text):
    t = str(text).strip().lower()
    if t in ("uniform", "ck", "ck+"):
        return t.replace("+", "")
    return _floats(text)


# key -> (parser, default)
KEYS = {
    "seed": (int, 0),
    # optimisation
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-5),
    "max_epochs": (int, 100),
    "batch_size": (int, None),
    "early_stop_patience": (int, 10),
    "loss": (str, None),
    "augment": (_bool, False),
    # cnn
    "head": (str, "regression"),
    "image_size": (int, 96),
    "filters": (_ints, (64, 128, 256)),
    "fc_units": (int, 300),
    # rnn
    "cell": (str, "gru"),
    "layers": (int, 1),
    "window": (int, 100),
    # balancing
    "target": (str, "midpoint"),
    "mode": (str, "balance"),
    # synthetic data
    "kind": (str, "va"),
    "n_videos": (int, 4),
    "frames_per_video": (int, 200),
    "temporal_lag": (int, 5),
    "walk_step": (float, 0.2),
    "missing_fraction": (float, 0.0),
    "pixel_noise": (float, 0.0),
    "n_samples": (int, 800),
    "class_weights": (_weights, "uniform"),
    "exact_counts": (_bool, False),
    "noise": (float, 0.35),
    "jitter_deg": (float, 6.0),
    "tail_mass": (float, 0.9),
    "mode_spread": (float, 0.25),
    "zero_fraction": (float, 0.05),
}


def _parse(key, value, where):
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    parser, default = KEYS[key]
    if default is None and str(value).strip() == "":
        return None  # optional key left unset: the command picks its default
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def read_config_file(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _parse(key, value, f"{path}:{n}")
    return out


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = (p.strip() for p in pair.split("=", 1))
        out[key] = _parse(key, value, "--set")
    return out


class RunConfig(dict):
    """Resolved configuration: defaults < command defaults < file < flags."""

    @classmethod
    def resolve(cls, config_path=None, overrides=None, command_defaults=None):
        values = {k: d for k, (_, d) in KEYS.items()}
        env_seed = os.environ.get("VA_SEED")
        if env_seed is not None:
            values["seed"] = _parse("seed", env_seed, "VA_SEED")
        values.update(command_defaults or {})
        if config_path:
            values.update(read_config_file(config_path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)

    def dump(self, path):
        with open(path, "w") as fh:
            for key in sorted(self):
                fh.write(f"{key} = {format_value(self[key])}\n")


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)
