"""INI-style configuration files.

Every key has a type and a default (dataset paths default to empty); unknown
sections or keys are errors. Relative paths resolve against the config
file's directory. Overrides (``section.key=value`` strings) are applied
after the file, and ``REIDMETRIC_SEED`` overrides ``run.seed`` last.
"""

import configparser
import os

from .data import AugmentConfig
from .errors import ConfigError
from .layers import ModelConfig
from .losses import LossConfig
from .optim import OptimConfig, Schedule
from .sampler import SamplerConfig
from .trainer import TrainConfig

SEED_ENV = "REIDMETRIC_SEED"


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    text = str(text).strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


PATH = "path"

SCHEMA = {
    "model": {
        "arch": (str, "vector"),
        "hidden": (_ints, (128,)),
        "channels": (_ints, (8, 16)),
        "kernel": (int, 3),
        "stride": (int, 2),
        "padding": (int, 1),
        "embed_dim": (int, 256),
        "prelu_init": (float, 0.25),
        "embed_prelu": (_bool, True),
        "dropout": (_bool, False),
        "dropout_mu": (float, 0.1),
        "dropout_sigma": (float, 0.03),
        "in_eps": (float, 1e-5),
    },
    "loss": {
        "kind": (str, "amsoftmax"),
        "s": (float, 30.0),
        "m": (float, 0.35),
        "alpha": (float, 0.3),
        "reduction": (str, "mean"),
    },
    "optim": {
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "bias_correction": (_bool, True),
    },
    "schedule": {
        "base_lr": (float, 0.0015),
        "drop_epochs": (_ints, (40, 50)),
        "drop_factor": (float, 10.0),
        "epochs": (int, 65),
        "warmup_epochs": (int, 5),
    },
    "sampler": {
        "P": (int, 16),
        "K": (int, 4),
        "batch_size": (int, 64),
    },
    "augment": {
        "flip_p": (float, 0.5),
        "hsv_p": (float, 0.5),
        "hue_delta": (float, 0.02),
        "sat_range": (_floats, (0.8, 1.2)),
        "val_range": (_floats, (0.8, 1.2)),
        "gray_p": (float, 0.1),
        "erase_p": (float, 0.5),
        "erase_area": (_floats, (0.02, 0.4)),
        "erase_aspect": (_floats, (0.3, 3.3)),
        "jitter_p": (float, 1.0),
        "jitter_sigma": (float, 0.05),
    },
    "data": {
        "train_manifest": (PATH, ""),
        "num_domains": (int, 2),
        "num_ids": (int, 100),
        "samples_per_id": (int, 20),
        "latent_dim": (int, 32),
        "sigma_w": (float, 0.18),
        "num_cameras": (int, 6),
        "shift": (float, 0.5),
        "offset": (float, 0.5),
        "shared_prototypes": (_bool, True),
    },
    "eval": {
        "query_manifest": (PATH, ""),
        "gallery_manifest": (PATH, ""),
        "query_fraction": (float, 0.25),
        "max_k": (int, 50),
        "eval_every": (int, 0),
        "centroid_num_ids": (int, 200),
        "centroid_min_images": (int, 20),
    },
    "run": {
        "seed": (int, 0),
        "out_dir": (PATH, "runs/default"),
    },
}


def defaults():
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _convert(section, key, text, base_dir):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    conv, _ = SCHEMA[section][key]
    if conv is PATH:
        text = str(text).strip()
        if text and base_dir and not os.path.isabs(text):
            text = os.path.normpath(os.path.join(base_dir, text))
        return text
    try:
        return conv(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from None


def load_config(path=None, overrides=(), env=None):
    """Nested ``{section: {key: value}}`` dict with defaults filled in."""
    cfg = defaults()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = os.path.dirname(os.path.abspath(path))
        for section in parser.sections():
            for key, text in parser.items(section):
                cfg.setdefault(section, {})
                cfg[section][key] = _convert(section, key, text, base)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, text = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg[section][key] = _convert(section, key, text, os.getcwd())
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        cfg["run"]["seed"] = _convert("run", "seed", env[SEED_ENV], None)
    return cfg


def dump_config(cfg):
    """Canonical INI text for ``cfg`` (used in provenance files)."""
    out = []
    for section in SCHEMA:
        out.append(f"[{section}]")
        for key in SCHEMA[section]:
            v = cfg[section][key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{key} = {v}")
        out.append("")
    return "\n".join(out)


def train_config(cfg):
    """Build a TrainConfig from a loaded config dict."""
    m, lo, op, sc, sa, au = (cfg[k] for k in ("model", "loss", "optim", "schedule", "sampler", "augment"))
    try:
        return TrainConfig(
            model=ModelConfig(
                arch=m["arch"], hidden=m["hidden"], channels=m["channels"], kernel=m["kernel"],
                stride=m["stride"], padding=m["padding"], embed_dim=m["embed_dim"],
                prelu_init=m["prelu_init"], embed_prelu=m["embed_prelu"], dropout=m["dropout"],
                dropout_mu=m["dropout_mu"], dropout_sigma=m["dropout_sigma"], in_eps=m["in_eps"],
                input_shape=(1,) if m["arch"] == "vector" else (3, 8, 8),
            ),
            loss=LossConfig(s=lo["s"], m=lo["m"], alpha=lo["alpha"], reduction=lo["reduction"]),
            loss_kind=lo["kind"],
            optim=OptimConfig(op["beta1"], op["beta2"], op["eps"], op["bias_correction"]),
            schedule=Schedule(sc["base_lr"], sc["drop_epochs"], sc["drop_factor"], sc["epochs"], sc["warmup_epochs"]),
            sampler=SamplerConfig(sa["P"], sa["K"], sa["batch_size"]),
            augment=AugmentConfig(
                flip_p=au["flip_p"], hsv_p=au["hsv_p"], hue_delta=au["hue_delta"],
                sat_range=au["sat_range"], val_range=au["val_range"], gray_p=au["gray_p"],
                erase_p=au["erase_p"], erase_area=au["erase_area"], erase_aspect=au["erase_aspect"],
                jitter_p=au["jitter_p"], jitter_sigma=au["jitter_sigma"],
            ),
            seed=cfg["run"]["seed"],
            eval_every=cfg["eval"]["eval_every"],
            max_k=cfg["eval"]["max_k"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
