import copy
import json
import logging
import os
from dataclasses import dataclass
from hashlib import md5

import numpy as np
import pandas as pd

from errors import ConfigError
from transfer import Density
from utils import canonical_json, to_jsonable, toolkit_version

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "default_config.json"

DEFAULT_CONFIG = {
    "model": {
        "dim": 2,
        "A": [[2, 1], [1, 1]],
        "n_star": 10,
        "mu": 0.05,
        "k": [0, 1],
        "beta_mode": "lattice",
        "nu_max": None,
    },
    "discretization": {"K": None, "oversample": 2, "mollifier_fraction": 0.25},
    "solver": {
        "srb_tol": 1e-12,
        "srb_max_iter": 200,
        "resolvent_tol": 1e-12,
        "newton_tol": 1e-12,
        "newton_max_iter": 50,
        "cutoff_tol": 1e-8,
    },
    "continuation": {
        "nu_min": 0.0,
        "nu_max": None,
        "initial_step": 0.05,
        "max_step": 0.5,
        "min_step": 1e-8,
        "fold_band": 0.2,
        "fold_tol": 1e-8,
        "corrector_tol": 1e-12,
        "corrector_max_iter": 30,
        "fit_scale": 0.01,
        "fit_points": 7,
        "classify": True,
        "classify_every": 1,
        "scan_points": 4096,
        "oracle_nus": [],
    },
    "stability": {
        "nus": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
        "circle_points": 256,
        "quadrature_points": 256,
        "max_quadrature_points": 4096,
        "tol": 1e-6,
        "contour_margin": 1e-6,
        "contour_retries": 3,
        "krylov_dim": 400,
        "polish_tol": 1e-12,
        "strict": False,
    },
    "particle": {
        "N": 1000,
        "steps": 10000,
        "nu": 5.0,
        "init": "basins",
        "enter_factor": 5.0,
        "exit_factor": 7.0,
        "min_dwell": 100,
        "chunk": 65536,
        "record_every": 1,
        "smooth_window": None,
    },
    "sweep": {"nu_min": 0.0, "nu_max": 100.0, "points": 101, "scan_points": 4096, "classify": True},
    "validate": {
        "suites": ["model", "transfer", "meanfield", "continuation", "stability", "particle"],
        "K_1d": 32,
        "K_2d": 12,
        "draws": 10,
        "fd_step": 1e-5,
        "fold_nu_max": 60.0,
        "particles": 256,
    },
    "ift": {"nu": 10.0, "omega": None, "delta": 1e-2, "samples": 3},
    "seed": 0,
    "threads": None,
    "out_dir": "results",
}

PARTICLE_INITS = ("basins", "constant", "perturbative")
# not part of the run identity
HASH_EXCLUDED = ("out_dir", "threads")


def initialize_config(path=DEFAULT_CONFIG_FILE):
    """Write the default run configuration if the file doesn't exist"""
    if not os.path.exists(path):
        with open(path, "w") as f:
            json.dump(DEFAULT_CONFIG, f, indent=4, sort_keys=True)
            f.write("\n")
        logger.info(f"Wrote default configuration to {path}")
    return path


def merge_config(base, override, prefix=""):
    """Deep-merge override into a copy of base; unknown keys are rejected"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{dotted}'", key=dotted)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key '{dotted}' must be a section", key=dotted)
            merged[key] = merge_config(base[key], value, f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(config, prefix=""):
    """All tolerances > 0, known particle init mode"""
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            validate_config(value, f"{dotted}.")
        elif key.endswith("tol") or key.endswith("_tol") or key == "tol":
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"tolerance '{dotted}' must be positive, got {value!r}", key=dotted)
    if not prefix and config["particle"]["init"] not in PARTICLE_INITS:
        raise ConfigError(f"particle.init must be one of {PARTICLE_INITS}", key="particle.init")


def config_hash(config):
    """8-character id of a resolved configuration"""
    return md5(canonical_json(config).encode("utf-8")).hexdigest()[:8].upper()


@dataclass(frozen=True)
class RunConfig:
    data: dict

    def section(self, name):
        return copy.deepcopy(self.data[name])

    @property
    def model(self):
        return self.section("model")

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def threads(self):
        return self.data["threads"]

    @property
    def out_dir(self):
        return self.data["out_dir"]

    @property
    def config_hash(self):
        return config_hash({key: value for key, value in self.data.items() if key not in HASH_EXCLUDED})

    def with_overrides(self, out_dir=None, seed=None, threads=None):
        data = copy.deepcopy(self.data)
        if out_dir is not None:
            data["out_dir"] = out_dir
        if seed is not None:
            data["seed"] = int(seed)
        if threads is not None:
            data["threads"] = int(threads)
        return RunConfig(data)

    def meta(self):
        return {"config_hash": self.config_hash, "version": toolkit_version()}


def _read_config_file(path, key):
    if not os.path.exists(path):
        raise ConfigError(f"configuration file {path} not found", key=key)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"configuration file {path} is not valid JSON: {e}", key=key)
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object", key=key)
    return data


def load_run_config(path=None, defaults_path=None):
    """Built-in defaults, then the shipped defaults file, then an optional user file"""
    base = DEFAULT_CONFIG
    if defaults_path is not None and os.path.exists(defaults_path):
        base = merge_config(DEFAULT_CONFIG, _read_config_file(defaults_path, "defaults"))
    override = _read_config_file(path, "--config") if path is not None else {}
    merged = merge_config(base, override)
    validate_config(merged)
    return RunConfig(merged)


def prepare_out_dir(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir} is not writable", key="out_dir")
    return out_dir


def write_csv(frame, path, meta):
    """CSV with two '#' header lines carrying the config hash and version"""
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash: {meta['config_hash']}\n")
        f.write(f"# version: {meta['version']}\n")
        frame.to_csv(f, index=False, float_format="%.17g")
    logger.info(f"Wrote {path}")
    return path


def read_csv(path):
    return pd.read_csv(path, comment="#")


def write_json(payload, path, meta):
    document = to_jsonable(dict(payload))
    document["meta"] = dict(meta)
    with open(path, "w") as f:
        json.dump(document, f, indent=4, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def read_json(path):
    with open(path, "r") as f:
        return json.load(f)


def save_density(density, path, meta):
    return write_csv(density.to_frame(), path, meta)


def load_density(path):
    return Density.from_frame(read_csv(path))


def save_density_binary(density, path):
    """Little-endian float64 rows (k1[, k2], re, im), row-major"""
    frame = density.to_frame()
    frame.to_numpy(dtype="<f8").tofile(path)
    return path


def load_density_binary(path, dim):
    rows = np.fromfile(path, dtype="<f8").reshape(-1, dim + 2)
    columns = [f"k{axis + 1}" for axis in range(dim)] + ["re", "im"]
    frame = pd.DataFrame(rows, columns=columns)
    frame[columns[:dim]] = frame[columns[:dim]].astype(int)
    return Density.from_frame(frame)


def write_error(error, out_dir, meta=None):
    """error.json with the machine-readable failure; config_hash is null when no configuration loaded"""
    path = os.path.join(out_dir, "error.json")
    document = to_jsonable(error.to_dict())
    document["meta"] = dict(meta) if meta else {"config_hash": None, "version": toolkit_version()}
    with open(path, "w") as f:
        json.dump(document, f, indent=4, sort_keys=True)
        f.write("\n")
    return path
