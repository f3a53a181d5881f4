import json
import logging
import os
from importlib import metadata

import numpy as np

PACKAGE_NAME = "meanfield-bifurcation"
FALLBACK_VERSION = "0.1.0"
THREADS_ENV = "MFBIF_THREADS"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level=logging.INFO):
    """Single stream handler on the root logger"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def toolkit_version():
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return FALLBACK_VERSION


def resolve_threads(cli_value=None, config_value=None):
    """--threads, then $MFBIF_THREADS, then the config entry, then 1"""
    for value in (cli_value, os.environ.get(THREADS_ENV), config_value):
        if value in (None, ""):
            continue
        try:
            threads = int(value)
        except (TypeError, ValueError):
            continue
        if threads >= 1:
            return threads
    return 1


def to_jsonable(value):
    """Plain JSON types for numpy scalars, arrays and complex numbers"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def canonical_json(value):
    return json.dumps(to_jsonable(value), sort_keys=True, separators=(",", ":"))


def format_complex(z, digits=10):
    z = complex(z)
    sign = "+" if z.imag >= 0 else "-"
    return f"{z.real:.{digits}g}{sign}{abs(z.imag):.{digits}g}i"
