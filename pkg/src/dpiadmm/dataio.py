"""Dataset ingestion, run configuration and metrics files.

Supported inputs:

* IDX binaries (the MNIST distribution format), big-endian headers.
* Per-agent tables: one sample per line, class index first, then features,
  comma separated. A directory of such files describes a heterogeneous
  federation, one file per agent.
* Flat ``key = value`` configs with ``#`` comments, or a JSON object holding
  the same keys (the run metadata files written by the CLI).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .admm import FeasibleBox, RhoSchedule, Schedules
from .federation import Algorithm, MetricsRecord, RunConfig, partition_homogeneous
from .mechanisms import PARTITION_STREAM, Mechanism, PrivacyConfig, RngStream
from .model import AgentData, one_hot

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

METRICS_HEADER = ("t", "test_error", "avg_noise_mag", "consensus_violation", "objective", "rho_t", "prox_t")


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _read_header(data: bytes, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(data) < need:
        raise ParseError(f"header truncated: need {need} bytes, got {len(data)} (offset {len(data)})")
    found, *dims = struct.unpack(f">{1 + n_dims}I", data[:need])
    if found != magic:
        raise ParseError(f"bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return tuple(dims)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Pixels of an IDX3 file as an ``(I, rows*cols)`` array scaled to [0, 1]."""
    count, rows, cols = _read_header(data, IMAGE_MAGIC, 3)
    expected = count * rows * cols
    payload = len(data) - 16
    if payload < expected:
        raise ParseError(f"payload truncated at offset {len(data)}: expected {expected} pixel bytes, "
                         f"got {payload}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=16)
    return pixels.reshape(count, rows * cols) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    (count,) = _read_header(data, LABEL_MAGIC, 1)
    payload = len(data) - 8
    if payload < count:
        raise ParseError(f"payload truncated at offset {len(data)}: expected {count} label bytes, got {payload}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx_images(path) -> np.ndarray:
    return parse_idx_images(Path(path).read_bytes())


def load_idx_labels(path) -> np.ndarray:
    return parse_idx_labels(Path(path).read_bytes())


def read_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and feature rows of a per-agent table."""
    classes: list[int] = []
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                values = [float(c) for c in raw]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, got {len(values)}")
            if values[0] != int(values[0]) or values[0] < 0:
                raise ParseError(f"{path}:{lineno}: class index must be a nonnegative integer")
            classes.append(int(values[0]))
            rows.append(values[1:])
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    return np.asarray(classes, dtype=np.int64), np.asarray(rows, dtype=float)


def load_agent_table(path, num_classes: int, num_features: int | None = None) -> AgentData:
    classes, features = read_table(path)
    if classes.size == 0:
        return AgentData(np.zeros((0, num_features or 0)), np.zeros((0, num_classes)))
    if classes.max() >= num_classes:
        raise ParseError(f"{path}: class index {classes.max()} >= number of classes {num_classes}")
    if num_features is not None and features.shape[1] != num_features:
        raise ParseError(f"{path}: {features.shape[1]} features, expected {num_features}")
    return AgentData(features, one_hot(classes, num_classes))


def write_agent_table(data: AgentData, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for c, row in zip(data.classes, data.features):
            writer.writerow([int(c)] + [f"{v:.10g}" for v in row])


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def write_metrics(records, path) -> None:
    lines = [",".join(METRICS_HEADER)]
    for r in records:
        lines.append(",".join([str(r.t)] + [_fmt(getattr(r, k)) for k in METRICS_HEADER[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_HEADER:
            raise ParseError(f"{path}: unexpected metrics header {header}")
        return [MetricsRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader if row]


# ---------------------------------------------------------------- config

CONFIG_KEYS = (
    "algorithm", "T", "eps_bar", "delta_bar", "mechanism", "sigma_scale", "sigma_decay",
    "rho.c1", "rho.c2", "rho.Tc", "rho.cap", "prox.a", "box.B", "beta", "P", "seed",
    "log_every", "log_objective", "dtype", "num_classes", "partition_seed", "bias_column",
    "train.images", "train.labels", "agents.dir", "test.images", "test.labels",
)

_DEFAULTS = {
    "algorithm": "ObjT", "T": "0", "eps_bar": "1", "delta_bar": "1e-6", "mechanism": "",
    "sigma_scale": "1", "sigma_decay": "0.25", "rho.c1": "2", "rho.c2": "5", "rho.Tc": "10000",
    "rho.cap": "1e9", "prox.a": "1", "box.B": "100", "beta": "1e-6", "P": "10", "seed": "0",
    "log_every": "100", "log_objective": "true", "dtype": "float64", "num_classes": "", "partition_seed": "0",
    "bias_column": "false", "train.images": "", "train.labels": "", "agents.dir": "",
    "test.images": "", "test.labels": "",
}

_INT_KEYS = {"T", "rho.Tc", "P", "seed", "log_every", "partition_seed"}
_FLOAT_KEYS = {"eps_bar", "delta_bar", "sigma_scale", "sigma_decay", "rho.c1", "rho.c2", "rho.cap",
               "prox.a", "beta"}
_BOOL_KEYS = {"bias_column", "log_objective"}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_config_mapping(path) -> dict[str, str]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        obj = json.loads(text)
        obj = obj.get("config", obj)
        return {k: "" if v is None else str(v) for k, v in obj.items()}
    return parse_config_text(text)


def _convert(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            try:
                return int(raw)
            except ValueError:
                f = float(raw)
                return int(f) if f == int(f) else _bad(key, raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            return _bad(key, raw)
    except (ValueError, OverflowError):
        _bad(key, raw)
    return raw


def _bad(key, raw):
    raise ConfigError(f"{key}: cannot parse {raw!r}")


def config_from_mapping(mapping: dict[str, str]) -> RunConfig:
    unknown = set(mapping) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {**_DEFAULTS, **{k: str(v) for k, v in mapping.items()}}
    v = {k: _convert(k, merged[k]) for k in CONFIG_KEYS}

    def check(cond, key, why):
        if not cond:
            raise ConfigError(f"{key}: {why} (got {merged[key]!r})")

    try:
        algorithm = Algorithm(v["algorithm"])
    except ValueError:
        raise ConfigError(f"algorithm: unknown algorithm {v['algorithm']!r}") from None
    check(v["eps_bar"] > 0, "eps_bar", "must be > 0")
    check(v["T"] >= 0, "T", "must be >= 0")
    check(v["log_every"] >= 1, "log_every", "must be >= 1")
    check(v["P"] >= 1, "P", "must be >= 1")
    check(v["beta"] >= 0, "beta", "must be >= 0")
    check(v["rho.c1"] > 0, "rho.c1", "must be > 0")
    check(v["rho.c2"] >= 0, "rho.c2", "must be >= 0")
    check(v["rho.Tc"] >= 1, "rho.Tc", "must be >= 1")
    check(v["rho.cap"] > 0, "rho.cap", "must be > 0")
    check(v["prox.a"] > 0, "prox.a", "must be > 0")
    check(v["sigma_scale"] > 0, "sigma_scale", "must be > 0")
    check(v["sigma_decay"] >= 0, "sigma_decay", "must be >= 0")
    check(v["dtype"] in ("float64", "float32"), "dtype", "must be float64 or float32")
    if v["num_classes"]:
        check(v["num_classes"].isdigit() and int(v["num_classes"]) >= 1, "num_classes", "must be a positive integer")

    mech_raw = v["mechanism"] or algorithm.default_mechanism.value
    try:
        mechanism = Mechanism(mech_raw)
    except ValueError:
        raise ConfigError(f"mechanism: unknown mechanism {mech_raw!r}") from None
    check(mechanism in algorithm.allowed_mechanisms, "mechanism", f"not usable with {algorithm.value}")
    if mechanism is Mechanism.GAUSSIAN_OUTPUT:
        check(0 < v["delta_bar"] < 1, "delta_bar", "must lie in (0, 1)")

    box_raw = str(v["box.B"]).lower()
    if box_raw in ("none", "inf", "unbounded"):
        bound = None
    else:
        try:
            bound = float(box_raw)
        except ValueError:
            raise ConfigError(f"box.B: cannot parse {v['box.B']!r}") from None
        check(bound > 0, "box.B", "must be > 0 or 'none'")

    return RunConfig(
        algorithm=algorithm,
        T=v["T"],
        privacy=PrivacyConfig(eps_bar=v["eps_bar"], mechanism=mechanism, delta_bar=v["delta_bar"],
                              sigma_scale=v["sigma_scale"], sigma_decay=v["sigma_decay"]),
        schedules=Schedules(RhoSchedule(v["rho.c1"], v["rho.c2"], v["rho.Tc"], v["rho.cap"]), v["prox.a"]),
        box=FeasibleBox(bound),
        beta=v["beta"],
        P=v["P"],
        seed=v["seed"],
        log_every=v["log_every"],
        bias_column=v["bias_column"],
        log_objective=v["log_objective"],
        dtype=v["dtype"],
        train_images=v["train.images"] or None,
        train_labels=v["train.labels"] or None,
        agents_dir=v["agents.dir"] or None,
        test_images=v["test.images"] or None,
        test_labels=v["test.labels"] or None,
        num_classes=int(v["num_classes"]) if v["num_classes"] else None,
        partition_seed=v["partition_seed"],
    )


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a config file; ``overrides`` (same keys) take precedence."""
    mapping = read_config_mapping(path) if path else {}
    mapping.update(overrides or {})
    return config_from_mapping(mapping)


def config_to_mapping(config: RunConfig) -> dict[str, str]:
    p, s = config.privacy, config.schedules
    return {
        "algorithm": config.algorithm.value,
        "T": str(config.T),
        "eps_bar": repr(p.eps_bar),
        "delta_bar": repr(p.delta_bar),
        "mechanism": p.mechanism.value,
        "sigma_scale": repr(p.sigma_scale),
        "sigma_decay": repr(p.sigma_decay),
        "rho.c1": repr(s.rho.c1),
        "rho.c2": repr(s.rho.c2),
        "rho.Tc": str(s.rho.Tc),
        "rho.cap": repr(s.rho.cap),
        "prox.a": repr(s.prox_scale),
        "box.B": "none" if config.box.bound is None else repr(config.box.bound),
        "beta": repr(config.beta),
        "P": str(config.P),
        "seed": str(config.seed),
        "log_every": str(config.log_every),
        "log_objective": str(config.log_objective).lower(),
        "dtype": config.dtype,
        "num_classes": "" if config.num_classes is None else str(config.num_classes),
        "partition_seed": str(config.partition_seed),
        "bias_column": str(config.bias_column).lower(),
        "train.images": config.train_images or "",
        "train.labels": config.train_labels or "",
        "agents.dir": config.agents_dir or "",
        "test.images": config.test_images or "",
        "test.labels": config.test_labels or "",
    }


# ---------------------------------------------------------------- problem assembly

def add_bias_column(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _load_features_labels(images: str, labels: str) -> tuple[np.ndarray, np.ndarray]:
    if images.endswith(".csv"):
        classes, feats = read_table(images)
        return feats, classes
    return load_idx_images(images), load_idx_labels(labels)


def load_problem(config: RunConfig) -> tuple[list[AgentData], AgentData | None]:
    """Build the agents' training data and the test set described by ``config``.

    With ``agents.dir`` every ``*.csv`` file (sorted by name) is one agent and
    no re-partitioning happens; otherwise the IDX training files are shuffled
    and split evenly among ``P`` agents using ``partition_seed``, which is
    kept apart from the noise seed so repeated runs share one partition.
    """
    num_classes = config.num_classes
    test_x = test_c = None
    if config.test_images:
        test_x, test_c = _load_features_labels(config.test_images, config.test_labels or "")

    if config.agents_dir:
        files = sorted(Path(config.agents_dir).glob("*.csv"))
        if not files:
            raise ParseError(f"{config.agents_dir}: no agent tables (*.csv)")
        tables = [read_table(f) for f in files]
        K = num_classes or 1 + max([int(c.max()) for c, _ in tables if c.size]
                                   + ([int(test_c.max())] if test_c is not None and test_c.size else []))
        J = next(x.shape[1] for c, x in tables if c.size)
        agents = []
        for f, (c, x) in zip(files, tables):
            if c.size == 0:
                x = np.zeros((0, J))
            elif x.shape[1] != J:
                raise ParseError(f"{f}: {x.shape[1]} features, expected {J}")
            if c.size and c.max() >= K:
                raise ParseError(f"{f}: class index {c.max()} >= number of classes {K}")
            if config.bias_column:
                x = add_bias_column(x)
            agents.append(AgentData(x, one_hot(c, K)))
    else:
        if not (config.train_images and config.train_labels):
            raise ConfigError("need train.images and train.labels, or agents.dir")
        x, c = _load_features_labels(config.train_images, config.train_labels)
        if x.shape[0] != c.shape[0]:
            raise ParseError(f"{x.shape[0]} training images but {c.shape[0]} labels")
        K = num_classes or 1 + max(int(c.max()), int(test_c.max()) if test_c is not None and test_c.size else 0)
        if c.max() >= K:
            raise ParseError(f"label {c.max()} >= number of classes {K}")
        if config.bias_column:
            x = add_bias_column(x)
        agents = partition_homogeneous(x, one_hot(c, K), config.P, RngStream(config.partition_seed, purpose=PARTITION_STREAM))

    test = None
    if test_x is not None:
        if test_x.shape[0] != test_c.shape[0]:
            raise ParseError(f"{test_x.shape[0]} test images but {test_c.shape[0]} labels")
        if test_c.size and test_c.max() >= K:
            raise ParseError(f"test label {test_c.max()} >= number of classes {K}")
        if config.bias_column:
            test_x = add_bias_column(test_x)
        test = AgentData(test_x, one_hot(test_c, K))
    return agents, test


def format_float(v: float) -> str:
    return "inf" if math.isinf(v) else _fmt(v)
