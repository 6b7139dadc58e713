"""Experiment configuration: versioned JSON schema, validation, hashing.

Schema (version 1); every section except ``modalities`` is optional::

    {
      "version": 1,
      "experiment_id": "toy",
      "seed": 0,
      "output_dir": "runs/toy",
      "max_qubits": 14,
      "modalities": [{"name": "a", "input_dim": 4, "num_qubits": 2, "num_layers": 1}, ...],
      "fusion_layers": 1,
      "num_classes": 3,
      "mma": true,
      "federation": {"clients": 4, "rounds": 30, "local_epochs": 1, "batch_size": null},
      "optimizer": {"kind": "adam", "learning_rate": 0.05, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
      "partition": {"scheme": "iid", "alpha": 0.5},
      "noise": {"mode": "off", "p": 0.0, "allow_out_of_range": false},
      "missing": {"fractions": [0.0, 0.2], "garbage": "gaussian_noise", "sigma": 1.0,
                  "apply_to_test": true, "targets": [0]},
      "data": {"source": "synthetic", "num_train": 400, "num_test": 1000,
               "class_separation": 3.0, "cross_modal_weight": 0.0, "noise_scale": 1.0,
               "offset": 2.0, "fraction": 1.0, "use_modalities": null,
               "train_path": null, "test_path": null}
    }

``missing.targets`` lists the modalities the ``missing_fraction`` sweep
axis writes to. ``data.use_modalities`` restricts a run to a subset of the
modalities (e.g. ``[1]`` for a unimodal model on the second one).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from .errors import ConfigError

SCHEMA_VERSION = 1
DEFAULT_MAX_QUBITS = 14


@dataclass
class ModalityConfig:
    name: str
    input_dim: int
    num_qubits: int
    num_layers: int = 1


@dataclass
class FederationConfig:
    clients: int = 1
    rounds: int = 1
    local_epochs: int = 1
    batch_size: Optional[int] = None


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PartitionConfig:
    scheme: str = "iid"
    alpha: float = 0.5


@dataclass
class NoiseConfig:
    mode: str = "off"
    p: float = 0.0
    allow_out_of_range: bool = False


@dataclass
class MissingConfig:
    fractions: Optional[List[float]] = None
    garbage: str = "gaussian_noise"
    sigma: float = 1.0
    apply_to_test: bool = True
    targets: List[int] = field(default_factory=lambda: [0])


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_train: int = 400
    num_test: int = 1000
    class_separation: object = 3.0
    cross_modal_weight: float = 0.0
    noise_scale: float = 1.0
    offset: float = 2.0
    fraction: float = 1.0
    use_modalities: Optional[List[int]] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None


@dataclass
class ExperimentConfig:
    modalities: List[ModalityConfig]
    version: int = SCHEMA_VERSION
    experiment_id: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    max_qubits: int = DEFAULT_MAX_QUBITS
    fusion_layers: int = 1
    num_classes: int = 2
    mma: bool = True
    federation: FederationConfig = field(default_factory=FederationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def total_qubits(self) -> int:
        return sum(m.num_qubits for m in self.modalities)

    @property
    def active_modalities(self) -> List[int]:
        if self.data.use_modalities is None:
            return list(range(len(self.modalities)))
        return list(self.data.use_modalities)

    def replace(self, **changes) -> "ExperimentConfig":
        """Deep copy with dotted-path overrides, re-validated."""
        raw = self.to_dict()
        for path, value in changes.items():
            set_path(raw, path, value)
        return parse_config(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def set_path(raw: dict, path: str, value) -> None:
    keys = path.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


# --- validation ---------------------------------------------------------------

class _Checker:
    def __init__(self):
        self.errors = {}

    def fail(self, name, msg):
        self.errors.setdefault(name, msg)

    def section(self, raw, name, cls):
        value = raw.get(name, {})
        if not isinstance(value, dict):
            self.fail(name, "must be an object")
            return {}
        known = set(cls.__dataclass_fields__)
        for key in value:
            if key not in known:
                self.fail(f"{name}.{key}", "unknown field")
        return value

    def integer(self, raw, key, name, default, lo=None, optional=False):
        value = raw.get(key, default)
        if value is None and optional:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(name, f"expected an integer, got {value!r}")
            return default
        if lo is not None and value < lo:
            self.fail(name, f"must be >= {lo}, got {value}")
        return value

    def number(self, raw, key, name, default, lo=None, hi=None, positive=False):
        value = raw.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(name, f"expected a number, got {value!r}")
            return default
        value = float(value)
        if value != value or value in (float("inf"), float("-inf")):
            self.fail(name, "must be finite")
        elif positive and value <= 0:
            self.fail(name, f"must be > 0, got {value}")
        elif (lo is not None and value < lo) or (hi is not None and value > hi):
            self.fail(name, f"must lie in [{lo}, {hi}], got {value}")
        return value

    def boolean(self, raw, key, name, default):
        value = raw.get(key, default)
        if not isinstance(value, bool):
            self.fail(name, f"expected true/false, got {value!r}")
            return default
        return value

    def choice(self, raw, key, name, default, options):
        value = raw.get(key, default)
        if value not in options:
            self.fail(name, f"must be one of {list(options)}, got {value!r}")
            return default
        return value

    def string(self, raw, key, name, default, optional=False):
        value = raw.get(key, default)
        if value is None and optional:
            return None
        if not isinstance(value, str) or not value:
            self.fail(name, f"expected a non-empty string, got {value!r}")
            return default
        return value


def parse_config(raw) -> ExperimentConfig:
    """Validate a decoded JSON object. Raises :class:`ConfigError` listing
    every offending field."""
    from .circuits import NOISE_MODES, NOISE_P_RANGE
    from .data import GARBAGE_MODES
    from .federation import PARTITION_SCHEMES

    ck = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError({"<root>": "config must be a JSON object"})
    for key in raw:
        if key not in ExperimentConfig.__dataclass_fields__:
            ck.fail(key, "unknown field")

    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        ck.fail("version", f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})")

    mods = []
    raw_mods = raw.get("modalities")
    if not isinstance(raw_mods, list) or not raw_mods:
        ck.fail("modalities", "need a non-empty list of modality specs")
        raw_mods = []
    for i, rm in enumerate(raw_mods):
        base = f"modalities[{i}]"
        if not isinstance(rm, dict):
            ck.fail(base, "must be an object")
            continue
        for key in rm:
            if key not in ModalityConfig.__dataclass_fields__:
                ck.fail(f"{base}.{key}", "unknown field")
        mods.append(
            ModalityConfig(
                name=ck.string(rm, "name", f"{base}.name", f"m{i}"),
                input_dim=ck.integer(rm, "input_dim", f"{base}.input_dim", 1, lo=1),
                num_qubits=ck.integer(rm, "num_qubits", f"{base}.num_qubits", 1, lo=1),
                num_layers=ck.integer(rm, "num_layers", f"{base}.num_layers", 1, lo=1),
            )
        )
    names = [m.name for m in mods]
    if len(set(names)) != len(names):
        ck.fail("modalities", "modality names must be unique")

    max_qubits = ck.integer(raw, "max_qubits", "max_qubits", DEFAULT_MAX_QUBITS, lo=1)
    n_mod = len(mods)

    fed_raw = ck.section(raw, "federation", FederationConfig)
    fed = FederationConfig(
        clients=ck.integer(fed_raw, "clients", "federation.clients", 1, lo=1),
        rounds=ck.integer(fed_raw, "rounds", "federation.rounds", 1, lo=1),
        local_epochs=ck.integer(fed_raw, "local_epochs", "federation.local_epochs", 1, lo=1),
        batch_size=ck.integer(fed_raw, "batch_size", "federation.batch_size", None, lo=1, optional=True),
    )

    opt_raw = ck.section(raw, "optimizer", OptimizerConfig)
    opt = OptimizerConfig(
        kind=ck.choice(opt_raw, "kind", "optimizer.kind", "adam", ("adam", "sgd")),
        learning_rate=ck.number(opt_raw, "learning_rate", "optimizer.learning_rate", 0.05, lo=0.0),
        beta1=ck.number(opt_raw, "beta1", "optimizer.beta1", 0.9, lo=0.0, hi=0.999999),
        beta2=ck.number(opt_raw, "beta2", "optimizer.beta2", 0.999, lo=0.0, hi=0.999999),
        eps=ck.number(opt_raw, "eps", "optimizer.eps", 1e-8, positive=True),
    )

    part_raw = ck.section(raw, "partition", PartitionConfig)
    part = PartitionConfig(
        scheme=ck.choice(part_raw, "scheme", "partition.scheme", "iid", PARTITION_SCHEMES),
        alpha=ck.number(part_raw, "alpha", "partition.alpha", 0.5, positive=True),
    )

    noise_raw = ck.section(raw, "noise", NoiseConfig)
    noise = NoiseConfig(
        mode=ck.choice(noise_raw, "mode", "noise.mode", "off", NOISE_MODES),
        p=ck.number(noise_raw, "p", "noise.p", 0.0, lo=0.0, hi=1.0),
        allow_out_of_range=ck.boolean(noise_raw, "allow_out_of_range", "noise.allow_out_of_range", False),
    )
    lo, hi = NOISE_P_RANGE
    if noise.mode != "off" and not noise.allow_out_of_range and not lo <= noise.p <= hi:
        ck.fail("noise.p", f"must lie in [{lo}, {hi}] unless allow_out_of_range is set, got {noise.p}")

    miss_raw = ck.section(raw, "missing", MissingConfig)
    fractions = miss_raw.get("fractions")
    if fractions is not None:
        if not isinstance(fractions, list) or len(fractions) != n_mod:
            ck.fail("missing.fractions", f"need one fraction per modality ({n_mod})")
            fractions = None
        else:
            fractions = [
                ck.number({"f": f}, "f", f"missing.fractions[{i}]", 0.0, lo=0.0, hi=1.0)
                for i, f in enumerate(fractions)
            ]
    targets = miss_raw.get("targets", [0])
    if not isinstance(targets, list) or not targets or not all(
        isinstance(t, int) and not isinstance(t, bool) and 0 <= t < max(n_mod, 1) for t in targets
    ):
        ck.fail("missing.targets", f"need a non-empty list of modality indices below {n_mod}")
        targets = [0]
    missing = MissingConfig(
        fractions=fractions,
        garbage=ck.choice(miss_raw, "garbage", "missing.garbage", "gaussian_noise", GARBAGE_MODES),
        sigma=ck.number(miss_raw, "sigma", "missing.sigma", 1.0, positive=True),
        apply_to_test=ck.boolean(miss_raw, "apply_to_test", "missing.apply_to_test", True),
        targets=list(targets),
    )

    data_raw = ck.section(raw, "data", DataConfig)
    source = ck.choice(data_raw, "source", "data.source", "synthetic", ("synthetic", "file"))
    sep = data_raw.get("class_separation", 3.0)
    if isinstance(sep, list):
        if len(sep) != n_mod:
            ck.fail("data.class_separation", f"need a scalar or one value per modality ({n_mod})")
        else:
            sep = [ck.number({"s": s}, "s", f"data.class_separation[{i}]", 3.0, lo=0.0) for i, s in enumerate(sep)]
    else:
        sep = ck.number(data_raw, "class_separation", "data.class_separation", 3.0, lo=0.0)
    use = data_raw.get("use_modalities")
    if use is not None:
        if (
            not isinstance(use, list)
            or not use
            or len(set(use)) != len(use)
            or not all(isinstance(u, int) and not isinstance(u, bool) and 0 <= u < n_mod for u in use)
        ):
            ck.fail("data.use_modalities", f"need distinct modality indices below {n_mod}")
            use = None
        else:
            use = sorted(use)
    data = DataConfig(
        source=source,
        num_train=ck.integer(data_raw, "num_train", "data.num_train", 400, lo=1),
        num_test=ck.integer(data_raw, "num_test", "data.num_test", 1000, lo=1),
        class_separation=sep,
        cross_modal_weight=ck.number(data_raw, "cross_modal_weight", "data.cross_modal_weight", 0.0, lo=0.0, hi=1.0),
        noise_scale=ck.number(data_raw, "noise_scale", "data.noise_scale", 1.0, lo=0.0),
        offset=ck.number(data_raw, "offset", "data.offset", 2.0, lo=0.0),
        fraction=ck.number(data_raw, "fraction", "data.fraction", 1.0, lo=0.0, hi=1.0),
        use_modalities=use,
        train_path=ck.string(data_raw, "train_path", "data.train_path", None, optional=True),
        test_path=ck.string(data_raw, "test_path", "data.test_path", None, optional=True),
    )
    if data.fraction == 0.0:
        ck.fail("data.fraction", "must be > 0")
    if source == "file":
        for key in ("train_path", "test_path"):
            if getattr(data, key) is None:
                ck.fail(f"data.{key}", "required when data.source is 'file'")

    cfg = ExperimentConfig(
        modalities=mods,
        version=SCHEMA_VERSION,
        experiment_id=ck.string(raw, "experiment_id", "experiment_id", "experiment"),
        seed=ck.integer(raw, "seed", "seed", 0, lo=0),
        output_dir=ck.string(raw, "output_dir", "output_dir", "runs/experiment"),
        max_qubits=max_qubits,
        fusion_layers=ck.integer(raw, "fusion_layers", "fusion_layers", 1, lo=1),
        num_classes=ck.integer(raw, "num_classes", "num_classes", 2, lo=2),
        mma=ck.boolean(raw, "mma", "mma", True),
        federation=fed,
        optimizer=opt,
        partition=part,
        noise=noise,
        missing=missing,
        data=data,
    )
    if mods and cfg.total_qubits > max_qubits:
        ck.fail(
            "modalities.num_qubits",
            f"total qubits {cfg.total_qubits} exceed max_qubits {max_qubits}",
        )
    if ck.errors:
        raise ConfigError(ck.errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError({"<file>": f"cannot read {path}: {exc.strerror}"}) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError({"<file>": f"invalid JSON at line {exc.lineno}: {exc.msg}"}) from exc
    return parse_config(raw)


def config_hash(raw: dict) -> str:
    """Hash of the validated, canonicalized form of ``raw``."""
    return parse_config(copy.deepcopy(raw)).config_hash()
