"""Declarative study configuration: parsing, validation, expansion, snapshots.

Three files define a study (task, one per model, hyperopt). Parsing applies
defaults and rejects unknown keys; validate_study cross-checks the pieces and
computes a canonical config hash; expand_matrix produces the model x dataset
experiment grid; snapshots freeze fully materialized trials for bit-exact
reproduction.
"""

import warnings
from dataclasses import dataclass, field

from . import __version__ as TOOLKIT_VERSION
from . import datagen, metrics
from .errors import ConfigError, ValidationError
from .yamlio import dump_yaml, load_yaml, sha256_hex

SNAPSHOT_VERSION = 1
SNAPSHOT_SUFFIX = ".snapshot.yaml"

OPTIMIZERS = ("adam", "sgd")
ENCODER_KINDS = ("naive_bayes", "softmax_regression", "mlp", "external")
SAMPLERS = ("grid", "random", "tpe")
DIRECTIONS = ("maximize", "minimize")
DIM_KINDS = ("choice", "uniform", "log_uniform", "int_uniform")

# TrainingParams knobs that held_constant entries may name
TRAINING_PARAM_NAMES = (
    "optimizer", "learning_rate", "epochs", "batch_size",
    "early_stop_patience", "shuffle",
)


# ---------------------------------------------------------------------------
# Typed access to parsed YAML

def _expect_map(data, ctx, source):
    if not isinstance(data, dict):
        raise ConfigError(f"{ctx}: expected a mapping, got {type(data).__name__}", source)
    return data


def _check_keys(data, allowed, required, ctx, source):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{ctx}: unknown key(s): {', '.join(unknown)}", source)
    missing = sorted(set(required) - set(data))
    if missing:
        raise ConfigError(f"{ctx}: missing required key(s): {', '.join(missing)}", source)


def _as_str(value, ctx, source):
    if not isinstance(value, str):
        raise ConfigError(f"{ctx}: expected a string, got {value!r}", source)
    return value


def _as_bool(value, ctx, source):
    if not isinstance(value, bool):
        raise ConfigError(f"{ctx}: expected a boolean, got {value!r}", source)
    return value


def _as_int(value, ctx, source):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{ctx}: expected an integer, got {value!r}", source)
    return value


def _as_float(value, ctx, source):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{ctx}: expected a number, got {value!r}", source)
    return float(value)


def _as_list(value, ctx, source):
    if not isinstance(value, list):
        raise ConfigError(f"{ctx}: expected a sequence, got {value!r}", source)
    return value


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class TrainingParams:
    optimizer: str = "adam"
    learning_rate: float = 0.0001
    epochs: int = 15
    batch_size: int = 32
    early_stop_patience: int = None
    shuffle: bool = False
    held_constant: tuple = ()

    def to_dict(self):
        return {
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "early_stop_patience": self.early_stop_patience,
            "shuffle": self.shuffle,
            "held_constant": sorted(self.held_constant),
        }


@dataclass(frozen=True)
class SplitParams:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = None  # None -> the study seed is used

    def to_dict(self):
        return {"ratios": list(self.ratios), "seed": self.seed}


@dataclass(frozen=True)
class AccountingParams:
    cost: metrics.CostModel = field(default_factory=metrics.CostModel)
    power: metrics.PowerModel = field(default_factory=metrics.PowerModel)

    def to_dict(self):
        return {
            "hourly_rate_usd": self.cost.hourly_rate_usd,
            "devices": [
                {"name": d.name, "watts": d.watts, "utilization": d.utilization}
                for d in self.power.devices
            ],
            "pue": self.power.pue,
            "carbon_intensity_kg_per_kwh": self.power.carbon_intensity_kg_per_kwh,
        }


@dataclass(frozen=True)
class TaskConfig:
    task_kind: str
    dataset_ids: tuple
    output_feature: str
    training: TrainingParams = field(default_factory=TrainingParams)
    metrics: tuple = ("accuracy",)
    preprocess: datagen.PreprocessParams = field(default_factory=datagen.PreprocessParams)
    split: SplitParams = field(default_factory=SplitParams)
    accounting: AccountingParams = field(default_factory=AccountingParams)

    def to_dict(self):
        return {
            "task_kind": self.task_kind,
            "dataset_ids": list(self.dataset_ids),
            "output_feature": self.output_feature,
            "training": self.training.to_dict(),
            "metrics": list(self.metrics),
            "preprocess": self.preprocess.to_dict(),
            "split": self.split.to_dict(),
            "accounting": self.accounting.to_dict(),
        }


@dataclass(frozen=True)
class SearchDimension:
    name: str
    kind: str
    values: tuple = None  # choice only
    low: object = None    # range kinds only
    high: object = None

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind}
        if self.kind == "choice":
            out["values"] = list(self.values)
        else:
            out["low"] = self.low
            out["high"] = self.high
        return out


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    encoder_kind: str
    fixed_params: dict = field(default_factory=dict)
    search_space: tuple = ()
    external_command: str = None

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "encoder_kind": self.encoder_kind,
            "fixed_params": dict(self.fixed_params),
            "search_space": [d.to_dict() for d in self.search_space],
            "external_command": self.external_command,
        }


@dataclass(frozen=True)
class PublishTarget:
    base_url: str
    index_name: str
    auth_env: str = None
    timeout_s: float = 10.0
    retry_count: int = 3

    def __post_init__(self):
        if "://" not in self.base_url:
            raise ValidationError(f"base_url {self.base_url!r} is not a URL")
        if not (1 <= self.retry_count <= 5):
            raise ValidationError("retry_count must be between 1 and 5")
        if self.timeout_s <= 0:
            raise ValidationError("timeout_s must be positive")

    def to_dict(self):
        return {
            "base_url": self.base_url,
            "index": self.index_name,
            "auth_env": self.auth_env,
            "timeout_s": self.timeout_s,
            "retry_count": self.retry_count,
        }


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 5
    bandwidth_factor: float = 1.06

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError("tpe gamma must be in (0, 1)")
        if self.n_candidates < 1 or self.n_startup < 1:
            raise ValidationError("tpe n_candidates and n_startup must be >= 1")
        if self.bandwidth_factor <= 0:
            raise ValidationError("tpe bandwidth_factor must be positive")

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "n_candidates": self.n_candidates,
            "n_startup": self.n_startup,
            "bandwidth_factor": self.bandwidth_factor,
        }


@dataclass(frozen=True)
class HyperoptConfig:
    goal_metric: str = "accuracy"
    direction: str = "maximize"
    sampler: str = "random"
    num_samples: int = 20
    seed: int = 0
    max_parallel_trials: int = 1
    grid_points_per_range: int = 5
    tpe: TpeConfig = field(default_factory=TpeConfig)
    publish: PublishTarget = None

    def to_dict(self):
        return {
            "goal_metric": self.goal_metric,
            "direction": self.direction,
            "sampler": self.sampler,
            "num_samples": self.num_samples,
            "seed": self.seed,
            "max_parallel_trials": self.max_parallel_trials,
            "grid_points_per_range": self.grid_points_per_range,
            "tpe": self.tpe.to_dict(),
            "publish": self.publish.to_dict() if self.publish else None,
        }


@dataclass(frozen=True)
class StudyPlan:
    study_id: str
    task: TaskConfig
    models: tuple
    hyperopt: HyperoptConfig
    config_hash: str


@dataclass(frozen=True)
class ExperimentPlan:
    study_id: str
    task: TaskConfig
    model: ModelSpec
    dataset_id: str
    hyperopt: HyperoptConfig
    config_hash: str

    @property
    def label(self):
        return f"{self.model.model_id}__{self.dataset_id}"


@dataclass(frozen=True)
class ExperimentSnapshot:
    study_id: str
    model_id: str
    dataset_id: str
    config_hash: str
    toolkit_version: str
    snapshot_version: int
    task: dict           # resolved task config
    model: dict          # resolved model spec (fixed params + search space)
    goal_metric: str
    direction: str
    suggestion_mode: str  # batch | sequential
    trials: tuple        # ({trial_index, seed, params}, ...)


# ---------------------------------------------------------------------------
# Parsing

def parse_task_config(text, source=None):
    data = _expect_map(load_yaml(text, source), "task config", source)
    _check_keys(
        data,
        allowed=("task_kind", "dataset_ids", "output_feature", "training",
                 "metrics", "preprocess", "split", "accounting"),
        required=("task_kind", "dataset_ids", "output_feature"),
        ctx="task config", source=source,
    )

    task_kind = _as_str(data["task_kind"], "task_kind", source)
    if task_kind != "text_classification":
        raise ConfigError(
            f"unsupported task_kind {task_kind!r}; supported: text_classification",
            source,
        )

    raw_ids = _as_list(data["dataset_ids"], "dataset_ids", source)
    if not raw_ids:
        raise ConfigError("dataset_ids must be non-empty", source)
    dataset_ids = tuple(_as_str(d, "dataset_ids entry", source) for d in raw_ids)
    seen = set()
    for d in dataset_ids:
        if d in seen:
            raise ConfigError(f"duplicate dataset id {d!r}", source)
        seen.add(d)

    output_feature = _as_str(data["output_feature"], "output_feature", source)
    training = _parse_training(data.get("training", {}), source)
    metric_list = tuple(
        _as_str(m, "metrics entry", source)
        for m in _as_list(data.get("metrics", ["accuracy"]), "metrics", source)
    )
    preprocess = _parse_preprocess(data.get("preprocess", {}), source)
    split = _parse_split(data.get("split", {}), source)
    accounting = _parse_accounting(data.get("accounting", {}), source)

    return TaskConfig(
        task_kind=task_kind, dataset_ids=dataset_ids, output_feature=output_feature,
        training=training, metrics=metric_list, preprocess=preprocess,
        split=split, accounting=accounting,
    )


def _parse_training(data, source):
    data = _expect_map(data, "training", source)
    _check_keys(data, allowed=TRAINING_PARAM_NAMES + ("held_constant",),
                required=(), ctx="training", source=source)
    optimizer = _as_str(data.get("optimizer", "adam"), "training.optimizer", source)
    if optimizer not in OPTIMIZERS:
        raise ConfigError(
            f"unknown optimizer {optimizer!r}; supported: {', '.join(OPTIMIZERS)}", source
        )
    lr = _as_float(data.get("learning_rate", 0.0001), "training.learning_rate", source)
    if lr <= 0:
        raise ConfigError("learning_rate must be > 0", source)
    epochs = _as_int(data.get("epochs", 15), "training.epochs", source)
    if epochs < 1:
        raise ConfigError("epochs must be >= 1", source)
    batch_size = _as_int(data.get("batch_size", 32), "training.batch_size", source)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", source)
    patience = data.get("early_stop_patience")
    if patience is not None:
        patience = _as_int(patience, "training.early_stop_patience", source)
        if patience < 0:
            raise ConfigError("early_stop_patience must be >= 0", source)
    shuffle = _as_bool(data.get("shuffle", False), "training.shuffle", source)
    held = tuple(
        _as_str(h, "training.held_constant entry", source)
        for h in _as_list(data.get("held_constant", []), "training.held_constant", source)
    )
    return TrainingParams(
        optimizer=optimizer, learning_rate=lr, epochs=epochs, batch_size=batch_size,
        early_stop_patience=patience, shuffle=shuffle, held_constant=held,
    )


def _parse_preprocess(data, source):
    data = _expect_map(data, "preprocess", source)
    _check_keys(
        data,
        allowed=("lowercase", "token_pattern", "ngram_max", "min_token_freq",
                 "max_vocab", "weighting"),
        required=(), ctx="preprocess", source=source,
    )
    kwargs = {}
    if "lowercase" in data:
        kwargs["lowercase"] = _as_bool(data["lowercase"], "preprocess.lowercase", source)
    if "token_pattern" in data:
        kwargs["token_pattern"] = _as_str(data["token_pattern"], "preprocess.token_pattern", source)
    if "ngram_max" in data:
        kwargs["ngram_max"] = _as_int(data["ngram_max"], "preprocess.ngram_max", source)
    if "min_token_freq" in data:
        kwargs["min_token_freq"] = _as_int(data["min_token_freq"], "preprocess.min_token_freq", source)
    if "max_vocab" in data:
        kwargs["max_vocab"] = _as_int(data["max_vocab"], "preprocess.max_vocab", source)
    if "weighting" in data:
        kwargs["weighting"] = _as_str(data["weighting"], "preprocess.weighting", source)
    try:
        return datagen.PreprocessParams(**kwargs)
    except ValidationError as exc:
        raise ConfigError(f"preprocess: {exc}", source)


def _parse_split(data, source):
    data = _expect_map(data, "split", source)
    _check_keys(data, allowed=("ratios", "seed"), required=(), ctx="split", source=source)
    ratios = (0.8, 0.1, 0.1)
    if "ratios" in data:
        raw = _as_list(data["ratios"], "split.ratios", source)
        if len(raw) != 3:
            raise ConfigError("split.ratios must have exactly 3 entries", source)
        ratios = tuple(_as_float(r, "split.ratios entry", source) for r in raw)
        if any(r < 0 for r in ratios):
            raise ConfigError("split.ratios must be non-negative", source)
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split.ratios must sum to 1", source)
    seed = data.get("seed")
    if seed is not None:
        seed = _as_int(seed, "split.seed", source)
    return SplitParams(ratios=ratios, seed=seed)


def _parse_accounting(data, source):
    data = _expect_map(data, "accounting", source)
    _check_keys(
        data,
        allowed=("hourly_rate_usd", "devices", "pue", "carbon_intensity_kg_per_kwh"),
        required=(), ctx="accounting", source=source,
    )
    try:
        cost = metrics.CostModel(
            hourly_rate_usd=_as_float(data.get("hourly_rate_usd", 0.0),
                                      "accounting.hourly_rate_usd", source)
        )
        devices = []
        for i, dev in enumerate(_as_list(data.get("devices", []), "accounting.devices", source)):
            dev = _expect_map(dev, f"accounting.devices[{i}]", source)
            _check_keys(dev, allowed=("name", "watts", "utilization"),
                        required=("name", "watts"), ctx=f"accounting.devices[{i}]", source=source)
            devices.append(metrics.DevicePower(
                name=_as_str(dev["name"], "device name", source),
                watts=_as_float(dev["watts"], "device watts", source),
                utilization=_as_float(dev.get("utilization", 1.0), "device utilization", source),
            ))
        power = metrics.PowerModel(
            devices=tuple(devices),
            pue=_as_float(data.get("pue", 1.58), "accounting.pue", source),
            carbon_intensity_kg_per_kwh=_as_float(
                data.get("carbon_intensity_kg_per_kwh", 0.432),
                "accounting.carbon_intensity_kg_per_kwh", source),
        )
    except ValidationError as exc:
        raise ConfigError(f"accounting: {exc}", source)
    return AccountingParams(cost=cost, power=power)


def parse_model_config(text, source=None):
    data = _expect_map(load_yaml(text, source), "model config", source)
    _check_keys(
        data,
        allowed=("model_id", "encoder_kind", "fixed_params", "search_space",
                 "external_command"),
        required=("model_id", "encoder_kind"),
        ctx="model config", source=source,
    )
    model_id = _as_str(data["model_id"], "model_id", source)
    encoder_kind = _as_str(data["encoder_kind"], "encoder_kind", source)
    if encoder_kind not in ENCODER_KINDS:
        raise ConfigError(
            f"unknown encoder_kind {encoder_kind!r}; supported: {', '.join(ENCODER_KINDS)}",
            source,
        )
    fixed = _expect_map(data.get("fixed_params", {}), "fixed_params", source)
    for k, v in fixed.items():
        if not isinstance(k, str):
            raise ConfigError(f"fixed_params key {k!r} must be a string", source)
        if isinstance(v, (dict, list)):
            raise ConfigError(f"fixed_params.{k}: must be a scalar", source)

    dims = []
    for i, raw in enumerate(_as_list(data.get("search_space", []), "search_space", source)):
        dims.append(_parse_dimension(raw, f"search_space[{i}]", source))
    dim_names = [d.name for d in dims]
    if len(set(dim_names)) != len(dim_names):
        raise ConfigError("duplicate search dimension names", source)
    overlap = sorted(set(fixed) & set(dim_names))
    if overlap:
        raise ConfigError(
            f"parameters appear in both fixed_params and search_space: {', '.join(overlap)}",
            source,
        )

    command = data.get("external_command")
    if command is not None:
        command = _as_str(command, "external_command", source)
    if encoder_kind == "external" and not command:
        raise ConfigError("external models require external_command", source)
    if encoder_kind != "external" and command:
        raise ConfigError("external_command is only valid for external models", source)

    return ModelSpec(
        model_id=model_id, encoder_kind=encoder_kind, fixed_params=dict(fixed),
        search_space=tuple(dims), external_command=command,
    )


def _parse_dimension(raw, ctx, source):
    raw = _expect_map(raw, ctx, source)
    _check_keys(raw, allowed=("name", "kind", "values", "low", "high"),
                required=("name", "kind"), ctx=ctx, source=source)
    name = _as_str(raw["name"], f"{ctx}.name", source)
    kind = _as_str(raw["kind"], f"{ctx}.kind", source)
    if kind not in DIM_KINDS:
        raise ConfigError(f"{ctx}: unknown kind {kind!r}; supported: {', '.join(DIM_KINDS)}", source)

    if kind == "choice":
        if "values" not in raw:
            raise ConfigError(f"{ctx}: choice dimension requires values", source)
        values = _as_list(raw["values"], f"{ctx}.values", source)
        if not values:
            raise ConfigError(f"{ctx}: choice values must be non-empty", source)
        for v in values:
            if isinstance(v, (dict, list)):
                raise ConfigError(f"{ctx}: choice values must be scalars", source)
        return SearchDimension(name=name, kind=kind, values=tuple(values))

    if "low" not in raw or "high" not in raw:
        raise ConfigError(f"{ctx}: range dimension requires low and high", source)
    if kind == "int_uniform":
        low = _as_int(raw["low"], f"{ctx}.low", source)
        high = _as_int(raw["high"], f"{ctx}.high", source)
    else:
        low = _as_float(raw["low"], f"{ctx}.low", source)
        high = _as_float(raw["high"], f"{ctx}.high", source)
    if not low < high:
        raise ConfigError(f"{ctx}: low must be < high", source)
    if kind == "log_uniform" and low <= 0:
        raise ConfigError(f"{ctx}: log_uniform requires low > 0", source)
    return SearchDimension(name=name, kind=kind, low=low, high=high)


def parse_hyperopt_config(text, source=None):
    data = _expect_map(load_yaml(text, source), "hyperopt config", source)
    _check_keys(
        data,
        allowed=("goal_metric", "direction", "sampler", "num_samples", "seed",
                 "max_parallel_trials", "grid_points_per_range", "tpe", "publish"),
        required=(),
        ctx="hyperopt config", source=source,
    )
    goal = _as_str(data.get("goal_metric", "accuracy"), "goal_metric", source)
    direction = _as_str(data.get("direction", "maximize"), "direction", source)
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}; supported: maximize, minimize", source)
    sampler = _as_str(data.get("sampler", "random"), "sampler", source)
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler!r}; supported: {', '.join(SAMPLERS)}", source)
    num_samples = _as_int(data.get("num_samples", 20), "num_samples", source)
    if num_samples < 1:
        raise ConfigError("num_samples must be >= 1", source)
    seed = _as_int(data.get("seed", 0), "seed", source)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in unsigned 64 bits", source)
    max_parallel = _as_int(data.get("max_parallel_trials", 1), "max_parallel_trials", source)
    if max_parallel < 1:
        raise ConfigError("max_parallel_trials must be >= 1", source)
    grid_points = _as_int(data.get("grid_points_per_range", 5), "grid_points_per_range", source)
    if grid_points < 2:
        raise ConfigError("grid_points_per_range must be >= 2", source)

    tpe = TpeConfig()
    if "tpe" in data:
        tdata = _expect_map(data["tpe"], "tpe", source)
        _check_keys(tdata, allowed=("gamma", "n_candidates", "n_startup", "bandwidth_factor"),
                    required=(), ctx="tpe", source=source)
        try:
            tpe = TpeConfig(
                gamma=_as_float(tdata.get("gamma", 0.25), "tpe.gamma", source),
                n_candidates=_as_int(tdata.get("n_candidates", 24), "tpe.n_candidates", source),
                n_startup=_as_int(tdata.get("n_startup", 5), "tpe.n_startup", source),
                bandwidth_factor=_as_float(tdata.get("bandwidth_factor", 1.06),
                                           "tpe.bandwidth_factor", source),
            )
        except ValidationError as exc:
            raise ConfigError(str(exc), source)

    publish = None
    if data.get("publish") is not None:
        publish = parse_publish_target(data["publish"], source)

    return HyperoptConfig(
        goal_metric=goal, direction=direction, sampler=sampler,
        num_samples=num_samples, seed=seed, max_parallel_trials=max_parallel,
        grid_points_per_range=grid_points, tpe=tpe, publish=publish,
    )


def parse_publish_target(data, source=None):
    data = _expect_map(data, "publish", source)
    _check_keys(data, allowed=("base_url", "index", "auth_env", "timeout_s", "retry_count"),
                required=("base_url", "index"), ctx="publish", source=source)
    try:
        return PublishTarget(
            base_url=_as_str(data["base_url"], "publish.base_url", source),
            index_name=_as_str(data["index"], "publish.index", source),
            auth_env=(_as_str(data["auth_env"], "publish.auth_env", source)
                      if data.get("auth_env") is not None else None),
            timeout_s=_as_float(data.get("timeout_s", 10.0), "publish.timeout_s", source),
            retry_count=_as_int(data.get("retry_count", 3), "publish.retry_count", source),
        )
    except ValidationError as exc:
        raise ConfigError(f"publish: {exc}", source)


def parse_publish_config(text, source=None):
    """Standalone publish config file (the --publish-config flag)."""
    return parse_publish_target(load_yaml(text, source), source)


# ---------------------------------------------------------------------------
# Serialization (round-trip support)

def dump_task_config(task):
    return dump_yaml(task.to_dict())


def dump_model_config(model):
    return dump_yaml(model.to_dict())


def dump_hyperopt_config(hopt):
    data = hopt.to_dict()
    if data["publish"] is None:
        del data["publish"]
    return dump_yaml(data)


# ---------------------------------------------------------------------------
# Validation and expansion

def resolve_goal_metric(name):
    """Goal metrics are evaluated on the validation split; an explicit
    val_ prefix is accepted and stripped."""
    base = name[4:] if name.startswith("val_") else name
    metrics.resolve_metric(base)
    return base


def compute_config_hash(task, models, hopt):
    payload = {
        "task": task.to_dict(),
        "models": [m.to_dict() for m in sorted(models, key=lambda m: m.model_id)],
        "hyperopt": hopt.to_dict(),
    }
    return sha256_hex(payload)


def validate_study(task, models, hopt, study_id=None):
    if not models:
        raise ValidationError("a study requires at least one model")

    ids = [m.model_id for m in models]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValidationError(f"duplicate model_id(s): {', '.join(dupes)}")

    for ds in task.dataset_ids:
        if not datagen.dataset_id_known(ds):
            raise ValidationError(
                f"unknown dataset {ds!r}; registered: {', '.join(datagen.list_dataset_ids())}"
            )

    for name in task.metrics:
        metrics.resolve_metric(name)
    goal = resolve_goal_metric(hopt.goal_metric)

    searchable = {d.name for m in models for d in m.search_space}
    for name in task.training.held_constant:
        if name in searchable:
            raise ValidationError(
                f"held-constant parameter {name!r} appears in a model search space"
            )
        if name not in TRAINING_PARAM_NAMES:
            raise ValidationError(
                f"held-constant parameter {name!r} is not a training parameter; "
                f"valid names: {', '.join(TRAINING_PARAM_NAMES)}"
            )

    # materialize the split seed so snapshots replay the exact same splits
    if task.split.seed is None:
        task = TaskConfig(
            task_kind=task.task_kind, dataset_ids=task.dataset_ids,
            output_feature=task.output_feature, training=task.training,
            metrics=task.metrics, preprocess=task.preprocess,
            split=SplitParams(ratios=task.split.ratios, seed=hopt.seed),
            accounting=task.accounting,
        )

    config_hash = compute_config_hash(task, models, hopt)
    if study_id is None:
        study_id = f"study-{config_hash[:12]}"
    # normalize the goal metric so downstream consumers never see the prefix
    hopt = HyperoptConfig(
        goal_metric=goal, direction=hopt.direction, sampler=hopt.sampler,
        num_samples=hopt.num_samples, seed=hopt.seed,
        max_parallel_trials=hopt.max_parallel_trials,
        grid_points_per_range=hopt.grid_points_per_range, tpe=hopt.tpe,
        publish=hopt.publish,
    )
    return StudyPlan(
        study_id=study_id, task=task,
        models=tuple(sorted(models, key=lambda m: m.model_id)),
        hyperopt=hopt, config_hash=config_hash,
    )


def expand_matrix(plan):
    """|models| x |datasets| experiments, ordered by (model_id, dataset_id)."""
    out = []
    for model in sorted(plan.models, key=lambda m: m.model_id):
        for ds in sorted(plan.task.dataset_ids):
            out.append(ExperimentPlan(
                study_id=plan.study_id, task=plan.task, model=model,
                dataset_id=ds, hyperopt=plan.hyperopt, config_hash=plan.config_hash,
            ))
    return out


# ---------------------------------------------------------------------------
# Snapshots

def snapshot_experiment(exp, trials, suggestion_mode="batch"):
    """Freeze an experiment with fully materialized (params, seed) trials."""
    frozen = []
    for i, (params, seed) in enumerate(trials):
        frozen.append({"trial_index": i, "seed": int(seed), "params": dict(params)})
    return ExperimentSnapshot(
        study_id=exp.study_id, model_id=exp.model.model_id, dataset_id=exp.dataset_id,
        config_hash=exp.config_hash, toolkit_version=TOOLKIT_VERSION,
        snapshot_version=SNAPSHOT_VERSION,
        task=exp.task.to_dict(), model=exp.model.to_dict(),
        goal_metric=exp.hyperopt.goal_metric, direction=exp.hyperopt.direction,
        suggestion_mode=suggestion_mode, trials=tuple(frozen),
    )


def write_snapshot(snapshot, path):
    data = {
        "snapshot_version": snapshot.snapshot_version,
        "toolkit_version": snapshot.toolkit_version,
        "study_id": snapshot.study_id,
        "model_id": snapshot.model_id,
        "dataset_id": snapshot.dataset_id,
        "config_hash": snapshot.config_hash,
        "task": snapshot.task,
        "model": snapshot.model,
        "goal_metric": snapshot.goal_metric,
        "direction": snapshot.direction,
        "suggestion_mode": snapshot.suggestion_mode,
        "trials": [dict(t) for t in snapshot.trials],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_yaml(data))
    return path


def load_snapshot(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read snapshot: {exc}", source=str(path))
    data = _expect_map(load_yaml(text, str(path)), "snapshot", str(path))
    required = ("snapshot_version", "toolkit_version", "study_id", "model_id",
                "dataset_id", "config_hash", "task", "model", "goal_metric",
                "direction", "trials")
    _check_keys(data, allowed=required + ("suggestion_mode",), required=required,
                ctx="snapshot", source=str(path))
    if data["toolkit_version"] != TOOLKIT_VERSION:
        warnings.warn(
            f"snapshot {path} was written by toolkit {data['toolkit_version']}, "
            f"this is {TOOLKIT_VERSION}; attempting to load anyway",
            stacklevel=2,
        )
    trials = []
    for i, raw in enumerate(_as_list(data["trials"], "trials", str(path))):
        raw = _expect_map(raw, f"trials[{i}]", str(path))
        _check_keys(raw, allowed=("trial_index", "seed", "params"),
                    required=("trial_index", "seed", "params"),
                    ctx=f"trials[{i}]", source=str(path))
        trials.append({
            "trial_index": _as_int(raw["trial_index"], "trial_index", str(path)),
            "seed": _as_int(raw["seed"], "seed", str(path)),
            "params": _expect_map(raw["params"], "params", str(path)),
        })
    return ExperimentSnapshot(
        study_id=_as_str(data["study_id"], "study_id", str(path)),
        model_id=_as_str(data["model_id"], "model_id", str(path)),
        dataset_id=_as_str(data["dataset_id"], "dataset_id", str(path)),
        config_hash=_as_str(data["config_hash"], "config_hash", str(path)),
        toolkit_version=_as_str(data["toolkit_version"], "toolkit_version", str(path)),
        snapshot_version=_as_int(data["snapshot_version"], "snapshot_version", str(path)),
        task=data["task"], model=data["model"],
        goal_metric=_as_str(data["goal_metric"], "goal_metric", str(path)),
        direction=_as_str(data["direction"], "direction", str(path)),
        suggestion_mode=data.get("suggestion_mode", "batch"),
        trials=tuple(trials),
    )


def task_from_dict(data, source="<snapshot>"):
    """Rebuild a TaskConfig from its to_dict() form (snapshot replay)."""
    return parse_task_config(dump_yaml(_strip_nones(data)), source)


def model_from_dict(data, source="<snapshot>"):
    return parse_model_config(dump_yaml(_strip_nones(data)), source)


def _strip_nones(data):
    if isinstance(data, dict):
        return {k: _strip_nones(v) for k, v in data.items() if v is not None}
    if isinstance(data, list):
        return [_strip_nones(v) for v in data]
    return data


__all__ = [
    "TaskConfig", "TrainingParams", "SplitParams", "AccountingParams",
    "SearchDimension", "ModelSpec", "HyperoptConfig", "TpeConfig",
    "PublishTarget", "StudyPlan", "ExperimentPlan", "ExperimentSnapshot",
    "parse_task_config", "parse_model_config", "parse_hyperopt_config",
    "parse_publish_config", "validate_study", "expand_matrix",
    "snapshot_experiment", "write_snapshot", "load_snapshot",
    "dump_task_config", "dump_model_config", "dump_hyperopt_config",
    "compute_config_hash", "resolve_goal_metric",
    "task_from_dict", "model_from_dict",
    "TOOLKIT_VERSION", "SNAPSHOT_VERSION", "SNAPSHOT_SUFFIX",
]
