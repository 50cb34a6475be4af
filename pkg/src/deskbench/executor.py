"""Study execution: per-trial seeds, the standardized trial lifecycle, a
bounded worker pool, and bit-exact snapshot reproduction.

Trials are independent units. The coordinator derives a seed per trial,
schedules trials on a thread pool, collects results in deterministic
(experiment, trial_index) order regardless of completion order, and alone
writes to the result store. Wall-clock accounting fields are the only part
of a result that legitimately varies between identical runs; everything else
must match bit-exactly.
"""

import csv
import hashlib
import math
import json
import logging
import os
import sys
import tempfile
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace

import numpy as np

from . import config as cfg
from . import datagen, hyperopt, metrics, trainables
from .errors import BenchError, TrialFailure, ValidationError
from .store import Store, store_path

log = logging.getLogger(__name__)

# accounting fields that depend on wall time; masked for equality checks
WALLCLOCK_ACCOUNTING_FIELDS = (
    "total_train_s", "mean_step_s", "inference_latency_s",
    "cost_usd", "energy_kwh", "co2_kg",
)


def derive_seed(study_seed, model_id, dataset_id, trial_index):
    """Stable 64-bit trial seed from the canonical identity of a trial."""
    key = f"{study_seed}|{model_id}|{dataset_id}|{trial_index}"
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class AccountingRecord:
    total_train_s: float = 0.0
    mean_step_s: float = 0.0
    inference_latency_s: float = 0.0
    latency_samples: int = 0
    cost_usd: float = 0.0
    energy_kwh: float = 0.0
    co2_kg: float = 0.0
    model_bytes: int = 0

    def to_dict(self):
        return {
            "total_train_s": self.total_train_s,
            "mean_step_s": self.mean_step_s,
            "inference_latency_s": self.inference_latency_s,
            "latency_samples": self.latency_samples,
            "cost_usd": self.cost_usd,
            "energy_kwh": self.energy_kwh,
            "co2_kg": self.co2_kg,
            "model_bytes": self.model_bytes,
        }


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    params: dict
    seed: int
    epoch_history: tuple  # ((train_loss | None, val_goal_metric), ...)
    best_epoch: int       # None for failed trials
    test_metrics: dict
    accounting: AccountingRecord
    status: str           # ok | failed
    failure_reason: str = None

    def to_dict(self):
        return {
            "trial_index": self.trial_index,
            "params": dict(self.params),
            "seed": self.seed,
            "epoch_history": [list(e) for e in self.epoch_history],
            "best_epoch": self.best_epoch,
            "test_metrics": dict(self.test_metrics),
            "accounting": self.accounting.to_dict(),
            "status": self.status,
            "failure_reason": self.failure_reason,
        }

    @property
    def goal_value(self):
        if self.status != "ok" or self.best_epoch is None:
            return None
        return self.epoch_history[self.best_epoch][1]


def mask_wallclock(doc):
    """Copy of a result doc with wall-clock-dependent fields zeroed.

    Used to compare runs for bit-exact equality: timestamps and time-derived
    accounting are the only fields allowed to differ between identical runs.
    """
    out = json.loads(json.dumps(doc))
    env = out.get("envelope", {})
    env["started_at"] = "MASKED"
    env["finished_at"] = "MASKED"
    acct = out.get("trial", {}).get("accounting", {})
    for name in WALLCLOCK_ACCOUNTING_FIELDS:
        if name in acct:
            acct[name] = 0.0
    return out


def best_epoch_of(series, direction):
    """Earliest index achieving the optimum of a recorded metric series."""
    best = None
    for i, value in enumerate(series):
        if best is None:
            best = i
        elif direction == "maximize" and value > series[best]:
            best = i
        elif direction == "minimize" and value < series[best]:
            best = i
    return best


class _FeaturizeCache:
    """Per-study cache of (dataset, split, featurized) shared across trials.

    All trials of an experiment use the same split and preprocessing, so the
    featurization is computed once and shared read-only.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entries = {}

    def get(self, dataset_id, ratios, split_seed, pp):
        key = (dataset_id, tuple(ratios), split_seed, tuple(sorted(pp.to_dict().items())))
        with self._lock:
            if key not in self._entries:
                ds = datagen.load_dataset(dataset_id)
                assignment = datagen.split(ds, ratios, split_seed)
                fz = datagen.featurize(ds, assignment, pp)
                self._entries[key] = (ds, assignment, fz)
            return self._entries[key]


def _prepare(exp, cache=None):
    task = exp.task
    split_seed = task.split.seed if task.split.seed is not None else exp.hyperopt.seed
    if cache is not None:
        return cache.get(exp.dataset_id, task.split.ratios, split_seed, task.preprocess)
    ds = datagen.load_dataset(exp.dataset_id)
    assignment = datagen.split(ds, task.split.ratios, split_seed)
    fz = datagen.featurize(ds, assignment, task.preprocess)
    return ds, assignment, fz


def _epoch_order(n, shuffle, seed, epoch):
    if not shuffle:
        return np.arange(n)
    rng = np.random.default_rng([seed, 2654435761, epoch])
    return rng.permutation(n)


def run_trial(exp, params, seed, cache=None, external_timeout_s=600.0):
    """Run one trial end to end; trainable failures become failed results.

    Lifecycle: split -> featurize -> create -> per-epoch fit + validation
    eval (keeping the best checkpoint as a full state copy) -> optional early
    stop -> test evaluation from the best checkpoint -> accounting.
    """
    try:
        return _run_trial_inner(exp, params, seed, cache, external_timeout_s)
    except KeyboardInterrupt:
        raise
    except BenchError as exc:
        return _failed_trial(params, seed, str(exc))
    except Exception as exc:  # trainable bugs must not abort the study
        return _failed_trial(params, seed, f"{type(exc).__name__}: {exc}")


def _failed_trial(params, seed, reason, trial_index=0):
    return TrialResult(
        trial_index=trial_index, params=dict(params), seed=seed,
        epoch_history=(), best_epoch=None, test_metrics={},
        accounting=AccountingRecord(), status="failed", failure_reason=reason,
    )


def _goal_value(goal, probs, labels):
    preds = metrics.predictions_from_probs(probs)
    values = metrics.compute_metrics([goal], preds, labels)
    if goal not in values:
        raise TrialFailure(
            f"goal metric {goal!r} undefined on this validation split"
        )
    return values[goal]


def _run_trial_inner(exp, params, seed, cache, external_timeout_s):
    if exp.model.encoder_kind == "external":
        return _run_external(exp, params, seed, cache, external_timeout_s)

    task = exp.task
    hopt = exp.hyperopt
    ds, assignment, fz = _prepare(exp, cache)

    x_train, y_train, _ = fz.rows(assignment.train)
    if x_train.shape[0] == 0:
        raise TrialFailure("empty training split")
    val_uids = assignment.val if assignment.val else assignment.train
    if not assignment.val:
        log.warning("experiment %s: empty validation split, tracking on train", exp.label)
    x_val, y_val, _ = fz.rows(val_uids)
    x_test, y_test, _ = fz.rows(assignment.test)

    merged = dict(exp.model.fixed_params)
    merged.update(params)
    model = trainables.create_trainable(
        exp.model, merged, fz.feature_dim, ds.n_classes, seed,
        optimizer=task.training.optimizer,
    )

    lr = float(merged.get("learning_rate", task.training.learning_rate))
    batch_size = int(merged.get("batch_size", task.training.batch_size))
    epochs = int(task.training.epochs)
    patience = task.training.early_stop_patience

    history = []
    epoch_times = []
    batch_counts = []
    best_model = None
    best_value = None
    bad_epochs = 0
    for epoch in range(epochs):
        order = _epoch_order(x_train.shape[0], task.training.shuffle, seed, epoch)
        t0 = time.perf_counter()
        loss = model.fit_epoch(x_train[order], y_train[order], batch_size, lr)
        epoch_times.append(time.perf_counter() - t0)
        batch_counts.append(math.ceil(x_train.shape[0] / batch_size))

        val_value = _goal_value(hopt.goal_metric, model.predict_proba(x_val), y_val)
        history.append((loss, val_value))

        improved = (
            best_value is None
            or (hopt.direction == "maximize" and val_value > best_value)
            or (hopt.direction == "minimize" and val_value < best_value)
        )
        if improved:
            best_value = val_value
            best_model = model.clone()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if patience is not None and bad_epochs >= max(1, patience):
                break

    best_epoch = best_epoch_of([v for _, v in history], hopt.direction)

    if x_test.shape[0] == 0:
        raise TrialFailure("empty test split")
    test_probs = best_model.predict_proba(x_test)
    test_preds = metrics.predictions_from_probs(test_probs)
    wanted = list(dict.fromkeys(list(task.metrics) + [hopt.goal_metric]))
    test_metrics = metrics.compute_metrics(wanted, test_preds, y_test)

    mean_step_s, total_train_s = metrics.training_speed(epoch_times, batch_counts)
    latency = metrics.measure_latency(best_model, x_test, n=25, seed=seed)
    cost_usd = metrics.compute_cost(total_train_s, task.accounting.cost)
    energy_kwh, co2_kg = metrics.estimate_energy(total_train_s, task.accounting.power)

    return TrialResult(
        trial_index=0, params=dict(params), seed=seed,
        epoch_history=tuple(history), best_epoch=best_epoch,
        test_metrics=test_metrics,
        accounting=AccountingRecord(
            total_train_s=total_train_s, mean_step_s=mean_step_s,
            inference_latency_s=latency.seconds_per_example,
            latency_samples=latency.n_samples,
            cost_usd=cost_usd, energy_kwh=energy_kwh, co2_kg=co2_kg,
            model_bytes=best_model.param_bytes(),
        ),
        status="ok",
    )


# ---------------------------------------------------------------------------
# External trials

def _write_raw_csv(path, ds_by_uid, uids):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["uid", "text", "label"])
        for u in sorted(uids):
            ex = ds_by_uid[u]
            w.writerow([ex.uid, ex.text, ex.label])


def _write_featurized(path, fz, uids):
    x, y, order = fz.rows(uids)
    with open(path, "w", encoding="utf-8") as fh:
        for i, u in enumerate(order):
            row = x[i].tocoo()
            fh.write(json.dumps({
                "uid": u,
                "label": int(y[i]),
                "indices": [int(j) for j in row.col],
                "values": [float(v) for v in row.data],
            }, sort_keys=True) + "\n")


def _run_external(exp, params, seed, cache, timeout_s):
    task = exp.task
    ds, assignment, fz = _prepare(exp, cache)
    by_uid = {ex.uid: ex for ex in ds.examples}
    merged = dict(exp.model.fixed_params)
    merged.update(params)
    featurized = bool(merged.get("featurized", False))

    test_uids = sorted(assignment.test)
    _, y_test, _ = fz.rows(assignment.test)

    with tempfile.TemporaryDirectory(prefix="deskbench_ext_") as tmp:
        paths = {}
        for name, uids in (("train", assignment.train), ("val", assignment.val),
                           ("test", assignment.test)):
            p = os.path.join(tmp, f"{name}.{'ndjson' if featurized else 'csv'}")
            if featurized:
                _write_featurized(p, fz, uids)
            else:
                _write_raw_csv(p, by_uid, uids)
            paths[name] = p
        request = trainables.ExternalTrialRequest(
            featurized=featurized, train_path=paths["train"],
            val_path=paths["val"], test_path=paths["test"],
            params={k: v for k, v in merged.items() if k != "featurized"},
            seed=seed, epochs=task.training.epochs,
        )
        t0 = time.perf_counter()
        response = trainables.run_external_trial(exp.model, request, timeout_s=timeout_s)
        total_train_s = time.perf_counter() - t0

    if len(response.test_probs) != len(test_uids):
        raise TrialFailure(
            f"external response has {len(response.test_probs)} test rows, "
            f"expected {len(test_uids)}"
        )
    history = tuple((None, v) for v in response.val_metrics)
    best_epoch = best_epoch_of([v for _, v in history], exp.hyperopt.direction)
    test_preds = metrics.predictions_from_probs(np.asarray(response.test_probs))
    wanted = list(dict.fromkeys(list(task.metrics) + [exp.hyperopt.goal_metric]))
    test_metrics = metrics.compute_metrics(wanted, test_preds, y_test)

    cost_usd = metrics.compute_cost(total_train_s, task.accounting.cost)
    energy_kwh, co2_kg = metrics.estimate_energy(total_train_s, task.accounting.power)
    return TrialResult(
        trial_index=0, params=dict(params), seed=seed,
        epoch_history=history, best_epoch=best_epoch, test_metrics=test_metrics,
        accounting=AccountingRecord(
            total_train_s=total_train_s,
            # the wire protocol reports no per-batch timing; one epoch = one step
            mean_step_s=total_train_s / len(response.val_metrics),
            inference_latency_s=0.0, latency_samples=0,
            cost_usd=cost_usd, energy_kwh=energy_kwh, co2_kg=co2_kg,
            model_bytes=response.param_bytes,
        ),
        status="ok",
    )


# ---------------------------------------------------------------------------
# Study orchestration

@dataclass
class StudyRunResult:
    study_id: str
    docs: list
    snapshot_paths: list
    store_file: str
    n_failed: int


def _now_iso():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def safe_filename(name):
    """Filesystem-safe rendering of an experiment label."""
    return "".join(c if (c.isalnum() or c in "._-") else "_" for c in name)


def _make_doc(exp, trial, hardware, started_at, finished_at, nondeterministic=False):
    envelope = {
        "study_id": exp.study_id,
        "model_id": exp.model.model_id,
        "dataset_id": exp.dataset_id,
        "config_hash": exp.config_hash,
        "toolkit_version": cfg.TOOLKIT_VERSION,
        "hardware": hardware,
        "started_at": started_at,
        "finished_at": finished_at,
        "context": {
            "task": exp.task.to_dict(),
            "model": exp.model.to_dict(),
            "goal_metric": exp.hyperopt.goal_metric,
            "direction": exp.hyperopt.direction,
            "suggestion_mode": "sequential" if exp.hyperopt.sampler == "tpe" else "batch",
        },
    }
    if nondeterministic:
        envelope["nondeterministic"] = True
    return {"envelope": envelope, "trial": trial.to_dict()}


def _progress(stream, exp, trial, goal):
    value = trial.goal_value
    text = f"{value:.6g}" if value is not None else "nan"
    print(f"{exp.label} trial={trial.trial_index} status={trial.status} {goal}={text}",
          file=stream)
    stream.flush()


def _materialize_params(exp):
    """Pre-generated ParamSets for the grid/random samplers."""
    space = exp.model.search_space
    hopt = exp.hyperopt
    if hopt.sampler == "grid":
        if not space:
            return [{}]
        return hyperopt.sample_grid(space, hopt.grid_points_per_range)
    sampler_seed = derive_seed(hopt.seed, exp.model.model_id, exp.dataset_id, -1)
    if not space:
        return [{} for _ in range(hopt.num_samples)]
    return hyperopt.sample_random(space, hopt.num_samples, sampler_seed)


def _run_experiment(exp, pool, workers, cache, external_timeout_s, progress_stream):
    """Run all trials of one experiment; returns (trials, realized params)."""
    hopt = exp.hyperopt
    goal = hopt.goal_metric
    tpe = hopt.sampler == "tpe"
    results = {}
    realized = {}

    def finalize(i, trial):
        trial = replace(trial, trial_index=i)
        results[i] = trial
        if progress_stream is not None:
            _progress(progress_stream, exp, trial, goal)
        return trial

    if not tpe:
        paramsets = _materialize_params(exp)
        futures = {}
        for i, params in enumerate(paramsets):
            seed = derive_seed(hopt.seed, exp.model.model_id, exp.dataset_id, i)
            realized[i] = (params, seed)
            futures[pool.submit(run_trial, exp, params, seed, cache, external_timeout_s)] = i
        pending = set(futures)
        while pending:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                finalize(futures[fut], fut.result())
    else:
        # sequential model-based search: each suggestion sees whatever
        # history has completed by submission time (async contract)
        settings = hyperopt.TpeSettings(**exp.hyperopt.tpe.to_dict())
        history = []
        n = hopt.num_samples
        next_index = 0
        running = {}
        while next_index < n or running:
            while next_index < n and len(running) < workers:
                i = next_index
                next_index += 1
                seed = derive_seed(hopt.seed, exp.model.model_id, exp.dataset_id, i)
                params = hyperopt.suggest_tpe(
                    exp.model.search_space, list(history), hopt.direction,
                    settings, seed,
                )
                realized[i] = (params, seed)
                running[pool.submit(run_trial, exp, params, seed, cache, external_timeout_s)] = i
            done, _ = wait(set(running), return_when=FIRST_COMPLETED)
            for fut in done:
                i = running.pop(fut)
                trial = finalize(i, fut.result())
                history.append(hyperopt.TrialRecord(
                    params=trial.params,
                    objective=trial.goal_value,
                    trial_index=i,
                ))

    ordered = [results[i] for i in sorted(results)]
    trial_list = [realized[i] for i in sorted(realized)]
    return ordered, trial_list


_CURRENT_STDERR = object()  # sentinel: resolve sys.stderr at call time


def run_study(plan, workers=None, out_dir="bench_out", external_timeout_s=600.0,
              progress_stream=_CURRENT_STDERR):
    """Run every experiment of a study; returns docs plus written artifacts.

    Individual trial failures are recorded and never abort the study; only
    an I/O failure writing results or snapshots aborts.
    """
    if progress_stream is _CURRENT_STDERR:
        progress_stream = sys.stderr
    if workers is None:
        workers = plan.hyperopt.max_parallel_trials
    workers = max(1, int(workers))

    experiments = cfg.expand_matrix(plan)
    hardware = metrics.collect_hardware_info().to_dict()
    cache = _FeaturizeCache()
    store = Store(store_path(out_dir, plan.study_id))
    snap_dir = os.path.join(out_dir, "snapshots", plan.study_id)
    os.makedirs(snap_dir, exist_ok=True)

    docs = []
    snapshot_paths = []
    n_failed = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for exp in experiments:
            started_at = _now_iso()
            trials, realized = _run_experiment(
                exp, pool, workers, cache, external_timeout_s, progress_stream
            )
            finished_at = _now_iso()
            mode = "sequential" if exp.hyperopt.sampler == "tpe" else "batch"
            snapshot = cfg.snapshot_experiment(exp, realized, suggestion_mode=mode)
            snap_path = os.path.join(
                snap_dir, f"{safe_filename(exp.label)}{cfg.SNAPSHOT_SUFFIX}")
            cfg.write_snapshot(snapshot, snap_path)
            snapshot_paths.append(snap_path)
            for trial in trials:
                if trial.status != "ok":
                    n_failed += 1
                doc = _make_doc(exp, trial, hardware, started_at, finished_at)
                store.append(doc)
                docs.append(doc)
    return StudyRunResult(
        study_id=plan.study_id, docs=docs, snapshot_paths=snapshot_paths,
        store_file=store.path, n_failed=n_failed,
    )


def experiment_from_snapshot(snapshot):
    """Rebuild an ExperimentPlan from a snapshot's resolved context."""
    task = cfg.task_from_dict(snapshot.task)
    model = cfg.model_from_dict(snapshot.model)
    hopt = cfg.HyperoptConfig(
        goal_metric=snapshot.goal_metric, direction=snapshot.direction,
        num_samples=max(1, len(snapshot.trials)),
    )
    return cfg.ExperimentPlan(
        study_id=snapshot.study_id, task=task, model=model,
        dataset_id=snapshot.dataset_id, hyperopt=hopt,
        config_hash=snapshot.config_hash,
    )


def train_snapshot_trial(snapshot, trial_index=0, cache=None):
    """Train one materialized snapshot trial and return the best-checkpoint
    model with its data context: (model, dataset, split, featurized).

    Used by evaluation commands (attacks, slices) that need a live model.
    External trainables have no in-process model to return.
    """
    exp = experiment_from_snapshot(snapshot)
    if exp.model.encoder_kind == "external":
        raise ValidationError(
            "attacks and slices need an in-process model; external trainables "
            "are not supported here"
        )
    matching = [t for t in snapshot.trials if t["trial_index"] == trial_index]
    if not matching:
        have = ", ".join(str(t["trial_index"]) for t in snapshot.trials)
        raise ValidationError(f"snapshot has no trial {trial_index}; trials: {have}")
    entry = matching[0]

    task = exp.task
    ds, assignment, fz = _prepare(exp, cache)
    x_train, y_train, _ = fz.rows(assignment.train)
    val_uids = assignment.val if assignment.val else assignment.train
    x_val, y_val, _ = fz.rows(val_uids)

    merged = dict(exp.model.fixed_params)
    merged.update(entry["params"])
    model = trainables.create_trainable(
        exp.model, merged, fz.feature_dim, ds.n_classes, entry["seed"],
        optimizer=task.training.optimizer,
    )
    lr = float(merged.get("learning_rate", task.training.learning_rate))
    batch_size = int(merged.get("batch_size", task.training.batch_size))
    patience = task.training.early_stop_patience

    best_model, best_value, bad = None, None, 0
    for epoch in range(task.training.epochs):
        order = _epoch_order(x_train.shape[0], task.training.shuffle, entry["seed"], epoch)
        model.fit_epoch(x_train[order], y_train[order], batch_size, lr)
        val_value = _goal_value(exp.hyperopt.goal_metric, model.predict_proba(x_val), y_val)
        improved = (
            best_value is None
            or (exp.hyperopt.direction == "maximize" and val_value > best_value)
            or (exp.hyperopt.direction == "minimize" and val_value < best_value)
        )
        if improved:
            best_value, best_model, bad = val_value, model.clone(), 0
        else:
            bad += 1
            if patience is not None and bad >= max(1, patience):
                break
    return best_model, ds, assignment, fz


def reproduce(snapshot, out_dir=None, external_timeout_s=600.0, progress_stream=None):
    """Replay a snapshot's materialized trials; no sampler is consulted.

    For deterministic (native) trainables all non-wall-clock fields equal the
    original run's. External trainables are replayed too, but equality is not
    guaranteed; their docs are flagged nondeterministic.
    """
    exp = experiment_from_snapshot(snapshot)
    if not datagen.dataset_id_known(snapshot.dataset_id):
        raise ValidationError(
            f"snapshot references unknown dataset {snapshot.dataset_id!r}"
        )
    hardware = metrics.collect_hardware_info().to_dict()
    cache = _FeaturizeCache()
    nondet = exp.model.encoder_kind == "external"

    docs = []
    started_at = _now_iso()
    for entry in snapshot.trials:
        trial = run_trial(exp, entry["params"], entry["seed"], cache, external_timeout_s)
        trial = replace(trial, trial_index=entry["trial_index"])
        if progress_stream is not None:
            _progress(progress_stream, exp, trial, exp.hyperopt.goal_metric)
        docs.append(_make_doc(exp, trial, hardware, started_at, _now_iso(),
                              nondeterministic=nondet))
    if out_dir:
        store = Store(store_path(out_dir, snapshot.study_id))
        for doc in docs:
            store.append(doc)
    return docs
