"""Trainable models: multinomial naive Bayes, softmax regression, a
one-hidden-layer tanh MLP with an internally implemented Adam optimizer, and
an adapter that drives an external process over a stdio wire protocol.

All arithmetic is 64-bit. Training is deterministic: identical (spec, params,
data, seed) produce bit-identical weights after any number of epochs.
"""

import copy
import json
import subprocess
from dataclasses import dataclass

import numpy as np

from .errors import TrialFailure, ValidationError
from .metrics import model_metadata_bytes


@dataclass
class TrainState:
    """Per-layer weights with Adam moment estimates and a step counter."""

    weights: list
    m: list
    v: list
    t: int = 0


def init_train_state(shapes):
    zeros = [np.zeros(s, dtype=np.float64) for s in shapes]
    return TrainState(weights=[z.copy() for z in zeros],
                      m=[z.copy() for z in zeros],
                      v=[z.copy() for z in zeros], t=0)


def adam_update(state, gradients, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step with bias correction; returns a new TrainState."""
    if len(gradients) != len(state.weights):
        raise ValidationError("gradient count does not match weight tensors")
    t = state.t + 1
    m, v, w = [], [], []
    for wi, mi, vi, g in zip(state.weights, state.m, state.v, gradients):
        if g.shape != wi.shape:
            raise ValidationError(f"gradient shape {g.shape} != weight shape {wi.shape}")
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * (g * g)
        m_hat = mi / (1.0 - beta1 ** t)
        v_hat = vi / (1.0 - beta2 ** t)
        w.append(wi - lr * m_hat / (np.sqrt(v_hat) + eps))
        m.append(mi)
        v.append(vi)
    return TrainState(weights=w, m=m, v=v, t=t)


def sgd_update(state, gradients, lr):
    w = [wi - lr * g for wi, g in zip(state.weights, gradients)]
    return TrainState(weights=w, m=state.m, v=state.v, t=state.t + 1)


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_2d(features):
    if hasattr(features, "toarray") or features.ndim == 2:
        return features
    return features.reshape(1, -1)


def _cross_entropy(probs, labels):
    eps = 1e-300
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + eps)))


class GradientTrainable:
    """Shared batching/optimizer loop for the gradient-trained models."""

    def __init__(self, feature_dim, n_classes, optimizer="adam"):
        if optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {optimizer!r}")
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.optimizer = optimizer
        self.state = None  # set by subclass

    def loss_and_grads(self, features, labels):
        raise NotImplementedError

    def predict_proba(self, features):
        raise NotImplementedError

    def fit_epoch(self, features, labels, batch_size, lr):
        """One pass over the data in the given row order, batched sequentially.

        Returns the mean per-example loss across the epoch; raises
        TrialFailure if the loss goes non-finite.
        """
        n = features.shape[0]
        if features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dim {features.shape[1]} != model dim {self.feature_dim}"
            )
        total = 0.0
        for start in range(0, n, batch_size):
            xb = features[start:start + batch_size]
            yb = labels[start:start + batch_size]
            loss, grads = self.loss_and_grads(xb, yb)
            if not np.isfinite(loss):
                raise TrialFailure("non-finite training loss")
            if self.optimizer == "adam":
                self.state = adam_update(self.state, grads, lr)
            else:
                self.state = sgd_update(self.state, grads, lr)
            total += loss * xb.shape[0]
        return total / n

    def clone(self):
        return copy.deepcopy(self)

    def _check_dim(self, features):
        if features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dim {features.shape[1]} != model dim {self.feature_dim}"
            )


class SoftmaxRegression(GradientTrainable):
    encoder_kind = "softmax_regression"

    def __init__(self, feature_dim, n_classes, seed, optimizer="adam"):
        super().__init__(feature_dim, n_classes, optimizer)
        rng = np.random.default_rng(seed)
        w = _glorot(rng, feature_dim, n_classes)
        b = np.zeros(n_classes, dtype=np.float64)
        self.state = init_train_state([w.shape, b.shape])
        self.state.weights = [w, b]

    def _logits(self, features):
        w, b = self.state.weights
        return np.asarray(features @ w) + b

    def loss_and_grads(self, features, labels):
        n = features.shape[0]
        probs = _softmax(self._logits(features))
        loss = _cross_entropy(probs, labels)
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        gw = np.asarray(features.T @ dlogits)
        gb = dlogits.sum(axis=0)
        return loss, [gw, gb]

    def predict_proba(self, features):
        features = _as_2d(features)
        self._check_dim(features)
        return _softmax(self._logits(features))

    def param_bytes(self):
        n_params = self.feature_dim * self.n_classes + self.n_classes
        meta = {"encoder": self.encoder_kind, "feature_dim": self.feature_dim,
                "n_classes": self.n_classes}
        return n_params * 8 + model_metadata_bytes(meta)


class Mlp(GradientTrainable):
    """One hidden tanh layer; width is the `hidden` parameter."""

    encoder_kind = "mlp"

    def __init__(self, feature_dim, n_classes, hidden, seed, optimizer="adam"):
        super().__init__(feature_dim, n_classes, optimizer)
        if hidden < 1:
            raise ValidationError("mlp hidden width must be >= 1")
        self.hidden = int(hidden)
        rng = np.random.default_rng(seed)
        w1 = _glorot(rng, feature_dim, self.hidden)
        b1 = np.zeros(self.hidden, dtype=np.float64)
        w2 = _glorot(rng, self.hidden, n_classes)
        b2 = np.zeros(n_classes, dtype=np.float64)
        self.state = init_train_state([w1.shape, b1.shape, w2.shape, b2.shape])
        self.state.weights = [w1, b1, w2, b2]

    def _forward(self, features):
        w1, b1, w2, b2 = self.state.weights
        h = np.tanh(np.asarray(features @ w1) + b1)
        return h, h @ w2 + b2

    def loss_and_grads(self, features, labels):
        n = features.shape[0]
        w1, b1, w2, b2 = self.state.weights
        h, logits = self._forward(features)
        probs = _softmax(logits)
        loss = _cross_entropy(probs, labels)
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        gw2 = h.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dh = (dlogits @ w2.T) * (1.0 - h * h)
        gw1 = np.asarray(features.T @ dh)
        gb1 = dh.sum(axis=0)
        return loss, [gw1, gb1, gw2, gb2]

    def predict_proba(self, features):
        features = _as_2d(features)
        self._check_dim(features)
        return _softmax(self._forward(features)[1])

    def param_bytes(self):
        n_params = (self.feature_dim * self.hidden + self.hidden
                    + self.hidden * self.n_classes + self.n_classes)
        meta = {"encoder": self.encoder_kind, "feature_dim": self.feature_dim,
                "n_classes": self.n_classes, "hidden": self.hidden}
        return n_params * 8 + model_metadata_bytes(meta)


class MultinomialNaiveBayes:
    """Count-based classifier; fitting is a single accumulation pass.

    Posteriors use Laplace smoothing with the `alpha` parameter (default 1)
    on both the per-class token tables and the class priors.
    """

    encoder_kind = "naive_bayes"

    def __init__(self, feature_dim, n_classes, alpha=1.0):
        if alpha <= 0:
            raise ValidationError("naive bayes alpha must be positive")
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.alpha = float(alpha)
        self.feature_count = np.zeros((n_classes, feature_dim), dtype=np.float64)
        self.class_count = np.zeros(n_classes, dtype=np.float64)
        self.fitted = False
        self._train_loss = None

    def fit_epoch(self, features, labels, batch_size, lr):
        if self.fitted:
            return self._train_loss  # later epochs are no-ops
        if features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dim {features.shape[1]} != model dim {self.feature_dim}"
            )
        for c in range(self.n_classes):
            mask = labels == c
            self.class_count[c] = float(mask.sum())
            if mask.any():
                self.feature_count[c] = np.asarray(features[mask].sum(axis=0)).ravel()
        self.fitted = True
        probs = self.predict_proba(features)
        self._train_loss = _cross_entropy(probs, labels)
        return self._train_loss

    def _log_posteriors(self, features):
        totals = self.feature_count.sum(axis=1, keepdims=True)
        log_theta = np.log(self.feature_count + self.alpha) - np.log(
            totals + self.alpha * self.feature_dim
        )
        n_docs = self.class_count.sum()
        log_prior = np.log(self.class_count + self.alpha) - np.log(
            n_docs + self.alpha * self.n_classes
        )
        return np.asarray(features @ log_theta.T) + log_prior

    def predict_proba(self, features):
        features = _as_2d(features)
        if features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dim {features.shape[1]} != model dim {self.feature_dim}"
            )
        return _softmax(self._log_posteriors(features))

    def param_bytes(self):
        n_params = self.feature_dim * self.n_classes + self.n_classes
        meta = {"encoder": self.encoder_kind, "feature_dim": self.feature_dim,
                "n_classes": self.n_classes, "alpha": self.alpha}
        return n_params * 8 + model_metadata_bytes(meta)

    def clone(self):
        return copy.deepcopy(self)


def _param(params, name, default=None, required=False):
    if name in params:
        return params[name]
    if required:
        raise ValidationError(f"missing required model parameter {name!r}")
    return default


def create_trainable(spec, params, feature_dim, n_classes, seed, optimizer="adam"):
    """Instantiate a trainable from a model spec and a complete ParamSet.

    Initialization is deterministic in `seed` (uniform Glorot weights).
    External models do not train in-process; see run_external_trial.
    """
    if feature_dim < 1 or n_classes < 2:
        raise ValidationError(
            f"bad dimensions: feature_dim={feature_dim}, n_classes={n_classes}"
        )
    kind = spec.encoder_kind
    if kind == "naive_bayes":
        return MultinomialNaiveBayes(
            feature_dim, n_classes, alpha=float(_param(params, "alpha", 1.0))
        )
    if kind == "softmax_regression":
        return SoftmaxRegression(feature_dim, n_classes, seed, optimizer)
    if kind == "mlp":
        hidden = _param(params, "hidden", required=True)
        return Mlp(feature_dim, n_classes, int(hidden), seed, optimizer)
    if kind == "external":
        raise ValidationError(
            "external models are driven through run_external_trial, not created in-process"
        )
    raise ValidationError(f"unknown encoder_kind {kind!r}")


# ---------------------------------------------------------------------------
# External trainable adapter

@dataclass(frozen=True)
class ExternalTrialRequest:
    featurized: bool
    train_path: str
    val_path: str
    test_path: str
    params: dict
    seed: int
    epochs: int

    def to_dict(self):
        return {
            "featurized": self.featurized,
            "train_path": self.train_path,
            "val_path": self.val_path,
            "test_path": self.test_path,
            "params": dict(self.params),
            "seed": self.seed,
            "epochs": self.epochs,
        }


@dataclass(frozen=True)
class ExternalTrialResponse:
    val_metrics: tuple      # one goal-metric value per trained epoch
    test_probs: tuple       # per test example, probabilities over classes
    param_bytes: int


def parse_external_response(line, requested_epochs):
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrialFailure(f"malformed external response: {exc}")
    if not isinstance(data, dict):
        raise TrialFailure("external response must be a JSON object")
    missing = {"val_metrics", "test_probs", "param_bytes"} - set(data)
    if missing:
        raise TrialFailure(f"external response missing fields: {sorted(missing)}")
    val_metrics = tuple(float(v) for v in data["val_metrics"])
    if len(val_metrics) == 0:
        raise TrialFailure("external response reported zero epochs")
    if len(val_metrics) > requested_epochs:
        raise TrialFailure(
            f"external response reports {len(val_metrics)} epochs, "
            f"requested at most {requested_epochs}"
        )
    probs_rows = []
    for i, row in enumerate(data["test_probs"]):
        row = tuple(float(p) for p in row)
        if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
            raise TrialFailure(
                f"external response row {i}: probabilities invalid (sum={sum(row)!r})"
            )
        probs_rows.append(row)
    return ExternalTrialResponse(
        val_metrics=val_metrics,
        test_probs=tuple(probs_rows),
        param_bytes=int(data["param_bytes"]),
    )


def run_external_trial(spec, request, timeout_s=600.0):
    """Run one trial in a child process over the stdio wire protocol.

    The request is written to stdin as a single JSON line; the response is
    the first line of stdout. Nonzero exit, malformed output, and timeouts
    all surface as TrialFailure with captured stderr.
    """
    if not spec.external_command:
        raise ValidationError(f"model {spec.model_id!r} has no external_command")
    payload = json.dumps(request.to_dict(), sort_keys=True) + "\n"
    try:
        proc = subprocess.run(
            spec.external_command,
            shell=True,
            input=payload.encode("utf-8"),
            capture_output=True,
            timeout=timeout_s,
        )
    except subprocess.TimeoutExpired:
        raise TrialFailure(f"external command timed out after {timeout_s}s")
    stderr = proc.stderr.decode("utf-8", "replace").strip()
    if proc.returncode != 0:
        raise TrialFailure(
            f"external command exited {proc.returncode}; stderr: {stderr or '<empty>'}"
        )
    stdout = proc.stdout.decode("utf-8", "replace").strip()
    if not stdout:
        raise TrialFailure(f"external command produced no output; stderr: {stderr or '<empty>'}")
    return parse_external_response(stdout.splitlines()[0], request.epochs)
