"""Dataset registry, loaders, synthetic generator, splitting, featurization.

Every model in a study sees the same splits and the same preprocessing:
splits are a pure function of (uid, ratios, split_seed) and the vocabulary is
built from the training split only.
"""

import csv
import hashlib
import io
import logging
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import sparse

from .errors import ValidationError

log = logging.getLogger(__name__)

_WORD_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class Example:
    uid: str
    text: str
    label: int


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    examples: tuple
    label_names: tuple
    provenance: str  # bundled | user_csv | synthetic

    @property
    def n_classes(self):
        return len(self.label_names)


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset
    ratios: tuple
    split_seed: int


@dataclass(frozen=True)
class PreprocessParams:
    lowercase: bool = True
    token_pattern: str = "unicode_word"  # unicode_word | whitespace
    ngram_max: int = 1
    min_token_freq: int = 1
    max_vocab: int = 20000
    weighting: str = "count"  # count | tfidf

    def __post_init__(self):
        if self.token_pattern not in ("unicode_word", "whitespace"):
            raise ValidationError(f"unknown token_pattern {self.token_pattern!r}")
        if self.ngram_max not in (1, 2):
            raise ValidationError("ngram_max must be 1 or 2")
        if self.min_token_freq < 1:
            raise ValidationError("min_token_freq must be >= 1")
        if self.max_vocab < 1:
            raise ValidationError("max_vocab must be >= 1")
        if self.weighting not in ("count", "tfidf"):
            raise ValidationError(f"unknown weighting {self.weighting!r}")

    def to_dict(self):
        return {
            "lowercase": self.lowercase,
            "token_pattern": self.token_pattern,
            "ngram_max": self.ngram_max,
            "min_token_freq": self.min_token_freq,
            "max_vocab": self.max_vocab,
            "weighting": self.weighting,
        }


@dataclass(frozen=True)
class SyntheticParams:
    n_samples: int = 1000
    n_classes: int = 2
    vocab_size: int = 1000
    mean_len: float = 20.0
    len_dispersion: float = 5.0
    signal_prob: float = 0.2
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.vocab_size < self.n_classes * 2:
            raise ValidationError(
                f"vocab_size {self.vocab_size} too small to allocate signal sets "
                f"for {self.n_classes} classes (need >= {self.n_classes * 2})"
            )
        if self.mean_len <= 0:
            raise ValidationError("mean_len must be positive")
        if self.len_dispersion <= 0:
            raise ValidationError("len_dispersion must be positive")
        if not 0.0 <= self.signal_prob <= 1.0:
            raise ValidationError("signal_prob must be in [0, 1]")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must be in [0, 0.5)")

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "n_classes": self.n_classes,
            "vocab_size": self.vocab_size,
            "mean_len": self.mean_len,
            "len_dispersion": self.len_dispersion,
            "signal_prob": self.signal_prob,
            "label_noise": self.label_noise,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class DatasetAttributes:
    size: int
    avg_sentence_length: float
    n_classes: int


# ---------------------------------------------------------------------------
# Registry

@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: str
    path: str
    text_col: object = "text"  # header name or 0-based index
    label_col: object = "label"


_registry = {}


def register_dataset(descriptor):
    """Make a user CSV loadable by id. Duplicate ids are rejected."""
    if descriptor.dataset_id in _registry or descriptor.dataset_id in bundled_ids():
        raise ValidationError(f"dataset id {descriptor.dataset_id!r} already registered")
    _registry[descriptor.dataset_id] = descriptor
    return descriptor


def registered_ids():
    return sorted(_registry)


def bundled_ids():
    out = []
    for entry in resources.files("deskbench.data").iterdir():
        if entry.name.endswith(".csv"):
            out.append(entry.name[: -len(".csv")])
    return sorted(out)


def list_dataset_ids():
    return sorted(set(bundled_ids()) | set(_registry))


def dataset_id_known(dataset_id):
    if dataset_id.startswith("synthetic:"):
        try:
            parse_synthetic_id(dataset_id)
            return True
        except ValidationError:
            return False
    return dataset_id in _registry or dataset_id in bundled_ids()


# ---------------------------------------------------------------------------
# Loading

def _uid(row_index, text):
    digest = hashlib.sha256(f"{row_index}:{text}".encode("utf-8")).hexdigest()
    return digest[:16]


def _column_index(header, col, what, source):
    if isinstance(col, int):
        if not 0 <= col < len(header):
            raise ValidationError(f"{source}: {what} column index {col} out of range")
        return col
    if col not in header:
        raise ValidationError(f"{source}: missing {what} column {col!r}")
    return header.index(col)


def _dataset_from_rows(dataset_id, rows, provenance):
    """Assign uids, map labels to dense indices in first-appearance order."""
    label_index = {}
    examples = []
    dropped = 0
    for i, (text, raw_label) in enumerate(rows):
        if not text.strip():
            dropped += 1
            continue
        if raw_label not in label_index:
            label_index[raw_label] = len(label_index)
        examples.append(Example(uid=_uid(i, text), text=text, label=label_index[raw_label]))
    if dropped:
        log.warning("dataset %s: dropped %d blank-text rows", dataset_id, dropped)
    if not examples:
        raise ValidationError(f"dataset {dataset_id!r} is empty")
    if len(label_index) < 2:
        raise ValidationError(
            f"dataset {dataset_id!r} has a single class; need at least 2"
        )
    return Dataset(
        dataset_id=dataset_id,
        examples=tuple(examples),
        label_names=tuple(str(k) for k in label_index),
        provenance=provenance,
    )


def _load_csv(dataset_id, text_stream, text_col, label_col, provenance, source):
    reader = csv.reader(text_stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"dataset {dataset_id!r}: empty file")
    ti = _column_index(header, text_col, "text", source)
    li = _column_index(header, label_col, "label", source)
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) <= max(ti, li):
            raise ValidationError(
                f"{source}: row {reader.line_num} has {len(row)} columns, "
                f"need at least {max(ti, li) + 1}"
            )
        rows.append((row[ti], row[li]))
    return _dataset_from_rows(dataset_id, rows, provenance)


def load_dataset(dataset_id):
    """Load a bundled, registered, or inline-synthetic dataset."""
    if dataset_id.startswith("synthetic:"):
        return generate_synthetic(parse_synthetic_id(dataset_id), dataset_id=dataset_id)
    if dataset_id in _registry:
        desc = _registry[dataset_id]
        try:
            fh = open(desc.path, "r", encoding="utf-8", newline="")
        except OSError as exc:
            raise ValidationError(f"dataset {dataset_id!r}: cannot read {desc.path}: {exc}")
        with fh:
            return _load_csv(dataset_id, fh, desc.text_col, desc.label_col, "user_csv", desc.path)
    if dataset_id in bundled_ids():
        data = resources.files("deskbench.data").joinpath(f"{dataset_id}.csv").read_text("utf-8")
        return _load_csv(dataset_id, io.StringIO(data, newline=""), "text", "label", "bundled", dataset_id)
    raise ValidationError(
        f"unknown dataset {dataset_id!r}; available: {', '.join(list_dataset_ids())}"
    )


# ---------------------------------------------------------------------------
# Synthetic generation

_SYN_FIELD_TYPES = {
    "n_samples": int,
    "n_classes": int,
    "vocab_size": int,
    "mean_len": float,
    "len_dispersion": float,
    "signal_prob": float,
    "label_noise": float,
    "seed": int,
}


def parse_synthetic_id(dataset_id):
    """Parse `synthetic:key=value,...` into SyntheticParams."""
    body = dataset_id[len("synthetic:"):]
    kwargs = {}
    if body:
        for part in body.split(","):
            if "=" not in part:
                raise ValidationError(f"bad synthetic spec fragment {part!r}")
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in _SYN_FIELD_TYPES:
                raise ValidationError(
                    f"unknown synthetic parameter {key!r}; valid: "
                    + ", ".join(sorted(_SYN_FIELD_TYPES))
                )
            try:
                kwargs[key] = _SYN_FIELD_TYPES[key](value.strip())
            except ValueError:
                raise ValidationError(f"bad value for synthetic parameter {key!r}: {value!r}")
    return SyntheticParams(**kwargs)


def synthetic_dataset_id(params):
    parts = [f"{k}={v}" for k, v in sorted(params.to_dict().items())]
    return "synthetic:" + ",".join(parts)


def generate_synthetic(params, dataset_id=None):
    """Deterministic synthetic text-classification corpus.

    Lengths follow a negative binomial with the requested mean and dispersion
    (clamped to >= 1). Each token is a class-signal token with probability
    signal_prob, drawn from the true class's disjoint signal set, otherwise a
    background token. With probability label_noise the recorded label is
    flipped to a uniformly random other class.
    """
    rng = np.random.default_rng(params.seed)
    k = params.n_classes
    sig_per_class = params.vocab_size // (2 * k)
    n_signal = sig_per_class * k
    background = np.arange(n_signal, params.vocab_size)

    r = params.len_dispersion
    p_nb = r / (r + params.mean_len)

    rows = []
    for i in range(params.n_samples):
        true_class = int(rng.integers(0, k))
        length = max(1, int(rng.negative_binomial(r, p_nb)))
        is_signal = rng.random(length) < params.signal_prob
        tokens = []
        for flag in is_signal:
            if flag:
                j = int(rng.integers(0, sig_per_class))
                tokens.append(f"tok{true_class * sig_per_class + j}")
            else:
                tokens.append(f"tok{int(rng.choice(background))}")
        label = true_class
        if params.label_noise > 0 and rng.random() < params.label_noise:
            shift = int(rng.integers(1, k))
            label = (true_class + shift) % k
        rows.append((" ".join(tokens), label))

    examples = tuple(
        Example(uid=_uid(i, text), text=text, label=label)
        for i, (text, label) in enumerate(rows)
    )
    return Dataset(
        dataset_id=dataset_id or synthetic_dataset_id(params),
        examples=examples,
        label_names=tuple(f"class_{c}" for c in range(k)),
        provenance="synthetic",
    )


# ---------------------------------------------------------------------------
# Splitting

def _split_fraction(split_seed, uid):
    digest = hashlib.sha256(f"{split_seed}:{uid}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split(ds, ratios, split_seed):
    """Deterministic, order-independent train/val/test assignment.

    An example's bucket depends only on (uid, ratios, split_seed): the uid is
    hashed into [0, 1) and mapped through the cumulative ratios.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError("ratios must be three non-negative reals")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}")

    cut1 = ratios[0]
    cut2 = ratios[0] + ratios[1]
    train, val, test = set(), set(), set()
    for ex in ds.examples:
        u = _split_fraction(split_seed, ex.uid)
        if u < cut1:
            train.add(ex.uid)
        elif u < cut2:
            val.add(ex.uid)
        else:
            test.add(ex.uid)
    for name, bucket, ratio in (("train", train, ratios[0]),
                                ("val", val, ratios[1]),
                                ("test", test, ratios[2])):
        if ratio > 0 and not bucket:
            log.warning("dataset %s: %s split is empty at ratio %.3f", ds.dataset_id, name, ratio)
    return SplitAssignment(
        train=frozenset(train), val=frozenset(val), test=frozenset(test),
        ratios=ratios, split_seed=split_seed,
    )


# ---------------------------------------------------------------------------
# Featurization

def tokenize(text, pp):
    if pp.lowercase:
        text = text.lower()
    if pp.token_pattern == "whitespace":
        tokens = text.split()
    else:
        tokens = _WORD_RE.findall(text)
    if pp.ngram_max == 2:
        tokens = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    return tokens


class FeaturizedDataset:
    """Vocabulary plus sparse vectors for every example of a dataset.

    The vocabulary (and the idf table under tfidf weighting) is built from
    the training split only; out-of-vocabulary tokens are dropped.
    """

    def __init__(self, vocab, matrix, uids, labels, pp, idf=None):
        self.vocab = vocab
        self.matrix = matrix  # csr, one row per example, aligned with uids
        self.uids = list(uids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.pp = pp
        self.idf = idf
        self.feature_dim = len(vocab)
        self._row_of = {u: i for i, u in enumerate(self.uids)}

    def rows(self, uids):
        """(features, labels) for the given uids, ordered by sorted uid."""
        order = sorted(uids)
        idx = [self._row_of[u] for u in order]
        return self.matrix[idx], self.labels[idx], order

    def vectorize_text(self, text):
        """Single-text feature vector under the trained vocabulary."""
        counts = {}
        for tok in tokenize(text, self.pp):
            j = self.vocab.get(tok)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        cols = sorted(counts)
        data = np.array([counts[j] for j in cols], dtype=np.float64)
        if self.idf is not None and len(cols):
            data = data * self.idf[cols]
        return sparse.csr_matrix(
            (data, (np.zeros(len(cols), dtype=np.int64), np.array(cols, dtype=np.int64))),
            shape=(1, self.feature_dim),
        )


def featurize(ds, split_assignment, pp):
    """Bag-of-(1|2)-gram features with count or tf-idf weighting.

    Vocabulary is truncated to max_vocab by (frequency desc, token asc);
    tfidf uses idf = ln((1+N)/(1+df)) + 1 with N = number of train docs.
    """
    tokenized = {ex.uid: tokenize(ex.text, pp) for ex in ds.examples}

    freq = {}
    doc_freq = {}
    n_train = 0
    for ex in ds.examples:
        if ex.uid not in split_assignment.train:
            continue
        n_train += 1
        toks = tokenized[ex.uid]
        for t in toks:
            freq[t] = freq.get(t, 0) + 1
        for t in set(toks):
            doc_freq[t] = doc_freq.get(t, 0) + 1

    kept = [t for t, c in freq.items() if c >= pp.min_token_freq]
    kept.sort(key=lambda t: (-freq[t], t))
    kept = kept[: pp.max_vocab]
    if not kept:
        raise ValidationError(
            "empty vocabulary after min_token_freq filtering; "
            "lower min_token_freq or check the training split"
        )
    vocab = {t: i for i, t in enumerate(kept)}

    idf = None
    if pp.weighting == "tfidf":
        idf = np.array(
            [np.log((1.0 + n_train) / (1.0 + doc_freq.get(t, 0))) + 1.0 for t in kept],
            dtype=np.float64,
        )

    indptr = [0]
    indices = []
    data = []
    uids = []
    labels = []
    for ex in ds.examples:
        counts = {}
        for tok in tokenized[ex.uid]:
            j = vocab.get(tok)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        cols = sorted(counts)
        for j in cols:
            indices.append(j)
            w = float(counts[j])
            if idf is not None:
                w *= idf[j]
            data.append(w)
        indptr.append(len(indices))
        uids.append(ex.uid)
        labels.append(ex.label)

    matrix = sparse.csr_matrix(
        (np.array(data, dtype=np.float64),
         np.array(indices, dtype=np.int64),
         np.array(indptr, dtype=np.int64)),
        shape=(len(uids), len(kept)),
    )
    return FeaturizedDataset(vocab=vocab, matrix=matrix, uids=uids, labels=labels, pp=pp, idf=idf)


def dataset_attributes(ds):
    """size, mean whitespace-token count, and class count."""
    if not ds.examples:
        raise ValidationError("dataset is empty")
    lengths = [len(ex.text.split()) for ex in ds.examples]
    return DatasetAttributes(
        size=len(ds.examples),
        avg_sentence_length=float(np.mean(lengths)),
        n_classes=ds.n_classes,
    )
