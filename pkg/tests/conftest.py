import os

import pytest

from deskbench import datagen, metrics

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(autouse=True)
def _clean_registries():
    """Registries are process-global; restore them around every test."""
    ds_snapshot = dict(datagen._registry)
    metric_snapshot = dict(metrics._registry)
    yield
    datagen._registry.clear()
    datagen._registry.update(ds_snapshot)
    metrics._registry.clear()
    metrics._registry.update(metric_snapshot)


@pytest.fixture
def data_path():
    def _path(name):
        return os.path.join(DATA_DIR, name)

    return _path


TASK_MINIMAL = """\
task_kind: text_classification
dataset_ids: [toy_polarity]
output_feature: label
"""

TASK_SMALL = """\
task_kind: text_classification
dataset_ids: [toy_polarity]
output_feature: label
training:
  epochs: 3
  batch_size: 32
metrics: [accuracy]
preprocess:
  max_vocab: 500
"""

MODEL_NB = """\
model_id: nb
encoder_kind: naive_bayes
"""

MODEL_SOFTMAX = """\
model_id: softmax
encoder_kind: softmax_regression
search_space:
  - {name: learning_rate, kind: log_uniform, low: 0.01, high: 1.0}
"""

MODEL_MLP = """\
model_id: mlp8
encoder_kind: mlp
fixed_params:
  hidden: 8
search_space:
  - {name: learning_rate, kind: log_uniform, low: 0.01, high: 1.0}
"""

HYPEROPT_SMALL = """\
goal_metric: val_accuracy
sampler: random
num_samples: 2
seed: 7
"""


@pytest.fixture
def small_plan():
    from deskbench import config

    task = config.parse_task_config(TASK_SMALL)
    models = [config.parse_model_config(MODEL_NB),
              config.parse_model_config(MODEL_SOFTMAX)]
    hopt = config.parse_hyperopt_config(HYPEROPT_SMALL)
    return config.validate_study(task, models, hopt)
