"""Quadruplet co-domain embedding for one-shot template matching, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .config import RunConfig  # noqa: E402
from .data import DatasetBundle, DatasetError, generate_dataset, load_dataset  # noqa: E402
from .evaluation import EvalReport, one_shot_nn, transfer_eval  # noqa: E402
from .losses import LossConfig, Variant  # noqa: E402

__all__ = [
    "DatasetBundle", "DatasetError", "EvalReport", "LossConfig", "RunConfig", "Variant",
    "__version__", "generate_dataset", "load_dataset", "one_shot_nn", "transfer_eval",
]
