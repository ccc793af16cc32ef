"""Grid-based soft-attention classification of large tissue images."""

__version__ = "0.1.0"

from gridattn.autodiff import Tensor  # noqa: F401
from gridattn.labels import CLASS_NAMES, NUM_CLASSES  # noqa: F401
