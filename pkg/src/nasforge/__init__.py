"""Neural architecture search with a recurrent controller, built on a small numpy autodiff core."""
from __future__ import annotations

__version__ = "0.1.0"
