import time
from dataclasses import asdict
from dataclasses import is_dataclass
from functools import wraps

import numpy as np

from src.observability import get_logger

logger = get_logger(__name__)


def timed(func):
    """Decorator to log function execution time with args."""

    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = func(*args, **kwargs)
        elapsed_ms = (time.perf_counter() - start) * 1000
        args_str = ", ".join(_short_repr(a) for a in args) if args else ""
        kwargs_str = ", ".join(f"{k}={_short_repr(v)}" for k, v in kwargs.items()) if kwargs else ""
        params = ", ".join(filter(None, [args_str, kwargs_str])) or "no args"
        logger.debug(f"[{func.__name__}]({params}) completed in {elapsed_ms:.1f}ms")
        return result

    return wrapper


def _short_repr(value) -> str:
    if isinstance(value, np.ndarray):
        return f"ndarray{value.shape}"
    text = repr(value)
    return text if len(text) <= 80 else text[:77] + "..."


def to_jsonable(value):
    """Dataclasses, tuples and numpy scalars/arrays as plain JSON types; NaN becomes null."""
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and value != value:
        return None
    return value
