""" Helper Functions """
import hashlib
import json
import logging
import math
from typing import Any

import numpy as np

HOURS_PER_DAY = 24
BAND_WIDTH = 0.05


def slot_offset(hour: float, start_hour: float) -> float:
    """Hours elapsed since the start of the operational day."""
    return (hour - start_hour) % HOURS_PER_DAY


def hour_to_slot(hour: float, start_hour: float = 0, slot_duration: float = 1.0) -> int:
    """1-based slot containing the given clock hour."""
    return int(math.floor(slot_offset(hour, start_hour) / slot_duration)) + 1


def slot_to_hour(slot: int, start_hour: float = 0, slot_duration: float = 1.0) -> float:
    """Clock hour at which the 1-based slot starts."""
    return (start_hour + (slot - 1) * slot_duration) % HOURS_PER_DAY


def clock_hours(horizon: int, start_hour: float = 0, slot_duration: float = 1.0) -> np.ndarray:
    return np.array(
        [slot_to_hour(t, start_hour, slot_duration) for t in range(1, horizon + 1)]
    )


def circular_hour_distance(a, b):
    diff = np.abs(np.asarray(a, dtype=float) - b) % HOURS_PER_DAY
    return np.minimum(diff, HOURS_PER_DAY - diff)


def band_label(target: float, width: float = BAND_WIDTH) -> str:
    """
    Label of the error band a target falls in, e.g. 0.30 -> "30-35%".
    """
    low = math.floor(round(target / width, 9)) * width
    return f"{round(low * 100):d}-{round((low + width) * 100):d}%"


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), allow_nan=False)


def stable_hash(value: Any, length: int = 12) -> str:
    """Short sha256 digest of a JSON-serializable value."""
    digest = hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()
    return digest[:length]


def configure_logging(verbosity: int = 0):
    """
    Install a stderr handler on the root logger.

    verbosity > 0 shows DEBUG, verbosity < 0 shows WARNING and above.
    """
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
