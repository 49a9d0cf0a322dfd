"""
schedule.py — Per-round learning-rate decay.
"""

from config import LEARNING_RATE, LR_DECAY
from errors import ConfigError


class LearningRateSchedule:
    """``lr_t = base * decay ** t`` for round index ``t`` (0 for the first round)."""

    def __init__(self, base: float = LEARNING_RATE, decay: float = LR_DECAY) -> None:
        if base < 0:
            raise ConfigError(f"lr must be non-negative, got {base}")
        if not 0.0 < decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {decay}")
        self.base = base
        self.decay = decay

    def at(self, round_index: int) -> float:
        return self.base * self.decay ** round_index

    def __repr__(self) -> str:
        return f"LearningRateSchedule(base={self.base}, decay={self.decay})"
