from __future__ import annotations

import enum


class SleepStage(enum.IntEnum):
    """Scored sleep stages in the fixed reporting order.

    ``EXCLUDED`` marks movement/unknown slots before they are dropped; it never
    survives ingestion.
    """

    AWAKE = 0
    REM = 1
    N1 = 2
    N2 = 3
    N3 = 4
    EXCLUDED = 255

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def from_short(cls, name: str) -> "SleepStage":
        key = name.strip().upper()
        for stage, short in _SHORT.items():
            if short.upper() == key or stage.name == key:
                return stage
        raise ValueError(f"unknown stage name {name!r}")


_SHORT = {
    SleepStage.AWAKE: "Awake",
    SleepStage.REM: "REM",
    SleepStage.N1: "N1",
    SleepStage.N2: "N2",
    SleepStage.N3: "N3",
    SleepStage.EXCLUDED: "Excluded",
}

SCORED_STAGES: tuple[SleepStage, ...] = (
    SleepStage.AWAKE,
    SleepStage.REM,
    SleepStage.N1,
    SleepStage.N2,
    SleepStage.N3,
)
N_STAGES = len(SCORED_STAGES)
STAGE_NAMES = [s.short for s in SCORED_STAGES]

# Sleep-EDF hypnogram vocabulary, matched case-insensitively.
_LABELS = {
    "sleep stage w": SleepStage.AWAKE,
    "sleep stage r": SleepStage.REM,
    "sleep stage 1": SleepStage.N1,
    "sleep stage 2": SleepStage.N2,
    "sleep stage 3": SleepStage.N3,
    "sleep stage 4": SleepStage.N3,
    "movement time": SleepStage.EXCLUDED,
    "sleep stage ?": SleepStage.EXCLUDED,
    # short forms used by sidecar files
    "w": SleepStage.AWAKE,
    "wake": SleepStage.AWAKE,
    "awake": SleepStage.AWAKE,
    "r": SleepStage.REM,
    "rem": SleepStage.REM,
    "n1": SleepStage.N1,
    "n2": SleepStage.N2,
    "n3": SleepStage.N3,
    "n4": SleepStage.N3,
    "1": SleepStage.N1,
    "2": SleepStage.N2,
    "3": SleepStage.N3,
    "4": SleepStage.N3,
    "?": SleepStage.EXCLUDED,
    "m": SleepStage.EXCLUDED,
    "movement": SleepStage.EXCLUDED,
    "unknown": SleepStage.EXCLUDED,
}


def stage_from_label(label: str) -> SleepStage | None:
    """Map an annotation string to a stage; ``None`` for non-stage annotations."""
    return _LABELS.get(" ".join(label.strip().lower().split()))
