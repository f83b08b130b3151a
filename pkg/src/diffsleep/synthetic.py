"""Synthetic polysomnography and two-view feature generators for testing.

Recordings carry stage-dependent rhythms (alpha in wake, theta in REM/N1,
spindles in N2, delta in N3) on two EEG-like channels plus coloured noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .edf import EPOCH_SECONDS, format_sidecar, make_recording, write_edf
from .stages import SleepStage

CHANNELS = ("EEG Fpz-Cz", "EEG Pz-Oz")

# (frequency Hz, amplitude uV) per stage and channel
_RHYTHMS = {
    SleepStage.AWAKE: ([(10.0, 20.0), (21.0, 8.0)], [(10.0, 30.0), (19.0, 5.0)]),
    SleepStage.REM: ([(6.5, 16.0), (27.0, 6.0)], [(6.5, 12.0), (25.0, 4.0)]),
    SleepStage.N1: ([(4.3, 20.0), (8.5, 6.0)], [(4.3, 14.0), (8.5, 8.0)]),
    SleepStage.N2: ([(2.5, 12.0)], [(2.5, 8.0)]),
    SleepStage.N3: ([(1.0, 60.0), (1.8, 30.0)], [(1.0, 40.0), (1.8, 20.0)]),
}
_SPINDLE = (13.0, 35.0)

_LABELS = {
    SleepStage.AWAKE: "Sleep stage W",
    SleepStage.REM: "Sleep stage R",
    SleepStage.N1: "Sleep stage 1",
    SleepStage.N2: "Sleep stage 2",
    SleepStage.N3: "Sleep stage 3",
}


def coloured_noise(n: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    """Unit-variance noise with a 1/f^exponent power spectrum."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / f ** (exponent / 2.0), n)
    return x / x.std()


def stage_segment(stage: int, channel: int, n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    """One slot of signal for ``stage`` on channel 0 or 1."""
    t = np.arange(n) / fs
    x = np.zeros(n)
    for f, a in _RHYTHMS[SleepStage(stage)][channel]:
        f = f * rng.uniform(0.95, 1.05)
        x += a * rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if stage == SleepStage.N2:
        f, a = _SPINDLE
        for centre in rng.uniform(2.0, n / fs - 2.0, size=4):
            env = np.exp(-0.5 * ((t - centre) / 0.35) ** 2)
            x += a * env * np.sin(2 * np.pi * f * t)
    return x


def hypnogram(rng: np.random.Generator, n_cycles: int = 2, wake_slots: int = 6, block: tuple[int, int] = (4, 7)) -> np.ndarray:
    """Stage per 30 s slot: wake, then sleep cycles in blocks, then wake."""
    stages = [SleepStage.AWAKE] * wake_slots
    cycle = [SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.N2, SleepStage.REM, SleepStage.AWAKE]
    for _ in range(n_cycles):
        for s in cycle:
            stages += [s] * int(rng.integers(block[0], block[1] + 1))
    stages += [SleepStage.AWAKE] * wake_slots
    return np.array(stages, dtype=np.uint8)


def synthetic_signals(stages, rng: np.random.Generator, fs: float = 100.0, noise: float = 6.0, gain: float = 1.0):
    """Two channels covering ``len(stages)`` slots."""
    n = int(EPOCH_SECONDS * fs)
    out = []
    for ch in range(2):
        parts = [stage_segment(int(s), ch, n, fs, rng) for s in stages]
        x = np.concatenate(parts) + noise * coloured_noise(n * len(stages), rng)
        out.append(gain * x)
    return out


def stage_annotations(stages) -> list[tuple[float, float, str]]:
    """Run-length encoded hypnogram annotations."""
    out = []
    start = 0
    for i in range(1, len(stages) + 1):
        if i == len(stages) or stages[i] != stages[start]:
            out.append((float(start * EPOCH_SECONDS), float((i - start) * EPOCH_SECONDS), _LABELS[SleepStage(int(stages[start]))]))
            start = i
    return out


def write_dataset(
    root,
    n_subjects: int = 5,
    nights: int = 1,
    seed: int = 0,
    n_cycles: int = 2,
    hypnogram_format: str = "sidecar",
    fs: float = 100.0,
) -> list[Path]:
    """Write a Sleep-EDF-shaped directory of PSG files and hypnograms.

    Files are named ``SC4<ss><n>E0-PSG.edf`` with hypnograms
    ``SC4<ss><n>EC-Hypnogram.{txt,edf}``, so the subject id is ``ss``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = []
    for s in range(n_subjects):
        for night in range(1, nights + 1):
            stages = hypnogram(rng, n_cycles)
            sigs = synthetic_signals(stages, rng, fs, gain=rng.uniform(0.85, 1.15))
            rec = make_recording(dict(zip(CHANNELS, sigs)), sampling_rate=fs)
            stem = f"SC4{s:02d}{night}"
            psg = root / f"{stem}E0-PSG.edf"
            psg.write_bytes(write_edf(rec))
            ann = stage_annotations(stages)
            if hypnogram_format == "edf":
                hyp = make_recording({}, annotations=ann, record_duration=len(stages) * EPOCH_SECONDS)
                (root / f"{stem}EC-Hypnogram.edf").write_bytes(write_edf(hyp))
            else:
                (root / f"{stem}EC-Hypnogram.txt").write_text(format_sidecar(ann))
            written.append(psg)
    return written


def two_view_features(
    n_subjects: int = 8,
    per_class: int = 12,
    n_classes: int = 5,
    latent_noise: float = 0.45,
    nuisance_dim: int = 6,
    nuisance_scale: float = 1.5,
    seed: int = 0,
):
    """Two feature views sharing a class-dependent latent.

    Each view holds a noisy linear image of the common latent plus
    independent nuisance dimensions of its own.

    Returns
    -------
    X, Y : (n, p) arrays
    stages, subjects : (n,) arrays
    """
    rng = np.random.default_rng(seed)
    centres = 1.5 * np.eye(n_classes)
    n = n_subjects * per_class * n_classes
    stages = np.tile(np.repeat(np.arange(n_classes), per_class), n_subjects)
    subjects = np.repeat(np.array([f"S{i:02d}" for i in range(n_subjects)]), per_class * n_classes)
    z = centres[stages] + 0.2 * rng.standard_normal((n, n_classes))
    views = []
    for _ in range(2):
        A = np.linalg.qr(rng.standard_normal((n_classes, n_classes)))[0]
        signal = z @ A + latent_noise * rng.standard_normal((n, n_classes))
        nuisance = nuisance_scale * rng.standard_normal((n, nuisance_dim))
        views.append(np.hstack([signal, nuisance]))
    return views[0], views[1], stages, subjects
