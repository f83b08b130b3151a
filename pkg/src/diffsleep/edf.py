"""EDF/EDF+ reading and writing, hypnogram parsing and epoch extraction.

Only the 16-bit EDF variant is handled. Samples are kept in physical units;
the raw header text of every numeric field is remembered so that a parsed
file can be written back byte for byte.
"""

from __future__ import annotations

import datetime as _dt
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadCalibration,
    MalformedHeader,
    MissingChannel,
    NoSleepFound,
    NonMultipleDuration,
    OverlappingAnnotations,
    TruncatedData,
    UnrepresentableValue,
    UnsupportedSamplingRate,
    WindowOutOfBounds,
)
from .stages import SleepStage, stage_from_label

EPOCH_SECONDS = 30
CONTEXT_SECONDS = 60
WINDOW_SECONDS = CONTEXT_SECONDS + EPOCH_SECONDS
LEADING_DROP = 3
TRAILING_DROP = 1
ANNOTATION_LABEL = "EDF Annotations"

_HEADER_FIELDS = (  # name, width
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)
_NUMERIC_SIGNAL_FIELDS = (
    "physical_min",
    "physical_max",
    "digital_min",
    "digital_max",
    "samples_per_record",
)


@dataclass(frozen=True)
class ChannelMeta:
    label: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    transducer: str = ""
    prefilter: str = ""
    reserved: str = ""
    # original header text for numeric fields, used only by write_edf
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    @property
    def is_annotation(self) -> bool:
        return self.label.strip() == ANNOTATION_LABEL

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return self.physical_min + (digital.astype(np.float64) - self.digital_min) * self.gain

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        physical = np.asarray(physical, dtype=np.float64)
        span = self.physical_max - self.physical_min
        tol = 1e-9 * max(abs(span), 1.0)
        if physical.size and (
            np.nanmin(physical) < self.physical_min - tol
            or np.nanmax(physical) > self.physical_max + tol
            or not np.all(np.isfinite(physical))
        ):
            raise UnrepresentableValue(
                f"channel {self.label!r}: samples outside "
                f"[{self.physical_min}, {self.physical_max}]"
            )
        digital = np.rint((physical - self.physical_min) / self.gain + self.digital_min)
        return np.clip(digital, self.digital_min, self.digital_max).astype("<i2")


@dataclass(frozen=True)
class EdfRecording:
    """A parsed EDF file with calibrated signals.

    ``signals[i]`` holds ``n_records * channels[i].samples_per_record`` samples
    in physical units (normally microvolts for EEG).
    """

    patient_id: str
    recording_info: str
    start_datetime: _dt.datetime
    record_duration: float
    n_records: int
    channels: tuple[ChannelMeta, ...]
    signals: tuple[np.ndarray, ...]
    reserved: str = ""
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.channels) != len(self.signals):
            raise MalformedHeader("channel metadata and signal count differ")
        for meta, sig in zip(self.channels, self.signals):
            _check_calibration(meta)
            expected = self.n_records * meta.samples_per_record
            if len(sig) != expected:
                raise MalformedHeader(
                    f"channel {meta.label!r} has {len(sig)} samples, expected {expected}"
                )

    @property
    def labels(self) -> list[str]:
        return [c.label.strip() for c in self.channels]

    @property
    def duration(self) -> float:
        return self.n_records * self.record_duration

    def sampling_rate(self, channel: int | str) -> float:
        meta = self.channels[self.channel_index(channel)]
        return meta.samples_per_record / self.record_duration

    def channel_index(self, channel: int | str) -> int:
        if isinstance(channel, int):
            return channel
        want = channel.strip().lower()
        for i, label in enumerate(self.labels):
            if label.lower() == want:
                return i
        raise MissingChannel(f"channel {channel!r} not in {self.labels}")

    def signal(self, channel: int | str) -> np.ndarray:
        return self.signals[self.channel_index(channel)]

    def annotations(self) -> list[tuple[float, float, str]]:
        """All (onset, duration, text) entries from EDF+ annotation channels."""
        out: list[tuple[float, float, str]] = []
        for meta, sig in zip(self.channels, self.signals):
            if not meta.is_annotation:
                continue
            blob = meta.to_digital(sig).reshape(self.n_records, -1)
            for record in blob:
                out.extend(parse_tal(record.tobytes()))
        return out

    def __eq__(self, other):
        if not isinstance(other, EdfRecording):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.recording_info == other.recording_info
            and self.start_datetime == other.start_datetime
            and self.record_duration == other.record_duration
            and self.n_records == other.n_records
            and self.channels == other.channels
            and self.reserved == other.reserved
            and all(np.array_equal(a, b) for a, b in zip(self.signals, other.signals))
        )

    __hash__ = None


def _check_calibration(meta: ChannelMeta) -> None:
    if not meta.physical_min < meta.physical_max:
        raise BadCalibration(f"channel {meta.label!r}: physical_min >= physical_max")
    if not meta.digital_min < meta.digital_max:
        raise BadCalibration(f"channel {meta.label!r}: digital_min >= digital_max")
    if meta.samples_per_record < 1:
        raise MalformedHeader(f"channel {meta.label!r}: samples_per_record < 1")


# ---------------------------------------------------------------- parsing


def _split_fields(block: bytes, spec) -> dict[str, str]:
    out, pos = {}, 0
    for name, width in spec:
        out[name] = block[pos : pos + width].decode("latin-1")
        pos += width
    return out


def _number(text: str, name: str, kind=float):
    try:
        value = float(text.strip())
    except ValueError:
        raise MalformedHeader(f"field {name} is not numeric: {text!r}") from None
    if kind is int:
        if value != int(value):
            raise MalformedHeader(f"field {name} is not an integer: {text!r}")
        return int(value)
    return value


def _parse_start(date: str, time: str) -> _dt.datetime:
    try:
        d, m, y = (int(p) for p in date.strip().split("."))
        hh, mm, ss = (int(p) for p in time.strip().split("."))
    except ValueError:
        raise MalformedHeader(f"bad start date/time {date!r} {time!r}") from None
    year = 1900 + y if y >= 85 else 2000 + y
    try:
        return _dt.datetime(year, m, d, hh, mm, ss)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None


def parse_edf(raw: bytes) -> EdfRecording:
    """Parse an in-memory EDF or EDF+ file."""
    raw = bytes(raw)
    if len(raw) < 256:
        raise TruncatedData(f"file is {len(raw)} bytes, shorter than the 256-byte header")
    head = _split_fields(raw[:256], _HEADER_FIELDS)
    if head["version"].strip() != "0":
        raise MalformedHeader(f"unsupported version field {head['version']!r}")
    n_signals = _number(head["n_signals"], "n_signals", int)
    header_bytes = _number(head["header_bytes"], "header_bytes", int)
    n_records = _number(head["n_records"], "n_records", int)
    record_duration = _number(head["record_duration"], "record_duration")
    if n_signals < 1:
        raise MalformedHeader("file declares no signals")
    if header_bytes != 256 * (n_signals + 1):
        raise MalformedHeader(
            f"header size {header_bytes} inconsistent with {n_signals} signals"
        )
    if len(raw) < header_bytes:
        raise TruncatedData("signal header is incomplete")
    if record_duration <= 0:
        raise MalformedHeader("record duration must be positive")

    columns: dict[str, list[str]] = {name: [] for name, _ in _SIGNAL_FIELDS}
    pos = 256
    for name, width in _SIGNAL_FIELDS:
        for i in range(n_signals):
            columns[name].append(raw[pos : pos + width].decode("latin-1"))
            pos += width

    channels = []
    for i in range(n_signals):
        text = {name: columns[name][i] for name in columns}
        channels.append(
            ChannelMeta(
                label=text["label"].strip(),
                physical_dimension=text["physical_dimension"].strip(),
                physical_min=_number(text["physical_min"], "physical_min"),
                physical_max=_number(text["physical_max"], "physical_max"),
                digital_min=_number(text["digital_min"], "digital_min", int),
                digital_max=_number(text["digital_max"], "digital_max", int),
                samples_per_record=_number(text["samples_per_record"], "samples_per_record", int),
                transducer=text["transducer"].strip(),
                prefilter=text["prefilter"].strip(),
                reserved=text["reserved"].strip(),
                raw={k: text[k] for k in _NUMERIC_SIGNAL_FIELDS + ("label",)},
            )
        )
    for meta in channels:
        _check_calibration(meta)

    record_samples = sum(c.samples_per_record for c in channels)
    available = (len(raw) - header_bytes) // (2 * record_samples)
    if n_records == -1:
        n_records = available
    if n_records < 0:
        raise MalformedHeader(f"invalid record count {n_records}")
    needed = header_bytes + 2 * record_samples * n_records
    if len(raw) < needed:
        raise TruncatedData(
            f"header declares {n_records} records ({needed} bytes) but file has {len(raw)} bytes"
        )

    data = np.frombuffer(raw, dtype="<i2", count=n_records * record_samples, offset=header_bytes)
    data = data.reshape(n_records, record_samples)
    signals = []
    offset = 0
    for meta in channels:
        block = data[:, offset : offset + meta.samples_per_record].reshape(-1)
        signals.append(meta.to_physical(block))
        offset += meta.samples_per_record

    return EdfRecording(
        patient_id=head["patient"].strip(),
        recording_info=head["recording"].strip(),
        start_datetime=_parse_start(head["startdate"], head["starttime"]),
        record_duration=record_duration,
        n_records=n_records,
        channels=tuple(channels),
        signals=tuple(signals),
        reserved=head["reserved"].strip(),
        raw=head,
    )


def read_edf(path: str | Path) -> EdfRecording:
    return parse_edf(Path(path).read_bytes())


# ---------------------------------------------------------------- writing


def _format_number(value: float, width: int = 8) -> str:
    if float(value).is_integer() and abs(value) < 10 ** (width - 1):
        return str(int(value))
    for digits in range(width, 0, -1):
        text = f"{value:.{digits}g}"
        if len(text) <= width:
            return text
    raise UnrepresentableValue(f"cannot fit {value} into {width} characters")


def _field(text: str, width: int, name: str) -> bytes:
    data = text.encode("latin-1")
    if len(data) > width:
        raise UnrepresentableValue(f"field {name} longer than {width} bytes: {text!r}")
    return data.ljust(width, b" ")


def _numeric_text(value, raw: dict, name: str, kind=float) -> str:
    """Prefer the original header text when it still encodes ``value``."""
    text = raw.get(name)
    if text is not None:
        try:
            if kind(float(text.strip())) == value:
                return text
        except ValueError:
            pass
    return _format_number(value)


def write_edf(recording: EdfRecording) -> bytes:
    """Serialise a recording; the inverse of :func:`parse_edf`."""
    n_signals = len(recording.channels)
    raw = recording.raw
    start = recording.start_datetime
    head = {
        "version": raw.get("version", "0"),
        "patient": recording.patient_id,
        "recording": recording.recording_info,
        "startdate": start.strftime("%d.%m.") + f"{start.year % 100:02d}",
        "starttime": start.strftime("%H.%M.%S"),
        "header_bytes": str(256 * (n_signals + 1)),
        "reserved": recording.reserved,
        "n_records": _numeric_text(recording.n_records, raw, "n_records", int),
        "record_duration": _numeric_text(recording.record_duration, raw, "record_duration"),
        "n_signals": str(n_signals),
    }
    for key in ("patient", "recording", "reserved", "startdate", "starttime"):
        if key in raw and raw[key].strip() == head[key]:
            head[key] = raw[key]
    out = bytearray()
    for name, width in _HEADER_FIELDS:
        out += _field(head[name], width, name)

    for name, width in _SIGNAL_FIELDS:
        for meta in recording.channels:
            if name in _NUMERIC_SIGNAL_FIELDS:
                kind = float if name.startswith("physical") else int
                text = _numeric_text(getattr(meta, name), meta.raw, name, kind)
            elif name == "label":
                text = meta.raw.get("label", meta.label)
                if text.strip() != meta.label:
                    text = meta.label
            else:
                text = getattr(meta, name)
            out += _field(text, width, name)

    blocks = [
        meta.to_digital(sig).reshape(recording.n_records, meta.samples_per_record)
        for meta, sig in zip(recording.channels, recording.signals)
    ]
    if recording.n_records:
        out += np.concatenate(blocks, axis=1).astype("<i2").tobytes()
    return bytes(out)


def make_recording(
    signals: dict[str, np.ndarray],
    *,
    sampling_rate: float = 100.0,
    record_duration: float = 30.0,
    physical_range: tuple[float, float] = (-500.0, 500.0),
    patient_id: str = "X X X X",
    recording_info: str = "Startdate X X X X",
    start: _dt.datetime = _dt.datetime(2000, 1, 1),
    annotations: Sequence[tuple[float, float, str]] | None = None,
    physical_dimension: str = "uV",
) -> EdfRecording:
    """Build a recording from plain arrays, optionally with an EDF+ annotation channel.

    Every signal must hold a whole number of records. Values are clipped to
    ``physical_range`` and quantised to 16 bits, as a real recorder would.
    """
    spr = int(round(sampling_rate * record_duration))
    lengths = {len(v) for v in signals.values()}
    if len(lengths) > 1:
        raise ValueError("signals must share one length")
    n = lengths.pop() if lengths else 0
    if n % spr:
        raise ValueError(f"signal length {n} is not a multiple of {spr} samples")
    # an annotation-only file (hypnogram) is one record long
    n_records = n // spr if signals else 1
    lo, hi = physical_range
    channels, sigs = [], []
    for label, values in signals.items():
        meta = ChannelMeta(label, physical_dimension, lo, hi, -32768, 32767, spr)
        values = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
        sigs.append(meta.to_physical(meta.to_digital(values).astype(np.int64)))
        channels.append(meta)
    reserved = ""
    if annotations is not None:
        reserved = "EDF+C"
        per_record = _tal_records(annotations, n_records, record_duration)
        width = max(len(b) for b in per_record) if per_record else 2
        width += width % 2
        words = width // 2
        meta = ChannelMeta(ANNOTATION_LABEL, "", -1.0, 1.0, -32768, 32767, words)
        buf = np.zeros((n_records, width), dtype=np.uint8)
        for i, blob in enumerate(per_record):
            buf[i, : len(blob)] = np.frombuffer(blob, dtype=np.uint8)
        digital = buf.view("<i2").reshape(-1)
        sigs.append(meta.to_physical(digital))
        channels.append(meta)
    return EdfRecording(
        patient_id=patient_id,
        recording_info=recording_info,
        start_datetime=start,
        record_duration=record_duration,
        n_records=n_records,
        channels=tuple(channels),
        signals=tuple(sigs),
        reserved=reserved,
    )


# ---------------------------------------------------------------- EDF+ TAL


_TAL = re.compile(rb"([+-][0-9.]+)(?:\x15([0-9.]*))?\x14((?:[^\x00]*?\x14)*)\x00")


def parse_tal(blob: bytes) -> list[tuple[float, float, str]]:
    """Decode the time-stamped annotation lists of one data record.

    Time-keeping entries (no annotation text) are dropped.
    """
    out = []
    for onset, duration, texts in _TAL.findall(blob):
        dur = float(duration) if duration else 0.0
        for text in texts.split(b"\x14"):
            if text:
                out.append((float(onset), dur, text.decode("utf-8")))
    return out


def _fmt_seconds(x: float) -> str:
    return _format_number(x, 32)


def _tal_records(annotations, n_records: int, record_duration: float) -> list[bytes]:
    records = [bytearray(f"+{_fmt_seconds(i * record_duration)}\x14\x14\x00".encode()) for i in range(n_records)]
    for onset, duration, text in annotations:
        i = min(int(onset // record_duration), max(n_records - 1, 0))
        sign = "+" if onset >= 0 else "-"
        records[i] += (
            f"{sign}{_fmt_seconds(abs(onset))}\x15{_fmt_seconds(duration)}\x14{text}\x14\x00"
        ).encode("utf-8")
    return [bytes(r) for r in records]


# ---------------------------------------------------------------- hypnograms


def _as_multiple(value: float, what: str) -> int:
    slots = value / EPOCH_SECONDS
    if abs(slots - round(slots)) > 1e-6:
        raise NonMultipleDuration(f"{what} {value} s is not a multiple of {EPOCH_SECONDS} s")
    return int(round(slots))


def parse_hypnogram(
    annotations: Iterable[tuple[float, float, str]],
) -> list[tuple[float, float, SleepStage]]:
    """Expand stage annotations into one ``(onset, 30, stage)`` entry per slot.

    N4 becomes N3 and movement/unknown become ``EXCLUDED``. Annotations that
    are not sleep stages (lights off, ...) are ignored.
    """
    out: list[tuple[float, float, SleepStage]] = []
    prev_end = -math.inf
    for onset, duration, label in annotations:
        stage = stage_from_label(label)
        if stage is None:
            continue
        onset = float(onset)
        duration = float(duration)
        if onset < prev_end - 1e-6:
            raise OverlappingAnnotations(
                f"annotation at {onset} s starts before the previous one ends ({prev_end} s)"
            )
        first = _as_multiple(onset, "onset")
        count = _as_multiple(duration, "duration")
        prev_end = onset + duration
        for k in range(count):
            out.append((float((first + k) * EPOCH_SECONDS), float(EPOCH_SECONDS), stage))
    return out


def slot_labels(hypnogram, n_slots: int | None = None) -> np.ndarray:
    """Per-slot stage codes (uint8); unannotated slots are ``EXCLUDED``.

    ``n_slots`` clips the hypnogram to the slots a recording actually covers.
    """
    if n_slots is None:
        n_slots = max((int(round(o / EPOCH_SECONDS)) + 1 for o, _, _ in hypnogram), default=0)
    labels = np.full(n_slots, SleepStage.EXCLUDED, dtype=np.uint8)
    for onset, _, stage in hypnogram:
        k = int(round(onset / EPOCH_SECONDS))
        if 0 <= k < n_slots:
            labels[k] = stage
    return labels


def read_sidecar(text: str) -> list[tuple[float, float, str]]:
    """Parse the ``onset<TAB>duration<TAB>label`` hypnogram text format."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 3:
            raise MalformedHeader(f"sidecar line {lineno}: expected 3 tab-separated fields")
        try:
            out.append((float(parts[0]), float(parts[1]), parts[2]))
        except ValueError:
            raise MalformedHeader(f"sidecar line {lineno}: non-numeric onset/duration") from None
    return out


def format_sidecar(annotations: Iterable[tuple[float, float, str]]) -> str:
    return "".join(f"{_fmt_seconds(o)}\t{_fmt_seconds(d)}\t{label}\n" for o, d, label in annotations)


def load_hypnogram(path: str | Path) -> list[tuple[float, float, str]]:
    """Raw annotations from an EDF+ hypnogram file or a text sidecar."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8].strip() == b"0" and path.suffix.lower() == ".edf":
        return parse_edf(raw).annotations()
    return read_sidecar(raw.decode("utf-8"))


# ---------------------------------------------------------------- epochs


def truncate_wake(stages: Sequence[int], margin_minutes: float | None) -> range:
    """Slot range kept around the sleep period.

    Keeps ``margin_minutes`` of wake (2 slots per minute) before the first and
    after the last sleep slot, clipped to the recording. ``None`` keeps all.
    """
    stages = np.asarray(stages)
    if margin_minutes is None:
        return range(len(stages))
    if margin_minutes < 0:
        raise ValueError("margin must be non-negative")
    sleep = np.flatnonzero((stages != SleepStage.AWAKE) & (stages != SleepStage.EXCLUDED))
    if sleep.size == 0:
        raise NoSleepFound("recording contains no sleep epochs")
    margin = int(round(margin_minutes * 60 / EPOCH_SECONDS))
    start = max(int(sleep[0]) - margin, 0)
    stop = min(int(sleep[-1]) + margin, len(stages) - 1)
    return range(start, stop + 1)


def scored_slots(stages: Sequence[int], retained: range | None = None) -> list[int]:
    """Slots that receive a prediction: retained, minus 3 leading / 1 trailing, minus excluded."""
    if retained is None:
        retained = range(len(stages))
    inner = retained[LEADING_DROP : len(retained) - TRAILING_DROP]
    return [l for l in inner if stages[l] != SleepStage.EXCLUDED]


@dataclass(frozen=True)
class StagedEpoch:
    subject_id: str
    recording_id: str
    epoch_index: int
    epoch_start: float
    stage: SleepStage
    channel_names: tuple[str, ...]
    windows: tuple[np.ndarray, ...]

    def window(self, channel: str | int = 0) -> np.ndarray:
        if isinstance(channel, str):
            channel = self.channel_names.index(channel)
        return self.windows[channel]


def extract_epochs(
    recording: EdfRecording,
    labeled_slots: Sequence[int],
    channel_names: Sequence[str],
    *,
    retained: range | None = None,
    subject_id: str = "",
    recording_id: str = "",
    sampling_rate: float = 100.0,
) -> list[StagedEpoch]:
    """Cut the 90 s context window ``[t - 60, t + 30]`` for every scored slot.

    Windows are views into the recording's arrays, not copies.
    """
    idx = [recording.channel_index(name) for name in channel_names]
    for i in idx:
        rate = recording.sampling_rate(i)
        if abs(rate - sampling_rate) > 1e-9:
            raise UnsupportedSamplingRate(
                f"channel {recording.labels[i]!r} is sampled at {rate} Hz, need {sampling_rate} Hz"
            )
    fs = int(round(sampling_rate))
    width = WINDOW_SECONDS * fs
    epochs = []
    for slot in scored_slots(labeled_slots, retained):
        start = (slot * EPOCH_SECONDS - CONTEXT_SECONDS) * fs
        stop = start + width
        windows = []
        for i in idx:
            sig = recording.signals[i]
            if start < 0 or stop > len(sig):
                raise WindowOutOfBounds(
                    f"slot {slot} needs samples [{start}, {stop}) of {len(sig)}"
                )
            windows.append(sig[start:stop])
        epochs.append(
            StagedEpoch(
                subject_id=subject_id,
                recording_id=recording_id,
                epoch_index=slot,
                epoch_start=float(slot * EPOCH_SECONDS),
                stage=SleepStage(int(labeled_slots[slot])),
                channel_names=tuple(channel_names),
                windows=tuple(windows),
            )
        )
    return epochs


def with_signals(recording: EdfRecording, signals: Sequence[np.ndarray]) -> EdfRecording:
    return replace(recording, signals=tuple(signals))
