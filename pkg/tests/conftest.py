import numpy as np
import pytest


def _pad(text, width):
    raw = text.encode("ascii")
    assert len(raw) <= width
    return raw + b" " * (width - len(raw))


def hand_edf(channels, n_records, record_duration=1, samples=None, reserved=""):
    """Assemble EDF bytes field by field, independent of the package writer.

    ``channels`` is a list of (label, phys_min, phys_max, dig_min, dig_max, spr);
    ``samples`` maps channel index to a digital int16 array of length n_records * spr.
    """
    ns = len(channels)
    head = b"".join(
        [
            _pad("0", 8),
            _pad("X X X X", 80),
            _pad("Startdate 01-JAN-2000 X X X", 80),
            _pad("01.01.00", 8),
            _pad("00.00.00", 8),
            _pad(str(256 * (ns + 1)), 8),
            _pad(reserved, 44),
            _pad(str(n_records), 8),
            _pad(str(record_duration), 8),
            _pad(str(ns), 4),
        ]
    )
    cols = [
        [_pad(c[0], 16) for c in channels],
        [_pad("", 80) for c in channels],
        [_pad("uV", 8) for c in channels],
        [_pad(str(c[1]), 8) for c in channels],
        [_pad(str(c[2]), 8) for c in channels],
        [_pad(str(c[3]), 8) for c in channels],
        [_pad(str(c[4]), 8) for c in channels],
        [_pad("", 80) for c in channels],
        [_pad(str(c[5]), 8) for c in channels],
        [_pad("", 32) for c in channels],
    ]
    head += b"".join(b"".join(col) for col in cols)
    body = b""
    samples = samples or {}
    for r in range(n_records):
        for i, c in enumerate(channels):
            spr = c[5]
            data = samples.get(i, np.zeros(n_records * spr, dtype="<i2"))
            body += np.asarray(data, dtype="<i2")[r * spr : (r + 1) * spr].tobytes()
    return head + body


@pytest.fixture
def two_channel_edf():
    rng = np.random.default_rng(7)
    chans = [
        ("EEG Fpz-Cz", -200, 200, -2048, 2047, 100),
        ("EEG Pz-Oz", -150, 150, -32768, 32767, 100),
    ]
    n_records = 4
    samples = {
        0: rng.integers(-2048, 2048, size=400).astype("<i2"),
        1: rng.integers(-32768, 32768, size=400).astype("<i2"),
    }
    return hand_edf(chans, n_records, samples=samples), chans, samples


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, verdict in sorted(lines):
            terminalreporter.write_line(f"criterion {n}: {verdict}")
