"""Reader for PhysioNet WFDB records (.hea text, format-212 .dat, MIT .atr).

Only what the MIT-BIH, INCART and European ST-T databases need is
supported: single-segment records whose signals are all stored in format
212. Samples stay as raw ADC integers; :meth:`EcgRecord.millivolts` applies
gain and baseline on request.
"""
from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (MalformedAnnotation, MalformedHeader, RecordIOError,
                     TruncatedSignal, UnsupportedFormat)

log = logging.getLogger(__name__)

UNKNOWN_AGE = -1

# MIT annotation codes (annot.c / ecgcodes.h) that denote beats.
BEAT_CODES = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 25: "B", 34: "e", 35: "n", 38: "f",
    41: "r",
}
SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


@dataclass
class SignalSpec:
    format_code: int
    gain: float = 200.0
    baseline: int = 0
    description: str = ""
    file_name: str = ""
    adc_resolution: int = 12
    adc_zero: int = 0
    initial_value: int | None = None
    checksum: int | None = None
    units: str = "mV"


@dataclass
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_frequency: float
    num_samples: int
    signals: list = field(default_factory=list)
    comments: list = field(default_factory=list)


@dataclass
class Annotation:
    sample_index: int
    symbol: str
    channel: int = 0


@dataclass
class PatientMeta:
    age: int = UNKNOWN_AGE
    sex: str = "unknown"

    @property
    def age_known(self):
        return self.age != UNKNOWN_AGE


@dataclass
class EcgRecord:
    header: RecordHeader
    samples: np.ndarray
    annotations: list
    meta: PatientMeta

    @property
    def name(self):
        return self.header.record_name

    def millivolts(self, channel=0):
        spec = self.header.signals[channel]
        if spec.gain == 0:
            raise ValueError("gain is zero; cannot convert to millivolts")
        return (self.samples[:, channel].astype(np.float64) - spec.baseline) / spec.gain


# ---------------------------------------------------------------------------
# header

_GAIN_RE = re.compile(r"^([-+]?[0-9.eE+-]+?)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


def _strip_comment(line):
    return line[1:].strip() if line.startswith("#") else line.strip()


def _parse_int(tok, what):
    try:
        return int(tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {tok!r}") from None


def _parse_format(tok):
    m = re.match(r"^(\d+)", tok)
    if not m:
        raise MalformedHeader(f"bad signal format field {tok!r}")
    code = int(m.group(1))
    if code != 212:
        raise UnsupportedFormat(f"signal format {code} is not supported (only 212)")
    return code


def _parse_signal_line(line):
    toks = line.split()
    if len(toks) < 2:
        raise MalformedHeader(f"signal line needs at least file name and format: {line!r}")
    spec = SignalSpec(format_code=_parse_format(toks[1]), file_name=toks[0])
    baseline_given = None
    if len(toks) > 2:
        m = _GAIN_RE.match(toks[2])
        if not m:
            raise MalformedHeader(f"bad gain field {toks[2]!r}")
        try:
            gain = float(m.group(1))
        except ValueError:
            raise MalformedHeader(f"bad gain field {toks[2]!r}") from None
        spec.gain = gain if gain != 0 else 200.0
        if m.group(2) is not None:
            baseline_given = int(m.group(2))
        if m.group(3):
            spec.units = m.group(3)
    if len(toks) > 3:
        spec.adc_resolution = _parse_int(toks[3], "ADC resolution")
    if len(toks) > 4:
        spec.adc_zero = _parse_int(toks[4], "ADC zero")
    if len(toks) > 5:
        spec.initial_value = _parse_int(toks[5], "initial value")
    if len(toks) > 6:
        spec.checksum = _parse_int(toks[6], "checksum")
    if len(toks) > 8:
        spec.description = " ".join(toks[8:])
    # WFDB: an absent baseline defaults to the ADC zero
    spec.baseline = spec.adc_zero if baseline_given is None else baseline_given
    return spec


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a ``.hea`` file.

    Comment lines (``#``) are kept verbatim and in order. The record line
    must carry name, signal count, sampling frequency and sample count; a
    sample count of 0 means "unknown".
    """
    lines = [ln.rstrip("\r") for ln in text.splitlines()]
    comments = [ln for ln in lines if ln.lstrip().startswith("#")]
    body = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise MalformedHeader("header has no record line")
    toks = body[0].split()
    if len(toks) < 4:
        raise MalformedHeader(f"record line needs name, signals, frequency and length: {body[0]!r}")
    name = toks[0]
    if "/" in name:
        raise MalformedHeader("multi-segment records are not supported")
    nsig = _parse_int(toks[1], "signal count")
    fs_tok = toks[2].split("/")[0].split("(")[0]
    try:
        fs = float(fs_tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric sampling frequency {toks[2]!r}") from None
    nsamp = _parse_int(toks[3], "sample count")
    if nsig < 1:
        raise MalformedHeader("record must declare at least one signal")
    if fs <= 0:
        raise MalformedHeader("sampling frequency must be positive")
    if nsamp < 0:
        raise MalformedHeader("sample count must be non-negative")
    signals = [_parse_signal_line(ln) for ln in body[1:1 + nsig]]
    if len(signals) != nsig:
        raise MalformedHeader(f"header declares {nsig} signals but has {len(signals)} signal lines")
    return RecordHeader(name, nsig, fs, nsamp, signals, comments)


# ---------------------------------------------------------------------------
# format 212

def decode_format212(data: bytes, num_samples: int, num_signals: int) -> np.ndarray:
    """Unpack 12-bit two's-complement pairs into a ``[num_samples, num_signals]`` matrix.

    Byte triplet ``(b0, b1, b2)`` holds ``s1 = b0 | (b1 & 0x0F) << 8`` and
    ``s2 = b2 | (b1 & 0xF0) << 4``. Samples are channel-interleaved.
    """
    total = int(num_samples) * int(num_signals)
    needed = 3 * (total // 2) + (2 if total % 2 else 0)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size < needed:
        raise TruncatedSignal(f"need {needed} bytes for {total} samples, stream has {buf.size}")
    ntrip = -(-total // 2)
    if buf.size < 3 * ntrip:
        # odd sample count: the final triplet may be stored as two bytes
        buf = np.concatenate([buf, np.zeros(3 * ntrip - buf.size, dtype=np.uint8)])
    trip = buf[:3 * ntrip].reshape(-1, 3).astype(np.int32)
    out = np.empty((ntrip, 2), dtype=np.int32)
    out[:, 0] = trip[:, 0] | ((trip[:, 1] & 0x0F) << 8)
    out[:, 1] = trip[:, 2] | ((trip[:, 1] & 0xF0) << 4)
    out[out > 2047] -= 4096
    flat = out.reshape(-1)[:total]
    return flat.reshape(int(num_samples), int(num_signals)).astype(np.int16)


def encode_format212(samples) -> bytes:
    """Inverse of :func:`decode_format212` (accepts a matrix or flat sequence)."""
    flat = np.asarray(samples, dtype=np.int64).reshape(-1)
    if flat.size and (flat.min() < -2048 or flat.max() > 2047):
        raise ValueError("format 212 holds values in [-2048, 2047]")
    if flat.size % 2:
        flat = np.concatenate([flat, [0]])
    u = (flat & 0xFFF).reshape(-1, 2)
    trip = np.empty((u.shape[0], 3), dtype=np.uint8)
    trip[:, 0] = u[:, 0] & 0xFF
    trip[:, 1] = ((u[:, 0] >> 8) & 0x0F) | (((u[:, 1] >> 8) & 0x0F) << 4)
    trip[:, 2] = u[:, 1] & 0xFF
    return trip.tobytes()


# ---------------------------------------------------------------------------
# annotations

def parse_annotations(data: bytes) -> list:
    """Decode an MIT-format annotation stream, keeping beat annotations only.

    Each 16-bit little-endian word carries a 6-bit code and a 10-bit time
    delta. SKIP words are followed by a 32-bit interval (high half first),
    AUX words by a byte payload padded to even length. NUM/SUB/CHN modify
    the preceding annotation; channel numbers are sticky as in the WFDB
    library. A zero word terminates the stream.
    """
    buf = bytes(data)
    if len(buf) % 2:
        raise MalformedAnnotation("annotation stream has an odd number of bytes")
    words = np.frombuffer(buf, dtype="<u2")
    out = []
    t = 0
    chan = 0
    pending = None
    i = 0
    n = words.size
    while i < n:
        w = int(words[i])
        code, delta = w >> 10, w & 0x3FF
        if code == 0 and delta == 0:
            if pending is not None:
                out.append(pending)
            return out
        if code == SKIP:
            if i + 2 >= n:
                raise MalformedAnnotation("SKIP word without its 4-byte interval")
            hi, lo = int(words[i + 1]), int(words[i + 2])
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            t += interval
            i += 3
            continue
        if code == AUX:
            nbytes = delta
            i += 1 + (nbytes + 1) // 2
            if i > n:
                raise MalformedAnnotation("AUX payload runs past the end of the stream")
            continue
        if code == CHN:
            chan = delta
            if pending is not None:
                pending.channel = chan
            i += 1
            continue
        if code in (NUM, SUB):
            i += 1
            continue
        # an annotation proper
        if pending is not None:
            out.append(pending)
            pending = None
        t += delta
        symbol = BEAT_CODES.get(code)
        if symbol is not None:
            pending = Annotation(t, symbol, chan)
        i += 1
    raise MalformedAnnotation("annotation stream has no terminator")


def encode_annotations(annotations) -> bytes:
    """Write beat annotations as an MIT stream (used to build test fixtures)."""
    codes = {v: k for k, v in BEAT_CODES.items()}
    words = []
    t = 0
    chan = 0
    for ann in annotations:
        delta = int(ann.sample_index) - t
        if delta < 0:
            raise ValueError("annotations must be sorted by sample index")
        if delta > 1023:
            words += [SKIP << 10, (delta >> 16) & 0xFFFF, delta & 0xFFFF]
            delta = 0
        words.append((codes[ann.symbol] << 10) | delta)
        if ann.channel != chan:
            chan = ann.channel
            words.append((CHN << 10) | chan)
        t = int(ann.sample_index)
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


# ---------------------------------------------------------------------------
# patient metadata

def _age(tok):
    try:
        age = int(tok)
    except ValueError:
        return UNKNOWN_AGE
    return age if 0 <= age <= 130 else UNKNOWN_AGE


def _sex(tok):
    t = tok.strip().upper()
    if t in ("M", "MALE"):
        return "male"
    if t in ("F", "FEMALE"):
        return "female"
    return "unknown"


def parse_patient_meta(comments) -> PatientMeta:
    """Age and sex from header comments; never raises.

    Handles the MIT-BIH layout (``# 69 M 1085 1629 x1``) and the tagged
    layout used by INCART/EDB (``# <age>: 65  <sex>: F``).
    """
    try:
        lines = [_strip_comment(str(c)) for c in (comments or [])]
        lines = [ln for ln in lines if ln]
        if not lines:
            return PatientMeta()
        joined = " ".join(lines)
        tagged_age = re.search(r"<age>:\s*(\S+)", joined, re.IGNORECASE)
        tagged_sex = re.search(r"<sex>:\s*(\S+)", joined, re.IGNORECASE)
        if tagged_age or tagged_sex:
            return PatientMeta(_age(tagged_age.group(1)) if tagged_age else UNKNOWN_AGE,
                               _sex(tagged_sex.group(1)) if tagged_sex else "unknown")
        toks = lines[0].split()
        age = _age(toks[0]) if toks else UNKNOWN_AGE
        sex = _sex(toks[1]) if len(toks) > 1 else "unknown"
        return PatientMeta(age, sex)
    except Exception:  # total by contract
        return PatientMeta()


# ---------------------------------------------------------------------------
# record

def _read(path, mode="rb"):
    try:
        with open(path, mode) as fh:
            return fh.read()
    except OSError as exc:
        raise RecordIOError(f"cannot read {path}: {exc}") from exc


def load_record(path_base, annotator="atr") -> EcgRecord:
    """Load ``<stem>.hea`` + signal file (+ ``<stem>.<annotator>`` if present)."""
    path_base = os.fspath(path_base)
    header = parse_header(_read(path_base + ".hea", "r"))
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise UnsupportedFormat("signals spread over several files are not supported")
    dat_path = os.path.join(os.path.dirname(path_base), files.pop())
    raw = _read(dat_path)
    nsamp = header.num_samples
    if nsamp == 0:
        nsamp = (len(raw) * 2 // 3) // header.num_signals
        header.num_samples = nsamp
    samples = decode_format212(raw, nsamp, header.num_signals)
    ann_path = f"{path_base}.{annotator}"
    annotations = []
    if os.path.exists(ann_path):
        annotations = parse_annotations(_read(ann_path))
        kept = [a for a in annotations if 0 <= a.sample_index < nsamp]
        if len(kept) != len(annotations):
            log.warning("%s: dropped %d annotations outside the signal", header.record_name,
                        len(annotations) - len(kept))
        annotations = kept
    return EcgRecord(header, samples, annotations, parse_patient_meta(header.comments))


def write_record(path_base, samples, fs, annotations=(), comments=(), gain=200.0, baseline=1024,
                 descriptions=None):
    """Write a format-212 record. Test-fixture helper, not a publication writer."""
    samples = np.asarray(samples)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, nsig = samples.shape
    name = os.path.basename(os.fspath(path_base))
    descriptions = descriptions or [f"sig{i}" for i in range(nsig)]
    lines = [f"{name} {nsig} {fs:g} {n}"]
    for i in range(nsig):
        lines.append(f"{name}.dat 212 {gain:g}({baseline}) 12 {baseline} {int(samples[0, i])} 0 0 {descriptions[i]}")
    lines += [c if c.startswith("#") else f"# {c}" for c in comments]
    with open(f"{path_base}.hea", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{path_base}.dat", "wb") as fh:
        fh.write(encode_format212(samples))
    if annotations:
        with open(f"{path_base}.atr", "wb") as fh:
            fh.write(encode_annotations(annotations))


def list_records(data_dir):
    """Record stems (sorted) for every ``.hea`` file in ``data_dir``."""
    names = sorted(f[:-4] for f in os.listdir(data_dir) if f.endswith(".hea"))
    return [os.path.join(data_dir, n) for n in names]
