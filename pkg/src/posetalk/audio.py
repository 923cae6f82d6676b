"""Audio loading and per-video-frame mel-spectrogram chunks.

Every video frame (25 FPS) gets one 16x16 log-mel chunk: 16 mel bins by 16
short-time hops (hop 200 samples, window 800, at 16 kHz that is 0.2 s of
context centered on the frame's timestamp). The signal is zero-padded so
edge frames still get a full window, keeping chunk count == frame count.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly, get_window

from .arrayio import save_array, load_array
from .errors import ValidationError

SAMPLE_RATE = 16000
WINDOW_SIZE = 800
HOP_SIZE = 200
N_MELS = 16
N_HOPS = 16
FPS = 25
LOG_FLOOR = 1e-10
MEL_FMIN = 0.0
MEL_FMAX = 8000.0

SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError("WaveBuffer samples must be 1-D (mono)")
        if self.sample_rate != SAMPLE_RATE:
            raise ValidationError(f"WaveBuffer must be {SAMPLE_RATE} Hz")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("WaveBuffer samples must be finite")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    @property
    def n_frames(self):
        return int(len(self.samples) * FPS // self.sample_rate)


@dataclass
class MelChunk:
    values: np.ndarray  # (N_MELS, N_HOPS)
    frame_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_MELS, N_HOPS):
            raise ValidationError(f"MelChunk must be {N_MELS}x{N_HOPS}, got {self.values.shape}")
        if self.frame_index < 0:
            raise ValidationError("frame_index must be >= 0")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("MelChunk values must be finite")


def load_audio(path) -> WaveBuffer:
    """Read a mono PCM WAV, normalize to [-1, 1] and resample to 16 kHz."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        sr, data = wavfile.read(path)
    except ValueError as e:
        raise ValidationError(f"{path}: unsupported encoding ({e})") from e
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got {data.ndim} channels")
    if len(data) == 0:
        raise ValidationError(f"{path}: zero-length audio")
    if np.issubdtype(data.dtype, np.integer):
        scale = float(max(abs(np.iinfo(data.dtype).min), np.iinfo(data.dtype).max))
        samples = data.astype(np.float64) / scale
    else:
        samples = data.astype(np.float64)
    if sr != SAMPLE_RATE:
        g = np.gcd(SAMPLE_RATE, int(sr))
        samples = resample_poly(samples, SAMPLE_RATE // g, int(sr) // g)
    samples = np.clip(samples, -1.0, 1.0)
    return WaveBuffer(samples=samples, sample_rate=SAMPLE_RATE)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=WINDOW_SIZE, sr=SAMPLE_RATE,
                   fmin=MEL_FMIN, fmax=MEL_FMAX):
    """Triangular mel filters, peak 1, over the rfft bin frequencies."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - freqs) / max(hi - ctr, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK = None
_HANN = None


def _mel_machinery():
    global _FILTERBANK, _HANN
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
        _HANN = get_window("hann", WINDOW_SIZE, fftbins=True)
    return _FILTERBANK, _HANN


def mel_chunk(wave: WaveBuffer, frame_index: int, fps: int = FPS) -> MelChunk:
    """Log-mel grid for one frame: 16 hops of 200 centered on t = idx/fps."""
    if frame_index < 0:
        raise ValidationError("frame_index must be >= 0")
    fb, window = _mel_machinery()
    center = frame_index * (SAMPLE_RATE // fps)
    # hop i window center sits at center + (i - (N_HOPS-1)/2) * HOP_SIZE
    first_start = center - ((N_HOPS - 1) * HOP_SIZE) // 2 - WINDOW_SIZE // 2
    last_end = first_start + (N_HOPS - 1) * HOP_SIZE + WINDOW_SIZE
    pad_left = max(0, -first_start)
    pad_right = max(0, last_end - len(wave.samples))
    x = np.pad(wave.samples, (pad_left, pad_right))
    grid = np.empty((N_MELS, N_HOPS))
    for i in range(N_HOPS):
        start = first_start + i * HOP_SIZE + pad_left
        seg = x[start:start + WINDOW_SIZE] * window
        power = np.abs(np.fft.rfft(seg)) ** 2
        grid[:, i] = np.log(np.maximum(fb @ power, LOG_FLOOR))
    return MelChunk(values=grid, frame_index=frame_index)


def chunks_for_video(wave: WaveBuffer, fps: int = FPS):
    """One chunk per video frame: floor(duration * fps) chunks."""
    if len(wave.samples) == 0:
        raise ValidationError("empty wave")
    n = int(len(wave.samples) * fps // wave.sample_rate)
    return [mel_chunk(wave, t, fps) for t in range(n)]


def chunk_stack(chunks):
    return np.stack([c.values for c in chunks], axis=0)


def export_chunks(wave: WaveBuffer, out_path: str, fps: int = FPS):
    """Write all chunks of one utterance to an array container + sidecar."""
    chunks = chunks_for_video(wave, fps)
    return save_array(out_path, chunk_stack(chunks),
                      meta={"kind": "mel_chunks", "fps": fps,
                            "sample_rate": wave.sample_rate})


def load_chunks(path):
    arr = load_array(path)
    return [MelChunk(values=arr[t], frame_index=t) for t in range(arr.shape[0])]
