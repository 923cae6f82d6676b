"""Deterministic synthetic audio-visual corpus with known latent factors.

Every clip is generated from four independent factors so downstream
disentanglement and lip-sync claims can be checked against exact labels:

  * word     -> a smooth activity curve g_w(t) in [0, 1] shared verbatim by
                the audio pitch contour and the mouth expression channels,
  * speaker  -> base pitch and harmonic amplitude profile of the audio,
                plus fixed face shape (alpha) and coloring,
  * clip     -> head pose trajectory (smooth bounded yaw/pitch wander),
  * corpus seed -> everything above, reproducible bit for bit.
"""

import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image, ImageDraw
from scipy.io import wavfile

from . import face3d
from .arrayio import (save_array, save_arrays, load_arrays, save_landmarks_csv,
                      append_jsonl, read_jsonl, sha256_file)
from .audio import SAMPLE_RATE, FPS, WaveBuffer
from .errors import ValidationError

PITCH_SPAN = 120.0     # Hz swept by the word curve on top of the speaker base
N_HARMONICS = 8
SILENCE_MARGIN = 0.08  # seconds of rest at each clip end
RAMP = 0.10            # attack/release seconds
N_MOUTH = 8            # leading expression channels driven by the word curve
NOISE_AMP = 0.03       # amplitude of the undriven expression channels
MANIFEST_VERSION = 1


@dataclass
class CorpusSpec:
    n_identities: int = 8
    n_words: int = 10
    clips_per_pair: int = 2
    seconds_per_clip: float = 1.0
    seed: int = 0
    image_size: int = 64
    max_clips: int = 4096

    def validate(self):
        if self.n_identities < 2:
            raise ValidationError("need at least 2 identities")
        if self.n_words < 2:
            raise ValidationError("need at least 2 words")
        if self.clips_per_pair < 1:
            raise ValidationError("clips_per_pair must be >= 1")
        if not (0.2 <= self.seconds_per_clip <= 10.0):
            raise ValidationError("seconds_per_clip out of range")
        n = self.n_identities * self.n_words * self.clips_per_pair
        if n > self.max_clips:
            raise ValidationError(f"corpus budget exceeded: {n} > {self.max_clips}")
        return self

    @property
    def n_clips(self):
        return self.n_identities * self.n_words * self.clips_per_pair


def _rng(seed, *key):
    digest = hashlib.sha256(("/".join(str(k) for k in key) + f"#{seed}").encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def word_curve(word, t, seconds, seed):
    """Shared activity curve g_w(t): envelope times a word-specific oscillation.

    Zero inside the silence margins, ramps in/out, and oscillates at a rate
    and phase drawn per word. The same function drives both the audio pitch
    contour and the mouth expression channels.
    """
    rng = _rng(seed, "word", word)
    rate = rng.uniform(0.9, 2.4)
    phase = rng.uniform(0.0, 1.0)
    t = np.asarray(t, dtype=np.float64)
    up = np.clip((t - SILENCE_MARGIN) / RAMP, 0.0, 1.0)
    down = np.clip((seconds - SILENCE_MARGIN - t) / RAMP, 0.0, 1.0)
    env = np.minimum(up, down)
    osc = 0.55 + 0.45 * np.sin(2 * np.pi * (rate * t + phase))
    return env * osc


def speaker_voice(speaker, seed):
    """Base pitch (Hz) and harmonic amplitude profile for one speaker."""
    rng = _rng(seed, "speaker", speaker)
    f0 = 115.0 + 22.0 * speaker
    decay = rng.uniform(0.35, 0.9)
    amps = np.exp(-decay * np.arange(N_HARMONICS))
    boost = rng.integers(2, 6)
    amps[boost] *= 2.0
    return f0, amps


def synth_audio(speaker, word, seconds, seed) -> WaveBuffer:
    """Additive-harmonic clip: word sets the pitch contour, speaker the voice."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    g = word_curve(word, t, seconds, seed)
    f0, amps = speaker_voice(speaker, seed)
    f_inst = f0 + PITCH_SPAN * g
    phase = 2 * np.pi * np.cumsum(f_inst) / SAMPLE_RATE
    x = np.zeros(n)
    for k in range(1, N_HARMONICS + 1):
        x += amps[k - 1] * np.sin(k * phase)
    x *= g
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.85 / peak
    return WaveBuffer(samples=x, sample_rate=SAMPLE_RATE)


def mouth_scales(seed):
    rng = _rng(seed, "mouth-scales")
    scales = rng.uniform(0.4, 1.1, size=N_MOUTH) * rng.choice([-1.0, 1.0], size=N_MOUTH)
    scales[0] = 1.2  # jaw-open channel
    return scales


def synth_motion(word, seconds, seed, n_exp=face3d.N_EXP):
    """Per-frame expression coefficients for one word.

    The first N_MOUTH channels scale the word curve (zero at silence); the
    remaining channels carry low-amplitude smooth oscillations, so they are
    deterministic per (word, seed) but not predictable from audio content
    alone beyond the word identity.
    """
    n_frames = int(seconds * FPS)
    t = np.arange(n_frames) / FPS
    g = word_curve(word, t, seconds, seed)
    betas = np.zeros((n_frames, n_exp))
    betas[:, :N_MOUTH] = g[:, None] * mouth_scales(seed)[None, :]
    rng = _rng(seed, "word-noise", word)
    rates = rng.uniform(0.3, 1.5, size=n_exp - N_MOUTH)
    phases = rng.uniform(0.0, 1.0, size=n_exp - N_MOUTH)
    betas[:, N_MOUTH:] = NOISE_AMP * np.sin(
        2 * np.pi * (t[:, None] * rates[None, :] + phases[None, :]))
    return betas


def pose_track(n_frames, rng):
    """Smooth bounded wander: two-sinusoid yaw/pitch plus a small xy drift."""
    t = np.arange(n_frames) / FPS
    limit = np.deg2rad(30.0)

    def wander(scale):
        a1, a2 = rng.uniform(0.08, 0.30, size=2) * scale
        r1, r2 = rng.uniform(0.2, 1.1, size=2)
        p1, p2 = rng.uniform(0.0, 1.0, size=2)
        return np.clip(a1 * np.sin(2 * np.pi * (r1 * t + p1))
                       + a2 * np.sin(2 * np.pi * (r2 * t + p2)), -limit, limit)

    yaw = wander(1.8)
    pitch = wander(1.0)
    tx = 0.04 * np.sin(2 * np.pi * (rng.uniform(0.2, 0.8) * t + rng.uniform()))
    ty = 0.04 * np.sin(2 * np.pi * (rng.uniform(0.2, 0.8) * t + rng.uniform()))
    rot = np.stack([face3d.rotation_yx(y, p) for y, p in zip(yaw, pitch)], axis=0)
    trans = np.stack([tx, ty, np.zeros(n_frames)], axis=1)
    return rot, trans


def identity_alpha(speaker, seed, n_id=face3d.N_ID):
    rng = _rng(seed, "alpha", speaker)
    return np.clip(rng.normal(0.0, 0.5, size=n_id), -2.5, 2.5)


def identity_colors(speaker, seed):
    """Fixed per-identity palette; spread kept small so identity cues stay
    mostly geometric (embedding networks should read shape, not just hue)."""
    rng = _rng(seed, "colors", speaker)
    skin = np.clip(np.array([0.78, 0.62, 0.50]) + rng.uniform(-0.06, 0.06, 3), 0, 1)
    lips = np.clip(np.array([0.62, 0.26, 0.26]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    iris = np.clip(np.array([0.25, 0.30, 0.45]) + rng.uniform(-0.12, 0.12, 3), 0, 1)
    return {"skin": skin, "lips": lips, "iris": iris}


BACKGROUND = np.array([0.08, 0.09, 0.12])


def _rgb(c):
    return tuple(int(round(255 * v)) for v in c)


def render_face(basis, alpha, beta, pose, camera, image_size, colors):
    """Rasterize the posed face as filled landmark polygons; returns [0,1] HxWx3."""
    shape = face3d.assemble_shape(basis, alpha, beta)
    pts = face3d.project_landmarks(face3d.apply_pose(shape, pose), basis, camera)
    img = Image.new("RGB", (image_size, image_size), _rgb(BACKGROUND))
    draw = ImageDraw.Draw(img)

    def poly(indices, color, closed_pts=None):
        p = closed_pts if closed_pts is not None else [tuple(pts[i]) for i in indices]
        if len(p) >= 3:
            draw.polygon(p, fill=_rgb(color))

    skin = colors["skin"]
    # head: jaw arc plus a crown derived by reflecting the jaw about mid-face
    mid = pts[face3d.BROWS].mean(axis=0)
    crown = [tuple(pts[i] + 1.6 * (mid - pts[i])) for i in face3d.JAW[::-2]]
    outline = [tuple(pts[i]) for i in face3d.JAW] + crown
    poly(None, skin * 0.92, closed_pts=outline)
    poly(None, skin, closed_pts=[tuple(pts[i]) for i in face3d.JAW]
         + [tuple(pts[26]), tuple(pts[17])])
    # brows
    for seg in (range(17, 22), range(22, 27)):
        draw.line([tuple(pts[i]) for i in seg], fill=_rgb(skin * 0.35),
                  width=max(1, image_size // 48))
    # eyes: white fill plus iris dot
    for start in (36, 42):
        eye = [tuple(pts[i]) for i in range(start, start + 6)]
        poly(None, np.array([0.92, 0.92, 0.9]), closed_pts=eye)
        c = pts[start:start + 6].mean(axis=0)
        r = max(1.0, 0.16 * abs(pts[start][0] - pts[start + 3][0]) + 0.8)
        draw.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=_rgb(colors["iris"]))
    # nose
    poly([27, 31, 33, 35], skin * 0.8)
    # mouth: outer lips then inner cavity
    poly(face3d.MOUTH[:12], colors["lips"])
    poly(face3d.INNER_MOUTH, np.array([0.22, 0.08, 0.10]))
    return np.asarray(img, dtype=np.float64) / 255.0


def default_camera(image_size):
    return face3d.Camera(scale=0.33 * image_size,
                         principal=np.array([image_size / 2.0, image_size / 2.0]))


def clip_name(speaker, word, clip_index):
    return f"s{speaker:02d}_w{word:02d}_c{clip_index:02d}"


def build_corpus(spec: CorpusSpec, out_dir: str) -> str:
    """Write the full corpus; returns the manifest path.

    Layout: basis + per-identity alphas at the root, one directory per clip
    with wav, PNG frames, beta/pose arrays and a landmark CSV, and a
    line-delimited manifest (header record first).
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    basis = face3d.make_basis(seed=spec.seed)
    basis_path = os.path.join(out_dir, "basis")
    face3d.save_basis(basis_path, basis)
    camera = default_camera(spec.image_size)

    alphas = np.stack([identity_alpha(s, spec.seed) for s in range(spec.n_identities)])
    save_array(os.path.join(out_dir, "alphas"), alphas, meta={"kind": "identity_alphas"})

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    if os.path.exists(manifest_path):
        os.remove(manifest_path)
    header = {
        "type": "header",
        "version": MANIFEST_VERSION,
        "spec": asdict(spec),
        "camera": camera.to_dict(),
        "basis_file": "basis.npz",
        "alphas_file": "alphas.npy",
        "fps": FPS,
        "sample_rate": SAMPLE_RATE,
        "n_clips": spec.n_clips,
        "basis_sha256": sha256_file(basis_path + ".npz"),
    }
    append_jsonl(manifest_path, header)

    n_frames = int(spec.seconds_per_clip * FPS)
    for speaker in range(spec.n_identities):
        alpha = alphas[speaker]
        colors = identity_colors(speaker, spec.seed)
        id_part = basis.mean_shape + basis.id_basis @ alpha
        for word in range(spec.n_words):
            wave = synth_audio(speaker, word, spec.seconds_per_clip, spec.seed)
            betas = synth_motion(word, spec.seconds_per_clip, spec.seed)
            for clip_index in range(spec.clips_per_pair):
                cid = clip_name(speaker, word, clip_index)
                cdir = os.path.join(out_dir, "clips", cid)
                frames_dir = os.path.join(cdir, "frames")
                os.makedirs(frames_dir, exist_ok=True)

                wav_path = os.path.join(cdir, "audio.wav")
                wavfile.write(wav_path, SAMPLE_RATE,
                              (wave.samples * 32767.0).astype(np.int16))

                rng_pose = _rng(spec.seed, "pose", speaker, word, clip_index)
                rot, trans = pose_track(n_frames, rng_pose)
                save_arrays(os.path.join(cdir, "pose"), R=rot, T=trans,
                            meta={"kind": "pose_track", "fps": FPS})
                save_array(os.path.join(cdir, "beta"), betas,
                           meta={"kind": "expression_sequence", "fps": FPS})

                landmarks = np.empty((n_frames, basis.n_landmarks, 2))
                for t in range(n_frames):
                    shape = id_part + basis.exp_basis @ betas[t]
                    posed = shape @ rot[t].T + trans[t]
                    landmarks[t] = face3d.project_points(
                        posed[basis.landmark_indices], camera)
                    frame = render_face(basis, alpha, betas[t],
                                        face3d.HeadPose(rot[t], trans[t]),
                                        camera, spec.image_size, colors)
                    Image.fromarray((frame * 255.0 + 0.5).astype(np.uint8)).save(
                        os.path.join(frames_dir, f"{t:04d}.png"))
                save_landmarks_csv(os.path.join(cdir, "landmarks.csv"), landmarks)

                rel = os.path.join("clips", cid)
                append_jsonl(manifest_path, {
                    "type": "clip",
                    "clip_id": cid,
                    "speaker": speaker,
                    "word": word,
                    "clip_index": clip_index,
                    "n_frames": n_frames,
                    "wav": os.path.join(rel, "audio.wav"),
                    "frames_dir": os.path.join(rel, "frames"),
                    "beta_file": os.path.join(rel, "beta.npy"),
                    "pose_file": os.path.join(rel, "pose.npz"),
                    "landmarks_file": os.path.join(rel, "landmarks.csv"),
                    "wav_sha256": sha256_file(wav_path),
                })
    return manifest_path


class CorpusIndex:
    """Parsed manifest with path resolution relative to the corpus root."""

    def __init__(self, manifest_path):
        records = read_jsonl(manifest_path)
        if not records or records[0].get("type") != "header":
            raise ValidationError(f"{manifest_path}: missing corpus header")
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.header = records[0]
        self.clips = [r for r in records[1:] if r.get("type") == "clip"]
        self.by_id = {c["clip_id"]: c for c in self.clips}
        self.spec = CorpusSpec(**self.header["spec"])
        self.camera = face3d.Camera.from_dict(self.header["camera"])

    def path(self, rel):
        return os.path.join(self.root, rel)

    @property
    def basis(self):
        if not hasattr(self, "_basis"):
            self._basis = face3d.load_basis(self.path(self.header["basis_file"]))
        return self._basis

    @property
    def alphas(self):
        if not hasattr(self, "_alphas"):
            from .arrayio import load_array
            self._alphas = load_array(self.path(self.header["alphas_file"]))
        return self._alphas

    def clip(self, clip_id):
        if clip_id not in self.by_id:
            raise ValidationError(f"unknown clip_id {clip_id!r}")
        return self.by_id[clip_id]

    def load_pose(self, clip):
        data = load_arrays(self.path(clip["pose_file"]))
        return data["R"], data["T"]

    def load_beta(self, clip):
        from .arrayio import load_array
        return load_array(self.path(clip["beta_file"]))

    def load_frames(self, clip):
        frames_dir = self.path(clip["frames_dir"])
        out = []
        for t in range(clip["n_frames"]):
            img = Image.open(os.path.join(frames_dir, f"{t:04d}.png"))
            out.append(np.asarray(img, dtype=np.float64) / 255.0)
        return np.stack(out, axis=0)

    def load_landmarks(self, clip):
        from .arrayio import load_landmarks_csv
        return load_landmarks_csv(self.path(clip["landmarks_file"]))

    def words_split(self, holdout_fraction=0.2):
        """Train/held-out word indices; the last words are held out."""
        n_hold = max(1, int(round(self.spec.n_words * holdout_fraction)))
        words = list(range(self.spec.n_words))
        return words[:-n_hold], words[-n_hold:]
