"""On-disk array containers and manifest helpers.

Conventions used throughout the repo:
  * numeric arrays -> .npy (single) or .npz (named group), always with a
    JSON sidecar `<file>.json` carrying shape/dtype metadata and a sha256
    checksum of the binary file,
  * landmarks -> CSV rows (frame_index, point_index, x, y),
  * manifests and training logs -> line-delimited JSON.
"""

import csv
import hashlib
import json
import os

import numpy as np

from .errors import ValidationError


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def save_array(path, arr, meta=None):
    """Write one array as .npy plus a JSON sidecar; returns the sidecar dict."""
    arr = np.asarray(arr)
    np.save(path, arr)
    path = _with_npy(path)
    sidecar = {
        "file": os.path.basename(path),
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "sha256": sha256_file(path),
    }
    if meta:
        sidecar.update(meta)
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=0, sort_keys=True)
    return sidecar


def load_array(path):
    path = _with_npy(path)
    sidecar_path = path + ".json"
    arr = np.load(path)
    if os.path.exists(sidecar_path):
        with open(sidecar_path) as f:
            sidecar = json.load(f)
        if list(arr.shape) != sidecar["shape"]:
            raise ValidationError(
                f"{path}: shape {list(arr.shape)} does not match sidecar {sidecar['shape']}"
            )
    return arr


def save_arrays(path, meta=None, **arrays):
    """Write a named group of arrays as .npz plus a JSON sidecar."""
    np.savez(path, **arrays)
    path = path if path.endswith(".npz") else path + ".npz"
    sidecar = {
        "file": os.path.basename(path),
        "arrays": {k: {"shape": list(np.asarray(v).shape), "dtype": str(np.asarray(v).dtype)}
                   for k, v in arrays.items()},
        "sha256": sha256_file(path),
    }
    if meta:
        sidecar.update(meta)
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=0, sort_keys=True)
    return sidecar


def load_arrays(path):
    path = path if path.endswith(".npz") else path + ".npz"
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def _with_npy(path):
    return path if path.endswith(".npy") else path + ".npy"


def save_landmarks_csv(path, landmarks):
    """landmarks: (T, K, 2) array -> CSV rows (frame_index, point_index, x, y)."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim != 3 or landmarks.shape[2] != 2:
        raise ValidationError(f"landmarks must be (T, K, 2), got {landmarks.shape}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "point_index", "x", "y"])
        for t in range(landmarks.shape[0]):
            for k in range(landmarks.shape[1]):
                writer.writerow([t, k, repr(float(landmarks[t, k, 0])),
                                 repr(float(landmarks[t, k, 1]))])


def load_landmarks_csv(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:4] != ["frame_index", "point_index", "x", "y"]:
            raise ValidationError(f"{path}: unexpected landmark CSV header {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    if not rows:
        return np.zeros((0, 0, 2))
    n_frames = max(r[0] for r in rows) + 1
    n_points = max(r[1] for r in rows) + 1
    out = np.full((n_frames, n_points, 2), np.nan)
    for t, k, x, y in rows:
        out[t, k] = (x, y)
    if np.any(np.isnan(out)):
        raise ValidationError(f"{path}: incomplete landmark grid")
    return out


def append_jsonl(path, record):
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
