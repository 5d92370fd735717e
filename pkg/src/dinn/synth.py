"""Seeded synthetic stand-in for the Wi-Fi pose dataset.

Each subject gets a body scale and a linear CSI forward model
``column_t = A_k phi(joints_t) + b_k + noise``.  The feature lift ``phi``
(random Fourier features of the normalised joint coordinates) is shared by
all subjects, so pose enters every subject's CSI the same way, while the
subject-specific ``A_k`` and ``b_k`` carry identity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.draw import line

CANVAS = (120, 160)  # rows (y), cols (x)
CSI_SHAPE = (30, 20, 4)
WINDOW = CSI_SHAPE[1]
NUM_FEATURES = 64
TRAIN_FRACTION = 0.75

JOINTS = [
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
]
# (parent, child, base length in px, rest angle, allowed swing); angle 0 points down the canvas
BONES = [
    (1, 0, 10.0, np.pi, 0.3),
    (1, 2, 12.0, -np.pi / 2, 0.15),
    (2, 3, 16.0, 0.0, 1.6),
    (3, 4, 14.0, 0.0, 2.0),
    (1, 5, 12.0, np.pi / 2, 0.15),
    (5, 6, 16.0, 0.0, 1.6),
    (6, 7, 14.0, 0.0, 2.0),
    (1, 8, 28.0, -0.2, 0.15),
    (8, 9, 20.0, 0.0, 0.5),
    (9, 10, 20.0, 0.0, 0.5),
    (1, 11, 28.0, 0.2, 0.15),
    (11, 12, 20.0, 0.0, 0.5),
    (12, 13, 20.0, 0.0, 0.5),
]
MAX_STEP_PX = 5.0

_SHARED_STREAM = 1_000_003
_DSET_MAGIC = b"DSET"
_DSET_VERSION = 1


@dataclass(frozen=True)
class FeatureLift:
    """Subject-independent random Fourier features of joint coordinates."""

    freqs: np.ndarray  # (NUM_FEATURES, 28)
    phases: np.ndarray  # (NUM_FEATURES,)

    def __call__(self, joints: np.ndarray) -> np.ndarray:
        """``(..., 14, 2) -> (..., NUM_FEATURES)``"""
        u = np.empty(joints.shape, dtype=np.float64)
        u[..., 0] = joints[..., 0] / (CANVAS[1] / 2) - 1.0
        u[..., 1] = joints[..., 1] / (CANVAS[0] / 2) - 1.0
        u = u.reshape(u.shape[:-2] + (-1,))
        return np.sqrt(2.0 / len(self.phases)) * np.cos(u @ self.freqs.T + self.phases)


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    body_scale: float
    mixing: np.ndarray  # A_k, (120, NUM_FEATURES)
    offset: np.ndarray  # b_k, (120,)
    noise: float  # sigma_k
    lift: FeatureLift = field(repr=False)


def _shared_lift(global_seed: int, lift_scale: float) -> tuple[FeatureLift, np.ndarray]:
    rng = np.random.default_rng([global_seed, _SHARED_STREAM])
    lift = FeatureLift(
        freqs=rng.normal(0.0, lift_scale, (NUM_FEATURES, 2 * len(JOINTS))),
        phases=rng.uniform(0.0, 2 * np.pi, NUM_FEATURES),
    )
    base_mixing = rng.normal(0.0, 1.0, (CSI_SHAPE[0] * CSI_SHAPE[2], NUM_FEATURES))
    return lift, base_mixing


def make_subjects(global_seed: int, k_total: int = 5, mixing_spread: float = 0.3,
                  offset_scale: float = 1.0, lift_scale: float = 0.5) -> list[SubjectProfile]:
    """``k_total`` profiles; the first ``k_total - 1`` are sources, the last is the target.

    ``A_k = A_shared + mixing_spread * E_k`` and ``b_k = offset_scale * e_k``
    with standard-normal ``E_k, e_k``; ``lift_scale`` is the std of the
    Fourier frequencies of the shared pose lift.
    """
    if k_total < 2:
        raise ValueError(f"need at least 2 subjects (sources + target), got {k_total}")
    lift, base_mixing = _shared_lift(global_seed, lift_scale)
    profiles = []
    for k in range(k_total):
        rng = np.random.default_rng([global_seed, k])
        profiles.append(SubjectProfile(
            subject_id=k,
            body_scale=float(rng.uniform(0.85, 1.15)),
            mixing=base_mixing + mixing_spread * rng.normal(0.0, 1.0, base_mixing.shape),
            offset=offset_scale * rng.normal(0.0, 1.0, base_mixing.shape[0]),
            noise=float(rng.uniform(0.01, 0.05)),
            lift=lift,
        ))
    return profiles


def _pose(root: np.ndarray, angles: np.ndarray, scale: float) -> np.ndarray:
    joints = np.empty((len(JOINTS), 2))
    joints[1] = root
    for (parent, child, length, _, _), a in zip(BONES, angles):
        joints[child] = joints[parent] + scale * length * np.array([np.sin(a), np.cos(a)])
    return joints


def _in_canvas(joints: np.ndarray) -> bool:
    return bool(np.all(joints >= 0) and np.all(joints[:, 0] <= CANVAS[1] - 1)
                and np.all(joints[:, 1] <= CANVAS[0] - 1))


def gen_pose_sequence(profile: SubjectProfile, frames: int, seed: int) -> np.ndarray:
    """Random walk over limb angles plus a root steered along a slow Lissajous sweep.

    Returns ``(frames, 14, 2)`` joint positions as (x, y).  Proposals that
    leave the canvas or move any joint more than ``MAX_STEP_PX`` are shrunk
    and retried; after 8 failures the pose holds for that frame.
    """
    if frames < WINDOW:
        raise ValueError(f"need at least {WINDOW} frames, got {frames}")
    rng = np.random.default_rng([seed, profile.subject_id])
    rest = np.array([b[3] for b in BONES])
    swing = np.array([b[4] for b in BONES])
    scale = profile.body_scale
    period = rng.uniform([90.0, 60.0], [150.0, 120.0])
    phase = rng.uniform(0.0, 2 * np.pi, 2)
    centre, amplitude = np.array([80.0, 21.0]), np.array([35.0, 7.0])

    def sweep(t):
        return centre + amplitude * np.sin(2 * np.pi * t / period + phase)

    offsets = np.zeros(len(BONES))
    root = sweep(0)
    joints = _pose(root, rest, scale)
    out = np.empty((frames, len(JOINTS), 2))
    for t in range(frames):
        out[t] = joints
        velocity = np.clip(0.1 * (sweep(t + 1) - root) + rng.normal(0.0, 0.3, 2), -1.5, 1.5)
        d_angle = np.clip(rng.normal(0.0, 0.02, len(BONES)), -0.04, 0.04)
        for _ in range(8):
            cand_off = np.clip(offsets + d_angle, -swing, swing)
            cand = _pose(root + velocity, rest + cand_off, scale)
            step = np.linalg.norm(cand - joints, axis=1).max()
            if _in_canvas(cand) and step <= MAX_STEP_PX:
                root, offsets, joints = root + velocity, cand_off, cand
                break
            velocity = 0.5 * velocity
            d_angle = -0.5 * d_angle
    return out


def render_skeleton(joints: np.ndarray) -> np.ndarray:
    """1-px Bresenham rendering of every bone onto a ``120 x 160`` uint8 canvas."""
    img = np.zeros(CANVAS, dtype=np.uint8)
    pix = np.rint(joints).astype(int)
    for parent, child, *_ in BONES:
        (x0, y0), (x1, y1) = pix[parent], pix[child]
        rr, cc = line(y0, x0, y1, x1)
        img[rr, cc] = 1
    return img


def _csi_columns(profile: SubjectProfile, joints: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``(T, 14, 2) -> (T, 30, 4)``: one noisy CSI column per frame."""
    cells = profile.lift(joints) @ profile.mixing.T + profile.offset
    cells = cells + rng.normal(0.0, profile.noise, cells.shape)
    return cells.reshape(len(joints), CSI_SHAPE[0], CSI_SHAPE[2])


def synth_csi(profile: SubjectProfile, window: np.ndarray, seed_noise) -> np.ndarray:
    """CSI image ``30 x 20 x 4`` for a 20-frame pose window; time runs along axis 1."""
    if window.shape != (WINDOW, len(JOINTS), 2):
        raise ValueError(f"pose window must be {WINDOW}x{len(JOINTS)}x2, got {window.shape}")
    cols = _csi_columns(profile, window, np.random.default_rng(seed_noise))
    return cols.transpose(1, 0, 2).copy()


def one_hot(index: int, k: int) -> np.ndarray:
    v = np.zeros(k, dtype=np.uint8)
    v[index] = 1
    return v


@dataclass
class DatasetSplit:
    train: np.ndarray
    test_source: np.ndarray
    test_target: np.ndarray

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k).tolist() for k in ("train", "test_source", "test_target")})

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "test_source", "test_target")))


@dataclass
class Dataset:
    """Samples in subject-major, frame-minor order.

    ``domain`` rows are one-hot over the ``k_total - 1`` source subjects and
    all-zero for the target subject.
    """

    csi: np.ndarray  # (S, 30, 20, 4) float32
    skeleton: np.ndarray  # (S, 120, 160, 1) uint8
    subject: np.ndarray  # (S,) int
    domain: np.ndarray  # (S, K) uint8
    k_total: int

    def __len__(self) -> int:
        return len(self.subject)

    @property
    def num_domains(self) -> int:
        return self.k_total - 1

    @property
    def target_id(self) -> int:
        return self.k_total - 1


def time_block_split(subject: np.ndarray, target_id: int) -> DatasetSplit:
    """First 75% of each subject's windows train, the rest test; target windows never train."""
    train, test_source, test_target = [], [], []
    for k in np.unique(subject):
        idx = np.flatnonzero(subject == k)
        cut = int(np.floor(TRAIN_FRACTION * len(idx)))
        if k == target_id:
            test_target.append(idx[cut:])
        else:
            train.append(idx[:cut])
            test_source.append(idx[cut:])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    return DatasetSplit(cat(train), cat(test_source), cat(test_target))


def build_dataset(profiles: list[SubjectProfile], frames_per_subject: int = 600,
                  global_seed: int = 0) -> tuple[Dataset, DatasetSplit]:
    if frames_per_subject < 2 * WINDOW:
        raise ValueError(f"frames_per_subject must be >= {2 * WINDOW}")
    k_total = len(profiles)
    n_src = k_total - 1
    per = frames_per_subject - (WINDOW - 1)
    csi = np.empty((k_total * per,) + CSI_SHAPE, dtype=np.float32)
    skel = np.empty((k_total * per,) + CANVAS + (1,), dtype=np.uint8)
    subject = np.repeat(np.arange(k_total), per)
    domain = np.zeros((k_total * per, n_src), dtype=np.uint8)
    for k, prof in enumerate(profiles):
        poses = gen_pose_sequence(prof, frames_per_subject, global_seed)
        cols = _csi_columns(prof, poses, np.random.default_rng([global_seed, prof.subject_id, 7]))
        base = k * per
        for i in range(per):
            t = i + WINDOW - 1
            csi[base + i] = cols[t - WINDOW + 1 : t + 1].transpose(1, 0, 2)
            skel[base + i, :, :, 0] = render_skeleton(poses[t])
        if k < n_src:
            domain[base : base + per] = one_hot(k, n_src)
    ds = Dataset(csi, skel, subject, domain, k_total)
    return ds, time_block_split(subject, ds.target_id)


# ---------------------------------------------------------------------------
# binary dataset file + JSON split companion


def split_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".split.json")


def save_dataset(path, ds: Dataset, split: DatasetSplit) -> None:
    chunks = [_DSET_MAGIC, struct.pack("<II", _DSET_VERSION, ds.k_total)]
    csi_head = struct.pack("<I3I", 3, *CSI_SHAPE)
    sk_head = struct.pack("<I3I", 3, *ds.skeleton.shape[1:])
    for i in range(len(ds)):
        width = 0 if ds.subject[i] == ds.target_id else ds.num_domains
        chunks.append(struct.pack("<II", int(ds.subject[i]), width))
        chunks.append(ds.domain[i, :width].astype("<u1").tobytes())
        chunks.append(csi_head + ds.csi[i].astype("<f4").tobytes())
        chunks.append(sk_head + ds.skeleton[i].astype("<u1").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    split_path(path).write_text(split.to_json() + "\n")


def _read_extents(buf, off):
    (rank,) = struct.unpack_from("<I", buf, off)
    ext = struct.unpack_from(f"<{rank}I", buf, off + 4)
    return ext, off + 4 + 4 * rank


def load_dataset(path) -> tuple[Dataset, DatasetSplit]:
    buf = Path(path).read_bytes()
    if buf[:4] != _DSET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (expected magic 'DSET')")
    version, k_total = struct.unpack_from("<II", buf, 4)
    if version != _DSET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    n_src = k_total - 1
    off = 12
    csis, skels, subjects, domains = [], [], [], []
    try:
        while off < len(buf):
            sid, width = struct.unpack_from("<II", buf, off)
            off += 8
            dom = np.zeros(n_src, dtype=np.uint8)
            dom[:width] = np.frombuffer(buf, "<u1", width, off)
            off += width
            ext, off = _read_extents(buf, off)
            n = int(np.prod(ext))
            csis.append(np.frombuffer(buf, "<f4", n, off).reshape(ext))
            off += 4 * n
            ext, off = _read_extents(buf, off)
            n = int(np.prod(ext))
            skels.append(np.frombuffer(buf, "<u1", n, off).reshape(ext))
            off += n
            subjects.append(sid)
            domains.append(dom)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt dataset file") from exc
    ds = Dataset(
        csi=np.stack(csis).astype(np.float32),
        skeleton=np.stack(skels),
        subject=np.asarray(subjects, dtype=np.int64),
        domain=np.stack(domains),
        k_total=k_total,
    )
    return ds, DatasetSplit.from_json(split_path(path).read_text())
