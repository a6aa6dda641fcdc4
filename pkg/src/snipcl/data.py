"""Synthetic untrimmed skeleton sequences, preprocessing, augmentation and I/O."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io_utils import atomic_write_bytes
from .errors import ConfigError, ContractError, FormatError

logger = logging.getLogger(__name__)

MIN_SEGMENT = 20
FORMAT_VERSION = 1

# z is up; joints: pelvis, neck, l/r shoulder, l/r hand, l/r foot
_REST_POSE = np.array([
    [0.00, 0.00, 1.00],
    [0.00, 0.00, 1.50],
    [-0.20, 0.00, 1.45],
    [0.20, 0.00, 1.45],
    [-0.25, 0.00, 0.85],
    [0.25, 0.00, 0.85],
    [-0.10, 0.00, 0.00],
    [0.10, 0.00, 0.00],
])
_REST_EDGES = [(0, 1), (1, 2), (1, 3), (2, 4), (3, 5), (0, 6), (0, 7)]

ROOT_JOINT = 0
SHOULDER_JOINTS = (2, 3)


@dataclass
class SkeletonSequence:
    joints: np.ndarray  # [T, J, 3], meters
    frame_labels: np.ndarray  # [T] ints, 0 = background
    fps: float = 30.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise ContractError(f"joints must be [T, J, 3], got {self.joints.shape}")
        t, j, _ = self.joints.shape
        if t < 1 or j < 2:
            raise ContractError(f"need T >= 1 and J >= 2, got T={t}, J={j}")
        if self.frame_labels.shape != (t,):
            raise ContractError(f"frame_labels length {self.frame_labels.shape} != T={t}")

    @property
    def T(self) -> int:
        return self.joints.shape[0]

    @property
    def J(self) -> int:
        return self.joints.shape[1]


@dataclass(frozen=True)
class SegmentAnnotation:
    class_id: int
    start: int
    end: int  # exclusive
    video: int = 0

    def __post_init__(self):
        if self.class_id < 1 or not 0 <= self.start < self.end:
            raise ContractError(f"invalid segment {self}")


@dataclass
class SyntheticConfig:
    num_sequences: int = 100
    T: int = 300
    J: int = 8
    num_classes: int = 4
    background_fraction: float = 0.25
    noise_std: float = 0.01
    tilt_deg: float = 25.0
    proportion_jitter: float = 0.2
    fps: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_sequences, self.T, self.num_classes) < 1:
            raise ConfigError("num_sequences, T and num_classes must be >= 1")
        if self.J < 2:
            raise ConfigError(f"J must be >= 2, got {self.J}")
        if not 0 <= self.background_fraction < 1:
            raise ConfigError(f"background_fraction must be in [0, 1), got {self.background_fraction}")
        if self.noise_std < 0 or self.tilt_deg < 0 or not 0 <= self.proportion_jitter < 1:
            raise ConfigError("noise_std, tilt_deg >= 0 and proportion_jitter in [0, 1) required")
        action = int(round(self.T * (1 - self.background_fraction)))
        if action < 2 * MIN_SEGMENT:
            raise ConfigError(
                f"T={self.T} with background_fraction={self.background_fraction} leaves "
                f"{action} action frames; need >= {2 * MIN_SEGMENT} for two segments")


Dataset = list  # list[tuple[SkeletonSequence, list[SegmentAnnotation]]]


def stream_rng(seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent generator per (seed, purpose label, indices)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode()), *index])


# ---------------------------------------------------------------------------
# labels <-> segments


def segments_from_labels(labels, video: int = 0) -> list[SegmentAnnotation]:
    labels = np.asarray(labels)
    segs = []
    t = 0
    n = len(labels)
    while t < n:
        c = int(labels[t])
        e = t
        while e < n and labels[e] == c:
            e += 1
        if c > 0:
            segs.append(SegmentAnnotation(c, t, e, video))
        t = e
    return segs


def labels_from_segments(segments, T: int) -> np.ndarray:
    labels = np.zeros(T, dtype=np.int64)
    for s in segments:
        labels[s.start:s.end] = s.class_id
    return labels


def run_lengths(labels) -> list[list[int]]:
    runs: list[list[int]] = []
    for v in np.asarray(labels).tolist():
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


# ---------------------------------------------------------------------------
# generator


def skeleton_layout(J: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Rest pose ``[J, 3]`` and bone list for a ``J``-joint body.

    The first eight joints follow the built-in template; extra joints are
    inserted at midpoints of existing bones.
    """
    if J <= len(_REST_POSE):
        edges = [(a, b) for a, b in _REST_EDGES if a < J and b < J]
        return _REST_POSE[:J].copy(), edges
    pose = list(_REST_POSE)
    edges = list(_REST_EDGES)
    i = 0
    while len(pose) < J:
        a, b = _REST_EDGES[i % len(_REST_EDGES)]
        pose.append((pose[a] + pose[b]) / 2)
        edges.append((a, len(pose) - 1))
        i += 1
    return np.array(pose), edges


def _class_motion(class_id: int, n: int, fps: float, J: int, rng: np.random.Generator) -> np.ndarray:
    """Joint displacement ``[n, J, 3]`` for one action segment."""
    t = np.arange(n) / fps
    disp = np.zeros((n, max(J, 8), 3))
    speed = rng.uniform(0.85, 1.15)
    amp = rng.uniform(0.8, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    family = (class_id - 1) % 4
    tier = (class_id - 1) // 4  # extra classes reuse a family at a new tempo
    f_scale = 1.0 + 0.6 * tier
    if family == 0:  # walk: antiphase legs and arms, pelvis bounce
        f = 1.0 * speed * f_scale
        s = np.sin(2 * np.pi * f * t + phase)
        disp[:, 6, 1] = 0.25 * amp * s
        disp[:, 7, 1] = -0.25 * amp * s
        disp[:, 6, 2] = 0.06 * amp * np.clip(s, 0, None)
        disp[:, 7, 2] = 0.06 * amp * np.clip(-s, 0, None)
        disp[:, 4, 1] = -0.15 * amp * s
        disp[:, 5, 1] = 0.15 * amp * s
        disp[:, 0:4, 2] += 0.03 * amp * np.abs(s)[:, None]
    elif family == 1:  # sit: ramp the upper body down and hold, hands forward
        ramp_len = max(2, int(n * rng.uniform(0.25, 0.4)))
        ramp = np.clip(np.arange(n) / ramp_len, 0, 1)
        ramp = 0.5 - 0.5 * np.cos(np.pi * ramp)
        depth = 0.45 * amp
        disp[:, 0:6, 2] -= depth * ramp[:, None]
        disp[:, 0, 1] -= 0.15 * ramp
        disp[:, 4:6, 1] += 0.25 * ramp[:, None]
        disp[:, 4:6, 2] += 0.2 * ramp[:, None]
        disp[:, 6:8, 1] += 0.3 * ramp[:, None]
        disp[:, 6:8, 2] += 0.05 * ramp[:, None]
    elif family == 2:  # jump: repeated parabolic hops, arms swing up
        period = 0.9 / (speed * f_scale)
        u = ((t + phase / (2 * np.pi) * period) % period) / period
        hop = np.where(u < 0.5, 4 * (u / 0.5) * (1 - u / 0.5), 0.0)
        crouch = np.where(u >= 0.5, np.sin(np.pi * (u - 0.5) / 0.5), 0.0)
        disp[:, :, 2] += (0.3 * amp * hop)[:, None]
        disp[:, 0:6, 2] -= (0.12 * crouch)[:, None]
        disp[:, 4:6, 2] += (0.6 * hop)[:, None]
    else:  # wave: right hand raised, small fast lateral oscillation
        f = 2.0 * speed * f_scale
        lift = np.clip(np.arange(n) / 8.0, 0, 1)
        disp[:, 5, 2] += 0.75 * lift
        disp[:, 5, 0] += 0.05 * lift
        disp[:, 5, 0] += 0.08 * amp * lift * np.sin(2 * np.pi * f * t + phase)
    return disp[:, :J]


def _background_motion(n: int, fps: float, J: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fps
    disp = np.zeros((n, J, 3))
    f = rng.uniform(0.1, 0.3)
    sway = 0.02 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    disp[:, :, 0] += sway[:, None]
    return disp


def _segment_plan(cfg: SyntheticConfig, rng: np.random.Generator, first_class: int):
    action_total = int(round(cfg.T * (1 - cfg.background_fraction)))
    max_segs = min(6, action_total // MIN_SEGMENT)
    n_seg = int(rng.integers(2, max_segs + 1))
    # split action frames with a floor of MIN_SEGMENT each
    extra = action_total - n_seg * MIN_SEGMENT
    cuts = np.sort(rng.integers(0, extra + 1, size=n_seg - 1))
    lens = np.diff(np.concatenate([[0], cuts, [extra]])) + MIN_SEGMENT
    bg_total = cfg.T - action_total
    # a single class needs a background frame between segments to stay separable
    reserve = n_seg - 1 if cfg.num_classes == 1 else 0
    if reserve > bg_total:
        raise ConfigError("num_classes=1 needs background frames between segments")
    bcuts = np.sort(rng.integers(0, bg_total - reserve + 1, size=n_seg))
    gaps = np.diff(np.concatenate([[0], bcuts, [bg_total - reserve]]))
    gaps[1:n_seg] += 1 if reserve else 0
    classes = [first_class]
    for _ in range(n_seg - 1):
        choices = [c for c in range(1, cfg.num_classes + 1) if c != classes[-1]] or [classes[-1]]
        classes.append(int(rng.choice(choices)))
    segs = []
    t = 0
    for i in range(n_seg):
        t += int(gaps[i])
        segs.append((classes[i], t, t + int(lens[i])))
        t += int(lens[i])
    return segs


def _smooth_envelope(n: int, ramp: int = 4) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 1) / (r + 1))
        env[:r] = w
        env[n - r:] = w[::-1]
    return env


def generate_sequence(cfg: SyntheticConfig, index: int):
    """One sequence and its annotations, from the ``(seed, index)`` stream."""
    rng = stream_rng(cfg.seed, "data", index)
    first = index % cfg.num_classes + 1
    plan = _segment_plan(cfg, rng, first)
    segs = [SegmentAnnotation(c, s, e) for c, s, e in plan]

    rest, _ = skeleton_layout(cfg.J)
    scale = rng.uniform(0.85, 1.15) * (1 + rng.uniform(-cfg.proportion_jitter, cfg.proportion_jitter, size=3))
    disp = _background_motion(cfg.T, cfg.fps, cfg.J, rng)
    for seg in segs:
        n = seg.end - seg.start
        motion = _class_motion(seg.class_id, n, cfg.fps, cfg.J, rng)
        disp[seg.start:seg.end] += motion * _smooth_envelope(n)[:, None, None]
    joints = scale * (rest[None] + disp)
    joints += rng.normal(0.0, cfg.noise_std, size=joints.shape)
    # nuisance pose: camera tilt, heading about z, ground-plane offset
    if cfg.tilt_deg > 0:
        axis = np.array([*rng.normal(size=2), 0.0])
        joints = joints @ _rotation(axis, math.radians(rng.uniform(-cfg.tilt_deg, cfg.tilt_deg))).T
    heading = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    offset = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0])
    joints = joints @ rot.T + offset
    joints = joints.astype(np.float32).astype(np.float64)
    labels = labels_from_segments(segs, cfg.T)
    return SkeletonSequence(joints, labels, cfg.fps), segs


def generate_synthetic_dataset(cfg: SyntheticConfig) -> Dataset:
    cfg.validate()
    return [generate_sequence(cfg, i) for i in range(cfg.num_sequences)]


# ---------------------------------------------------------------------------
# preprocessing


def preprocess_sequence(x: SkeletonSequence, root_joint: int = ROOT_JOINT,
                        axis_joints: tuple[int, int] = SHOULDER_JOINTS,
                        return_skipped: bool = False):
    """Root-center every frame and rotate about z so the shoulder axis is +x.

    Frames whose shoulder axis has no horizontal extent keep their heading;
    their count is returned when ``return_skipped`` is set.
    """
    J = x.J
    if not (0 <= root_joint < J and all(0 <= a < J for a in axis_joints)):
        raise ContractError(f"joint indices {root_joint}, {axis_joints} out of range for J={J}")
    joints = x.joints - x.joints[:, root_joint:root_joint + 1, :]
    joints[:, root_joint, :] = 0.0
    v = joints[:, axis_joints[1], :2] - joints[:, axis_joints[0], :2]
    norm = np.hypot(v[:, 0], v[:, 1])
    ok = norm > 1e-9
    skipped = int(np.sum(~ok))
    cos = np.where(ok, v[:, 0] / np.where(ok, norm, 1.0), 1.0)
    sin = np.where(ok, -v[:, 1] / np.where(ok, norm, 1.0), 0.0)
    out = joints.copy()
    out[:, :, 0] = cos[:, None] * joints[:, :, 0] - sin[:, None] * joints[:, :, 1]
    out[:, :, 1] = sin[:, None] * joints[:, :, 0] + cos[:, None] * joints[:, :, 1]
    if skipped:
        logger.warning("preprocess: %d frame(s) with degenerate shoulder axis left unrotated", skipped)
    seq = SkeletonSequence(out, x.frame_labels.copy(), x.fps)
    return (seq, skipped) if return_skipped else seq


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    """Magnitudes of each augmentation; zero (or ratio 1) disables it."""

    crop_min_ratio: float = 0.7
    rotation_deg: float = 30.0
    jitter_std: float = 0.01
    mask_prob: float = 0.1
    shear: float = 0.2
    scale: float = 0.0  # per-axis factors drawn from 1 +/- scale

    def validate(self) -> None:
        if not 0 < self.crop_min_ratio <= 1:
            raise ConfigError(f"crop_min_ratio must be in (0, 1], got {self.crop_min_ratio}")
        if self.rotation_deg < 0 or self.jitter_std < 0 or self.shear < 0 or not 0 <= self.scale < 1:
            raise ConfigError("augmentation magnitudes must be >= 0 and scale < 1")
        if not 0 <= self.mask_prob < 1:
            raise ConfigError(f"mask_prob must be in [0, 1), got {self.mask_prob}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(crop_min_ratio=1.0, rotation_deg=0.0, jitter_std=0.0, mask_prob=0.0, shear=0.0, scale=0.0)


def crop_resize(x: SkeletonSequence, start: int, length: int) -> SkeletonSequence:
    """Crop ``[start, start + length)`` and resample back to ``T`` frames.

    Joints are linearly interpolated; labels take the nearest source frame.
    """
    T = x.T
    if length < 2:
        raise ConfigError(f"crop window must be at least 2 frames, got {length}")
    if start < 0 or start + length > T:
        raise ConfigError(f"crop window [{start}, {start + length}) outside [0, {T})")
    pos = start + np.arange(T) * (length - 1) / max(T - 1, 1)
    lo = np.minimum(np.floor(pos).astype(int), start + length - 2)
    frac = (pos - lo)[:, None, None]
    joints = (1 - frac) * x.joints[lo] + frac * x.joints[lo + 1]
    nearest = np.floor(pos + 0.5).astype(int)
    return SkeletonSequence(joints, x.frame_labels[nearest], x.fps)


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def augment_sequence(x: SkeletonSequence, policy: AugmentPolicy, rng: np.random.Generator) -> SkeletonSequence:
    policy.validate()
    T = x.T
    out = x
    if policy.crop_min_ratio < 1:
        min_len = max(2, int(math.ceil(policy.crop_min_ratio * T)))
        if min_len > T:
            raise ConfigError(f"crop window of {min_len} frames does not fit T={T}")
        length = int(rng.integers(min_len, T + 1))
        start = int(rng.integers(0, T - length + 1))
        out = crop_resize(out, start, length)
    joints = out.joints
    if policy.shear > 0:
        sh = np.eye(3)
        off = rng.uniform(-policy.shear, policy.shear, size=6)
        sh[~np.eye(3, dtype=bool)] = off
        joints = joints @ sh.T
    if policy.scale > 0:
        joints = joints * rng.uniform(1 - policy.scale, 1 + policy.scale, size=3)
    if policy.rotation_deg > 0:
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        joints = joints @ _rotation(axis, angle).T
    if policy.jitter_std > 0:
        joints = joints + rng.normal(0.0, policy.jitter_std, size=joints.shape)
    if policy.mask_prob > 0:
        keep = rng.random(out.J) >= policy.mask_prob
        joints = joints * keep[None, :, None]
    return SkeletonSequence(joints, out.frame_labels.copy(), x.fps)


# ---------------------------------------------------------------------------
# on-disk format


def _manifest_for(dataset: Dataset, fps: float, J: int) -> dict:
    entries = []
    for i, (seq, segs) in enumerate(dataset):
        entries.append({
            "id": f"seq{i:05d}",
            "T": seq.T,
            "label_run_lengths": run_lengths(seq.frame_labels),
            "segments": [{"class": s.class_id, "start": s.start, "end": s.end} for s in segs],
        })
    return {"version": FORMAT_VERSION, "fps": fps, "J": J, "sequences": entries}


def write_dataset(path, dataset: Dataset, fps: float | None = None, J: int | None = None) -> Path:
    """Write ``manifest.json`` plus one ``<id>.f32`` blob per sequence."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if dataset:
        fps = dataset[0][0].fps if fps is None else fps
        J = dataset[0][0].J if J is None else J
    manifest = _manifest_for(dataset, 30.0 if fps is None else fps, 8 if J is None else J)
    for entry, (seq, _) in zip(manifest["sequences"], dataset):
        if seq.J != manifest["J"]:
            raise ContractError(f"sequence {entry['id']} has J={seq.J}, dataset J={manifest['J']}")
        blob = np.ascontiguousarray(seq.joints, dtype="<f4").tobytes()
        atomic_write_bytes(path / f"{entry['id']}.f32", blob)
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(path / "manifest.json", text.encode())
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: corrupted manifest at offset {exc.pos}: {exc.msg}") from exc
    except OSError as exc:
        raise FormatError(f"{mpath}: cannot read manifest: {exc}") from exc
    try:
        fps = float(manifest["fps"])
        J = int(manifest["J"])
        entries = manifest["sequences"]
        if manifest["version"] != FORMAT_VERSION:
            raise FormatError(f"{mpath}: unsupported version {manifest['version']}")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: missing or malformed field {exc}") from exc
    dataset = []
    for k, entry in enumerate(entries):
        try:
            sid, T = entry["id"], int(entry["T"])
            runs = entry["label_run_lengths"]
            segs = [SegmentAnnotation(int(s["class"]), int(s["start"]), int(s["end"]))
                    for s in entry["segments"]]
        except (KeyError, TypeError, ValueError, ContractError) as exc:
            raise FormatError(f"{mpath}: malformed sequence entry {k}: {exc}") from exc
        labels = np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs]) if runs else np.zeros(0, np.int64)
        if len(labels) != T:
            raise FormatError(f"{mpath}: sequence {sid} label runs cover {len(labels)} frames, T={T}")
        bpath = path / f"{sid}.f32"
        try:
            raw = bpath.read_bytes()
        except OSError as exc:
            raise FormatError(f"{bpath}: cannot read sequence blob: {exc}") from exc
        expected = T * J * 3 * 4
        if len(raw) != expected:
            raise FormatError(
                f"{bpath}: blob length mismatch at offset {min(len(raw), expected)}: "
                f"expected {expected} bytes, found {len(raw)}")
        joints = np.frombuffer(raw, dtype="<f4").reshape(T, J, 3).astype(np.float64)
        dataset.append((SkeletonSequence(joints, labels, fps), segs))
    return dataset


def split_dataset(dataset: Dataset, train_fraction: float = 0.7):
    n_train = int(round(len(dataset) * train_fraction))
    return dataset[:n_train], dataset[n_train:]
