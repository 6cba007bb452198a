"""Procedural atomic-action clips with compositional splits.

Every clip shows a subject sprite performing one motion pattern next to an
object sprite, over a static cluttered background. Frames are (T, H, W, 4):
RGB plus a depth plane holding sprite height.
"""

from __future__ import annotations

import colorsys
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test_seen", "test_unseen")
CLIP_MAGIC = b"RACV"
_CLIP_HEADER = struct.Struct("<4sIII")

DEFAULT_SUBJECTS = ("robot", "human", "gripper")
DEFAULT_ACTIONS = ("grasp", "release", "rotate", "shake", "lift", "lower")
DEFAULT_OBJECTS = ("drawer", "cup", "plate", "bowl", "block", "bottle", "lid", "sponge")

# action name -> motion pattern
MOTIONS = {
    "grasp": "approach",
    "push": "approach",
    "close": "approach",
    "release": "retreat",
    "pull": "retreat",
    "open": "retreat",
    "rotate": "rotate",
    "turn": "rotate",
    "shake": "oscillate",
    "wipe": "oscillate",
    "stir": "oscillate",
    "lift": "lift",
    "pick": "lift",
    "lower": "lower",
    "place": "lower",
    "put": "lower",
}
MOTION_KINDS = ("approach", "retreat", "rotate", "oscillate", "lift", "lower")


class InvalidTripletError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class InfeasibleSplitError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabularies:
    subjects: tuple[str, ...] = DEFAULT_SUBJECTS
    actions: tuple[str, ...] = DEFAULT_ACTIONS
    objects: tuple[str, ...] = DEFAULT_OBJECTS

    def __post_init__(self):
        for name in ("subjects", "actions", "objects"):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ConfigurationError(f"{name} vocabulary is empty")
            if len(set(values)) != len(values):
                raise ConfigurationError(f"{name} vocabulary has duplicates")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.subjects), len(self.actions), len(self.objects)

    def to_dict(self) -> dict:
        return {"subjects": list(self.subjects), "actions": list(self.actions), "objects": list(self.objects)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabularies":
        return cls(tuple(d["subjects"]), tuple(d["actions"]), tuple(d["objects"]))


@dataclass(frozen=True, order=True)
class Triplet:
    subject_id: int
    action_id: int
    object_id: int

    def validate(self, vocab: Vocabularies) -> "Triplet":
        bounds = vocab.sizes
        for value, bound, name in zip(self, bounds, ("subject", "action", "object")):
            if not isinstance(value, (int, np.integer)) or not 0 <= value < bound:
                raise InvalidTripletError(f"{name} id {value!r} outside [0, {bound})")
        return self

    def names(self, vocab: Vocabularies) -> tuple[str, str, str]:
        self.validate(vocab)
        return vocab.subjects[self.subject_id], vocab.actions[self.action_id], vocab.objects[self.object_id]

    def __iter__(self):
        return iter((self.subject_id, self.action_id, self.object_id))


@dataclass
class SynthSpec:
    vocab: Vocabularies = field(default_factory=Vocabularies)
    num_frames: int = 24
    height: int = 32
    width: int = 32
    clips_per_triplet: int = 2
    holdout_fraction: float = 0.1
    motions: dict = field(default_factory=lambda: dict(MOTIONS))

    def __post_init__(self):
        if self.num_frames < 2:
            raise ConfigurationError("num_frames must be >= 2")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("frames must be at least 8x8")
        if self.clips_per_triplet < 1:
            raise ConfigurationError("clips_per_triplet must be >= 1")


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray
    caption: str
    triplet: Triplet
    split: str = "train"


@dataclass
class ManifestRecord:
    video_id: str
    path: str
    num_frames: int
    caption: str
    triplet: Triplet
    split: str = "train"

    def to_json(self, vocab: Vocabularies) -> dict:
        s, a, o = self.triplet.names(vocab)
        return {
            "video_id": self.video_id,
            "path": self.path,
            "num_frames": self.num_frames,
            "caption": self.caption,
            "subject": s,
            "action": a,
            "object": o,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    vocab: Vocabularies
    seed: int
    root: Path | None = None

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def resolve(self, record: ManifestRecord) -> Path:
        path = Path(record.path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return path


def format_caption(subject: str, action: str, obj: str) -> str:
    return f"{subject.capitalize()} {action} {obj}, Action is {action}, Object is {obj}"


def make_caption(triplet: Triplet, vocab: Vocabularies) -> str:
    s, a, o = triplet.names(vocab)
    return format_caption(s, a, o)


# -- rendering ---------------------------------------------------------------

def _shape_mask(u: np.ndarray, v: np.ndarray, r: float, shape: int) -> np.ndarray:
    # every shape is point-symmetric so rotation keeps the centroid fixed
    rad = np.hypot(u, v)
    if shape == 0:
        return np.maximum(np.abs(u), np.abs(v)) <= r
    if shape == 1:
        return rad <= r
    if shape == 2:
        return np.abs(u) + np.abs(v) <= r * 1.3
    if shape == 3:
        return (rad <= r) & (rad >= 0.5 * r)
    if shape == 4:
        return ((np.abs(u) <= r / 3) & (np.abs(v) <= r)) | ((np.abs(v) <= r / 3) & (np.abs(u) <= r))
    if shape == 5:
        return (np.abs(u) <= r * 1.2) & (np.abs(v) <= r / 2)
    if shape == 6:
        box = np.maximum(np.abs(u), np.abs(v))
        return (box <= r) & (box >= 0.55 * r)
    return (u / r) ** 2 + (v / (0.55 * r)) ** 2 <= 1.0


def _sprite(shape_h: int, shape_w: int, cx: float, cy: float, r: float, angle: float, shape: int) -> np.ndarray:
    yy, xx = np.mgrid[0:shape_h, 0:shape_w].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return _shape_mask(u, v, r, shape)


def object_color(object_id: int, num_objects: int) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(object_id / num_objects, 1.0, 0.95)
    return np.asarray(rgb, dtype=np.float32)


def subject_color(subject_id: int, num_subjects: int) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb((subject_id / num_subjects + 0.17) % 1.0, 0.45, 0.85)
    return np.asarray(rgb, dtype=np.float32)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.6)
    gray = base + rng.normal(0.0, 0.03, size=(h, w))
    depth = np.zeros((h, w))
    for _ in range(int(rng.integers(4, 8))):
        rh, rw = rng.integers(2, max(3, h // 4)), rng.integers(2, max(3, w // 4))
        y0, x0 = rng.integers(0, h - rh), rng.integers(0, w - rw)
        gray[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.1, 0.8)
        depth[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.05, 0.2)
    gray = np.clip(gray, 0.0, 1.0)
    out = np.empty((h, w, 4), dtype=np.float32)
    out[..., :3] = gray[..., None]
    out[..., 3] = depth
    return out


def _motion(kind: str, t: float, near: float, far: float, travel: float):
    """Returns (subject dx, subject dy, object dy, angle, height)."""
    ease = 0.5 - 0.5 * math.cos(math.pi * t)
    if kind == "approach":
        return far + (near - far) * ease, 0.0, 0.0, 0.0, 0.0
    if kind == "retreat":
        return near + (far - near) * ease, 0.0, 0.0, 0.0, 0.0
    if kind == "rotate":
        return near, 0.0, 0.0, 0.5 * math.pi * t, 0.0
    if kind == "oscillate":
        return near, 0.35 * travel * math.sin(4 * math.pi * t), 0.0, 0.0, 0.0
    if kind == "lift":
        return near, 0.0, -travel * ease, 0.0, 0.3 * ease
    if kind == "lower":
        return near, 0.0, -travel * (1 - ease), 0.0, 0.3 * (1 - ease)
    raise ConfigurationError(f"unknown motion kind {kind!r}")


def render_video(triplet: Triplet, seed: int, spec: SynthSpec, video_id: str | None = None,
                 split: str = "train") -> VideoSample:
    vocab = spec.vocab
    s_name, a_name, _ = triplet.names(vocab)
    kind = spec.motions.get(a_name)
    if kind not in MOTION_KINDS:
        raise ConfigurationError(f"no motion mapping for action {a_name!r}")
    ks, _, ko = vocab.sizes
    h, w, T = spec.height, spec.width, spec.num_frames
    size = min(h, w)
    rng = np.random.default_rng(seed)

    background = _background(rng, h, w)
    r_obj = max(2.0, 0.12 * size)
    r_sub = max(1.5, 0.09 * size)
    near = 1.45 * (r_obj + r_sub) + 1.0
    far = near + 0.3 * size
    travel = 0.2 * size
    ox = rng.uniform(0.2 * w + r_obj, 0.55 * w - r_obj) if w >= 16 else w / 3
    oy = rng.uniform(0.4 * h, 0.75 * h) if h >= 16 else h / 2
    o_col, s_col = object_color(triplet.object_id, ko), subject_color(triplet.subject_id, ks)
    o_shape, s_shape = triplet.object_id % 8, (triplet.subject_id % 3) * 2

    frames = np.empty((T, h, w, 4), dtype=np.float32)
    for i in range(T):
        sdx, sdy, ody, angle, height = _motion(kind, i / (T - 1), near, far, travel)
        frame = background.copy()
        cy = oy + ody
        mask = _sprite(h, w, ox, cy, r_obj, angle, o_shape)
        frame[mask, :3] = o_col
        frame[mask, 3] = 0.4 + height
        mask = _sprite(h, w, ox + sdx, cy + sdy, r_sub, angle, s_shape)
        frame[mask, :3] = s_col
        frame[mask, 3] = 0.6 + height
        frames[i] = frame
    caption = make_caption(triplet, vocab)
    return VideoSample(video_id or f"{s_name}-{a_name}-{seed}", frames, caption, triplet, split)


# -- clip files --------------------------------------------------------------

def write_clip(path: Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4 or frames.shape[-1] != 4:
        raise ValueError(f"expected (T, H, W, 4) frames, got {frames.shape}")
    T, h, w, _ = frames.shape
    with open(path, "wb") as f:
        f.write(_CLIP_HEADER.pack(CLIP_MAGIC, T, h, w))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_clip(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CLIP_HEADER.size:
        raise ValueError(f"{path}: truncated clip header")
    magic, T, h, w = _CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise ValueError(f"{path}: bad clip magic {magic!r}")
    expected = T * h * w * 4 * 4
    body = data[_CLIP_HEADER.size:]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(T, h, w, 4).astype(np.float32)


# -- manifests ---------------------------------------------------------------

def _meta_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".meta.json")


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    path = Path(path)
    lines = [json.dumps(r.to_json(manifest.vocab)) for r in manifest.records]
    path.write_text("".join(line + "\n" for line in lines))
    meta = {"vocabularies": manifest.vocab.to_dict(), "seed": manifest.seed}
    _meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    meta_path = _meta_path(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        vocab, seed = Vocabularies.from_dict(meta["vocabularies"]), int(meta.get("seed", 0))
    else:
        vocab = Vocabularies(*(tuple(sorted({r[k] for r in rows})) for k in ("subject", "action", "object")))
        seed = 0
    index = [{n: i for i, n in enumerate(names)} for names in (vocab.subjects, vocab.actions, vocab.objects)]
    records = []
    for lineno, row in enumerate(rows, start=1):
        try:
            triplet = Triplet(index[0][row["subject"]], index[1][row["action"]], index[2][row["object"]])
            records.append(ManifestRecord(row["video_id"], row["path"], int(row["num_frames"]),
                                          row["caption"], triplet, row.get("split", "train")))
        except KeyError as exc:
            raise ValueError(f"{path}: record {lineno} has unknown or missing field {exc}") from None
    return DatasetManifest(records, vocab, seed, root=path.parent)


# -- splitting ---------------------------------------------------------------

def _cover(triplets: Sequence[Triplet], rng: np.random.Generator) -> set[Triplet]:
    """Greedy set cover so every class id keeps at least one triplet."""
    uncovered = {(axis, v) for t in triplets for axis, v in enumerate(t)}
    order = [triplets[i] for i in rng.permutation(len(triplets))]
    chosen = set()
    while uncovered:
        best = max(order, key=lambda t: sum((axis, v) in uncovered for axis, v in enumerate(t)))
        chosen.add(best)
        uncovered -= {(axis, v) for axis, v in enumerate(best)}
    return chosen


def split_compositional(manifest: DatasetManifest, holdout_fraction: float, seed: int) -> DatasetManifest:
    """Hold out whole triplets as test_unseen; split the rest 80/10/10 by clip."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    triplets = sorted({r.triplet for r in manifest.records})
    n_hold = math.ceil(holdout_fraction * len(triplets) - 1e-9)
    protected = _cover(triplets, rng)
    candidates = [t for t in triplets if t not in protected]
    if n_hold > len(candidates):
        raise InfeasibleSplitError(
            f"cannot hold out {n_hold} of {len(triplets)} triplets while keeping every class in train "
            f"(at most {len(candidates)} possible)")
    held = {candidates[i] for i in rng.permutation(len(candidates))[:n_hold]}

    records = [replace(r) for r in manifest.records]
    rest = [i for i, r in enumerate(records) if r.triplet not in held]
    for i, r in enumerate(records):
        if r.triplet in held:
            r.split = "test_unseen"
    order = [rest[i] for i in rng.permutation(len(rest))]
    n_val = int(round(0.1 * len(order)))
    n_test = int(round(0.1 * len(order)))
    n_train = len(order) - n_val - n_test
    for pos, idx in enumerate(order):
        records[idx].split = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test_seen")

    # every protected triplet contributes its first clip to train, so class coverage survives
    seen_train = {r.triplet for r in records if r.split == "train"}
    for idx in sorted(rest):
        r = records[idx]
        if r.triplet in protected and r.triplet not in seen_train:
            r.split = "train"
            seen_train.add(r.triplet)
    return DatasetManifest(records, manifest.vocab, manifest.seed, manifest.root)


def clip_seed(seed: int, triplet: Triplet, clip_index: int) -> int:
    ss = np.random.SeedSequence([seed, *triplet, clip_index])
    return int(ss.generate_state(1)[0])


def all_triplets(vocab: Vocabularies) -> Iterable[Triplet]:
    ks, ka, ko = vocab.sizes
    for s in range(ks):
        for a in range(ka):
            for o in range(ko):
                yield Triplet(s, a, o)


def generate_dataset(spec: SynthSpec, seed: int, out_dir: Path, workers: int = 1) -> DatasetManifest:
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    try:
        clip_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    jobs = []
    for t in all_triplets(spec.vocab):
        for c in range(spec.clips_per_triplet):
            jobs.append((f"clip_{len(jobs):05d}", t, clip_seed(seed, t, c)))

    def render(job):
        video_id, t, s = job
        sample = render_video(t, s, spec, video_id)
        rel = f"clips/{video_id}.racv"
        write_clip(out_dir / rel, sample.frames)
        return ManifestRecord(video_id, rel, spec.num_frames, sample.caption, t)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(render, jobs))
    else:
        records = [render(job) for job in jobs]
    manifest = split_compositional(DatasetManifest(records, spec.vocab, seed, out_dir), spec.holdout_fraction, seed)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_sample(manifest: DatasetManifest, record: ManifestRecord) -> VideoSample:
    frames = read_clip(manifest.resolve(record))
    return VideoSample(record.video_id, frames, record.caption, record.triplet, record.split)
