"""Sequence datasets: on-disk loading, fixed-length preparation and the synthetic smile corpus."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import landmarks as lm
from .errors import ParseError, ValidationError

LABELS = ("spontaneous", "posed")


def label_id(label: str) -> int:
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValidationError(f"unknown expression label {label!r}; expected one of {LABELS}") from None


@dataclass(frozen=True)
class ClassDynamics:
    """Smile trajectory of one expression class: s(u) = min(u / apex_fraction, 1) ** onset_exponent."""

    onset_exponent: float
    apex_fraction: float
    corner_lift: float = 0.04
    corner_stretch: float = 0.04
    eye_dip: float = 0.0

    def curve(self, T: int, exponent_scale: float = 1.0) -> np.ndarray:
        u = np.arange(T) / (T - 1)
        return np.minimum(u / self.apex_fraction, 1.0) ** (self.onset_exponent * exponent_scale)

    def apex_frame(self, T: int) -> int:
        return int(np.argmax(self.curve(T)))


@dataclass(frozen=True)
class ModeAttributes:
    """Per-mode deformation amplitudes, reached at the smile apex."""

    mouth_open: float = 0.0
    brow_raise: float = 0.0
    eye_closure: float = 0.0
    cheek_widen: float = 0.0


DEFAULT_DYNAMICS = {
    "spontaneous": ClassDynamics(onset_exponent=1.5, apex_fraction=0.7, eye_dip=0.5),
    "posed": ClassDynamics(onset_exponent=0.5, apex_fraction=0.5),
}

# wide open mouth / closed mouth with raised brows / closed eyes with puffed cheeks
DEFAULT_MODES = (
    ModeAttributes(mouth_open=0.13, brow_raise=-0.03),
    ModeAttributes(brow_raise=0.10, cheek_widen=-0.02),
    ModeAttributes(mouth_open=0.03, eye_closure=1.0, cheek_widen=0.12, brow_raise=-0.05),
)


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 4
    modes_per_class: int = 3
    T: int = 32
    seed: int = 0
    labels: tuple = LABELS
    train_fraction: float = 2 / 3
    side: int = lm.IMAGE_SIDE
    dilation: int = 3
    amplitude_scale: float = 1.0
    dynamics: dict = field(default_factory=lambda: dict(DEFAULT_DYNAMICS))
    modes: tuple = DEFAULT_MODES

    def __post_init__(self):
        if self.T < 2:
            raise ValidationError("T must be at least 2")
        if self.modes_per_class < 1:
            raise ValidationError("modes_per_class must be at least 1")
        if self.modes_per_class > len(self.modes):
            raise ValidationError(f"only {len(self.modes)} mode presets are configured")
        if self.num_identities < 1:
            raise ValidationError("num_identities must be at least 1")
        for label in self.labels:
            label_id(label)
            if label not in self.dynamics:
                raise ValidationError(f"no dynamics configured for label {label!r}")


@dataclass(frozen=True)
class LoadConfig:
    T: int = 32
    train_fraction: float = 2 / 3
    seed: int = 0
    side: int = lm.IMAGE_SIDE
    dilation: int = 3


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """One prepared sequence. Arrays: points (T, 68, 2), images (T, 1, S, S), faces (T, 3, S, S) in [-1, 1]."""

    points: np.ndarray
    images: np.ndarray
    label: str
    source_id: str
    identity: str
    faces: np.ndarray | None = None
    neutral_face: np.ndarray | None = None
    mode_tag: int | None = None

    def __post_init__(self):
        T = len(self.points)
        if T == 0:
            raise ValidationError(f"{self.source_id}: empty sequence")
        if len(self.images) != T or (self.faces is not None and len(self.faces) != T):
            raise ValidationError(f"{self.source_id}: landmark, image and face lists differ in length")
        label_id(self.label)

    @property
    def T(self) -> int:
        return len(self.points)

    @property
    def label_index(self) -> int:
        return label_id(self.label)

    @property
    def landmarks(self) -> list[lm.LandmarkSet]:
        return [lm.LandmarkSet(p) for p in self.points]

    @property
    def landmark_images(self) -> list[lm.LandmarkImage]:
        return [lm.LandmarkImage(img, binary=True) for img in self.images]

    @property
    def z0(self) -> np.ndarray | None:
        if self.neutral_face is not None:
            return self.neutral_face
        return None if self.faces is None else self.faces[0]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple

    def __post_init__(self):
        overlap = {s.source_id for s in self.train} & {s.source_id for s in self.test}
        if overlap:
            raise ValidationError(f"train and test share sequences: {sorted(overlap)}")

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)

    @property
    def all(self) -> tuple:
        return self.train + self.test


def sample_indices(n: int, T: int) -> np.ndarray:
    """Frame indices for a clip of n frames: uniform stride when n >= T, last frame repeated otherwise."""
    if T < 2:
        raise ValidationError("T must be at least 2")
    if n < 1:
        raise ValidationError("cannot prepare an empty sequence")
    if n >= T:
        return (np.arange(T) * n) // T
    return np.concatenate([np.arange(n), np.full(T - n, n - 1)])


def prepare_sequence(frames: Sequence, T: int) -> list:
    idx = sample_indices(len(frames), T)
    return [frames[i] for i in idx]


def split_identities(identities: Sequence[str], train_fraction: float, seed: int) -> tuple[set, set]:
    ids = sorted(set(identities))
    if not 0.0 < train_fraction <= 1.0:
        raise ValidationError("train fraction must lie in (0, 1]")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    train = {ids[i] for i in order[:n_train]}
    return train, set(ids) - train


def _split(samples: list[SequenceSample], train_fraction: float, seed: int) -> DatasetSplit:
    train_ids, _ = split_identities([s.identity for s in samples], train_fraction, seed)
    train = tuple(s for s in samples if s.identity in train_ids)
    test = tuple(s for s in samples if s.identity not in train_ids)
    return DatasetSplit(train, test)


def to_face_array(img: Image.Image, side: int) -> np.ndarray:
    img = img.convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0


def face_to_image(face: np.ndarray) -> Image.Image:
    arr = np.clip((np.asarray(face).transpose(1, 2, 0) + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    return Image.fromarray(arr, "RGB")


def warp_face(img: Image.Image, transform: lm.AlignmentTransform) -> Image.Image:
    if np.allclose(transform.matrix, np.eye(2), atol=1e-6) and abs(transform.tx) < 1e-6 and abs(transform.ty) < 1e-6:
        return img
    w, h = img.size
    # PIL wants the output->input map in pixel units
    inv = transform.inverse()
    m = inv.matrix
    tx, ty = inv.tx * (w - 1), inv.ty * (h - 1)
    return img.transform((w, h), Image.AFFINE, (m[0, 0], m[0, 1], tx, m[1, 0], m[1, 1], ty), Image.BILINEAR)


def load_sequence_dir(path, cfg: LoadConfig = LoadConfig()) -> SequenceSample:
    path = Path(path)
    seq_file = path / "sequence.json"
    try:
        obj = json.loads(seq_file.read_text())
        raw = [lm.LandmarkSet.from_json(f) for f in obj["frames"]]
        label = obj["label"]
    except json.JSONDecodeError as exc:
        raise ParseError(f"{seq_file}: {exc}") from exc
    except (KeyError, TypeError, ParseError) as exc:
        raise ParseError(f"{seq_file}: malformed sequence file ({exc})") from exc
    except ValidationError as exc:
        raise ValidationError(f"{seq_file}: {exc}") from exc
    if not raw:
        raise ValidationError(f"{seq_file}: sequence has no frames")
    aligned = [lm.align(f) for f in raw]
    idx = sample_indices(len(raw), cfg.T)
    points = np.stack([aligned[i][0].points for i in idx])
    images = np.stack([lm.rasterize_points(p, cfg.side, cfg.dilation)[None] for p in points])

    faces = None
    frame_dir = path / "frames"
    if frame_dir.is_dir():
        files = sorted(frame_dir.glob("*.png"))
        if len(files) != len(raw):
            raise ValidationError(f"{frame_dir}: {len(files)} frames for {len(raw)} landmark sets")
        faces = np.stack([
            to_face_array(warp_face(Image.open(files[i]).convert("RGB"), aligned[i][1]), cfg.side) for i in idx
        ])
    neutral = None
    if (path / "neutral.png").exists():
        neutral = to_face_array(warp_face(Image.open(path / "neutral.png").convert("RGB"), aligned[0][1]), cfg.side)
    return SequenceSample(
        points=points, images=images, label=label, source_id=obj.get("source_id", path.name),
        identity=str(obj.get("identity", path.name)), faces=faces, neutral_face=neutral,
        mode_tag=obj.get("mode"),
    )


def load_dataset(root, cfg: LoadConfig = LoadConfig()) -> DatasetSplit:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "sequence.json").exists())
    if not dirs:
        raise ValidationError(f"{root}: no <id>/sequence.json entries found")
    return _split([load_sequence_dir(d, cfg) for d in dirs], cfg.train_fraction, cfg.seed)


def write_sample(sample: SequenceSample, root, extra: dict | None = None) -> Path:
    out = Path(root) / sample.source_id
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "frames": [{"points": p.tolist()} for p in sample.points],
        "label": sample.label,
        "identity": sample.identity,
        "source_id": sample.source_id,
    }
    if sample.mode_tag is not None:
        doc["mode"] = int(sample.mode_tag)
    doc.update(extra or {})
    (out / "sequence.json").write_text(json.dumps(doc, sort_keys=True))
    if sample.faces is not None:
        (out / "frames").mkdir(exist_ok=True)
        for t, face in enumerate(sample.faces):
            face_to_image(face).save(out / "frames" / f"{t:04d}.png")
    if sample.neutral_face is not None:
        face_to_image(sample.neutral_face).save(out / "neutral.png")
    return out


def write_corpus(split: DatasetSplit, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in sorted(split.all, key=lambda s: s.source_id):
        write_sample(s, root)
    return root


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class Identity:
    name: str
    shape: dict
    skin: tuple
    background: tuple
    lips: tuple

    def template(self) -> np.ndarray:
        return lm.neutral_template(**self.shape)


def make_identity(index: int, n: int, seed: int) -> Identity:
    rng = np.random.default_rng([seed, index, 7])
    shape = dict(
        jaw_width=0.27 * rng.uniform(0.92, 1.08),
        jaw_height=0.38 * rng.uniform(0.95, 1.05),
        mouth_half_width=0.09 * rng.uniform(0.9, 1.1),
        mouth_y=0.66 + rng.uniform(-0.012, 0.012),
        nose_length=0.135 * rng.uniform(0.9, 1.1),
        brow_y=0.33 + rng.uniform(-0.008, 0.008),
    )
    hue = (index / max(n, 1) + rng.uniform(0.0, 0.3 / max(n, 1))) % 1.0

    def rgb(h, s, v):
        return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(h % 1.0, s, v))

    return Identity(
        name=f"id{index:02d}",
        shape=shape,
        skin=rgb(hue, 0.45, 0.9),
        background=rgb(hue + 0.5, 0.35, 0.35),
        lips=rgb(0.98, 0.7, 0.65),
    )


def deform(template: np.ndarray, smile: float, dyn: ClassDynamics, mode: ModeAttributes,
           eye_dip: float = 0.0) -> np.ndarray:
    """Apply the smile and mode attributes at smile level `smile` in [0, 1]."""
    p = template.copy()
    lift, stretch = dyn.corner_lift * smile, dyn.corner_stretch * smile
    for idx, weight, side in ((48, 1.0, -1), (54, 1.0, 1), (60, 0.7, -1), (64, 0.7, 1),
                              (49, 0.5, -1), (53, 0.5, 1), (59, 0.5, -1), (55, 0.5, 1)):
        p[idx, 0] += side * stretch * weight
        p[idx, 1] -= lift * weight
    p[[50, 51, 52], 1] -= 0.2 * lift

    drop = mode.mouth_open * smile
    p[[55, 56, 57, 58, 59], 1] += drop
    p[[65, 66, 67], 1] += drop
    p[[60, 64], 1] += 0.3 * drop
    k = np.arange(17)
    jaw_weight = np.sin(np.pi * k / 16) ** 2
    p[lm.JAW, 1] += drop * jaw_weight

    p[lm.BROWS, 1] -= mode.brow_raise * smile

    widen = mode.cheek_widen * smile * np.sin(np.pi * k / 16)
    p[lm.JAW, 0] += np.where(k < 8, -widen, np.where(k > 8, widen, 0.0))

    closure = min(1.0, mode.eye_closure * smile + eye_dip)
    for start in (36, 42):
        center_y = p[start:start + 6, 1].mean()
        for offset in (1, 2, 4, 5):
            i = start + offset
            p[i, 1] = center_y + (p[i, 1] - center_y) * (1.0 - 0.9 * closure)
    return p


def render_face(points: np.ndarray, identity: Identity, side: int = lm.IMAGE_SIDE, supersample: int = 4) -> np.ndarray:
    """Cartoon RGB face in [-1, 1], shape (3, side, side)."""
    big = side * supersample
    scale = big - 1
    pts = [tuple(q) for q in np.asarray(points) * scale]
    img = Image.new("RGB", (big, big), identity.background)
    draw = ImageDraw.Draw(img)

    jaw = pts[0:17]
    x0, x16 = jaw[0][0], jaw[16][0]
    cx, top_y = (x0 + x16) / 2, jaw[0][1]
    rx = (x16 - x0) / 2
    theta = np.linspace(0.0, np.pi, 24)
    forehead = [(cx + rx * np.cos(a), top_y - 0.3 * scale * np.sin(a)) for a in theta]
    draw.polygon(jaw + forehead[1:-1], fill=identity.skin)

    dark = (40, 30, 30)
    width = max(1, supersample * 2)
    draw.line(pts[17:22], fill=dark, width=width)
    draw.line(pts[22:27], fill=dark, width=width)
    shade = tuple(int(c * 0.75) for c in identity.skin)
    draw.line(pts[27:31], fill=shade, width=width)
    draw.line(pts[31:36], fill=shade, width=width)

    for start in (36, 42):
        eye = pts[start:start + 6]
        draw.polygon(eye, fill=(245, 245, 245), outline=dark)
        ys = [q[1] for q in eye]
        aperture = (max(ys) - min(ys)) / 2
        ex = sum(q[0] for q in eye) / 6
        ey = sum(ys) / 6
        r = min(aperture, 0.018 * scale)
        if r > supersample:
            draw.ellipse([ex - r, ey - r, ex + r, ey + r], fill=dark)

    draw.polygon(pts[48:60], fill=identity.lips)
    inner = pts[60:68]
    ys = [q[1] for q in inner]
    if max(ys) - min(ys) > 0.012 * scale:
        draw.polygon(inner, fill=(60, 15, 20))
    else:
        draw.line(inner[:5], fill=(120, 30, 40), width=max(1, supersample))

    small = img.resize((side, side), Image.BOX)
    return np.asarray(small, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0


def synth_sequence(cfg: SynthConfig, identity: Identity, label: str, mode_index: int,
                   jitter_rng: np.random.Generator | None = None) -> SequenceSample:
    dyn = cfg.dynamics[label]
    mode = cfg.modes[mode_index]
    mode = ModeAttributes(*(cfg.amplitude_scale * v for v in
                            (mode.mouth_open, mode.brow_raise, mode.eye_closure, mode.cheek_widen)))
    exponent_scale = 1.0 if jitter_rng is None else jitter_rng.uniform(0.9, 1.1)
    smile = dyn.curve(cfg.T, exponent_scale)
    u = np.arange(cfg.T) / (cfg.T - 1)
    dip = dyn.eye_dip * np.exp(-(((u - 0.5) / 0.12) ** 2))
    template = identity.template()
    frames = np.stack([deform(template, s, dyn, mode, d) for s, d in zip(smile, dip)])
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValidationError("synthetic amplitudes push landmarks outside [0, 1]")
    images = np.stack([lm.rasterize_points(p, cfg.side, cfg.dilation)[None] for p in frames])
    faces = np.stack([render_face(p, identity, cfg.side) for p in frames])
    return SequenceSample(
        points=frames, images=images, label=label,
        source_id=f"{identity.name}_{label}_m{mode_index}", identity=identity.name,
        faces=faces, neutral_face=faces[0].copy(), mode_tag=mode_index,
    )


def synthesize(cfg: SynthConfig = SynthConfig()) -> DatasetSplit:
    samples = []
    for i in range(cfg.num_identities):
        identity = make_identity(i, cfg.num_identities, cfg.seed)
        for label in cfg.labels:
            for k in range(cfg.modes_per_class):
                rng = np.random.default_rng([cfg.seed, i, label_id(label), k])
                samples.append(synth_sequence(cfg, identity, label, k, rng))
    return _split(samples, cfg.train_fraction, cfg.seed)


def identities_for(cfg: SynthConfig) -> list[Identity]:
    return [make_identity(i, cfg.num_identities, cfg.seed) for i in range(cfg.num_identities)]


# ---------------------------------------------------------------- onset-slope oracle


def onset_probe_frame(T: int) -> int:
    return int(round(0.25 * (T - 1)))


def onset_ratio(curve: np.ndarray) -> float:
    """Fraction of the total rise reached at the probe frame of a 5-frame-smoothed intensity curve."""
    from .evaluation import moving_average

    c = moving_average(np.asarray(curve, dtype=np.float64))
    rise = c.max() - c[0]
    if rise <= 1e-9:
        return 0.0
    return float((c[onset_probe_frame(len(c))] - c[0]) / rise)


def onset_threshold(cfg: SynthConfig) -> float:
    """Midpoint between the nominal posed and spontaneous onset ratios."""
    ratios = []
    for label in ("spontaneous", "posed"):
        s = cfg.dynamics[label].curve(cfg.T)
        ratios.append(onset_ratio(s))
    return float(np.mean(ratios))


def classify_onset(curve: np.ndarray, threshold: float) -> str:
    return "posed" if onset_ratio(curve) >= threshold else "spontaneous"
