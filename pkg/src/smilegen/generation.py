"""Inference pipeline: first-frame landmarks + label -> conditional and K mode sequences -> face frames."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import landmarks as lm
from .checkpoint import ModelState
from .dataset import face_to_image, label_id
from .errors import DependencyError, ValidationError

CONDITIONAL = "conditional"


@dataclass(frozen=True, eq=False)
class GeneratedSequence:
    """Arrays: decoded (T,1,S,S) sigmoid output, images (T,1,S,S) binarized, points (T,68,2), faces (T,3,S,S) or None."""

    tag: str
    label: str
    decoded: np.ndarray
    images: np.ndarray
    points: np.ndarray
    faces: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.points)


def _require(state: ModelState, phases) -> None:
    missing = [p for p in phases if p not in state.lineage]
    if missing:
        raise DependencyError(f"checkpoint lacks trained phase(s) {missing}; lineage is {state.lineage}")


@torch.no_grad()
def initial_embedding(state: ModelState, first_images: np.ndarray) -> torch.Tensor:
    """VAE mean of the first landmark images (B,1,S,S); noise-free for deterministic generation."""
    return state.vae.encode(torch.as_tensor(first_images, dtype=torch.float32)).mean


@torch.no_grad()
def generate_embeddings(state: ModelState, first_images: np.ndarray, labels, T: int | None = None,
                        modes: bool = True):
    """Returns (cond (B,T,D), mode sequences (B,K,T,D) or None). Output t stands for frame t of the clip."""
    state.eval()
    T = state.config.T if T is None else T
    h0 = initial_embedding(state, first_images)
    cond = state.cond_gen.rollout(h0, torch.as_tensor(labels, dtype=torch.long), T)
    seqs = state.mode_bank(cond).sequences if modes else None
    return cond, seqs


@torch.no_grad()
def decode_embeddings(state: ModelState, h: torch.Tensor) -> np.ndarray:
    lead = h.shape[:-1]
    out = state.vae.decode(h.reshape(-1, h.shape[-1]))
    return out.reshape(*lead, *out.shape[1:]).numpy()


def extract_landmarks(images: np.ndarray, init: np.ndarray, state: ModelState) -> np.ndarray:
    return lm.track_landmarks(images, init, model=state.shape_model)


@torch.no_grad()
def translate(state: ModelState, images: np.ndarray, neutral: np.ndarray, batch: int = 32) -> np.ndarray:
    """Face frames (T,3,S,S) in [-1,1] from binary landmark images (T,1,S,S) and one neutral face (3,S,S)."""
    _require(state, ["translator"])
    state.translator_gen.eval()
    out = []
    y_all = torch.as_tensor(images, dtype=torch.float32)
    z0 = torch.as_tensor(neutral, dtype=torch.float32)
    for i in range(0, len(y_all), batch):
        y = y_all[i:i + batch]
        out.append(state.translator_gen(y, z0.expand(len(y), -1, -1, -1)).numpy())
    return np.concatenate(out)


def generate(state: ModelState, first_points: np.ndarray, label: str, neutral_face: np.ndarray | None = None,
             modes: bool = True, T: int | None = None) -> list[GeneratedSequence]:
    """Full pipeline for one input. `first_points` are aligned (68,2) coordinates of the neutral frame."""
    needed = ["vae", "cond"] + (["multimode"] if modes else [])
    _require(state, needed)
    if neutral_face is not None:
        _require(state, ["translator"])
    lab = label_id(label)
    first_points = np.asarray(first_points, dtype=np.float64)
    y0 = lm.rasterize_points(first_points, state.config.side)[None, None]
    cond, seqs = generate_embeddings(state, y0, [lab], T, modes)
    named = [(CONDITIONAL, cond[0])]
    if seqs is not None:
        named += [(f"mode_{k + 1}", seqs[0, k]) for k in range(seqs.shape[1])]
    out = []
    for tag, h in named:
        decoded = decode_embeddings(state, h)
        binary = (decoded >= 0.5).astype(np.float32)
        points = extract_landmarks(binary, first_points, state)
        faces = translate(state, binary, neutral_face) if neutral_face is not None else None
        out.append(GeneratedSequence(tag, label, decoded, binary, points, faces))
    return out


def _save_gif(frames: list[Image.Image], path: Path) -> None:
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=80, loop=0, optimize=False)


def write_generated(seqs: list[GeneratedSequence], root, sidecar: dict, reference: str | None = None,
                    identity: str = "generated") -> Path:
    """One directory per sequence in the dataset layout, landmark PNGs under landmarks/, faces under frames/."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        d = root / s.tag
        (d / "landmarks").mkdir(parents=True, exist_ok=True)
        meta = {
            "frames": [{"points": p.tolist()} for p in s.points],
            "label": s.label,
            "identity": identity,
            "source_id": f"{reference or identity}_{s.tag}",
            "mode": s.tag,
            "reference": reference,
        }
        (d / "sequence.json").write_text(json.dumps(meta, sort_keys=True))
        lm_imgs = [Image.fromarray((img[0] * 255).astype(np.uint8), mode="L") for img in s.images]
        for t, img in enumerate(lm_imgs):
            img.save(d / "landmarks" / f"{t:04d}.png")
        gif_frames = lm_imgs
        if s.faces is not None:
            (d / "frames").mkdir(exist_ok=True)
            gif_frames = [face_to_image(f) for f in s.faces]
            for t, img in enumerate(gif_frames):
                img.save(d / "frames" / f"{t:04d}.png")
        _save_gif([f.convert("P", palette=Image.Palette.ADAPTIVE) if f.mode == "RGB" else f for f in gif_frames],
                  d / "sequence.gif")
    (root / "generation.json").write_text(json.dumps(
        {**sidecar, "sequences": [s.tag for s in seqs]}, sort_keys=True, indent=1))
    return root


def check_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.shape != (lm.N_POINTS, 2):
        raise ValidationError(f"expected ({lm.N_POINTS}, 2) first-frame landmarks, got {points.shape}")
    return points
