"""Model state container and the unified checkpoint archive.

The archive is a zip holding ``manifest.json`` plus one ``.npy`` member per
tensor under ``<section>/<name>.npy``. Member order and timestamps are fixed so
that save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cond_gen import ConditionalGenerator
from .dataset import LABELS
from .errors import IncompatibleCheckpointError
from .landmarks import DisplacementModel
from .multimode import ModeBank, ModeDiscriminator
from .translator import PatchDiscriminator, UNetGenerator
from .vae import LandmarkVAE

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

# section name -> phase that trains it
SECTIONS = {
    "vae": "vae",
    "cond_gen": "cond",
    "mode_bank": "multimode",
    "mode_disc": "multimode",
    "translator_gen": "translator",
    "translator_disc": "translator",
}


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 100
    hidden: int = 256
    label_dim: int = 16
    K: int = 3
    T: int = 32
    side: int = 64
    vae_channels: tuple = (64, 128, 256, 512)
    translator_channels: tuple = (64, 128, 256, 512, 512, 512)
    disc_channels: tuple = (64, 128, 256, 512)
    labels: tuple = LABELS
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("vae_channels", "translator_channels", "disc_channels", "labels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def fingerprint(self) -> str:
        arch = asdict(self)
        arch.pop("seed")
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelState:
    config: ModelConfig
    lineage: list = field(default_factory=list)
    epochs: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    shape_model: DisplacementModel | None = None

    def __post_init__(self):
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.vae = LandmarkVAE(cfg.latent_dim, cfg.vae_channels)
            self.cond_gen = ConditionalGenerator(cfg.latent_dim, cfg.hidden, cfg.label_dim, len(cfg.labels))
            self.mode_disc = ModeDiscriminator(cfg.K, cfg.latent_dim)
            self.translator_gen = UNetGenerator(cfg.translator_channels)
            self.translator_disc = PatchDiscriminator(cfg.disc_channels)
        self.mode_bank = ModeBank(cfg.K, cfg.latent_dim, cfg.hidden, seed=cfg.seed + 1000)

    def module(self, section: str) -> torch.nn.Module:
        return getattr(self, section)

    def trained_sections(self) -> list[str]:
        return [s for s, phase in SECTIONS.items() if phase in self.lineage]

    def reset_section(self, section: str, seed: int) -> None:
        """Fresh initialization, for modules a phase trains from scratch."""
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if section == "mode_bank":
                self.mode_bank = ModeBank(cfg.K, cfg.latent_dim, cfg.hidden, seed=seed)
            elif section == "mode_disc":
                self.mode_disc = ModeDiscriminator(cfg.K, cfg.latent_dim)
            elif section == "translator_gen":
                self.translator_gen = UNetGenerator(cfg.translator_channels)
            elif section == "translator_disc":
                self.translator_disc = PatchDiscriminator(cfg.disc_channels)
            elif section == "cond_gen":
                self.cond_gen = ConditionalGenerator(cfg.latent_dim, cfg.hidden, cfg.label_dim, len(cfg.labels))
            elif section == "vae":
                self.vae = LandmarkVAE(cfg.latent_dim, cfg.vae_channels)

    def eval(self) -> "ModelState":
        for s in SECTIONS:
            self.module(s).eval()
        return self

    def parameter_snapshot(self, sections=None) -> dict:
        out = {}
        for s in sections or SECTIONS:
            for name, t in self.module(s).state_dict().items():
                out[f"{s}/{name}"] = t.detach().clone()
        return out

    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def manifest(state: ModelState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "fingerprint": state.fingerprint(),
        "config": asdict(state.config),
        "lineage": list(state.lineage),
        "epochs": dict(state.epochs),
        "settings": state.settings,
        "labels": list(state.config.labels),
        "K": state.config.K,
        "T": state.config.T,
        "kl_weight": state.settings.get("kl_weight", 1.0),
        "sections": state.trained_sections(),
        "shape_model": state.shape_model is not None,
    }


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "manifest.json", json.dumps(manifest(state), sort_keys=True, indent=1).encode())
        for section in state.trained_sections():
            for name, tensor in state.module(section).state_dict().items():
                _write_member(zf, f"{section}/{name}.npy", _npy_bytes(tensor.detach().cpu().numpy()))
        if state.shape_model is not None:
            _write_member(zf, "shape_model/components.npy", _npy_bytes(state.shape_model.components))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelState:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        man = json.loads(zf.read("manifest.json"))
        if man.get("format_version") != FORMAT_VERSION:
            raise IncompatibleCheckpointError(f"{path}: format version {man.get('format_version')} != {FORMAT_VERSION}")
        config = ModelConfig.from_dict(man["config"])
        if config.fingerprint() != man["fingerprint"]:
            raise IncompatibleCheckpointError(f"{path}: manifest fingerprint does not match its own config")
        if expected is not None and expected.fingerprint() != config.fingerprint():
            raise IncompatibleCheckpointError(
                f"{path}: architecture fingerprint {config.fingerprint()} does not match the requested "
                f"configuration {expected.fingerprint()} (K={config.K} vs K={expected.K})"
            )
        state = ModelState(config, lineage=list(man["lineage"]), epochs=dict(man["epochs"]),
                           settings=dict(man.get("settings", {})))
        for section in man["sections"]:
            module = state.module(section)
            current = module.state_dict()
            loaded = {}
            for name, ref in current.items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{section}/{name}.npy")), allow_pickle=False)
                if tuple(arr.shape) != tuple(ref.shape):
                    raise IncompatibleCheckpointError(f"{path}: {section}/{name} has shape {arr.shape}, expected {tuple(ref.shape)}")
                loaded[name] = torch.from_numpy(arr.copy())
            module.load_state_dict(loaded)
        if man.get("shape_model"):
            comps = np.lib.format.read_array(io.BytesIO(zf.read("shape_model/components.npy")))
            state.shape_model = DisplacementModel(comps)
    return state
