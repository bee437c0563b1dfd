"""Phased training schedule: VAE, conditional generator, mode bank, translator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import ModelState
from .cond_gen import bce_from_decoded
from .dataset import DatasetSplit, label_id
from .errors import DependencyError, NonFiniteLossError, ValidationError
from .landmarks import DisplacementModel
from .multimode import multimode_objective, pull_loss, push_loss
from .translator import disc_loss_from_probs, gen_adv_loss_from_probs, make_pair, reconstruction_loss
from .vae import bce_per_sample, kl_per_sample, sample_latent, vae_loss

log = logging.getLogger(__name__)

PHASES = ("vae", "cond", "multimode", "translator")
DEFAULT_EPOCHS = {"vae": 50, "cond": 20, "multimode": 10, "translator": 20}
PREREQUISITE = {"vae": None, "cond": "vae", "multimode": "cond", "translator": None}
_PHASE_SEED = {p: i * 7919 for i, p in enumerate(PHASES)}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    frame_batch: int = 32
    sequence_batch: int = 4
    seed: int = 0
    finetune_lr_scale: float = 0.1
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")


@dataclass(frozen=True)
class LossWeights:
    kl: float = 1.0
    pull: float = 1.0
    push: float = 0.1
    rec: float = 10.0
    free_running: float = 1.0
    non_saturating: bool = False
    finetune_vae_loss: bool = True


@dataclass(frozen=True)
class PhasePlan:
    phase: str
    epochs: int | None = None
    frames_per_sequence: int | None = None
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValidationError(f"unknown phase {self.phase!r}; expected one of {PHASES}")

    @property
    def n_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.phase] if self.epochs is None else self.epochs


def configure_determinism(threads: int | None = 1) -> None:
    """Single-threaded, deterministic kernels; used by --deterministic and the acceptance suite."""
    if threads is not None:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _stack_sequences(samples, attr: str) -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(s, attr) for s in samples]).astype(np.float32))


def _labels(samples) -> torch.Tensor:
    return torch.tensor([label_id(s.label) for s in samples], dtype=torch.long)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i:i + size]


class _Trainer:
    def __init__(self, state: ModelState, plan: PhasePlan, data: DatasetSplit, opt: OptimizerConfig,
                 weights: LossWeights, log_path=None, dump_dir=None):
        self.state, self.plan, self.data, self.opt, self.w = state, plan, data, opt, weights
        self.log_path = Path(log_path) if log_path else None
        self.dump_dir = Path(dump_dir) if dump_dir else None
        seed = opt.seed + _PHASE_SEED[plan.phase]
        self.seed = seed
        self.torch_gen = torch.Generator().manual_seed(seed)
        self.epoch = 0
        self.step = 0

    def rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, epoch])

    def adam(self, groups):
        return torch.optim.Adam(groups, lr=self.opt.lr, betas=tuple(self.opt.betas))

    def check(self, values: dict) -> None:
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if not bad:
            return
        info = {"phase": self.plan.phase, "epoch": self.epoch, "step": self.step, "losses": values}
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            path = self.dump_dir / f"nonfinite_{self.plan.phase}.json"
            path.write_text(json.dumps(info, indent=1, default=str))
            info["dump"] = str(path)
        raise NonFiniteLossError(f"non-finite loss in phase {self.plan.phase}: {info}")

    def emit(self, record: dict) -> dict:
        record = {"phase": self.plan.phase, "epoch": self.epoch, **record}
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("%s", record)
        return record

    def noise(self, *shape) -> torch.Tensor:
        return torch.randn(*shape, generator=self.torch_gen)

    def encode_sequences(self, y: torch.Tensor):
        B, T = y.shape[:2]
        vae = self.state.vae
        dist = vae.encode(y.reshape(B * T, *y.shape[2:]))
        z = sample_latent(dist, self.noise(B * T, vae.latent_dim))
        return dist, z, z.reshape(B, T, -1)

    def vae_finetune_term(self, y, dist, z_flat):
        if not self.w.finetune_vae_loss:
            return torch.zeros(())
        B, T = y.shape[:2]
        recon = self.state.vae.decode(z_flat)
        per_frame = bce_per_sample(recon, y.reshape(B * T, *y.shape[2:])) + self.w.kl * kl_per_sample(dist)
        return per_frame.reshape(B, T).sum(1).mean()


def _train_vae(tr: _Trainer) -> list[dict]:
    st = tr.state
    frames = torch.from_numpy(np.concatenate([s.images for s in tr.data.train]).astype(np.float32))
    st.shape_model = DisplacementModel.fit([s.points for s in tr.data.train])
    st.vae.train()
    optim = tr.adam(st.vae.parameters())
    records = []
    for epoch in range(tr.plan.n_epochs):
        tr.epoch = epoch + 1
        sums = np.zeros(3)
        for idx in _batches(len(frames), tr.opt.frame_batch, tr.rng(epoch)):
            x = frames[idx]
            recon, dist = st.vae(x, tr.noise(len(idx), st.vae.latent_dim))
            total, bce, kl = vae_loss(x, recon, dist, tr.w.kl)
            vals = [total.item(), bce.item(), kl.item()]
            tr.check(dict(zip(("total", "bce", "kl"), vals)))
            optim.zero_grad()
            total.backward()
            optim.step()
            tr.step += 1
            sums += np.array(vals) * len(idx)
        means = sums / len(frames)
        records.append(tr.emit({"total": means[0], "bce": means[1], "kl": means[2]}))
    return records


def _free_running_bce(tr: _Trainer, h0, labels, y) -> torch.Tensor:
    """Sequence BCE of the generator's own rollout, the path used at generation time. Skipped at weight 0."""
    if tr.w.free_running == 0:
        return torch.zeros(())
    h = tr.state.cond_gen.rollout(h0, labels, y.shape[1])
    return bce_from_decoded(tr.state.vae.decode(h.reshape(-1, h.shape[-1])), y)


def _train_cond(tr: _Trainer) -> list[dict]:
    st = tr.state
    Y = _stack_sequences(tr.data.train, "images")
    L = _labels(tr.data.train)
    T = Y.shape[1]
    st.vae.train()
    st.cond_gen.train()
    optim = tr.adam([
        {"params": st.vae.parameters(), "lr": tr.opt.lr * tr.opt.finetune_lr_scale},
        {"params": st.cond_gen.parameters()},
    ])
    keys = ("total", "bce", "bce_free", "vae")
    records = []
    for epoch in range(tr.plan.n_epochs):
        tr.epoch = epoch + 1
        sums, count = np.zeros(len(keys)), 0
        for idx in _batches(len(Y), tr.opt.sequence_batch, tr.rng(epoch)):
            y = Y[idx]
            dist, z_flat, z = tr.encode_sequences(y)
            h = st.cond_gen.rollout(z[:, 0], L[idx], T, teacher=z if tr.plan.teacher_forcing else None)
            seq_bce = bce_from_decoded(st.vae.decode(h.reshape(-1, h.shape[-1])), y)
            free_bce = _free_running_bce(tr, z[:, 0], L[idx], y) if tr.plan.teacher_forcing else torch.zeros(())
            vae_term = tr.vae_finetune_term(y, dist, z_flat)
            total = seq_bce + tr.w.free_running * free_bce + vae_term
            vals = [total.item(), seq_bce.item(), free_bce.item(), vae_term.item()]
            tr.check(dict(zip(keys, vals)))
            optim.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(st.cond_gen.parameters(), tr.opt.clip_norm)
            optim.step()
            tr.step += 1
            sums += np.array(vals) * len(idx)
            count += len(idx)
        records.append(tr.emit(dict(zip(keys, sums / count))))
    return records


def min_pairwise_distance(temporal_averages: torch.Tensor) -> torch.Tensor:
    """Per-sample minimum over generator pairs of the distance between temporal averages; (B,)."""
    d = torch.cdist(temporal_averages, temporal_averages)
    K = d.shape[-1]
    d = d + torch.eye(K) * torch.finfo(d.dtype).max
    return d.flatten(1).min(1).values


def init_mode_sections(state: ModelState, seed: int = 0) -> None:
    """Fresh mode bank and mode discriminator, exactly as the multimode phase starts them for `seed`."""
    base = seed + _PHASE_SEED["multimode"]
    state.reset_section("mode_bank", base + 1)
    state.reset_section("mode_disc", base + 2)


def _train_multimode(tr: _Trainer) -> list[dict]:
    st = tr.state
    init_mode_sections(st, tr.opt.seed)
    Y = _stack_sequences(tr.data.train, "images")
    L = _labels(tr.data.train)
    T = Y.shape[1]
    K = st.config.K
    for m in (st.vae, st.cond_gen, st.mode_bank, st.mode_disc):
        m.train()
    scale = tr.opt.finetune_lr_scale
    optim = tr.adam([
        {"params": st.vae.parameters(), "lr": tr.opt.lr * scale},
        {"params": st.cond_gen.parameters(), "lr": tr.opt.lr * scale},
        {"params": list(st.mode_bank.parameters()) + list(st.mode_disc.parameters())},
    ])
    recurrent = list(st.cond_gen.parameters()) + list(st.mode_bank.parameters())
    keys = ("total", "bce_cond", "bce_free", "bce_modes", "pull", "push", "vae", "disc_acc", "min_pair_dist")
    free = tr.plan.teacher_forcing and tr.w.free_running > 0
    records = []
    for epoch in range(tr.plan.n_epochs):
        tr.epoch = epoch + 1
        sums, count = np.zeros(len(keys)), 0
        for idx in _batches(len(Y), tr.opt.sequence_batch, tr.rng(epoch)):
            y = Y[idx]
            B = len(idx)
            dist, z_flat, z = tr.encode_sequences(y)
            h = st.cond_gen.rollout(z[:, 0], L[idx], T, teacher=z if tr.plan.teacher_forcing else None)
            seqs = [h]
            if free:
                # the bank reads the generator's own rollout, as it does at generation time
                h_bank = st.cond_gen.rollout(z[:, 0], L[idx], T)
                seqs.append(h_bank)
            else:
                h_bank = h
            outs = st.mode_bank(h_bank)
            all_seq = torch.cat([s[:, None] for s in seqs] + [outs.sequences], dim=1)
            n = all_seq.shape[1]
            decoded = st.vae.decode(all_seq.reshape(-1, all_seq.shape[-1])).reshape(B, n, T, *y.shape[2:])
            bce_cond = bce_from_decoded(decoded[:, 0], y)
            bce_free = bce_from_decoded(decoded[:, 1], y) if free else torch.zeros(())
            bce_k = [bce_from_decoded(decoded[:, n - K + k], y) for k in range(K)]
            pull = pull_loss(h_bank, outs.mode_wise_average)
            push = push_loss(outs.temporal_averages, st.mode_disc)
            vae_term = tr.vae_finetune_term(y, dist, z_flat)
            total = (bce_cond + tr.w.free_running * bce_free + vae_term
                     + multimode_objective(bce_k, pull, push, tr.w.pull, tr.w.push))
            with torch.no_grad():
                probs = st.mode_disc(outs.temporal_averages)
                acc = (probs.argmax(-1) == torch.arange(K)).float().mean().item()
                mpd = min_pairwise_distance(outs.temporal_averages).mean().item()
            vals = [total.item(), bce_cond.item(), bce_free.item(), sum(b.item() for b in bce_k) / K, pull.item(),
                    push.item(), vae_term.item(), acc, mpd]
            tr.check(dict(zip(keys, vals)))
            optim.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(recurrent, tr.opt.clip_norm)
            optim.step()
            tr.step += 1
            sums += np.array(vals) * B
            count += B
        m = sums / count
        records.append(tr.emit(dict(zip(keys, m))))
    return records


def _translator_pairs(samples, frames_per_sequence, rng):
    pairs = []
    for i, s in enumerate(samples):
        ts = np.arange(s.T)
        if frames_per_sequence is not None and frames_per_sequence < s.T:
            ts = np.sort(rng.choice(s.T, frames_per_sequence, replace=False))
        pairs.extend((i, int(t)) for t in ts)
    return np.array(pairs)


def _train_translator(tr: _Trainer) -> list[dict]:
    st = tr.state
    samples = [s for s in tr.data.train if s.faces is not None]
    if not samples:
        raise DependencyError("translator phase needs sequences with face frames")
    st.reset_section("translator_gen", tr.seed + 1)
    st.reset_section("translator_disc", tr.seed + 2)
    G, D = st.translator_gen, st.translator_disc
    G.train()
    D.train()
    Y = _stack_sequences(samples, "images")
    Z = _stack_sequences(samples, "faces")
    Z0 = torch.from_numpy(np.stack([s.z0 for s in samples]).astype(np.float32))
    opt_g = tr.adam(G.parameters())
    opt_d = tr.adam(D.parameters())
    keys = ("total", "disc", "gen_adv", "rec")
    records = []
    for epoch in range(tr.plan.n_epochs):
        tr.epoch = epoch + 1
        rng = tr.rng(epoch)
        pairs = _translator_pairs(samples, tr.plan.frames_per_sequence, rng)
        sums = np.zeros(len(keys))
        for idx in _batches(len(pairs), tr.opt.frame_batch, rng):
            si, ti = pairs[idx, 0], pairs[idx, 1]
            y, zt, z0 = Y[si, ti], Z[si, ti], Z0[si]
            w = G(y, z0)
            d_loss = disc_loss_from_probs(D(make_pair(z0, zt)), D(make_pair(z0, w.detach())))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            gen_adv = gen_adv_loss_from_probs(D(make_pair(z0, w)), tr.w.non_saturating)
            rec = reconstruction_loss(zt, w)
            g_total = gen_adv + tr.w.rec * rec
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()
            tr.step += 1
            vals = [g_total.item(), d_loss.item(), gen_adv.item(), rec.item()]
            tr.check(dict(zip(keys, vals)))
            sums += np.array(vals) * len(idx)
        m = sums / len(pairs)
        records.append(tr.emit(dict(zip(keys, m))))
    return records


_RUNNERS = {"vae": _train_vae, "cond": _train_cond, "multimode": _train_multimode, "translator": _train_translator}


def check_prerequisites(state: ModelState, phase: str) -> None:
    need = PREREQUISITE[phase]
    if need is not None and need not in state.lineage:
        raise DependencyError(f"phase {phase!r} requires a checkpoint that completed phase {need!r}; lineage is {state.lineage}")


def run_phase(state: ModelState, plan: PhasePlan, data: DatasetSplit, opt: OptimizerConfig = OptimizerConfig(),
              weights: LossWeights = LossWeights(), log_path=None, dump_dir=None) -> list[dict]:
    """Train one phase in place on `state` and return the per-epoch metric records."""
    check_prerequisites(state, plan.phase)
    if not data.train:
        raise ValidationError("training split is empty")
    if plan.phase != "translator" and data.train[0].T != state.config.T:
        raise ValidationError(f"sequences have T={data.train[0].T}, model expects T={state.config.T}")
    tr = _Trainer(state, plan, data, opt, weights, log_path, dump_dir)
    records = _RUNNERS[plan.phase](tr)
    state.lineage.append(plan.phase)
    state.epochs[plan.phase] = plan.n_epochs
    state.settings[plan.phase] = {"optimizer": asdict(opt), "weights": asdict(weights), "plan": asdict(plan)}
    state.settings["kl_weight"] = weights.kl
    state.eval()
    return records
