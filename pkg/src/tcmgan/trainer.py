"""Segmentor pretraining, adversarial training loop, LR schedule, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .datapipe import SliceSet, batch_iterator
from .datapipe.volumes import Modality
from .errors import ConfigError, EmptyDataset, FormatError
from .losses import Batch, LossWeights, Mode, d_total, dice_loss, g_total
from .nets import N_MODALITIES, ArchConfig, Pix2PixEnsemble, Segmentor, init_params
from .seeding import derive_seed

log = logging.getLogger(__name__)

STEP_SCHEDULE = ((0, 2e-4), (30, 1e-4), (60, 5e-5), (90, 1e-5))


@dataclass
class TrainConfig:
    mode: str = "TC-MGAN"
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 64
    epochs: int = 100
    lr_schedule: list = field(default_factory=lambda: [list(p) for p in STEP_SCHEDULE])
    seg_pretrain_epochs: int = 30
    seg_pretrain_lr: float = 1e-3
    betas: tuple = (0.5, 0.999)
    critic_steps_per_gen_step: int = 1
    seed: int = 0
    # pix2pix trains one network per target modality
    target_modality: Optional[str] = None
    checkpoint_every: int = 10
    sample_every: int = 10
    device: str = "cpu"

    def validate(self) -> None:
        mode = Mode.parse(self.mode)
        self.weights.validate()
        if self.batch_size < 1 or self.epochs < 0 or self.seg_pretrain_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        sched = [tuple(p) for p in self.lr_schedule]
        if not sched or sched[0][0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("lr_schedule epochs must be strictly increasing")
        if any(lr <= 0 for _, lr in sched) or self.seg_pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 1 <= self.critic_steps_per_gen_step <= 5:
            raise ConfigError("critic_steps_per_gen_step must be in [1, 5]")
        if mode is Mode.PIX2PIX and self.target_modality is None:
            raise ConfigError("pix2pix mode needs target_modality")
        if self.target_modality is not None:
            Modality.parse(self.target_modality)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            bad = set(d["weights"]) - set(LossWeights.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown loss weight keys {sorted(bad)}")
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "mode" in d:
            d["mode"] = Mode.parse(d["mode"]).value
        return cls(**d)


def lr_at(epoch: int, schedule) -> float:
    """Piecewise-constant learning rate for a 0-based epoch."""
    lr = None
    for start, value in schedule:
        if epoch >= start:
            lr = value
    if lr is None:
        raise ConfigError(f"no learning rate defined for epoch {epoch}")
    return float(lr)


def sample_target_modality(rng: torch.Generator, batch_size: int) -> torch.Tensor:
    """i.i.d. uniform labels over {0, 1, 2}."""
    return torch.randint(0, N_MODALITIES, (batch_size,), generator=rng)


@dataclass
class TrainState:
    config: TrainConfig
    arch: ArchConfig
    G: torch.nn.Module
    D: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    S: Optional[Segmentor] = None
    opt_s: Optional[torch.optim.Optimizer] = None
    seg_arch: Optional[ArchConfig] = None
    epoch: int = 0   # completed epochs
    step: int = 0    # processed batches

    @property
    def mode(self) -> Mode:
        return Mode.parse(self.config.mode)

    @property
    def device(self) -> torch.device:
        return resolve_device(self.config.device)

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d, self.opt_s):
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = lr

    @property
    def lr(self) -> float:
        return self.opt_g.param_groups[0]["lr"]


def resolve_device(name: str) -> torch.device:
    if name in ("accelerator", "cuda") and torch.cuda.is_available():
        return torch.device("cuda")
    return torch.device("cpu")


def init_state(config: TrainConfig, arch: ArchConfig, S: Optional[Segmentor] = None,
               seg_arch: Optional[ArchConfig] = None) -> TrainState:
    """Fresh G/D (and a private copy of S) with Adam optimisers.

    TC-MGAN freezes S; TC-MGAN-bw trains it with the generator objective.
    """
    config.validate()
    mode = Mode.parse(config.mode)
    if mode.uses_seg and S is None:
        raise ConfigError(f"mode {mode.value} needs a pre-trained segmentor")
    dev = resolve_device(config.device)
    G = init_params(arch, "generator").to(dev)
    D = init_params(arch, "discriminator").to(dev)
    lr = lr_at(0, config.lr_schedule)
    betas = tuple(config.betas)
    opt_g = torch.optim.Adam(G.parameters(), lr=lr, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=lr, betas=betas)
    opt_s = None
    if mode.uses_seg:
        S = copy.deepcopy(S).to(dev)
        if mode is Mode.TCMGAN:
            S.requires_grad_(False)
        else:
            S.requires_grad_(True)
            opt_s = torch.optim.Adam(S.parameters(), lr=lr, betas=betas)
    else:
        S = None
    rng = torch.Generator().manual_seed(derive_seed(config.seed, "train"))
    return TrainState(config, arch, G, D, opt_g, opt_d, rng, S, opt_s, seg_arch)


def make_batch(slices: SliceSet, idx, c: torch.Tensor, device=None) -> Batch:
    idx = np.asarray(idx, dtype=int)
    cn = c.cpu().numpy()
    x = torch.from_numpy(slices.source[idx])
    y = torch.from_numpy(slices.targets[idx, cn][:, None])
    gt = torch.from_numpy(slices.gt[idx].astype(np.float32))
    b = Batch(x, y, c.long(), gt)
    if device is not None and torch.device(device).type != "cpu":
        b = Batch(*(t.to(device) for t in b))
    return b


def batch_labels(state: TrainState, n: int) -> torch.Tensor:
    if state.mode is Mode.PIX2PIX:
        return torch.full((n,), int(Modality.parse(state.config.target_modality)), dtype=torch.long)
    return sample_target_modality(state.rng, n)


def _floats(terms: dict) -> dict:
    return {k: float(v.detach()) for k, v in terms.items()}


def train_step_d(state: TrainState, batch: Batch) -> dict:
    """One critic update on ``d_total``; G and S are not touched."""
    state.opt_d.zero_grad(set_to_none=True)
    total, terms = d_total(state.D, state.G, batch, state.config.weights, state.mode,
                           generator=state.rng)
    total.backward()
    state.opt_d.step()
    rec = _floats(terms)
    rec["d_total"] = float(total.detach())
    return rec


def train_step_g(state: TrainState, batch: Batch) -> dict:
    """One generator update on ``g_total`` (and S in bw mode); D is not touched."""
    state.opt_g.zero_grad(set_to_none=True)
    if state.opt_s is not None:
        state.opt_s.zero_grad(set_to_none=True)
    state.D.requires_grad_(False)
    try:
        total, terms = g_total(state.D, state.G, state.S, batch, state.config.weights, state.mode)
        total.backward()
    finally:
        state.D.requires_grad_(True)
    state.opt_g.step()
    if state.opt_s is not None:
        state.opt_s.step()
    rec = _floats(terms)
    rec["g_total"] = float(total.detach())
    return rec


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def _epoch_batches(state: TrainState, n: int):
    seed = derive_seed(state.config.seed, "batches")
    return batch_iterator(range(n), state.config.batch_size, seed=seed, shuffle=True,
                          epoch=state.epoch)


def run_epoch(state: TrainState, slices: SliceSet, tlog: TrainLog, max_steps: Optional[int] = None,
              skip: int = 0) -> bool:
    """Train one epoch; returns False if ``max_steps`` stopped it early."""
    k = state.config.critic_steps_per_gen_step
    for b, idx in enumerate(_epoch_batches(state, len(slices))):
        if b < skip:
            continue
        if max_steps is not None and state.step >= max_steps:
            return False
        c = batch_labels(state, len(idx))
        batch = make_batch(slices, idx, c, state.device)
        rec = {"epoch": state.epoch, "step": state.step, "lr": state.lr}
        rec.update(train_step_d(state, batch))
        if (state.step + 1) % k == 0:
            rec.update(train_step_g(state, batch))
        state.step += 1
        tlog.steps.append(rec)
    return True


def _epoch_summary(state: TrainState, steps: list, wall: float) -> dict:
    out = {"epoch": state.epoch + 1, "mode": state.mode.value, "lr": state.lr, "wall_time_s": wall}
    keys = sorted({k for r in steps for k in r} - {"epoch", "step", "lr"})
    for k in keys:
        vals = [r[k] for r in steps if k in r]
        out[k] = float(np.mean(vals))
    return out


def train(slices: SliceSet, config: TrainConfig, arch: ArchConfig, S: Optional[Segmentor] = None,
          seg_arch: Optional[ArchConfig] = None, state: Optional[TrainState] = None,
          out_dir=None, val: Optional[SliceSet] = None, max_steps: Optional[int] = None,
          epochs: Optional[int] = None, on_epoch: Optional[Callable] = None):
    """Alternate critic and generator updates over shuffled epochs.

    Resumes from ``state`` when given. Writes ``train_log.jsonl``, periodic
    checkpoints and sample grids under ``out_dir`` when given. Returns
    (state, TrainLog).
    """
    if len(slices) == 0:
        raise EmptyDataset("no training slices")
    if state is None:
        state = init_state(config, arch, S, seg_arch)
    cfg = state.config
    total_epochs = cfg.epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    while state.epoch < total_epochs:
        state.set_lr(lr_at(state.epoch, cfg.lr_schedule))
        t0 = time.perf_counter()
        n_before = len(tlog.steps)
        skip = state.step - state.epoch * _batches_per_epoch(len(slices), cfg.batch_size)
        finished = run_epoch(state, slices, tlog, max_steps, skip=max(skip, 0))
        if not finished:
            break
        summary = _epoch_summary(state, tlog.steps[n_before:], time.perf_counter() - t0)
        if val is not None:
            summary["val_ssim"] = validation_ssim(state.G, val)
        state.epoch += 1
        tlog.epochs.append(summary)
        log.info("epoch %d %s", state.epoch, {k: v for k, v in summary.items() if k != "mode"})
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(summary, sort_keys=True) + "\n")
            every = cfg.checkpoint_every
            if every and state.epoch % every == 0 and state.epoch < total_epochs:
                save_checkpoint(state, out / "checkpoints" / f"epoch_{state.epoch:03d}.ckpt")
            if val is not None and cfg.sample_every and state.epoch % cfg.sample_every == 0:
                from .viz import sample_grid

                sample_grid({"G": state.G}, val, out / "samples" / f"epoch_{state.epoch:03d}.png")
        if on_epoch is not None:
            on_epoch(state, summary)
    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
    return state, tlog


def _batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_pix2pix(slices: SliceSet, config: TrainConfig, arch: ArchConfig, out_dir=None,
                  val: Optional[SliceSet] = None, **kwargs):
    """The three-network pix2pix baseline: one single-modality run per target."""
    states, logs = [], []
    for m in Modality:
        cfg = TrainConfig.from_dict({**config.to_dict(), "mode": Mode.PIX2PIX.value,
                                     "target_modality": m.label})
        sub = None if out_dir is None else Path(out_dir) / f"pix2pix_{m.label}"
        st, tl = train(slices, cfg, arch, out_dir=sub, val=None, **kwargs)
        states.append(st)
        logs.append(tl)
    return Pix2PixEnsemble([s.G for s in states]), states, logs


# -- inference helpers -------------------------------------------------------

@torch.no_grad()
def predict(net, images: np.ndarray, c=None, batch_size: int = 64) -> np.ndarray:
    """Batched no-grad forward over an (N, C, S, S) array; c is an int or (N,) array."""
    net.eval()
    outs = []
    dev = next(net.parameters()).device
    n = images.shape[0]
    for s in range(0, n, batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[s:s + batch_size])).to(dev)
        if c is None:
            y = net(x)
        else:
            cc = np.broadcast_to(np.asarray(c), (n,))[s:s + batch_size]
            y = net(x, torch.as_tensor(np.array(cc), dtype=torch.long, device=dev))
        outs.append(y.cpu().numpy())
    net.train()
    return np.concatenate(outs) if outs else np.empty((0,) + images.shape[1:], np.float32)


def validation_ssim(G, val: SliceSet, max_slices: int = 48) -> float:
    from .metrics import ssim, to_unit

    sub = val.subset(np.arange(min(len(val), max_slices)))
    scores = []
    for m in Modality:
        fake = predict(G, sub.source, int(m))
        real = sub.modality_images(m)
        scores += [ssim(to_unit(fake[i, 0]), to_unit(real[i, 0])) for i in range(len(sub))]
    return float(np.mean(scores))


# -- segmentor pretraining ---------------------------------------------------

def pretrain_segmentor(slices: SliceSet, config: TrainConfig, arch: ArchConfig,
                       epochs: Optional[int] = None):
    """Train the label-conditioned S on real target images with dice loss.

    Every slice contributes three samples, one per target modality. Returns
    (S, per-epoch mean loss trace).
    """
    n = len(slices)
    if n == 0:
        raise EmptyDataset("no slices for segmentor pretraining")
    epochs = config.seg_pretrain_epochs if epochs is None else epochs
    dev = resolve_device(config.device)
    S = init_params(arch, "segmentor").to(dev)
    opt = torch.optim.Adam(S.parameters(), lr=config.seg_pretrain_lr)
    pairs = [(i, m) for i in range(n) for m in range(N_MODALITIES)]
    seed = derive_seed(config.seed, "segmentor")
    trace = []
    for epoch in range(epochs):
        losses = []
        for chunk in batch_iterator(pairs, config.batch_size, seed=seed, epoch=epoch):
            idx = np.array([p[0] for p in chunk])
            cs = np.array([p[1] for p in chunk])
            y = torch.from_numpy(slices.targets[idx, cs][:, None]).to(dev)
            gt = torch.from_numpy(slices.gt[idx].astype(np.float32)).to(dev)
            c = torch.from_numpy(cs).long().to(dev)
            opt.zero_grad(set_to_none=True)
            loss = dice_loss(S(y, c), gt)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        trace.append(float(np.mean(losses)))
        log.info("segmentor epoch %d dice_loss %.4f", epoch + 1, trace[-1])
    return S, trace


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    tensors: dict = {}
    ckpt.flatten_state_dict("G", state.G.state_dict(), tensors)
    ckpt.flatten_state_dict("D", state.D.state_dict(), tensors)
    optim = {"opt_g": ckpt.optimizer_to_container("opt_g", state.opt_g, tensors),
             "opt_d": ckpt.optimizer_to_container("opt_d", state.opt_d, tensors)}
    if state.S is not None:
        ckpt.flatten_state_dict("S", state.S.state_dict(), tensors)
    if state.opt_s is not None:
        optim["opt_s"] = ckpt.optimizer_to_container("opt_s", state.opt_s, tensors)
    tensors["rng/torch"] = state.rng.get_state()
    meta = {
        "kind": "train_state",
        "mode": state.mode.value,
        "epoch": state.epoch,
        "step": state.step,
        "config": state.config.to_dict(),
        "arch": asdict(state.arch),
        "seg_arch": asdict(state.seg_arch) if state.seg_arch is not None else None,
        "optim": optim,
    }
    return ckpt.write_container(path, meta, tensors)


def load_checkpoint(path) -> TrainState:
    meta, tensors = ckpt.read_container(path)
    if meta.get("kind") != "train_state":
        raise FormatError(f"{path}: not a training checkpoint (kind {meta.get('kind')!r})")
    config = TrainConfig.from_dict(meta["config"])
    arch = ArchConfig(**meta["arch"])
    seg_arch = ArchConfig(**meta["seg_arch"]) if meta["seg_arch"] else None
    S = None
    if "opt_s" in meta["optim"] or any(k.startswith("S/") for k in tensors):
        S = init_params(seg_arch or arch, "segmentor")
        S.load_state_dict(ckpt.extract_state_dict("S", tensors))
    state = init_state(config, arch, S, seg_arch)
    state.G.load_state_dict(ckpt.extract_state_dict("G", tensors))
    state.D.load_state_dict(ckpt.extract_state_dict("D", tensors))
    state.opt_g.load_state_dict(ckpt.optimizer_from_container("opt_g", meta["optim"]["opt_g"], tensors))
    state.opt_d.load_state_dict(ckpt.optimizer_from_container("opt_d", meta["optim"]["opt_d"], tensors))
    if state.opt_s is not None:
        state.opt_s.load_state_dict(
            ckpt.optimizer_from_container("opt_s", meta["optim"]["opt_s"], tensors))
    state.rng.set_state(tensors["rng/torch"])
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    return state


def save_network(path, net: torch.nn.Module, kind: str, arch: ArchConfig, extra: Optional[dict] = None) -> Path:
    """Inference-only container for a generator, pix2pix ensemble or segmentor."""
    tensors: dict = {}
    ckpt.flatten_state_dict("net", net.state_dict(), tensors)
    meta = {"kind": kind, "arch": asdict(arch), "extra": extra or {}}
    if isinstance(net, Segmentor):
        meta["in_ch"] = net.net.stem.in_channels - (N_MODALITIES if net.conditional else 0)
        meta["conditional"] = net.conditional
    return ckpt.write_container(path, meta, tensors)


def load_network(path) -> tuple[torch.nn.Module, dict]:
    """Load anything ``save_network`` or ``save_checkpoint`` wrote, as an inference net.

    Training checkpoints yield their generator.
    """
    meta, tensors = ckpt.read_container(path)
    kind = meta.get("kind")
    if kind == "train_state":
        arch = ArchConfig(**meta["arch"])
        G = init_params(arch, "generator")
        G.load_state_dict(ckpt.extract_state_dict("G", tensors))
        return G, meta
    arch = ArchConfig(**meta["arch"])
    if kind == "generator":
        net = init_params(arch, "generator")
    elif kind == "pix2pix_ensemble":
        net = Pix2PixEnsemble([init_params(arch, "generator") for _ in range(N_MODALITIES)])
    elif kind in ("segmentor", "boost_segmentor"):
        net = init_params(arch, kind, in_ch=meta["in_ch"], conditional=meta["conditional"])
    else:
        raise FormatError(f"{path}: unknown network kind {kind!r}")
    net.load_state_dict(ckpt.extract_state_dict("net", tensors))
    return net, meta
