"""Losses and the alternating minimax loop.

The discriminator minimises the two cross-entropy terms of the game; the
generator maximises the adversarial term while paying ``lam * (1 - SSIM)``:

    D:  min  L(l, D(I, I'))  +  L(l, D(I', G(Z, I)))
    G:  min  -L(0, D(I', G(Z, I)))  +  lam * mean(1 - SSIM(I, G(Z, I)))

``I'`` in the adversarial term is a same-identity reference image.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .archive import read_archive, save_params
from .data import DatasetSpec, load_corpus, make_protocol
from .errors import ConfigurationError, NonFiniteLossError
from .metrics import ssim_batch
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    ModelParams,
    _load_state,
    build_models,
    sample_noise,
    similarity_probability,
)

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
ALTERNATIONS = ("PER_BATCH_1_1", "K_TO_1")


@dataclass
class TrainingConfig:
    lam: float = 1.0
    delta: float | None = None  # documentary only: the budget lam stands in for
    epochs: int = 100
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    learning_rate_d: float = 2e-4
    learning_rate_g: float = 2e-4
    alternation: str = "PER_BATCH_1_1"
    d_steps: int = 1  # k for K_TO_1
    d_pretrain_epochs: int = 0  # discriminator sees only original pairs for these epochs
    checkpoint_every: int = 0
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(f"{k}: {v}" for k, v in problems))

    def problems(self):
        out = []
        if not (isinstance(self.lam, (int, float)) and self.lam >= 0 and math.isfinite(self.lam)):
            out.append(("lambda", "must be a finite non-negative number"))
        if not 0 < self.adam_beta1 < 1:
            out.append(("adam_beta1", "must lie in (0, 1)"))
        if not 0 < self.adam_beta2 < 1:
            out.append(("adam_beta2", "must lie in (0, 1)"))
        if not isinstance(self.epochs, int) or self.epochs < 1:
            out.append(("epochs", "must be an integer >= 1"))
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append(("batch_size", "must be an integer >= 1"))
        if self.learning_rate_d <= 0:
            out.append(("learning_rate_d", "must be positive"))
        if self.learning_rate_g <= 0:
            out.append(("learning_rate_g", "must be positive"))
        if self.alternation not in ALTERNATIONS:
            out.append(("alternation", f"must be one of {ALTERNATIONS}"))
        if self.d_steps < 1:
            out.append(("d_steps", "must be >= 1"))
        return out

    @property
    def k(self):
        return 1 if self.alternation == "PER_BATCH_1_1" else self.d_steps

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        return d


@dataclass
class StepRecord:
    epoch: int
    step: int
    d_loss: float
    g_adv_loss: float
    mean_distortion: float
    wall_ms: float
    d_term: float = 0.0
    adv_term: float = 0.0
    objective: float = 0.0
    mean_prob: float = float("nan")  # D(reference, privatized) seen by the generator step

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def deterministic(self):
        """Everything except wall time."""
        d = asdict(self)
        d.pop("wall_ms")
        return d


# -- losses -------------------------------------------------------------------

def cross_entropy(label, prob, eps=PROB_EPS):
    """-(1 - l) log p - l log(1 - p), with p clamped to [eps, 1 - eps]. Elementwise."""
    prob = torch.as_tensor(prob)
    label = torch.as_tensor(label, dtype=prob.dtype)
    p = prob.clamp(eps, 1 - eps)
    return -(1 - label) * torch.log(p) - label * torch.log1p(-p)


def distortion_batch(original, privatized):
    """Per-image 1 - SSIM for (N, C, H, W) tensors."""
    return 1.0 - ssim_batch(original, privatized)


# -- seeding --------------------------------------------------------------------

def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


# -- trainer --------------------------------------------------------------------

class Trainer:
    """Holds both networks, their ADAM states and the pair protocol."""

    def __init__(self, dataset: DatasetSpec, cfg: TrainingConfig, corpus=None):
        self.dataset = dataset
        self.cfg = cfg
        self.corpus = load_corpus(dataset) if corpus is None else corpus
        self.protocol = make_protocol(dataset, self.corpus)
        channels = self.corpus[0].image.shape[-1]
        size = self.corpus[0].image.shape[0]
        self.gen_cfg = GeneratorConfig(**{**cfg.generator.to_dict(), "input_size": size, "input_channels": channels})
        self.disc_cfg = DiscriminatorConfig(**{**cfg.discriminator.to_dict(), "input_size": size,
                                               "input_channels": channels})
        self.gen, self.disc = build_models(self.gen_cfg, self.disc_cfg, derive_seed(cfg.seed, dataset.seed, 0))
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=cfg.learning_rate_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.learning_rate_d, betas=betas)
        self.epoch = 0  # epochs completed
        self.step = 0
        self.records = []
        self._noise = None
        self._last_d_term = float("nan")

    # per-epoch streams make any epoch reproducible from (seed, epoch) alone
    def _begin_epoch(self, epoch):
        torch.manual_seed(derive_seed(self.cfg.seed, self.dataset.seed, epoch, 1))
        self._noise = torch.Generator().manual_seed(derive_seed(self.cfg.seed, self.dataset.seed, epoch, 2))

    def _z(self, n, dtype):
        return sample_noise((n, *self.gen_cfg.bottleneck_shape), self.gen_cfg.noise_std, self._noise, dtype=dtype)

    def _tensors(self, batch):
        dtype = next(self.gen.parameters()).dtype
        return {k: torch.as_tensor(batch[k]).to(dtype) for k in ("left", "right", "ref")}, \
            torch.as_tensor(batch["label"])

    def discriminator_step(self, batch, with_privatized=True):
        """One ADAM update of D; G is frozen (EVAL mode, no gradients)."""
        t0 = time.perf_counter()
        x, label = self._tensors(batch)
        n = len(label)
        self.gen.eval()
        self.disc.train()
        with torch.no_grad():
            priv = self.gen(x["left"], self._z(n, x["left"].dtype))
        if with_privatized:
            emb = self.disc.embed(torch.cat([x["left"], x["right"], priv]))
            o_l, o_r, o_priv = emb.split(n)
        else:
            o_l, o_r = self.disc.embed(torch.cat([x["left"], x["right"]])).split(n)
        m = self.disc_cfg.margin
        d_term = cross_entropy(label, similarity_probability(o_l, o_r, m)).mean()
        loss = d_term
        adv = torch.zeros((), dtype=d_term.dtype)
        if with_privatized:
            # (I', G(Z, I)) keeps the true label of (I, I'): D learns to re-identify
            adv = cross_entropy(label, similarity_probability(o_r, o_priv, m)).mean()
            loss = d_term + adv
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite discriminator loss at epoch {self.epoch} step {self.step}",
                                     last_record=self.records[-1] if self.records else None)
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        self._last_d_term = d_term.item()
        return {"d_loss": loss.item(), "d_term": d_term.item(), "d_adv": adv.item(),
                "wall_ms": (time.perf_counter() - t0) * 1e3}

    def generator_step(self, batch):
        """One ADAM update of G; D is frozen (EVAL mode, no gradients)."""
        t0 = time.perf_counter()
        x, _ = self._tensors(batch)
        n = len(x["left"])
        self.gen.train()
        self.disc.eval()
        for p in self.disc.parameters():
            p.requires_grad_(False)
        try:
            priv = self.gen(x["left"], self._z(n, x["left"].dtype))
            prob = self.disc(x["ref"], priv)
            adv = cross_entropy(0, prob).mean()
            dist = distortion_batch(x["left"], priv).mean()
            loss = -adv + self.cfg.lam * dist
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite generator loss at epoch {self.epoch} step {self.step}",
                                         last_record=self.records[-1] if self.records else None)
            if loss.requires_grad:  # identity passthrough has nothing to update
                self.opt_g.zero_grad(set_to_none=True)
                loss.backward()
                self.opt_g.step()
        finally:
            for p in self.disc.parameters():
                p.requires_grad_(True)
        return {"g_loss": loss.item(), "adv_term": adv.item(), "distortion": dist.item(),
                "mean_prob": prob.mean().item(), "wall_ms": (time.perf_counter() - t0) * 1e3}

    def run_epoch(self):
        epoch = self.epoch
        self._begin_epoch(epoch)
        pretrain = epoch < self.cfg.d_pretrain_epochs
        k = self.cfg.k
        out = []
        for b, batch in enumerate(self.protocol.batches(self.cfg.batch_size, epoch)):
            d = self.discriminator_step(batch, with_privatized=not pretrain)
            wall = d["wall_ms"]
            g_adv, dist, prob = float("nan"), float("nan"), float("nan")
            if not pretrain and (b + 1) % k == 0:
                g = self.generator_step(batch)
                wall += g["wall_ms"]
                g_adv, dist, prob = g["adv_term"], g["distortion"], g["mean_prob"]
            if math.isnan(dist):
                objective, adv = float("nan"), float("nan")
            else:
                adv = g_adv
                objective = d["d_term"] + adv + self.cfg.lam * dist
            rec = StepRecord(epoch=epoch, step=self.step, d_loss=d["d_loss"], g_adv_loss=g_adv,
                             mean_distortion=dist, wall_ms=wall, d_term=d["d_term"], adv_term=adv,
                             objective=objective, mean_prob=prob)
            self.records.append(rec)
            out.append(rec)
            self.step += 1
        self.epoch += 1
        return out

    # -- persistence ------------------------------------------------------------

    def params(self):
        return ModelParams.from_modules(self.gen, self.disc, extra_config={
            "training": self.cfg.to_dict(), "dataset": self.dataset.to_dict()})

    def save_checkpoint(self, path):
        extra = {}
        for tag, opt in (("optim_g", self.opt_g), ("optim_d", self.opt_d)):
            for idx, state in opt.state_dict()["state"].items():
                for key, val in state.items():
                    extra[f"{tag}/{idx}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
        meta = {"epoch": self.epoch, "step": self.step, "kind": "checkpoint"}
        return save_params(self.params(), path, meta=meta, extra_arrays=extra)

    def load_checkpoint(self, path):
        arrays, config, meta = read_archive(path)
        gw = {k[len("generator/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("generator/")}
        dw = {k[len("discriminator/"):]: torch.from_numpy(v) for k, v in arrays.items()
              if k.startswith("discriminator/")}
        _load_state(self.gen, gw)
        _load_state(self.disc, dw)
        for tag, opt in (("optim_g", self.opt_g), ("optim_d", self.opt_d)):
            sd = opt.state_dict()
            state = {}
            for name, arr in arrays.items():
                if not name.startswith(tag + "/"):
                    continue
                _, idx, key = name.split("/")
                t = torch.from_numpy(arr)
                if key != "step":
                    t = t.to(next(self.gen.parameters()).dtype)
                state.setdefault(int(idx), {})[key] = t
            sd["state"] = state
            opt.load_state_dict(sd)
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])


def _epoch_mean(records, name):
    vals = [getattr(r, name) for r in records if not math.isnan(getattr(r, name))]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainResult:
    params: ModelParams
    records: list
    checkpoint: Path | None = None
    log_path: Path | None = None


def train(dataset: DatasetSpec, cfg: TrainingConfig, output_dir=None, corpus=None, resume_from=None,
          stop_after=None):
    """Run the alternating game for ``cfg.epochs`` epochs.

    With ``output_dir`` set, step records stream to ``train_log.jsonl``
    (flushed per epoch) and checkpoints go to ``checkpoint_eNNNN.sgap`` every
    ``cfg.checkpoint_every`` epochs plus ``final.sgap`` at the end.
    ``stop_after`` ends the run early after that many epochs (for resume tests).
    """
    trainer = Trainer(dataset, cfg, corpus=corpus)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    out = Path(output_dir) if output_dir is not None else None
    log_fh = None
    last_ckpt = Path(resume_from) if resume_from is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume_from else "w")
    try:
        while trainer.epoch < cfg.epochs:
            if stop_after is not None and trainer.epoch >= stop_after:
                break
            try:
                recs = trainer.run_epoch()
            except NonFiniteLossError as exc:
                exc.checkpoint = last_ckpt
                raise
            if log_fh is not None:
                log_fh.write("".join(r.to_json() + "\n" for r in recs))
                log_fh.flush()
            log.info("epoch %d: d_loss %.4f g_adv %.4f distortion %.4f", trainer.epoch - 1,
                     _epoch_mean(recs, "d_loss"), _epoch_mean(recs, "g_adv_loss"),
                     _epoch_mean(recs, "mean_distortion"))
            if out is not None and cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0:
                last_ckpt = trainer.save_checkpoint(out / f"checkpoint_e{trainer.epoch:04d}.sgap")
        final = None
        if out is not None:
            final = trainer.save_checkpoint(out / "final.sgap")
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(trainer.params(), trainer.records, final, out / "train_log.jsonl" if out else None)
