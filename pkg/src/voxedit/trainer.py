"""Alignment training: reconstruction + slot-weight KL losses, AdamW, checkpoints.

Speaker embeddings are frozen inputs. Only the memory slots, the descriptor
encoder and the degree predictor are trained. The objective per item is::

    total = lambda_rec * L_rec + lambda_align * L_align
    L_rec   = mean over {A, B} of |s - s_hat|^2 + |s - s_main|^2
    L_align = KL(w_B || alpha * w_t + (1 - alpha) * w_A)

and batch losses are averaged over items.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import memnet, vadp
from .autodiff import KL_CLAMP, Tape, forward_backward
from .dataset import AnnotationTuple, Batch, BatchSampler, DescriptorVocab, EmbeddingStore
from .errors import DataError, NumericalError, UsageError
from .memnet import DescriptorEncoderParams, ResMemParams
from .vadp import VadpParams

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "voxedit.checkpoint/1"
RNG_ALGORITHM = "numpy.random.PCG64"
MODES = ("full", "no_voice_res", "no_resmem", "no_vadp")

MEM_BLOCKS = ("M_mv", "M_rv", "M_k")
ENC_BLOCKS = ("enc.table", "enc.W", "enc.b")
VADP_BLOCKS = ("vadp.W1", "vadp.b1", "vadp.w_mu", "vadp.b_mu", "vadp.w_lv", "vadp.b_lv")

ACTIVE_BLOCKS = {
    "full": MEM_BLOCKS + ENC_BLOCKS + VADP_BLOCKS,
    "no_voice_res": ("M_mv", "M_k") + ENC_BLOCKS + VADP_BLOCKS,
    "no_vadp": MEM_BLOCKS + ENC_BLOCKS,
    "no_resmem": ENC_BLOCKS,
}


@dataclass
class TrainConfig:
    lambda_rec: float = 20.0
    lambda_align: float = 200.0
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    tau: float = 1.0
    M: int = 32
    N: int = 4
    D: int | None = None  # taken from the embeddings when unset
    H: int | None = None  # defaults to D
    V: int | None = None  # taken from the vocabulary when unset
    mode: str = "full"

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_align < 0:
            raise UsageError("loss weights must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise UsageError("AdamW betas must lie in (0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise UsageError("learning rate and weight decay must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise UsageError("batch_size must be >= 1 and steps >= 0")
        if self.tau <= 0:
            raise UsageError("tau must be positive")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def resolved(self, D: int, V: int) -> TrainConfig:
        if self.D is not None and self.D != D:
            raise DataError(f"config D={self.D} but embeddings have D={D}")
        if self.V is not None and self.V != V:
            raise DataError(f"config V={self.V} but vocabulary has V={V}")
        return replace(self, D=D, V=V, H=self.H or D)


@dataclass
class Model:
    mem: ResMemParams
    enc: DescriptorEncoderParams
    vadp: VadpParams

    @classmethod
    def init(cls, cfg: TrainConfig, rng: np.random.Generator) -> Model:
        mem, enc = memnet.init_params(cfg.M, cfg.N, cfg.D, cfg.V, rng, tau=cfg.tau)
        return cls(mem, enc, vadp.init_vadp(cfg.D, cfg.H, rng))

    def flat(self) -> dict[str, np.ndarray]:
        """Trainable blocks by name (arrays are shared, not copied)."""
        return {
            "M_mv": self.mem.M_mv, "M_rv": self.mem.M_rv, "M_k": self.mem.M_k,
            "enc.table": self.enc.table, "enc.W": self.enc.W, "enc.b": self.enc.b,
            "vadp.W1": self.vadp.W1, "vadp.b1": self.vadp.b1,
            "vadp.w_mu": self.vadp.w_mu, "vadp.b_mu": self.vadp.b_mu,
            "vadp.w_lv": self.vadp.w_lv, "vadp.b_lv": self.vadp.b_lv,
        }

    @classmethod
    def from_flat(cls, p: dict[str, np.ndarray], tau: float) -> Model:
        return cls(
            ResMemParams(p["M_mv"], p["M_rv"], p["M_k"], tau),
            DescriptorEncoderParams(p["enc.table"], p["enc.W"], p["enc.b"]),
            VadpParams(*(p[k] for k in VADP_BLOCKS)),
        )

    def copy(self) -> Model:
        return Model.from_flat({k: v.copy() for k, v in self.flat().items()}, self.mem.tau)


@dataclass
class LossBreakdown:
    rec: float
    align: float
    total: float


# -- reference loss functions ------------------------------------------------

def loss_rec(s, s_hat, s_main) -> float:
    """Squared L2 (not averaged over D) reconstruction loss."""
    s, s_hat, s_main = (np.asarray(v, dtype=np.float64) for v in (s, s_hat, s_main))
    if not s.shape == s_hat.shape == s_main.shape:
        raise DataError("dimension mismatch")
    return float(np.sum((s - s_hat) ** 2) + np.sum((s - s_main) ** 2))


def loss_align(w_b, w_t, w_a, alpha: float) -> float:
    """KL(w_b || alpha * w_t + (1 - alpha) * w_a), logs clamped at 1e-12."""
    w_b, w_t, w_a = (np.asarray(v, dtype=np.float64) for v in (w_b, w_t, w_a))
    if not w_b.shape == w_t.shape == w_a.shape:
        raise DataError("slot-weight vectors differ in length")
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    q = alpha * w_t + (1.0 - alpha) * w_a
    return float(np.sum(w_b * (np.log(np.maximum(w_b, KL_CLAMP)) - np.log(np.maximum(q, KL_CLAMP)))))


# -- training graph ----------------------------------------------------------

def build_loss(tape: Tape, p: dict, batch: Batch, eps, cfg: TrainConfig):
    """Record the batch objective; returns ``(total, rec, align)`` nodes."""
    s_a, s_b = tape.const(batch.s_a, "s_A"), tape.const(batch.s_b, "s_B")
    t = memnet.tape_encode(tape, p["enc.table"], p["enc.W"], p["enc.b"], batch.x)
    lam = [cfg.lambda_rec, cfg.lambda_align]

    if cfg.mode == "no_resmem":
        rec = tape.mean(tape.sq_dist(tape.add(s_a, t), s_b))
        align = tape.const(0.0)
        return tape.lincomb(lam, [rec, align]), rec, align

    tau = cfg.tau
    w_a, sm_a = memnet.tape_readout(tape, s_a, p["M_mv"], p["M_mv"], tau)
    w_b, sm_b = memnet.tape_readout(tape, s_b, p["M_mv"], p["M_mv"], tau)
    if cfg.mode == "no_voice_res":
        per_item = tape.lincomb([0.5, 0.5], [tape.sq_dist(s_a, sm_a), tape.sq_dist(s_b, sm_b)])
    else:
        _, sr_a = memnet.tape_readout(tape, s_a, p["M_rv"], p["M_rv"], tau)
        _, sr_b = memnet.tape_readout(tape, s_b, p["M_rv"], p["M_rv"], tau)
        per_item = tape.lincomb(
            [0.5, 0.5, 0.5, 0.5],
            [
                tape.sq_dist(s_a, tape.add(sm_a, sr_a)), tape.sq_dist(s_a, sm_a),
                tape.sq_dist(s_b, tape.add(sm_b, sr_b)), tape.sq_dist(s_b, sm_b),
            ],
        )
    rec = tape.mean(per_item)

    w_t, _ = memnet.tape_readout(tape, t, p["M_k"], p["M_mv"], tau)
    if cfg.mode == "no_vadp":
        mixture = tape.lincomb([0.5, 0.5], [w_t, w_a])
    else:
        alpha = vadp.tape_degree(tape, p, s_a, s_b, t, eps)
        mixture = tape.mix(alpha, w_t, w_a)
    align = tape.mean(tape.kl(w_b, mixture))
    return tape.lincomb(lam, [rec, align]), rec, align


def batch_loss(model: Model, batch: Batch, eps, cfg: TrainConfig):
    """Loss breakdown and gradients for one batch."""
    out = {}

    def build(tape, nodes):
        total, rec, align = build_loss(tape, nodes, batch, eps, cfg)
        out["rec"], out["align"] = rec, align
        return total

    total, grads = forward_backward(build, model.flat())
    return LossBreakdown(float(out["rec"].value), float(out["align"].value), total), grads


# -- optimizer ---------------------------------------------------------------

def adamw_step(params: dict, grads: dict, moments: dict, t: int, cfg: TrainConfig, names=None):
    """One AdamW update (bias-corrected, decoupled decay), in place.

    ``moments`` maps ``"m"`` and ``"v"`` to per-block arrays. Only blocks in
    ``names`` (default: all of ``grads``) are touched.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k in names if names is not None else grads:
        g = grads[k]
        if g.shape != params[k].shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        m = moments["m"][k] = b1 * moments["m"][k] + (1.0 - b1) * g
        v = moments["v"][k] = b2 * moments["v"][k] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * params[k]
        params[k] -= cfg.lr * update
    return params, moments


def zero_moments(params: dict) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


# -- training loop -----------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    moments: dict
    rng: np.random.Generator
    step: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def training_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """Draw reparameterisation noise, compute gradients, apply one AdamW update."""
    cfg = state.config
    eps = state.rng.standard_normal(len(batch))
    losses, grads = batch_loss(state.model, batch, eps, cfg)
    if not all(math.isfinite(v) for v in asdict(losses).values()):
        raise NumericalError(f"non-finite loss at step {state.step + 1}: {losses}")
    state.step += 1
    adamw_step(state.model.flat(), grads, state.moments, state.step, cfg, ACTIVE_BLOCKS[cfg.mode])
    state.model.mem.check_slots()
    state.history.append((state.step, losses.total, losses.rec, losses.align))
    return losses


@dataclass
class Checkpoint:
    config: TrainConfig
    model: Model
    vocab: DescriptorVocab
    moments: dict
    step: int
    history: list
    rng_state: dict

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "algorithms": {"rng": RNG_ALGORITHM, "optimizer": "adamw", "autodiff": "tape-reverse"},
            "config": asdict(self.config),
            "vocab": list(self.vocab.descriptors),
            "step": self.step,
            "params": {k: v.tolist() for k, v in self.model.flat().items()},
            "moments": {mk: {k: v.tolist() for k, v in mv.items()} for mk, mv in self.moments.items()},
            "history": [list(h) for h in self.history],
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_json(cls, d: dict) -> Checkpoint:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"unsupported checkpoint format {d.get('format')!r}")
        cfg = TrainConfig.from_dict(d["config"])
        params = {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()}
        moments = {mk: {k: np.array(v, dtype=np.float64) for k, v in mv.items()} for mk, mv in d["moments"].items()}
        return cls(
            config=cfg,
            model=Model.from_flat(params, cfg.tau),
            vocab=DescriptorVocab(tuple(d["vocab"])),
            moments=moments,
            step=int(d["step"]),
            history=[tuple(h) for h in d["history"]],
            rng_state=d["rng_state"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Checkpoint:
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError) as e:
            raise DataError(f"cannot read checkpoint {path}: {e}") from None

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss_total", "loss_rec", "loss_align"])
            for step, total, rec, align in self.history:
                w.writerow([step, repr(total), repr(rec), repr(align)])


def _generator(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train(
    config: TrainConfig,
    store: EmbeddingStore,
    tuples: Sequence[AnnotationTuple],
    vocab: DescriptorVocab,
    resume: Checkpoint | None = None,
    log_every: int = 0,
) -> Checkpoint:
    """Run ``config.steps`` total optimizer steps (continuing ``resume`` if given)."""
    cfg = config.resolved(store.dim, len(vocab))
    sampler = BatchSampler(store, tuples, vocab)
    if resume is not None:
        if resume.vocab.descriptors != vocab.descriptors:
            raise DataError("checkpoint vocabulary differs from the training vocabulary")
        state = TrainState(cfg, resume.model.copy(),
                           {mk: {k: v.copy() for k, v in mv.items()} for mk, mv in resume.moments.items()},
                           _generator(resume.rng_state), resume.step, list(resume.history))
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        model = Model.init(cfg, rng)
        state = TrainState(cfg, model, zero_moments(model.flat()), rng)

    while state.step < cfg.steps:
        batch = sampler.sample(cfg.batch_size, state.rng)
        losses = training_step(state, batch)
        if log_every and state.step % log_every == 0:
            logger.info("step %d total %.4f rec %.4f align %.4f", state.step, losses.total, losses.rec, losses.align)

    return Checkpoint(cfg, state.model, vocab, state.moments, state.step, state.history,
                      state.rng.bit_generator.state)


# -- gradient certification ----------------------------------------------------

KINK_MARGIN = 1e-3


def tiny_problem(rng: np.random.Generator, D=8, M=4, N=2, V=3, H=8, batch=4, mode="full",
                 margin: float = KINK_MARGIN):
    """A random small model, batch and noise draw for gradient checks.

    Draws whose ReLU pre-activations come within ``margin`` of zero are
    redrawn: the loss is not differentiable there.
    """
    from .reference import relu_margin

    while True:
        cfg = TrainConfig(M=M, N=N, D=D, V=V, H=H, batch_size=batch, mode=mode, tau=float(rng.uniform(1.0, 5.0)))
        model = Model.init(cfg, rng)
        b = Batch(rng.standard_normal((batch, D)), rng.standard_normal((batch, D)), rng.integers(0, V, batch))
        eps = rng.standard_normal(batch)
        if relu_margin(model.flat(), b.s_a, b.s_b, b.x, cfg) >= margin:
            return cfg, model, b, eps


def certify_gradients(seed: int = 0, n_configs: int = 20, h: float = 1e-5, tol: float = 1e-4,
                      mode: str = "full", **sizes):
    """Finite-difference check of the training loss on ``n_configs`` random tiny problems.

    The differenced function is the extended-precision straight-line loss,
    not the tape. Returns one :class:`~voxedit.autodiff.GradReport` per problem.
    """
    from .autodiff import check_gradients
    from .reference import reference_loss

    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_configs):
        cfg, model, b, eps = tiny_problem(rng, mode=mode, **sizes)
        reports.append(check_gradients(
            lambda tape, p: build_loss(tape, p, b, eps, cfg)[0], model.flat(), h=h, tol=tol,
            oracle=lambda p: reference_loss(p, b.s_a, b.s_b, b.x, eps, cfg)[0],
        ))
    return reports
