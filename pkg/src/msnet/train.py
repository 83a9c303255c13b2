"""Alternating MS-Net optimisation, the supervised baselines, Adam and the LR schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import read_checkpoint, save_checkpoint, _fill
from .data import Sample, SiteBatch, make_iteration_batches, substream
from .engine import ContractError, ShapeError, Tensor, backward, batch_slice, no_grad
from .losses import LossWeights, aux_objective, dice_loss, kt_loss, onehot_argmax, uni_objective
from .model import ArchConfig, ModelParams, build_model, encode, forward_aux, forward_universal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 5
    alpha: float = 0.5
    eta: float = 1e-4
    lr0: float = 1e-3
    lr_decay: float = 0.95
    lr_step: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 42
    augment: bool = True
    knowledge_transfer: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_step < 1 or self.batch_size < 1:
            raise ValueError("lr_step and batch_size must be >= 1")
        LossWeights(self.alpha, self.eta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.eta)


def lr_at(t: int, config: TrainConfig) -> float:
    """Step decay: lr0 * decay ** floor(t / step)."""
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    return config.lr0 * config.lr_decay ** (t // config.lr_step)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params: list[Tensor], grads: list, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place.  A ``None`` gradient leaves its parameter alone."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


def _unique(params: list[Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for p in params:
        if p.id not in seen:
            seen.add(p.id)
            out.append(p)
    return out


class _Trainer:
    """Shared plumbing: batch streams, Adam states, history and checkpoints."""

    optimizer_names: tuple = ()

    def __init__(self, model: ModelParams, datasets: list[list[Sample]], config: TrainConfig):
        self.model = model
        self.datasets = datasets
        self.config = config
        self.sample_rng = substream(config.seed, "sampling")
        self.augment_rng = substream(config.seed, "augment")
        self.adam = {name: AdamState() for name in self.optimizer_names}
        self.history: list[dict] = []
        self.t = 0

    def next_batches(self) -> list[SiteBatch]:
        return make_iteration_batches(self.datasets, self.config.batch_size, self.sample_rng,
                                      augment_data=self.config.augment, augment_rng=self.augment_rng)

    def _adam(self, name: str, params: list[Tensor], t: int) -> None:
        c = self.config
        adam_step(params, [p.grad for p in params], self.adam[name], lr_at(t, c),
                  c.adam_beta1, c.adam_beta2, c.adam_epsilon)

    def step(self, batches: list[SiteBatch], t: int) -> dict:
        raise NotImplementedError

    def run(self, iterations: int | None = None, callback: Callable | None = None,
            checkpoint_path=None, checkpoint_every: int = 0) -> list[dict]:
        """Train until ``iterations`` (default: config.iterations) have been completed."""
        end = self.config.iterations if iterations is None else iterations
        while self.t < end:
            batches = self.next_batches()
            record = self.step(batches, self.t)
            self.history.append(record)
            if callback is not None:
                callback(self, record)
            self.t += 1
            if checkpoint_path and checkpoint_every and (self.t % checkpoint_every == 0 or self.t == end):
                self.save(checkpoint_path)
            if self.t % 100 == 0:
                logger.info("iteration %d: %s", self.t, record.get("total"))
        return self.history

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.adam.items():
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"adam/{name}/m/{i:05d}"] = m
                out[f"adam/{name}/v/{i:05d}"] = v
        return out

    def save(self, path) -> Path:
        meta = {
            "trainer": type(self).__name__,
            "iteration": self.t,
            "train_config": asdict(self.config),
            "adam_steps": {k: v.step for k, v in self.adam.items()},
            "rng": {"sampling": self.sample_rng.bit_generator.state, "augment": self.augment_rng.bit_generator.state},
            "history": self.history,
        }
        return save_checkpoint(self.model, path, self.state_arrays(), meta)

    def restore(self, path) -> None:
        """Resume from a checkpoint written by :meth:`save` of the same trainer kind."""
        manifest, arrays = read_checkpoint(path)
        meta = manifest["metadata"]
        if meta.get("trainer") != type(self).__name__:
            raise ContractError(f"checkpoint was written by {meta.get('trainer')}, not {type(self).__name__}")
        _fill(self.model, arrays, manifest.get("norm_updates", {}))
        for name, st in self.adam.items():
            keys = sorted(k for k in arrays if k.startswith(f"adam/{name}/m/"))
            st.m = [arrays[k] for k in keys]
            st.v = [arrays[k.replace("/m/", "/v/")] for k in keys]
            st.step = meta["adam_steps"][name]
        self.sample_rng.bit_generator.state = meta["rng"]["sampling"]
        self.augment_rng.bit_generator.state = meta["rng"]["augment"]
        self.history = meta["history"]
        self.t = meta["iteration"]


class MSNetTrainer(_Trainer):
    """Alternating updates: auxiliary step on (encoder, branches), then universal step on (encoder, decoder)."""

    optimizer_names = ("aux", "uni")

    def __init__(self, model: ModelParams, datasets: list[list[Sample]], config: TrainConfig):
        if model.aux is None:
            raise ContractError("MS-Net training needs auxiliary branches")
        if len(datasets) != model.num_sites:
            raise ContractError(f"{len(datasets)} datasets for a model with {model.num_sites} sites")
        if not config.knowledge_transfer and config.alpha != 0.0:
            raise ContractError("knowledge transfer can only be disabled with alpha = 0")
        super().__init__(model, datasets, config)
        enc = model.encoder.parameters()
        self.aux_params = _unique(enc + [p for g in model.aux for p in g.parameters()])
        self.uni_params = _unique(enc + model.decoder.parameters())

    def aux_step(self, batches: list[SiteBatch], t: int) -> list[float]:
        losses = []
        for b in batches:
            features = encode(self.model, Tensor(b.images), b.site, "train")
            probs = forward_aux(self.model, features, b.site, "train")
            losses.append(dice_loss(probs, b.onehot_masks))
        objective = aux_objective(losses, [self.model.encoder] + list(self.model.aux),
                                  self.config.weights, self.model.num_sites)
        backward(objective, wrt=self.aux_params)
        self._adam("aux", self.aux_params, t)
        return [l.item() for l in losses]

    def uni_step(self, batches: list[SiteBatch], t: int) -> tuple[list[float], list[float]]:
        pairs = []
        for b in batches:
            probs, features = forward_universal(self.model, Tensor(b.images), b.site, "train")
            sup = dice_loss(probs, b.onehot_masks)
            kt = None
            if self.config.knowledge_transfer:
                with no_grad():
                    target = onehot_argmax(forward_aux(self.model, features, b.site, "batch"))
                kt = kt_loss(probs, target)
            pairs.append((kt, sup))
        objective = uni_objective(pairs, [self.model.encoder, self.model.decoder],
                                  self.config.weights, self.model.num_sites)
        backward(objective, wrt=self.uni_params)
        self._adam("uni", self.uni_params, t)
        return [p[1].item() for p in pairs], [p[0].item() if p[0] is not None else float("nan") for p in pairs]

    def step(self, batches: list[SiteBatch], t: int) -> dict:
        aux = self.aux_step(batches, t)
        uni, kt = self.uni_step(batches, t)
        return {"iteration": t, "lr": lr_at(t, self.config), "aux": aux, "uni": uni, "kt": kt,
                "total": float(sum(uni))}


class SupervisedTrainer(_Trainer):
    """Universal network trained on ground truth only (Joint, DSBN-only, one Separate model).

    ``route`` maps a data site to the normalization site of the model.
    ``pooled`` forwards all site batches as one batch (Joint); it needs every
    site routed to the same normalization site.
    """

    optimizer_names = ("uni",)

    def __init__(self, model: ModelParams, datasets: list[list[Sample]], config: TrainConfig,
                 route: Callable[[int], int] | None = None, pooled: bool = False):
        super().__init__(model, datasets, config)
        self.route = route or (lambda s: s)
        self.pooled = pooled
        if pooled and len({self.route(s) for s in range(1, len(datasets) + 1)}) != 1:
            raise ContractError("pooled batches need every site routed to one normalization site")
        for s in range(1, len(datasets) + 1):
            if not 1 <= self.route(s) <= model.num_sites:
                raise ContractError(f"data site {s} routes to {self.route(s)}, model has {model.num_sites} sites")
        self.uni_params = _unique(model.universal_parameters())

    def step(self, batches: list[SiteBatch], t: int) -> dict:
        pairs = []
        if self.pooled:
            # one forward over the pooled batch, so training-time batch statistics
            # describe the same site mixture as the running statistics used at test time
            probs, _ = forward_universal(self.model, Tensor(np.concatenate([b.images for b in batches])),
                                         self.route(batches[0].site), "train")
            lo = 0
            for b in batches:
                hi = lo + len(b.images)
                pairs.append((None, dice_loss(batch_slice(probs, lo, hi), b.onehot_masks)))
                lo = hi
        else:
            for b in batches:
                probs, _ = forward_universal(self.model, Tensor(b.images), self.route(b.site), "train")
                pairs.append((None, dice_loss(probs, b.onehot_masks)))
        objective = uni_objective(pairs, [self.model.encoder, self.model.decoder],
                                  LossWeights(0.0, self.config.eta))
        backward(objective, wrt=self.uni_params)
        self._adam("uni", self.uni_params, t)
        uni = [p[1].item() for p in pairs]
        return {"iteration": t, "lr": lr_at(t, self.config), "aux": [], "uni": uni,
                "kt": [], "total": float(sum(uni))}


# ---------------------------------------------------------------------------
# strategy entry points
# ---------------------------------------------------------------------------

def _arch(arch: ArchConfig, num_sites: int) -> ArchConfig:
    return ArchConfig(**{**asdict(arch), "num_sites": num_sites})


def train_msnet(model: ModelParams, datasets, config: TrainConfig, **run_kwargs):
    trainer = MSNetTrainer(model, datasets, config)
    trainer.run(**run_kwargs)
    return trainer.model, trainer.history


def train_dsbn(model: ModelParams, datasets, config: TrainConfig, **run_kwargs):
    """Universal network with domain-specific normalization, no auxiliary branches."""
    if len(datasets) != model.num_sites:
        raise ContractError(f"{len(datasets)} datasets for a model with {model.num_sites} sites")
    trainer = SupervisedTrainer(model, datasets, config)
    trainer.run(**run_kwargs)
    return trainer.model, trainer.history


def train_joint(model: ModelParams, datasets, config: TrainConfig, **run_kwargs):
    """One shared normalization domain fed with the pooled per-site batches each iteration."""
    if model.num_sites != 1:
        raise ContractError("the joint model must have a single normalization domain")
    trainer = SupervisedTrainer(model, datasets, config, route=lambda s: 1, pooled=True)
    trainer.run(**run_kwargs)
    return trainer.model, trainer.history


def separate_config(config: TrainConfig, site: int) -> TrainConfig:
    return TrainConfig(**{**asdict(config), "seed": config.seed + site})


def train_separate(datasets, config: TrainConfig, arch: ArchConfig, **run_kwargs):
    """One independent single-domain model per site, seeded with seed + site id."""
    models, histories = [], []
    for s, ds in enumerate(datasets, start=1):
        cfg = separate_config(config, s)
        model = build_model(_arch(arch, 1), cfg.seed, with_aux=False)
        trainer = SupervisedTrainer(model, [ds], cfg, route=lambda _s: 1)
        trainer.run(**run_kwargs)
        models.append(trainer.model)
        histories.append(trainer.history)
    return models, histories


def write_history_csv(history: list[dict], path, num_sites: int) -> Path:
    """iteration, aux_1..S, uni_1..S, kt_1..S, lr; missing terms are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (["iteration"] + [f"aux_{s}" for s in range(1, num_sites + 1)]
              + [f"uni_{s}" for s in range(1, num_sites + 1)]
              + [f"kt_{s}" for s in range(1, num_sites + 1)] + ["lr"])

    def pad(vals):
        vals = ["" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v)) for v in vals]
        return vals + [""] * (num_sites - len(vals))

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in history:
            w.writerow([r["iteration"]] + pad(r["aux"]) + pad(r["uni"]) + pad(r["kt"]) + [repr(r["lr"])])
    return path
