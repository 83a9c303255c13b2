"""Segmentation metrics, post-processing, paired t-tests, BN statistics export and
the four-strategy experiment protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage, special

from .checkpoint import load_checkpoint, read_checkpoint
from .data import Corpus, Sample, whiten
from .engine import ContractError, ShapeError, Tensor, no_grad
from .model import ArchConfig, ModelParams, build_model, forward_universal, strip_aux
from .train import (
    MSNetTrainer,
    SupervisedTrainer,
    TrainConfig,
    separate_config,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("joint", "separate", "dsbn", "msnet")
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
SIGNIFICANCE = 0.05


class EmptyMaskError(ValueError):
    """Distance metrics are undefined when either mask has no foreground."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _binary_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_coefficient(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    a, b = _binary_pair(a, b)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / size


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside the image counts as background)."""
    m = np.pad(np.asarray(mask).astype(bool), 1)
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return m[1:-1, 1:-1] & ~interior


def _nearest(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point of ``dst``."""
    out = np.empty(len(src))
    for lo in range(0, len(src), chunk):
        d = src[lo:lo + chunk, None, :] - dst[None, :, :]
        out[lo:lo + chunk] = np.sqrt((d * d).sum(-1).min(axis=1))
    return out


def avg_symmetric_distance(a, b) -> float:
    """Mean boundary-to-boundary Euclidean distance, symmetrised over both masks (pixels)."""
    a, b = _binary_pair(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("average symmetric distance needs two non-empty masks")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    # fsum makes the total independent of summation order
    total = math.fsum(_nearest(pa, pb)) + math.fsum(_nearest(pb, pa))
    return total / (len(pa) + len(pb))


EIGHT_NEIGHBOURS = np.ones((3, 3), dtype=bool)


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected foreground component.

    Labels are assigned in row-major order of each component's first pixel,
    so picking the lowest label among equal sizes breaks ties toward the
    component that starts earliest.
    """
    m = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(m, structure=EIGHT_NEIGHBOURS)
    if count == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def paired_t_test(x, y) -> tuple[float, float]:
    """Two-sided paired t-test on d = x - y.

    Zero-variance differences are degenerate: p is 1 when the mean
    difference is 0, otherwise t is infinite and p is reported as 0.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        logger.warning("paired t-test: differences have zero variance, p reported as the 0 limit")
        return math.copysign(math.inf, mean), 0.0
    t = mean * math.sqrt(n) / sd
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, min(p, 1.0)


# ---------------------------------------------------------------------------
# BN statistics export
# ---------------------------------------------------------------------------

BN_STATS_HEADER = ("model", "site", "layer", "running_mean", "running_var", "untrained")


def bn_stats_rows(models: dict[str, ModelParams]) -> list[dict]:
    """Channel-averaged running statistics of every universal normalization layer.

    ``models`` maps a label to a model; a DSBN model contributes one row per
    (site, layer), a single-domain model one row per layer.
    """
    rows = []
    for label, params in models.items():
        for group in (params.encoder, params.decoder):
            for name, state in group.bn_states():
                layer, _, site = name.partition("@")
                rows.append({
                    "model": label,
                    "site": int(site) if site else 1,
                    "layer": layer,
                    "running_mean": float(state.running_mean.mean()),
                    "running_var": float(state.running_var.mean()),
                    "untrained": int(state.updates == 0),
                })
    rows.sort(key=lambda r: (r["model"], r["site"]))
    return rows


def bn_stats_export(models, path) -> list[dict]:
    """Write the per-layer statistics table to ``path`` as CSV and return its rows.

    ``models`` is a single model, a list of single-domain models (labelled
    site1, site2, ...) or a mapping label -> model.
    """
    if isinstance(models, ModelParams):
        models = {"model": models}
    elif isinstance(models, (list, tuple)):
        models = {f"site{s}": m for s, m in enumerate(models, start=1)}
    rows = bn_stats_rows(models)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BN_STATS_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "running_mean": repr(r["running_mean"]), "running_var": repr(r["running_var"])})
    return rows


def layer_mean_gaps(rows_a: list[dict], rows_b: list[dict]) -> dict[str, float]:
    """|running_mean(a) - running_mean(b)| per layer name present in both tables."""
    b = {r["layer"]: r["running_mean"] for r in rows_b}
    return {r["layer"]: abs(r["running_mean"] - b[r["layer"]]) for r in rows_a if r["layer"] in b}


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

@dataclass
class SiteMetrics:
    dice: list[float] = field(default_factory=list)
    asd: list[float] = field(default_factory=list)
    asd_failures: int = 0


@dataclass
class MetricsRecord:
    strategy: str
    per_site: dict[int, SiteMetrics] = field(default_factory=dict)

    def overall_dice(self) -> list[float]:
        return [v for s in sorted(self.per_site) for v in self.per_site[s].dice]

    def overall_asd(self) -> list[float]:
        return [v for s in sorted(self.per_site) for v in self.per_site[s].asd]

    def mean_dice(self, site: int | None = None) -> float:
        vals = self.overall_dice() if site is None else self.per_site[site].dice
        return 100.0 * float(np.mean(vals))

    def rows(self) -> list[dict]:
        """Report rows: Dice in percent, ASD in pixels, per site and overall."""
        out = []
        groups = [(str(s), self.per_site[s].dice, self.per_site[s].asd) for s in sorted(self.per_site)]
        groups.append(("overall", self.overall_dice(), self.overall_asd()))
        for site, dice, asd in groups:
            for metric, vals, unit in (("dice", dice, 100.0), ("asd", asd, 1.0)):
                arr = unit * np.asarray(vals, dtype=np.float64)
                out.append({"strategy": self.strategy, "site": site, "metric": metric,
                            "mean": float(arr.mean()) if arr.size else float("nan"),
                            "std": float(arr.std()) if arr.size else float("nan"),
                            "n": int(arr.size)})
        return out


def predict(params: ModelParams, samples: list[Sample], site: int, batch_size: int = 15) -> np.ndarray:
    """Whitened, eval-mode, argmax predictions (n, H, W) before post-processing."""
    out = []
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = [whiten(s).image for s in samples[lo:lo + batch_size]]
            probs, _ = forward_universal(params, Tensor(np.stack(chunk)), site, "eval")
            out.append(probs.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def score_predictions(preds, masks, metrics: SiteMetrics | None = None) -> SiteMetrics:
    """Largest-component post-processing, then per-sample Dice and ASD."""
    metrics = metrics or SiteMetrics()
    for pred, mask in zip(preds, masks):
        pred = largest_component(pred)
        metrics.dice.append(dice_coefficient(pred, mask))
        try:
            metrics.asd.append(avg_symmetric_distance(pred, mask))
        except EmptyMaskError:
            metrics.asd_failures += 1
    return metrics


@dataclass
class Deployment:
    """Models of one strategy and how data sites are routed to them.

    ``routes[s]`` is (model, normalization site) used for data site ``s``.
    """

    strategy: str
    routes: dict[int, tuple[ModelParams, int]]
    histories: dict[str, list[dict]] = field(default_factory=dict)

    def models(self) -> dict[str, ModelParams]:
        """Distinct models, labelled for export (one per site for Separate)."""
        if self.strategy == "separate":
            return {f"{self.strategy}/site{s}": m for s, (m, _) in sorted(self.routes.items())}
        return {self.strategy: next(iter(self.routes.values()))[0]}


def evaluate(deployment: Deployment, test_sets: list[list[Sample]]) -> MetricsRecord:
    record = MetricsRecord(deployment.strategy)
    for s, samples in enumerate(test_sets, start=1):
        model, norm_site = deployment.routes[s]
        preds = predict(model, samples, norm_site)
        record.per_site[s] = score_predictions(preds, [x.mask for x in samples])
    return record


# ---------------------------------------------------------------------------
# training runs with an on-disk cache
# ---------------------------------------------------------------------------

def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for split in (corpus.train, corpus.test):
        for site in split:
            for s in site:
                h.update(s.image.tobytes())
                h.update(s.mask.tobytes())
    return h.hexdigest()[:16]


def _run_key(kind: str, arch: ArchConfig, config: TrainConfig, fingerprint: str) -> str:
    blob = json.dumps({"kind": kind, "arch": asdict(arch), "train": asdict(config), "data": fingerprint},
                      sort_keys=True)
    return f"{kind}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"


def _trained(trainer, path: Path | None, every: int) -> None:
    """Resume from ``path`` when it holds a run of the same kind and config, then finish training."""
    if path is not None and path.exists():
        manifest, _ = read_checkpoint(path)
        meta = manifest["metadata"]
        if meta.get("trainer") != type(trainer).__name__ or meta.get("train_config") != asdict(trainer.config):
            raise ContractError(f"{path} holds a run with a different trainer or configuration")
        trainer.restore(path)
        logger.info("resumed %s at iteration %d", path.name, trainer.t)
    trainer.run(checkpoint_path=path, checkpoint_every=every if path is not None else 0)


def _with_sites(arch: ArchConfig, num_sites: int) -> ArchConfig:
    return ArchConfig(**{**asdict(arch), "num_sites": num_sites})


def train_strategy(strategy: str, corpus: Corpus, config: TrainConfig, arch: ArchConfig,
                   workdir=None, checkpoint_every: int = 100, site_seed_offset: int = 0,
                   naming: Callable[[str, ArchConfig, TrainConfig], str] | None = None) -> Deployment:
    """Train one strategy, resuming or reusing checkpoints kept under ``workdir``.

    Checkpoint names come from ``naming(kind, arch, config)``; by default they
    hash the architecture, training config and corpus, so a finished run is
    simply reloaded.  Separate models are seeded with seed + site id
    (+ ``site_seed_offset``, used for re-seeded control runs).
    """
    S = corpus.num_sites
    workdir = Path(workdir) if workdir is not None else None
    if naming is None:
        fp = corpus_fingerprint(corpus)

        def naming(kind, a, cfg):
            return _run_key(kind, a, cfg, fp)

    histories: dict[str, list[dict]] = {}

    def fit(trainer, kind, a):
        path = workdir / f"{naming(kind, a, trainer.config)}.ckpt" if workdir is not None else None
        _trained(trainer, path, checkpoint_every)
        histories[kind] = trainer.history
        return trainer.model

    if strategy == "separate":
        a1 = _with_sites(arch, 1)
        routes = {}
        for s in range(1, S + 1):
            cfg = separate_config(config, s + site_seed_offset)
            trainer = SupervisedTrainer(build_model(a1, cfg.seed, with_aux=False), [corpus.train[s - 1]], cfg,
                                        route=lambda _s: 1)
            routes[s] = (fit(trainer, f"separate{s}", a1), 1)
        return Deployment(strategy, routes, histories)
    if strategy == "joint":
        a1 = _with_sites(arch, 1)
        trainer = SupervisedTrainer(build_model(a1, config.seed, with_aux=False), corpus.train, config,
                                    route=lambda _s: 1, pooled=True)
        model = fit(trainer, "joint", a1)
        return Deployment(strategy, {s: (model, 1) for s in range(1, S + 1)}, histories)
    aS = _with_sites(arch, S)
    if strategy == "dsbn":
        trainer = SupervisedTrainer(build_model(aS, config.seed, with_aux=False), corpus.train, config)
        model = fit(trainer, "dsbn", aS)
    elif strategy == "msnet":
        trainer = MSNetTrainer(build_model(aS, config.seed, with_aux=True), corpus.train, config)
        model = strip_aux(fit(trainer, "msnet", aS))
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    return Deployment(strategy, {s: (model, s) for s in range(1, S + 1)}, histories)


def deployment_from_checkpoints(strategy: str, paths: list, num_sites: int) -> Deployment:
    """Rebuild a strategy's routing from checkpoints written by ``train``."""
    models = [load_checkpoint(p) for p in paths]
    if strategy == "separate":
        if len(models) != num_sites:
            raise ValueError(f"separate strategy needs {num_sites} checkpoints, got {len(models)}")
        return Deployment(strategy, {s: (m, 1) for s, m in enumerate(models, start=1)})
    if len(models) != 1:
        raise ValueError(f"{strategy} strategy takes one checkpoint, got {len(models)}")
    m = models[0]
    if strategy == "joint":
        return Deployment(strategy, {s: (m, 1) for s in range(1, num_sites + 1)})
    if m.num_sites != num_sites:
        raise ShapeError(f"checkpoint has {m.num_sites} normalization sites, corpus has {num_sites}")
    return Deployment(strategy, {s: (strip_aux(m), s) for s in range(1, num_sites + 1)})


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

@dataclass
class ProtocolResult:
    records: dict[str, MetricsRecord]
    deployments: dict[str, Deployment]
    ttests: dict[str, dict[str, dict]]
    alpha_sweep: list[dict]
    summary: dict


def ttest_matrix(records: dict[str, MetricsRecord]) -> dict[str, dict[str, dict]]:
    """Pairwise paired t-tests on per-sample overall Dice."""
    out: dict[str, dict[str, dict]] = {}
    names = list(records)
    for a in names:
        out[a] = {}
        for b in names:
            if a == b:
                continue
            t, p = paired_t_test(records[a].overall_dice(), records[b].overall_dice())
            out[a][b] = {"t": t, "p": p, "significant": bool(p < SIGNIFICANCE)}
    return out


def write_report(result: ProtocolResult, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "report.csv", out_dir / "summary.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("strategy", "site", "metric", "mean", "std", "n"))
        w.writeheader()
        for rec in result.records.values():
            for r in rec.rows():
                w.writerow({**r, "mean": repr(r["mean"]), "std": repr(r["std"])})
        for r in result.alpha_sweep:
            for metric in ("dice", "asd"):
                w.writerow({"strategy": f"msnet_alpha={r['alpha']:.1f}", "site": "overall", "metric": metric,
                            "mean": repr(r[f"{metric}_mean"]), "std": repr(r[f"{metric}_std"]), "n": r["n"]})
    with open(json_path, "w") as f:
        json.dump(result.summary, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")
    return csv_path, json_path


def _sweep_row(alpha: float, rec: MetricsRecord) -> dict:
    dice = 100.0 * np.asarray(rec.overall_dice())
    asd = np.asarray(rec.overall_asd())
    return {"alpha": alpha, "dice_mean": float(dice.mean()), "dice_std": float(dice.std()),
            "asd_mean": float(asd.mean()) if asd.size else float("nan"),
            "asd_std": float(asd.std()) if asd.size else float("nan"), "n": int(dice.size)}


def run_protocol(strategies, corpus: Corpus, config: TrainConfig, arch: ArchConfig, out_dir=None,
                 alpha_sweep=None, workdir=None, deployments: dict[str, Deployment] | None = None,
                 naming=None, summary_extra: dict | None = None,
                 progress: Callable[[str], None] | None = None) -> ProtocolResult:
    """Train (or take from ``deployments``) each strategy, evaluate on the test splits, report.

    ``alpha_sweep`` is an iterable of alpha values for additional MS-Net runs
    (``ALPHA_GRID`` for the full 0.0-1.0 grid).
    """
    strategies = list(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    if any(len(t) == 0 for t in corpus.test):
        raise ValueError("every site needs a non-empty test split")
    deployments = dict(deployments or {})
    records = {}
    for s in strategies:
        if progress:
            progress(f"strategy {s}")
        if s not in deployments:
            deployments[s] = train_strategy(s, corpus, config, arch, workdir, naming=naming)
        records[s] = evaluate(deployments[s], corpus.test)
    sweep = []
    for alpha in alpha_sweep or ():
        if progress:
            progress(f"alpha {alpha:.1f}")
        cfg = TrainConfig(**{**asdict(config), "alpha": float(alpha)})
        rec = evaluate(train_strategy("msnet", corpus, cfg, arch, workdir, naming=naming), corpus.test)
        sweep.append(_sweep_row(float(alpha), rec))
    ttests = ttest_matrix(records) if len(records) > 1 else {}
    summary = {
        "config": {"arch": asdict(arch), "train": asdict(config)},
        "seeds": {"train": config.seed, "corpus": corpus.seed, "separate": [config.seed + s for s in range(1, corpus.num_sites + 1)]},
        "corpus": {"sites": corpus.num_sites, "train": [len(t) for t in corpus.train],
                   "test": [len(t) for t in corpus.test], "fingerprint": corpus_fingerprint(corpus)},
        "results": {name: rec.rows() for name, rec in records.items()},
        "asd_failures": {name: {str(s): m.asd_failures for s, m in rec.per_site.items()} for name, rec in records.items()},
        "ttests": ttests,
        "alpha_sweep": sweep,
        **(summary_extra or {}),
    }
    result = ProtocolResult(records, deployments, ttests, sweep, summary)
    if out_dir is not None:
        write_report(result, out_dir)
    return result

