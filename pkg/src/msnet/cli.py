"""Command-line entry point: ``msnet {gen-data, train, eval, verify}``.

Configuration is a plain ``key = value`` file with sections ([data],
[model], [train], [run] and optional [profile.N] per site), plus
``key=value`` or ``section.key=value`` overrides on the command line.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .checkpoint import CheckpointError
from .data import SiteProfile, default_profiles, homogeneous_profiles, load_corpus, make_corpus, save_corpus
from .engine import ContractError, ShapeError
from .evaluation import ALPHA_GRID, STRATEGIES, bn_stats_export, deployment_from_checkpoints, run_protocol, train_strategy
from .model import ArchConfig, ConfigError
from .train import TrainConfig, write_history_csv
from .verify import main_report

logger = logging.getLogger("msnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "data": {"seed": 42, "n_train": 60, "n_test": 15, "image_size": 64, "profiles": "default", "num_sites": 3},
    "model": {"base_channels": 4, "depth": 4, "bottleneck_blocks": 2, "num_classes": 2},
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "run": {"strategy": "msnet", "strategies": "joint,separate,dsbn,msnet", "data_dir": "data",
            "out_dir": "runs", "checkpoint_every": 100},
}
PROFILE_KEYS = {f.name: f.default for f in fields(SiteProfile) if f.name != "site_id"}


class ValidationError(ValueError):
    """Bad configuration, arguments or incompatible inputs (exit code 1)."""


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.replace("(", "").replace(")", "").split(","))
        return raw.strip()
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


class RunConfig:
    """Resolved configuration: defaults, then the config file, then overrides."""

    def __init__(self):
        self.values = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
        self.profiles: dict[int, dict] = {}

    def set(self, dotted: str, raw: str) -> None:
        parts = dotted.strip().split(".")
        if parts[0] == "profile":
            if len(parts) != 3 or not parts[1].isdigit():
                raise ValidationError(f"profile override must look like profile.N.key, got {dotted!r}")
            self.set_profile(int(parts[1]), parts[2], raw)
            return
        if len(parts) == 1:
            owners = [sec for sec, vals in self.values.items() if parts[0] in vals]
            if not owners:
                raise ValidationError(f"unknown configuration key {parts[0]!r}")
            if len(owners) > 1:
                raise ValidationError(f"key {parts[0]!r} is ambiguous; write one of "
                                      + ", ".join(f"{o}.{parts[0]}" for o in owners))
            parts = [owners[0], parts[0]]
        if len(parts) != 2 or parts[0] not in self.values:
            raise ValidationError(f"unknown configuration section in {dotted!r}")
        sec, key = parts
        if key not in self.values[sec]:
            raise ValidationError(f"unknown configuration key {sec}.{key}")
        self.values[sec][key] = _convert(raw, DEFAULTS[sec][key], f"{sec}.{key}")

    def set_profile(self, site: int, key: str, raw: str) -> None:
        if key not in PROFILE_KEYS:
            raise ValidationError(f"unknown profile key profile.{site}.{key}")
        self.profiles.setdefault(site, {})[key] = _convert(raw, PROFILE_KEYS[key], f"profile.{site}.{key}")

    def load_file(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
        for sec in parser.sections():
            if sec.startswith("profile."):
                site = sec.split(".", 1)[1]
                if not site.isdigit():
                    raise ValidationError(f"{path}: section [{sec}] needs a numeric site id")
                for key, raw in parser[sec].items():
                    self.set_profile(int(site), key, raw)
            elif sec in self.values:
                for key, raw in parser[sec].items():
                    self.set(f"{sec}.{key}", raw)
            else:
                raise ValidationError(f"{path}: unknown section [{sec}]")

    # -- typed views ----------------------------------------------------------

    def site_profiles(self) -> list[SiteProfile]:
        d = self.values["data"]
        if d["profiles"] == "default":
            base = default_profiles()
        elif d["profiles"] == "homogeneous":
            base = homogeneous_profiles(d["num_sites"])
        else:
            raise ValidationError(f"data.profiles must be 'default' or 'homogeneous', got {d['profiles']!r}")
        ids = {p.site_id for p in base}
        for site in self.profiles:
            if site not in ids:
                raise ValidationError(f"profile.{site}: no such site (sites are {sorted(ids)})")
        try:
            return [SiteProfile(**{**asdict(p), **self.profiles.get(p.site_id, {})}) for p in base]
        except ValueError as exc:
            raise ValidationError(f"invalid site profile: {exc}") from None

    def arch(self, num_sites: int) -> ArchConfig:
        return ArchConfig(input_size=self.values["data"]["image_size"], num_sites=num_sites, **self.values["model"])

    def train(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def strategies(self) -> list[str]:
        out = [s.strip() for s in self.values["run"]["strategies"].split(",") if s.strip()]
        bad = [s for s in out + [self.values["run"]["strategy"]] if s not in STRATEGIES]
        if bad:
            raise ValidationError(f"unknown strategy {bad[0]!r}; choose from {', '.join(STRATEGIES)}")
        return out

    def resolved(self) -> dict:
        return {**{k: dict(v) for k, v in self.values.items()},
                "profiles": [asdict(p) for p in self.site_profiles()]}


def resolve_config(config_path, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    if config_path:
        cfg.load_file(config_path)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        cfg.set(key, raw)
    cfg.site_profiles()
    cfg.strategies()
    return cfg


def _naming(base: TrainConfig):
    def name(kind, arch, cfg):
        return kind if cfg.alpha == base.alpha else f"{kind}_alpha{cfg.alpha:.1f}"
    return name


def _load_corpus(cfg: RunConfig):
    corpus = load_corpus(cfg.values["run"]["data_dir"])
    if corpus.image_size != cfg.values["data"]["image_size"]:
        raise ValidationError(f"dataset image size {corpus.image_size} != data.image_size "
                              f"{cfg.values['data']['image_size']}")
    return corpus


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.values["data"]
    corpus = make_corpus(cfg.site_profiles(), d["n_train"], d["n_test"], d["seed"], d["image_size"])
    path = save_corpus(corpus, cfg.values["run"]["data_dir"])
    n = sum(len(t) for t in corpus.train) + sum(len(t) for t in corpus.test)
    print(f"wrote {n} samples from {corpus.num_sites} sites to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = _load_corpus(cfg)
    train_cfg = cfg.train()
    strategy = cfg.values["run"]["strategy"]
    out = Path(cfg.values["run"]["out_dir"])
    if args.restart:
        for p in out.glob(f"{strategy}*.ckpt"):
            p.unlink()
    dep = train_strategy(strategy, corpus, train_cfg, cfg.arch(corpus.num_sites), out,
                         cfg.values["run"]["checkpoint_every"], naming=_naming(train_cfg))
    for kind, hist in dep.histories.items():
        sites = corpus.num_sites if kind in ("joint", "dsbn", "msnet") else 1
        write_history_csv(hist, out / f"{kind}_history.csv", sites)
    (out / f"{strategy}_config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    print(f"trained {strategy}: checkpoints and loss history in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    corpus = _load_corpus(cfg)
    train_cfg = cfg.train()
    arch = cfg.arch(corpus.num_sites)
    out = Path(cfg.values["run"]["out_dir"])
    deployments = {}
    if args.checkpoint:
        strategy = cfg.values["run"]["strategy"]
        deployments[strategy] = deployment_from_checkpoints(strategy, args.checkpoint, corpus.num_sites)
        strategies = [strategy]
    else:
        strategies = cfg.strategies()
    result = run_protocol(strategies, corpus, train_cfg, arch, out_dir=out,
                          alpha_sweep=ALPHA_GRID if args.ablate_alpha else None,
                          workdir=out, deployments=deployments, naming=_naming(train_cfg),
                          summary_extra={"resolved_config": cfg.resolved()},
                          progress=lambda m: logger.info(m))
    for name, rec in result.records.items():
        per_site = "  ".join(f"site{s} {rec.mean_dice(s):6.2f}" for s in sorted(rec.per_site))
        print(f"{name:<9} dice overall {rec.mean_dice():6.2f}  {per_site}")
    for row in result.alpha_sweep:
        print(f"alpha {row['alpha']:.1f}  dice {row['dice_mean']:6.2f}")
    if args.bn_stats:
        models = {label: m for dep in result.deployments.values() for label, m in dep.models().items()}
        bn_stats_export(models, args.bn_stats)
        print(f"BN statistics written to {args.bn_stats}")
    print(f"report: {out / 'report.csv'}, {out / 'summary.json'}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig | None, args) -> int:
    return EXIT_OK if main_report(args.seed, args.sabotage) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msnet", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("overrides", nargs="*", help="key=value or section.key=value overrides")

    common(sub.add_parser("gen-data", help="write the synthetic multi-site corpus"))
    p = sub.add_parser("train", help="train run.strategy; resumes from an existing checkpoint")
    common(p)
    p.add_argument("--restart", action="store_true", help="discard existing checkpoints of this strategy")
    p = sub.add_parser("eval", help="evaluate checkpoints, or train and evaluate run.strategies")
    common(p)
    p.add_argument("--checkpoint", nargs="+", help="checkpoint(s) of run.strategy (one per site for separate)")
    p.add_argument("--ablate-alpha", action="store_true", help="add MS-Net runs over alpha = 0.0, 0.1, ..., 1.0")
    p.add_argument("--bn-stats", metavar="CSV", help="write per-layer running statistics of the evaluated models")
    p = sub.add_parser("verify", help="gradient checks and metric oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sabotage", metavar="OP", help="double the backward of OP to prove the checks catch it")
    return ap


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = None if args.command == "verify" else resolve_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, ConfigError, ContractError, ShapeError, CheckpointError, KeyError, ValueError) as exc:
        print(f"msnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surfaced to the caller as a runtime failure
        print(f"msnet: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
