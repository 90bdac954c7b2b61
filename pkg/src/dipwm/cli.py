"""Command-line entry point: train, embed, extract, verify, evaluate, calibrate.

Exit codes: 0 success or match, 1 no-match, 2 usage or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from yaml.constructor import SafeConstructor

from .fr_surrogates import ARCH_IDS, calibrate_threshold, load_embedder, partition_pool, save_embedder, train_surrogate
from .imaging_io import (
    EmptyInputError,
    PayloadRegistry,
    generate_synthetic_corpus,
    load_corpus_dir,
    load_image,
    payload_from_hex,
    payload_to_hex,
    save_image,
)
from .meta_trainer import LossWeights, TrainConfig, assign_targets, train
from .metrics_eval import bit_accuracy, evaluate_robustness, evaluate_transfer, quantize, ssim
from .noise_pool import DEFAULT_EVAL_SPECS, EvalProcessingSpec, NoisePoolConfig
from .watermark_codec import CodecConfig, ConfigurationError, hard_bits, load_codec

log = logging.getLogger("dipwm")

EXIT_OK, EXIT_NO_MATCH, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    """Bad config file or command arguments; maps to exit status 2."""


# ---------------------------------------------------------------- run config


@dataclass
class CorpusSection:
    dir: str | None = None  # <dir>/<split>/<identity>/<image>; synthetic corpus when unset
    n_identities: int = 16
    images_per_identity: int = 12
    seed: int = 1


@dataclass
class SurrogateSection:
    dir: str = "surrogates"
    archs: tuple = ARCH_IDS
    epochs: int = 40
    far: float = 0.01
    seed: int = 100

    def __post_init__(self):
        bad = [a for a in self.archs if a not in ARCH_IDS]
        if bad:
            raise ValueError(f"unknown architectures {bad}; choose from {list(ARCH_IDS)}")


@dataclass
class PathsSection:
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    surrogates: SurrogateSection = field(default_factory=SurrogateSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoisePoolConfig = field(default_factory=NoisePoolConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    paths: PathsSection = field(default_factory=PathsSection)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, where: str):
    """Check a scalar against the type of its default; lists become tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Strict YAML parsing: unknown sections/keys, duplicates and type mismatches are errors
    reported with their line number."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if root is None:
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    construct = SafeConstructor().construct_object
    sections = {}
    for key_node, val_node in root.value:
        name, line = key_node.value, key_node.start_mark.line + 1
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{line}: unknown section {name!r} (expected one of {sorted(SECTIONS)})")
        if name in sections:
            raise ConfigError(f"{source}:{line}: duplicate section {name!r}")
        if not isinstance(val_node, yaml.MappingNode):
            raise ConfigError(f"{source}:{line}: section {name!r} must be a mapping")
        cls = type(SECTIONS[name]())
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k_node, v_node in val_node.value:
            key, kline = k_node.value, k_node.start_mark.line + 1
            where = f"{source}:{kline}: {name}.{key}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key (expected one of {sorted(known)})")
            if key in kwargs:
                raise ConfigError(f"{where}: duplicate key")
            kwargs[key] = _coerce(construct(v_node, deep=True), _default_of(known[key]), where)
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}:{line}: section {name!r}: {exc}") from exc
    return RunConfig(**sections)


def load_run_config(path) -> tuple[RunConfig, Path]:
    """Parse ``path`` and resolve relative paths against the config file's folder."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    rc = parse_run_config(path.read_text(encoding="utf-8"), str(path))
    base = path.parent.resolve()

    def res(p):
        return None if p is None else str((base / p).resolve())

    rc.corpus = replace(rc.corpus, dir=res(rc.corpus.dir))
    rc.surrogates = replace(rc.surrogates, dir=res(rc.surrogates.dir))
    rc.paths = PathsSection(res(rc.paths.checkpoint_dir), res(rc.paths.report_dir))
    if rc.corpus.dir is not None and not Path(rc.corpus.dir).is_dir():
        raise ConfigError(f"{path}: corpus.dir {rc.corpus.dir} does not exist")
    if len(rc.surrogates.archs) < rc.train.P + rc.train.Q + 1:
        raise ConfigError(
            f"{path}: surrogates.archs lists {len(rc.surrogates.archs)} models, "
            f"need at least P+Q+1 = {rc.train.P + rc.train.Q + 1}"
        )
    return rc, path


def config_to_yaml(rc: RunConfig) -> str:
    data = {}
    for f in fields(rc):
        section = asdict(getattr(rc, f.name))
        data[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
    return yaml.safe_dump(data, sort_keys=False)


# ---------------------------------------------------------------- shared plumbing


def build_corpus(rc: RunConfig):
    c = rc.corpus
    if c.dir is not None:
        return load_corpus_dir(c.dir)
    return generate_synthetic_corpus(c.n_identities, c.images_per_identity, c.seed)


def _surrogate_names(archs) -> list[str]:
    return [a if list(archs).count(a) == 1 else f"{a}_{i}" for i, a in enumerate(archs)]


def build_pool(rc: RunConfig, corpus, train_missing: bool = True, recalibrate: bool = False):
    """Load (or train and calibrate) every surrogate, then split into the P/Q/held-out pool."""
    s = rc.surrogates
    out = Path(s.dir)
    out.mkdir(parents=True, exist_ok=True)
    models = []
    for i, (arch, name) in enumerate(zip(s.archs, _surrogate_names(s.archs))):
        path = out / f"{name}.pt"
        if path.exists():
            model = load_embedder(path)
            if model.arch_id != arch:
                raise ConfigError(f"{path} holds a {model.arch_id!r} model, config says {arch!r}")
        elif train_missing:
            log.info("training surrogate %s (%s)", name, arch)
            model = train_surrogate(corpus, arch, seed=s.seed + i, epochs=s.epochs, name=name)
            recalibrate = True
        else:
            raise ConfigError(f"surrogate {path} is missing; run `dipwm calibrate` or `dipwm train` first")
        if recalibrate or model.tau is None:
            calibrate_threshold(model, corpus, far=s.far)
            save_embedder(model, path)
        models.append(model)
    return partition_pool(models, rc.train.P, rc.train.Q)


def _codec_path(ckpt) -> Path:
    p = Path(ckpt)
    if p.is_dir():
        p = p / "codec.pt"
    if not p.is_file():
        raise ConfigError(f"checkpoint {p} does not exist")
    return p


def _load_codec(ckpt):
    return load_codec(_codec_path(ckpt))


def _read_image(path):
    if not Path(path).is_file():
        raise ConfigError(f"image {path} does not exist")
    return load_image(path)


@torch.no_grad()
def _probabilities(decoder, x) -> np.ndarray:
    return torch.sigmoid(decoder(x))[0].double().numpy()


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc, _ = load_run_config(args.config)
    if args.seed is not None:
        rc.train = replace(rc.train, seed=args.seed)
    torch.manual_seed(rc.train.seed)
    corpus = build_corpus(rc)
    pool = build_pool(rc, corpus, train_missing=True)
    ckpt = Path(rc.paths.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    (ckpt / "run_config.yaml").write_text(config_to_yaml(rc), encoding="utf-8")

    def progress(rec):
        log.info("epoch %d  l_dip %.4f  adv %.4f  inv %.5f  wm %.4f", rec["epoch"], rec["l_dip"],
                 rec["l_adv_total"], rec["l_inv_total"], rec["l_wm_total"])

    trainer = train(
        corpus, pool, rc.train, rc.noise, rc.weights, rc.codec,
        ckpt_dir=ckpt, log_path=ckpt / "train_log.jsonl", resume=args.resume, progress=progress,
    )
    print(f"trained {trainer.state.epoch} epochs; checkpoints in {ckpt}")
    return EXIT_OK


def cmd_embed(args) -> int:
    encoder, _, _ = _load_codec(args.ckpt)
    if Path(args.out).suffix.lower() != ".png":
        raise ConfigError(f"output {args.out} must be a .png file")
    try:
        w = payload_from_hex(args.payload, encoder.cfg.payload_bits)
    except ValueError as exc:
        raise ConfigError(f"payload: {exc}") from exc
    x = _read_image(args.image)
    with torch.no_grad():
        x_hat = quantize(encoder(x, torch.from_numpy(w.astype(np.float32))[None]))
    save_image(x_hat[0], args.out)
    print(f"wrote {args.out}  ssim={ssim(x, x_hat):.4f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    _, decoder, _ = _load_codec(args.ckpt)
    p = _probabilities(decoder, _read_image(args.image))
    bits = (p > 0.5).astype(int)
    confidence = np.maximum(p, 1 - p)
    print(json.dumps({
        "hex": payload_to_hex(bits),
        "bits": "".join(map(str, bits)),
        "confidence": [round(float(c), 4) for c in confidence],
        "mean_confidence": round(float(confidence.mean()), 4),
    }))
    return EXIT_OK


def cmd_verify(args) -> int:
    _, decoder, _ = _load_codec(args.ckpt)
    if not 0.0 <= args.min_acc <= 1.0:
        raise ConfigError("--min-acc must lie in [0, 1]")
    registry = PayloadRegistry.load(args.registry, decoder.cfg.payload_bits)
    if args.user not in registry:
        raise ConfigError(f"unknown user {args.user!r} in {args.registry}")
    w_hat = hard_bits(torch.logit(torch.from_numpy(_probabilities(decoder, _read_image(args.image)))))
    acc = bit_accuracy(registry[args.user], w_hat)
    matched = acc >= args.min_acc
    print(f"{'match' if matched else 'no-match'}  acc={acc:.4f}")
    return EXIT_OK if matched else EXIT_NO_MATCH


def cmd_evaluate(args) -> int:
    rc, _ = load_run_config(args.config)
    seed = rc.train.seed if args.seed is None else args.seed
    try:
        specs = [EvalProcessingSpec.parse(s) for s in args.processing] if args.processing else list(DEFAULT_EVAL_SPECS)
    except ValueError as exc:
        raise ConfigError(f"--processing: {exc}") from exc
    encoder, decoder, _ = _load_codec(args.ckpt)
    corpus = build_corpus(rc)
    pool = build_pool(rc, corpus, train_missing=False)
    target_map = assign_targets(corpus, rc.train.seed)
    report = evaluate_transfer(encoder, decoder, pool, corpus, target_map=target_map, seed=seed)
    report = report.extend(evaluate_robustness(encoder, decoder, pool, corpus, specs, target_map=target_map, seed=seed))
    out = Path(args.out or rc.paths.report_dir)
    jl, cs = report.write(out, "evaluation")
    sys.stdout.write(report.to_csv())
    print(f"wrote {jl} and {cs}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    rc, _ = load_run_config(args.config)
    if args.far is not None:
        rc.surrogates = replace(rc.surrogates, far=args.far)
    corpus = build_corpus(rc)
    pool = build_pool(rc, corpus, train_missing=True, recalibrate=True)
    roles = {id(m): r for r, ms in (("meta_train", pool.meta_train), ("meta_test", pool.meta_test),
                                     ("held_out", pool.held_out)) for m in ms}
    for m in pool.all_models:
        print(f"{m.name}\t{m.arch_id}\t{roles[id(m)]}\ttau={m.tau:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dipwm", description="Identity watermarking with meta-learned impersonation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train surrogates if absent, then the watermark codec")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the newest ckpt_<epoch>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write a watermarked PNG")
    p.add_argument("--ckpt", required=True, help="checkpoint directory or codec.pt")
    p.add_argument("--image", required=True)
    p.add_argument("--payload", required=True, help="payload as hex, MSB first")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="decode bits and per-bit confidence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="match an image against a registered user payload")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--min-acc", type=float, default=0.9)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", help="transfer and robustness report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--processing", action="append", metavar="SPEC",
                   help="e.g. jpeg:30, gaussian_noise:0.003, resize:0.5, gaussian_blur:3:30; repeatable")
    p.add_argument("--out", help="report directory (default: paths.report_dir)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="train missing surrogates and set thresholds at the FAR")
    p.add_argument("--config", required=True)
    p.add_argument("--far", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, EmptyInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
