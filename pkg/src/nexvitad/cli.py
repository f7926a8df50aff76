"""Command-line interface: ``nexvitad <command> --out RUN_DIR ...``.

Every command reads and rewrites ``RUN_DIR/config.json`` so later commands
pick up the settings of earlier ones. Output layout under ``--out``::

    config.json  log.jsonl  data/  checkpoints/  bank/  scores/  report.json
"""

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .backbone import Backbones
from .datagen import SplitConfig, load_dataset, make_split, read_manifest, save_dataset, synth_dataset
from .errors import (ConfigError, ContractError, DataError, NexViTADError, NumericError, ParameterError,
                     ShapeError, UndefinedMetricError)
from .fusion import FusionEncoder
from .inference import MemoryBank, anomaly_score_map, bench_inference, build_memory_bank
from .metrics import evaluate
from .numkernel import load_tensor, save_tensor
from .trainer import ModelConfig, TrainConfig, Trainer, build_model, grad_check_full_loss, load_model

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

K_SWEEP = (5, 10, 20, 30, 40)


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    split: dict = field(default_factory=lambda: SplitConfig.random(11, seed=0).to_dict())
    data: dict = field(default_factory=lambda: {"n_train": 40, "n_test": 20, "size": 64})
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    model: dict = field(default_factory=lambda: asdict(ModelConfig()))
    inference: dict = field(default_factory=lambda: {"K": 30, "eps_rel": 0.05, "M": 10, "sigma": 2.0,
                                                     "feature_mode": "fused", "bank_seed": 0})
    metrics: dict = field(default_factory=lambda: {"threshold_mode": "best", "tau": 0.5})
    seed: int = 0

    def __post_init__(self):
        # keep sections in their JSON form so a saved config compares equal to its source
        for k in ("split", "data", "train", "model", "inference", "metrics"):
            setattr(self, k, json.loads(json.dumps(getattr(self, k))))

    def split_config(self):
        return SplitConfig(**self.split)

    def train_config(self):
        return TrainConfig(**self.train)

    def model_config(self):
        return ModelConfig(**self.model)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = asdict(cls())
        for k, v in d.items():
            base[k] = {**base[k], **v} if isinstance(base[k], dict) else v
        return cls(**base)

    def validate(self):
        try:
            self.split_config().validate()
            self.train_config()
            self.model_config()
        except (TypeError, ParameterError) as e:
            raise ConfigError(str(e)) from e
        inf = self.inference
        if inf["K"] < 1 or inf["M"] < 1 or inf["sigma"] <= 0 or inf["eps_rel"] <= 0:
            raise ConfigError(f"invalid inference settings: {inf}")
        if self.metrics["threshold_mode"] not in ("best", "fixed"):
            raise ConfigError("threshold_mode must be 'best' or 'fixed'")
        return self


def parse_split(text, seed):
    """``"11/1"`` picks a seeded random partition; ``"0,1,2:3"`` lists classes explicitly."""
    if ":" in text:
        src, tgt = text.split(":")
        ids = lambda s: tuple(int(x) for x in s.split(",") if x.strip())  # noqa: E731
        return SplitConfig(ids(src), ids(tgt), seed)
    try:
        n_src, n_tgt = (int(x) for x in text.split("/"))
    except ValueError:
        raise ConfigError(f"cannot parse split {text!r}; use e.g. 11/1 or 0,1,2:3") from None
    return SplitConfig.random(n_src, n_src + n_tgt, seed)


def resolve_config(args):
    out = Path(args.out)
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(Path(args.config).read_text())
    elif (out / "config.json").exists():
        cfg = RunConfig.from_json((out / "config.json").read_text())
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.split["seed"] = args.seed
        cfg.train["seed"] = args.seed
    if getattr(args, "split", None):
        cfg.split = parse_split(args.split, cfg.seed).to_dict()
    for key in ("n_train", "n_test", "size"):
        if getattr(args, key, None) is not None:
            cfg.data[key] = getattr(args, key)
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
        cfg.train["warmup_epochs"] = min(cfg.train["warmup_epochs"], args.epochs - 1)
        cfg.train["phase1_epochs"] = min(cfg.train["phase1_epochs"], args.epochs)
    if getattr(args, "no_pseudo", False):
        cfg.train["pseudo_enabled"] = False
    if getattr(args, "no_mtl", False):
        cfg.train["mtl_enabled"] = False
    for key in ("K", "M", "sigma", "eps_rel", "feature_mode"):
        if getattr(args, key, None) is not None:
            cfg.inference[key] = getattr(args, key)
    return cfg.validate()


def write_config(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())


# --------------------------------------------------------------------------
# shared helpers


def _dataset_split(cfg, out, data=None):
    manifest = Path(data) if data else out / "data" / "manifest.jsonl"
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no dataset manifest at {manifest}; run gen-data first")
    ds = load_dataset(manifest)
    sc = cfg.split_config()
    if ds.split_config is not None and ds.split_config.to_dict() != sc.to_dict():
        raise ConfigError(f"dataset was generated for split {ds.split_config.to_dict()}, config has {sc.to_dict()}")
    return ds, make_split(ds, sc, n_bank=cfg.inference["M"]), manifest


def _checkpoint_dir(out, given=None):
    if given:
        return Path(given)
    latest = out / "checkpoints" / "LATEST"
    if not latest.exists():
        raise DataError(f"no checkpoint under {out / 'checkpoints'}; run train first")
    return out / "checkpoints" / latest.read_text().strip()


def _bank_dir(out, K):
    return out / "bank" / f"K{K}"


_RAMP = np.array([[0.0, 0.0, 0.5], [0.0, 0.5, 1.0], [0.0, 1.0, 0.5], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def heatmap_rgb(a):
    """Per-image min-max normalised map rendered on a blue-to-red ramp."""
    a = np.asarray(a, dtype=np.float64)
    span = a.max() - a.min()
    t = (a - a.min()) / span if span > 0 else np.zeros_like(a)
    x = t * (len(_RAMP) - 1)
    i = np.minimum(x.astype(int), len(_RAMP) - 2)
    w = (x - i)[..., None]
    return (1 - w) * _RAMP[i] + w * _RAMP[i + 1]


def _write_png(rgb, path):
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def _log_line(path, rec):
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    data_dir = out / "data"
    if data_dir.exists() and any(data_dir.iterdir()):
        if not args.force:
            raise ConfigError(f"{data_dir} exists; pass --force to overwrite")
        shutil.rmtree(data_dir)
    ds = synth_dataset(cfg.split_config(), **cfg.data)
    path = save_dataset(ds, data_dir)
    write_config(cfg, out)
    print(json.dumps({"manifest": str(path), "samples": len(ds.samples), "split": cfg.split_config().label}))
    return EXIT_OK


def cmd_train(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    _, split, _ = _dataset_split(cfg, out, args.data)
    tc, mc = cfg.train_config(), cfg.model_config()
    model = build_model(split, tc, mc)
    log_path = out / "log.jsonl"
    trainer = Trainer(model, split, tc, mc, log=lambda rec: _log_line(log_path, {"event": "epoch", **rec}))
    ckpt_root = out / "checkpoints"
    if args.resume:
        trainer.load_checkpoint(_checkpoint_dir(out))
    elif log_path.exists():
        log_path.unlink()
    write_config(cfg, out)
    until = tc.epochs if args.until is None else args.until
    every = args.checkpoint_every or tc.epochs
    while trainer.epoch < min(until, tc.epochs):
        trainer.run(until=min(until, (trainer.epoch // every + 1) * every))
        name = f"epoch_{trainer.epoch:03d}"
        trainer.save_checkpoint(ckpt_root / name)
        (ckpt_root / "LATEST").write_text(name)
    if not (ckpt_root / "LATEST").exists():
        trainer.save_checkpoint(ckpt_root / f"epoch_{trainer.epoch:03d}")
        (ckpt_root / "LATEST").write_text(f"epoch_{trainer.epoch:03d}")
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"epoch": trainer.epoch, "loss": last.get("loss"), "checkpoint": str(_checkpoint_dir(out))}))
    return EXIT_OK


def cmd_build_bank(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    _, split, _ = _dataset_split(cfg, out, args.data)
    model, _ = load_model(_checkpoint_dir(out, args.checkpoint))
    Ks = K_SWEEP if args.sweep else (cfg.inference["K"],)
    inf = cfg.inference
    summary = []
    for K in Ks:
        for c in sorted(split.bank):
            bank = build_memory_bank(model.encoder, np.stack(split.bank[c]).astype(model.dtype), K=K,
                                     eps_rel=inf["eps_rel"], seed=inf["bank_seed"], feature_mode=inf["feature_mode"])
            bank.meta["class_id"] = c
            bank.save(_bank_dir(out, K) / f"class_{c:02d}")
            summary.append({"K": K, "class_id": c, "M": bank.meta["M"]})
    write_config(cfg, out)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    _, split, _ = _dataset_split(cfg, out, args.data)
    model, _ = load_model(_checkpoint_dir(out, args.checkpoint))
    K = cfg.inference["K"]
    scores_dir = out / "scores"
    if scores_dir.exists():
        shutil.rmtree(scores_dir)
    scores_dir.mkdir(parents=True)
    index = []
    by_class = {}
    for s in split.target_test:
        by_class.setdefault(s.class_id, []).append(s)
    for c, items in sorted(by_class.items()):
        imgs = np.stack([s.image for s in items]).astype(model.dtype)
        if args.decoder_inference:
            maps = model.positive_probability(imgs, c)
        else:
            bank_path = _bank_dir(out, K) / f"class_{c:02d}"
            if not bank_path.exists():
                raise DataError(f"no memory bank at {bank_path}; run build-bank first")
            maps = anomaly_score_map(model.encoder, MemoryBank.load(bank_path), imgs,
                                     sigma=cfg.inference["sigma"]).A_prime
        for s, a in zip(items, maps):
            sid = f"class_{c:02d}_{s.index:04d}"
            save_tensor(scores_dir / f"{sid}.nxt", np.asarray(a, dtype=np.float64))
            _write_png(heatmap_rgb(a), scores_dir / f"{sid}.png")
            index.append({"id": sid, "class_id": c, "index": s.index, "is_defective": bool(s.is_defective)})
    mode = "decoder" if args.decoder_inference else "bank"
    (scores_dir / "index.json").write_text(json.dumps({"mode": mode, "K": K, "items": index}, indent=2))
    write_config(cfg, out)
    print(json.dumps({"scores": str(scores_dir), "n": len(index), "mode": mode}))
    return EXIT_OK


def cmd_eval(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    scores_dir = Path(args.scores) if args.scores else out / "scores"
    manifest = Path(args.manifest) if args.manifest else out / "data" / "manifest.jsonl"
    if not (scores_dir / "index.json").exists():
        raise DataError(f"no score index in {scores_dir}; run infer first")
    _, records = read_manifest(manifest)
    masks = {(r["class_id"], r["index"]): r for r in records if r["split"] == "test" and "mask_path" in r}
    index = json.loads((scores_dir / "index.json").read_text())
    maps, gts, ids = [], [], []
    for item in index["items"]:
        rec = masks.get((item["class_id"], item["index"]))
        if rec is None:
            raise DataError(f"manifest has no test mask for {item['id']}")
        gt = np.asarray(Image.open(manifest.parent / rec["mask_path"])) > 127
        maps.append(load_tensor(scores_dir / f"{item['id']}.nxt"))
        gts.append(gt.astype(np.uint8))
        ids.append(item["id"])
    m = cfg.metrics
    rep = evaluate(maps, gts, m["threshold_mode"], m["tau"], ids,
                   meta={"mode": index.get("mode"), "K": index.get("K"), "n_images": len(ids)})
    (out / "report.json").write_text(rep.to_json())
    print(json.dumps({"auc": rep.auc, "ap": rep.ap, "pro": rep.pro, "pro_threshold": rep.pro_threshold}))
    return EXIT_OK


def cmd_grad_check(args):
    rep = grad_check_full_loss(seed=args.seed, h=args.h, tol=args.tol)
    worst = rep.worst()
    print(json.dumps({"passed": bool(rep.passed), "max_rel_err": float(rep.max_rel_err),
                      "entries": int(rep.n_checked), "worst": [[k, float(v)] for k, v in worst]}))
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_bench(args):
    out = Path(args.out)
    cfg = resolve_config(args)
    try:
        encoder = load_model(_checkpoint_dir(out, args.checkpoint))[0].encoder
    except DataError:
        # no trained run yet: timing only depends on the architecture
        encoder = FusionEncoder(Backbones(cfg.model_config().backbone_spec()), cfg.seed)
    size = cfg.data["size"]
    images = np.random.default_rng(cfg.seed).random((max(args.batch), size, size, 3)).astype(np.float32)
    rows = bench_inference(encoder, images, tuple(args.bank_sizes), tuple(args.batch), repeats=args.repeats,
                           seed=cfg.seed, sigma=cfg.inference["sigma"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(rows, indent=2))
    print(json.dumps(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="nexvitad", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (NEXVITAD_THREADS overrides)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", help="RunConfig JSON to start from")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="generate the synthetic texture corpus")
    common(sp)
    sp.add_argument("--split", help="e.g. 11/1, 8/4 or 0,1,2:3")
    sp.add_argument("--n-train", dest="n_train", type=int)
    sp.add_argument("--n-test", dest="n_test", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train adapters, projection and heads")
    common(sp)
    sp.add_argument("--data", help="dataset manifest (default RUN/data/manifest.jsonl)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--until", type=int, help="stop after this epoch (resume later)")
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--no-pseudo", dest="no_pseudo", action="store_true")
    sp.add_argument("--no-mtl", dest="no_mtl", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("build-bank", help="Sinkhorn K-means memory banks per target class")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--K", type=int)
    sp.add_argument("--M", type=int)
    sp.add_argument("--eps-rel", dest="eps_rel", type=float)
    sp.add_argument("--feature-mode", dest="feature_mode", choices=("fused", "hiera"))
    sp.add_argument("--sweep", action="store_true", help=f"build K in {K_SWEEP}")
    sp.set_defaults(func=cmd_build_bank)

    sp = sub.add_parser("infer", help="score target test images")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--K", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--decoder-inference", dest="decoder_inference", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="pixel AUC, AP and PRO of a scores directory")
    common(sp)
    sp.add_argument("--scores")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check", help="finite-difference check of the full training loss")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("bench", help="inference time against bank size")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--K", dest="bank_sizes", type=int, nargs="+", default=list(K_SWEEP))
    sp.add_argument("--batch", type=int, nargs="+", default=[1, 5, 10, 15])
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)
    return p


def thread_count(args):
    env = os.environ.get("NEXVITAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"NEXVITAD_THREADS must be an integer, got {env!r}") from None
    return max(1, args.threads)


def exit_code(err):
    if isinstance(err, (ConfigError, ParameterError, ContractError, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    if isinstance(err, (DataError, UndefinedMetricError, ShapeError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_count(args)):
            return args.func(args)
    except (NexViTADError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"nexvitad {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
