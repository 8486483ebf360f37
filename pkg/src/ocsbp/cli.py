"""Command-line entry point: gen, train, eval, segment, sample.

Exit codes: 0 ok, 2 configuration or usage error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import CorpusFormatError, PlacementError, SpriteSceneSpec, generate_corpus, read_corpus, split_indices, write_corpus
from .export import component_tiles, read_ppm, render_segmentation, tile_images, write_ppm
from .icsbp import parse_stop_policy
from .model import GenerationError, SceneVAE, build_model
from .nn import RngState
from .training import GecoState, NumericalError, evaluate, scaled_goal, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("ocsbp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _thread_limit():
    value = os.environ.get("OCSBP_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"OCSBP_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("OCSBP_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_json_arg(text: str) -> dict:
    path = Path(text)
    raw = text if text.lstrip().startswith("{") else path.read_text(encoding="utf-8")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _apply_precision(cfg: RunConfig) -> None:
    T.set_default_dtype(np.float64 if cfg.precision == "float64" else np.float32)


def _run_config_for(ckpt_path: Path) -> RunConfig:
    path = ckpt_path.resolve().parent.parent / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"no config.json found for checkpoint {ckpt_path} (looked at {path})")
    return RunConfig.load(path)


def _load_model(ckpt_path: str) -> tuple[SceneVAE, RunConfig]:
    path = Path(ckpt_path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    cfg = _run_config_for(path)
    _apply_precision(cfg)
    ckpt = load_checkpoint(path)
    model = build_model(cfg.model_config(), cfg.seed)
    ckpt.apply(model.store())
    return model, cfg


def _select_split(corpus, split: str, seed: int):
    if split == "all":
        return corpus
    return corpus.subset(split_indices(len(corpus), seed)[split])


# commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SpriteSceneSpec.from_dict(_load_json_arg(args.spec)) if args.spec else SpriteSceneSpec()
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    corpus = generate_corpus(spec, args.n, args.seed)
    write_corpus(corpus, args.out)
    log.info("wrote %d records to %s", args.n, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume and not args.config:
        cfg = _run_config_for(Path(args.resume))
    else:
        cfg = RunConfig.from_dict(_load_json_arg(args.config)) if args.config else RunConfig()
    if args.steps is not None:
        cfg.steps = args.steps
        cfg.validate()
    out = Path(args.out)
    data = args.data or cfg.data
    if not data:
        raise ConfigError("no corpus given: pass --data or set 'data' in the config")
    _apply_precision(cfg)
    corpus = _select_split(read_corpus(data), "train", cfg.split_seed)
    for sub in ("ckpt", "samples", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    resolved = RunConfig.from_dict({**cfg.to_dict(), "data": str(data), "out": str(out)})
    (out / "config.json").write_text(resolved.to_json(), encoding="utf-8")
    mcfg = cfg.model_config()
    log.info("GECO goal per value %.6g, per image %.6g",
             cfg.geco_goal, scaled_goal(cfg.geco_goal, mcfg.image_size, mcfg.channels))
    model = build_model(mcfg, cfg.seed)
    start, geco = 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        ckpt.apply(model.store())
        start = ckpt.step
        tc = cfg.train_config()
        geco = GecoState.create(scaled_goal(tc.geco_goal, mcfg.image_size, mcfg.channels),
                                beta_init=max(ckpt.beta, tc.beta_min), alpha_g=tc.geco_alpha,
                                eta_up=tc.geco_eta_up, eta_down=tc.geco_eta_down, beta_min=tc.beta_min)
        geco = dataclasses.replace(geco, ema_error=None if np.isnan(ckpt.ema_error) else ckpt.ema_error)
    result = train(model, corpus, cfg.train_config(), out_dir=out, start_step=start, geco=geco)
    log.info("finished at step %d, beta %.4g, ema error %.6g", result.step, result.geco.beta,
             result.geco.ema_error if result.geco.ema_error is not None else float("nan"))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    policy = parse_stop_policy(args.stop or cfg.resolved_policy())
    corpus = _select_split(read_corpus(args.data), args.split, cfg.split_seed)
    report = evaluate(model, corpus, policy, cfg.sigma_x, seed=args.seed, segment_from=args.segment_from)
    out = Path(args.out)
    report.write(out, out.with_name(out.stem + "_images.csv"))
    for key, value in report.summary.items():
        print(f"{key},{value!r}")
    return EXIT_OK


def cmd_segment(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    policy = parse_stop_policy(args.stop or cfg.resolved_policy())
    image = read_ppm(args.image).astype(T.get_default_dtype()) / 255.0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        result = model.encode(image, policy, RngState(args.seed))
    comps = result.components
    write_ppm(result.reconstruction.data[0], out / "reconstruction.ppm")
    write_ppm(render_segmentation(comps.masks_pi.data[0]), out / "segmentation.ppm")
    write_ppm(render_segmentation(result.attention.masks.data[0]), out / "attention.ppm")
    single = type(comps)(comps.means[0], comps.mask_logits[0])
    write_ppm(tile_images(component_tiles(single)), out / "components.ppm")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    if args.n < 1 or args.k < 1:
        raise ConfigError("--n and --k must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngState(args.seed)
    with T.no_grad():
        for i in range(args.n):
            images, comps = model.generate(args.k, rng, require_learned_prior=True)
            write_ppm(images.data[0], out / f"sample-{i:03d}.ppm")
            single = type(comps)(comps.means[0], comps.mask_logits[0])
            write_ppm(tile_images(component_tiles(single)), out / f"sample-{i:03d}-components.ppm")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ocsbp", description="Object-centric scene decomposition with stick-breaking attention.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a sprite corpus")
    g.add_argument("--spec", help="sprite spec as a JSON file or inline JSON object")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config as a JSON file or inline JSON object")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="override the total step count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--stop", help="fixed:K or mass:TAU,KMAX")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--segment-from", choices=("pi", "attention"), default="pi")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="segment one PPM image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stop")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_segment)

    m = sub.add_parser("sample", help="sample scenes from the prior")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--n", type=int, default=4)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = T.get_default_dtype()
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError, GenerationError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorpusFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        T.set_default_dtype(previous)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
