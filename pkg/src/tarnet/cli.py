"""``tarnet`` command line: synth, ingest, train, eval, gradcheck, inspect.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (NaN during training, failed gradient check).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import RunConfig, dump_config, load_config
from .data import by_split, ingest_directory, read_manifest, split, synth_corpus, write_manifest
from .encoder import EncoderConfig
from .errors import DataError, TarnetError, UsageError
from .frontend import Waveform, write_wav
from .gradcheck import DEFAULT_TOL, gradient_suites
from .metrics import approx_randomization
from .model import ModelConfig, TarnetModel, count_params, load_model, model_receptive_field
from .seeding import stream, stream_seed
from .train import TrainState, evaluate, train_loop

logger = logging.getLogger("tarnet")

PARAM_TARGET_TOLERANCE = 0.01


# -- configuration -------------------------------------------------------------

def effective_config(args) -> RunConfig:
    """Config file (if any) with command-line overrides applied on top."""
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    train = {
        key: getattr(args, key)
        for key in ("lr", "weight_decay", "momentum", "epochs", "batch_size", "crop_seconds")
        if getattr(args, key, None) is not None
    }
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        rc = rc.replace("data", seed=args.seed)
    if train:
        rc = rc.replace("train", **train)
    if getattr(args, "pooling", None):
        rc = rc.replace("pooling", kind=args.pooling)
    if getattr(args, "stages", None):
        rc = rc.replace("encoder", **vars(rc.encoder.with_stages(args.stages)))
    data = {
        key: getattr(args, attr)
        for key, attr in (("n_speakers", "speakers"), ("utt_per_spk", "utts"), ("duration", "duration"))
        if getattr(args, attr, None) is not None
    }
    if data:
        rc = rc.replace("data", **data)
    return rc


# -- synth / ingest ------------------------------------------------------------

def cmd_synth(args) -> int:
    rc = effective_config(args)
    d = rc.data
    corpus = synth_corpus(d.n_speakers, d.utt_per_spk, d.duration, seed=stream_seed(d.seed, "data"),
                          sample_rate=rc.frontend.sample_rate)
    split(corpus, d.fractions, seed=stream_seed(d.seed, "split"))
    out = Path(args.out)
    counters: dict[str, int] = {}
    for u in corpus:
        idx = counters.get(u.speaker, 0)
        counters[u.speaker] = idx + 1
        rel = Path("wavs") / u.speaker / f"utt{idx:03d}.wav"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_wav(out / rel, Waveform(u.samples, u.sample_rate))
        u.path = str(rel)
    write_manifest(out / "manifest.csv", corpus)
    dump_config(rc, out / "config.ini")
    print(f"wrote {len(corpus)} utterances from {d.n_speakers} speakers to {out / 'manifest.csv'}")
    return 0


def cmd_ingest(args) -> int:
    corpus = ingest_directory(args.root)
    seed = args.seed if args.seed is not None else 0
    split(corpus, tuple(args.fractions), seed=stream_seed(seed, "split"))
    write_manifest(args.out, corpus)
    n_spk = len({u.speaker_id for u in corpus})
    print(f"wrote {len(corpus)} utterances from {n_spk} speakers to {args.out}")
    return 0


# -- train ---------------------------------------------------------------------

def load_splits(manifest):
    corpus = read_manifest(manifest)
    train, val, test = by_split(corpus)
    if not train or not val:
        raise DataError(f"{manifest}: manifest needs train and val rows (run synth or ingest first)")
    return corpus, train, val, test


def run_training(rc: RunConfig, train, val, n_speakers: int, out_dir, resume=None, save_every: int = 0):
    """Build (or resume) a model and train it. Returns the final TrainState."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(rc, out / "config.ini")
    meta = {"run": rc.to_dict()}
    if resume is not None:
        state, _ = TrainState.load(resume)
        if state.model.cfg != rc.model_config(n_speakers):
            raise UsageError(f"{resume}: checkpoint model does not match the configuration")
    else:
        model = TarnetModel(rc.model_config(n_speakers), stream(rc.train.seed, "init"))
        state = TrainState.fresh(model, rc.train.seed)
    return train_loop(state, train, val, rc.train, rc.frontend, out, save_every, meta)


def _grid_worker(job):
    rc, train, val, n_speakers, out_dir, save_every = job
    logging.getLogger("tarnet").setLevel(logging.WARNING)
    state = run_training(rc, train, val, n_speakers, out_dir, save_every=save_every)
    return str(out_dir), state.best_val_top1


def run_grid(jobs_spec, jobs: int = 1):
    """Run independent training jobs, at most ``jobs`` at a time."""
    if jobs <= 1 or len(jobs_spec) <= 1:
        return [_grid_worker(j) for j in jobs_spec]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_grid_worker, jobs_spec))


def cmd_train(args) -> int:
    rc = effective_config(args)
    corpus, train, val, _ = load_splits(args.manifest)
    n_speakers = len({u.speaker_id for u in corpus})
    model_cfg = rc.model_config(n_speakers)
    TarnetModel(model_cfg, 0)  # width mismatches surface before step 0
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    stage_sets = args.stage_grid.split(",") if args.stage_grid else None
    if seeds or stage_sets:
        if args.resume:
            raise UsageError("--resume cannot be combined with --seeds/--stage-grid")
        jobs = []
        for seed, stages in itertools.product(seeds or [rc.train.seed], stage_sets or [None]):
            run = rc.replace("train", seed=seed)
            if stages:
                run = run.replace("encoder", **vars(rc.encoder.with_stages(stages)))
            jobs.append((run, train, val, n_speakers, out / f"{stages or 'run'}_seed{seed}", args.save_every))
        for path, best in run_grid(jobs, args.jobs):
            print(f"{path}: best val top1 {best:.4f}")
        return 0
    state = run_training(rc, train, val, n_speakers, out, args.resume, args.save_every)
    print(f"trained {state.epoch} epochs; best val top1 {max(state.best_val_top1, 0.0):.4f}; checkpoints in {out}")
    return 0


# -- eval ----------------------------------------------------------------------

def _frontend_from(meta, fallback: RunConfig):
    if "run" in meta:
        return RunConfig.from_dict(meta["run"]).frontend
    return fallback.frontend


def cmd_eval(args) -> int:
    model, _, meta = load_model(args.checkpoint)
    rc = effective_config(args)
    fcfg = _frontend_from(meta, rc)
    corpus = read_manifest(args.manifest)
    utts = [u for u in corpus if u.split == args.split] if args.split != "all" else corpus
    if not utts:
        raise DataError(f"{args.manifest}: no utterances in split {args.split!r}")
    report = evaluate(model, utts, fcfg, rc.train.eval_batch)
    print(f"{args.checkpoint} on {len(utts)} {args.split} utterances")
    print(report.table())
    result = {"checkpoint": str(args.checkpoint), "split": args.split, **report.as_row()}
    if args.compare:
        other, _, other_meta = load_model(args.compare)
        other_report = evaluate(other, utts, _frontend_from(other_meta, rc), rc.train.eval_batch)
        seed = args.seed if args.seed is not None else 0
        ar = approx_randomization(report.correct(1), other_report.correct(1), args.n_perm, stream_seed(seed, "ar"))
        print(f"compare {args.compare}: top1 {100 * other_report.top1:.2f}% "
              f"diff {100 * ar.observed:.2f} points, AR p = {ar.p_value:.4f} ({ar.n_permutations} rounds)")
        result.update(compare=str(args.compare), compare_top1=other_report.top1, ar_p=ar.p_value)
    if args.report:
        Path(args.report).write_text(json.dumps(result, indent=2) + "\n")
    return 0


# -- gradcheck -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    failed = []
    print(f"{'suite':<14} {'tensor':<44} {'max rel err':>12}  result")
    seed = args.seed if args.seed is not None else 0
    for suite, run in gradient_suites(seed, args.break_gln):
        for r in run():
            status = "ok" if r.passed else "FAIL"
            print(f"{suite:<14} {r.name:<44} {r.error:12.3e}  {status}")
            if not r.passed:
                failed.append(f"{suite}/{r.name}")
    elapsed = time.perf_counter() - t0
    if failed:
        print(f"gradcheck FAILED ({len(failed)} tensors above {DEFAULT_TOL:g}): {', '.join(failed[:8])}")
        print(f"elapsed {elapsed:.1f} s")
        return 4
    print(f"gradcheck passed: every tensor below {DEFAULT_TOL:g} relative error ({elapsed:.1f} s)")
    return 0


# -- inspect -------------------------------------------------------------------

SEARCH_GRID = dict(
    channels=(64, 96, 128, 160, 192, 256, 320, 384, 512),
    fusion=(128, 192, 256, 384, 512, 768, 1024, 1536),
    hidden_mult=(1, 2, 3, 4),
    embed_dim=(128, 192, 256, 512),
)


def search_params(target: float, base: ModelConfig, tolerance: float = PARAM_TARGET_TOLERANCE):
    """All (C, D, H, E) grid points whose parameter count is within ``tolerance`` of ``target``."""
    hits = []
    for c, d, mult, e in itertools.product(*SEARCH_GRID.values()):
        enc = EncoderConfig(**{**vars(base.encoder), "channels": c, "fusion": d, "hidden": mult * c})
        cfg = ModelConfig(**{**vars(base), "encoder": enc, "embed_dim": e})
        n = count_params(cfg)
        if abs(n - target) <= tolerance * target:
            hits.append((c, d, mult * c, e, n))
    return sorted(hits, key=lambda h: abs(h[-1] - target))


def cmd_inspect(args) -> int:
    rc = effective_config(args)
    n_speakers = args.speakers if args.speakers is not None else rc.data.n_speakers
    cfg = rc.model_config(n_speakers)
    if args.search_params:
        hits = search_params(args.search_params, cfg)
        print(f"configs within {100 * PARAM_TARGET_TOLERANCE:g}% of {args.search_params:.0f} parameters "
              f"({n_speakers} speakers, stages {''.join(s for s, d in zip('SML', cfg.encoder.stage_dilations) if d)}):")
        print(f"{'C':>5} {'D':>5} {'H':>5} {'E':>5} {'params':>10}")
        for c, d, h, e, n in hits:
            print(f"{c:>5} {d:>5} {h:>5} {e:>5} {n:>10}")
        print(f"{len(hits)} configs")
        return 0
    model = TarnetModel(cfg, 0)
    components: dict[str, int] = {}
    print(f"{'parameter':<50} {'shape':>12} {'size':>9}")
    for name, p in model.named_parameters():
        print(f"{name:<50} {str(p.shape):>12} {p.data.size:>9}")
        top = name.split(".")[0]
        components[top] = components.get(top, 0) + p.data.size
    print()
    for name, n in components.items():
        print(f"{name:<12} {n:>10}")
    total = sum(components.values())
    if total != count_params(cfg):
        raise TarnetError(f"parameter enumeration {total} disagrees with closed form {count_params(cfg)}")
    rf = model_receptive_field(cfg)
    print(f"{'total':<12} {total:>10} parameters")
    print(f"receptive field: {rf} frames = {rf * rc.frontend.hop_ms:.0f} ms ({rf * rc.frontend.hop_ms / 1000:.2f} s)")
    return 0


# -- parser --------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration (sections frontend, encoder, pooling, train, data)")
    p.add_argument("--seed", type=int, help="master seed for every random stream")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pooling", choices=["asp", "sp", "avg", "max"], help="temporal pooling variant")
    p.add_argument("--stages", help="temporal stages to keep, e.g. S, M, L or SML")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-speaker corpus")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int)
    p.add_argument("--utts", type=int, help="utterances per speaker")
    p.add_argument("--duration", type=float, help="seconds per utterance")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a manifest from root/<speaker>/*.wav")
    p.add_argument("root")
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.7, 0.1, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train on a manifest")
    _common(p)
    _model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints, epochs.csv and config.ini")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-seconds", type=float)
    p.add_argument("--save-every", type=int, default=0, help="also keep epoch_NNN.ckpt every N epochs")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.add_argument("--seeds", help="comma-separated seeds; one run per seed (uses --jobs)")
    p.add_argument("--stage-grid", help="comma-separated stage sets, e.g. S,M,L,SML; one run each")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on full-length utterances")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--compare", help="second checkpoint; runs the approximate-randomization test on Top-1")
    p.add_argument("--n-perm", type=int, default=10000)
    p.add_argument("--report", help="write metrics as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites on a tiny model")
    p.add_argument("--seed", type=int)
    p.add_argument("--break-gln", action="store_true", help="inject a wrong gLN gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="parameter counts and receptive field")
    _common(p)
    _model_flags(p)
    p.add_argument("--speakers", type=int, help="classifier width (default: data.n_speakers)")
    p.add_argument("--search-params", type=float, metavar="TARGET", help="list (C, D, H, E) grid configs near TARGET parameters")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except TarnetError as exc:
        print(f"tarnet {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"tarnet {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
